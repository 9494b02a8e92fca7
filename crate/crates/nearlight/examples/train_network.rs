//! Train the compact network for a few thousand records and checkpoint it.
//! A real run streams hundreds of thousands of records at map resolution
//! 32; this demonstration uses resolution 16 and a short stream so it
//! finishes in seconds.

use nearlight::regressor::{train, CompactNet, TrainConfig};
use nearlight::sampler::{MaterialFamily, StreamConfig};

fn main() -> nearlight::Result<()> {
    let mut stream = StreamConfig::clean(MaterialFamily::Lambertian, 7);
    stream.d = 16;

    let mut net = CompactNet::new(16, 1)?;
    println!("network: {} parameters at resolution {}", net.param_count(), net.d());

    let cfg = TrainConfig {
        records: 4096,
        batch: 64,
        chunks: 4,
        ..Default::default()
    };
    let report = train(&mut net, &stream, &cfg)?;
    for (k, loss) in report.chunk_losses.iter().enumerate() {
        println!(
            "chunk {}/{}: mean angular loss {:.4} rad ({:.2} deg)",
            k + 1,
            report.chunk_losses.len(),
            loss,
            loss.to_degrees()
        );
    }

    let out = std::env::temp_dir().join("nearlight-examples/demo.net");
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    net.save(&out)?;
    let reloaded = CompactNet::load(&out)?;
    let echo = reloaded.echo.expect("training metadata travels with the file");
    println!(
        "checkpoint at {}: seed {}, {} records, batch {}",
        out.display(),
        echo.seed,
        echo.records,
        echo.batch
    );
    Ok(())
}
