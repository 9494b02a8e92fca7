//! Draw training records from the randomized-setup stream and shard them
//! to disk. Each record is one virtual pixel: an observation map built
//! under a sampled camera, rig, material, and perturbation, paired with
//! the ground-truth normal.

use nearlight::io::{read_records, write_records};
use nearlight::sampler::{record_stream, MaterialFamily, StreamConfig};

fn main() -> nearlight::Result<()> {
    let stream = StreamConfig::general(MaterialFamily::Mixed, 2024);
    let records = record_stream(&stream, 0, 8)?;

    for (k, r) in records.iter().enumerate() {
        println!(
            "record {k}: {} lights -> {} occupied cells, z {:.3} m, f {:.2}, \
             normal [{:+.3} {:+.3} {:+.3}]",
            r.light_count,
            r.map.occupancy(),
            r.z,
            r.f_norm,
            r.target.x,
            r.target.y,
            r.target.z
        );
    }

    let out = std::env::temp_dir().join("nearlight-examples/records.bin");
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let pairs: Vec<_> = records.into_iter().map(|r| (r.map, r.target)).collect();
    write_records(&out, stream.d, &pairs)?;

    let (d, back) = read_records(&out)?;
    println!(
        "shard roundtrip: {} records at resolution {d} from {}",
        back.len(),
        out.display()
    );
    Ok(())
}
