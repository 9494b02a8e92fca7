//! Depth from normals: l1 gradient fitting in log-depth.
//!
//! Under perspective projection the image-plane gradient of w = log z is a
//! pointwise function of the unit normal, so normal integration becomes:
//! find w minimizing `sum |grad w - g|_1 + lambda * sum (w - w0)^2` over the
//! masked pixels, with midpoint-averaged forward differences (second-order
//! accurate) and natural (Neumann) boundaries.
//! The l1 term absorbs outlier normals; the tiny Tikhonov term anchors the
//! otherwise-free constant mode of each connected component to the initial
//! depth. ADMM alternates a soft-shrinkage step with a screened-Poisson
//! solve, done by preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, NormalMap};

/// Solver parameters; the defaults are what the reconstruction pipeline uses.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    /// Tikhonov weight toward the initial log-depth.
    pub lambda: f64,
    /// Initial ADMM penalty weight; rebalanced against the residuals while
    /// the solve runs.
    pub beta: f64,
    /// Over-relaxation factor of the splitting step, in (0, 2). Values
    /// around 1.5 accelerate some fields and slow others; 1.0 disables
    /// the mixing.
    pub relax: f64,
    /// Treat the initial depth as an approximate solution: start the
    /// splitting variables at its gradient residuals so the solve refines
    /// it, instead of jumping to the screened-Poisson fit of the field on
    /// the first step. Enable when re-integrating after a small change to
    /// the field; leave off for uninformative (flat) initializations.
    pub warm_start: bool,
    /// Maximum outer ADMM iterations.
    pub max_iters: usize,
    /// Relative tolerance on the primal and dual residuals and the change
    /// in w.
    pub tol: f64,
    /// Relative residual ceiling of the inner CG solve. The splitting
    /// steps tolerate loose inner solves, and the warm-started CG then
    /// finishes in a couple of iterations, so a loose ceiling buys far
    /// more outer progress per second than an exact one. Each step's
    /// actual tolerance tightens with the outer primal residual (down to
    /// 1e-8), so smooth fields still converge to machine-level accuracy.
    pub cg_tol: f64,
    /// Iteration cap of the inner CG solve.
    pub cg_max_iters: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            lambda: 1e-6,
            beta: 1.0,
            relax: 1.0,
            warm_start: false,
            max_iters: 1200,
            tol: 1e-6,
            cg_tol: 1e-3,
            cg_max_iters: 1000,
        }
    }
}

/// Target log-depth gradients (p along u, q along v) with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Convergence record of one `integrate` call.
#[derive(Debug, Clone)]
pub struct IntegrationReport {
    /// Objective of the retained solution after every outer iteration;
    /// non-increasing by construction.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-depth gradients implied by a normal map.
///
/// For pixel (u, v) with unit normal n, let
/// `t = ((u - cx)/fx) nx + ((v - cy)/fy) ny + nz` (the normal dotted with the
/// unnormalized viewing ray). Then `dw/du = -nx / (fx t)` and
/// `dw/dv = -ny / (fy t)`. Pixels with |t| < 1e-6 see the surface edge-on
/// and are masked out.
pub fn normals_to_gradients(cam: &CameraIntrinsics, normals: &NormalMap) -> GradientField {
    let (w, h) = (normals.width, normals.height);
    let mut field = GradientField {
        width: w,
        height: h,
        p: vec![0.0; w * h],
        q: vec![0.0; w * h],
        mask: vec![false; w * h],
    };
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            if !normals.mask[idx] {
                continue;
            }
            let n = normals.data[idx];
            let t = (u as f64 - cam.cx) / cam.fx * n.x + (v as f64 - cam.cy) / cam.fy * n.y + n.z;
            if t.abs() < 1e-6 {
                continue;
            }
            let p = -n.x / (cam.fx * t);
            let q = -n.y / (cam.fy * t);
            if !(p.is_finite() && q.is_finite()) {
                continue;
            }
            field.p[idx] = p;
            field.q[idx] = q;
            field.mask[idx] = true;
        }
    }
    field
}

/// One forward-difference equation between two masked pixels.
struct Edge {
    a: usize,
    b: usize,
    g: f64,
}

struct Domain {
    /// Frame index of each unknown.
    pixels: Vec<usize>,
    /// Connected-component id of each unknown.
    comp: Vec<usize>,
    /// Unknown count per component.
    comp_size: Vec<f64>,
    edges: Vec<Edge>,
    /// Graph degree of each unknown.
    degree: Vec<f64>,
}

fn build_domain(field: &GradientField, mask: &[bool]) -> Domain {
    let (w, h) = (field.width, field.height);
    let mut compact = vec![usize::MAX; w * h];
    let mut pixels = Vec::new();
    for (idx, &m) in mask.iter().enumerate() {
        if m {
            compact[idx] = pixels.len();
            pixels.push(idx);
        }
    }

    let mut edges = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            if !mask[idx] {
                continue;
            }
            let a = compact[idx];
            // Midpoint-averaged targets make the forward difference a
            // second-order approximation of the edge drop.
            if u + 1 < w && mask[idx + 1] {
                let g = 0.5 * (field.p[idx] + field.p[idx + 1]);
                edges.push(Edge { a, b: compact[idx + 1], g });
            }
            if v + 1 < h && mask[idx + w] {
                let g = 0.5 * (field.q[idx] + field.q[idx + w]);
                edges.push(Edge { a, b: compact[idx + w], g });
            }
        }
    }

    // Union-find over the edges to label connected components.
    let n = pixels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for e in &edges {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    let mut comp_of_root = vec![usize::MAX; n];
    let mut comp = vec![0usize; n];
    let mut comp_size = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        if comp_of_root[root] == usize::MAX {
            comp_of_root[root] = comp_size.len();
            comp_size.push(0.0);
        }
        comp[i] = comp_of_root[root];
        comp_size[comp[i]] += 1.0;
    }

    let mut degree = vec![0.0; n];
    for e in &edges {
        degree[e.a] += 1.0;
        degree[e.b] += 1.0;
    }

    Domain { pixels, comp, comp_size, edges, degree }
}

/// Subtract the per-component mean from a vector.
fn project_zero_mean(x: &mut [f64], dom: &Domain) {
    let mut means = vec![0.0; dom.comp_size.len()];
    for (i, v) in x.iter().enumerate() {
        means[dom.comp[i]] += v;
    }
    for (m, s) in means.iter_mut().zip(&dom.comp_size) {
        *m /= s;
    }
    for (i, v) in x.iter_mut().enumerate() {
        *v -= means[dom.comp[i]];
    }
}

/// `out = (2 lambda I + beta L) x` with L the masked graph Laplacian.
fn apply_operator(x: &[f64], dom: &Domain, lambda: f64, beta: f64, out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = 2.0 * lambda * v;
    }
    for e in &dom.edges {
        let diff = beta * (x[e.a] - x[e.b]);
        out[e.a] += diff;
        out[e.b] -= diff;
    }
}

/// Jacobi-preconditioned CG on the zero-mean subspace, warm-started at `x`.
fn solve_cg(
    x: &mut [f64],
    rhs: &[f64],
    dom: &Domain,
    lambda: f64,
    beta: f64,
    tol: f64,
    max_iters: usize,
) -> usize {
    let n = x.len();
    let mut r = vec![0.0; n];
    let mut ax = vec![0.0; n];
    apply_operator(x, dom, lambda, beta, &mut ax);
    for i in 0..n {
        r[i] = rhs[i] - ax[i];
    }
    project_zero_mean(&mut r, dom);

    let inv_diag: Vec<f64> = dom
        .degree
        .iter()
        .map(|d| 1.0 / (2.0 * lambda + beta * d.max(1e-30)))
        .collect();

    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    project_zero_mean(&mut z, dom);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();

    for iter in 0..max_iters {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * rhs_norm {
            return iter;
        }
        apply_operator(&p, dom, lambda, beta, &mut ax);
        let pap: f64 = p.iter().zip(&ax).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return iter;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ax[i];
        }
        project_zero_mean(&mut r, dom);
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        project_zero_mean(&mut z, dom);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta_cg = rz_new / rz.max(1e-300);
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta_cg * p[i];
        }
    }
    max_iters
}

fn objective(w: &[f64], w0: &[f64], dom: &Domain, lambda: f64) -> f64 {
    let mut obj = 0.0;
    for e in &dom.edges {
        obj += (w[e.b] - w[e.a] - e.g).abs();
    }
    for (wi, w0i) in w.iter().zip(w0) {
        obj += lambda * (wi - w0i) * (wi - w0i);
    }
    obj
}

/// Integrate a log-depth gradient field into a depth map.
///
/// The solve runs on the intersection of the field mask and the mask of the
/// initial depth `z0`, which must be positive there. Each connected
/// component keeps the mean log-depth of its initialization (the data term
/// is invariant to a per-component constant, and the Tikhonov term resolves
/// it at exactly that mean).
///
/// The splitting iterates may oscillate on fields with strong outlier
/// gradients, so the solver retains the lowest-objective iterate seen and
/// returns that; the reported objective trace describes the retained
/// solution and therefore never increases.
pub fn integrate(
    field: &GradientField,
    z0: &DepthMap,
    cfg: &IntegratorConfig,
) -> Result<(DepthMap, IntegrationReport)> {
    if field.width != z0.width || field.height != z0.height {
        return Err(Error::arg("gradient field and initial depth disagree in size"));
    }
    if !(cfg.lambda > 0.0 && cfg.beta > 0.0) {
        return Err(Error::arg("lambda and beta must be positive"));
    }
    if !(cfg.relax > 0.0 && cfg.relax < 2.0) {
        return Err(Error::arg("relaxation factor must be in (0, 2)"));
    }
    let mask: Vec<bool> = field
        .mask
        .iter()
        .zip(&z0.mask)
        .map(|(a, b)| *a && *b)
        .collect();
    let n_pix = mask.iter().filter(|&&m| m).count();
    if n_pix == 0 {
        return Err(Error::domain("integration mask is empty"));
    }
    for (idx, &m) in mask.iter().enumerate() {
        if m {
            if !(z0.data[idx].is_finite() && z0.data[idx] > 0.0) {
                return Err(Error::arg("initial depth must be positive on the mask"));
            }
            if !(field.p[idx].is_finite() && field.q[idx].is_finite()) {
                return Err(Error::arg("gradients must be finite on the mask"));
            }
        }
    }

    let dom = build_domain(field, &mask);
    let n = dom.pixels.len();
    let w0: Vec<f64> = dom.pixels.iter().map(|&i| z0.data[i].ln()).collect();
    let mut w = w0.clone();

    // Per-component means of w0; the solution is re-centered onto them.
    let mut target_mean = vec![0.0; dom.comp_size.len()];
    for i in 0..n {
        target_mean[dom.comp[i]] += w0[i];
    }
    for (m, s) in target_mean.iter_mut().zip(&dom.comp_size) {
        *m /= s;
    }
    let recenter = |w: &mut [f64]| {
        let mut means = vec![0.0; dom.comp_size.len()];
        for i in 0..w.len() {
            means[dom.comp[i]] += w[i];
        }
        for (m, s) in means.iter_mut().zip(&dom.comp_size) {
            *m /= s;
        }
        for i in 0..w.len() {
            w[i] += target_mean[dom.comp[i]] - means[dom.comp[i]];
        }
    };

    let ne = dom.edges.len();
    let mut d = vec![0.0; ne];
    if cfg.warm_start {
        // Start at the init's own residuals: the first w-update then leaves
        // w0 in place and shrinkage refines from there.
        for (de, e) in d.iter_mut().zip(&dom.edges) {
            *de = w0[e.b] - w0[e.a] - e.g;
        }
    }
    let mut dual = vec![0.0; ne];
    let mut rhs = vec![0.0; n];
    let mut report = IntegrationReport { objective: Vec::new(), iterations: 0, converged: false };
    let g_norm = dom
        .edges
        .iter()
        .map(|e| e.g * e.g)
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    let mut beta = cfg.beta;
    let mut shrink = 1.0 / beta;
    // The first w-update runs near-exact: on consistent fields that one
    // screened-Poisson fit is already the answer (and retention keeps it);
    // later steps track the outer primal residual, which is all the
    // splitting needs.
    let mut cg_tol = cfg.cg_tol.min(1e-8);
    let mut w_prev = w.clone();
    let mut w_best = w.clone();
    let mut best_obj = objective(&w, &w0, &dom, cfg.lambda);
    let mut d_prev = vec![0.0; ne];
    let mut s_pix = vec![0.0; n];

    for iter in 0..cfg.max_iters {
        // w-update: (2 lambda I + beta L) w = 2 lambda w0 + beta D^T (g + d - dual).
        for i in 0..n {
            rhs[i] = 2.0 * cfg.lambda * w0[i];
        }
        for (e, (de, be)) in dom.edges.iter().zip(d.iter().zip(&dual)) {
            let y = beta * (e.g + de - be);
            rhs[e.a] -= y;
            rhs[e.b] += y;
        }
        solve_cg(&mut w, &rhs, &dom, cfg.lambda, beta, cg_tol, cfg.cg_max_iters);
        recenter(&mut w);

        // d-update: soft shrinkage of the over-relaxed residual gradient.
        // The primal residual is measured against the unrelaxed value.
        d_prev.copy_from_slice(&d);
        let mut primal_sq = 0.0;
        for (e, ((de, dp), be)) in dom
            .edges
            .iter()
            .zip(d.iter_mut().zip(&d_prev).zip(dual.iter_mut()))
        {
            let diff = w[e.b] - w[e.a] - e.g;
            let t = cfg.relax * diff + (1.0 - cfg.relax) * *dp + *be;
            *de = t.signum() * (t.abs() - shrink).max(0.0);
            *be = t - *de;
            let r = diff - *de;
            primal_sq += r * r;
        }

        // Dual residual beta * D^T (d - d_prev) plus the matching scale
        // beta * D^T u, for the stopping rule and penalty balancing.
        s_pix.iter_mut().for_each(|v| *v = 0.0);
        for (e, (de, dp)) in dom.edges.iter().zip(d.iter().zip(&d_prev)) {
            let delta = beta * (de - dp);
            s_pix[e.a] -= delta;
            s_pix[e.b] += delta;
        }
        let dual_sq: f64 = s_pix.iter().map(|v| v * v).sum();
        s_pix.iter_mut().for_each(|v| *v = 0.0);
        for (e, be) in dom.edges.iter().zip(&dual) {
            let yv = beta * be;
            s_pix[e.a] -= yv;
            s_pix[e.b] += yv;
        }
        let y_norm = s_pix.iter().map(|v| v * v).sum::<f64>().sqrt();

        let obj = objective(&w, &w0, &dom, cfg.lambda);
        if obj < best_obj {
            best_obj = obj;
            w_best.copy_from_slice(&w);
        }
        report.objective.push(best_obj);
        report.iterations = iter + 1;

        let primal_rel = primal_sq.sqrt() / g_norm;
        // Forcing sequence: let the inner solve track the outer progress.
        cg_tol = (0.1 * primal_rel).clamp(1e-8, cfg.cg_tol);
        let dual_rel = if dual_sq == 0.0 {
            0.0
        } else {
            dual_sq.sqrt() / y_norm.max(1e-300)
        };
        let mut dw = 0.0;
        let mut wn = 0.0;
        for i in 0..n {
            dw += (w[i] - w_prev[i]) * (w[i] - w_prev[i]);
            wn += w[i] * w[i];
        }
        let change_rel = dw.sqrt() / wn.sqrt().max(1e-300);
        w_prev.copy_from_slice(&w);
        if iter > 0 && primal_rel < cfg.tol && dual_rel < cfg.tol && change_rel < cfg.tol {
            report.converged = true;
            break;
        }

        // Penalty balancing: keep the residual norms within 10x of each
        // other, but only while the solve is clearly unconverged; near the
        // fixed point the ratio is noise and rescaling would stall the
        // stopping rule. The stored duals are scaled by 1/beta, so they
        // rescale inversely whenever beta moves.
        if primal_rel.max(dual_rel) > 10.0 * cfg.tol {
            let (pr, du) = (primal_sq.sqrt(), dual_sq.sqrt());
            if pr > 10.0 * du && beta < 1e9 {
                beta *= 2.0;
                shrink = 1.0 / beta;
                dual.iter_mut().for_each(|b| *b *= 0.5);
            } else if du > 10.0 * pr && beta > 1e-6 {
                beta *= 0.5;
                shrink = 1.0 / beta;
                dual.iter_mut().for_each(|b| *b *= 2.0);
            }
        }
    }

    let mut depth = DepthMap::new(field.width, field.height);
    for (i, &idx) in dom.pixels.iter().enumerate() {
        depth.data[idx] = w_best[i].exp();
        depth.mask[idx] = true;
    }
    Ok((depth, report))
}
