//! Numerical check that the population SINCERE objective over one unit prototype per class is
//! minimized by a regular simplex.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexCheckConfig {
    pub e: usize,
    pub d: usize,
    pub tau: f64,
    pub steps: usize,
    /// Geodesic step length at the first iteration, decaying geometrically to `final_step`.
    pub initial_step: f64,
    pub final_step: f64,
    pub seed: u64,
}

impl SimplexCheckConfig {
    pub fn new(e: usize, d: usize, tau: f64) -> Self {
        Self {
            e,
            d,
            tau,
            steps: 5000,
            initial_step: 0.1,
            final_step: 1e-5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimplexReport {
    pub e: usize,
    pub d: usize,
    pub tau: f64,
    pub steps: usize,
    /// Whether a regular simplex fits in `d` dimensions (`d ≥ E − 1`).
    pub simplex_feasible: bool,
    /// Off-diagonal inner products `(i, j, s_ij)` for `i < j`, from the best iterate.
    pub pairwise: Vec<(usize, usize, f64)>,
    pub target: f64,
    pub max_deviation: f64,
    pub loss: f64,
    pub bound: f64,
    pub converged: bool,
    pub warning: Option<String>,
}

/// `log(1 + (E−1)·exp((−1/(E−1) − 1)/τ))`, the objective's value at a regular simplex.
pub fn sincere_simplex_bound(e: usize, tau: f64) -> f64 {
    let m = (e - 1) as f64;
    (m * ((-1.0 / m - 1.0) / tau).exp()).ln_1p()
}

/// `mean_i log(1 + Σ_{k≠i} exp((s_ik − 1)/τ))` over unit prototype rows.
pub fn population_sincere<'t>(protos: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let [e, _] = protos.shape();
    let mut off = Tensor::filled(e, e, 1.0);
    for i in 0..e {
        off.set(i, i, 0.0);
    }
    let s = protos.matmul(protos.transpose()?)?;
    s.add_scalar(-1.0)?
        .scale(1.0 / tau)?
        .exp()?
        .mul(protos.tape().leaf(off))?
        .sum(Reduce::Cols)?
        .add_scalar(1.0)?
        .log()?
        .mean(Reduce::All)
}

fn unit_rows(t: &mut Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let row = t.row_slice_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateNorm(format!("prototype {r} collapsed to zero")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(())
}

/// Removes each row's radial component from `g`.
fn tangential(g: &Tensor, p: &Tensor) -> Tensor {
    let mut out = g.clone();
    for r in 0..p.rows() {
        let radial: f64 = g.row_slice(r).iter().zip(p.row_slice(r)).map(|(a, b)| a * b).sum();
        for (o, pv) in out.row_slice_mut(r).iter_mut().zip(p.row_slice(r)) {
            *o -= radial * pv;
        }
    }
    out
}

/// Projected gradient descent on the sphere with normalized steps. Reports the iterate with the
/// lowest loss.
pub fn theory_check_sincere_simplex(cfg: &SimplexCheckConfig) -> Result<SimplexReport> {
    let SimplexCheckConfig { e, d, tau, steps, .. } = *cfg;
    if e < 2 || d < 2 {
        return Err(Error::Config(format!("need E ≥ 2 and d ≥ 2, got E = {e}, d = {d}")));
    }
    if !(tau > 0.0) || steps == 0 || !(cfg.initial_step > 0.0 && cfg.final_step > 0.0) {
        return Err(Error::Config("tau, steps and step lengths must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut protos = Tensor::new(e, d, (0..e * d).map(|_| StandardNormal.sample(&mut rng)).collect())?;
    unit_rows(&mut protos)?;

    let decay = (cfg.final_step / cfg.initial_step).powf(1.0 / steps.max(2).saturating_sub(1) as f64);
    let mut eta = cfg.initial_step;
    let mut best = (f64::INFINITY, protos.clone(), f64::INFINITY);
    let mut initial_grad = None;
    for step in 0..steps {
        let tape = Tape::checked();
        let p = tape.leaf(protos.clone());
        let loss = population_sincere(p, tau)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("simplex objective at step {step}")));
        }
        let g = tangential(&tape.backward(loss)?.wrt(p), &protos);
        let gnorm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let g0 = *initial_grad.get_or_insert(gnorm);
        if value < best.0 {
            best = (value, protos.clone(), gnorm / g0.max(f64::MIN_POSITIVE));
        }
        if gnorm == 0.0 {
            break;
        }
        for (w, gv) in protos.data_mut().iter_mut().zip(g.data()) {
            *w -= eta * gv / gnorm;
        }
        unit_rows(&mut protos)?;
        eta *= decay;
    }
    let (loss, protos, rel_grad) = best;
    let converged = rel_grad <= 1e-4;

    let target = -1.0 / (e - 1) as f64;
    let gram = protos.matmul(&protos.transpose())?;
    let mut pairwise = Vec::new();
    let mut max_deviation = 0.0_f64;
    for i in 0..e {
        for j in i + 1..e {
            let s = gram.get(i, j);
            max_deviation = max_deviation.max((s - target).abs());
            pairwise.push((i, j, s));
        }
    }
    let bound = sincere_simplex_bound(e, tau);
    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!(
            "tangential gradient still {rel_grad:.2e} of its initial size after {steps} steps; reporting best iterate"
        ));
    }
    if d + 1 < e {
        warnings.push(format!("d = {d} < E − 1 = {}: a regular simplex does not fit", e - 1));
    }
    Ok(SimplexReport {
        e,
        d,
        tau,
        steps,
        simplex_feasible: d + 1 >= e,
        pairwise,
        target,
        max_deviation,
        loss,
        bound,
        converged,
        warning: (!warnings.is_empty()).then(|| warnings.join("; ")),
    })
}
