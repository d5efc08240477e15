//! Tail checks for the shifted increment condition and closed-form width and
//! generalization bounds, evaluated with every symbolic constant set to 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::canonical::{WidthEstimate, UNIT_CONSTANTS};
use crate::error::{invalid, Error, Result};
use crate::exec::map_indexed;
use crate::geometry::{
    featurizer_width_estimate, lggw_estimate, sign_pattern, GradientSetSpec, GradientSource,
    InnerBudget, EXHAUSTIVE_MAX_N,
};
use crate::network::{Architecture, NetworkConfig};
use crate::numerics::{norm2, RngStream};

/// Default grid of deviations `u`.
pub const DEFAULT_U_GRID: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// Sign patterns used by [`sic_tail_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignSampling {
    Exhaustive,
    MonteCarlo { trials: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCheckReport {
    pub u_grid: Vec<f64>,
    pub empirical_tail: Vec<f64>,
    /// `2 exp(−u²/2)`.
    pub bound: Vec<f64>,
    /// Binomial standard error at each grid point (0 for exhaustive runs).
    pub std_error: Vec<f64>,
    pub mu_hat: f64,
    pub n: usize,
    pub trials: usize,
    pub exhaustive: bool,
}

impl TailCheckReport {
    pub fn tail_holds(&self) -> bool {
        self.empirical_tail
            .iter()
            .zip(&self.bound)
            .zip(&self.std_error)
            .all(|((t, b), se)| *t <= b + 3.0 * se)
    }

    pub fn mu_holds(&self) -> bool {
        self.mu_hat <= 1.0 + 1e-12
    }

    pub fn passes(&self) -> bool {
        self.tail_holds() && self.mu_holds()
    }
}

/// Empirical tail of `|‖n^{-1/2} Σ εᵢ vᵢ‖₂ − μ̂|` against `2 exp(−u²/2)`.
///
/// Requires `Σ‖vᵢ‖² ≤ n`. Exhaustive mode enumerates all `2ⁿ` sign patterns
/// (`n ≤ 16`), so `μ̂` and the tail frequencies are exact.
pub fn sic_tail_check(
    vectors: &[Vec<f64>],
    sampling: SignSampling,
    rng: &RngStream,
    u_grid: &[f64],
) -> Result<TailCheckReport> {
    let n = vectors.len();
    if n == 0 {
        return Err(invalid("need at least one vector"));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(crate::error::dim_err("vectors differ in length"));
    }
    let total: f64 = vectors.iter().map(|v| norm2(v).powi(2)).sum();
    if total > n as f64 * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "sum of squared norms {total} exceeds n = {n}"
        )));
    }
    let scale = 1.0 / (n as f64).sqrt();
    let norm_for = |eps: &[f64]| -> f64 {
        let mut acc = vec![0.0; d];
        for (e, v) in eps.iter().zip(vectors) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += e * x;
            }
        }
        norm2(&acc) * scale
    };
    let (values, exhaustive) = match sampling {
        SignSampling::Exhaustive => {
            if n > EXHAUSTIVE_MAX_N {
                return Err(invalid(format!(
                    "exhaustive enumeration needs n <= {EXHAUSTIVE_MAX_N}, got {n}"
                )));
            }
            (map_indexed(1usize << n, |mask| norm_for(&sign_pattern(mask, n))), true)
        }
        SignSampling::MonteCarlo { trials } => {
            if trials < 2 {
                return Err(invalid("Monte-Carlo tail check needs >= 2 trials"));
            }
            let sign_rng = rng.named("rademacher");
            let vals = map_indexed(trials, |k| {
                let mut r = sign_rng.substream(k as u64);
                let eps: Vec<f64> = (0..n).map(|_| r.rademacher()).collect();
                norm_for(&eps)
            });
            (vals, false)
        }
    };
    let trials = values.len();
    let mu_hat = values.iter().sum::<f64>() / trials as f64;
    let bound: Vec<f64> = u_grid.iter().map(|u| 2.0 * (-u * u / 2.0).exp()).collect();
    let empirical_tail: Vec<f64> = u_grid
        .iter()
        .map(|&u| values.iter().filter(|&&v| (v - mu_hat).abs() >= u).count() as f64 / trials as f64)
        .collect();
    let std_error = bound
        .iter()
        .map(|b| {
            if exhaustive {
                0.0
            } else {
                let p = b.min(1.0);
                (p * (1.0 - p) / trials as f64).sqrt()
            }
        })
        .collect();
    Ok(TailCheckReport {
        u_grid: u_grid.to_vec(),
        empirical_tail,
        bound,
        std_error,
        mu_hat,
        n,
        trials,
        exhaustive,
    })
}

/// Normalized gradient differences `vᵢ = (ξᵢ(θ_a) − ξᵢ(θ_b)) / d̄`, with
/// `d̄ = ((1/n) Σ ‖ξᵢ(θ_a) − ξᵢ(θ_b)‖²)^{1/2}`, so that `Σ‖vᵢ‖² = n`.
pub fn gradient_increments<S: GradientSource + ?Sized>(
    src: &S,
    theta_a: &[f64],
    theta_b: &[f64],
) -> Result<Vec<Vec<f64>>> {
    for t in [theta_a, theta_b] {
        if t.len() != src.dim() {
            return Err(crate::error::dim_err("theta length differs from p"));
        }
        if !src.contains(t)? {
            return Err(Error::OutsideBall("increment endpoints must lie in the set".into()));
        }
    }
    let n = src.num_samples();
    let diffs = (0..n)
        .map(|i| {
            let a = src.sample_gradient(theta_a, i)?;
            let b = src.sample_gradient(theta_b, i)?;
            Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let dist = (diffs.iter().map(|d| norm2(d).powi(2)).sum::<f64>() / n as f64).sqrt();
    if dist == 0.0 {
        return Err(Error::Degenerate("gradient tuples coincide: zero distance".into()));
    }
    Ok(diffs
        .into_iter()
        .map(|d| d.into_iter().map(|v| v / dist).collect())
        .collect())
}

pub fn sic_from_gradients<S: GradientSource + ?Sized>(
    src: &S,
    theta_a: &[f64],
    theta_b: &[f64],
    sampling: SignSampling,
    rng: &RngStream,
    u_grid: &[f64],
) -> Result<TailCheckReport> {
    let v = gradient_increments(src, theta_a, theta_b)?;
    sic_tail_check(&v, sampling, rng, u_grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_value: f64,
    pub components: BTreeMap<String, f64>,
    pub convention: String,
    /// `(1 + ρ₁) e^{max β_l}`, reported for ResNets.
    pub exp_envelope: Option<f64>,
}

fn check_bound_args(cfg: &NetworkConfig, rho: f64, rho1: f64, featurizer_width: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    for (name, v) in [("rho", rho), ("rho1", rho1), ("featurizer_width", featurizer_width)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(cfg.betas(rho))
}

fn report(featurizer_width: f64, second: f64, envelope: Option<f64>) -> BoundReport {
    let components = BTreeMap::from([
        ("featurizer_term".to_string(), featurizer_width),
        ("depth_width_term".to_string(), second),
    ]);
    BoundReport {
        bound_value: featurizer_width + second,
        components,
        convention: UNIT_CONSTANTS.to_string(),
        exp_envelope: envelope,
    }
}

/// `w(A⁽ᴸ⁾) + (1+ρ₁) √m_L (∏β_l) Σ_l 1/(β_l √m_l)`, evaluated as
/// `Σ_l ∏_{k≠l} β_k / √m_l` so that vanishing `β_l` are handled.
pub fn ffn_width_bound(cfg: &NetworkConfig, rho: f64, rho1: f64, featurizer_width: f64) -> Result<BoundReport> {
    let betas = check_bound_args(cfg, rho, rho1, featurizer_width)?;
    let m_last = (cfg.output_width() as f64).sqrt();
    let sum: f64 = (0..betas.len())
        .map(|l| {
            let others: f64 = betas
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != l)
                .map(|(_, b)| b)
                .product();
            others / (cfg.widths[l] as f64).sqrt()
        })
        .sum();
    Ok(report(featurizer_width, (1.0 + rho1) * m_last * sum, None))
}

/// `w(A⁽ᴸ⁾) + ((1+ρ₁)/L) √m_L ∏(1 + β_l/L) Σ_l 1/((1 + β_l/L) √m_l)`.
pub fn resnet_width_bound(cfg: &NetworkConfig, rho: f64, rho1: f64, featurizer_width: f64) -> Result<BoundReport> {
    let betas = check_bound_args(cfg, rho, rho1, featurizer_width)?;
    let big_l = cfg.depth() as f64;
    let factors: Vec<f64> = betas.iter().map(|b| 1.0 + b / big_l).collect();
    let prod: f64 = factors.iter().product();
    let sum: f64 = factors
        .iter()
        .zip(&cfg.widths)
        .map(|(f, &m)| 1.0 / (f * (m as f64).sqrt()))
        .sum();
    let m_last = (cfg.output_width() as f64).sqrt();
    let second = (1.0 + rho1) / big_l * m_last * prod * sum;
    let beta_max = betas.iter().cloned().fold(0.0, f64::max);
    Ok(report(featurizer_width, second, Some((1.0 + rho1) * beta_max.exp())))
}

pub fn width_bound(cfg: &NetworkConfig, rho: f64, rho1: f64, featurizer_width: f64) -> Result<BoundReport> {
    match cfg.arch {
        Architecture::Ffn => ffn_width_bound(cfg, rho, rho1, featurizer_width),
        Architecture::Resnet => resnet_width_bound(cfg, rho, rho1, featurizer_width),
    }
}

/// `L(1 + ρ₁) β^{L−1}`: the FFN second term for equal widths.
pub fn ffn_equal_width_term(depth: usize, beta: f64, rho1: f64) -> f64 {
    depth as f64 * (1.0 + rho1) * beta.powi(depth as i32 - 1)
}

/// `(1 + β/L)^{L−1}`, the ResNet second term for equal widths and `ρ₁ = 0`.
pub fn resnet_equal_width_factor(depth: usize, beta: f64) -> f64 {
    (1.0 + beta / depth as f64).powi(depth as i32 - 1)
}

fn check_generalization_args(width: f64, n: usize, delta: f64) -> Result<()> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(width.is_finite() && width >= 0.0) {
        return Err(invalid(format!("width must be >= 0, got {width}")));
    }
    Ok(())
}

/// `2c̄ (‖∇L̂_n‖^α + 2(4w/√n + log(1/δ)/n)^α) + (log(1/δ)/n)^{α/2}`, `α ∈ [1, 2]`.
pub fn generalization_bound(
    grad_norm: f64,
    width: f64,
    n: usize,
    delta: f64,
    cbar: f64,
    alpha: f64,
) -> Result<f64> {
    check_generalization_args(width, n, delta)?;
    if !(1.0..=2.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [1, 2], got {alpha}")));
    }
    let nf = n as f64;
    let log_term = (1.0 / delta).ln() / nf;
    let stat = 4.0 * width / nf.sqrt() + log_term;
    Ok(2.0 * cbar * (grad_norm.powf(alpha) + 2.0 * stat.powf(alpha)) + log_term.powf(alpha / 2.0))
}

/// The `α = 1` case: `2c̄₁(‖∇L̂_n‖ + 2(4w/√n + log(1/δ)/n)) + √(log(1/δ)/n)`.
pub fn generalization_bound_eval(
    grad_norm: f64,
    width: f64,
    n: usize,
    delta: f64,
    cbar1: f64,
) -> Result<f64> {
    generalization_bound(grad_norm, width, n, delta, cbar1, 1.0)
}

/// Estimated single-sample width against the closed-form bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthBoundRecord {
    pub estimated_lggw_single_sample: WidthEstimate,
    pub featurizer_width: WidthEstimate,
    pub bound: BoundReport,
    /// Smallest `c` with `estimate ≤ c · bound`; 0 for a single-point set.
    pub satisfied_up_to_constant: f64,
}

pub fn width_vs_bound_check(
    spec: &GradientSetSpec,
    rng: &RngStream,
    outer: usize,
    budget: &InnerBudget,
) -> Result<WidthBoundRecord> {
    if spec.inputs.len() != 1 {
        return Err(Error::Precondition("width-bound check needs n = 1".into()));
    }
    let lggw = lggw_estimate(spec, &rng.named("lggw"), outer, budget)?;
    let feat = featurizer_width_estimate(spec, &rng.named("featurizer"), outer, budget)?;
    let bound = width_bound(&spec.cfg, spec.ball.rho, spec.ball.rho1, feat.value.max(0.0))?;
    let c_star = if spec.is_singleton() || bound.bound_value == 0.0 {
        0.0
    } else {
        lggw.value.max(0.0) / bound.bound_value
    };
    Ok(WidthBoundRecord {
        estimated_lggw_single_sample: lggw,
        featurizer_width: feat,
        bound,
        satisfied_up_to_constant: c_star,
    })
}
