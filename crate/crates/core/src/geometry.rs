//! Gradient sets over a parameter ball and their Gaussian width / normed
//! Rademacher complexity estimators.
//!
//! A [`GradientSource`] exposes per-sample loss gradients `ξᵢ(θ)` on a convex
//! parameter set. The stacked gradient is `ξ̂_n(θ) = n^{-1/2}(ξ₁(θ); …; ξ_n(θ))`.
//! Both estimators share one outer/inner scheme: independent outer draws,
//! each maximized over `θ` by multi-start normalized projected ascent plus a
//! random-search baseline of the same number of points. Inner maxima are
//! never larger than the true supremum, so every estimate here is a lower
//! estimate of the corresponding set functional.

use serde::{Deserialize, Serialize};

use crate::canonical::{InnerDiagnostics, WidthEstimate};
use crate::error::{dim_err, invalid, Error, Result};
use crate::exec::map_indexed;
use crate::network::{
    featurizer_direction_gradient, forward_unchecked, loss_and_gradient_unchecked,
    project_to_ball, NetworkConfig, NetworkParams, SpectralBall, UNIT_INPUT_TOL,
};
use crate::numerics::{dot, norm2, sample_rademacher, sub_vec, RngStream};

/// Relative step for finite-difference Hessian-vector products.
pub const HVP_STEP: f64 = 1e-5;

/// Per-sample gradients on a convex parameter set.
pub trait GradientSource: Sync {
    /// Parameter dimension `p`.
    fn dim(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn center(&self) -> Vec<f64>;
    fn contains(&self, theta: &[f64]) -> Result<bool>;
    fn project(&self, theta: &[f64]) -> Result<Vec<f64>>;
    fn random_point(&self, rng: &mut RngStream) -> Result<Vec<f64>>;
    /// Initial inner ascent step.
    fn default_step(&self) -> f64;
    /// `∇_θ ℓ(θ; zᵢ)`.
    fn sample_gradient(&self, theta: &[f64], i: usize) -> Result<Vec<f64>>;

    /// `∇²_θ ℓ(θ; zᵢ) · dir`, by central differences of the gradient.
    fn hvp(&self, theta: &[f64], i: usize, dir: &[f64]) -> Result<Vec<f64>> {
        let dn = norm2(dir);
        if dn == 0.0 {
            return Ok(vec![0.0; theta.len()]);
        }
        let h = HVP_STEP * (1.0 + norm2(theta)) / dn;
        let plus: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t + h * d).collect();
        let minus: Vec<f64> = theta.iter().zip(dir).map(|(t, d)| t - h * d).collect();
        let gp = self.sample_gradient(&plus, i)?;
        let gm = self.sample_gradient(&minus, i)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// True when the set is a single point, so no inner search is needed.
    fn is_singleton(&self) -> bool {
        false
    }
}

/// Inner maximization budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerBudget {
    pub restarts: usize,
    pub steps: usize,
    /// Initial step; `None` uses the source's default.
    #[serde(default)]
    pub step_size: Option<f64>,
}

impl Default for InnerBudget {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 50,
            step_size: None,
        }
    }
}

impl InnerBudget {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(invalid("inner restarts must be >= 1"));
        }
        if let Some(s) = self.step_size {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid(format!("inner step_size must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// `(1/√n)·(ξ₁; …; ξ_n)` at a recorded `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackedGradient {
    pub theta: Vec<f64>,
    pub entries: Vec<f64>,
    pub n: usize,
    pub p: usize,
}

impl StackedGradient {
    pub fn norm(&self) -> f64 {
        norm2(&self.entries)
    }

    /// `ξᵢ` scaled by `1/√n`.
    pub fn block(&self, i: usize) -> &[f64] {
        &self.entries[i * self.p..(i + 1) * self.p]
    }
}

fn ensure_member<S: GradientSource + ?Sized>(src: &S, theta: &[f64]) -> Result<()> {
    if theta.len() != src.dim() {
        return Err(dim_err(format!("theta of length {} for p = {}", theta.len(), src.dim())));
    }
    if !src.contains(theta)? {
        return Err(Error::OutsideBall("parameters lie outside the parameter set".into()));
    }
    Ok(())
}

fn all_gradients<S: GradientSource + ?Sized>(src: &S, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..src.num_samples())
        .map(|i| src.sample_gradient(theta, i))
        .collect()
}

pub fn stacked_gradient<S: GradientSource + ?Sized>(
    src: &S,
    theta: &[f64],
) -> Result<StackedGradient> {
    ensure_member(src, theta)?;
    let n = src.num_samples();
    let scale = 1.0 / (n as f64).sqrt();
    let mut entries = Vec::with_capacity(n * src.dim());
    for g in all_gradients(src, theta)? {
        entries.extend(g.into_iter().map(|v| v * scale));
    }
    Ok(StackedGradient {
        theta: theta.to_vec(),
        entries,
        n,
        p: src.dim(),
    })
}

/// `(1/n) Σ ∇ℓ(θ; zᵢ)`.
pub fn mean_gradient<S: GradientSource + ?Sized>(src: &S, theta: &[f64]) -> Result<Vec<f64>> {
    let n = src.num_samples() as f64;
    let mut acc = vec![0.0; src.dim()];
    for g in all_gradients(src, theta)? {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v / n;
        }
    }
    Ok(acc)
}

/// Normalized projected ascent with step halving on non-improvement.
///
/// `value` evaluates the objective, `ascent` returns `(value, gradient)`.
fn projected_ascent<S, V, A>(
    src: &S,
    start: Vec<f64>,
    step0: f64,
    steps: usize,
    value: V,
    ascent: A,
) -> Result<f64>
where
    S: GradientSource + ?Sized,
    V: Fn(&[f64]) -> Result<f64>,
    A: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut theta = start;
    let (mut best, mut grad) = ascent(&theta)?;
    let mut step = step0;
    for _ in 0..steps {
        let gn = norm2(&grad);
        if gn == 0.0 || !gn.is_finite() || step < 1e-12 * step0 {
            break;
        }
        let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g / gn).collect();
        let trial = src.project(&trial)?;
        let v = value(&trial)?;
        if v > best {
            best = v;
            theta = trial;
            grad = ascent(&theta)?.1;
        } else {
            step *= 0.5;
        }
    }
    Ok(best)
}

struct InnerResult {
    best: f64,
    ascent_won: bool,
}

/// Maximizes one outer objective over the parameter set.
fn inner_maximize<S, V, A>(
    src: &S,
    budget: &InnerBudget,
    rng: &RngStream,
    value: V,
    ascent: A,
) -> Result<InnerResult>
where
    S: GradientSource + ?Sized,
    V: Fn(&[f64]) -> Result<f64>,
    A: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let center = src.center();
    if src.is_singleton() {
        return Ok(InnerResult {
            best: value(&center)?,
            ascent_won: false,
        });
    }
    let step0 = budget.step_size.unwrap_or_else(|| src.default_step());
    let mut starts_rng = rng.named("inner-restarts");
    let mut ascent_best = f64::NEG_INFINITY;
    for r in 0..budget.restarts {
        let start = if r == 0 {
            center.clone()
        } else {
            src.random_point(&mut starts_rng)?
        };
        let v = projected_ascent(src, start, step0, budget.steps, &value, &ascent)?;
        ascent_best = ascent_best.max(v);
    }
    let mut search_rng = rng.named("random-search");
    let mut random_best = f64::NEG_INFINITY;
    for _ in 0..budget.restarts {
        let p = src.random_point(&mut search_rng)?;
        random_best = random_best.max(value(&p)?);
    }
    Ok(InnerResult {
        best: ascent_best.max(random_best),
        ascent_won: ascent_best > random_best,
    })
}

fn check_outer(outer: usize) -> Result<()> {
    if outer < 2 {
        return Err(invalid("outer sample count must be >= 2"));
    }
    Ok(())
}

fn summarize(results: Vec<Result<InnerResult>>, budget: &InnerBudget, scale: f64) -> Result<WidthEstimate> {
    let results: Vec<InnerResult> = results.into_iter().collect::<Result<_>>()?;
    let draws: Vec<f64> = results.iter().map(|r| r.best * scale).collect();
    let wins = results.iter().filter(|r| r.ascent_won).count();
    Ok(WidthEstimate::from_draws(
        &draws,
        Some(InnerDiagnostics {
            restarts: budget.restarts,
            steps: budget.steps,
            ascent_win_fraction: wins as f64 / results.len() as f64,
        }),
    ))
}

/// Loss gradient Gaussian width `E_g sup_θ ⟨ξ̂_n(θ), g⟩`, `g ~ N(0, I_{np})`.
///
/// The ascent direction `∇_θ⟨ξ̂_n(θ), g⟩ = n^{-1/2} Σᵢ Hᵢ(θ) gᵢ` is assembled
/// from per-sample Hessian-vector products.
pub fn lggw_estimate<S: GradientSource + ?Sized>(
    src: &S,
    rng: &RngStream,
    outer: usize,
    budget: &InnerBudget,
) -> Result<WidthEstimate> {
    check_outer(outer)?;
    budget.validate()?;
    let n = src.num_samples();
    let p = src.dim();
    let scale = 1.0 / (n as f64).sqrt();
    let outer_rng = rng.named("gaussian-outer");
    let results = map_indexed(outer, |k| {
        let draw = outer_rng.substream(k as u64);
        let g = draw.clone().gaussian_vec(n * p);
        let blocks: Vec<&[f64]> = g.chunks(p).collect();
        let value = |theta: &[f64]| -> Result<f64> {
            let mut acc = 0.0;
            for (i, gi) in blocks.iter().enumerate() {
                acc += dot(&src.sample_gradient(theta, i)?, gi);
            }
            Ok(acc * scale)
        };
        let ascent = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut grad = vec![0.0; p];
            for (i, gi) in blocks.iter().enumerate() {
                for (a, h) in grad.iter_mut().zip(src.hvp(theta, i, gi)?) {
                    *a += h * scale;
                }
            }
            Ok((value(theta)?, grad))
        };
        inner_maximize(src, budget, &draw, value, ascent)
    });
    summarize(results, budget, 1.0)
}

/// `‖Σᵢ εᵢ ξᵢ(θ)‖₂`.
fn signed_sum_norm<S: GradientSource + ?Sized>(src: &S, theta: &[f64], eps: &[f64]) -> Result<f64> {
    Ok(norm2(&signed_sum(src, theta, eps)?))
}

fn signed_sum<S: GradientSource + ?Sized>(src: &S, theta: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; src.dim()];
    for (i, e) in eps.iter().enumerate() {
        for (a, v) in acc.iter_mut().zip(src.sample_gradient(theta, i)?) {
            *a += e * v;
        }
    }
    Ok(acc)
}

fn nerc_inner<S: GradientSource + ?Sized>(
    src: &S,
    eps: &[f64],
    budget: &InnerBudget,
    rng: &RngStream,
) -> Result<InnerResult> {
    let value = |theta: &[f64]| signed_sum_norm(src, theta, eps);
    let ascent = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let s = signed_sum(src, theta, eps)?;
        let sn = norm2(&s);
        if sn == 0.0 {
            return Ok((0.0, vec![0.0; src.dim()]));
        }
        let u: Vec<f64> = s.iter().map(|v| v / sn).collect();
        let mut grad = vec![0.0; src.dim()];
        for (i, e) in eps.iter().enumerate() {
            for (a, h) in grad.iter_mut().zip(src.hvp(theta, i, &u)?) {
                *a += e * h;
            }
        }
        Ok((sn, grad))
    };
    inner_maximize(src, budget, rng, value, ascent)
}

/// How the Rademacher expectation is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    MonteCarlo { outer: usize },
    /// All `2ⁿ` sign patterns; only for `n ≤ 16`.
    Exhaustive,
}

/// Largest `n` for exhaustive sign enumeration.
pub const EXHAUSTIVE_MAX_N: usize = 16;

/// Normed empirical Rademacher complexity `(1/n) E_ε sup_θ ‖Σᵢ εᵢ ξᵢ(θ)‖₂`.
pub fn nerc_estimate<S: GradientSource + ?Sized>(
    src: &S,
    rng: &RngStream,
    mode: SignMode,
    budget: &InnerBudget,
) -> Result<WidthEstimate> {
    budget.validate()?;
    let n = src.num_samples();
    let scale = 1.0 / n as f64;
    let sign_rng = rng.named("rademacher");
    let results = match mode {
        SignMode::MonteCarlo { outer } => {
            check_outer(outer)?;
            map_indexed(outer, |k| {
                let draw = sign_rng.substream(k as u64);
                let eps = sample_rademacher(&mut draw.clone(), n)?;
                nerc_inner(src, &eps, budget, &draw)
            })
        }
        SignMode::Exhaustive => {
            if n > EXHAUSTIVE_MAX_N {
                return Err(invalid(format!(
                    "exhaustive sign enumeration needs n <= {EXHAUSTIVE_MAX_N}, got {n}"
                )));
            }
            map_indexed(1usize << n, |mask| {
                let eps = sign_pattern(mask, n);
                nerc_inner(src, &eps, budget, &sign_rng.substream(mask as u64))
            })
        }
    };
    let est = summarize(results, budget, scale)?;
    Ok(match mode {
        // The enumeration is the expectation itself.
        SignMode::Exhaustive => WidthEstimate { std_error: 0.0, ..est },
        SignMode::MonteCarlo { .. } => est,
    })
}

/// Signs `εᵢ = +1` where bit `i` of `mask` is set, else `−1`.
pub fn sign_pattern(mask: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

/// Absolute coordinates of the mean gradient, ascending.
pub fn sorted_gradient_profile<S: GradientSource + ?Sized>(
    src: &S,
    theta: &[f64],
) -> Result<Vec<f64>> {
    ensure_member(src, theta)?;
    Ok(sorted_abs(&mean_gradient(src, theta)?))
}

pub fn sorted_abs(v: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Largest per-sample gradient norm over the center and `points` random
/// members of the parameter set.
pub fn gradient_norm_sweep<S: GradientSource + ?Sized>(
    src: &S,
    points: usize,
    rng: &RngStream,
) -> Result<f64> {
    let center = src.center();
    let at = |theta: &[f64]| -> Result<f64> {
        Ok(all_gradients(src, theta)?
            .iter()
            .map(|g| norm2(g))
            .fold(0.0, f64::max))
    };
    let mut worst = at(&center)?;
    let maxima = map_indexed(points, |k| {
        let theta = src.random_point(&mut rng.substream(k as u64))?;
        at(&theta)
    });
    for m in maxima {
        worst = worst.max(m?);
    }
    Ok(worst)
}

/// Network gradient set: squared-loss gradients of `cfg` on a spectral ball.
#[derive(Clone, Debug)]
pub struct GradientSetSpec {
    pub cfg: NetworkConfig,
    pub ball: SpectralBall,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl GradientSetSpec {
    /// Requires `n ≥ 1` unit-norm inputs of length `d`.
    pub fn new(
        cfg: NetworkConfig,
        ball: SpectralBall,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        for x in &inputs {
            if (norm2(x) - 1.0).abs() > UNIT_INPUT_TOL {
                return Err(invalid("gradient set inputs must have unit norm"));
            }
        }
        Self::new_unchecked(cfg, ball, inputs, targets)
    }

    /// As [`GradientSetSpec::new`] without the unit-norm requirement.
    pub fn new_unchecked(
        cfg: NetworkConfig,
        ball: SpectralBall,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        ball.center.check_shapes(&cfg)?;
        if inputs.is_empty() {
            return Err(invalid("gradient set needs n >= 1 samples"));
        }
        if inputs.len() != targets.len() {
            return Err(dim_err("inputs and targets differ in length"));
        }
        if inputs.iter().any(|x| x.len() != cfg.input_dim) {
            return Err(dim_err("input length differs from input_dim"));
        }
        Ok(Self {
            cfg,
            ball,
            inputs,
            targets,
        })
    }

    pub fn params(&self, theta: &[f64]) -> Result<NetworkParams> {
        NetworkParams::from_flat(&self.cfg, theta)
    }
}

impl GradientSource for GradientSetSpec {
    fn dim(&self) -> usize {
        self.cfg.num_params()
    }

    fn num_samples(&self) -> usize {
        self.inputs.len()
    }

    fn center(&self) -> Vec<f64> {
        self.ball.center.to_flat()
    }

    fn contains(&self, theta: &[f64]) -> Result<bool> {
        self.ball.contains(&self.params(theta)?)
    }

    fn project(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(project_to_ball(&self.params(theta)?, &self.ball)?.to_flat())
    }

    fn random_point(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.ball.random_point(rng)?.to_flat())
    }

    fn default_step(&self) -> f64 {
        0.1 * self.ball.rho.max(self.ball.rho1)
    }

    fn sample_gradient(&self, theta: &[f64], i: usize) -> Result<Vec<f64>> {
        let params = self.params(theta)?;
        Ok(loss_and_gradient_unchecked(&self.cfg, &params, &self.inputs[i], self.targets[i])?.1)
    }

    fn is_singleton(&self) -> bool {
        self.ball.rho == 0.0 && self.ball.rho1 == 0.0
    }
}

/// Linear model `f(θ; x) = θᵀx` with squared loss on an L2 ball.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGradientSet {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl LinearGradientSet {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, center: Vec<f64>, radius: f64) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(dim_err("linear gradient set needs matching, non-empty inputs and targets"));
        }
        if inputs.iter().any(|x| x.len() != center.len()) {
            return Err(dim_err("input length differs from parameter dimension"));
        }
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(invalid(format!("radius must be >= 0, got {radius}")));
        }
        Ok(Self {
            inputs,
            targets,
            center,
            radius,
        })
    }
}

impl GradientSource for LinearGradientSet {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn num_samples(&self) -> usize {
        self.inputs.len()
    }

    fn center(&self) -> Vec<f64> {
        self.center.clone()
    }

    fn contains(&self, theta: &[f64]) -> Result<bool> {
        Ok(norm2(&sub_vec(theta, &self.center)) <= self.radius * (1.0 + 1e-12))
    }

    fn project(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let d = sub_vec(theta, &self.center);
        let n = norm2(&d);
        if n <= self.radius {
            return Ok(theta.to_vec());
        }
        let s = self.radius / n;
        Ok(self.center.iter().zip(&d).map(|(c, v)| c + s * v).collect())
    }

    fn random_point(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        let p = self.dim();
        let dir = rng.unit_sphere(p);
        let r = self.radius * rng.uniform().powf(1.0 / p as f64);
        Ok(self.center.iter().zip(&dir).map(|(c, d)| c + r * d).collect())
    }

    fn default_step(&self) -> f64 {
        0.1 * self.radius
    }

    fn sample_gradient(&self, theta: &[f64], i: usize) -> Result<Vec<f64>> {
        let x = &self.inputs[i];
        let r = dot(theta, x) - self.targets[i];
        Ok(x.iter().map(|v| r * v).collect())
    }

    /// `xᵢ xᵢᵀ dir`.
    fn hvp(&self, _theta: &[f64], i: usize, dir: &[f64]) -> Result<Vec<f64>> {
        let x = &self.inputs[i];
        let c = dot(x, dir);
        Ok(x.iter().map(|v| c * v).collect())
    }

    fn is_singleton(&self) -> bool {
        self.radius == 0.0
    }
}

/// A single parameter point whose per-sample gradients are fixed vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedGradients {
    pub gradients: Vec<Vec<f64>>,
}

impl FixedGradients {
    pub fn new(gradients: Vec<Vec<f64>>) -> Result<Self> {
        let p = gradients.first().map(Vec::len).ok_or_else(|| invalid("need n >= 1 gradients"))?;
        if p == 0 || gradients.iter().any(|g| g.len() != p) {
            return Err(dim_err("fixed gradients must share one non-zero length"));
        }
        Ok(Self { gradients })
    }
}

impl GradientSource for FixedGradients {
    fn dim(&self) -> usize {
        self.gradients[0].len()
    }

    fn num_samples(&self) -> usize {
        self.gradients.len()
    }

    fn center(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn contains(&self, theta: &[f64]) -> Result<bool> {
        Ok(theta.iter().all(|&v| v == 0.0))
    }

    fn project(&self, _theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.center())
    }

    fn random_point(&self, _rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.center())
    }

    fn default_step(&self) -> f64 {
        0.0
    }

    fn sample_gradient(&self, _theta: &[f64], i: usize) -> Result<Vec<f64>> {
        Ok(self.gradients[i].clone())
    }

    fn hvp(&self, _theta: &[f64], _i: usize, _dir: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dim()])
    }

    fn is_singleton(&self) -> bool {
        true
    }
}

/// `L0` (entries above a threshold) and `L1` norm of one featurizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    pub l0: usize,
    pub l1: f64,
}

pub fn sparsity(v: &[f64], l0_threshold: f64) -> Sparsity {
    Sparsity {
        l0: v.iter().filter(|x| x.abs() > l0_threshold).count(),
        l1: v.iter().map(|x| x.abs()).sum(),
    }
}

/// Default threshold for counting an entry as non-zero.
pub const L0_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_sample: Vec<Sparsity>,
    pub mean_l0: f64,
    pub max_l0: usize,
    pub mean_l1: f64,
    pub max_l1: f64,
}

/// Featurizer `L0`/`L1` norms for every sample of `spec` at `params`.
pub fn featurizer_sparsity(
    spec: &GradientSetSpec,
    params: &NetworkParams,
    l0_threshold: f64,
) -> Result<SparsityReport> {
    if !(l0_threshold >= 0.0) {
        return Err(invalid("l0_threshold must be >= 0"));
    }
    spec.ball.ensure_contains(params)?;
    let per_sample = spec
        .inputs
        .iter()
        .map(|x| {
            let cache = forward_unchecked(&spec.cfg, params, x)?;
            Ok(sparsity(cache.featurizer(), l0_threshold))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    Ok(SparsityReport {
        mean_l0: per_sample.iter().map(|s| s.l0 as f64).sum::<f64>() / n,
        max_l0: per_sample.iter().map(|s| s.l0).max().unwrap_or(0),
        mean_l1: per_sample.iter().map(|s| s.l1).sum::<f64>() / n,
        max_l1: per_sample.iter().map(|s| s.l1).fold(0.0, f64::max),
        per_sample,
    })
}

/// The weights-only view of a network spec, for featurizer objectives.
struct FeaturizerSet<'a> {
    spec: &'a GradientSetSpec,
    ball: SpectralBall,
    weight_len: usize,
}

impl<'a> FeaturizerSet<'a> {
    fn new(spec: &'a GradientSetSpec) -> Result<Self> {
        let mut ball = spec.ball.clone();
        ball.rho1 = 0.0;
        let weight_len = spec.cfg.num_params() - spec.cfg.output_width();
        Ok(Self { spec, ball, weight_len })
    }

    fn params(&self, w: &[f64]) -> Result<NetworkParams> {
        let mut theta = w.to_vec();
        theta.extend_from_slice(&self.ball.center.last);
        NetworkParams::from_flat(&self.spec.cfg, &theta)
    }

    fn weights(&self, p: &NetworkParams) -> Vec<f64> {
        let mut flat = p.to_flat();
        flat.truncate(self.weight_len);
        flat
    }
}

impl GradientSource for FeaturizerSet<'_> {
    fn dim(&self) -> usize {
        self.weight_len
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn center(&self) -> Vec<f64> {
        self.weights(&self.ball.center)
    }

    fn contains(&self, w: &[f64]) -> Result<bool> {
        self.ball.contains(&self.params(w)?)
    }

    fn project(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.weights(&project_to_ball(&self.params(w)?, &self.ball)?))
    }

    fn random_point(&self, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.weights(&self.ball.random_point(rng)?))
    }

    fn default_step(&self) -> f64 {
        0.1 * self.ball.rho
    }

    fn sample_gradient(&self, _w: &[f64], _i: usize) -> Result<Vec<f64>> {
        Err(Error::Unsupported("featurizer sets have no loss gradients".into()))
    }

    fn is_singleton(&self) -> bool {
        self.ball.rho == 0.0
    }
}

/// Gaussian width of `{h⁽ᴸ⁾(W, x) : W in the spectral ball}` for the single
/// input of `spec`; `ρ₁` plays no role. The inner gradient of `⟨h⁽ᴸ⁾, g⟩` is
/// the exact reverse pass.
pub fn featurizer_width_estimate(
    spec: &GradientSetSpec,
    rng: &RngStream,
    outer: usize,
    budget: &InnerBudget,
) -> Result<WidthEstimate> {
    if spec.inputs.len() != 1 {
        return Err(Error::Precondition(format!(
            "featurizer width is defined for a single sample, got n = {}",
            spec.inputs.len()
        )));
    }
    check_outer(outer)?;
    budget.validate()?;
    let set = FeaturizerSet::new(spec)?;
    let x = &spec.inputs[0];
    let m = spec.cfg.output_width();
    let outer_rng = rng.named("gaussian-outer");
    let results = map_indexed(outer, |k| {
        let draw = outer_rng.substream(k as u64);
        let g = draw.clone().gaussian_vec(m);
        let ascent = |w: &[f64]| -> Result<(f64, Vec<f64>)> {
            featurizer_direction_gradient(&spec.cfg, &set.params(w)?, x, &g)
        };
        let value = |w: &[f64]| -> Result<f64> {
            let cache = forward_unchecked(&spec.cfg, &set.params(w)?, x)?;
            Ok(dot(cache.featurizer(), &g))
        };
        inner_maximize(&set, budget, &draw, value, ascent)
    });
    summarize(results, budget, 1.0)
}

/// `sup ‖α⁽ᴸ⁾(W, x)‖₂` over the spectral ball, lower-estimated by the center,
/// `points` random members and `points` boundary points.
pub fn featurizer_norm_sweep(spec: &GradientSetSpec, points: usize, rng: &RngStream) -> Result<f64> {
    let x = &spec.inputs[0];
    let at = |p: &NetworkParams| -> Result<f64> {
        Ok(norm2(forward_unchecked(&spec.cfg, p, x)?.featurizer()))
    };
    let mut best = at(&spec.ball.center)?;
    let vals = map_indexed(points, |k| -> Result<f64> {
        let mut r = rng.substream(k as u64);
        let a = at(&spec.ball.random_point(&mut r)?)?;
        let b = at(&spec.ball.boundary_point(&mut r))?;
        Ok(a.max(b))
    });
    for v in vals {
        best = best.max(v?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_network, Activation, Architecture};
    use crate::numerics::expected_gaussian_norm;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn small_spec(rho: f64, rho1: f64, n: usize, seed: u64) -> GradientSetSpec {
        let cfg = NetworkConfig {
            arch: Architecture::Ffn,
            widths: vec![6, 5],
            input_dim: 3,
            sigma1: 1.0,
            activation: Activation::Tanh,
        };
        let mut rng = RngStream::new(seed, 0);
        let center = init_network(&cfg, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_sphere(3)).collect();
        let targets = (0..n).map(|_| rng.standard_normal()).collect();
        let ball = SpectralBall::new(center, rho, rho1).unwrap();
        GradientSetSpec::new(cfg, ball, inputs, targets).unwrap()
    }

    #[test]
    fn stacked_gradient_examples() {
        let spec = small_spec(0.5, 0.5, 1, 1);
        let c = spec.center();
        let s = stacked_gradient(&spec, &c).unwrap();
        assert_eq!(s.entries, spec.sample_gradient(&c, 0).unwrap());

        let mut same = small_spec(0.5, 0.5, 1, 1);
        same.inputs = vec![same.inputs[0].clone(); 5];
        same.targets = vec![same.targets[0]; 5];
        let s = stacked_gradient(&same, &c).unwrap();
        let single = norm2(&spec.sample_gradient(&c, 0).unwrap());
        assert_relative_eq!(s.norm(), single, max_relative = 1e-12);

        let zero = GradientSetSpec::new_unchecked(
            spec.cfg.clone(),
            spec.ball.clone(),
            vec![vec![0.0; 3]; 3],
            vec![0.0; 3],
        )
        .unwrap();
        assert!(stacked_gradient(&zero, &c).unwrap().entries.iter().all(|&v| v == 0.0));
        assert!(GradientSetSpec::new(spec.cfg.clone(), spec.ball.clone(), vec![vec![0.0; 3]], vec![0.0]).is_err());
    }

    #[test]
    fn stacked_gradient_rejects_outside_points() {
        let spec = small_spec(0.1, 0.1, 2, 2);
        let far: Vec<f64> = spec.center().iter().map(|v| v + 1.0).collect();
        assert!(matches!(stacked_gradient(&spec, &far), Err(Error::OutsideBall(_))));
    }

    #[test]
    fn stacked_norm_identity() {
        for seed in 0..20 {
            let spec = small_spec(0.5, 0.5, 6, seed);
            let theta = spec.random_point(&mut RngStream::new(seed, 1)).unwrap();
            let s = stacked_gradient(&spec, &theta).unwrap();
            let mean_sq = (0..6)
                .map(|i| norm2(&spec.sample_gradient(&theta, i).unwrap()).powi(2))
                .sum::<f64>()
                / 6.0;
            assert_relative_eq!(s.norm().powi(2), mean_sq, max_relative = 1e-12);
        }
    }

    #[test]
    fn singleton_sets_have_zero_width() {
        let spec = small_spec(0.0, 0.0, 3, 3);
        let est = lggw_estimate(&spec, &RngStream::new(3, 3), 400, &InnerBudget::default()).unwrap();
        assert!(est.value.abs() <= 3.0 * est.std_error, "{est:?}");
        let f = featurizer_width_estimate(&small_spec(0.0, 0.3, 1, 3), &RngStream::new(3, 4), 400, &InnerBudget::default())
            .unwrap();
        assert!(f.value.abs() <= 3.0 * f.std_error, "{f:?}");
    }

    /// Grid maximization of `⟨ξ̂(θ), g⟩` over a 2-D disc, sharing the outer draws.
    fn grid_width(set: &LinearGradientSet, rng: &RngStream, outer: usize) -> f64 {
        let side = 100;
        let mut grid = Vec::new();
        for a in 0..=side {
            for b in 0..=side {
                let u = -1.0 + 2.0 * a as f64 / side as f64;
                let v = -1.0 + 2.0 * b as f64 / side as f64;
                if u * u + v * v <= 1.0 {
                    grid.push(vec![set.center[0] + set.radius * u, set.center[1] + set.radius * v]);
                }
            }
        }
        let outer_rng = rng.named("gaussian-outer");
        let n = set.num_samples();
        let total: f64 = (0..outer)
            .map(|k| {
                let g = outer_rng.substream(k as u64).gaussian_vec(2 * n);
                grid.iter()
                    .map(|t| {
                        (0..n)
                            .map(|i| dot(&set.sample_gradient(t, i).unwrap(), &g[2 * i..2 * i + 2]))
                            .sum::<f64>()
                            / (n as f64).sqrt()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        total / outer as f64
    }

    #[test]
    fn linear_model_matches_grid_oracle() {
        let x = vec![0.6, 0.8];
        let set = LinearGradientSet::new(vec![x], vec![0.3], vec![0.2, 0.1], 1.0).unwrap();
        let rng = RngStream::new(21, 0);
        let est = lggw_estimate(&set, &rng, 300, &InnerBudget::default()).unwrap();
        let oracle = grid_width(&set, &rng, 300);
        assert!((est.value - oracle).abs() <= 0.02 * oracle.abs(), "{} vs {oracle}", est.value);
        assert!(est.value >= oracle - 1e-12);
    }

    #[test]
    fn lggw_is_below_the_cauchy_schwarz_envelope() {
        let spec = small_spec(0.4, 0.4, 2, 5);
        let rng = RngStream::new(5, 5);
        let est = lggw_estimate(&spec, &rng, 60, &InnerBudget { restarts: 3, steps: 15, step_size: None }).unwrap();
        // sup ‖ξ̂‖ lower-estimated by sampled points; the estimate must sit below the envelope.
        let sup = gradient_norm_sweep(&spec, 2000, &rng).unwrap();
        let envelope = 1.05 * sup * expected_gaussian_norm(spec.dim() * 2);
        assert!(est.value <= envelope + 3.0 * est.std_error, "{} vs {envelope}", est.value);
    }

    #[test]
    fn lggw_is_monotone_in_rho() {
        let rng = RngStream::new(9, 9);
        let budget = InnerBudget { restarts: 3, steps: 15, step_size: None };
        let small = lggw_estimate(&small_spec(0.1, 0.1, 2, 9), &rng, 60, &budget).unwrap();
        let large = lggw_estimate(&small_spec(0.6, 0.6, 2, 9), &rng, 60, &budget).unwrap();
        let se = (small.std_error.powi(2) + large.std_error.powi(2)).sqrt();
        assert!(small.value <= large.value + 3.0 * se, "{small:?} {large:?}");
    }

    #[test]
    fn nerc_exact_small_cases() {
        let one = FixedGradients::new(vec![vec![0.6, 0.8]]).unwrap();
        let r = nerc_estimate(&one, &RngStream::new(1, 1), SignMode::Exhaustive, &InnerBudget::default()).unwrap();
        assert_eq!(r.value, 1.0);
        let two = FixedGradients::new(vec![vec![1.0, 0.0]; 2]).unwrap();
        let r = nerc_estimate(&two, &RngStream::new(1, 1), SignMode::Exhaustive, &InnerBudget::default()).unwrap();
        assert_eq!(r.value, 0.5);
        let many = FixedGradients::new(vec![vec![1.0]; 17]).unwrap();
        assert!(nerc_estimate(&many, &RngStream::new(1, 1), SignMode::Exhaustive, &InnerBudget::default()).is_err());
    }

    #[test]
    fn linear_hvp_matches_finite_differences() {
        let set = LinearGradientSet::new(vec![vec![0.6, 0.8]], vec![0.3], vec![0.2, 0.1], 1.0).unwrap();
        let theta = [0.4, -0.2];
        let dir = [1.0, 2.0];
        let exact = set.hvp(&theta, 0, &dir).unwrap();
        let generic = {
            struct Wrap<'a>(&'a LinearGradientSet);
            impl GradientSource for Wrap<'_> {
                fn dim(&self) -> usize { self.0.dim() }
                fn num_samples(&self) -> usize { self.0.num_samples() }
                fn center(&self) -> Vec<f64> { self.0.center() }
                fn contains(&self, t: &[f64]) -> Result<bool> { self.0.contains(t) }
                fn project(&self, t: &[f64]) -> Result<Vec<f64>> { self.0.project(t) }
                fn random_point(&self, r: &mut RngStream) -> Result<Vec<f64>> { self.0.random_point(r) }
                fn default_step(&self) -> f64 { self.0.default_step() }
                fn sample_gradient(&self, t: &[f64], i: usize) -> Result<Vec<f64>> { self.0.sample_gradient(t, i) }
            }
            Wrap(&set).hvp(&theta, 0, &dir).unwrap()
        };
        for (a, b) in exact.iter().zip(&generic) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn profile_and_sparsity_examples() {
        assert_eq!(sorted_abs(&[0.1, -0.5, 0.2]), vec![0.1, 0.2, 0.5]);
        let s = sparsity(&[0.5, 0.0, -0.25], L0_THRESHOLD);
        assert_eq!(s.l0, 2);
        assert_relative_eq!(s.l1, 0.75);
        assert_eq!(sparsity(&[0.5, 0.0, -0.25], 0.5).l0, 0);

        let spec = small_spec(0.3, 0.3, 4, 7);
        let zero = GradientSetSpec::new_unchecked(
            spec.cfg.clone(),
            spec.ball.clone(),
            vec![vec![0.0; 3]; 2],
            vec![0.0; 2],
        )
        .unwrap();
        let r = featurizer_sparsity(&zero, &zero.ball.center, L0_THRESHOLD).unwrap();
        assert_eq!((r.max_l0, r.max_l1), (0, 0.0));
        assert!(sorted_gradient_profile(&zero, &zero.center()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn featurizer_width_respects_envelope() {
        let spec = small_spec(0.5, 0.0, 1, 11);
        let rng = RngStream::new(11, 0);
        let est = featurizer_width_estimate(&spec, &rng, 200, &InnerBudget { restarts: 3, steps: 20, step_size: None })
            .unwrap();
        let sup = featurizer_norm_sweep(&spec, 500, &rng).unwrap();
        let envelope = 1.05 * sup * expected_gaussian_norm(spec.cfg.output_width());
        assert!(est.value <= envelope + 3.0 * est.std_error);
        assert!(est.value > 0.0);
        assert!(featurizer_width_estimate(&small_spec(0.5, 0.0, 2, 11), &rng, 10, &InnerBudget::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn profile_is_non_decreasing(seed in 0u64..10_000, n in 1usize..5) {
            let spec = small_spec(0.3, 0.3, n, seed);
            let theta = spec.random_point(&mut RngStream::new(seed, 2)).unwrap();
            let prof = sorted_gradient_profile(&spec, &theta).unwrap();
            prop_assert!(prof.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(prof.len(), spec.dim());
        }
    }
}
