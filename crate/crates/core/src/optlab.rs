//! Gradient descent on a fixed, reused sample set, with the deviation
//! `Δ(θ) = ‖∇L̂_n(θ) − ∇L_D(θ)‖₂` and gradient-domination ratios tracked per
//! step.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, invalid, Error, Result};
use crate::exec::map_indexed;
use crate::network::{
    forward_unchecked, loss_and_gradient_unchecked, NetworkConfig, NetworkParams,
};
use crate::numerics::{dot, linear_fit, mean_and_std_error, norm2, sub_vec, RngStream};

/// Steps with `‖∇L_D‖₂` at or below this are flagged instead of reported.
pub const RATIO_GRAD_FLOOR: f64 = 1e-10;
/// A run aborts once the empirical loss exceeds this multiple of its start.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Fresh population samples per training sample in Monte-Carlo mode.
pub const DEFAULT_ORACLE_FACTOR: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// A data distribution together with a per-sample loss.
pub trait LearningProblem: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, rng: &mut RngStream) -> Sample;
    /// `(ℓ(θ; z), ∇_θ ℓ(θ; z))`.
    fn loss_and_gradient(&self, theta: &[f64], z: &Sample) -> Result<(f64, Vec<f64>)>;
    /// `(L_D(θ), ∇L_D(θ))` in closed form, when available.
    fn population(&self, _theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        None
    }
    /// `L_D(θ*)` at the realizable optimum.
    fn optimal_loss(&self) -> f64;
}

/// `ℓ(θ; z) = ½(θ − z)²` with `z ~ N(μ, s²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarQuadratic {
    pub mean: f64,
    pub std: f64,
}

impl LearningProblem for ScalarQuadratic {
    fn dim(&self) -> usize {
        1
    }

    fn sample(&self, rng: &mut RngStream) -> Sample {
        Sample {
            x: Vec::new(),
            y: self.mean + self.std * rng.standard_normal(),
        }
    }

    fn loss_and_gradient(&self, theta: &[f64], z: &Sample) -> Result<(f64, Vec<f64>)> {
        let r = theta[0] - z.y;
        Ok((0.5 * r * r, vec![r]))
    }

    fn population(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let r = theta[0] - self.mean;
        Some((0.5 * r * r + 0.5 * self.std * self.std, vec![r]))
    }

    fn optimal_loss(&self) -> f64 {
        0.5 * self.std * self.std
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    UnitSphere,
    StandardGaussian,
}

impl InputLaw {
    fn draw(self, rng: &mut RngStream, d: usize) -> Vec<f64> {
        match self {
            InputLaw::UnitSphere => rng.unit_sphere(d),
            InputLaw::StandardGaussian => rng.gaussian_vec(d),
        }
    }

    /// `E[xxᵀ] = c·I`.
    fn second_moment(self, d: usize) -> f64 {
        match self {
            InputLaw::UnitSphere => 1.0 / d as f64,
            InputLaw::StandardGaussian => 1.0,
        }
    }
}

/// `y = θ*ᵀx + noise` with squared loss on `f(θ; x) = θᵀx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTeacher {
    pub theta_star: Vec<f64>,
    pub input_law: InputLaw,
    pub noise_std: f64,
}

impl LearningProblem for LinearTeacher {
    fn dim(&self) -> usize {
        self.theta_star.len()
    }

    fn sample(&self, rng: &mut RngStream) -> Sample {
        let x = self.input_law.draw(rng, self.dim());
        let y = dot(&self.theta_star, &x) + self.noise_std * rng.standard_normal();
        Sample { x, y }
    }

    fn loss_and_gradient(&self, theta: &[f64], z: &Sample) -> Result<(f64, Vec<f64>)> {
        let r = dot(theta, &z.x) - z.y;
        Ok((0.5 * r * r, z.x.iter().map(|v| r * v).collect()))
    }

    /// `∇L_D = c(θ − θ*)`, `L_D = ½c‖θ − θ*‖² + ½σ²` with `E[xxᵀ] = cI`.
    fn population(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let c = self.input_law.second_moment(self.dim());
        let diff = sub_vec(theta, &self.theta_star);
        let loss = 0.5 * c * dot(&diff, &diff) + 0.5 * self.noise_std * self.noise_std;
        Some((loss, diff.into_iter().map(|v| c * v).collect()))
    }

    fn optimal_loss(&self) -> f64 {
        0.5 * self.noise_std * self.noise_std
    }
}

/// Teacher network of the student's architecture; inputs uniform on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTeacher {
    pub cfg: NetworkConfig,
    pub teacher: NetworkParams,
    pub noise_std: f64,
}

impl NetworkTeacher {
    pub fn new(cfg: NetworkConfig, teacher: NetworkParams, noise_std: f64) -> Result<Self> {
        cfg.validate()?;
        teacher.check_shapes(&cfg)?;
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(invalid("noise_std must be >= 0"));
        }
        Ok(Self {
            cfg,
            teacher,
            noise_std,
        })
    }
}

impl LearningProblem for NetworkTeacher {
    fn dim(&self) -> usize {
        self.cfg.num_params()
    }

    fn sample(&self, rng: &mut RngStream) -> Sample {
        let x = rng.unit_sphere(self.cfg.input_dim);
        let f = forward_unchecked(&self.cfg, &self.teacher, &x)
            .expect("teacher shapes validated")
            .output;
        Sample {
            y: f + self.noise_std * rng.standard_normal(),
            x,
        }
    }

    fn loss_and_gradient(&self, theta: &[f64], z: &Sample) -> Result<(f64, Vec<f64>)> {
        let params = NetworkParams::from_flat(&self.cfg, theta)?;
        loss_and_gradient_unchecked(&self.cfg, &params, &z.x, z.y)
    }

    fn optimal_loss(&self) -> f64 {
        0.5 * self.noise_std * self.noise_std
    }
}

/// Mean loss and mean gradient over `samples`, summed in index order.
pub fn mean_loss_and_gradient<P: LearningProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    samples: &[Sample],
) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(invalid("need at least one sample"));
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for z in samples {
        let (l, g) = problem.loss_and_gradient(theta, z)?;
        loss += l;
        for (a, v) in grad.iter_mut().zip(g) {
            *a += v;
        }
    }
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

/// Source of `∇L_D` used to measure `Δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationMode {
    /// Closed form; only for problems that provide one.
    Analytic,
    /// `m` fresh samples, drawn once per run and held fixed.
    FreshMc { m: usize },
    /// The training samples themselves, so `Δ ≡ 0`.
    Shared,
}

/// `∇L_D` (and `L_D`) provider bound to one run.
pub enum PopulationOracle<'a> {
    Analytic,
    Samples(Vec<Sample>),
    Shared(&'a [Sample]),
}

/// `L_D(θ)`, `∇L_D(θ)` and, for sample-based oracles, the standard error of
/// the gradient estimate `(Σⱼ Var̂ⱼ / M)^{1/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub std_error: Option<f64>,
}

impl<'a> PopulationOracle<'a> {
    pub fn build<P: LearningProblem + ?Sized>(
        problem: &P,
        mode: PopulationMode,
        training: &'a [Sample],
        rng: &RngStream,
    ) -> Result<Self> {
        match mode {
            PopulationMode::Analytic => {
                if problem.population(&vec![0.0; problem.dim()]).is_none() {
                    return Err(Error::Unsupported(
                        "analytic population gradient requires a closed-form problem".into(),
                    ));
                }
                Ok(Self::Analytic)
            }
            PopulationMode::FreshMc { m } => {
                if m == 0 {
                    return Err(invalid("population sample count must be >= 1"));
                }
                let mut r = rng.named("population");
                Ok(Self::Samples((0..m).map(|_| problem.sample(&mut r)).collect()))
            }
            PopulationMode::Shared => Ok(Self::Shared(training)),
        }
    }

    pub fn evaluate<P: LearningProblem + ?Sized>(
        &self,
        problem: &P,
        theta: &[f64],
    ) -> Result<PopulationGradient> {
        let samples = match self {
            Self::Analytic => {
                let (loss, gradient) = problem
                    .population(theta)
                    .ok_or_else(|| Error::Unsupported("no closed-form population gradient".into()))?;
                return Ok(PopulationGradient {
                    loss,
                    gradient,
                    std_error: None,
                });
            }
            Self::Samples(s) => s.as_slice(),
            Self::Shared(s) => s,
        };
        let (loss, gradient) = mean_loss_and_gradient(problem, theta, samples)?;
        let m = samples.len() as f64;
        let std_error = if samples.len() > 1 {
            let mut sq = vec![0.0; theta.len()];
            for z in samples {
                let (_, g) = problem.loss_and_gradient(theta, z)?;
                for ((s, v), mu) in sq.iter_mut().zip(&g).zip(&gradient) {
                    *s += (v - mu) * (v - mu);
                }
            }
            Some((sq.iter().sum::<f64>() / (m - 1.0) / m).sqrt())
        } else {
            None
        };
        Ok(PopulationGradient {
            loss,
            gradient,
            std_error,
        })
    }
}

/// `∇L_D(θ)` under `mode`; sample modes draw from `rng` (or use `training`).
pub fn population_gradient<P: LearningProblem + ?Sized>(
    problem: &P,
    theta: &[f64],
    mode: PopulationMode,
    training: &[Sample],
    rng: &RngStream,
) -> Result<PopulationGradient> {
    PopulationOracle::build(problem, mode, training, rng)?.evaluate(problem, theta)
}

/// One GD step record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdStep {
    pub t: usize,
    /// SHA-256 of `θ_t` (little-endian `f64` bytes), hex.
    pub theta_hash: String,
    pub empirical_loss: f64,
    pub empirical_grad_norm: f64,
    pub population_loss: f64,
    pub population_grad_norm: f64,
    pub delta: f64,
    pub gd_ratio_a1: Option<f64>,
    pub gd_ratio_a2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdTrace {
    pub steps: Vec<GdStep>,
    /// `(t, θ_t)` every `⌈T/100⌉` steps, plus the final iterate.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_theta: Vec<f64>,
    pub optimal_loss: f64,
}

impl GdTrace {
    pub const CSV_HEADER: [&'static str; 8] = [
        "t",
        "loss",
        "emp_grad_norm",
        "pop_grad_norm",
        "delta",
        "ratio_a1",
        "ratio_a2",
        "flags",
    ];

    /// Rows matching [`GdTrace::CSV_HEADER`]; undefined ratios are empty and
    /// flagged `UNDEFINED`.
    pub fn csv_rows(&self) -> Vec<[String; 8]> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        self.steps
            .iter()
            .map(|s| {
                [
                    s.t.to_string(),
                    format!("{:.17e}", s.empirical_loss),
                    format!("{:.17e}", s.empirical_grad_norm),
                    format!("{:.17e}", s.population_grad_norm),
                    format!("{:.17e}", s.delta),
                    opt(s.gd_ratio_a1),
                    opt(s.gd_ratio_a2),
                    if s.gd_ratio_a1.is_none() { "UNDEFINED".into() } else { String::new() },
                ]
            })
            .collect()
    }

    pub fn max_delta(&self) -> f64 {
        self.steps.iter().map(|s| s.delta).fold(0.0, f64::max)
    }
}

pub fn theta_hash(theta: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in theta {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn ratio(pop_loss: f64, optimal: f64, grad_norm: f64, alpha: f64) -> Option<f64> {
    (grad_norm > RATIO_GRAD_FLOOR).then(|| (pop_loss - optimal) / grad_norm.powf(alpha))
}

/// GD with a fixed step on fixed training samples, for `T` steps
/// (`T + 1` records, `θ_0..θ_T`).
pub fn gd_on_samples<P: LearningProblem + ?Sized>(
    problem: &P,
    samples: &[Sample],
    oracle: &PopulationOracle<'_>,
    theta0: &[f64],
    eta: f64,
    steps: usize,
) -> Result<GdTrace> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(invalid(format!("step size must be >= 0, got {eta}")));
    }
    if theta0.len() != problem.dim() {
        return Err(dim_err("theta0 length differs from the problem dimension"));
    }
    let every = steps.div_ceil(100).max(1);
    let optimal = problem.optimal_loss();
    let mut theta = theta0.to_vec();
    let mut records = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::new();
    let mut initial_loss = None;
    for t in 0..=steps {
        let (loss, grad) = mean_loss_and_gradient(problem, &theta, samples)?;
        let limit = DIVERGENCE_FACTOR * initial_loss.unwrap_or(loss).max(f64::MIN_POSITIVE);
        if !loss.is_finite() || loss > limit {
            return Err(Error::Diverged { step: t, loss, limit });
        }
        initial_loss.get_or_insert(loss);
        let pop = oracle.evaluate(problem, &theta)?;
        let pop_norm = norm2(&pop.gradient);
        records.push(GdStep {
            t,
            theta_hash: theta_hash(&theta),
            empirical_loss: loss,
            empirical_grad_norm: norm2(&grad),
            population_loss: pop.loss,
            population_grad_norm: pop_norm,
            delta: norm2(&sub_vec(&grad, &pop.gradient)),
            gd_ratio_a1: ratio(pop.loss, optimal, pop_norm, 1.0),
            gd_ratio_a2: ratio(pop.loss, optimal, pop_norm, 2.0),
        });
        if t % every == 0 {
            snapshots.push((t, theta.clone()));
        }
        if t < steps {
            for (th, g) in theta.iter_mut().zip(&grad) {
                *th -= eta * g;
            }
        }
    }
    if snapshots.last().map(|s| s.0) != Some(steps) {
        snapshots.push((steps, theta.clone()));
    }
    Ok(GdTrace {
        steps: records,
        snapshots,
        final_theta: theta,
        optimal_loss: optimal,
    })
}

/// Draws `n` samples once from the `data` stream of `rng` and runs GD on them.
pub fn gd_with_reuse<P: LearningProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    eta: f64,
    steps: usize,
    n: usize,
    mode: PopulationMode,
    rng: &RngStream,
) -> Result<GdTrace> {
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    let mut data = rng.named("data");
    let samples: Vec<Sample> = (0..n).map(|_| problem.sample(&mut data)).collect();
    let oracle = PopulationOracle::build(problem, mode, &samples, rng)?;
    gd_on_samples(problem, &samples, &oracle, theta0, eta, steps)
}

/// Per-step GD ratios `(L_D(θ_t) − L_D(θ*)) / ‖∇L_D(θ_t)‖^α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTrace {
    pub alpha: f64,
    /// `None` marks an UNDEFINED step (`‖∇L_D‖ ≤ 1e-10`).
    pub ratios: Vec<Option<f64>>,
    pub running_max: Vec<Option<f64>>,
    pub defined_steps: usize,
}

pub fn gd_ratio_trace(trace: &GdTrace, alpha: f64) -> Result<RatioTrace> {
    if !(1.0..=2.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [1, 2], got {alpha}")));
    }
    let ratios: Vec<Option<f64>> = trace
        .steps
        .iter()
        .map(|s| ratio(s.population_loss, trace.optimal_loss, s.population_grad_norm, alpha))
        .collect();
    let defined_steps = ratios.iter().filter(|r| r.is_some()).count();
    if defined_steps == 0 {
        return Err(Error::Degenerate("every step has a vanishing population gradient".into()));
    }
    let mut best: Option<f64> = None;
    let running_max = ratios
        .iter()
        .map(|r| {
            if let Some(v) = r {
                best = Some(best.map_or(*v, |b: f64| b.max(*v)));
            }
            best
        })
        .collect();
    Ok(RatioTrace {
        alpha,
        ratios,
        running_max,
        defined_steps,
    })
}

/// Shared settings for the sample-reuse experiments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseSettings {
    pub eta: f64,
    pub steps: usize,
    pub trials: usize,
    pub mode: PopulationMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseRow {
    pub n: usize,
    pub steps: usize,
    pub mean_max_delta: f64,
    pub std_error: f64,
}

impl ReuseRow {
    pub const CSV_HEADER: [&'static str; 4] = ["n", "T", "mean_max_delta", "std_error"];
}

fn mean_max_delta<P: LearningProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    n: usize,
    steps: usize,
    s: &ReuseSettings,
    rng: &RngStream,
) -> Result<ReuseRow> {
    let maxima = map_indexed(s.trials, |k| -> Result<f64> {
        let trace = gd_with_reuse(problem, theta0, s.eta, steps, n, s.mode, &rng.substream(k as u64))?;
        Ok(trace.max_delta())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let (mean, se) = mean_and_std_error(&maxima);
    Ok(ReuseRow {
        n,
        steps,
        mean_max_delta: mean,
        std_error: se,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReuseReport {
    pub n_sweep: Vec<ReuseRow>,
    /// Slope of `log mean maxΔ` against `log n`.
    pub n_slope: f64,
    pub t_sweep: Vec<ReuseRow>,
    /// Slope of `log mean maxΔ` against `log T`.
    pub t_exponent: f64,
    /// Slope of `mean maxΔ` against `√log T`.
    pub t_sqrt_log_slope: f64,
}

/// `max_t Δ(θ_t)` averaged over trials, swept over `n` at `settings.steps`
/// and over `T ∈ t_grid` at `n_fixed`.
///
/// Trial `k` of every sweep point uses substream `k` of that point's named
/// stream, so sweeps are independent of each other and of thread count.
pub fn reuse_scaling_experiment<P: LearningProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    n_grid: &[usize],
    t_grid: &[usize],
    n_fixed: usize,
    settings: &ReuseSettings,
    rng: &RngStream,
) -> Result<ReuseReport> {
    if n_grid.len() < 4 {
        return Err(invalid("the n-grid needs at least 4 points"));
    }
    let (lo, hi) = (
        *n_grid.iter().min().unwrap() as f64,
        *n_grid.iter().max().unwrap() as f64,
    );
    if hi < 16.0 * lo {
        return Err(invalid("the n-grid must span at least a factor of 16"));
    }
    if t_grid.len() < 2 || settings.trials < 2 {
        return Err(invalid("need >= 2 T values and >= 2 trials"));
    }
    let n_sweep = n_grid
        .iter()
        .map(|&n| {
            mean_max_delta(problem, theta0, n, settings.steps, settings, &rng.named(&format!("n-sweep-{n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let t_sweep = t_grid
        .iter()
        .map(|&t| mean_max_delta(problem, theta0, n_fixed, t, settings, &rng.named(&format!("t-sweep-{t}"))))
        .collect::<Result<Vec<_>>>()?;
    let log = |rows: &[ReuseRow], key: &dyn Fn(&ReuseRow) -> f64| -> (Vec<f64>, Vec<f64>) {
        rows.iter().map(|r| (key(r).ln(), r.mean_max_delta.ln())).unzip()
    };
    let (xs, ys) = log(&n_sweep, &|r| r.n as f64);
    let n_slope = linear_fit(&xs, &ys).0;
    let (xs, ys) = log(&t_sweep, &|r| r.steps as f64);
    let t_exponent = linear_fit(&xs, &ys).0;
    let (xs, ys): (Vec<f64>, Vec<f64>) = t_sweep
        .iter()
        .map(|r| ((r.steps as f64).ln().sqrt(), r.mean_max_delta))
        .unzip();
    let t_sqrt_log_slope = linear_fit(&xs, &ys).0;
    Ok(ReuseReport {
        n_sweep,
        n_slope,
        t_sweep,
        t_exponent,
        t_sqrt_log_slope,
    })
}

/// Largest observed `‖∇L_D(θ) − ∇L_D(θ′)‖ / ‖θ − θ′‖` over `probes` random
/// pairs within `radius` of `center`.
pub fn estimate_tau<P: LearningProblem + ?Sized>(
    problem: &P,
    oracle: &PopulationOracle<'_>,
    center: &[f64],
    radius: f64,
    probes: usize,
    rng: &RngStream,
) -> Result<f64> {
    if probes == 0 || !(radius > 0.0) {
        return Err(invalid("tau probes need probes >= 1 and radius > 0"));
    }
    let p = center.len();
    let ratios = map_indexed(probes, |k| -> Result<f64> {
        let mut r = rng.substream(k as u64);
        let a: Vec<f64> = center.iter().zip(r.unit_sphere(p)).map(|(c, u)| c + radius * r.uniform() * u).collect();
        let b: Vec<f64> = a.iter().zip(r.unit_sphere(p)).map(|(c, u)| c + 0.1 * radius * u).collect();
        let ga = oracle.evaluate(problem, &a)?.gradient;
        let gb = oracle.evaluate(problem, &b)?.gradient;
        Ok(norm2(&sub_vec(&ga, &gb)) / norm2(&sub_vec(&a, &b)))
    });
    let mut tau: f64 = 0.0;
    for r in ratios {
        tau = tau.max(r?);
    }
    Ok(tau)
}

/// `(1/T) Σ_{t<T} ‖∇L_D(θ_t)‖²` along a trace.
pub fn stationarity_metric(trace: &GdTrace, steps: usize) -> f64 {
    trace.steps[..steps]
        .iter()
        .map(|s| s.population_grad_norm.powi(2))
        .sum::<f64>()
        / steps as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub steps: usize,
    pub metric: f64,
    pub std_error: f64,
}

impl ConvergenceRow {
    pub const CSV_HEADER: [&'static str; 4] = ["n", "T", "metric", "std_error"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub tau_hat: f64,
    pub eta: f64,
    pub rows: Vec<ConvergenceRow>,
    /// Slope of `log metric` against `log T` at the largest `n`.
    pub t_slope: f64,
    /// Slope of `log metric` against `log n` at the largest `T`.
    pub n_slope: f64,
}

/// Settings for [`population_convergence_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSettings {
    pub t_grid: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub trials: usize,
    pub mode: PopulationMode,
    pub tau_probes: usize,
    pub tau_radius: f64,
}

/// GD with `η = 1/(4τ̂)` on reused samples; reports the averaged squared
/// population gradient norm for every `(n, T)` on the grids.
///
/// One run of `max(T)` steps per `(n, trial)` serves every `T` (its prefix).
/// `τ̂` comes from [`estimate_tau`] around `θ₀` using the oracle of a
/// dedicated run at the largest `n`.
pub fn population_convergence_experiment<P: LearningProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    settings: &ConvergenceSettings,
    rng: &RngStream,
) -> Result<ConvergenceReport> {
    let ConvergenceSettings {
        t_grid,
        n_grid,
        trials,
        mode,
        tau_probes,
        tau_radius,
    } = settings;
    if t_grid.is_empty() || n_grid.is_empty() || *trials == 0 {
        return Err(invalid("convergence experiment needs T and n grids and trials >= 1"));
    }
    let t_max = *t_grid.iter().max().unwrap();
    if t_grid.contains(&0) {
        return Err(invalid("T values must be >= 1"));
    }
    let n_max = *n_grid.iter().max().unwrap();
    if *mode == PopulationMode::Shared {
        return Err(Error::Unsupported("tau estimation needs an analytic or fresh-sample oracle".into()));
    }
    let tau_oracle = PopulationOracle::build(problem, *mode, &[], &rng.named("tau"))?;
    let tau_hat = estimate_tau(problem, &tau_oracle, theta0, *tau_radius, *tau_probes, &rng.named("tau-probes"))?;
    if !(tau_hat > 0.0 && tau_hat.is_finite()) {
        return Err(Error::Numerical(format!("curvature estimate {tau_hat} is unusable")));
    }
    let eta = 1.0 / (4.0 * tau_hat);
    let mut rows = Vec::new();
    for &n in n_grid {
        let traces = map_indexed(*trials, |k| {
            gd_with_reuse(problem, theta0, eta, t_max, n, *mode, &rng.named(&format!("n-{n}")).substream(k as u64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for &t in t_grid {
            let metrics: Vec<f64> = traces.iter().map(|tr| stationarity_metric(tr, t)).collect();
            let (metric, std_error) = mean_and_std_error(&metrics);
            rows.push(ConvergenceRow {
                n,
                steps: t,
                metric,
                std_error,
            });
        }
    }
    let fit = |pick: &dyn Fn(&ConvergenceRow) -> Option<f64>| -> f64 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| pick(r).map(|x| (x.ln(), r.metric.ln())))
            .unzip();
        if xs.len() < 2 {
            f64::NAN
        } else {
            linear_fit(&xs, &ys).0
        }
    };
    let t_slope = fit(&|r| (r.n == n_max).then_some(r.steps as f64));
    let n_slope = fit(&|r| (r.steps == t_max).then_some(r.n as f64));
    Ok(ConvergenceReport {
        tau_hat,
        eta,
        rows,
        t_slope,
        n_slope,
    })
}
