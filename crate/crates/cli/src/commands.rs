//! One function per subcommand. Each fills the metrics of a
//! [`ResultRecord`] and returns the data tables to write next to it.

use crate::config::{ExperimentConfig, ReuseModel};
use crate::output::{Metrics, ResultRecord, Table};
use anyhow::Result;
use gradgeom::canonical::{
    analytic_width_bound, exact_width, mc_width, projection_width_check, variant_name, CanonicalSet,
};
use gradgeom::geometry::{
    featurizer_norm_sweep, featurizer_sparsity, gradient_norm_sweep, lggw_estimate, nerc_estimate,
    sorted_gradient_profile, FixedGradients, GradientSetSpec, GradientSource, SignMode,
};
use gradgeom::network::{
    forward_unchecked, init_network, lemma_check, Architecture, NetworkConfig, NetworkParams,
    SpectralBall,
};
use gradgeom::numerics::{linear_fit, norm2, RngStream};
use gradgeom::optlab::{
    gd_ratio_trace, gd_with_reuse, population_convergence_experiment, reuse_scaling_experiment,
    ConvergenceRow, ConvergenceSettings, GdTrace, InputLaw, LearningProblem, LinearTeacher,
    NetworkTeacher, PopulationMode, ReuseRow, ReuseSettings,
};
use gradgeom::theory::{sic_tail_check, width_vs_bound_check, SignSampling, DEFAULT_U_GRID};
use serde_json::{json, Value};

/// Largest `n` for which `nerc` enumerates every sign pattern.
const NERC_EXHAUSTIVE_UP_TO: usize = 12;

fn num(v: f64) -> String {
    v.to_string()
}

fn put(m: &mut Metrics, key: &str, v: impl Into<Value>) {
    m.insert(key.to_string(), v.into());
}

fn teacher_stream(cfg: &ExperimentConfig) -> Result<RngStream> {
    let data = cfg.require(&cfg.data, "data")?;
    Ok(RngStream::new(data.teacher_seed, 0).named("teacher"))
}

fn teacher_network(cfg: &ExperimentConfig, net: &NetworkConfig) -> Result<NetworkParams> {
    Ok(init_network(net, &mut teacher_stream(cfg)?)?)
}

/// Network gradient set on `data.n` unit-sphere inputs labelled by a teacher
/// network, centred at a fresh initialization.
pub fn network_spec(cfg: &ExperimentConfig, rng: &RngStream) -> Result<GradientSetSpec> {
    let net = cfg.network_config()?;
    let ball = cfg.require(&cfg.ball, "ball")?;
    let data = cfg.require(&cfg.data, "data")?;
    let teacher = teacher_network(cfg, &net)?;
    let center = init_network(&net, &mut rng.named("init"))?;
    let mut draw = rng.named("data");
    let mut inputs = Vec::with_capacity(data.n);
    let mut targets = Vec::with_capacity(data.n);
    for _ in 0..data.n {
        let x = draw.unit_sphere(data.d);
        let y = forward_unchecked(&net, &teacher, &x)?.output + data.noise_std * draw.standard_normal();
        inputs.push(x);
        targets.push(y);
    }
    let ball = SpectralBall::new(center, ball.rho, ball.rho1)?;
    Ok(GradientSetSpec::new(net, ball, inputs, targets)?)
}

fn first_sample(spec: &GradientSetSpec) -> Result<GradientSetSpec> {
    Ok(GradientSetSpec::new(
        spec.cfg.clone(),
        spec.ball.clone(),
        spec.inputs[..1].to_vec(),
        spec.targets[..1].to_vec(),
    )?)
}

pub fn width(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let w = cfg.require(&cfg.width, "width")?;
    let budget = w.budget();
    let spec = network_spec(cfg, &rng)?;
    let lggw = lggw_estimate(&spec, &rng.named("width"), w.outer, &budget)?;
    let single = first_sample(&spec)?;
    let check = width_vs_bound_check(&single, &rng.named("width-bound"), w.outer, &budget)?;

    let m = &mut rec.metrics;
    put(m, "n", spec.inputs.len());
    put(m, "num_params", spec.dim());
    put(m, "lggw", lggw.value);
    put(m, "lggw_std_error", lggw.std_error);
    if let Some(inner) = &lggw.inner {
        put(m, "ascent_win_fraction", inner.ascent_win_fraction);
    }
    put(m, "lggw_single_sample", check.estimated_lggw_single_sample.value);
    put(m, "featurizer_width", check.featurizer_width.value);
    put(m, "featurizer_width_std_error", check.featurizer_width.std_error);
    put(m, "bound", check.bound.bound_value);
    for (k, v) in &check.bound.components {
        put(m, k, *v);
    }
    if let Some(env) = check.bound.exp_envelope {
        put(m, "exp_envelope", env);
    }
    put(m, "c_star", check.satisfied_up_to_constant);
    put(m, "bound_convention", check.bound.convention.clone());

    let mut t = Table::new("width", &["quantity", "value", "std_error"]);
    let rows = [
        ("lggw", lggw.value, lggw.std_error),
        (
            "lggw_single_sample",
            check.estimated_lggw_single_sample.value,
            check.estimated_lggw_single_sample.std_error,
        ),
        ("featurizer_width", check.featurizer_width.value, check.featurizer_width.std_error),
        ("bound", check.bound.bound_value, 0.0),
    ];
    for (name, v, se) in rows {
        t.push(vec![name.into(), num(v), num(se)]);
    }
    Ok(vec![t])
}

pub fn nerc(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let w = cfg.require(&cfg.width, "width")?;
    let nc = cfg.require(&cfg.nerc, "nerc")?;
    let budget = w.budget();
    let spec = network_spec(cfg, &rng)?;
    let n = spec.inputs.len();
    let mode = if n <= NERC_EXHAUSTIVE_UP_TO {
        SignMode::Exhaustive
    } else {
        SignMode::MonteCarlo { outer: nc.outer }
    };
    let est = nerc_estimate(&spec, &rng.named("nerc"), mode, &budget)?;
    let lggw = lggw_estimate(&spec, &rng.named("width"), w.outer, &budget)?;
    let fitted = est.value / (lggw.value / (n as f64).sqrt());

    let mut table = Table::new("khintchine", &["n", "dim", "nerc", "std_error", "mode"]);
    // Scalar unit gradients: the exhaustive values at n = 1, 2 are exact.
    for small in [1usize, 2] {
        let src = FixedGradients::new(vec![vec![1.0]; small])?;
        let e = nerc_estimate(&src, &rng, SignMode::Exhaustive, &budget)?;
        table.push(vec![small.to_string(), "1".into(), num(e.value), num(e.std_error), "exhaustive".into()]);
        put(&mut rec.metrics, &format!("khintchine_exact_n{small}"), e.value);
    }
    let sweep_rng = rng.named("khintchine");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &k in &nc.khintchine_n {
        let mut draw = sweep_rng.named(&format!("vectors-{k}"));
        let grads: Vec<Vec<f64>> = (0..k).map(|_| draw.unit_sphere(nc.khintchine_dim)).collect();
        let e = nerc_estimate(
            &FixedGradients::new(grads)?,
            &sweep_rng.named(&format!("signs-{k}")),
            SignMode::MonteCarlo { outer: nc.khintchine_outer },
            &budget,
        )?;
        table.push(vec![
            k.to_string(),
            nc.khintchine_dim.to_string(),
            num(e.value),
            num(e.std_error),
            "monte_carlo".into(),
        ]);
        xs.push((k as f64).ln());
        ys.push(e.value.ln());
    }

    let m = &mut rec.metrics;
    put(m, "n", n);
    put(m, "nerc", est.value);
    put(m, "nerc_std_error", est.std_error);
    put(m, "nerc_mode", if matches!(mode, SignMode::Exhaustive) { "exhaustive" } else { "monte_carlo" });
    put(m, "lggw", lggw.value);
    put(m, "lggw_std_error", lggw.std_error);
    put(m, "fitted_constant", fitted);
    if xs.len() >= 2 {
        put(m, "khintchine_slope", linear_fit(&xs, &ys).0);
    }
    Ok(vec![table])
}

fn canonical_suite(dims: &[usize], rng: &RngStream) -> Vec<CanonicalSet> {
    let mut sets = Vec::new();
    for &d in dims {
        sets.push(CanonicalSet::L2Ball { dim: d, radius: 1.0 });
        sets.push(CanonicalSet::Ellipsoid {
            semi_axes: (1..=d).map(|j| 1.0 / j as f64).collect(),
        });
        let k = (d / 4).max(1);
        sets.push(CanonicalSet::KSupportBall {
            dim: d,
            k,
            radius: (k as f64).sqrt(),
        });
        let mut draw = rng.named(&format!("clouds-{d}"));
        sets.push(CanonicalSet::Union {
            parts: (0..4)
                .map(|_| CanonicalSet::FiniteCloud {
                    points: (0..8).map(|_| draw.unit_sphere(d)).collect(),
                })
                .collect(),
        });
        sets.push(CanonicalSet::FiniteCloud {
            points: vec![draw.gaussian_vec(d)],
        });
    }
    sets
}

pub fn canonical(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let c = cfg.require(&cfg.canonical, "canonical")?;
    let sets = canonical_suite(&c.dims, &rng.named("sets"));
    let mut table = Table::new(
        "canonical",
        &["set", "dim", "mc_width", "std_error", "exact", "analytic_bound", "consistent"],
    );
    let mut all_consistent = true;
    for (i, s) in sets.iter().enumerate() {
        let est = mc_width(s, &rng.named("widths").substream(i as u64), c.samples)?;
        let exact = exact_width(s).ok();
        let bound = analytic_width_bound(s).ok().map(|b| b.value);
        let consistent = match (exact, bound) {
            (Some(e), _) => (est.value - e).abs() <= 3.0 * est.std_error + 1e-12,
            (None, Some(b)) => est.value <= b + 3.0 * est.std_error,
            (None, None) => true,
        };
        all_consistent &= consistent;
        table.push(vec![
            variant_name(s).into(),
            s.dim().to_string(),
            num(est.value),
            num(est.std_error),
            exact.map(num).unwrap_or_default(),
            bound.map(num).unwrap_or_default(),
            consistent.to_string(),
        ]);
    }

    let split_dim = c.dims.iter().copied().filter(|&d| d >= 2).max().unwrap_or(2);
    let mut draw = rng.named("projection");
    let cloud: Vec<Vec<f64>> = (0..16).map(|_| draw.gaussian_vec(split_dim)).collect();
    let proj = projection_width_check(&cloud, split_dim / 2, &rng.named("projection-width"), c.samples)?;

    let m = &mut rec.metrics;
    put(m, "sets", sets.len());
    put(m, "all_consistent", all_consistent);
    put(m, "projection_whole", proj.whole.value);
    put(m, "projection_part1", proj.part1.value);
    put(m, "projection_part2", proj.part2.value);
    put(m, "projection_subadditive", proj.subadditive());
    if !all_consistent {
        rec.failures.push("a canonical width disagrees with its closed form".into());
    }
    Ok(vec![table])
}

pub fn verify_lemmas(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let lem = cfg.require(&cfg.lemmas, "lemmas")?;
    let net = cfg.require(&cfg.network, "network")?;
    let ball = cfg.require(&cfg.ball, "ball")?;
    let data = cfg.require(&cfg.data, "data")?;

    let mut table = Table::new(
        "lemmas",
        &["arch", "m", "check", "layer", "frequency", "required", "std_error", "holds"],
    );
    for &m in &lem.widths {
        for arch in [Architecture::Ffn, Architecture::Resnet] {
            let arch_name = format!("{arch:?}").to_lowercase();
            let ncfg = NetworkConfig {
                arch,
                widths: vec![m; lem.depth],
                input_dim: data.d,
                sigma1: net.sigma1,
                activation: net.activation,
            };
            let report = lemma_check(&ncfg, ball.rho, lem.trials, &rng.named(&format!("lemmas-{arch_name}-{m}")))?;
            let mut min_margin = f64::INFINITY;
            for (check, f) in report.rows() {
                min_margin = min_margin.min(f.frequency - f.required);
                if !f.holds() {
                    rec.failures.push(format!(
                        "{arch_name} m={m} {check} layer {}: frequency {} < required {}",
                        f.layer, f.frequency, f.required
                    ));
                }
                table.push(vec![
                    arch_name.clone(),
                    m.to_string(),
                    check.into(),
                    f.layer.to_string(),
                    num(f.frequency),
                    num(f.required),
                    num(f.std_error),
                    f.holds().to_string(),
                ]);
            }
            put(&mut rec.metrics, &format!("{arch_name}_m{m}_all_hold"), report.all_hold());
            put(&mut rec.metrics, &format!("{arch_name}_m{m}_min_margin"), min_margin);
        }
    }

    let mut sic = Table::new("sic", &["n", "family", "u", "empirical_tail", "bound", "mu_hat"]);
    let mut sic_pass = true;
    let fam_rng = rng.named("sic");
    for &n in &lem.sic_n {
        for f in 0..lem.sic_families {
            let mut draw = fam_rng.named(&format!("n{n}")).substream(f as u64);
            let mut vs: Vec<Vec<f64>> = (0..n).map(|_| draw.gaussian_vec(data.d)).collect();
            let total: f64 = vs.iter().map(|v| norm2(v).powi(2)).sum();
            let scale = (n as f64 / total).sqrt();
            vs.iter_mut().flatten().for_each(|x| *x *= scale);
            let r = sic_tail_check(&vs, SignSampling::Exhaustive, &draw, &DEFAULT_U_GRID)?;
            if !r.passes() {
                sic_pass = false;
                rec.failures.push(format!("sic n={n} family {f}: tail or mean bound violated"));
            }
            for i in 0..r.u_grid.len() {
                sic.push(vec![
                    n.to_string(),
                    f.to_string(),
                    num(r.u_grid[i]),
                    num(r.empirical_tail[i]),
                    num(r.bound[i]),
                    num(r.mu_hat),
                ]);
            }
        }
    }
    put(&mut rec.metrics, "sic_all_hold", sic_pass);
    put(&mut rec.metrics, "all_hold", rec.failures.is_empty());
    Ok(vec![table, sic])
}

fn teacher_problem(cfg: &ExperimentConfig) -> Result<(NetworkTeacher, NetworkConfig)> {
    let net = cfg.network_config()?;
    let data = cfg.require(&cfg.data, "data")?;
    let teacher = teacher_network(cfg, &net)?;
    Ok((NetworkTeacher::new(net.clone(), teacher, data.noise_std)?, net))
}

pub fn gd_ratio(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let gd = cfg.require(&cfg.gd, "gd")?;
    let data = cfg.require(&cfg.data, "data")?;
    let (problem, net) = teacher_problem(cfg)?;
    let mode = PopulationMode::FreshMc {
        m: gd.oracle_factor * data.n,
    };
    let mut tables = Vec::new();
    let mut summary = Table::new("gd_ratio", &["seed", "max_ratio_a1", "max_ratio_a2", "defined_steps", "finite"]);
    let mut all_finite = true;
    for k in 0..gd.seeds {
        let stream = rng.named("gd").substream(k as u64);
        let theta0 = init_network(&net, &mut stream.named("init"))?.to_flat();
        let trace = gd_with_reuse(&problem, &theta0, gd.eta, gd.steps, data.n, mode, &stream)?;
        let a1 = gd_ratio_trace(&trace, 1.0)?;
        let a2 = gd_ratio_trace(&trace, 2.0)?;
        let finite = a1.ratios.iter().flatten().all(|r| r.is_finite());
        all_finite &= finite;
        let last = |v: &[Option<f64>]| v.last().copied().flatten().unwrap_or(f64::NAN);
        summary.push(vec![
            k.to_string(),
            num(last(&a1.running_max)),
            num(last(&a2.running_max)),
            a1.defined_steps.to_string(),
            finite.to_string(),
        ]);
        put(&mut rec.metrics, &format!("seed{k}_max_ratio_a1"), last(&a1.running_max));
        put(&mut rec.metrics, &format!("seed{k}_final_pop_loss"), trace.steps.last().map_or(f64::NAN, |s| s.population_loss));
        let mut t = Table::new(format!("gd_trace_seed{k}"), &GdTrace::CSV_HEADER);
        for row in trace.csv_rows() {
            t.push(row.to_vec());
        }
        tables.push(t);
    }
    put(&mut rec.metrics, "optimal_loss", problem.optimal_loss());
    put(&mut rec.metrics, "all_ratios_finite", all_finite);
    tables.insert(0, summary);
    Ok(tables)
}

pub fn profile(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let p = cfg.require(&cfg.profile, "profile")?;
    let spec = network_spec(cfg, &rng)?;
    let center = spec.center();
    let sorted = sorted_gradient_profile(&spec, &center)?;
    let mut grad = Table::new("gradient_profile", &["rank", "abs_grad"]);
    // Descending rank: rank 0 is the largest coordinate.
    for (rank, v) in sorted.iter().rev().enumerate() {
        grad.push(vec![rank.to_string(), num(*v)]);
    }
    let total: f64 = sorted.iter().sum();
    let top = sorted.len().div_ceil(10);
    let top_share = if total > 0.0 {
        sorted.iter().rev().take(top).sum::<f64>() / total
    } else {
        0.0
    };

    let mut feat = Table::new("featurizer", &["point", "sample", "l0", "l1"]);
    let point_rng = rng.named("profile-points");
    let mut l0_sum = 0.0;
    let mut rows = 0usize;
    for k in 0..=p.points {
        let params = if k == 0 {
            spec.ball.center.clone()
        } else {
            spec.ball.random_point(&mut point_rng.substream(k as u64))?
        };
        let report = featurizer_sparsity(&spec, &params, p.l0_threshold)?;
        for (i, s) in report.per_sample.iter().enumerate() {
            feat.push(vec![k.to_string(), i.to_string(), s.l0.to_string(), num(s.l1)]);
            l0_sum += s.l0 as f64;
            rows += 1;
        }
    }
    let max_feat = featurizer_norm_sweep(&spec, p.points, &rng.named("featurizer-sweep"))?;
    let max_grad = gradient_norm_sweep(&spec, p.points, &rng.named("gradient-sweep"))?;

    let m = &mut rec.metrics;
    put(m, "num_params", sorted.len());
    put(m, "top_decile_gradient_share", top_share);
    put(m, "max_abs_gradient", sorted.last().copied().unwrap_or(0.0));
    put(m, "featurizer_width_units", spec.cfg.output_width());
    put(m, "mean_featurizer_l0", l0_sum / rows as f64);
    put(m, "max_featurizer_norm", max_feat);
    put(m, "max_gradient_norm", max_grad);
    Ok(vec![grad, feat])
}

fn reuse_rows(name: &str, rows: &[ReuseRow]) -> Table {
    let mut t = Table::new(name, &ReuseRow::CSV_HEADER);
    for r in rows {
        t.push(vec![r.n.to_string(), r.steps.to_string(), num(r.mean_max_delta), num(r.std_error)]);
    }
    t
}

pub fn reuse(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let r = cfg.require(&cfg.reuse, "reuse")?;
    let data = cfg.require(&cfg.data, "data")?;
    let settings = |mode| ReuseSettings {
        eta: r.eta,
        steps: r.steps,
        trials: r.trials,
        mode,
    };
    let report = match r.model {
        ReuseModel::Linear => {
            let theta_star = teacher_stream(cfg)?.unit_sphere(data.d);
            let problem = LinearTeacher {
                theta_star,
                input_law: InputLaw::StandardGaussian,
                noise_std: data.noise_std,
            };
            let theta0 = vec![0.0; data.d];
            reuse_scaling_experiment(
                &problem,
                &theta0,
                &r.n_grid,
                &r.t_grid,
                r.n_fixed,
                &settings(PopulationMode::Analytic),
                &rng.named("reuse"),
            )?
        }
        ReuseModel::Network => {
            let (problem, net) = teacher_problem(cfg)?;
            let theta0 = init_network(&net, &mut rng.named("init"))?.to_flat();
            let n_max = r.n_grid.iter().copied().chain([r.n_fixed]).max().unwrap();
            let mode = PopulationMode::FreshMc {
                m: r.oracle_factor * n_max,
            };
            reuse_scaling_experiment(
                &problem,
                &theta0,
                &r.n_grid,
                &r.t_grid,
                r.n_fixed,
                &settings(mode),
                &rng.named("reuse"),
            )?
        }
    };
    let m = &mut rec.metrics;
    put(m, "n_slope", report.n_slope);
    put(m, "t_exponent", report.t_exponent);
    put(m, "t_sqrt_log_slope", report.t_sqrt_log_slope);
    put(
        m,
        "max_delta_by_n",
        json!(report.n_sweep.iter().map(|r| r.mean_max_delta).collect::<Vec<_>>()),
    );
    Ok(vec![reuse_rows("reuse_n", &report.n_sweep), reuse_rows("reuse_t", &report.t_sweep)])
}

pub fn converge(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<Vec<Table>> {
    let rng = RngStream::new(cfg.seed, 0);
    let c = cfg.require(&cfg.converge, "converge")?;
    let (problem, net) = teacher_problem(cfg)?;
    let theta0 = init_network(&net, &mut rng.named("init"))?.to_flat();
    let n_max = *c.n_grid.iter().max().unwrap();
    let settings = ConvergenceSettings {
        t_grid: c.t_grid.clone(),
        n_grid: c.n_grid.clone(),
        trials: c.trials,
        mode: PopulationMode::FreshMc {
            m: c.oracle_factor * n_max,
        },
        tau_probes: c.tau_probes,
        tau_radius: c.tau_radius,
    };
    let report = population_convergence_experiment(&problem, &theta0, &settings, &rng.named("converge"))?;
    let mut t = Table::new("converge", &ConvergenceRow::CSV_HEADER);
    for r in &report.rows {
        t.push(vec![r.n.to_string(), r.steps.to_string(), num(r.metric), num(r.std_error)]);
    }
    let m = &mut rec.metrics;
    put(m, "tau_hat", report.tau_hat);
    put(m, "eta", report.eta);
    put(m, "t_slope", report.t_slope);
    put(m, "n_slope", report.n_slope);
    Ok(vec![t])
}
