//! Structured sets with exact support functions, used as width oracles.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Error, Result};
use crate::exec::map_indexed;
use crate::numerics::{dot, expected_gaussian_norm, mean_and_std_error, norm2, RngStream};

/// Convention stamped on every closed-form bound: symbolic constants set to 1.
pub const UNIT_CONSTANTS: &str = "all symbolic constants = 1";

/// A set given symbolically, with an exact support function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum CanonicalSet {
    L2Ball { dim: usize, radius: f64 },
    /// `{x : Σ x_j² / a_j² ≤ 1}`; a zero semi-axis pins that coordinate to 0.
    Ellipsoid { semi_axes: Vec<f64> },
    /// Ball of radius `radius` in the k-support norm.
    KSupportBall { dim: usize, k: usize, radius: f64 },
    FiniteCloud { points: Vec<Vec<f64>> },
    Union { parts: Vec<CanonicalSet> },
    MinkowskiSum { parts: Vec<CanonicalSet> },
}

impl CanonicalSet {
    pub fn dim(&self) -> usize {
        match self {
            Self::L2Ball { dim, .. } | Self::KSupportBall { dim, .. } => *dim,
            Self::Ellipsoid { semi_axes } => semi_axes.len(),
            Self::FiniteCloud { points } => points.first().map_or(0, Vec::len),
            Self::Union { parts } | Self::MinkowskiSum { parts } => {
                parts.first().map_or(0, CanonicalSet::dim)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if dim == 0 {
            return Err(dim_err("canonical set of dimension 0"));
        }
        match self {
            Self::L2Ball { radius, .. } => positive(*radius, "radius"),
            Self::Ellipsoid { semi_axes } => {
                if semi_axes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                    return Err(invalid("semi-axes must be finite and non-negative"));
                }
                Ok(())
            }
            Self::KSupportBall { dim, k, radius } => {
                if *k < 1 || k > dim {
                    return Err(invalid(format!("k = {k} must satisfy 1 <= k <= {dim}")));
                }
                positive(*radius, "radius")
            }
            Self::FiniteCloud { points } => {
                if points.iter().any(|p| p.len() != dim) {
                    return Err(dim_err("cloud points of unequal length"));
                }
                if points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid("cloud points must be finite"));
                }
                Ok(())
            }
            Self::Union { parts } | Self::MinkowskiSum { parts } => {
                if parts.is_empty() {
                    return Err(invalid("union / Minkowski sum needs at least one part"));
                }
                for p in parts {
                    if p.dim() != dim {
                        return Err(dim_err("parts of unequal dimension"));
                    }
                    p.validate()?;
                }
                Ok(())
            }
        }
    }
}

fn positive(v: f64, name: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive, got {v}")))
    }
}

/// Diagnostics of an inner maximization, when the estimator has one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerDiagnostics {
    pub restarts: usize,
    pub steps: usize,
    /// Fraction of outer draws where gradient ascent strictly beat random search.
    pub ascent_win_fraction: f64,
}

/// Monte-Carlo width (or complexity) estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub value: f64,
    pub std_error: f64,
    pub outer_samples: usize,
    pub inner: Option<InnerDiagnostics>,
}

impl WidthEstimate {
    pub fn from_draws(draws: &[f64], inner: Option<InnerDiagnostics>) -> Self {
        let (value, std_error) = mean_and_std_error(draws);
        Self {
            value,
            std_error,
            outer_samples: draws.len(),
            inner,
        }
    }
}

/// Square root of the sum of the `k` largest `g_i²`: the dual of the k-support norm.
pub fn top_k_norm(g: &[f64], k: usize) -> f64 {
    let mut sq: Vec<f64> = g.iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    sq.iter().take(k).sum::<f64>().sqrt()
}

/// `sup_{x ∈ s} ⟨x, g⟩`.
pub fn support_function(s: &CanonicalSet, g: &[f64]) -> Result<f64> {
    if g.len() != s.dim() {
        return Err(dim_err(format!(
            "direction of length {} for a set in dimension {}",
            g.len(),
            s.dim()
        )));
    }
    Ok(support_unchecked(s, g))
}

fn support_unchecked(s: &CanonicalSet, g: &[f64]) -> f64 {
    match s {
        CanonicalSet::L2Ball { radius, .. } => radius * norm2(g),
        CanonicalSet::Ellipsoid { semi_axes } => semi_axes
            .iter()
            .zip(g)
            .map(|(a, v)| (a * v).powi(2))
            .sum::<f64>()
            .sqrt(),
        CanonicalSet::KSupportBall { k, radius, .. } => radius * top_k_norm(g, *k),
        CanonicalSet::FiniteCloud { points } => points
            .iter()
            .map(|p| dot(p, g))
            .fold(f64::NEG_INFINITY, f64::max),
        CanonicalSet::Union { parts } => parts
            .iter()
            .map(|p| support_unchecked(p, g))
            .fold(f64::NEG_INFINITY, f64::max),
        CanonicalSet::MinkowskiSum { parts } => parts.iter().map(|p| support_unchecked(p, g)).sum(),
    }
}

/// Monte-Carlo Gaussian width. Draw `i` uses `rng.substream(i)`, so every
/// part of a composite set sees the same `g` within one outer sample.
pub fn mc_width(s: &CanonicalSet, rng: &RngStream, samples: usize) -> Result<WidthEstimate> {
    if samples < 2 {
        return Err(invalid("mc_width needs at least 2 samples"));
    }
    s.validate()?;
    let dim = s.dim();
    let draws = map_indexed(samples, |i| {
        let g = rng.substream(i as u64).gaussian_vec(dim);
        support_unchecked(s, &g)
    });
    Ok(WidthEstimate::from_draws(&draws, None))
}

/// Closed-form upper bound on the Gaussian width, unit constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticBound {
    pub value: f64,
    pub convention: String,
}

/// Closed-form width upper bounds with every unspecified constant set to 1.
///
/// * `L2Ball(r)` in `R^d`: `r √d`.
/// * `Ellipsoid(a)`: `‖a‖₂`.
/// * `KSupportBall(k, c₀√k)`: `c₀ (k √log(d/k) + k)`. The `c₀ k` slack keeps
///   the bound valid for `k` near `d` and makes `k = d` coincide with the
///   L2-ball bound.
/// * `Union` of finite clouds with max point norm `B`:
///   `B (√(2 log N) + maxⱼ √(2 log Mⱼ))` for `N` clouds of `Mⱼ` points.
pub fn analytic_width_bound(s: &CanonicalSet) -> Result<AnalyticBound> {
    s.validate()?;
    let value = match s {
        CanonicalSet::L2Ball { dim, radius } => radius * (*dim as f64).sqrt(),
        CanonicalSet::Ellipsoid { semi_axes } => norm2(semi_axes),
        CanonicalSet::KSupportBall { dim, k, radius } => {
            let k = *k as f64;
            let c0 = radius / k.sqrt();
            c0 * (k * (*dim as f64 / k).ln().sqrt() + k)
        }
        CanonicalSet::Union { parts } => {
            let mut max_norm: f64 = 0.0;
            let mut max_part: f64 = 0.0;
            for p in parts {
                let CanonicalSet::FiniteCloud { points } = p else {
                    return Err(Error::Unsupported(
                        "analytic bound for a union needs finite-cloud parts".into(),
                    ));
                };
                for q in points {
                    max_norm = max_norm.max(norm2(q));
                }
                max_part = max_part.max((2.0 * (points.len() as f64).ln()).sqrt());
            }
            max_norm * ((2.0 * (parts.len() as f64).ln()).sqrt() + max_part)
        }
        other => {
            return Err(Error::Unsupported(format!(
                "no analytic bound for {}",
                variant_name(other)
            )))
        }
    };
    Ok(AnalyticBound {
        value,
        convention: UNIT_CONSTANTS.to_string(),
    })
}

pub fn variant_name(s: &CanonicalSet) -> &'static str {
    match s {
        CanonicalSet::L2Ball { .. } => "l2_ball",
        CanonicalSet::Ellipsoid { .. } => "ellipsoid",
        CanonicalSet::KSupportBall { .. } => "k_support_ball",
        CanonicalSet::FiniteCloud { .. } => "finite_cloud",
        CanonicalSet::Union { .. } => "union",
        CanonicalSet::MinkowskiSum { .. } => "minkowski_sum",
    }
}

/// Exact Gaussian width where one is computable.
///
/// L2 balls use the chi mean. Ellipsoids use the one-dimensional integral
/// `E√Q = (2√π)⁻¹ ∫₀^∞ (1 − E e^{−tQ}) t^{−3/2} dt` with
/// `Q = Σ a_j² g_j²` and `E e^{−tQ} = Π (1 + 2t a_j²)^{−1/2}`, evaluated by
/// composite Simpson on `t = e^u`. Singletons have width 0 and Minkowski sums
/// add.
pub fn exact_width(s: &CanonicalSet) -> Result<f64> {
    s.validate()?;
    match s {
        CanonicalSet::L2Ball { dim, radius } => Ok(radius * expected_gaussian_norm(*dim)),
        CanonicalSet::Ellipsoid { semi_axes } => Ok(ellipsoid_width(semi_axes)),
        CanonicalSet::FiniteCloud { points } if points.len() == 1 => Ok(0.0),
        CanonicalSet::MinkowskiSum { parts } => parts.iter().map(exact_width).sum(),
        other => Err(Error::Unsupported(format!(
            "no exact width for {}",
            variant_name(other)
        ))),
    }
}

fn ellipsoid_width(semi_axes: &[f64]) -> f64 {
    let sq: Vec<f64> = semi_axes.iter().map(|a| a * a).filter(|&v| v > 0.0).collect();
    if sq.is_empty() {
        return 0.0;
    }
    let total: f64 = sq.iter().sum();
    let largest = sq.iter().copied().fold(0.0, f64::max);
    let lo = -total.ln() - 80.0;
    let hi = -(2.0 * largest).ln() + 80.0;
    let integrand = |u: f64| {
        let t = u.exp();
        let log_mgf: f64 = sq.iter().map(|a2| (2.0 * t * a2).ln_1p()).sum::<f64>() * -0.5;
        -log_mgf.exp_m1() * (-0.5 * u).exp()
    };
    let intervals = 20_000usize;
    let h = (hi - lo) / intervals as f64;
    let mut acc = integrand(lo) + integrand(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(lo + i as f64 * h);
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI.sqrt())
}

/// Widths of a cloud in `R^{d₁+d₂}` and of its two coordinate projections,
/// all computed under the same Gaussian draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionWidths {
    pub whole: WidthEstimate,
    pub part1: WidthEstimate,
    pub part2: WidthEstimate,
}

impl ProjectionWidths {
    /// `whole ≤ part1 + part2` up to three combined standard errors.
    pub fn subadditive(&self) -> bool {
        let se = (self.whole.std_error.powi(2)
            + self.part1.std_error.powi(2)
            + self.part2.std_error.powi(2))
        .sqrt();
        self.whole.value <= self.part1.value + self.part2.value + 3.0 * se
    }
}

pub fn projection_width_check(
    points: &[Vec<f64>],
    split: usize,
    rng: &RngStream,
    samples: usize,
) -> Result<ProjectionWidths> {
    let cloud = CanonicalSet::FiniteCloud {
        points: points.to_vec(),
    };
    cloud.validate()?;
    let dim = cloud.dim();
    if split == 0 || split >= dim {
        return Err(invalid(format!("split {split} must lie strictly inside 0..{dim}")));
    }
    if samples < 2 {
        return Err(invalid("projection_width_check needs at least 2 samples"));
    }
    let head: Vec<Vec<f64>> = points.iter().map(|p| p[..split].to_vec()).collect();
    let tail: Vec<Vec<f64>> = points.iter().map(|p| p[split..].to_vec()).collect();
    let sup = |set: &[Vec<f64>], g: &[f64]| {
        set.iter().map(|p| dot(p, g)).fold(f64::NEG_INFINITY, f64::max)
    };
    let draws = map_indexed(samples, |i| {
        let g = rng.substream(i as u64).gaussian_vec(dim);
        (sup(points, &g), sup(&head, &g[..split]), sup(&tail, &g[split..]))
    });
    let pick = |f: fn(&(f64, f64, f64)) -> f64| -> Vec<f64> { draws.iter().map(f).collect() };
    Ok(ProjectionWidths {
        whole: WidthEstimate::from_draws(&pick(|d| d.0), None),
        part1: WidthEstimate::from_draws(&pick(|d| d.1), None),
        part2: WidthEstimate::from_draws(&pick(|d| d.2), None),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn within(est: &WidthEstimate, target: f64) -> bool {
        (est.value - target).abs() <= 3.0 * est.std_error + 1e-12
    }

    #[test]
    fn support_function_examples() {
        let ball = CanonicalSet::L2Ball { dim: 2, radius: 2.0 };
        assert_eq!(support_function(&ball, &[3.0, 4.0]).unwrap(), 10.0);
        let ell = CanonicalSet::Ellipsoid { semi_axes: vec![1.0, 0.0] };
        assert_eq!(support_function(&ell, &[1.0, 1.0]).unwrap(), 1.0);
        let ks = CanonicalSet::KSupportBall { dim: 3, k: 2, radius: 1.0 };
        assert_relative_eq!(support_function(&ks, &[3.0, -4.0, 1.0]).unwrap(), 5.0);
        assert!(matches!(support_function(&ks, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mc_width_examples() {
        let rng = RngStream::new(17, 0);
        let pair = CanonicalSet::FiniteCloud {
            points: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        };
        let est = mc_width(&pair, &rng, 20_000).unwrap();
        assert!(within(&est, (2.0 / std::f64::consts::PI).sqrt()), "{est:?}");

        let point = CanonicalSet::FiniteCloud { points: vec![vec![5.0, 5.0]] };
        let est = mc_width(&point, &rng, 20_000).unwrap();
        assert!(within(&est, 0.0), "{est:?}");

        let ball = CanonicalSet::L2Ball { dim: 8, radius: 1.0 };
        let est = mc_width(&ball, &rng, 20_000).unwrap();
        // Γ(9/2)/Γ(4) = (105/16)√π / 6
        let chi8 = 2f64.sqrt() * 105.0 / 16.0 * std::f64::consts::PI.sqrt() / 6.0;
        assert_relative_eq!(expected_gaussian_norm(8), chi8, max_relative = 1e-12);
        assert_relative_eq!(chi8, 2.74163, max_relative = 1e-5);
        assert!(within(&est, expected_gaussian_norm(8)), "{est:?}");

        assert!(mc_width(&ball, &rng, 1).is_err());
    }

    #[test]
    fn ellipsoid_quadrature_matches_chi_mean_for_round_axes() {
        for d in [1usize, 2, 5, 40] {
            let w = exact_width(&CanonicalSet::Ellipsoid { semi_axes: vec![1.5; d] }).unwrap();
            assert_relative_eq!(w, 1.5 * expected_gaussian_norm(d), max_relative = 1e-9);
        }
        let degenerate = exact_width(&CanonicalSet::Ellipsoid { semi_axes: vec![2.0, 0.0] }).unwrap();
        assert_relative_eq!(degenerate, 2.0 * (2.0 / std::f64::consts::PI).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn analytic_bounds() {
        let b = analytic_width_bound(&CanonicalSet::Ellipsoid {
            semi_axes: vec![0.9, 1.2],
        })
        .unwrap();
        assert_relative_eq!(b.value, 1.5, max_relative = 1e-12);
        assert_eq!(b.convention, UNIT_CONSTANTS);
        let b = analytic_width_bound(&CanonicalSet::L2Ball { dim: 4, radius: 1.0 }).unwrap();
        assert_eq!(b.value, 2.0);
        // k = d collapses to the L2-ball bound of the same radius.
        let r = 3.0;
        let ks = analytic_width_bound(&CanonicalSet::KSupportBall { dim: 9, k: 9, radius: r }).unwrap();
        let l2 = analytic_width_bound(&CanonicalSet::L2Ball { dim: 9, radius: r }).unwrap();
        assert_relative_eq!(ks.value, l2.value, max_relative = 1e-12);
        assert!(matches!(
            analytic_width_bound(&CanonicalSet::FiniteCloud { points: vec![vec![1.0]] }),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn analytic_bounds_dominate_estimates() {
        let rng = RngStream::new(5, 5);
        let sets = [
            CanonicalSet::L2Ball { dim: 6, radius: 0.5 },
            CanonicalSet::Ellipsoid { semi_axes: vec![1.0, 0.5, 0.25, 0.125] },
            CanonicalSet::KSupportBall { dim: 20, k: 3, radius: 3f64.sqrt() },
            CanonicalSet::Union {
                parts: vec![
                    CanonicalSet::FiniteCloud { points: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]] },
                    CanonicalSet::FiniteCloud { points: vec![vec![0.0, 0.0, -1.0]] },
                ],
            },
        ];
        for s in &sets {
            let est = mc_width(s, &rng, 20_000).unwrap();
            let bound = analytic_width_bound(s).unwrap();
            assert!(est.value <= bound.value + 3.0 * est.std_error, "{s:?}: {est:?} vs {bound:?}");
        }
    }

    #[test]
    fn projection_examples() {
        let rng = RngStream::new(3, 1);
        let cloud = vec![vec![1.0, 0.0, 0.0, 1.0], vec![-1.0, 0.0, 0.0, -1.0]];
        let r = projection_width_check(&cloud, 2, &rng, 10_000).unwrap();
        assert!(r.subadditive());

        let zero_tail = vec![vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 0.0], vec![0.0, -1.0, 0.0]];
        let r = projection_width_check(&zero_tail, 2, &rng, 10_000).unwrap();
        assert_eq!(r.part2.value, 0.0);
        assert_relative_eq!(r.whole.value, r.part1.value, max_relative = 1e-12);

        let single = vec![vec![0.3, -0.2, 0.9]];
        let r = projection_width_check(&single, 1, &rng, 10_000).unwrap();
        for e in [&r.whole, &r.part1, &r.part2] {
            assert!(within(e, 0.0));
        }
        assert!(projection_width_check(&single, 3, &rng, 100).is_err());
        assert!(projection_width_check(&single, 0, &rng, 100).is_err());
    }

    #[test]
    fn minkowski_sum_is_additive_under_shared_draws() {
        let rng = RngStream::new(8, 8);
        let a = CanonicalSet::Ellipsoid { semi_axes: vec![1.0, 0.2, 0.4] };
        let b = CanonicalSet::FiniteCloud {
            points: vec![vec![1.0, 1.0, 0.0], vec![0.0, -1.0, 2.0]],
        };
        let sum = CanonicalSet::MinkowskiSum { parts: vec![a.clone(), b.clone()] };
        let (ea, eb, es) = (
            mc_width(&a, &rng, 5000).unwrap(),
            mc_width(&b, &rng, 5000).unwrap(),
            mc_width(&sum, &rng, 5000).unwrap(),
        );
        assert_relative_eq!(es.value, ea.value + eb.value, max_relative = 1e-12);
        let union = CanonicalSet::Union { parts: vec![a, b] };
        let eu = mc_width(&union, &rng, 5000).unwrap();
        assert!(eu.value >= ea.value.max(eb.value) - 3.0 * (ea.std_error + eu.std_error));
    }

    #[test]
    fn validation_errors() {
        assert!(CanonicalSet::L2Ball { dim: 2, radius: -1.0 }.validate().is_err());
        assert!(CanonicalSet::KSupportBall { dim: 2, k: 3, radius: 1.0 }.validate().is_err());
        assert!(CanonicalSet::Union { parts: vec![] }.validate().is_err());
        assert!(CanonicalSet::FiniteCloud { points: vec![vec![1.0], vec![1.0, 2.0]] }
            .validate()
            .is_err());
    }

    #[test]
    fn config_record_round_trip() {
        let s = CanonicalSet::MinkowskiSum {
            parts: vec![
                CanonicalSet::KSupportBall { dim: 3, k: 2, radius: 1.0 },
                CanonicalSet::FiniteCloud { points: vec![vec![0.0, 1.0, 2.0]] },
            ],
        };
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"variant\":\"minkowski_sum\""));
        assert_eq!(serde_json::from_str::<CanonicalSet>(&json).unwrap(), s);
    }

    fn arb_set() -> impl Strategy<Value = CanonicalSet> {
        let dim = 3usize;
        let leaf = prop_oneof![
            (0.1f64..3.0).prop_map(move |r| CanonicalSet::L2Ball { dim, radius: r }),
            proptest::collection::vec(0.0f64..2.0, dim)
                .prop_map(|a| CanonicalSet::Ellipsoid { semi_axes: a }),
            (1usize..=dim, 0.1f64..3.0)
                .prop_map(move |(k, r)| CanonicalSet::KSupportBall { dim, k, radius: r }),
            proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, dim), 1..5)
                .prop_map(|p| CanonicalSet::FiniteCloud { points: p }),
        ];
        leaf.prop_recursive(2, 8, 3, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 1..3)
                    .prop_map(|parts| CanonicalSet::Union { parts }),
                proptest::collection::vec(inner, 1..3)
                    .prop_map(|parts| CanonicalSet::MinkowskiSum { parts }),
            ]
        })
    }

    proptest! {
        #[test]
        fn support_function_is_positively_homogeneous(
            s in arb_set(),
            g in proptest::collection::vec(-3.0f64..3.0, 3),
            c in 0.01f64..10.0,
        ) {
            let base = support_function(&s, &g).unwrap();
            let scaled_g: Vec<f64> = g.iter().map(|v| c * v).collect();
            let scaled = support_function(&s, &scaled_g).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + (c * base).abs()));
        }
    }
}
