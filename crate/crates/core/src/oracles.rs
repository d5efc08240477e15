//! Independent reference computations used to cross-check the estimators.
//!
//! Nothing here shares a code path with the quantity it checks: the
//! k-support oracle works from the infimum-convolution definition of the
//! norm rather than its dual, and the gradient oracle only evaluates losses.

use crate::numerics::{norm2, RngStream};

/// `sup ⟨x, g⟩` over the k-support ball of radius `radius`, by multi-start
/// projected gradient ascent.
///
/// The ball is parameterized through its definition as an infimum
/// convolution: `x = Σ_S u_S` over supports `|S| = k`, with `Σ_S ‖u_S‖₂ ≤ radius`.
/// The feasible set for the block vector `(u_S)` is a group-L1 ball whose
/// Euclidean projection is a simplex projection of the block norms, so each
/// ascent step is exact.
pub fn k_support_sup_by_ascent(
    g: &[f64],
    k: usize,
    radius: f64,
    restarts: usize,
    steps: usize,
    rng: &RngStream,
) -> f64 {
    let supports = combinations(g.len(), k);
    let blocks: Vec<Vec<f64>> = supports
        .iter()
        .map(|s| s.iter().map(|&i| g[i]).collect())
        .collect();
    let objective = |u: &[Vec<f64>]| -> f64 {
        u.iter()
            .zip(&blocks)
            .map(|(us, gs)| us.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let gnorm = norm2(g).max(f64::MIN_POSITIVE);
    let step = radius / gnorm;
    let mut best = f64::NEG_INFINITY;
    for r in 0..restarts {
        let mut local = rng.substream(r as u64);
        let mut u: Vec<Vec<f64>> = blocks.iter().map(|b| local.gaussian_vec(b.len())).collect();
        project_group_l1(&mut u, radius);
        best = best.max(objective(&u));
        for _ in 0..steps {
            for (us, gs) in u.iter_mut().zip(&blocks) {
                for (a, b) in us.iter_mut().zip(gs) {
                    *a += step * b;
                }
            }
            project_group_l1(&mut u, radius);
            best = best.max(objective(&u));
        }
    }
    best
}

/// Euclidean projection onto `{(u_S) : Σ_S ‖u_S‖₂ ≤ radius}`.
fn project_group_l1(u: &mut [Vec<f64>], radius: f64) {
    let norms: Vec<f64> = u.iter().map(|b| norm2(b)).collect();
    if norms.iter().sum::<f64>() <= radius {
        return;
    }
    let shrunk = project_nonneg_l1(&norms, radius);
    for ((b, &old), &new) in u.iter_mut().zip(&norms).zip(&shrunk) {
        let scale = if old > 0.0 { new / old } else { 0.0 };
        b.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Projection of a non-negative vector with sum above `radius` onto the
/// simplex `{x ≥ 0, Σx = radius}` (sort-based threshold).
fn project_nonneg_l1(v: &[f64], radius: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - radius) / (i + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::top_k_norm;

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(6, 3).len(), 20);
        assert_eq!(combinations(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(combinations(3, 1).len(), 3);
    }

    #[test]
    fn ascent_recovers_top_k_example() {
        let v = k_support_sup_by_ascent(&[3.0, -4.0, 1.0], 2, 1.0, 5, 200, &RngStream::new(1, 1));
        assert!((v - 5.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn ascent_with_k_one_is_linf_dual() {
        let g = [0.5, -2.5, 1.0, 2.0];
        let v = k_support_sup_by_ascent(&g, 1, 2.0, 5, 300, &RngStream::new(2, 1));
        assert!((v - 5.0).abs() < 1e-6);
        assert!((top_k_norm(&g, 1) * 2.0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_projection() {
        let p = project_nonneg_l1(&[3.0, 1.0, 0.0], 2.0);
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
        let p = project_nonneg_l1(&[1.0, 1.0], 1.0);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let g = central_difference_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
