//! Central finite-difference gradient checking.
//!
//! Independent of the backward pass: perturbs leaf data in place and re-runs
//! the forward closure under `no_grad`. Step size and tolerance track the
//! compiled precision (1e-3 at 32-bit, 1e-5 in the `f64` verification build).

use crate::tensor::{no_grad, Real, Tensor, FD_STEP};

/// Central-difference gradient of `f` with respect to `leaf`, at step `h`.
pub fn numerical_grad(leaf: &Tensor, h: Real, mut f: impl FnMut() -> Real) -> Vec<Real> {
    let base = leaf.to_vec();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        leaf.set_data(&probe);
        let plus = no_grad(&mut f);
        probe[i] = base[i] - h;
        leaf.set_data(&probe);
        let minus = no_grad(&mut f);
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    leaf.set_data(&base);
    grad
}

/// Re-draw every leaf from N(0, std^2). Gradient checks need test points
/// with O(1) signal: at training-scale initialization many parameter
/// gradients sit below single-precision finite-difference resolution.
pub fn randomize_leaves<R: rand::Rng>(leaves: &[(String, Tensor)], rng: &mut R, std: Real) {
    use rand_distr::{Distribution, StandardNormal};
    for (_, t) in leaves {
        let data: Vec<Real> = (0..t.numel())
            .map(|_| {
                let z: Real = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        t.set_data(&data);
    }
}

/// L2 relative error between two gradient vectors.
pub fn rel_error(a: &[Real], b: &[Real]) -> Real {
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        diff += ((x - y) as f64).powi(2);
        na += (x as f64).powi(2);
        nb += (y as f64).powi(2);
    }
    let denom = na.sqrt().max(nb.sqrt()).max(1e-12);
    (diff.sqrt() / denom) as Real
}

/// Result of comparing analytic gradients against central finite differences.
pub struct GradReport {
    /// Per-leaf relative error, in the order the leaves were given.
    pub per_leaf: Vec<(String, Real)>,
    /// Relative error of the full gradient vector (all leaves concatenated).
    /// At 32-bit this is the robust figure of merit: leaves whose gradient
    /// norm is tiny relative to the loss sit below the finite-difference
    /// resolution floor and report inflated per-leaf errors.
    pub global: Real,
}

/// Per-leaf and whole-model relative error between analytic and
/// finite-difference gradients. `forward` must rebuild the graph and return
/// the scalar loss.
pub fn check_gradients(
    leaves: &[(&str, Tensor)],
    mut forward: impl FnMut() -> Tensor,
) -> GradReport {
    for (_, leaf) in leaves {
        leaf.zero_grad();
    }
    let loss = forward();
    loss.backward().expect("backward failed in gradient check");
    let mut per_leaf = Vec::new();
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for (name, leaf) in leaves {
        let analytic = leaf
            .grad()
            .unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = numerical_grad(leaf, FD_STEP, || forward().item());
        per_leaf.push((name.to_string(), rel_error(&analytic, &numeric)));
        all_analytic.extend_from_slice(&analytic);
        all_numeric.extend_from_slice(&numeric);
    }
    let global = rel_error(&all_analytic, &all_numeric);
    GradReport { per_leaf, global }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::MapRng;
    use crate::tensor::GRAD_TOL;

    #[test]
    fn matmul_gradient_matches_fd() {
        // gradient of sum(A·B) wrt A equals ones·B^T
        let mut rng = MapRng::seed_from_u64(3);
        let a = Tensor::randn(&mut rng, &[3, 4], 1.0, true);
        let b = Tensor::randn(&mut rng, &[4, 2], 1.0, true);
        let report = check_gradients(&[("a", a.clone()), ("b", b.clone())], || {
            a.matmul(&b).unwrap().sum()
        });
        for (name, err) in &report.per_leaf {
            assert!(*err < GRAD_TOL, "{}: rel err {}", name, err);
        }
        // closed form for dA: ones [3,2] · B^T
        let g = a.grad().is_some();
        assert!(g);
        a.zero_grad();
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        let bd = b.to_vec();
        for i in 0..3 {
            for k in 0..4 {
                let want: Real = bd[k * 2] + bd[k * 2 + 1];
                assert!((ga[i * 4 + k] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fused_ops_gradients_match_fd() {
        let mut rng = MapRng::seed_from_u64(11);
        let x = Tensor::randn(&mut rng, &[4, 6], 0.5, true);
        let gamma = Tensor::randn(&mut rng, &[6], 0.2, true);
        let beta = Tensor::randn(&mut rng, &[6], 0.2, true);
        let report = check_gradients(
            &[("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())],
            || {
                x.layer_norm(&gamma, &beta, 1e-5)
                    .unwrap()
                    .gelu()
                    .silu()
                    .sum()
            },
        );
        for (name, err) in report.per_leaf {
            assert!(err < GRAD_TOL, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn softmax_masked_gradient_matches_fd() {
        let mut rng = MapRng::seed_from_u64(5);
        let x = Tensor::randn(&mut rng, &[2, 3, 3], 1.0, true);
        let mask = vec![true, false, true, true, true, false, false, true, true];
        let w = Tensor::randn(&mut rng, &[2, 3, 3], 1.0, false);
        let report = check_gradients(&[("x", x.clone())], || {
            x.softmax_masked(Some(&mask)).unwrap().mul(&w).unwrap().sum()
        });
        for (name, err) in report.per_leaf {
            assert!(err < GRAD_TOL, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn selective_scan_gradient_matches_fd() {
        let mut rng = MapRng::seed_from_u64(7);
        let u = Tensor::randn(&mut rng, &[2, 5, 3], 0.8, true);
        let delta_raw = Tensor::randn(&mut rng, &[2, 5, 3], 0.5, true);
        let a_log = Tensor::randn(&mut rng, &[3, 2], 0.4, true);
        let b = Tensor::randn(&mut rng, &[2, 5, 2], 0.8, true);
        let c = Tensor::randn(&mut rng, &[2, 5, 2], 0.8, true);
        let w = Tensor::randn(&mut rng, &[2, 5, 3], 1.0, false);
        let leaves = [
            ("u", u.clone()),
            ("delta_raw", delta_raw.clone()),
            ("a_log", a_log.clone()),
            ("b", b.clone()),
            ("c", c.clone()),
        ];
        let report = check_gradients(&leaves, || {
            let delta = delta_raw.softplus();
            Tensor::selective_scan(&u, &delta, &a_log, &b, &c)
                .unwrap()
                .mul(&w)
                .unwrap()
                .sum()
        });
        for (name, err) in report.per_leaf {
            assert!(err < GRAD_TOL, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn broadcast_ops_gradients_match_fd() {
        let mut rng = MapRng::seed_from_u64(13);
        let x = Tensor::randn(&mut rng, &[6, 4], 0.7, true);
        let bias = Tensor::randn(&mut rng, &[4], 0.7, true);
        let tile = Tensor::randn(&mut rng, &[3, 4], 0.7, true);
        let wcol = Tensor::randn(&mut rng, &[4], 0.7, true);
        let fill = Tensor::randn(&mut rng, &[4], 0.7, true);
        let s = Tensor::from_vec(vec![1.3], &[1], true).unwrap();
        let mask = [false, true, false, false, true, false];
        let leaves = [
            ("x", x.clone()),
            ("bias", bias.clone()),
            ("tile", tile.clone()),
            ("wcol", wcol.clone()),
            ("fill", fill.clone()),
            ("s", s.clone()),
        ];
        let report = check_gradients(&leaves, || {
            x.add_bias(&bias)
                .unwrap()
                .add_tiled(&tile)
                .unwrap()
                .scale_cols(&wcol)
                .unwrap()
                .blend_rows(&fill, &mask)
                .unwrap()
                .mul_scalar_t(&s)
                .unwrap()
                .mean_rows_group(3)
                .unwrap()
                .sum()
        });
        for (name, err) in report.per_leaf {
            assert!(err < GRAD_TOL, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut rng = MapRng::seed_from_u64(17);
        let logits = Tensor::randn(&mut rng, &[5, 4], 1.0, true);
        let labels = [0usize, 3, 1, 2, 2];
        let report = check_gradients(&[("logits", logits.clone())], || {
            logits.cross_entropy(&labels).unwrap()
        });
        for (name, err) in report.per_leaf {
            assert!(err < GRAD_TOL, "{}: rel err {}", name, err);
        }
    }
}
