//! Central finite-difference verification of analytic gradients.

use crate::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across the checked elements.
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    /// Number of elements compared.
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a floor in the denominator: gradient entries smaller
/// than 1e-6 in magnitude are compared absolutely at that scale, since for
/// such entries the central-difference estimate is dominated by f64 roundoff
/// (~1e-16 * |f| / eps) rather than by the gradient itself.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn eval_scalar<F>(f: &F, theta: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let p = g.input(theta.clone());
    let out = f(&mut g, p)?;
    if g.value(out).numel() != 1 {
        return Err(Error::InvalidArg(format!(
            "grad_check: output must be scalar, got shape {:?}",
            g.value(out).shape()
        )));
    }
    Ok(g.value(out).data()[0])
}

fn check_indices<F>(f: F, theta: &Tensor, eps: f64, tol: f64, indices: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArg(format!("grad_check: eps must be > 0, got {eps}")));
    }
    // analytic pass
    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let p = g.param(theta.clone());
        let out = f(&mut g, p)?;
        if g.value(out).numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "grad_check: output must be scalar, got shape {:?}",
                g.value(out).shape()
            )));
        }
        g.backward(out)?;
        match g.grad(p) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; theta.numel()],
        }
    };
    let mut max_rel = 0.0;
    let mut worst = 0;
    for &i in indices {
        let mut plus = theta.clone();
        plus.data_mut()[i] += eps;
        let mut minus = theta.clone();
        minus.data_mut()[i] -= eps;
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric);
        if e > max_rel {
            max_rel = e;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: indices.len(),
        tol,
        passed: max_rel <= tol,
    })
}

/// Compare the analytic gradient of `f` with central differences at every
/// element of `theta`. `f` must build a scalar output from the given node.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let indices: Vec<usize> = (0..theta.numel()).collect();
    check_indices(f, theta, eps, tol, &indices)
}

/// Same check restricted to `max_checks` deterministically sampled elements.
/// Used where `theta` is large enough that the full sweep would dominate the
/// test budget.
pub fn grad_check_sampled<F>(
    f: F,
    theta: &Tensor,
    eps: f64,
    tol: f64,
    max_checks: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let n = theta.numel();
    if max_checks >= n {
        return grad_check(f, theta, eps, tol);
    }
    use rand::seq::index::sample;
    let mut rng = crate::util::derive_rng(seed, 0x6772_6164);
    let indices: Vec<usize> = sample(&mut rng, n, max_checks).into_iter().collect();
    check_indices(f, theta, eps, tol, &indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let mut rng = crate::util::derive_rng(seed, 7);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let theta = random_tensor(&[6], 1, 2.0);
        let report = grad_check(
            |g, p| {
                let zero = g.input(Tensor::zeros(&[6]));
                g.mse(p, zero)
            },
            &theta,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let theta = random_tensor(&[4], 2, 1.0);
        let err = grad_check(|g, p| g.leaky_relu(p, 0.3), &theta, 1e-5, 1e-4).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn dense_weight_gradient_matches_fd() {
        // gradient of sum(dense(x, W, b)) w.r.t. W on a random 3x4 input
        let x = random_tensor(&[3, 4], 3, 1.0);
        let w0 = random_tensor(&[4, 2], 4, 1.0);
        let report = grad_check(
            move |g, p| {
                let xi = g.input(x.clone());
                let b = g.input(Tensor::zeros(&[2]));
                let y = g.dense(xi, p, b)?;
                Ok(g.sum(y))
            },
            &w0,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn attention_query_gradient_matches_fd() {
        let q = random_tensor(&[1, 3, 4], 5, 1.0);
        let k = random_tensor(&[1, 3, 4], 6, 1.0);
        let v = random_tensor(&[1, 3, 4], 7, 1.0);
        let report = grad_check(
            move |g, p| {
                let kn = g.input(k.clone());
                let vn = g.input(v.clone());
                let y = g.attention(p, kn, vn)?;
                let target = g.input(Tensor::zeros(&[1, 3, 4]));
                g.mse(y, target)
            },
            &q,
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gelu_gradient_matches_fd_on_100_points() {
        let theta = random_tensor(&[100], 8, 3.0);
        let report = grad_check(
            |g, p| {
                let y = g.gelu(p)?;
                Ok(g.sum(y))
            },
            &theta,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn every_primitive_passes_fd_over_20_seeds() {
        // randomized small shapes per op family, 20 seeds each
        for seed in 0..20u64 {
            let mut rng = crate::util::derive_rng(seed, 0xfd);
            let b = rng.gen_range(2..4usize);

            // dense w.r.t. x
            let x = random_tensor(&[b, 3], seed.wrapping_add(100), 1.0);
            let w = random_tensor(&[3, 2], seed.wrapping_add(200), 1.0);
            let r = grad_check(
                {
                    let w = w.clone();
                    move |g, p| {
                        let wn = g.input(w.clone());
                        let bias = g.input(Tensor::zeros(&[2]));
                        let y = g.dense(p, wn, bias)?;
                        Ok(g.sum(y))
                    }
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "dense/x seed {seed}: {}", r.max_rel_err);

            // conv w.r.t. kernel (dilation varies)
            let dil = 1 + (seed as usize % 2);
            let xc = random_tensor(&[b, 2, 5, 5], seed.wrapping_add(300), 1.0);
            let k0 = random_tensor(&[3, 2, 3, 3], seed.wrapping_add(400), 0.5);
            let r = grad_check(
                {
                    let xc = xc.clone();
                    move |g, p| {
                        let xn = g.input(xc.clone());
                        let bias = g.input(Tensor::zeros(&[3]));
                        let y = g.conv2d(xn, p, bias, 1, dil, dil)?;
                        Ok(g.sum(y))
                    }
                },
                &k0,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "conv/k seed {seed}: {}", r.max_rel_err);

            // conv w.r.t. input
            let r = grad_check(
                {
                    let k0 = k0.clone();
                    move |g, p| {
                        let kn = g.input(k0.clone());
                        let bias = g.input(Tensor::zeros(&[3]));
                        let y = g.conv2d(p, kn, bias, 1, 1, 1)?;
                        let t = g.input(Tensor::zeros(&[b, 3, 5, 5]));
                        g.mse(y, t)
                    }
                },
                &xc,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "conv/x seed {seed}: {}", r.max_rel_err);

            // attention w.r.t. k and v
            let l = rng.gen_range(2..5usize);
            let d = rng.gen_range(2..5usize);
            let q = random_tensor(&[1, l, d], seed.wrapping_add(500), 1.0);
            let kk = random_tensor(&[1, l, d], seed.wrapping_add(600), 1.0);
            let vv = random_tensor(&[1, l, d], seed.wrapping_add(700), 1.0);
            for (which, theta) in [(0, kk.clone()), (1, vv.clone())] {
                let (q, kk, vv) = (q.clone(), kk.clone(), vv.clone());
                let r = grad_check(
                    move |g, p| {
                        let qn = g.input(q.clone());
                        let shape = q.shape().to_vec();
                        let (kn, vn) = if which == 0 {
                            (p, g.input(vv.clone()))
                        } else {
                            (g.input(kk.clone()), p)
                        };
                        let y = g.attention(qn, kn, vn)?;
                        let t = g.input(Tensor::zeros(&shape));
                        g.mse(y, t)
                    },
                    &theta,
                    1e-4,
                    1e-4,
                )
                .unwrap();
                assert!(r.passed, "attention/{which} seed {seed}: {}", r.max_rel_err);
            }

            // activations
            for kind in [
                Activation::LeakyRelu(0.3),
                Activation::Sigmoid,
                Activation::Tanh,
                Activation::Gelu,
            ] {
                let theta = random_tensor(&[7], seed.wrapping_add(800), 2.0);
                let r = grad_check(
                    move |g, p| {
                        let y = g.activation(p, kind)?;
                        Ok(g.sum(y))
                    },
                    &theta,
                    1e-5,
                    1e-4,
                )
                .unwrap();
                assert!(r.passed, "activation {kind:?} seed {seed}: {}", r.max_rel_err);
            }

            // batchnorm (train) w.r.t. x, gamma
            let xb = random_tensor(&[b.max(2), 2, 3, 3], seed.wrapping_add(900), 1.5);
            let r = grad_check(
                {
                    let shape = xb.shape().to_vec();
                    move |g, p| {
                        let gamma = g.input(Tensor::filled(&[2], 1.2));
                        let beta = g.input(Tensor::filled(&[2], -0.3));
                        let mut st = crate::autodiff::BatchNormState::new(2, 0.1, 1e-5);
                        let y = g.batchnorm(p, gamma, beta, crate::autodiff::Mode::Train, &mut st)?;
                        let t = g.input(Tensor::zeros(&shape));
                        g.mse(y, t)
                    }
                },
                &xb,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "batchnorm/x seed {seed}: {}", r.max_rel_err);

            // layernorm w.r.t. x
            let xl = random_tensor(&[2, 3, 5], seed.wrapping_add(1000), 1.5);
            let r = grad_check(
                move |g, p| {
                    let gamma = g.input(Tensor::filled(&[5], 0.9));
                    let beta = g.input(Tensor::filled(&[5], 0.1));
                    let y = g.layernorm(p, gamma, beta, 1e-5)?;
                    let t = g.input(Tensor::zeros(&[2, 3, 5]));
                    g.mse(y, t)
                },
                &xl,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "layernorm/x seed {seed}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn sampled_check_subsets_the_full_sweep() {
        let theta = random_tensor(&[50], 11, 1.0);
        let r = grad_check_sampled(
            |g, p| {
                let y = g.sigmoid(p)?;
                Ok(g.sum(y))
            },
            &theta,
            1e-5,
            1e-6,
            10,
            42,
        )
        .unwrap();
        assert_eq!(r.checked, 10);
        assert!(r.passed);
    }
}
