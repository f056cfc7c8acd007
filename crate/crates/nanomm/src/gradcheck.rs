//! Finite-difference gradient oracle.
//!
//! This is the measuring stick every backward rule is judged against: slow,
//! obvious, and independent of the tape. Always run in `f64` — central
//! differences in `f32` drown in rounding noise.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per element. `f` must be
/// deterministic; `h` is conventionally `1e-5`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidArg {
            op: "finite_difference_grad",
            detail: format!("step h must be positive and finite, got {h}"),
        });
    }
    let mut eval = |t: &Tensor<f64>| -> Result<f64> {
        let out = f(t)?;
        if out.numel() != 1 {
            return Err(Error::Contract {
                op: "finite_difference_grad",
                detail: format!("f must be scalar-valued, got shape {:?}", out.shape()),
            });
        }
        Ok(out.data()[0])
    };
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Worst element-wise relative error, with an absolute floor of 1e-6 in the
/// denominator so near-zero gradients compare absolutely instead of blowing
/// up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Var};
    use rand::rngs::SmallRng;
    use rand::{Rng, SeedableRng};

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_difference_grad(
            |t| Ok(Tensor::scalar(t.data()[0] * t.data()[0])),
            &x,
            H,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_of_sines_matches_cosine() {
        let mut rng = SmallRng::seed_from_u64(7);
        let x = Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = finite_difference_grad(
            |t| Ok(Tensor::scalar(t.data().iter().map(|v| v.sin()).sum())),
            &x,
            H,
        )
        .unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!((gi - xi.cos()).abs() < 1e-8);
        }
    }

    #[test]
    fn non_scalar_function_is_a_contract_error() {
        let x = Tensor::scalar(1.0);
        let err = finite_difference_grad(|t| Ok(t.map(|v| v * 2.0)), &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), H);
        let _ = x;
        match err {
            Err(Error::Contract { .. }) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    /// Builds a loss from leaves created on a fresh graph per evaluation, so
    /// the same construction serves both the backward pass and the FD probe.
    type Build = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> crate::error::Result<(Var, Vec<Var>)>;

    fn fd_check(name: &str, inputs: &[Tensor<f64>], build: &Build) {
        // analytic pass
        let mut g = Graph::new();
        let (loss, leaves) = build(&mut g, inputs).unwrap();
        g.backward(loss).unwrap();
        for (which, leaf) in leaves.iter().enumerate() {
            let analytic = g
                .grad(*leaf)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
            let numeric = finite_difference_grad(
                |probe| {
                    let mut inputs2: Vec<Tensor<f64>> = inputs.to_vec();
                    inputs2[which] = probe.clone();
                    let mut g2 = Graph::new();
                    let (loss2, _) = build(&mut g2, &inputs2)?;
                    Ok(Tensor::scalar(g2.scalar_value(loss2)?))
                },
                &inputs[which],
                H,
            )
            .unwrap();
            let err = max_rel_err(&analytic, numeric.data());
            assert!(
                err < TOL,
                "{name}: input {which} rel err {err:.3e} exceeds {TOL:.0e}"
            );
        }
    }

    fn randt(rng: &mut SmallRng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// loss = sum(out ⊙ W) for a fixed random W, so upstream gradients are
    /// non-uniform (uniform ones mask index bugs in softmax-style rules).
    fn weighted_loss(
        g: &mut Graph<f64>,
        out: Var,
        w: &Tensor<f64>,
    ) -> crate::error::Result<Var> {
        let wv = g.leaf(w.clone())?;
        let prod = g.mul(out, wv)?;
        g.sum_all(prod)
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = SmallRng::seed_from_u64(11);
        for (m, k, n) in [(1, 1, 1), (2, 3, 4), (5, 4, 3)] {
            let a = randt(&mut rng, vec![m, k]);
            let b = randt(&mut rng, vec![k, n]);
            let w = randt(&mut rng, vec![m, n]);
            fd_check(
                "matmul",
                &[a, b],
                &move |g, inp| {
                    let (a, b) = (g.leaf(inp[0].clone())?, g.leaf(inp[1].clone())?);
                    let y = g.matmul(a, b)?;
                    Ok((weighted_loss(g, y, &w)?, vec![a, b]))
                },
            );
        }
    }

    #[test]
    fn matmul_transb_gradients() {
        let mut rng = SmallRng::seed_from_u64(12);
        for (m, k, n) in [(2, 2, 2), (3, 5, 2), (1, 4, 6)] {
            let a = randt(&mut rng, vec![m, k]);
            let b = randt(&mut rng, vec![n, k]);
            let w = randt(&mut rng, vec![m, n]);
            fd_check("matmul_transb", &[a, b], &move |g, inp| {
                let (a, b) = (g.leaf(inp[0].clone())?, g.leaf(inp[1].clone())?);
                let y = g.matmul_transb(a, b)?;
                Ok((weighted_loss(g, y, &w)?, vec![a, b]))
            });
        }
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = SmallRng::seed_from_u64(13);
        for shape in [vec![3], vec![2, 4], vec![5, 1]] {
            let a = randt(&mut rng, shape.clone());
            let b = randt(&mut rng, shape.clone());
            let w = randt(&mut rng, shape.clone());
            fd_check("add", &[a.clone(), b.clone()], &{
                let w = w.clone();
                move |g, inp| {
                    let (a, b) = (g.leaf(inp[0].clone())?, g.leaf(inp[1].clone())?);
                    let y = g.add(a, b)?;
                    Ok((weighted_loss(g, y, &w)?, vec![a, b]))
                }
            });
            fd_check("mul", &[a.clone(), b], &{
                let w = w.clone();
                move |g, inp| {
                    let (a, b) = (g.leaf(inp[0].clone())?, g.leaf(inp[1].clone())?);
                    let y = g.mul(a, b)?;
                    Ok((weighted_loss(g, y, &w)?, vec![a, b]))
                }
            });
            fd_check("scale", &[a], &move |g, inp| {
                let a = g.leaf(inp[0].clone())?;
                let y = g.scale(a, -1.7)?;
                Ok((weighted_loss(g, y, &w)?, vec![a]))
            });
        }
    }

    #[test]
    fn add_row_gradients() {
        let mut rng = SmallRng::seed_from_u64(14);
        for (n, d) in [(1, 3), (4, 2), (3, 5)] {
            let a = randt(&mut rng, vec![n, d]);
            let bias = randt(&mut rng, vec![d]);
            let w = randt(&mut rng, vec![n, d]);
            fd_check("add_row", &[a, bias], &move |g, inp| {
                let (a, b) = (g.leaf(inp[0].clone())?, g.leaf(inp[1].clone())?);
                let y = g.add_row(a, b)?;
                Ok((weighted_loss(g, y, &w)?, vec![a, b]))
            });
        }
    }

    #[test]
    fn unary_gradients() {
        let mut rng = SmallRng::seed_from_u64(15);
        for shape in [vec![4], vec![3, 3], vec![2, 6]] {
            let a = randt(&mut rng, shape.clone());
            let pos = a.map(|v| v.abs() + 0.5); // keep log well away from 0
            let w = randt(&mut rng, shape.clone());
            fd_check("gelu", &[a.clone()], &{
                let w = w.clone();
                move |g, inp| {
                    let a = g.leaf(inp[0].clone())?;
                    let y = g.gelu(a)?;
                    Ok((weighted_loss(g, y, &w)?, vec![a]))
                }
            });
            fd_check("exp", &[a], &{
                let w = w.clone();
                move |g, inp| {
                    let a = g.leaf(inp[0].clone())?;
                    let y = g.exp(a)?;
                    Ok((weighted_loss(g, y, &w)?, vec![a]))
                }
            });
            fd_check("log", &[pos], &move |g, inp| {
                let a = g.leaf(inp[0].clone())?;
                let y = g.log(a)?;
                Ok((weighted_loss(g, y, &w)?, vec![a]))
            });
        }
    }

    #[test]
    fn softmax_gradients_both_axes_and_sharp_temperature() {
        let mut rng = SmallRng::seed_from_u64(16);
        for (shape, axis, temp) in [
            (vec![7], 0, 0.005),
            (vec![3, 4], 1, 1.0),
            (vec![4, 3], 0, 0.7),
            (vec![2, 5], 1, 0.005),
        ] {
            let a = randt(&mut rng, shape.clone());
            let w = randt(&mut rng, shape.clone());
            fd_check("softmax", &[a], &move |g, inp| {
                let a = g.leaf(inp[0].clone())?;
                let y = g.softmax(a, axis, temp)?;
                Ok((weighted_loss(g, y, &w)?, vec![a]))
            });
        }
    }

    #[test]
    fn causal_softmax_gradients() {
        let mut rng = SmallRng::seed_from_u64(17);
        for (n, temp) in [(1, 1.0), (3, 2.0), (5, 1.4142)] {
            let a = randt(&mut rng, vec![n, n]);
            let w = randt(&mut rng, vec![n, n]);
            fd_check("causal_softmax", &[a], &move |g, inp| {
                let a = g.leaf(inp[0].clone())?;
                let y = g.causal_softmax(a, temp)?;
                Ok((weighted_loss(g, y, &w)?, vec![a]))
            });
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = SmallRng::seed_from_u64(18);
        for (n, d) in [(1, 4), (3, 5), (4, 2)] {
            let x = randt(&mut rng, vec![n, d]);
            let gain = randt(&mut rng, vec![d]);
            let bias = randt(&mut rng, vec![d]);
            let w = randt(&mut rng, vec![n, d]);
            fd_check("layer_norm", &[x, gain, bias], &move |g, inp| {
                let x = g.leaf(inp[0].clone())?;
                let gain = g.leaf(inp[1].clone())?;
                let bias = g.leaf(inp[2].clone())?;
                let y = g.layer_norm(x, gain, bias, 1e-6)?;
                Ok((weighted_loss(g, y, &w)?, vec![x, gain, bias]))
            });
        }
    }

    #[test]
    fn reduction_gradients() {
        let mut rng = SmallRng::seed_from_u64(19);
        for (n, d, axis) in [(2, 3, 0), (2, 3, 1), (4, 1, 0), (1, 5, 1)] {
            let x = randt(&mut rng, vec![n, d]);
            let wlen = if axis == 0 { d } else { n };
            let w = randt(&mut rng, vec![wlen]);
            fd_check("mean", &[x.clone()], &{
                let w = w.clone();
                move |g, inp| {
                    let x = g.leaf(inp[0].clone())?;
                    let y = g.mean(x, axis)?;
                    Ok((weighted_loss(g, y, &w)?, vec![x]))
                }
            });
            fd_check("sum", &[x], &move |g, inp| {
                let x = g.leaf(inp[0].clone())?;
                let y = g.sum(x, axis)?;
                Ok((weighted_loss(g, y, &w)?, vec![x]))
            });
        }
    }

    #[test]
    fn gather_and_layout_gradients() {
        let mut rng = SmallRng::seed_from_u64(20);
        let table = randt(&mut rng, vec![5, 3]);
        let w = randt(&mut rng, vec![4, 3]);
        fd_check("gather_rows", &[table], &move |g, inp| {
            let t = g.leaf(inp[0].clone())?;
            let y = g.gather_rows(t, vec![4, 0, 0, 2])?;
            Ok((weighted_loss(g, y, &w)?, vec![t]))
        });

        let a = randt(&mut rng, vec![2, 3]);
        let b = randt(&mut rng, vec![1, 3]);
        let w = randt(&mut rng, vec![2, 2]);
        fd_check("concat_slice_reshape", &[a, b], &move |g, inp| {
            let a = g.leaf(inp[0].clone())?;
            let b = g.leaf(inp[1].clone())?;
            let cat = g.concat_rows(&[a, b])?; // [3,3]
            let sl = g.slice_rows(cat, 1, 3)?; // [2,3]
            let c1 = g.slice_cols(sl, 0, 1)?; // [2,1]
            let c2 = g.slice_cols(sl, 1, 3)?; // [2,2]
            let c2r = g.reshape(c2, vec![4, 1])?;
            let c2b = g.slice_rows(c2r, 0, 2)?;
            let back = g.concat_cols(&[c1, c2b])?; // [2,2]
            Ok((weighted_loss(g, back, &w)?, vec![a, b]))
        });
    }

    #[test]
    fn rope_gradients() {
        let mut rng = SmallRng::seed_from_u64(21);
        for (n, d) in [(1, 2), (3, 4), (2, 8)] {
            let x = randt(&mut rng, vec![n, d]);
            let angles: Vec<f64> = (0..n * d / 2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let w = randt(&mut rng, vec![n, d]);
            fd_check("rope", &[x], &move |g, inp| {
                let x = g.leaf(inp[0].clone())?;
                let y = g.rope(x, &angles)?;
                Ok((weighted_loss(g, y, &w)?, vec![x]))
            });
        }
    }

    #[test]
    fn interp_grid_gradients() {
        let mut rng = SmallRng::seed_from_u64(22);
        for (src, dst) in [((2, 2), (3, 3)), ((3, 2), (5, 7)), ((4, 4), (4, 4))] {
            let table = randt(&mut rng, vec![src.0 * src.1, 3]);
            let w = randt(&mut rng, vec![dst.0 * dst.1, 3]);
            fd_check("interp_grid", &[table], &move |g, inp| {
                let t = g.leaf(inp[0].clone())?;
                let y = g.interp_grid(t, src, dst)?;
                Ok((weighted_loss(g, y, &w)?, vec![t]))
            });
        }
    }

    #[test]
    fn fused_loss_gradients() {
        let mut rng = SmallRng::seed_from_u64(23);
        let logits = randt(&mut rng, vec![4, 6]);
        fd_check("nll_next_token", &[logits], &|g, inp| {
            let l = g.leaf(inp[0].clone())?;
            let y = g.nll_next_token(l, &[1, 5, 0, 2])?;
            let y = g.scale(y, 0.731)?;
            Ok((y, vec![l]))
        });

        // column-stochastic soft targets
        let (k, b) = (5, 3);
        let mut q = vec![0.0; k * b];
        for col in 0..b {
            let mut s = 0.0;
            for row in 0..k {
                let v: f64 = rng.random_range(0.01..1.0);
                q[row * b + col] = v;
                s += v;
            }
            for row in 0..k {
                q[row * b + col] /= s;
            }
        }
        let q = Tensor::new(vec![k, b], q).unwrap();
        let logits = randt(&mut rng, vec![k, b]).map(|v| v * 0.01);
        fd_check("soft_cross_entropy_cols", &[logits], &move |g, inp| {
            let l = g.leaf(inp[0].clone())?;
            let y = g.soft_cross_entropy_cols(l, &q, 0.005)?;
            Ok((y, vec![l]))
        });
    }
}
