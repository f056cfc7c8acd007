//! Vision-language alignment: global pooling, projection of pooled features
//! onto the (frozen) word-prototype matrix, prior-weighted Sinkhorn target
//! construction, and the column-wise soft cross-entropy whose gradient feeds
//! only the vision path.
//!
//! Targets are always built in f64 off any tape — exp(x/0.005) shreds f32 —
//! and enter the loss as constants, so no gradient ever flows through their
//! construction or into the text side.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Word-frequency marginal u_W: the row targets of the transport plan.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMarginal {
    u: Vec<f64>,
}

impl PriorMarginal {
    /// Validates nonnegativity and unit mass (within 1e-9).
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::InvalidArg {
                op: "prior_marginal",
                detail: "empty prior".into(),
            });
        }
        if let Some(&bad) = u.iter().find(|&&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArg {
                op: "prior_marginal",
                detail: format!("entries must be finite and nonnegative, found {bad}"),
            });
        }
        let s: f64 = u.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArg {
                op: "prior_marginal",
                detail: format!("mass sums to {s}, expected 1 within 1e-9"),
            });
        }
        Ok(PriorMarginal { u })
    }

    /// Uniform prior over K words.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArg {
                op: "prior_marginal",
                detail: "K must be positive".into(),
            });
        }
        PriorMarginal::new(vec![1.0 / k as f64; k])
    }

    /// Build from raw word counts, flooring never-observed words at 0.1/K of
    /// the pre-normalization total so every row target stays strictly
    /// positive, then normalizing.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArg {
                op: "prior_marginal",
                detail: "empty count vector".into(),
            });
        }
        let k = counts.len() as f64;
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        if total == 0.0 {
            return PriorMarginal::uniform(counts.len());
        }
        let floor = 0.1 / k * total;
        let mut u: Vec<f64> = counts.iter().map(|&c| if c == 0 { floor } else { c as f64 }).collect();
        let s: f64 = u.iter().sum();
        for v in &mut u {
            *v /= s;
        }
        PriorMarginal::new(u)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.u
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic temperature ε.
    pub eps: f64,
    /// Row/column rescale rounds before the exact column renormalization.
    pub n_iters: usize,
    /// When false, skip the iteration and use the closed-form prior-weighted
    /// column softmax (the one-sided reading of the target formula).
    pub two_sided: bool,
    /// Marginal tolerance for validating produced targets.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            eps: 0.005,
            n_iters: 3,
            two_sided: true,
            tol: 1e-6,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidArg {
                op: "sinkhorn_config",
                detail: format!("eps must be positive and finite, got {}", self.eps),
            });
        }
        if self.n_iters == 0 {
            return Err(Error::InvalidArg {
                op: "sinkhorn_config",
                detail: "n_iters must be at least 1".into(),
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArg {
                op: "sinkhorn_config",
                detail: format!("tol must be positive, got {}", self.tol),
            });
        }
        Ok(())
    }
}

/// Parameter-free global average pooling over the token axis: [n×D] → [D].
pub fn pool<T: Scalar>(g: &mut Graph<T>, features: Var) -> Result<Var> {
    if g.value(features).rank() != 2 {
        return Err(Error::Contract {
            op: "align.pool",
            detail: format!("expected [n x D] features, got {:?}", g.value(features).shape()),
        });
    }
    g.mean(features, 0)
}

/// Stack per-sample pooled vectors into a [B×D] batch matrix.
pub fn stack_pooled<T: Scalar>(g: &mut Graph<T>, pooled: &[Var]) -> Result<Var> {
    if pooled.is_empty() {
        return Err(Error::Contract {
            op: "align.stack_pooled",
            detail: "empty batch".into(),
        });
    }
    let mut rows = Vec::with_capacity(pooled.len());
    for &p in pooled {
        let d = g.value(p).numel();
        rows.push(g.reshape(p, vec![1, d])?);
    }
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    g.concat_rows(&rows)
}

/// Similarity columns C = Wᵀ·Fᵀ ∈ [K×B] between pooled features F ∈ [B×D_t]
/// and the word-prototype matrix (the decoder's embedding table, rows =
/// words). The table is detached first: gradient flows to F only, never to W.
pub fn project_prototypes<T: Scalar>(g: &mut Graph<T>, f: Var, embed: Var) -> Result<Var> {
    let fs = g.value(f).shape().to_vec();
    let es = g.value(embed).shape().to_vec();
    if fs.len() != 2 || es.len() != 2 || fs[1] != es[1] {
        return Err(Error::Contract {
            op: "align.project_prototypes",
            detail: format!("features {fs:?} do not project onto prototypes {es:?}"),
        });
    }
    let frozen = g.detach(embed)?;
    g.matmul_transb(frozen, f)
}

/// Entropic-transport targets p_t ∈ [K×B] for text-side similarities C_t.
///
/// M = exp((C_t − colmax)/ε); in two-sided mode, `n_iters` rounds of (rows →
/// u_W, columns → 1/B) rescaling, then an exact column renormalization so
/// every column is a distribution. One-sided mode — and any B=1 batch, where
/// the two-sided iteration degenerates — short-circuits to the closed form
/// u_W ⊙ exp(C_t/ε) normalized per column. Always f64, never on a tape:
/// backward treats the result as a constant.
pub fn sinkhorn_targets(
    c_t: &Tensor<f64>,
    prior: &PriorMarginal,
    cfg: &SinkhornConfig,
) -> Result<Tensor<f64>> {
    sinkhorn_run(c_t, prior, cfg, None)
}

/// As [`sinkhorn_targets`], additionally recording the total-variation
/// distance between achieved row sums and u_W after every column rescale —
/// the convergence trace the verification suite asserts is non-increasing.
pub fn sinkhorn_targets_traced(
    c_t: &Tensor<f64>,
    prior: &PriorMarginal,
    cfg: &SinkhornConfig,
) -> Result<(Tensor<f64>, Vec<f64>)> {
    let mut trace = Vec::new();
    let t = sinkhorn_run(c_t, prior, cfg, Some(&mut trace))?;
    Ok((t, trace))
}

fn sinkhorn_run(
    c_t: &Tensor<f64>,
    prior: &PriorMarginal,
    cfg: &SinkhornConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    if c_t.rank() != 2 {
        return Err(Error::Contract {
            op: "sinkhorn_targets",
            detail: format!("expected [K x B] similarities, got {:?}", c_t.shape()),
        });
    }
    let (k, b) = (c_t.shape()[0], c_t.shape()[1]);
    if prior.len() != k {
        return Err(Error::Contract {
            op: "sinkhorn_targets",
            detail: format!("prior has {} entries for K={k}", prior.len()),
        });
    }
    if c_t.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "sinkhorn_targets",
        });
    }
    let u = prior.as_slice();

    // column-stabilized Gibbs kernel
    let mut m = vec![0.0f64; k * b];
    for col in 0..b {
        let mut cmax = f64::NEG_INFINITY;
        for row in 0..k {
            cmax = cmax.max(c_t.data()[row * b + col]);
        }
        for row in 0..k {
            m[row * b + col] = ((c_t.data()[row * b + col] - cmax) / cfg.eps).exp();
        }
    }

    if cfg.two_sided && b > 1 {
        let col_target = 1.0 / b as f64;
        for _ in 0..cfg.n_iters {
            // rows → u_W
            for row in 0..k {
                let s: f64 = m[row * b..(row + 1) * b].iter().sum();
                if s <= 0.0 {
                    return Err(Error::Numerical {
                        op: "sinkhorn_targets",
                        detail: format!(
                            "row {row} carries zero mass (target u={}); every sample's similarity underflowed",
                            u[row]
                        ),
                    });
                }
                let f = u[row] / s;
                for col in 0..b {
                    m[row * b + col] *= f;
                }
            }
            // columns → 1/B
            for col in 0..b {
                let mut s = 0.0;
                for row in 0..k {
                    s += m[row * b + col];
                }
                if s <= 0.0 {
                    return Err(Error::Numerical {
                        op: "sinkhorn_targets",
                        detail: format!("column {col} carries zero mass after row rescale"),
                    });
                }
                let f = col_target / s;
                for row in 0..k {
                    m[row * b + col] *= f;
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                let mut tv = 0.0;
                for row in 0..k {
                    let s: f64 = m[row * b..(row + 1) * b].iter().sum();
                    // row sums live on the 1-mass scale; u is already there
                    tv += (s - u[row]).abs();
                }
                t.push(0.5 * tv);
            }
        }
    }

    // exact column renormalization: each column a distribution
    for col in 0..b {
        let mut s = 0.0;
        for row in 0..k {
            s += u_weight(cfg, b, u, row) * m[row * b + col];
        }
        if s <= 0.0 {
            return Err(Error::Numerical {
                op: "sinkhorn_targets",
                detail: format!("column {col} carries zero mass"),
            });
        }
        for row in 0..k {
            let v = u_weight(cfg, b, u, row) * m[row * b + col] / s;
            m[row * b + col] = v;
        }
    }
    Tensor::new(vec![k, b], m)
}

/// In the closed-form path the prior enters at normalization time; in the
/// iterated path it is already baked into the row rescales.
#[inline]
fn u_weight(cfg: &SinkhornConfig, b: usize, u: &[f64], row: usize) -> f64 {
    if cfg.two_sided && b > 1 {
        1.0
    } else {
        u[row]
    }
}

/// The vision-side loss: p_v = column softmax of C_v at temperature τ,
/// L = −(1/B)·Σ_b Σ_k p_t[k,b]·log p_v[k,b]. p_t enters as a constant; the
/// graph op validates that each target column is a distribution.
pub fn alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    c_v: Var,
    p_t: &Tensor<f64>,
    temperature: f64,
) -> Result<Var> {
    let shape = g.value(c_v).shape().to_vec();
    if shape != p_t.shape() {
        return Err(Error::Contract {
            op: "alignment_loss",
            detail: format!("C_v {shape:?} vs targets {:?}", p_t.shape()),
        });
    }
    let targets = p_t.cast::<T>();
    g.soft_cross_entropy_cols(c_v, &targets, temperature)
}
