//! Whole-model assembly: encoder → adapter → decoder wiring, seeded
//! initialization, the per-sample training forward, the off-tape text-side
//! target computation, and inference-time helpers for evaluation.

use crate::align::{self, PriorMarginal, SinkhornConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lm::{self, AdapterConfig, DecoderConfig};
use crate::params::{ParamSet, TapeBinding};
use crate::patcher::{ImageSpec, ResolutionPolicy};
use crate::rotary::PositionMode;
use crate::tensor::{mm_bt, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate()?;
        self.decoder.validate()?;
        if self.adapter.d_v != self.encoder.width {
            return Err(Error::Config(format!(
                "adapter d_v {} must match encoder width {}",
                self.adapter.d_v, self.encoder.width
            )));
        }
        if self.adapter.d_t != self.decoder.width {
            return Err(Error::Config(format!(
                "adapter d_t {} must match decoder width {}",
                self.adapter.d_t, self.decoder.width
            )));
        }
        Ok(())
    }

    /// Same model with the encoder's position mode swapped (stages differ
    /// only in this and in the resolution policy).
    pub fn with_position_mode(&self, mode: PositionMode) -> ModelConfig {
        let mut out = self.clone();
        out.encoder.rotary.mode = mode;
        out
    }

    /// Resolutions are rounded to multiples of two patches so the adapter's
    /// 2×2 merge always sees an even grid.
    pub fn round_unit(&self) -> usize {
        2 * self.encoder.patch
    }

    /// Draw every parameter in one fixed order from one seeded generator:
    /// the seed fully determines the initialization.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_params_from(&mut rng)
    }

    /// As [`init_params`](Self::init_params) but drawing from a caller-owned
    /// generator, so the caller can checkpoint the generator's position.
    pub fn init_params_from<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Result<ParamSet<T>> {
        self.validate()?;
        let rng = &mut *rng;
        let mut params = ParamSet::new();
        encoder::init_params(&self.encoder, rng, &mut params)?;
        lm::init_adapter_params(&self.adapter, rng, &mut params)?;
        lm::init_decoder_params(&self.decoder, rng, &mut params)?;
        Ok(params)
    }
}

/// Everything the trainer needs from one sample's forward pass, all living
/// on the caller's tape.
pub struct SampleForward {
    /// Summed next-token NLL over this sample's text slots.
    pub nll_sum: Var,
    /// Number of supervised positions (text length − 1).
    pub slots: usize,
    /// Mean-pooled projected visual features `[1 × D_t]` for alignment.
    pub pooled_visual: Var,
    /// Projected visual prefix (kept for token accounting).
    pub visual_tokens: usize,
}

/// Encoder → adapter → pooled feature + decoder NLL for one image/text pair.
pub fn forward_sample<T: Scalar>(
    g: &mut Graph<T>,
    img: &ImageSpec<T>,
    ids: &[usize],
    binding: &TapeBinding,
    cfg: &ModelConfig,
    policy: &ResolutionPolicy,
) -> Result<SampleForward> {
    let feats = encoder::encode(g, img, binding, &cfg.encoder, policy, cfg.round_unit(), (0, 0))?;
    let proj = lm::project(g, &feats, binding, &cfg.adapter)?;
    let pooled_vec = align::pool(g, proj.h)?;
    let pooled = g.reshape(pooled_vec, vec![1, cfg.adapter.d_t])?;
    let visual_tokens = proj.tokens();
    let (nll_sum, slots) = lm::decode_nll_sum(g, Some(&proj), ids, binding, &cfg.decoder)?;
    Ok(SampleForward {
        nll_sum,
        slots,
        pooled_visual: pooled,
        visual_tokens,
    })
}

/// Projected visual prefix as a plain value tensor (for greedy decoding,
/// which rebuilds throwaway graphs per step).
pub fn visual_prefix_values<T: Scalar>(
    params: &ParamSet<T>,
    img: &ImageSpec<T>,
    cfg: &ModelConfig,
    policy: &ResolutionPolicy,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g)?;
    let feats = encoder::encode(&mut g, img, &binding, &cfg.encoder, policy, cfg.round_unit(), (0, 0))?;
    let proj = lm::project(&mut g, &feats, &binding, &cfg.adapter)?;
    Ok(g.value(proj.h).clone())
}

/// Pooled text-side decoder features for a batch, `[B × D_t]` in f64.
/// Values only — each sample runs on a throwaway graph, so nothing here can
/// ever receive gradient (the target side of the alignment loss is frozen).
pub fn text_features_f64<T: Scalar>(
    params: &ParamSet<T>,
    ids_batch: &[Vec<usize>],
    cfg: &DecoderConfig,
) -> Result<Tensor<f64>> {
    if ids_batch.is_empty() {
        return Err(Error::Contract {
            op: "text_features",
            detail: "empty batch".into(),
        });
    }
    let d = cfg.width;
    let mut rows = Vec::with_capacity(ids_batch.len() * d);
    for ids in ids_batch {
        let mut g: Graph<T> = Graph::new();
        let binding = params.bind(&mut g)?;
        let hidden = lm::forward_text_only(&mut g, ids, &binding, cfg)?;
        let pooled = align::pool(&mut g, hidden)?;
        rows.extend(g.value(pooled).data().iter().map(|&v| v.to_f64()));
    }
    Tensor::new(vec![ids_batch.len(), d], rows)
}

/// Sinkhorn targets `p_t ∈ [K × B]` for a batch of captions: text features
/// against the frozen prototype table, balanced toward the corpus prior.
/// Entirely off-tape; the result is a constant of the training step.
pub fn batch_targets<T: Scalar>(
    params: &ParamSet<T>,
    ids_batch: &[Vec<usize>],
    prior: &PriorMarginal,
    sinkhorn: &SinkhornConfig,
    cfg: &DecoderConfig,
) -> Result<Tensor<f64>> {
    let f_t = text_features_f64(params, ids_batch, cfg)?;
    let w: Tensor<f64> = params.tensor("decoder.embed")?.cast();
    let (k, d) = (w.shape()[0], w.shape()[1]);
    let b = ids_batch.len();
    let c_t = Tensor::new(vec![k, b], mm_bt(w.data(), f_t.data(), k, d, b))?;
    align::sinkhorn_targets(&c_t, prior, sinkhorn)
}

/// One column of a `[K × B]` target matrix as a `[K × 1]` tensor.
pub fn target_column(p_t: &Tensor<f64>, col: usize) -> Result<Tensor<f64>> {
    let (k, b) = (p_t.shape()[0], p_t.shape()[1]);
    if col >= b {
        return Err(Error::Contract {
            op: "target_column",
            detail: format!("column {col} out of range for B={b}"),
        });
    }
    let data: Vec<f64> = (0..k).map(|r| p_t.data()[r * b + col]).collect();
    Tensor::new(vec![k, 1], data)
}

/// Per-sample alignment cross-entropy against a frozen target column: the
/// vision-side pooled feature is scored against the detached prototype
/// table, column-softmaxed at `temperature`, and penalized toward `p_t_col`.
pub fn sample_alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    pooled_visual: Var,
    p_t_col: &Tensor<f64>,
    binding: &TapeBinding,
    temperature: f64,
) -> Result<Var> {
    let embed = binding.var("decoder.embed")?;
    let c_v = align::project_prototypes(g, pooled_visual, embed)?;
    align::alignment_loss(g, c_v, p_t_col, temperature)
}

/// The alignment term's stop-gradient inputs, captured once at a base
/// parameter point and treated as constants thereafter: the balanced targets
/// AND the prototype matrix. Training stops gradients at both (targets are
/// off-tape, prototypes are detached), so any finite-difference probe of the
/// objective must hold both fixed while the rest of the parameters move —
/// otherwise the numeric gradient picks up paths the training gradient is
/// defined to exclude.
#[derive(Debug, Clone)]
pub struct FrozenAlign {
    /// Balanced targets, `[K × B]`, column per sample.
    pub targets: Tensor<f64>,
    /// Prototype matrix (the word embedding) at the base point, `[K × D_t]`.
    pub prototypes: Tensor<f64>,
}

impl FrozenAlign {
    /// Capture targets and prototypes for `batch` at the current `params`.
    pub fn capture<T: Scalar>(
        params: &ParamSet<T>,
        ids_batch: &[Vec<usize>],
        prior: &PriorMarginal,
        sinkhorn: &SinkhornConfig,
        cfg: &DecoderConfig,
    ) -> Result<FrozenAlign> {
        Ok(FrozenAlign {
            targets: batch_targets(params, ids_batch, prior, sinkhorn, cfg)?,
            prototypes: params.tensor("decoder.embed")?.cast(),
        })
    }
}

/// Alignment loss for one sample against an explicit constant prototype
/// matrix (instead of the live embedding parameter). Gradient-equivalent to
/// [`sample_alignment_loss`] at the capture point — the live version detaches
/// the embedding anyway — but also *value*-stable under parameter
/// perturbations, which is what a finite-difference oracle needs.
pub fn sample_alignment_loss_frozen<T: Scalar>(
    g: &mut Graph<T>,
    pooled_visual: Var,
    p_t_col: &Tensor<f64>,
    prototypes: &Tensor<f64>,
    temperature: f64,
) -> Result<Var> {
    let w = g.leaf(prototypes.cast())?;
    let c_v = align::project_prototypes(g, pooled_visual, w)?;
    align::alignment_loss(g, c_v, p_t_col, temperature)
}

/// The combined batch objective as a plain value: decode loss (summed NLL
/// over summed slots) plus `alpha` times the mean per-column alignment
/// cross-entropy when frozen alignment inputs are given.
pub fn batch_loss_value<T: Scalar>(
    params: &ParamSet<T>,
    batch: &[(ImageSpec<T>, Vec<usize>)],
    frozen: Option<&FrozenAlign>,
    cfg: &ModelConfig,
    policy: &ResolutionPolicy,
    alpha: f64,
    temperature: f64,
) -> Result<f64> {
    let slots_total: usize = batch.iter().map(|(_, ids)| ids.len().saturating_sub(1)).sum();
    if slots_total == 0 {
        return Err(Error::Contract {
            op: "batch_loss",
            detail: "batch carries no supervised positions".into(),
        });
    }
    let b = batch.len();
    let mut total = 0.0;
    for (bi, (img, ids)) in batch.iter().enumerate() {
        let mut g: Graph<T> = Graph::new();
        let binding = params.bind(&mut g)?;
        let fwd = forward_sample(&mut g, img, ids, &binding, cfg, policy)?;
        total += g.value(fwd.nll_sum).data()[0].to_f64() / slots_total as f64;
        if let Some(fa) = frozen {
            let col = target_column(&fa.targets, bi)?;
            let al = sample_alignment_loss_frozen(&mut g, fwd.pooled_visual, &col, &fa.prototypes, temperature)?;
            total += alpha / b as f64 * g.value(al).data()[0].to_f64();
        }
    }
    Ok(total)
}

/// Analytic gradient of [`batch_loss_value`] for every parameter, computed
/// by per-sample reverse passes accumulated in f64. Parameters that receive
/// no gradient (e.g. unused vocabulary rows never touched by any loss term)
/// still get an entry of zeros.
pub fn batch_param_grads<T: Scalar>(
    params: &ParamSet<T>,
    batch: &[(ImageSpec<T>, Vec<usize>)],
    frozen: Option<&FrozenAlign>,
    cfg: &ModelConfig,
    policy: &ResolutionPolicy,
    alpha: f64,
    temperature: f64,
) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    let slots_total: usize = batch.iter().map(|(_, ids)| ids.len().saturating_sub(1)).sum();
    if slots_total == 0 {
        return Err(Error::Contract {
            op: "batch_grads",
            detail: "batch carries no supervised positions".into(),
        });
    }
    let b = batch.len();
    let mut grads: std::collections::BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(name, p)| (name.clone(), vec![0.0; p.value.data().len()]))
        .collect();
    for (bi, (img, ids)) in batch.iter().enumerate() {
        let mut g: Graph<T> = Graph::new();
        let binding = params.bind(&mut g)?;
        let fwd = forward_sample(&mut g, img, ids, &binding, cfg, policy)?;
        let mut loss = g.scale(fwd.nll_sum, 1.0 / slots_total as f64)?;
        if let Some(fa) = frozen {
            let col = target_column(&fa.targets, bi)?;
            let al = sample_alignment_loss_frozen(&mut g, fwd.pooled_visual, &col, &fa.prototypes, temperature)?;
            let weighted = g.scale(al, alpha / b as f64)?;
            loss = g.add(loss, weighted)?;
        }
        g.backward(loss)?;
        for (name, acc) in grads.iter_mut() {
            let var = binding.var(name)?;
            if let Some(grad) = g.grad(var) {
                for (a, &x) in acc.iter_mut().zip(grad) {
                    *a += x.to_f64();
                }
            }
        }
    }
    Ok(grads)
}

/// Plain-value decode NLL (mean per slot) for evaluation: no tape kept.
pub fn eval_decode_loss<T: Scalar>(
    params: &ParamSet<T>,
    img: &ImageSpec<T>,
    ids: &[usize],
    cfg: &ModelConfig,
    policy: &ResolutionPolicy,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g)?;
    let fwd = forward_sample(&mut g, img, ids, &binding, cfg, policy)?;
    let sum = g.value(fwd.nll_sum).data()[0].to_f64();
    Ok((sum, fwd.slots))
}

/// Small model used across the crate's tests: 1-layer width-16 encoder and
/// decoder over 7-pixel patches.
#[cfg(test)]
pub(crate) fn toy_config(vocab: usize) -> ModelConfig {
    use crate::rotary::RotaryConfig;
    ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            patch: 7,
            channels: 3,
            mlp_ratio: 2,
            pos_grid: 4,
            rotary: RotaryConfig::new(8, 10000.0, PositionMode::Combined).unwrap(),
        },
        adapter: AdapterConfig { d_v: 16, d_t: 16 },
        decoder: DecoderConfig {
            layers: 1,
            width: 16,
            heads: 2,
            vocab,
            mlp_ratio: 2,
            max_positions: 256,
            rotary_base: 10000.0,
        },
    }
}
