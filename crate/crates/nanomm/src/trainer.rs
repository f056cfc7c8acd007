//! Three-stage training recipe: per-stage trainability masks and position
//! modes, the decode+alignment loss combination, grouped AdamW with linear
//! warmup into cosine decay, global-norm gradient clipping, and a
//! deterministic step loop that emits one metrics record per step.

use crate::align::{PriorMarginal, SinkhornConfig};
use crate::corpus::{self, CorpusConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, ModelConfig};
use crate::params::ParamSet;
use crate::patcher::{ImageSpec, ResolutionPolicy};
use crate::rotary::PositionMode;
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    I,
    IIFixed,
    IINative,
    III,
}

impl Stage {
    pub fn all() -> [Stage; 4] {
        [Stage::I, Stage::IIFixed, Stage::IINative, Stage::III]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::I => "I",
            Stage::IIFixed => "II-fixed",
            Stage::IINative => "II-native",
            Stage::III => "III",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "I" => Ok(Stage::I),
            "II-fixed" => Ok(Stage::IIFixed),
            "II-native" => Ok(Stage::IINative),
            "III" => Ok(Stage::III),
            other => Err(Error::Config(format!(
                "unknown stage {other:?} (expected I, II-fixed, II-native, III)"
            ))),
        }
    }

    /// Stable checkpoint code.
    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Stage> {
        Stage::all()
            .into_iter()
            .find(|s| s.code() == code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown stage code {code}")))
    }

    /// Corpus stream tag: each stage draws its scenes from a distinct
    /// deterministic stream so stages never replay each other's samples.
    pub fn stream(self) -> u64 {
        1 + self.code() as u64
    }

    /// Instruction stage trains on question/answer text instead of captions.
    pub fn uses_instructions(self) -> bool {
        self == Stage::III
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Held-out evaluation stream tag (disjoint from all stage streams).
pub const HOLDOUT_STREAM: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub resolution: ResolutionPolicy,
    pub position_mode: PositionMode,
    /// Alignment loss weight; the decode loss always has weight 1.
    pub alpha: f64,
    pub lr_adapter: f64,
    pub lr_vfm: f64,
    pub lr_llm: f64,
    pub epochs: usize,
    pub pairs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
}

impl StageConfig {
    /// Desk-scale defaults: adapter warm-up at fixed low resolution, full
    /// training at fixed-high then native resolution, instruction tuning at
    /// native resolution. Learning rates keep the published ratios
    /// (adapter 50× the encoder in stage II).
    pub fn defaults(stage: Stage) -> StageConfig {
        match stage {
            Stage::I => StageConfig {
                stage,
                resolution: ResolutionPolicy::fixed(112),
                position_mode: PositionMode::LearnedOnly,
                alpha: 0.05,
                lr_adapter: 1e-3,
                lr_vfm: 0.0,
                lr_llm: 0.0,
                epochs: 1,
                pairs: 2000,
                batch_size: 8,
                warmup_ratio: 0.05,
            },
            Stage::IIFixed => StageConfig {
                stage,
                resolution: ResolutionPolicy::fixed(168),
                position_mode: PositionMode::Combined,
                alpha: 0.05,
                lr_adapter: 5e-3,
                lr_vfm: 1e-4,
                lr_llm: 2e-5,
                epochs: 1,
                pairs: 4000,
                batch_size: 8,
                warmup_ratio: 0.05,
            },
            Stage::IINative => StageConfig {
                stage,
                // budget in patch tokens; 144 patches = 36 tokens after the
                // adapter's 2×2 merge
                resolution: ResolutionPolicy::native(Some(144)),
                position_mode: PositionMode::Combined,
                alpha: 0.05,
                lr_adapter: 5e-3,
                lr_vfm: 1e-4,
                lr_llm: 2e-5,
                epochs: 1,
                pairs: 4000,
                batch_size: 8,
                warmup_ratio: 0.05,
            },
            Stage::III => StageConfig {
                stage,
                resolution: ResolutionPolicy::native(Some(144)),
                position_mode: PositionMode::Combined,
                alpha: 0.0,
                lr_adapter: 1e-5,
                lr_vfm: 2e-5,
                lr_llm: 1e-5,
                epochs: 1,
                pairs: 2000,
                batch_size: 8,
                warmup_ratio: 0.05,
            },
        }
    }

    /// Parameter-name prefixes trained in this stage; everything else is
    /// frozen bit-exact.
    pub fn trainable_prefixes(&self) -> &'static [&'static str] {
        match self.stage {
            Stage::I => &["adapter."],
            _ => &["adapter.", "encoder.", "decoder."],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::I && self.position_mode != PositionMode::LearnedOnly {
            return Err(Error::Config(
                "stage I trains the adapter against the plain interpolated position table; \
                 position_mode must be learned-only"
                    .into(),
            ));
        }
        if self.stage == Stage::III && self.alpha != 0.0 {
            return Err(Error::Config(
                "the alignment weight applies to stages I and II only; stage III must set alpha = 0".into(),
            ));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be a finite non-negative value", self.alpha)));
        }
        for (name, lr, needed) in [
            ("lr_adapter", self.lr_adapter, true),
            ("lr_vfm", self.lr_vfm, self.stage != Stage::I),
            ("lr_llm", self.lr_llm, self.stage != Stage::I),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::Config(format!("{name} {lr} must be finite and non-negative")));
            }
            if needed && lr == 0.0 {
                return Err(Error::Config(format!("{name} must be positive: its group trains in stage {}", self.stage)));
            }
        }
        if self.epochs == 0 || self.pairs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "epochs {} / pairs {} / batch_size {} must all be at least 1",
                self.epochs, self.pairs, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} must lie in [0, 1)", self.warmup_ratio)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.pairs as u64).div_ceil(self.batch_size as u64)
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs as u64 * self.steps_per_epoch()
    }
}

/// The per-stage loss combination: decode loss plus `alpha` times the
/// alignment loss in stages I and II; decode loss alone — exactly — in
/// stage III.
pub fn combined_loss(l_dec: f64, l_align: f64, stage: Stage, alpha: f64) -> f64 {
    match stage {
        Stage::III => l_dec,
        _ => l_dec + alpha * l_align,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    /// "adapter", "encoder" or "decoder".
    pub name: &'static str,
    pub lr: f64,
    pub trainable: bool,
}

const GROUP_PREFIXES: [&str; 3] = ["adapter.", "encoder.", "decoder."];

/// Index into the fixed [adapter, encoder, decoder] group order.
pub fn group_index(param_name: &str) -> Result<usize> {
    GROUP_PREFIXES
        .iter()
        .position(|p| param_name.starts_with(p))
        .ok_or_else(|| Error::Contract {
            op: "build_param_groups",
            detail: format!("parameter {param_name:?} belongs to no optimizer group"),
        })
}

/// The three optimizer groups for a stage; every parameter name must map to
/// one of them. Stage I freezes the encoder and decoder groups.
pub fn build_param_groups<'a>(
    names: impl IntoIterator<Item = &'a String>,
    cfg: &StageConfig,
) -> Result<Vec<ParamGroup>> {
    for name in names {
        group_index(name)?;
    }
    let train_all = cfg.stage != Stage::I;
    Ok(vec![
        ParamGroup {
            name: "adapter",
            lr: cfg.lr_adapter,
            trainable: true,
        },
        ParamGroup {
            name: "encoder",
            lr: cfg.lr_vfm,
            trainable: train_all,
        },
        ParamGroup {
            name: "decoder",
            lr: cfg.lr_llm,
            trainable: train_all,
        },
    ])
}

/// Linear warmup from zero into cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub total: u64,
    pub warmup: u64,
}

impl Schedule {
    pub fn new(total_steps: u64, warmup_ratio: f64) -> Schedule {
        let warmup = ((total_steps as f64) * warmup_ratio).ceil() as u64;
        Schedule {
            total: total_steps,
            warmup: warmup.min(total_steps),
        }
    }

    /// Multiplier on the peak learning rate at a (0-based) step.
    pub fn factor(&self, step: u64) -> f64 {
        if step >= self.total {
            return 0.0;
        }
        if step < self.warmup {
            return step as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|&v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay; moments exist only for parameters
/// that actually receive gradients (the active stage's trainable set). All
/// accumulator math runs in f64 regardless of the parameter dtype.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter present in `grads`; parameters
    /// absent from `grads` are untouched, bit-exact. Decay applies only to
    /// parameters registered with the decay flag (not norms or embeddings).
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let n = param.value.data().len();
            if grad.len() != n {
                return Err(Error::Contract {
                    op: "adamw.step",
                    detail: format!("gradient for {name:?} has {} entries, parameter has {n}", grad.len()),
                });
            }
            let lr = lr_of(name);
            let wd = if param.decay { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = param.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let x = data[i].to_f64();
                data[i] = T::from_f64(x - lr * (mh / (vh.sqrt() + self.eps) + wd * x));
            }
        }
        Ok(())
    }
}

/// One metrics line per optimizer step, serialized as JSONL by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub stage: String,
    pub l_dec: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub lr_adapter: f64,
    pub lr_vfm: f64,
    pub lr_llm: f64,
    pub grad_norm: f64,
    pub tokens: u64,
}

/// Everything a stage run needs besides its own StageConfig.
pub struct RunContext<'a> {
    pub model: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
    pub corpus: CorpusConfig,
    pub prior: &'a PriorMarginal,
    pub sinkhorn: SinkhornConfig,
    /// Softmax temperature shared by both sides of the alignment loss.
    pub align_temp: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub steps: u64,
    pub final_l_dec: f64,
}

/// Deterministic sample for (run seed, stream, index): the image, the token
/// sequence, and the raw text. Instruction streams train on
/// "question answer" text; caption streams on the scene caption.
pub fn sample_pair<T: Scalar>(
    run_seed: u64,
    stream: u64,
    index: u64,
    corpus_cfg: &CorpusConfig,
    vocab: &Vocabulary,
    instruction: bool,
) -> Result<(ImageSpec<T>, Vec<usize>, String)> {
    let seed = corpus::sample_seed(run_seed, stream, index);
    let (img, text) = if instruction {
        let (img, q, a) = corpus::generate_instruction_pair(seed, corpus_cfg)?;
        (img, format!("{q} {a}"))
    } else {
        corpus::generate_pair(seed, corpus_cfg)?
    };
    let ids = vocab.tokenize(&text)?;
    Ok((img.cast(), ids, text))
}

fn stage_sample<T: Scalar>(ctx: &RunContext, cfg: &StageConfig, index: u64) -> Result<(ImageSpec<T>, Vec<usize>)> {
    let (img, ids, _) = sample_pair(
        ctx.run_seed,
        cfg.stage.stream(),
        index,
        &ctx.corpus,
        ctx.vocab,
        cfg.stage.uses_instructions(),
    )?;
    Ok((img, ids))
}

struct StepOutcome {
    l_dec: f64,
    l_align: f64,
    grad_norm: f64,
    tokens: u64,
}

/// One optimizer step over a batch: per-sample forward/backward on private
/// tapes with gradients accumulated in f64, then clip and update. The batch
/// decode loss is sum-of-NLLs over sum-of-slots; the alignment loss is the
/// mean per-column cross-entropy against targets computed once, off-tape,
/// from the pre-update parameters.
fn train_step<T: Scalar>(
    ctx: &RunContext,
    cfg: &StageConfig,
    model_cfg: &ModelConfig,
    params: &mut ParamSet<T>,
    opt: &mut AdamW,
    trainable: &[String],
    groups: &[ParamGroup],
    lr_factor: f64,
    batch: &[(ImageSpec<T>, Vec<usize>)],
) -> Result<StepOutcome> {
    let b = batch.len();
    let slots_total: usize = batch.iter().map(|(_, ids)| ids.len() - 1).sum();
    if slots_total == 0 {
        return Err(Error::Contract {
            op: "train_step",
            detail: "batch carries no supervised positions".into(),
        });
    }
    let targets = if cfg.alpha > 0.0 {
        let ids_batch: Vec<Vec<usize>> = batch.iter().map(|(_, ids)| ids.clone()).collect();
        Some(model::batch_targets(params, &ids_batch, ctx.prior, &ctx.sinkhorn, &model_cfg.decoder)?)
    } else {
        None
    };

    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut l_dec_sum = 0.0;
    let mut l_align_sum = 0.0;
    let mut tokens = 0u64;
    for (bi, (img, ids)) in batch.iter().enumerate() {
        let mut g: Graph<T> = Graph::new();
        let binding = params.bind(&mut g)?;
        let fwd = model::forward_sample(&mut g, img, ids, &binding, model_cfg, &cfg.resolution)?;
        let mut loss = g.scale(fwd.nll_sum, 1.0 / slots_total as f64)?;
        if let Some(p_t) = &targets {
            let col = model::target_column(p_t, bi)?;
            let al = model::sample_alignment_loss(&mut g, fwd.pooled_visual, &col, &binding, ctx.align_temp)?;
            l_align_sum += g.value(al).data()[0].to_f64();
            let weighted = g.scale(al, cfg.alpha / b as f64)?;
            loss = g.add(loss, weighted)?;
        }
        l_dec_sum += g.value(fwd.nll_sum).data()[0].to_f64();
        tokens += (fwd.visual_tokens + ids.len()) as u64;
        g.backward(loss)?;
        for name in trainable {
            let var = binding.var(name)?;
            if let Some(grad) = g.grad(var) {
                let acc = grads
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for (a, &x) in acc.iter_mut().zip(grad) {
                    *a += x.to_f64();
                }
            }
        }
    }

    let grad_norm = clip_global_norm(&mut grads, ctx.clip);
    opt.step(params, &grads, |name| {
        let gi = group_index(name).expect("trainable names were validated");
        groups[gi].lr * lr_factor
    })?;

    Ok(StepOutcome {
        l_dec: l_dec_sum / slots_total as f64,
        l_align: if targets.is_some() { l_align_sum / b as f64 } else { 0.0 },
        grad_norm,
        tokens,
    })
}

/// Run one stage to completion, mutating `params` in place. Emits one
/// metrics record per step through `observer`; `global_step` numbers steps
/// across stages. Frozen parameters stay bit-exact; a non-finite value
/// anywhere aborts with the failing step reported on stderr.
pub fn run_stage<T: Scalar>(
    ctx: &RunContext,
    cfg: &StageConfig,
    params: &mut ParamSet<T>,
    global_step: &mut u64,
    mut observer: impl FnMut(&MetricsRecord),
) -> Result<StageReport> {
    cfg.validate()?;
    ctx.model.validate()?;
    if !(ctx.align_temp > 0.0) || !(ctx.clip > 0.0) {
        return Err(Error::Config(format!(
            "align_temp {} and clip {} must be positive",
            ctx.align_temp, ctx.clip
        )));
    }
    let model_cfg = ctx.model.with_position_mode(cfg.position_mode);
    let groups = build_param_groups(params.names(), cfg)?;
    let trainable: Vec<String> = params
        .names()
        .filter(|n| cfg.trainable_prefixes().iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    if trainable.is_empty() {
        return Err(Error::Contract {
            op: "run_stage",
            detail: "no trainable parameters match the stage prefixes".into(),
        });
    }
    let schedule = Schedule::new(cfg.total_steps(), cfg.warmup_ratio);
    let mut opt = AdamW::new();
    let mut stage_step = 0u64;
    let mut last_l_dec = f64::NAN;

    for _epoch in 0..cfg.epochs {
        let mut index = 0usize;
        while index < cfg.pairs {
            let upper = (index + cfg.batch_size).min(cfg.pairs);
            let batch: Vec<(ImageSpec<T>, Vec<usize>)> = (index..upper)
                .map(|i| stage_sample(ctx, cfg, i as u64))
                .collect::<Result<_>>()?;
            let factor = schedule.factor(stage_step);
            let out = train_step(ctx, cfg, &model_cfg, params, &mut opt, &trainable, &groups, factor, &batch)
                .map_err(|e| {
                    eprintln!("training aborted at stage {} step {}: {e}", cfg.stage, *global_step);
                    e
                })?;
            let record = MetricsRecord {
                step: *global_step,
                stage: cfg.stage.as_str().to_string(),
                l_dec: out.l_dec,
                l_align: out.l_align,
                l_total: combined_loss(out.l_dec, out.l_align, cfg.stage, cfg.alpha),
                lr_adapter: if groups[0].trainable { groups[0].lr * factor } else { 0.0 },
                lr_vfm: if groups[1].trainable { groups[1].lr * factor } else { 0.0 },
                lr_llm: if groups[2].trainable { groups[2].lr * factor } else { 0.0 },
                grad_norm: out.grad_norm,
                tokens: out.tokens,
            };
            observer(&record);
            last_l_dec = out.l_dec;
            *global_step += 1;
            stage_step += 1;
            index = upper;
        }
    }

    Ok(StageReport {
        steps: stage_step,
        final_l_dec: last_l_dec,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy_config;
    use crate::tensor::Tensor;

    fn tiny_ctx<'a>(
        model: &'a ModelConfig,
        vocab: &'a Vocabulary,
        prior: &'a PriorMarginal,
    ) -> RunContext<'a> {
        RunContext {
            model,
            vocab,
            corpus: CorpusConfig {
                min_side: 28,
                max_side: 56,
                max_objects: 2,
            },
            prior,
            sinkhorn: SinkhornConfig::default(),
            align_temp: 0.005,
            clip: 1.0,
            run_seed: 11,
        }
    }

    fn tiny_stage(stage: Stage) -> StageConfig {
        let mut cfg = StageConfig::defaults(stage);
        cfg.pairs = 4;
        cfg.batch_size = 2;
        cfg.epochs = 1;
        cfg.resolution = match stage {
            Stage::I | Stage::IIFixed => ResolutionPolicy::fixed(28),
            _ => ResolutionPolicy::native(Some(64)),
        };
        cfg
    }

    #[test]
    fn combined_loss_case_split() {
        assert_eq!(combined_loss(3.5, 99.0, Stage::III, 0.05), 3.5);
        assert!((combined_loss(1.0, 2.0, Stage::IIFixed, 0.05) - 1.1).abs() < 1e-15);
        assert_eq!(combined_loss(1.0, 2.0, Stage::I, 0.0), 1.0);
    }

    #[test]
    fn schedule_warmup_and_cosine() {
        let s = Schedule::new(100, 0.05);
        assert_eq!(s.warmup, 5);
        assert_eq!(s.factor(0), 0.0);
        assert!((s.factor(5) - 1.0).abs() < 1e-9, "peak at warmup end");
        // strictly decreasing through the cosine phase
        let mut prev = s.factor(5);
        for t in 6..100 {
            let f = s.factor(t);
            assert!(f < prev, "factor rose at step {t}");
            prev = f;
        }
        assert!(s.factor(99) > 0.0);
        assert_eq!(s.factor(100), 0.0);
        // linear ramp
        assert!((s.factor(1) - 0.2).abs() < 1e-12);
        assert!((s.factor(4) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn param_groups_per_stage() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let params: ParamSet<f32> = model.init_params(1).unwrap();
        let g1 = build_param_groups(params.names(), &tiny_stage(Stage::I)).unwrap();
        assert_eq!(g1.iter().filter(|g| g.trainable).count(), 1);
        assert!(g1[0].trainable && g1[0].name == "adapter");
        let g2 = build_param_groups(params.names(), &tiny_stage(Stage::IIFixed)).unwrap();
        assert_eq!(g2.iter().filter(|g| g.trainable).count(), 3);
        let lrs: Vec<f64> = g2.iter().map(|g| g.lr).collect();
        assert!(lrs[0] != lrs[1] && lrs[1] != lrs[2] && lrs[0] != lrs[2]);
        // unknown prefix rejected
        let stray = vec!["mystery.weight".to_string()];
        assert!(build_param_groups(stray.iter(), &tiny_stage(Stage::I)).is_err());
    }

    #[test]
    fn stage_config_validation_rules() {
        let mut c = StageConfig::defaults(Stage::I);
        c.position_mode = PositionMode::Combined;
        assert!(c.validate().is_err(), "stage I must be learned-only");
        let mut c = StageConfig::defaults(Stage::III);
        c.alpha = 0.05;
        assert!(c.validate().is_err(), "stage III must have alpha 0");
        let mut c = StageConfig::defaults(Stage::IIFixed);
        c.lr_vfm = 0.0;
        assert!(c.validate().is_err(), "trainable group needs a positive lr");
        assert!(StageConfig::defaults(Stage::I).validate().is_ok());
        for s in Stage::all() {
            assert!(StageConfig::defaults(s).validate().is_ok());
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = BTreeMap::from([("a".to_string(), vec![3.0, 4.0])]);
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = g["a"].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);

        let mut small = BTreeMap::from([("a".to_string(), vec![0.3, 0.4])]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"], vec![0.3, 0.4], "under-norm gradients unchanged");
    }

    #[test]
    fn adamw_freezes_absent_params_and_decays_selectively() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let mut params: ParamSet<f32> = model.init_params(1).unwrap();
        let before_embed = params.tensor("decoder.embed").unwrap().clone();
        let before_fc1 = params.tensor("adapter.fc1.weight").unwrap().clone();
        let n = before_fc1.data().len();
        let grads = BTreeMap::from([("adapter.fc1.weight".to_string(), vec![0.01; n])]);
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, |_| 1e-3).unwrap();
        assert_eq!(
            params.tensor("decoder.embed").unwrap().data(),
            before_embed.data(),
            "param without gradient must stay bit-exact"
        );
        assert_ne!(params.tensor("adapter.fc1.weight").unwrap().data(), before_fc1.data());
        assert_eq!(opt.steps_taken(), 1);
        // gradient shape mismatch is rejected
        let bad = BTreeMap::from([("adapter.fc1.weight".to_string(), vec![0.01; 3])]);
        assert!(opt.step(&mut params, &bad, |_| 1e-3).is_err());
    }

    #[test]
    fn stage_one_trains_only_the_adapter() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let prior = PriorMarginal::uniform(vocab.size()).unwrap();
        let ctx = tiny_ctx(&model, &vocab, &prior);
        let mut params: ParamSet<f32> = model.init_params(3).unwrap();
        let before: Vec<(String, Tensor<f32>)> =
            params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect();

        let mut records = Vec::new();
        let mut step = 0u64;
        let report = run_stage(&ctx, &tiny_stage(Stage::I), &mut params, &mut step, |r| {
            records.push(r.clone())
        })
        .unwrap();
        assert_eq!(report.steps, 2);
        assert_eq!(records.len(), 2);
        assert_eq!(step, 2);

        let mut adapter_changed = false;
        for (name, old) in &before {
            let now = params.tensor(name).unwrap();
            if name.starts_with("adapter.") {
                if now.data() != old.data() {
                    adapter_changed = true;
                }
            } else {
                assert_eq!(now.data(), old.data(), "{name} must stay frozen in stage I");
            }
        }
        assert!(adapter_changed, "adapter never moved");

        for r in &records {
            assert!(r.l_align > 0.0, "alignment active in stage I");
            assert!((r.l_total - (r.l_dec + 0.05 * r.l_align)).abs() < 1e-12);
            assert_eq!(r.lr_vfm, 0.0);
            assert_eq!(r.lr_llm, 0.0);
            assert_eq!(r.stage, "I");
            assert!(r.tokens > 0);
        }
        // warmup: first step lr is 0
        assert_eq!(records[0].lr_adapter, 0.0);
        assert!(records[1].lr_adapter > 0.0);
    }

    #[test]
    fn stage_three_is_decode_only() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let prior = PriorMarginal::uniform(vocab.size()).unwrap();
        let ctx = tiny_ctx(&model, &vocab, &prior);
        let mut params: ParamSet<f32> = model.init_params(3).unwrap();
        let mut records = Vec::new();
        let mut step = 10;
        run_stage(&ctx, &tiny_stage(Stage::III), &mut params, &mut step, |r| {
            records.push(r.clone())
        })
        .unwrap();
        assert_eq!(step, 12);
        for r in &records {
            assert_eq!(r.l_align, 0.0);
            assert_eq!(r.l_total, r.l_dec);
            assert_eq!(r.stage, "III");
        }
        assert_eq!(records[0].step, 10, "global step numbering continues across stages");
    }

    #[test]
    fn same_seed_same_parameters() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let prior = PriorMarginal::uniform(vocab.size()).unwrap();
        let ctx = tiny_ctx(&model, &vocab, &prior);
        let cfg = tiny_stage(Stage::IIFixed);

        let run = || {
            let mut params: ParamSet<f32> = model.init_params(3).unwrap();
            let mut step = 0;
            run_stage(&ctx, &cfg, &mut params, &mut step, |_| {}).unwrap();
            params
        };
        let a = run();
        let b = run();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data(), "{na} differs between identical runs");
        }
    }

    #[test]
    fn non_finite_parameter_aborts() {
        let vocab = Vocabulary::core();
        let model = toy_config(vocab.size());
        let prior = PriorMarginal::uniform(vocab.size()).unwrap();
        let ctx = tiny_ctx(&model, &vocab, &prior);
        let mut params: ParamSet<f32> = model.init_params(3).unwrap();
        let shape = params.tensor("adapter.fc2.weight").unwrap().shape().to_vec();
        let n: usize = shape.iter().product();
        let mut data = vec![0.01f32; n];
        data[0] = f32::NAN;
        params
            .set_value("adapter.fc2.weight", Tensor::new(shape, data).unwrap())
            .unwrap();
        let mut step = 0;
        let err = run_stage(&ctx, &tiny_stage(Stage::I), &mut params, &mut step, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err:?}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn stage_codes_round_trip() {
        for s in Stage::all() {
            assert_eq!(Stage::from_code(s.code()).unwrap(), s);
            assert_eq!(Stage::parse(s.as_str()).unwrap(), s);
        }
        assert!(Stage::from_code(9).is_err());
        assert!(Stage::parse("IV").is_err());
        assert!(Stage::I < Stage::IIFixed && Stage::IIFixed < Stage::IINative && Stage::IINative < Stage::III);
    }

    #[test]
    fn instruction_stream_differs_from_caption_stream() {
        let vocab = Vocabulary::core();
        let ccfg = CorpusConfig {
            min_side: 28,
            max_side: 56,
            max_objects: 2,
        };
        let (_, _, text3): (ImageSpec<f32>, _, _) =
            sample_pair(11, Stage::III.stream(), 0, &ccfg, &vocab, true).unwrap();
        let (_, _, text1): (ImageSpec<f32>, _, _) =
            sample_pair(11, Stage::I.stream(), 0, &ccfg, &vocab, false).unwrap();
        assert!(text3.starts_with("what") || text3.starts_with("where") || text3.starts_with("how"));
        assert!(text1.starts_with("a "));
    }
}
