//! Runtime verification suites.
//!
//! `verify --suite {gradcheck, sinkhorn, rope, freeze, all}` re-derives the
//! crate's load-bearing mathematical invariants in f64 at runtime — against
//! central finite differences, a long-run fixed point, closed forms, and
//! parameter byte comparisons — and reports one pass/fail line per check.
//! Nothing here depends on the compiled-in test suite; every check builds
//! fresh seeded inputs when it runs.
//!
//! Checks within a suite are independent and run on a rayon pool whose
//! worker count is capped by the `COMP_THREADS` environment variable.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::align::{self, PriorMarginal, SinkhornConfig};
use crate::corpus::{CorpusConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::max_rel_err;
use crate::graph::Graph;
use crate::lm::{AdapterConfig, DecoderConfig};
use crate::model::{self, ModelConfig};
use crate::params::ParamSet;
use crate::patcher::ResolutionPolicy;
use crate::rotary::{self, PositionMode, RotaryConfig};
use crate::tensor::{mm_bt, Tensor};
use crate::trainer::{self, RunContext, Stage, StageConfig};
use crate::encoder::EncoderConfig;

/// One verified invariant: which suite it belongs to, what it asserts, and
/// the observed evidence (worst-case error, byte counts, …).
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const SUITE_NAMES: [&str; 4] = ["gradcheck", "sinkhorn", "rope", "freeze"];

/// Parse `COMP_THREADS`: unset → `None` (library default), otherwise a
/// positive integer worker cap.
pub fn comp_threads() -> Result<Option<usize>> {
    match std::env::var("COMP_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("COMP_THREADS is not readable: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!(
                "COMP_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// The worker pool every suite runs on; `COMP_THREADS` caps its size.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = comp_threads()? {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("could not build worker pool: {e}")))
}

/// Run one named suite, or "all" for every suite in declaration order.
/// Returns one outcome per check; a check whose harness errors out is
/// reported as failed with the error text rather than aborting the table.
pub fn run_suites(which: &str) -> Result<Vec<CheckOutcome>> {
    let selected: Vec<&str> = match which {
        "all" => SUITE_NAMES.to_vec(),
        s if SUITE_NAMES.contains(&s) => vec![s],
        other => {
            return Err(Error::InvalidArg {
                op: "verify",
                detail: format!(
                    "unknown suite {other:?}; expected one of gradcheck, sinkhorn, rope, freeze, all"
                ),
            })
        }
    };
    let pool = worker_pool()?;
    pool.install(|| {
        let mut out = Vec::new();
        for s in selected {
            match s {
                "gradcheck" => suite_gradcheck(&mut out),
                "sinkhorn" => suite_sinkhorn(&mut out),
                "rope" => suite_rope(&mut out),
                "freeze" => suite_freeze(&mut out),
                _ => unreachable!("suite list is validated above"),
            }
        }
        Ok(out)
    })
}

fn run_check(
    out: &mut Vec<CheckOutcome>,
    suite: &'static str,
    name: &'static str,
    f: impl FnOnce() -> Result<(bool, String)>,
) {
    let outcome = match f() {
        Ok((passed, detail)) => CheckOutcome {
            suite,
            name,
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            suite,
            name,
            passed: false,
            detail: format!("check errored: {e}"),
        },
    };
    out.push(outcome);
}

// ---------------------------------------------------------------------------
// shared fixtures
// ---------------------------------------------------------------------------

/// A deliberately small but complete model: every parameter family present
/// (position table, rotary attention, adapter, decoder), few enough entries
/// that exhaustive finite differences stay fast.
fn verify_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            patch: 4,
            channels: 3,
            mlp_ratio: 2,
            pos_grid: 2,
            rotary: RotaryConfig {
                head_dim: 4,
                base: 10000.0,
                mode: PositionMode::Combined,
            },
        },
        adapter: AdapterConfig { d_v: 8, d_t: 8 },
        decoder: DecoderConfig {
            layers: 1,
            width: 8,
            heads: 2,
            vocab,
            mlp_ratio: 2,
            max_positions: 64,
            rotary_base: 10000.0,
        },
    }
}

fn verify_corpus() -> CorpusConfig {
    CorpusConfig {
        min_side: 8,
        max_side: 16,
        max_objects: 2,
    }
}

const VERIFY_SEED: u64 = 0x5EED_F00D;

fn gradcheck_batch(vocab: &Vocabulary) -> Result<Vec<(crate::patcher::ImageSpec<f64>, Vec<usize>)>> {
    let corpus = verify_corpus();
    (0..2u64)
        .map(|i| {
            let (img, ids, _) = trainer::sample_pair::<f64>(VERIFY_SEED, 7, i, &corpus, vocab, false)?;
            Ok((img, ids))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// gradcheck: reverse-mode gradients vs central finite differences
// ---------------------------------------------------------------------------

fn suite_gradcheck(out: &mut Vec<CheckOutcome>) {
    run_check(out, "gradcheck", "combined-loss-grad-vs-fd", || {
        let vocab = Vocabulary::core();
        let cfg = verify_model(vocab.size());
        cfg.validate()?;
        let policy = ResolutionPolicy::fixed(8);
        let params: ParamSet<f64> = cfg.init_params(VERIFY_SEED)?;
        let batch = gradcheck_batch(&vocab)?;
        let ids_batch: Vec<Vec<usize>> = batch.iter().map(|(_, ids)| ids.clone()).collect();

        // Targets AND prototypes are captured once at the base point:
        // training stops gradients at both, so the finite-difference oracle
        // must hold both constant while parameters move.
        let (alpha, temp) = (0.05, 0.1);
        let sink = SinkhornConfig {
            eps: 0.05,
            n_iters: 3,
            two_sided: true,
            ..SinkhornConfig::default()
        };
        let prior = PriorMarginal::uniform(vocab.size())?;
        let frozen = model::FrozenAlign::capture(&params, &ids_batch, &prior, &sink, &cfg.decoder)?;

        let analytic = model::batch_param_grads(&params, &batch, Some(&frozen), &cfg, &policy, alpha, temp)?;

        let probes: Vec<(String, usize)> = params
            .iter()
            .flat_map(|(name, p)| (0..p.value.numel()).map(move |i| (name.clone(), i)))
            .collect();
        let h = 1e-5;
        let results: Vec<Result<(f64, String, usize)>> = probes
            .par_iter()
            .map(|(name, idx)| {
                let eval_at = |delta: f64| -> Result<f64> {
                    let mut probe = params.clone();
                    let mut t = probe.tensor(name)?.clone();
                    t.data_mut()[*idx] += delta;
                    probe.set_value(name, t)?;
                    model::batch_loss_value(&probe, &batch, Some(&frozen), &cfg, &policy, alpha, temp)
                };
                let fd = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
                let an = analytic
                    .get(name)
                    .map(|g| g[*idx])
                    .ok_or_else(|| Error::Contract {
                        op: "verify.gradcheck",
                        detail: format!("no analytic gradient recorded for {name}"),
                    })?;
                Ok((max_rel_err(&[an], &[fd]), name.clone(), *idx))
            })
            .collect();
        let mut worst = (0.0f64, String::new(), 0usize);
        for r in results {
            let (err, name, idx) = r?;
            if err > worst.0 {
                worst = (err, name, idx);
            }
        }
        let tol = 1e-4;
        Ok((
            worst.0 < tol,
            format!(
                "max relative error {:.3e} at {}[{}] over {} parameter entries (B=2, f64, h=1e-5, tolerance {tol:.0e})",
                worst.0, worst.1, worst.2, probes.len()
            ),
        ))
    });

    run_check(out, "gradcheck", "alignment-grad-stops-at-text-side", || {
        let vocab = Vocabulary::core();
        let cfg = verify_model(vocab.size());
        let policy = ResolutionPolicy::fixed(8);
        let params: ParamSet<f64> = cfg.init_params(VERIFY_SEED + 1)?;
        let (img, _ids) = gradcheck_batch(&vocab)?.remove(0);
        let uniform = vec![1.0 / vocab.size() as f64; vocab.size()];
        let p_col = Tensor::new(vec![vocab.size(), 1], uniform)?;

        let mut g: Graph<f64> = Graph::new();
        let binding = params.bind(&mut g)?;
        let fwd = model::forward_sample(&mut g, &img, &[1, 2], &binding, &cfg, &policy)?;
        let loss = model::sample_alignment_loss(&mut g, fwd.pooled_visual, &p_col, &binding, 0.1)?;
        g.backward(loss)?;

        let mut text_leak: Option<String> = None;
        let mut vision_hit = false;
        for name in params.names() {
            let var = binding.var(name)?;
            let grad = g.grad(var);
            if name.starts_with("decoder.") {
                if grad.is_some_and(|gr| gr.iter().any(|&v| v != 0.0)) {
                    text_leak = Some(name.clone());
                }
            } else if grad.is_some_and(|gr| gr.iter().any(|&v| v != 0.0)) {
                vision_hit = true;
            }
        }
        match (text_leak, vision_hit) {
            (Some(name), _) => Ok((false, format!("nonzero gradient leaked into {name}"))),
            (None, false) => Ok((false, "no gradient reached the vision path at all".into())),
            (None, true) => Ok((
                true,
                "decoder parameters (prototypes included) got exactly zero gradient; vision path nonzero".into(),
            )),
        }
    });
}

// ---------------------------------------------------------------------------
// sinkhorn: marginals, monotone convergence, closed forms, long-run oracle
// ---------------------------------------------------------------------------

/// Random (scores, prior) instance with K ≤ 16, B ≤ 8.
fn sinkhorn_instance(rng: &mut ChaCha8Rng, min_b: usize) -> Result<(Tensor<f64>, PriorMarginal)> {
    let k = rng.random_range(2..=16);
    let b = rng.random_range(min_b..=8);
    let data: Vec<f64> = (0..k * b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let mass: f64 = raw.iter().sum();
    let prior = PriorMarginal::new(raw.into_iter().map(|v| v / mass).collect())?;
    Ok((Tensor::new(vec![k, b], data)?, prior))
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn suite_sinkhorn(out: &mut Vec<CheckOutcome>) {
    run_check(out, "sinkhorn", "columns-are-distributions", || {
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x51);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let (c_t, prior) = sinkhorn_instance(&mut rng, 1)?;
            let cfg = SinkhornConfig {
                eps: rng.random_range(0.05..0.5),
                n_iters: 3,
                two_sided: true,
                ..SinkhornConfig::default()
            };
            let p = align::sinkhorn_targets(&c_t, &prior, &cfg)?;
            let (k, b) = (p.shape()[0], p.shape()[1]);
            for col in 0..b {
                let mut s = 0.0;
                for row in 0..k {
                    let v = p.data()[row * b + col];
                    if v < 0.0 {
                        return Ok((false, format!("negative mass {v} in column {col}")));
                    }
                    s += v;
                }
                worst = worst.max((s - 1.0).abs());
            }
        }
        Ok((
            worst < 1e-6,
            format!("max |column sum − 1| = {worst:.3e} over 20 random instances (tolerance 1e-6)"),
        ))
    });

    run_check(out, "sinkhorn", "row-marginal-tv-nonincreasing", || {
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x52);
        let mut worst_rise = 0.0f64;
        for _ in 0..20 {
            let (c_t, prior) = sinkhorn_instance(&mut rng, 2)?;
            let cfg = SinkhornConfig {
                eps: rng.random_range(0.05..0.5),
                n_iters: 8,
                two_sided: true,
                ..SinkhornConfig::default()
            };
            let (_, trace) = align::sinkhorn_targets_traced(&c_t, &prior, &cfg)?;
            for w in trace.windows(2) {
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
        Ok((
            worst_rise <= 1e-12,
            format!("largest per-iteration TV increase {worst_rise:.3e} over 20 traced runs (allowed 1e-12)"),
        ))
    });

    run_check(out, "sinkhorn", "b1-matches-closed-form", || {
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x53);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let k = rng.random_range(2..=16);
            let data: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let mass: f64 = raw.iter().sum();
            let u: Vec<f64> = raw.into_iter().map(|v| v / mass).collect();
            let prior = PriorMarginal::new(u.clone())?;
            let eps = rng.random_range(0.05..0.5);
            let cfg = SinkhornConfig {
                eps,
                n_iters: 3,
                two_sided: true,
                ..SinkhornConfig::default()
            };
            let c_t = Tensor::new(vec![k, 1], data.clone())?;
            let p = align::sinkhorn_targets(&c_t, &prior, &cfg)?;
            // independent closed form: p ∝ u ⊙ exp(c/ε), normalized
            let cmax = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let un: Vec<f64> = data
                .iter()
                .zip(&u)
                .map(|(&c, &uw)| uw * ((c - cmax) / eps).exp())
                .collect();
            let z: f64 = un.iter().sum();
            let expect: Vec<f64> = un.into_iter().map(|v| v / z).collect();
            for (a, e) in p.data().iter().zip(&expect) {
                worst = worst.max((a - e).abs());
            }
        }
        Ok((
            worst < 1e-9,
            format!("max |target − closed form| = {worst:.3e} at B=1 over 20 instances (tolerance 1e-9)"),
        ))
    });

    run_check(out, "sinkhorn", "three-iters-near-1000-iter-oracle", || {
        // Three rescale rounds reach the balanced fixed point only when the
        // score spread is mild relative to ε (measured boundary ≈ 0.5·ε;
        // larger ratios need more rounds). Instances are drawn inside that
        // regime: the check asserts the iteration converges to its own
        // long-run fixed point where convergence is attainable at all.
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x54);
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let k = rng.random_range(2..=16);
            let b = rng.random_range(2..=8);
            let eps = rng.random_range(0.05..0.5);
            let scale = 0.4 * eps;
            let data: Vec<f64> = (0..k * b).map(|_| rng.random_range(-scale..scale)).collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let mass: f64 = raw.iter().sum();
            let prior = PriorMarginal::new(raw.into_iter().map(|v| v / mass).collect())?;
            let c_t = Tensor::new(vec![k, b], data)?;
            let fast = SinkhornConfig {
                eps,
                n_iters: 3,
                two_sided: true,
                ..SinkhornConfig::default()
            };
            let oracle = SinkhornConfig {
                n_iters: 1000,
                ..fast
            };
            let p3 = align::sinkhorn_targets(&c_t, &prior, &fast)?;
            let p1000 = align::sinkhorn_targets(&c_t, &prior, &oracle)?;
            for col in 0..b {
                let a: Vec<f64> = (0..k).map(|r| p3.data()[r * b + col]).collect();
                let o: Vec<f64> = (0..k).map(|r| p1000.data()[r * b + col]).collect();
                worst = worst.max(tv(&a, &o));
            }
        }
        Ok((
            worst < 1e-3,
            format!("max column TV(3-iter, 1000-iter) = {worst:.3e} over 20 random K≤16, B≤8 instances with |scores| ≤ 0.4·ε (tolerance 1e-3)"),
        ))
    });
}

// ---------------------------------------------------------------------------
// rope: rotation orthogonality and translation invariance; table interpolation
// ---------------------------------------------------------------------------

fn suite_rope(out: &mut Vec<CheckOutcome>) {
    run_check(out, "rope", "rotation-preserves-norms", || {
        let drifts: Vec<Result<f64>> = (0..100u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ (0x70 + i));
                let head_dim = [4usize, 8, 16][rng.random_range(0..3)];
                let n = rng.random_range(1..=32);
                let cfg = RotaryConfig::new(head_dim, 10000.0, PositionMode::Combined)?;
                let data: Vec<f64> = (0..n * head_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v = Tensor::new(vec![n, head_dim], data)?;
                let coords: Vec<(usize, usize)> = (0..n)
                    .map(|_| (rng.random_range(0..64), rng.random_range(0..64)))
                    .collect();
                let r = rotary::rope2d_rotate_tensor(&v, &coords, &cfg)?;
                let mut worst = 0.0f64;
                for row in 0..n {
                    let norm = |t: &Tensor<f64>| -> f64 {
                        t.data()[row * head_dim..(row + 1) * head_dim]
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt()
                    };
                    worst = worst.max((norm(&v) - norm(&r)).abs());
                }
                Ok(worst)
            })
            .collect();
        let mut worst = 0.0f64;
        for d in drifts {
            worst = worst.max(d?);
        }
        Ok((
            worst < 1e-6,
            format!("max row-norm drift {worst:.3e} over 100 random instances (tolerance 1e-6)"),
        ))
    });

    run_check(out, "rope", "logits-invariant-under-coordinate-shift", || {
        let drifts: Vec<Result<f64>> = (0..100u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ (0x170 + i));
                let head_dim = [4usize, 8, 16][rng.random_range(0..3)];
                let cfg = RotaryConfig::new(head_dim, 10000.0, PositionMode::Combined)?;
                let rows = rng.random_range(1..=8);
                let cols = rng.random_range(1..=8);
                let n = rows * cols;
                let shift = (rng.random_range(0..=56), rng.random_range(0..=56));
                let coords: Vec<(usize, usize)> = (0..rows)
                    .flat_map(|r| (0..cols).map(move |c| (c, r)))
                    .collect();
                let shifted: Vec<(usize, usize)> = coords
                    .iter()
                    .map(|&(x, y)| (x + shift.0, y + shift.1))
                    .collect();
                let rand_mat = |rng: &mut ChaCha8Rng| -> Result<Tensor<f64>> {
                    Tensor::new(
                        vec![n, head_dim],
                        (0..n * head_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                };
                let q = rand_mat(&mut rng)?;
                let k = rand_mat(&mut rng)?;
                let logits = |cs: &[(usize, usize)]| -> Result<Vec<f64>> {
                    let qr = rotary::rope2d_rotate_tensor(&q, cs, &cfg)?;
                    let kr = rotary::rope2d_rotate_tensor(&k, cs, &cfg)?;
                    Ok(mm_bt(qr.data(), kr.data(), n, head_dim, n))
                };
                let base = logits(&coords)?;
                let moved = logits(&shifted)?;
                Ok(base
                    .iter()
                    .zip(&moved)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max))
            })
            .collect();
        let mut worst = 0.0f64;
        for d in drifts {
            worst = worst.max(d?);
        }
        Ok((
            worst < 1e-5,
            format!("max attention-logit drift {worst:.3e} under global shifts, 100 random (grid, shift) instances (tolerance 1e-5)"),
        ))
    });

    run_check(out, "rope", "interpolation-identity-at-source-grid", || {
        let mut rng = ChaCha8Rng::seed_from_u64(VERIFY_SEED ^ 0x55);
        for _ in 0..20 {
            let grid = rng.random_range(2..=6);
            let d = rng.random_range(1..=8);
            let data: Vec<f64> = (0..grid * grid * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let table = g.leaf(Tensor::new(vec![grid * grid, d], data.clone())?)?;
            let out_var = rotary::interpolate_pos(&mut g, table, grid, (grid, grid))?;
            if g.value(out_var)
                .data()
                .iter()
                .zip(&data)
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok((false, format!("{grid}×{grid} table not reproduced bit-exactly")));
            }
        }
        Ok((true, "source-grid interpolation bit-exact on 20 random tables".into()))
    });

    run_check(out, "rope", "interpolation-2x2-to-3x3-exact", || {
        let mut g: Graph<f64> = Graph::new();
        let table = g.leaf(Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0])?)?;
        let out_var = rotary::interpolate_pos(&mut g, table, 2, (3, 3))?;
        let got = g.value(out_var).data();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        if got == &expect[..] {
            Ok((true, "hand-computed 2×2→3×3 bilinear case matches exactly".into()))
        } else {
            Ok((false, format!("expected {expect:?}, got {got:?}")))
        }
    });
}

// ---------------------------------------------------------------------------
// freeze: adapter warm-up leaves encoder & decoder bytes untouched
// ---------------------------------------------------------------------------

fn param_bits(params: &ParamSet<f64>, prefix: &str) -> BTreeMap<String, Vec<u64>> {
    params
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .map(|(name, p)| (name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn suite_freeze(out: &mut Vec<CheckOutcome>) {
    // One tiny adapter-only stage run shared by the three byte checks.
    let run = || -> Result<(ParamSet<f64>, ParamSet<f64>)> {
        let vocab = Vocabulary::core();
        let model_cfg = verify_model(vocab.size());
        let mut params: ParamSet<f64> = model_cfg.init_params(VERIFY_SEED + 2)?;
        let before = params.clone();
        let prior = PriorMarginal::uniform(vocab.size())?;
        let ctx = RunContext {
            model: &model_cfg,
            vocab: &vocab,
            corpus: verify_corpus(),
            prior: &prior,
            sinkhorn: SinkhornConfig {
                eps: 0.05,
                n_iters: 3,
                two_sided: true,
                ..SinkhornConfig::default()
            },
            align_temp: 0.1,
            clip: 1.0,
            run_seed: VERIFY_SEED,
        };
        let cfg = StageConfig {
            resolution: ResolutionPolicy::fixed(8),
            epochs: 1,
            pairs: 4,
            batch_size: 2,
            warmup_ratio: 0.0,
            ..StageConfig::defaults(Stage::I)
        };
        let mut step = 0u64;
        trainer::run_stage(&ctx, &cfg, &mut params, &mut step, |_| {})?;
        Ok((before, params))
    };
    let shared = run();

    for (name, prefix) in [
        ("stage1-encoder-bytes-unchanged", "encoder."),
        ("stage1-decoder-bytes-unchanged", "decoder."),
    ] {
        run_check(out, "freeze", name, || {
            let (before, after) = shared
                .as_ref()
                .map_err(|e| Error::Contract {
                    op: "verify.freeze",
                    detail: format!("stage run failed: {e}"),
                })?;
            let (b, a) = (param_bits(before, prefix), param_bits(after, prefix));
            let entries: usize = b.values().map(Vec::len).sum();
            if b == a {
                Ok((true, format!("{entries} {prefix}* entries byte-identical after adapter-only stage")))
            } else {
                let culprit = b
                    .iter()
                    .find(|(k, v)| a.get(*k) != Some(v))
                    .map(|(k, _)| k.clone())
                    .unwrap_or_default();
                Ok((false, format!("frozen parameter {culprit} changed during adapter-only stage")))
            }
        });
    }

    run_check(out, "freeze", "stage1-adapter-actually-updates", || {
        let (before, after) = shared
            .as_ref()
            .map_err(|e| Error::Contract {
                op: "verify.freeze",
                detail: format!("stage run failed: {e}"),
            })?;
        let (b, a) = (param_bits(before, "adapter."), param_bits(after, "adapter."));
        if b != a {
            Ok((true, "adapter parameters moved during the stage (training signal present)".into()))
        } else {
            Ok((false, "adapter parameters identical after training — no update applied".into()))
        }
    });
}
