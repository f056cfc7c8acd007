//! Operator-facing command line: stage orchestration, runtime verification,
//! held-out evaluation, and debug dumps.
//!
//! Exit codes: 0 success; 1 failed verification check or internal error;
//! 2 bad configuration or arguments; 3 non-finite values during training;
//! 4 unreadable checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::PriorMarginal;
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{self, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::lm;
use crate::model::{self, ModelConfig};
use crate::params::ParamSet;
use crate::patcher::{preprocess, write_cpgr, ResolutionPolicy};
use crate::trainer::{self, RunContext, Stage, StageConfig, HOLDOUT_STREAM};
use crate::verify;

#[derive(Debug, Parser)]
#[command(
    name = "nanomm",
    version,
    about = "Desk-scale continual multimodal pre-training engine"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more stages from a TOML run config.
    Train(TrainArgs),
    /// Re-check the core mathematical invariants in f64; print a table.
    Verify(VerifyArgs),
    /// Evaluate a checkpoint on held-out pairs.
    Eval(EvalArgs),
    /// Dump one synthetic sample's patch grid to a portable float file.
    DumpGrid(DumpGridArgs),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DumpGrid(args) => cmd_dump_grid(args),
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Path to the run config (TOML).
    pub config: PathBuf,
    /// Which stages to run: I, II (both halves, fixed then native), III, all.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Resume from a checkpoint; every requested stage must come after the
    /// checkpoint's stage.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn requested_span(arg: &str) -> Result<Vec<Stage>> {
    match arg {
        "I" => Ok(vec![Stage::I]),
        "II" => Ok(vec![Stage::IIFixed, Stage::IINative]),
        "III" => Ok(vec![Stage::III]),
        "all" => Ok(vec![Stage::I, Stage::IIFixed, Stage::IINative, Stage::III]),
        other => Err(Error::InvalidArg {
            op: "train",
            detail: format!("unknown --stage {other:?}; expected I, II, III, or all"),
        }),
    }
}

/// Word-frequency prior over the vocabulary, counted from the captions of
/// both stage-II sample streams. Captions come straight from scene specs —
/// no rendering — so this is cheap even for large pair counts.
fn stage2_prior(config: &RunConfig, vocab: &Vocabulary, stages: &[StageConfig]) -> Result<PriorMarginal> {
    let corpus_cfg = config.corpus_config();
    let mut captions = Vec::new();
    for sc in stages
        .iter()
        .filter(|s| matches!(s.stage, Stage::IIFixed | Stage::IINative))
    {
        for i in 0..sc.pairs as u64 {
            let seed = corpus::sample_seed(config.seed, sc.stage.stream(), i);
            let spec = corpus::scene_from_seed(seed, &corpus_cfg)?;
            captions.push(corpus::caption(&spec));
        }
    }
    corpus::compute_prior(captions.iter().map(String::as_str), vocab)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    config.validate()?;
    let vocab = Vocabulary::core();
    let model_cfg = config.model_config(vocab.size())?;
    let all_stages = config.stage_configs()?;
    let span = requested_span(&args.stage)?;

    let out_dir = Path::new(&config.output_dir);
    fs::create_dir_all(out_dir)?;

    // The one seeded generator: it draws the initialization, and its word
    // position rides in every checkpoint so resumed runs share its state.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: ParamSet<f32> = model_cfg.init_params_from(&mut rng)?;
    let mut global_step = 0u64;

    let (prior, stage_list, resumed) = match &args.resume {
        Some(ck_path) => {
            let ck = read_checkpoint(ck_path)?;
            if ck.seed != config.seed {
                return Err(Error::Config(format!(
                    "checkpoint was trained with seed {}, config says {}; refusing to mix streams",
                    ck.seed, config.seed
                )));
            }
            let stage_list: Vec<Stage> = if args.stage == "all" {
                span.iter().copied().filter(|s| *s > ck.stage).collect()
            } else {
                if let Some(violation) = span.iter().find(|s| **s <= ck.stage) {
                    return Err(Error::Config(format!(
                        "--stage {} includes stage {}, but the checkpoint already covers stage {}; \
                         resume can only move forward",
                        args.stage,
                        violation.as_str(),
                        ck.stage.as_str()
                    )));
                }
                span
            };
            if stage_list.is_empty() {
                return Err(Error::Config(format!(
                    "checkpoint already completed stage {}; nothing left to train",
                    ck.stage.as_str()
                )));
            }
            ck.apply_to(&mut params)?;
            rng.set_word_pos(ck.word_pos);
            global_step = ck.step;
            (PriorMarginal::new(ck.prior.clone())?, stage_list, true)
        }
        None => (stage2_prior(&config, &vocab, &all_stages)?, span, false),
    };

    vocab.write_file(&out_dir.join("vocab.txt"))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics_file = if resumed {
        fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        fs::File::create(&metrics_path)?
    };
    let mut metrics = std::io::BufWriter::new(metrics_file);

    let ctx = RunContext {
        model: &model_cfg,
        vocab: &vocab,
        corpus: config.corpus_config(),
        prior: &prior,
        sinkhorn: config.sinkhorn_config(),
        align_temp: config.train.align_temp,
        clip: config.train.clip,
        run_seed: config.seed,
    };

    for stage in stage_list {
        let sc = all_stages
            .iter()
            .find(|s| s.stage == stage)
            .expect("stage_configs covers every stage")
            .clone();
        let mut io_err: Option<std::io::Error> = None;
        let report = trainer::run_stage(&ctx, &sc, &mut params, &mut global_step, |rec| {
            if io_err.is_none() {
                let outcome = serde_json::to_string(rec)
                    .map_err(std::io::Error::other)
                    .and_then(|line| writeln!(metrics, "{line}"));
                if let Err(e) = outcome {
                    io_err = Some(e);
                }
            }
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        metrics.flush()?;
        let ck = Checkpoint::from_params(
            stage,
            global_step,
            config.seed,
            rng.get_word_pos(),
            &params,
            prior.as_slice(),
        );
        let ck_path = out_dir.join(format!("checkpoint-{}.cmpk", stage.as_str()));
        write_checkpoint(&ck_path, &ck)?;
        println!(
            "stage {}: {} steps, final decode loss {:.4}, wrote {}",
            stage.as_str(),
            report.steps,
            report.final_l_dec,
            ck_path.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Suite to run: gradcheck, sinkhorn, rope, freeze, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<()> {
    let outcomes = verify::run_suites(&args.suite)?;
    let width = outcomes
        .iter()
        .map(|o| o.suite.len() + 1 + o.name.len())
        .max()
        .unwrap_or(8);
    let mut failing = Vec::new();
    for o in &outcomes {
        let label = format!("{}/{}", o.suite, o.name);
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status}  {label:<width$}  {}", o.detail);
        if !o.passed {
            failing.push(label);
        }
    }
    println!("{} checks, {} failed", outcomes.len(), failing.len());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract {
            op: "verify",
            detail: format!("failing invariants: {}", failing.join(", ")),
        })
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    pub checkpoint: PathBuf,
    /// Run config that produced the checkpoint (model shape, corpus, stage
    /// table). Defaults to the built-in toy config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Evaluation split; the held-out stream is the only one.
    #[arg(long, default_value = "holdout")]
    pub split: String,
    /// Number of held-out pairs to score.
    #[arg(long, default_value_t = 200)]
    pub pairs: u64,
    /// Comma-separated merged-token budgets to sweep (e.g. "16,64,256");
    /// each runs the native-resolution path capped at that budget and emits
    /// one CSV row.
    #[arg(long)]
    pub max_visual_tokens: Option<String>,
    /// Write sweep rows to this file instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub pairs: u64,
    pub l_dec: f64,
    pub perplexity: f64,
    pub exact_match: f64,
}

/// Score `pairs` held-out samples: mean decode NLL per supervised slot,
/// its exponential, and the rate at which greedy decoding from [BOS] plus
/// the visual prefix reproduces the caption token-for-token.
pub fn eval_split(
    params: &ParamSet<f32>,
    model_cfg: &ModelConfig,
    policy: &ResolutionPolicy,
    config: &RunConfig,
    vocab: &Vocabulary,
    seed: u64,
    pairs: u64,
) -> Result<EvalReport> {
    if pairs == 0 {
        return Err(Error::InvalidArg {
            op: "eval",
            detail: "--pairs must be positive".into(),
        });
    }
    let corpus_cfg = config.corpus_config();
    let mut nll = 0.0f64;
    let mut slots = 0usize;
    let mut matches = 0u64;
    for i in 0..pairs {
        let (img, ids, _) =
            trainer::sample_pair::<f32>(seed, HOLDOUT_STREAM, i, &corpus_cfg, vocab, false)?;
        let (sum, n) = model::eval_decode_loss(params, &img, &ids, model_cfg, policy)?;
        nll += sum;
        slots += n;
        let prefix = model::visual_prefix_values(params, &img, model_cfg, policy)?;
        let got = lm::greedy_decode(
            params,
            Some(&prefix),
            &ids[..1],
            &model_cfg.decoder,
            ids.len() + 8,
            EOS,
        )?;
        if got.as_slice() == &ids[1..] {
            matches += 1;
        }
    }
    let l_dec = nll / slots as f64;
    Ok(EvalReport {
        pairs,
        l_dec,
        perplexity: l_dec.exp(),
        exact_match: matches as f64 / pairs as f64,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.split != "holdout" {
        return Err(Error::InvalidArg {
            op: "eval",
            detail: format!("unknown split {:?}; only \"holdout\" exists", args.split),
        });
    }
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_toy(),
    };
    config.validate()?;
    let ck = read_checkpoint(&args.checkpoint)?;
    let vocab = Vocabulary::core();
    let stage_cfgs = config.stage_configs()?;
    let sc = stage_cfgs
        .iter()
        .find(|s| s.stage == ck.stage)
        .expect("stage_configs covers every stage");
    // Evaluate in the position mode the checkpoint was trained with; the
    // default (no sweep) also reuses that stage's resolution policy.
    let model_cfg = config
        .model_config(vocab.size())?
        .with_position_mode(sc.position_mode);
    let mut params: ParamSet<f32> = model_cfg.init_params(ck.seed)?;
    ck.apply_to(&mut params)?;

    let budgets: Option<Vec<usize>> = match &args.max_visual_tokens {
        None => None,
        Some(list) => Some(
            list.split(',')
                .map(|tok| match tok.trim().parse::<usize>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(Error::InvalidArg {
                        op: "eval",
                        detail: format!("bad merged-token budget {:?}", tok.trim()),
                    }),
                })
                .collect::<Result<_>>()?,
        ),
    };

    match budgets {
        None => {
            let report = eval_split(&params, &model_cfg, &sc.resolution, &config, &vocab, ck.seed, args.pairs)?;
            println!("checkpoint: stage {} at step {}", ck.stage.as_str(), ck.step);
            println!("split: {} ({} pairs)", args.split, report.pairs);
            println!("l_dec: {:.6}", report.l_dec);
            println!("perplexity: {:.6}", report.perplexity);
            println!("exact_match: {:.4}", report.exact_match);
        }
        Some(ms) => {
            let mut csv = String::from("m,l_dec,perplexity,exact_match\n");
            for m in ms {
                // merged-token budget → patch-token budget (2×2 merge)
                let policy = ResolutionPolicy::native(Some(4 * m));
                let report = eval_split(&params, &model_cfg, &policy, &config, &vocab, ck.seed, args.pairs)?;
                csv.push_str(&format!(
                    "{m},{:.6},{:.6},{:.4}\n",
                    report.l_dec, report.perplexity, report.exact_match
                ));
            }
            match &args.csv {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-grid
// ---------------------------------------------------------------------------

#[derive(Debug, Args)]
pub struct DumpGridArgs {
    /// Scene seed to render.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file for the patch grid.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional run config for corpus and patch settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resize to this fixed square side instead of native resolution.
    #[arg(long)]
    pub side: Option<usize>,
}

pub fn cmd_dump_grid(args: &DumpGridArgs) -> Result<()> {
    let config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default_toy(),
    };
    config.validate()?;
    let corpus_cfg = config.corpus_config();
    let (img, caption) = corpus::generate_pair(args.seed, &corpus_cfg)?;
    let patch = config.model.encoder.patch;
    let policy = match args.side {
        Some(side) => ResolutionPolicy::fixed(side),
        None => ResolutionPolicy::native(None),
    };
    let grid = preprocess(&img, &policy, patch, 2 * patch)?;
    write_cpgr(&grid, &args.out)?;
    println!(
        "seed {}: {}x{} canvas -> {}x{} patches of {}x{}x{}, caption {:?}, wrote {}",
        args.seed,
        img.height,
        img.width,
        grid.rows,
        grid.cols,
        grid.channels,
        grid.patch,
        grid.patch,
        caption,
        args.out.display()
    );
    Ok(())
}
