//! Python bindings: the engine (config → staged training → eval → text
//! generation) plus the standalone numeric operations — resolution rounding,
//! rotary angles, position-table interpolation, balanced transport targets —
//! and the runtime verification suites.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nanomm::align::{self, PriorMarginal, SinkhornConfig};
use nanomm::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use nanomm::cli::eval_split;
use nanomm::config::RunConfig;
use nanomm::corpus::{self, Vocabulary, EOS};
use nanomm::graph::Graph;
use nanomm::lm;
use nanomm::model::{self, ModelConfig};
use nanomm::params::ParamSet;
use nanomm::patcher::{self, ResolutionPolicy};
use nanomm::rotary;
use nanomm::tensor::Tensor;
use nanomm::trainer::{self, RunContext, Stage, HOLDOUT_STREAM};
use nanomm::verify;

fn py_err(e: nanomm::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn policy_from(side: Option<usize>, max_patch_tokens: Option<usize>) -> PyResult<ResolutionPolicy> {
    match (side, max_patch_tokens) {
        (Some(_), Some(_)) => Err(PyValueError::new_err(
            "side and max_patch_tokens are mutually exclusive",
        )),
        (Some(s), None) => Ok(ResolutionPolicy::fixed(s)),
        (None, cap) => Ok(ResolutionPolicy::native(cap)),
    }
}

/// Round an image size to the processing resolution: native sizes go to the
/// nearest multiple of 2×patch (aspect-preserving downscale under a patch
/// token cap); a fixed side squares the image.
#[pyfunction]
#[pyo3(signature = (height, width, patch, side=None, max_patch_tokens=None))]
fn resolve_resolution(
    height: usize,
    width: usize,
    patch: usize,
    side: Option<usize>,
    max_patch_tokens: Option<usize>,
) -> PyResult<(usize, usize)> {
    let policy = policy_from(side, max_patch_tokens)?;
    patcher::resolve_resolution((height, width), &policy, 2 * patch).map_err(py_err)
}

/// Rotation angles for the patch at grid coordinates (x, y): one angle per
/// channel pair, x-driven pairs first, y-driven second.
#[pyfunction]
#[pyo3(signature = (x, y, head_dim, base=10000.0))]
fn rotation_angles(x: usize, y: usize, head_dim: usize, base: f64) -> PyResult<Vec<f64>> {
    if head_dim == 0 || head_dim % 4 != 0 {
        return Err(PyValueError::new_err(format!(
            "head_dim must be a positive multiple of 4, got {head_dim}"
        )));
    }
    Ok(rotary::rotation_angles(x, y, head_dim, base))
}

/// Bilinearly resample a learned position table (align-corners) from its
/// G×G source grid to rows×cols. `table` is row-major [G·G × width];
/// returns row-major [rows·cols × width].
#[pyfunction]
fn interpolate_position_table(
    table: Vec<f64>,
    source_grid: usize,
    rows: usize,
    cols: usize,
    width: usize,
) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![source_grid * source_grid, width], table).map_err(py_err)?;
    let mut g: Graph<f64> = Graph::new();
    let leaf = g.leaf(t).map_err(py_err)?;
    let out = rotary::interpolate_pos(&mut g, leaf, source_grid, (rows, cols)).map_err(py_err)?;
    Ok(g.value(out).data().to_vec())
}

/// Balanced soft targets from prototype scores: entropic scaling with the
/// word-frequency prior as row marginal and uniform columns, ending on an
/// exact column normalization. `scores` is row-major [k × b]; the result has
/// the same layout and unit column sums.
#[pyfunction]
#[pyo3(signature = (scores, k, b, prior=None, eps=0.005, n_iters=3, two_sided=true))]
fn sinkhorn_targets(
    scores: Vec<f64>,
    k: usize,
    b: usize,
    prior: Option<Vec<f64>>,
    eps: f64,
    n_iters: usize,
    two_sided: bool,
) -> PyResult<Vec<f64>> {
    let c_t = Tensor::new(vec![k, b], scores).map_err(py_err)?;
    let prior = match prior {
        Some(u) => PriorMarginal::new(u).map_err(py_err)?,
        None => PriorMarginal::uniform(k).map_err(py_err)?,
    };
    let cfg = SinkhornConfig {
        eps,
        n_iters,
        two_sided,
        ..SinkhornConfig::default()
    };
    let targets = align::sinkhorn_targets(&c_t, &prior, &cfg).map_err(py_err)?;
    Ok(targets.data().to_vec())
}

/// Run one of the runtime verification suites ("gradcheck", "sinkhorn",
/// "rope", "freeze", or "all"); returns (suite, name, passed, detail) rows.
#[pyfunction]
#[pyo3(signature = (suite="all"))]
fn verify_checks(suite: &str) -> PyResult<Vec<(String, String, bool, String)>> {
    let outcomes = verify::run_suites(suite).map_err(py_err)?;
    Ok(outcomes
        .into_iter()
        .map(|o| (o.suite.to_string(), o.name.to_string(), o.passed, o.detail))
        .collect())
}

/// The closed 39-word vocabulary shared by the corpus and the decoder.
#[pyclass]
struct Vocab {
    inner: Vocabulary,
}

#[pymethods]
impl Vocab {
    #[new]
    fn new() -> Vocab {
        Vocab {
            inner: Vocabulary::core(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }

    /// Text → [BOS, word ids…, EOS].
    fn tokenize(&self, text: &str) -> PyResult<Vec<usize>> {
        self.inner.tokenize(text).map_err(py_err)
    }

    /// Ids → text, dropping the sentinel tokens.
    fn detokenize(&self, ids: Vec<usize>) -> PyResult<String> {
        self.inner.detokenize(&ids).map_err(py_err)
    }
}

/// The training engine: a run config plus the model state it evolves.
#[pyclass]
struct Engine {
    config: RunConfig,
    model: ModelConfig,
    vocab: Vocabulary,
    params: ParamSet<f32>,
    prior: PriorMarginal,
    rng: ChaCha8Rng,
    global_step: u64,
    last_stage: Option<Stage>,
}

impl Engine {
    fn ctx(&self) -> RunContext<'_> {
        RunContext {
            model: &self.model,
            vocab: &self.vocab,
            corpus: self.config.corpus_config(),
            prior: &self.prior,
            sinkhorn: self.config.sinkhorn_config(),
            align_temp: self.config.train.align_temp,
            clip: self.config.train.clip,
            run_seed: self.config.seed,
        }
    }

    fn stage_policy(&self, stage: Stage) -> PyResult<ResolutionPolicy> {
        let cfgs = self.config.stage_configs().map_err(py_err)?;
        Ok(cfgs
            .into_iter()
            .find(|c| c.stage == stage)
            .expect("stage table is total")
            .resolution)
    }
}

#[pymethods]
impl Engine {
    /// Build from a TOML run config (the training CLI's format); without one,
    /// use the built-in desk-scale defaults.
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Engine> {
        let config = match config_toml {
            Some(text) => RunConfig::from_toml_str(text).map_err(py_err)?,
            None => RunConfig::default_toy(),
        };
        config.validate().map_err(py_err)?;
        let vocab = Vocabulary::core();
        let model = config.model_config(vocab.size()).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = model.init_params_from(&mut rng).map_err(py_err)?;

        // Word-frequency prior from the captions of both stage-II streams,
        // exactly as the training CLI computes it.
        let corpus_cfg = config.corpus_config();
        let mut captions = Vec::new();
        for sc in config.stage_configs().map_err(py_err)? {
            if matches!(sc.stage, Stage::IIFixed | Stage::IINative) {
                for i in 0..sc.pairs as u64 {
                    let seed = corpus::sample_seed(config.seed, sc.stage.stream(), i);
                    let spec = corpus::scene_from_seed(seed, &corpus_cfg).map_err(py_err)?;
                    captions.push(corpus::caption(&spec));
                }
            }
        }
        let prior =
            corpus::compute_prior(captions.iter().map(String::as_str), &vocab).map_err(py_err)?;

        Ok(Engine {
            config,
            model,
            vocab,
            params,
            prior,
            rng,
            global_step: 0,
            last_stage: None,
        })
    }

    /// Number of parameter tensors.
    fn __len__(&self) -> usize {
        self.params.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    /// Current values of one parameter tensor, with its shape.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.params.tensor(name).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Train one stage ("I", "II-fixed", "II-native", "III") to completion;
    /// returns per-step metrics dicts.
    fn run_stage<'py>(&mut self, py: Python<'py>, stage: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let stage = Stage::parse(stage).map_err(py_err)?;
        let cfgs = self.config.stage_configs().map_err(py_err)?;
        let cfg = cfgs
            .into_iter()
            .find(|c| c.stage == stage)
            .expect("stage table is total");
        let mut records = Vec::new();
        {
            let ctx = self.ctx();
            let mut step = self.global_step;
            let mut params = std::mem::take(&mut self.params);
            let outcome = trainer::run_stage(&ctx, &cfg, &mut params, &mut step, |r| {
                records.push(r.clone());
            });
            self.params = params;
            self.global_step = step;
            outcome.map_err(py_err)?;
        }
        self.last_stage = Some(stage);
        records
            .into_iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("stage", r.stage)?;
                d.set_item("l_dec", r.l_dec)?;
                d.set_item("l_align", r.l_align)?;
                d.set_item("l_total", r.l_total)?;
                d.set_item("grad_norm", r.grad_norm)?;
                d.set_item("tokens", r.tokens)?;
                Ok(d)
            })
            .collect()
    }

    /// Score held-out pairs: mean decode loss per token slot, its
    /// exponential, and the greedy exact-match rate.
    #[pyo3(signature = (pairs=100, max_patch_tokens=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        pairs: u64,
        max_patch_tokens: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let policy = match max_patch_tokens {
            Some(cap) => ResolutionPolicy::native(Some(cap)),
            None => self.stage_policy(self.last_stage.unwrap_or(Stage::IINative))?,
        };
        let report = eval_split(
            &self.params,
            &self.model,
            &policy,
            &self.config,
            &self.vocab,
            self.config.seed,
            pairs,
        )
        .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("pairs", report.pairs)?;
        d.set_item("l_dec", report.l_dec)?;
        d.set_item("perplexity", report.perplexity)?;
        d.set_item("exact_match", report.exact_match)?;
        Ok(d)
    }

    /// A held-out sample's reference caption.
    fn holdout_caption(&self, index: u64) -> PyResult<String> {
        let (_, _, text) = trainer::sample_pair::<f32>(
            self.config.seed,
            HOLDOUT_STREAM,
            index,
            &self.config.corpus_config(),
            &self.vocab,
            false,
        )
        .map_err(py_err)?;
        Ok(text)
    }

    /// Greedy caption for a held-out image under the current parameters.
    #[pyo3(signature = (index, max_new=24))]
    fn generate(&self, index: u64, max_new: usize) -> PyResult<String> {
        let (img, ids, _) = trainer::sample_pair::<f32>(
            self.config.seed,
            HOLDOUT_STREAM,
            index,
            &self.config.corpus_config(),
            &self.vocab,
            false,
        )
        .map_err(py_err)?;
        let policy = self.stage_policy(self.last_stage.unwrap_or(Stage::IINative))?;
        let prefix =
            model::visual_prefix_values(&self.params, &img, &self.model, &policy).map_err(py_err)?;
        let out = lm::greedy_decode(
            &self.params,
            Some(&prefix),
            &ids[..1],
            &self.model.decoder,
            max_new,
            EOS,
        )
        .map_err(py_err)?;
        self.vocab.detokenize(&out).map_err(py_err)
    }

    /// Write the current state as a checkpoint file.
    fn save(&self, path: &str) -> PyResult<()> {
        let stage = self.last_stage.ok_or_else(|| {
            PyRuntimeError::new_err("nothing trained yet; run_stage before save")
        })?;
        let ck = Checkpoint::from_params(
            stage,
            self.global_step,
            self.config.seed,
            self.rng.get_word_pos(),
            &self.params,
            self.prior.as_slice(),
        );
        write_checkpoint(path.as_ref(), &ck).map_err(py_err)
    }

    /// Load a checkpoint produced by this engine or the CLI.
    fn load(&mut self, path: &str) -> PyResult<()> {
        let ck = read_checkpoint(path.as_ref()).map_err(py_err)?;
        if ck.seed != self.config.seed {
            return Err(PyValueError::new_err(format!(
                "checkpoint was trained with seed {}, config says {}",
                ck.seed, self.config.seed
            )));
        }
        ck.apply_to(&mut self.params).map_err(py_err)?;
        self.rng.set_word_pos(ck.word_pos);
        self.global_step = ck.step;
        self.prior = PriorMarginal::new(ck.prior.clone()).map_err(py_err)?;
        self.last_stage = Some(ck.stage);
        Ok(())
    }
}

#[pymodule]
fn nanomm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resolve_resolution, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_angles, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate_position_table, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn_targets, m)?)?;
    m.add_function(wrap_pyfunction!(verify_checks, m)?)?;
    m.add_class::<Vocab>()?;
    m.add_class::<Engine>()?;
    Ok(())
}
