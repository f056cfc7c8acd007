//! Vision transformer over variable-resolution patch grids.
//!
//! z₀ = patches·E + interpolated position table (table skipped in rotary-only
//! mode), then L pre-norm blocks of multi-head attention — with q/k rotated by
//! the 2D rotary scheme when enabled — and a GELU FFN, residuals on both, and
//! a final layer norm. All patch tokens are forwarded; pooling happens
//! downstream.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{const_init, normal_init, ParamSet, TapeBinding};
use crate::patcher::{preprocess, ImageSpec, PatchGrid, ResolutionPolicy};
use crate::rotary::{interpolate_pos, rope2d_rotate, RotaryConfig};
use crate::tensor::Scalar;

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
/// Initialization scale for weight matrices and embedding tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Transformer depth L.
    pub layers: usize,
    /// Model width D_v.
    pub width: usize,
    pub heads: usize,
    /// Patch side length P.
    pub patch: usize,
    /// Input channels C.
    pub channels: usize,
    /// FFN expansion factor.
    pub mlp_ratio: usize,
    /// Source side G of the learned G×G position table.
    pub pos_grid: usize,
    pub rotary: RotaryConfig,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Flattened patch vector length P²·C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidArg {
            op: "encoder_config",
            detail,
        };
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.patch == 0 || self.channels == 0 || self.mlp_ratio == 0 || self.pos_grid == 0 {
            return Err(bad("all dimensions must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(bad(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if self.head_dim() % 4 != 0 {
            return Err(bad(format!("head_dim {} must be a multiple of 4", self.head_dim())));
        }
        if self.rotary.head_dim != self.head_dim() {
            return Err(bad(format!(
                "rotary head_dim {} disagrees with width/heads = {}",
                self.rotary.head_dim,
                self.head_dim()
            )));
        }
        self.rotary.validate()
    }
}

/// Encoded image: the feature variable plus its grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct VisualFeatures {
    /// `[N × D_v]` on the active graph.
    pub z: Var,
    pub rows: usize,
    pub cols: usize,
}

impl VisualFeatures {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Register all encoder parameters under the "encoder." prefix, sampling in a
/// fixed order so a seed fully determines the initialization.
pub fn init_params<T: Scalar>(
    cfg: &EncoderConfig,
    rng: &mut impl rand::Rng,
    params: &mut ParamSet<T>,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    params.register("encoder.patch_embed", normal_init(rng, vec![cfg.patch_dim(), d], INIT_STD)?, true)?;
    params.register(
        "encoder.pos_table",
        normal_init(rng, vec![cfg.pos_grid * cfg.pos_grid, d], INIT_STD)?,
        false,
    )?;
    for i in 0..cfg.layers {
        let p = format!("encoder.block{i}");
        params.register(&format!("{p}.ln1.gain"), const_init(vec![d], 1.0)?, false)?;
        params.register(&format!("{p}.ln1.bias"), const_init(vec![d], 0.0)?, false)?;
        for proj in ["q", "k", "v", "o"] {
            params.register(&format!("{p}.attn.{proj}.weight"), normal_init(rng, vec![d, d], INIT_STD)?, true)?;
            params.register(&format!("{p}.attn.{proj}.bias"), const_init(vec![d], 0.0)?, true)?;
        }
        params.register(&format!("{p}.ln2.gain"), const_init(vec![d], 1.0)?, false)?;
        params.register(&format!("{p}.ln2.bias"), const_init(vec![d], 0.0)?, false)?;
        params.register(&format!("{p}.ffn.fc1.weight"), normal_init(rng, vec![d, cfg.mlp_ratio * d], INIT_STD)?, true)?;
        params.register(&format!("{p}.ffn.fc1.bias"), const_init(vec![cfg.mlp_ratio * d], 0.0)?, true)?;
        params.register(&format!("{p}.ffn.fc2.weight"), normal_init(rng, vec![cfg.mlp_ratio * d, d], INIT_STD)?, true)?;
        params.register(&format!("{p}.ffn.fc2.bias"), const_init(vec![d], 0.0)?, true)?;
    }
    params.register("encoder.final_ln.gain", const_init(vec![d], 1.0)?, false)?;
    params.register("encoder.final_ln.bias", const_init(vec![d], 0.0)?, false)?;
    Ok(())
}

/// z₀: bias-free linear patch projection plus the interpolated position table
/// (the table is skipped in rotary-only mode).
pub fn embed<T: Scalar>(
    g: &mut Graph<T>,
    grid: &PatchGrid<T>,
    binding: &TapeBinding,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let e = binding.var("encoder.patch_embed")?;
    let e_shape = g.value(e).shape().to_vec();
    let got = grid.patches.shape()[1];
    if e_shape != [cfg.patch_dim(), cfg.width] || got != cfg.patch_dim() {
        return Err(Error::Contract {
            op: "encoder.embed",
            detail: format!(
                "patch dim {} vs projection {:?} (expected [{} x {}])",
                got,
                e_shape,
                cfg.patch_dim(),
                cfg.width
            ),
        });
    }
    let x = g.leaf(grid.patches.clone())?;
    let mut z = g.matmul(x, e)?;
    if cfg.rotary.mode.uses_table() {
        let table = binding.var("encoder.pos_table")?;
        let pos = interpolate_pos(g, table, cfg.pos_grid, (grid.rows, grid.cols))?;
        z = g.add(z, pos)?;
    }
    Ok(z)
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, binding: &TapeBinding, prefix: &str) -> Result<Var> {
    let w = binding.var(&format!("{prefix}.weight"))?;
    let b = binding.var(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn block_norm<T: Scalar>(g: &mut Graph<T>, x: Var, binding: &TapeBinding, prefix: &str) -> Result<Var> {
    let gain = binding.var(&format!("{prefix}.gain"))?;
    let bias = binding.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Pre-norm multi-head attention with residual; q and k are rotated per the
/// position mode, logits scale by 1/sqrt(head_dim). `coords` are (x, y) patch
/// coordinates per token.
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    coords: &[(usize, usize)],
    binding: &TapeBinding,
    cfg: &EncoderConfig,
    idx: usize,
) -> Result<Var> {
    let p = format!("encoder.block{idx}");
    let h = block_norm(g, z, binding, &format!("{p}.ln1"))?;
    let q = linear(g, h, binding, &format!("{p}.attn.q"))?;
    let k = linear(g, h, binding, &format!("{p}.attn.k"))?;
    let v = linear(g, h, binding, &format!("{p}.attn.v"))?;
    let hd = cfg.head_dim();
    let inv_scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let (c0, c1) = (head * hd, (head + 1) * hd);
        let mut qh = g.slice_cols(q, c0, c1)?;
        let mut kh = g.slice_cols(k, c0, c1)?;
        let vh = g.slice_cols(v, c0, c1)?;
        if cfg.rotary.mode.uses_rotation() {
            qh = rope2d_rotate(g, qh, coords, &cfg.rotary)?;
            kh = rope2d_rotate(g, kh, coords, &cfg.rotary)?;
        }
        let logits = g.matmul_transb(qh, kh)?;
        let scaled = g.scale(logits, inv_scale)?;
        let attn = g.softmax(scaled, 1, 1.0)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let o = linear(g, cat, binding, &format!("{p}.attn.o"))?;
    g.add(z, o)
}

/// Pre-norm two-layer GELU MLP with residual.
pub fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    binding: &TapeBinding,
    cfg: &EncoderConfig,
    idx: usize,
) -> Result<Var> {
    let _ = cfg;
    let p = format!("encoder.block{idx}");
    let h = block_norm(g, y, binding, &format!("{p}.ln2"))?;
    let a = linear(g, h, binding, &format!("{p}.ffn.fc1"))?;
    let a = g.gelu(a)?;
    let b = linear(g, a, binding, &format!("{p}.ffn.fc2"))?;
    g.add(y, b)
}

/// All L blocks plus the final layer norm.
pub fn run_blocks<T: Scalar>(
    g: &mut Graph<T>,
    z0: Var,
    coords: &[(usize, usize)],
    binding: &TapeBinding,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mut z = z0;
    for i in 0..cfg.layers {
        z = attention_block(g, z, coords, binding, cfg, i)?;
        z = ffn_block(g, z, binding, cfg, i)?;
    }
    block_norm(g, z, binding, "encoder.final_ln")
}

/// (x, y) = (col + δx, row + δy) rotation coordinates for a grid, row-major.
pub fn shifted_coords(grid: &PatchGrid<impl Scalar>, shift: (usize, usize)) -> Vec<(usize, usize)> {
    grid.coords.iter().map(|&(r, c)| (c + shift.0, r + shift.1)).collect()
}

/// Full image path: resolve the target resolution (rounding to multiples of
/// `round_unit`, which callers set to 2P when the 2×2 merge adapter follows),
/// resize, normalize to mean-0.5/std-0.5, patchify, embed, run the blocks.
///
/// `coord_shift` offsets every rotation coordinate by (δx, δy); position
/// information enters only through coordinate differences, so any shift
/// leaves the features unchanged — exposed for exactly that verification.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    img: &ImageSpec<T>,
    binding: &TapeBinding,
    cfg: &EncoderConfig,
    policy: &ResolutionPolicy,
    round_unit: usize,
    coord_shift: (usize, usize),
) -> Result<VisualFeatures> {
    cfg.validate()?;
    if img.channels != cfg.channels {
        return Err(Error::Contract {
            op: "encoder.encode",
            detail: format!("image has {} channels, config expects {}", img.channels, cfg.channels),
        });
    }
    if round_unit == 0 || round_unit % cfg.patch != 0 {
        return Err(Error::InvalidArg {
            op: "encoder.encode",
            detail: format!("round unit {round_unit} is not a positive multiple of patch {}", cfg.patch),
        });
    }
    let grid = preprocess(img, policy, cfg.patch, round_unit)?;
    let coords = shifted_coords(&grid, coord_shift);
    let z0 = embed(g, &grid, binding, cfg)?;
    let z = run_blocks(g, z0, &coords, binding, cfg)?;
    Ok(VisualFeatures {
        z,
        rows: grid.rows,
        cols: grid.cols,
    })
}
