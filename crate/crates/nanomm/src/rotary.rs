//! Position encoding for the vision encoder: a bilinearly interpolated
//! learned position table composed with a 2D rotary rotation of queries and
//! keys, plus the two single-mechanism ablation modes.
//!
//! Coordinates are raw integer patch indices, x = column and y = row;
//! rotation makes attention logits depend only on coordinate differences, so
//! the origin never matters.

use crate::error::{Error, Result};
use crate::graph::{rope_apply, Graph, Var};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Which position mechanisms the encoder applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Interpolated table + rotary rotation (the full scheme).
    Combined,
    /// Rotation only; the table contribution is skipped.
    RotaryOnly,
    /// Table only; q/k rotation is bypassed.
    LearnedOnly,
}

impl PositionMode {
    pub fn uses_table(self) -> bool {
        !matches!(self, PositionMode::RotaryOnly)
    }

    pub fn uses_rotation(self) -> bool {
        !matches!(self, PositionMode::LearnedOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PositionMode::Combined => "combined",
            PositionMode::RotaryOnly => "rotary-only",
            PositionMode::LearnedOnly => "learned-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(PositionMode::Combined),
            "rotary-only" => Ok(PositionMode::RotaryOnly),
            "learned-only" => Ok(PositionMode::LearnedOnly),
            other => Err(Error::InvalidArg {
                op: "position_mode",
                detail: format!(
                    "unknown mode {other:?}; expected combined | rotary-only | learned-only"
                ),
            }),
        }
    }
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-head rotation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    /// Channels per attention head; must be a multiple of 4 (half the pairs
    /// rotate by x-angles, half by y-angles).
    pub head_dim: usize,
    /// Frequency base; 10000 is the conventional default.
    pub base: f64,
    pub mode: PositionMode,
}

impl RotaryConfig {
    pub fn new(head_dim: usize, base: f64, mode: PositionMode) -> Result<Self> {
        let cfg = RotaryConfig { head_dim, base, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 4 != 0 {
            return Err(Error::InvalidArg {
                op: "rotary_config",
                detail: format!("head_dim must be a positive multiple of 4, got {}", self.head_dim),
            });
        }
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(Error::InvalidArg {
                op: "rotary_config",
                detail: format!("base must be a positive finite real, got {}", self.base),
            });
        }
        Ok(())
    }
}

/// Resample a learned G×G position table to an arbitrary grid.
///
/// `table` is a `[G² × D]` variable whose rows are laid out row-major over the
/// source grid. Align-corners bilinear; bit-exact identity at (G, G).
pub fn interpolate_pos<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    source_g: usize,
    target: (usize, usize),
) -> Result<Var> {
    let shape = g.value(table).shape().to_vec();
    if shape.len() != 2 || shape[0] != source_g * source_g {
        return Err(Error::Shape {
            op: "interpolate_pos",
            detail: format!("table {shape:?} does not hold {source_g}x{source_g} rows"),
        });
    }
    g.interp_grid(table, (source_g, source_g), target)
}

/// Rotation angles for one token at patch coordinates (x, y), length
/// `head_dim / 2` (one per channel pair). For pair-frequency index
/// j ∈ [0, head_dim/4): θ_j = base^(−4j/head_dim); the first half of the
/// pairs gets x·θ_j, the second half y·θ_j.
pub fn rotation_angles(x: usize, y: usize, head_dim: usize, base: f64) -> Vec<f64> {
    debug_assert!(head_dim % 4 == 0 && head_dim > 0);
    let quarter = head_dim / 4;
    let mut angles = Vec::with_capacity(head_dim / 2);
    for j in 0..quarter {
        angles.push(x as f64 * theta(j, head_dim, base));
    }
    for j in 0..quarter {
        angles.push(y as f64 * theta(j, head_dim, base));
    }
    angles
}

#[inline]
fn theta(j: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-4.0 * j as f64 / head_dim as f64)
}

/// Angles for a full token list, concatenated in input order; `coords` holds
/// (x, y) = (col, row) pairs.
pub fn coord_angles(coords: &[(usize, usize)], head_dim: usize, base: f64) -> Vec<f64> {
    let mut all = Vec::with_capacity(coords.len() * head_dim / 2);
    for &(x, y) in coords {
        all.extend(rotation_angles(x, y, head_dim, base));
    }
    all
}

/// Angles for every cell of a rows×cols grid in row-major token order
/// (matching patch-sequence order), with x = col and y = row.
pub fn grid_angles(rows: usize, cols: usize, head_dim: usize, base: f64) -> Vec<f64> {
    let coords: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c, r)))
        .collect();
    coord_angles(&coords, head_dim, base)
}

/// 1D rotary angles for a token sequence (the text decoder's scheme): every
/// channel pair j ∈ [0, head_dim/2) of the token at `pos` turns by
/// pos·base^(−2j/head_dim). Requires an even head_dim.
pub fn sequence_angles(positions: &[usize], head_dim: usize, base: f64) -> Vec<f64> {
    debug_assert!(head_dim % 2 == 0 && head_dim > 0);
    let half = head_dim / 2;
    let mut all = Vec::with_capacity(positions.len() * half);
    for &pos in positions {
        for j in 0..half {
            all.push(pos as f64 * base.powf(-2.0 * j as f64 / head_dim as f64));
        }
    }
    all
}

fn check_rotate_args<T: Scalar>(shape: &[usize], coords_len: usize, cfg: &RotaryConfig) -> Result<(usize, usize)> {
    cfg.validate()?;
    let _ = T::DTYPE;
    if shape.len() != 2 || shape[1] != cfg.head_dim {
        return Err(Error::Shape {
            op: "rope2d_rotate",
            detail: format!("expected [N x {}], got {shape:?}", cfg.head_dim),
        });
    }
    if coords_len != shape[0] {
        return Err(Error::Contract {
            op: "rope2d_rotate",
            detail: format!("{} coords for {} tokens", coords_len, shape[0]),
        });
    }
    Ok((shape[0], shape[1]))
}

/// Rotate a `[N × head_dim]` tensor per token: consecutive channel pairs
/// (2i, 2i+1) each turn by their angle — x-angles on the first half of the
/// pairs, y-angles on the rest. Norm-preserving; identity at (0, 0).
/// Off-tape variant for plain tensors.
pub fn rope2d_rotate_tensor<T: Scalar>(
    v: &Tensor<T>,
    coords: &[(usize, usize)],
    cfg: &RotaryConfig,
) -> Result<Tensor<T>> {
    let (n, d) = check_rotate_args::<T>(v.shape(), coords.len(), cfg)?;
    let angles: Vec<T> = coord_angles(coords, cfg.head_dim, cfg.base)
        .into_iter()
        .map(T::from_f64)
        .collect();
    Tensor::new(vec![n, d], rope_apply(v.data(), &angles, n, d, false))
}

/// Graph variant of [`rope2d_rotate_tensor`]: differentiable, with the
/// backward pass rotating gradients by the negated angles.
pub fn rope2d_rotate<T: Scalar>(
    g: &mut Graph<T>,
    v: Var,
    coords: &[(usize, usize)],
    cfg: &RotaryConfig,
) -> Result<Var> {
    check_rotate_args::<T>(g.value(v).shape(), coords.len(), cfg)?;
    let angles = coord_angles(coords, cfg.head_dim, cfg.base);
    g.rope(v, &angles)
}
