//! Image → patch-sequence conversion and resolution policy.
//!
//! Pipeline order is: `resolve_resolution` picks target dims, `resize_bilinear`
//! resamples, `normalize` maps [0,1] pixels to mean-0.5/std-0.5 space, and
//! `patchify` lays out non-overlapping P×P blocks with (row, col) coordinates.
//! `patchify`/`unpatchify` are pure layout (exactly invertible); normalization
//! is its own step so the round trip stays bit-exact.

use crate::error::{Error, Result};
use crate::graph::align_corners_split;
use crate::tensor::{Scalar, Tensor};
use std::io::{Read, Write};
use std::path::Path;

/// A dense C×H×W image with pixel values conventionally in [0,1] before
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpec<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel-major: `pixels[c*H*W + y*W + x]`.
    pub pixels: Vec<T>,
}

impl<T: Scalar> ImageSpec<T> {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArg {
                op: "image.new",
                detail: format!("dims must be positive: {channels}x{height}x{width}"),
            });
        }
        if pixels.len() != channels * height * width {
            return Err(Error::Shape {
                op: "image.new",
                detail: format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    pixels.len()
                ),
            });
        }
        Ok(ImageSpec {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: T) -> Result<Self> {
        ImageSpec::new(height, width, channels, vec![v; channels * height * width])
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn cast<U: Scalar>(&self) -> ImageSpec<U> {
        ImageSpec {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Flattened patch sequence over a rows×cols grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub channels: usize,
    /// `[N × P²·C]`, patch vectors flattened channel-major.
    pub patches: Tensor<T>,
    /// (row, col) per patch, row-major; unique and covering the grid.
    pub coords: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolutionMode {
    Fixed { side: usize },
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionPolicy {
    pub mode: ResolutionMode,
    /// Hard cap on (H'/P)·(W'/P) in native mode, in units of the patch size
    /// handed to `resolve_resolution`.
    pub max_visual_tokens: Option<usize>,
}

impl ResolutionPolicy {
    pub fn fixed(side: usize) -> Self {
        ResolutionPolicy {
            mode: ResolutionMode::Fixed { side },
            max_visual_tokens: None,
        }
    }

    pub fn native(max_visual_tokens: Option<usize>) -> Self {
        ResolutionPolicy {
            mode: ResolutionMode::Native,
            max_visual_tokens,
        }
    }
}

/// Round `x` to the nearest multiple of `unit`, ties up, minimum `unit`.
fn round_to_unit(x: usize, unit: usize) -> usize {
    let rem = x % unit;
    let down = x - rem;
    let up = down + unit;
    let rounded = if rem * 2 >= unit { up } else { down };
    rounded.max(unit)
}

/// Decide the pixel dimensions an image will be resized to before patching.
///
/// Fixed mode returns (side, side). Native mode rounds each dimension to the
/// nearest multiple of `p` (minimum `p`); when a token budget is set and the
/// grid exceeds it, both dimensions shrink by the same factor
/// `s = sqrt(budget·p² / (H'·W'))` and re-round down to multiples of `p`,
/// keeping the cap hard and the aspect ratio within one patch row/col.
///
/// The model pipeline passes the merged-cell size (2·P when the 2×2 adapter
/// is active) as `p`, so grids stay even and the budget counts the tokens
/// the decoder actually sees.
pub fn resolve_resolution(
    native: (usize, usize),
    policy: &ResolutionPolicy,
    p: usize,
) -> Result<(usize, usize)> {
    if native.0 == 0 || native.1 == 0 {
        return Err(Error::InvalidArg {
            op: "resolve_resolution",
            detail: format!("image dimensions must be positive, got {native:?}"),
        });
    }
    if p == 0 {
        return Err(Error::InvalidArg {
            op: "resolve_resolution",
            detail: "patch size must be positive".into(),
        });
    }
    if let Some(m) = policy.max_visual_tokens {
        if m == 0 {
            return Err(Error::InvalidArg {
                op: "resolve_resolution",
                detail: "max_visual_tokens must be positive".into(),
            });
        }
    }
    match policy.mode {
        ResolutionMode::Fixed { side } => {
            if side == 0 || side % p != 0 {
                return Err(Error::InvalidArg {
                    op: "resolve_resolution",
                    detail: format!("fixed side {side} is not a positive multiple of {p}"),
                });
            }
            Ok((side, side))
        }
        ResolutionMode::Native => {
            let mut h = round_to_unit(native.0, p);
            let mut w = round_to_unit(native.1, p);
            if let Some(m) = policy.max_visual_tokens {
                if (h / p) * (w / p) > m {
                    let s = ((m * p * p) as f64 / (h as f64 * w as f64)).sqrt();
                    h = (((h as f64 * s) / p as f64).floor() as usize * p).max(p);
                    w = (((w as f64 * s) / p as f64).floor() as usize * p).max(p);
                    // Flooring keeps the product under the cap except when a
                    // dimension clamped at p; shave the longer side then.
                    while (h / p) * (w / p) > m {
                        if h >= w && h > p {
                            h -= p;
                        } else if w > p {
                            w -= p;
                        } else {
                            break;
                        }
                    }
                }
            }
            Ok((h, w))
        }
    }
}

/// Cut a resolved image into non-overlapping P×P patches, row-major, each
/// flattened channel-major to length P²·C.
pub fn patchify<T: Scalar>(img: &ImageSpec<T>, p: usize) -> Result<PatchGrid<T>> {
    if p == 0 {
        return Err(Error::InvalidArg {
            op: "patchify",
            detail: "patch size must be positive".into(),
        });
    }
    if img.height % p != 0 || img.width % p != 0 {
        return Err(Error::Contract {
            op: "patchify",
            detail: format!(
                "{}x{} not a multiple of patch {p}; resolve_resolution must run first",
                img.height, img.width
            ),
        });
    }
    let rows = img.height / p;
    let cols = img.width / p;
    let dim = p * p * img.channels;
    let mut data = Vec::with_capacity(rows * cols * dim);
    let mut coords = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            for ch in 0..img.channels {
                for py in 0..p {
                    for px in 0..p {
                        data.push(img.at(ch, r * p + py, c * p + px));
                    }
                }
            }
            coords.push((r, c));
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch: p,
        channels: img.channels,
        patches: Tensor::new(vec![rows * cols, dim], data)?,
        coords,
    })
}

/// Exact inverse of `patchify`.
pub fn unpatchify<T: Scalar>(grid: &PatchGrid<T>) -> Result<ImageSpec<T>> {
    let p = grid.patch;
    let (h, w) = (grid.rows * p, grid.cols * p);
    let mut pixels = vec![T::zero(); grid.channels * h * w];
    let data = grid.patches.data();
    let dim = p * p * grid.channels;
    for (n, &(r, c)) in grid.coords.iter().enumerate() {
        let patch = &data[n * dim..(n + 1) * dim];
        let mut i = 0;
        for ch in 0..grid.channels {
            for py in 0..p {
                for px in 0..p {
                    pixels[(ch * h + r * p + py) * w + c * p + px] = patch[i];
                    i += 1;
                }
            }
        }
    }
    ImageSpec::new(h, w, grid.channels, pixels)
}

/// Separable bilinear resampling with corners aligned to pixel centers.
/// Bit-exact identity when the target matches the source.
pub fn resize_bilinear<T: Scalar>(img: &ImageSpec<T>, target: (usize, usize)) -> Result<ImageSpec<T>> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArg {
            op: "resize_bilinear",
            detail: format!("target dims must be positive, got {target:?}"),
        });
    }
    // Precompute per-axis taps once.
    let ys: Vec<(usize, usize, f64)> = (0..th).map(|y| align_corners_split(img.height, th, y)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..tw).map(|x| align_corners_split(img.width, tw, x)).collect();
    let mut pixels = Vec::with_capacity(img.channels * th * tw);
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v = if fy == 0.0 && fx == 0.0 {
                    img.at(c, y0, x0)
                } else if fy == 0.0 {
                    let fx_t = T::from_f64(fx);
                    img.at(c, y0, x0) * (T::one() - fx_t) + img.at(c, y0, x1) * fx_t
                } else if fx == 0.0 {
                    let fy_t = T::from_f64(fy);
                    img.at(c, y0, x0) * (T::one() - fy_t) + img.at(c, y1, x0) * fy_t
                } else {
                    let fx_t = T::from_f64(fx);
                    let fy_t = T::from_f64(fy);
                    let top = img.at(c, y0, x0) * (T::one() - fx_t) + img.at(c, y0, x1) * fx_t;
                    let bot = img.at(c, y1, x0) * (T::one() - fx_t) + img.at(c, y1, x1) * fx_t;
                    top * (T::one() - fy_t) + bot * fy_t
                };
                pixels.push(v);
            }
        }
    }
    ImageSpec::new(th, tw, img.channels, pixels)
}

/// Map [0,1] pixels to mean-0.5 / std-0.5 space: `(x - 0.5) / 0.5`.
pub fn normalize<T: Scalar>(img: &ImageSpec<T>) -> ImageSpec<T> {
    let half = T::from_f64(0.5);
    ImageSpec {
        height: img.height,
        width: img.width,
        channels: img.channels,
        pixels: img.pixels.iter().map(|&v| (v - half) / half).collect(),
    }
}

/// The canonical image → patch-grid path, exactly as the encoder consumes
/// it: resolve the target size under `policy` (rounded to `round_unit`),
/// bilinear-resize, normalize, patchify into P×P blocks.
pub fn preprocess<T: Scalar>(
    img: &ImageSpec<T>,
    policy: &ResolutionPolicy,
    patch: usize,
    round_unit: usize,
) -> Result<PatchGrid<T>> {
    let target = resolve_resolution((img.height, img.width), policy, round_unit)?;
    let resized = resize_bilinear(img, target)?;
    let normed = normalize(&resized);
    patchify(&normed, patch)
}

const CPGR_MAGIC: &[u8; 4] = b"CPGR";
const CPGR_VERSION: u32 = 1;

/// Dump a patch grid as a portable float-array file: magic "CPGR",
/// u32 version, u32 rows/cols/P/C, then the f32 little-endian patch matrix.
pub fn write_cpgr<T: Scalar>(grid: &PatchGrid<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CPGR_MAGIC);
    for v in [CPGR_VERSION, grid.rows as u32, grid.cols as u32, grid.patch as u32, grid.channels as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.patches.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_cpgr(path: &Path) -> Result<PatchGrid<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |detail: String| Error::Contract {
        op: "read_cpgr",
        detail,
    };
    if bytes.len() < 24 || &bytes[0..4] != CPGR_MAGIC {
        return Err(fail("bad magic or truncated header".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CPGR_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let (rows, cols, p, c) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize, u32_at(20) as usize);
    let n = rows * cols;
    let dim = p * p * c;
    let want = 24 + n * dim * 4;
    if bytes.len() != want {
        return Err(fail(format!("expected {want} bytes, found {}", bytes.len())));
    }
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n * dim {
        let off = 24 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    let coords = (0..rows).flat_map(|r| (0..cols).map(move |cc| (r, cc))).collect();
    Ok(PatchGrid {
        rows,
        cols,
        patch: p,
        channels: c,
        patches: Tensor::new(vec![n, dim], data)?,
        coords,
    })
}
