//! Random patch masks and their per-scale expansions.
//!
//! Convention used across the crate: `true` means *visible*, `false` means
//! *masked*.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

/// Number of downsampling steps between the image and the coarsest scale.
pub const NUM_SCALES: usize = 5;
/// Ratio between the image side and the mask grid side (`2^NUM_SCALES`).
pub const DOWNSAMPLE_RATIO: usize = 1 << NUM_SCALES;

/// Patch-visibility grid at the coarsest resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskGrid {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
    seed: u64,
}

impl MaskGrid {
    pub fn from_visible(rows: usize, cols: usize, visible: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || visible.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "mask grid {rows}x{cols} cannot hold {} cells",
                visible.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            visible,
            seed: 0,
        })
    }

    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
            seed: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.cols + col]
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }
}

/// `round(ratio * cells)` with halves rounded up.
pub fn masked_cell_count(cells: usize, ratio: f64) -> usize {
    ((ratio * cells as f64) + 0.5).floor() as usize
}

/// Masks exactly `round(ratio * rows * cols)` cells chosen uniformly without
/// replacement. A pure function of its arguments.
pub fn sample_mask(rows: usize, cols: usize, ratio: f64, seed: u64) -> Result<MaskGrid> {
    if rows == 0 || cols == 0 {
        return Err(Error::Argument(format!(
            "mask grid must be non-empty, got {rows}x{cols}"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!(
            "mask ratio {ratio} outside [0, 1]"
        )));
    }
    let cells = rows * cols;
    let masked = masked_cell_count(cells, ratio).min(cells);
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut visible = vec![true; cells];
    for &i in &order[..masked] {
        visible[i] = false;
    }
    Ok(MaskGrid {
        rows,
        cols,
        visible,
        seed,
    })
}

/// A visibility map over `(n, h, w)`. `n == 1` broadcasts over any batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpatialMask {
    n: usize,
    h: usize,
    w: usize,
    visible: Vec<bool>,
}

impl SpatialMask {
    pub fn new(n: usize, h: usize, w: usize, visible: Vec<bool>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 || visible.len() != n * h * w {
            return Err(Error::Dimension(format!(
                "spatial mask ({n}, {h}, {w}) cannot hold {} flags",
                visible.len()
            )));
        }
        Ok(Self { n, h, w, visible })
    }

    pub fn all_visible(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            visible: vec![true; n * h * w],
        }
    }

    pub fn all_masked(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            visible: vec![false; n * h * w],
        }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn visible(&self) -> &[bool] {
        &self.visible
    }

    /// The `h * w` plane for sample `index`, broadcasting a single-sample mask.
    pub fn plane(&self, index: usize) -> &[bool] {
        let b = if self.n == 1 { 0 } else { index };
        &self.visible[b * self.h * self.w..(b + 1) * self.h * self.w]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    pub fn masked_count(&self) -> usize {
        self.visible.len() - self.visible_count()
    }

    /// Checks the mask can be applied to a batch of `n` maps of size `h x w`.
    pub fn check_fits(&self, n: usize, h: usize, w: usize) -> Result<()> {
        if self.h != h || self.w != w || (self.n != 1 && self.n != n) {
            return Err(Error::Dimension(format!(
                "mask ({}, {}, {}) does not fit feature maps ({n}, {h}, {w})",
                self.n, self.h, self.w
            )));
        }
        Ok(())
    }

    /// Number of visible positions across a batch of `n` samples.
    pub fn visible_in_batch(&self, n: usize) -> usize {
        if self.n == 1 {
            self.visible_count() * n
        } else {
            self.visible_count()
        }
    }

    /// Concatenates single-sample masks into one batched mask.
    pub fn stack(masks: &[&SpatialMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero masks".into()))?;
        let mut visible = Vec::with_capacity(masks.len() * first.h * first.w);
        for m in masks {
            if m.n != 1 || m.h != first.h || m.w != first.w {
                return Err(Error::Dimension(
                    "stacked masks must be single-sample and equally sized".into(),
                ));
            }
            visible.extend_from_slice(&m.visible);
        }
        Self::new(masks.len(), first.h, first.w, visible)
    }
}

/// The base grid together with its nearest-neighbour expansion to every
/// encoder scale `S_i = (H / 2^i, W / 2^i)`, `i = 1..=5`, plus the pixel level.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    base: MaskGrid,
    height: usize,
    width: usize,
    // index 0 is the full-resolution pixel map, index i is scale S_i
    levels: Vec<SpatialMask>,
}

impl MaskPyramid {
    pub fn base(&self) -> &MaskGrid {
        &self.base
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// The five scale maps `S_1..S_5`.
    pub fn levels(&self) -> &[SpatialMask] {
        &self.levels[1..]
    }

    /// Map at scale `i` (`0` = pixels, `1..=5` = `S_i`).
    pub fn scale(&self, i: usize) -> Result<&SpatialMask> {
        self.levels.get(i).ok_or_else(|| {
            Error::Argument(format!("scale {i} outside 0..={NUM_SCALES}"))
        })
    }

    pub fn pixels(&self) -> &SpatialMask {
        &self.levels[0]
    }
}

/// Expands `base` to every scale of an `height x width` image.
pub fn build_mask_pyramid(base: MaskGrid, height: usize, width: usize) -> Result<MaskPyramid> {
    if height % DOWNSAMPLE_RATIO != 0 || width % DOWNSAMPLE_RATIO != 0 || height == 0 || width == 0
    {
        return Err(Error::Geometry(format!(
            "image size {height}x{width} is not divisible by {DOWNSAMPLE_RATIO}"
        )));
    }
    if base.rows * DOWNSAMPLE_RATIO != height || base.cols * DOWNSAMPLE_RATIO != width {
        return Err(Error::Geometry(format!(
            "mask grid {}x{} does not match image {height}x{width}",
            base.rows, base.cols
        )));
    }
    let levels = (0..=NUM_SCALES)
        .map(|i| {
            let (h, w) = (height >> i, width >> i);
            let mut visible = Vec::with_capacity(h * w);
            for r in 0..h {
                let br = r * base.rows / h;
                for c in 0..w {
                    visible.push(base.is_visible(br, c * base.cols / w));
                }
            }
            SpatialMask { n: 1, h, w, visible }
        })
        .collect();
    Ok(MaskPyramid {
        base,
        height,
        width,
        levels,
    })
}

/// Sets every masked position to exactly `0.0` across all channels.
pub fn apply_mask_zero(x: &Tensor, mask: &SpatialMask) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    mask.check_fits(n, h, w)?;
    let mut out = x.clone();
    let plane = h * w;
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = mask.plane(i / c);
        for (v, &keep) in chunk.iter_mut().zip(m) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Stacks per-sample pyramids into batched masks, one per scale `0..=5`.
pub fn batch_scales(pyramids: &[MaskPyramid]) -> Result<Vec<SpatialMask>> {
    (0..=NUM_SCALES)
        .map(|i| {
            let maps: Vec<&SpatialMask> = pyramids.iter().map(|p| &p.levels[i]).collect();
            SpatialMask::stack(&maps)
        })
        .collect()
}
