//! Boxes, IOU, proposal padding, and the pooling operations that turn a
//! feature grid into per-node vectors and a global descriptor.
//!
//! All tensors are 64-bit. Every operation here is a pure function of its
//! inputs; the `*_backward` functions propagate cotangents for the manual
//! reverse pass. Max-pool ties are broken by lowest linear cell index so
//! subgradients are deterministic.

use ndarray::{Array1, Array3, Array4, ArrayView3};

use crate::error::{Error, Result};

/// Dummy padding box: the hood of the ego car.
pub const DUMMY_BOX: (f64, f64, f64, f64) = (0.07, 0.91, 0.97, 1.0);

/// Axis-aligned box with coordinates normalized to `[0, 1]`.
///
/// Construction rejects degenerate boxes (`x1 >= x2` or `y1 >= y2`) and
/// out-of-range coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = x1.is_finite()
            && y1.is_finite()
            && x2.is_finite()
            && y2.is_finite()
            && (0.0..1.0).contains(&x1)
            && (0.0..1.0).contains(&y1)
            && x1 < x2
            && y1 < y2
            && x2 <= 1.0
            && y2 <= 1.0;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// The fixed hood-of-car padding box.
    pub fn dummy() -> Self {
        let (x1, y1, x2, y2) = DUMMY_BOX;
        Self { x1, y1, x2, y2 }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap length of the box's x-extent with the interval `[lo, hi]`.
    pub fn x_overlap(&self, lo: f64, hi: f64) -> f64 {
        (self.x2.min(hi) - self.x1.max(lo)).max(0.0)
    }
}

/// Intersection over union of two boxes. Zero when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A graph node: a box plus padding flag and (training-only) importance label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub is_dummy: bool,
    /// Importance ground truth, 0 or 1. Always 0 for dummies.
    pub label: u8,
}

impl Proposal {
    pub fn object(bbox: BBox, label: u8) -> Self {
        debug_assert!(label <= 1);
        Self {
            bbox,
            is_dummy: false,
            label,
        }
    }

    pub fn dummy() -> Self {
        Self {
            bbox: BBox::dummy(),
            is_dummy: true,
            label: 0,
        }
    }
}

/// Pad with dummy proposals until the list is exactly `n_target` long.
///
/// Original order is preserved. Too many proposals is an error: this layer
/// has no detector scores, so the caller must truncate by score first.
pub fn pad_proposals(mut props: Vec<Proposal>, n_target: usize) -> Result<Vec<Proposal>> {
    if props.len() > n_target {
        return Err(Error::TooManyProposals {
            got: props.len(),
            target: n_target,
        });
    }
    props.resize(n_target, Proposal::dummy());
    Ok(props)
}

/// Dense T×H×W×C activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    data: Array4<f64>,
}

impl FeatureGrid {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (t, h, w, c) = data.dim();
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape {
                op: "FeatureGrid::new",
                expected: "positive T, H, W, C".into(),
                got: format!("{}x{}x{}x{}", t, h, w, c),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGrid);
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }
}

/// Per-node feature vectors, rows are `v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    vectors: ndarray::Array2<f64>,
}

impl NodeFeatures {
    pub fn new(vectors: ndarray::Array2<f64>) -> Result<Self> {
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape {
                op: "NodeFeatures::new",
                expected: "finite entries".into(),
                got: "non-finite entry".into(),
            });
        }
        Ok(Self { vectors })
    }

    pub fn matrix(&self) -> &ndarray::Array2<f64> {
        &self.vectors
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn c(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Collapse the temporal dimension with a T×1×1 convolution of stride T.
///
/// `weights` has shape (T, C_in, C_out); the kernel's temporal extent must
/// equal the grid's T. Output shape is 1×H×W×C_out.
pub fn temporal_aggregate(grid: &FeatureGrid, weights: &Array3<f64>) -> Result<FeatureGrid> {
    let (t, h, w, c) = grid.dims();
    let (kt, kc_in, c_out) = weights.dim();
    if kt != t || kc_in != c {
        return Err(Error::Shape {
            op: "temporal_aggregate",
            expected: format!("kernel ({}, {}, C_out)", t, c),
            got: format!("kernel ({}, {}, {})", kt, kc_in, c_out),
        });
    }
    let f = grid.data();
    let mut out = Array4::zeros((1, h, w, c_out));
    for hy in 0..h {
        for wx in 0..w {
            for co in 0..c_out {
                let mut acc = 0.0;
                for ti in 0..t {
                    for ci in 0..c {
                        acc += f[(ti, hy, wx, ci)] * weights[(ti, ci, co)];
                    }
                }
                out[(0, hy, wx, co)] = acc;
            }
        }
    }
    FeatureGrid::new(out)
}

/// Cotangents of [`temporal_aggregate`] with respect to the grid and kernel.
pub fn temporal_aggregate_backward(
    grid: &FeatureGrid,
    weights: &Array3<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array3<f64>) {
    let (t, h, w, c) = grid.dims();
    let c_out = weights.dim().2;
    let f = grid.data();
    let mut d_grid = Array4::zeros((t, h, w, c));
    let mut d_weights = Array3::zeros(weights.dim());
    for hy in 0..h {
        for wx in 0..w {
            for co in 0..c_out {
                let g = d_out[(0, hy, wx, co)];
                if g == 0.0 {
                    continue;
                }
                for ti in 0..t {
                    for ci in 0..c {
                        d_grid[(ti, hy, wx, ci)] += g * weights[(ti, ci, co)];
                        d_weights[(ti, ci, co)] += g * f[(ti, hy, wx, ci)];
                    }
                }
            }
        }
    }
    (d_grid, d_weights)
}

/// Cell range `[start, end]` covered by bin `k` of `r` over the continuous
/// span `[lo, lo + span)`, clamped so every bin holds at least one cell.
pub(crate) fn bin_cells(lo: f64, span: f64, k: usize, r: usize, limit: usize) -> (usize, usize) {
    let start = (lo + k as f64 * span / r as f64).floor() as isize;
    let end = (lo + (k + 1) as f64 * span / r as f64).ceil() as isize - 1;
    let start = start.clamp(0, limit as isize - 1) as usize;
    let end = end.clamp(start as isize, limit as isize - 1) as usize;
    (start, end)
}

/// Cell range `[start, end]` covered by a whole normalized interval.
pub(crate) fn span_cells(lo_norm: f64, hi_norm: f64, limit: usize) -> (usize, usize) {
    bin_cells(lo_norm * limit as f64, (hi_norm - lo_norm) * limit as f64, 0, 1, limit)
}

/// Quantized ROI max pooling output: r×r×C features plus, for each bin and
/// channel, the (h, w) grid cell that produced the max.
#[derive(Debug, Clone)]
pub struct RoiPooled {
    pub features: Array3<f64>,
    pub argmax: Array3<(usize, usize)>,
}

/// Pool a normalized box from a T=1 grid into r×r bins of per-channel maxima.
///
/// The box maps to the continuous span `[x1·W, x2·W] × [y1·H, y2·H]`; bins
/// are quantized with floor/ceil and clamped so each contains at least one
/// cell. Ties go to the lowest linear cell index.
pub fn roi_pool(grid: &FeatureGrid, bbox: &BBox, r: usize) -> Result<RoiPooled> {
    let (t, h, w, c) = grid.dims();
    if t != 1 {
        return Err(Error::Shape {
            op: "roi_pool",
            expected: "grid with T=1".into(),
            got: format!("T={}", t),
        });
    }
    if r == 0 {
        return Err(Error::Shape {
            op: "roi_pool",
            expected: "r >= 1".into(),
            got: "r=0".into(),
        });
    }
    let f = grid.data();
    let lo_x = bbox.x1() * w as f64;
    let span_x = bbox.width() * w as f64;
    let lo_y = bbox.y1() * h as f64;
    let span_y = bbox.height() * h as f64;

    let mut features = Array3::zeros((r, r, c));
    let mut argmax = Array3::from_elem((r, r, c), (0usize, 0usize));
    for by in 0..r {
        let (y_start, y_end) = bin_cells(lo_y, span_y, by, r, h);
        for bx in 0..r {
            let (x_start, x_end) = bin_cells(lo_x, span_x, bx, r, w);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_cell = (y_start, x_start);
                for hy in y_start..=y_end {
                    for wx in x_start..=x_end {
                        let v = f[(0, hy, wx, ch)];
                        if v > best {
                            best = v;
                            best_cell = (hy, wx);
                        }
                    }
                }
                features[(by, bx, ch)] = best;
                argmax[(by, bx, ch)] = best_cell;
            }
        }
    }
    Ok(RoiPooled { features, argmax })
}

/// Route ROI-pool cotangents back to the argmax cells of a 1×H×W×C grid.
pub fn roi_pool_backward(
    pooled: &RoiPooled,
    d_features: &Array3<f64>,
    grid_dims: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut d_grid = Array4::zeros(grid_dims);
    let (r, _, c) = pooled.features.dim();
    for by in 0..r {
        for bx in 0..r {
            for ch in 0..c {
                let (hy, wx) = pooled.argmax[(by, bx, ch)];
                d_grid[(0, hy, wx, ch)] += d_features[(by, bx, ch)];
            }
        }
    }
    d_grid
}

/// Per-channel max over the r×r spatial positions. Returns the pooled vector
/// and the (row, col) argmax per channel (ties to lowest linear index).
pub fn spatial_max_pool(features: &ArrayView3<f64>) -> (Array1<f64>, Vec<(usize, usize)>) {
    let (rows, cols, c) = features.dim();
    let mut out = Array1::zeros(c);
    let mut argmax = vec![(0usize, 0usize); c];
    for ch in 0..c {
        let mut best = f64::NEG_INFINITY;
        let mut best_pos = (0, 0);
        for i in 0..rows {
            for j in 0..cols {
                let v = features[(i, j, ch)];
                if v > best {
                    best = v;
                    best_pos = (i, j);
                }
            }
        }
        out[ch] = best;
        argmax[ch] = best_pos;
    }
    (out, argmax)
}

/// Route spatial-max cotangents back to the argmax positions.
pub fn spatial_max_pool_backward(
    argmax: &[(usize, usize)],
    d_out: &Array1<f64>,
    dims: (usize, usize, usize),
) -> Array3<f64> {
    let mut d_features = Array3::zeros(dims);
    for (ch, &(i, j)) in argmax.iter().enumerate() {
        d_features[(i, j, ch)] += d_out[ch];
    }
    d_features
}

/// Mean over T×H×W per channel: the global descriptor D.
pub fn global_avg_pool(grid: &FeatureGrid) -> Array1<f64> {
    let (t, h, w, c) = grid.dims();
    let f = grid.data();
    let scale = 1.0 / (t * h * w) as f64;
    let mut out = Array1::zeros(c);
    for ti in 0..t {
        for hy in 0..h {
            for wx in 0..w {
                for ch in 0..c {
                    out[ch] += f[(ti, hy, wx, ch)];
                }
            }
        }
    }
    out.mapv_inplace(|v| v * scale);
    out
}

/// Uniform-weight cotangent of [`global_avg_pool`].
pub fn global_avg_pool_backward(
    d_out: &Array1<f64>,
    dims: (usize, usize, usize, usize),
) -> Array4<f64> {
    let (t, h, w, _) = dims;
    let scale = 1.0 / (t * h * w) as f64;
    let mut d_grid = Array4::zeros(dims);
    for ti in 0..t {
        for hy in 0..h {
            for wx in 0..w {
                for (ch, &g) in d_out.iter().enumerate() {
                    d_grid[(ti, hy, wx, ch)] = g * scale;
                }
            }
        }
    }
    d_grid
}
