//! Gaussian keypoint heatmaps, their spatial normalization, ground-false
//! targets, and the argmax decoder.
//!
//! All maps are `K×H×W` row-major in heatmap-grid units; keypoint `(h, w)`
//! coordinates are continuous, decoded coordinates are integer cells.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Heatmap grid extent `H'×W'`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn square(side: usize) -> Self {
        Self::new(side, side)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, (h, w): (f64, f64)) -> bool {
        h >= 0.0 && w >= 0.0 && h < self.height as f64 && w < self.width as f64
    }

    /// Conventional Gaussian width, `H'/32`.
    pub fn default_sigma(&self) -> f64 {
        self.height as f64 / 32.0
    }
}

/// `K` keypoints with per-point visibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks `K ≥ 1` and that visible points lie inside `grid`.
    pub fn validate(&self, grid: Grid) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid("keypoints", "need at least one keypoint"));
        }
        if self.visible.len() != self.points.len() {
            return Err(Error::invalid("keypoints", "visibility length differs from point count"));
        }
        for (k, (&p, &vis)) in self.points.iter().zip(&self.visible).enumerate() {
            if vis && !grid.contains(p) {
                return Err(Error::invalid(
                    "keypoints",
                    format!("keypoint {k} at {p:?} outside {}x{} grid", grid.height, grid.width),
                ));
            }
        }
        Ok(())
    }
}

/// Per-keypoint nonnegative maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    grid: Grid,
    keypoints: usize,
    data: Vec<f64>,
}

/// Per-keypoint probability maps; every slice sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialDistribution {
    grid: Grid,
    keypoints: usize,
    data: Vec<f64>,
}

macro_rules! map_accessors {
    ($ty:ty) => {
        impl $ty {
            pub fn grid(&self) -> Grid {
                self.grid
            }

            pub fn keypoints(&self) -> usize {
                self.keypoints
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn slice(&self, k: usize) -> &[f64] {
                let n = self.grid.cells();
                &self.data[k * n..(k + 1) * n]
            }

            pub fn at(&self, k: usize, h: usize, w: usize) -> f64 {
                self.data[(k * self.grid.height + h) * self.grid.width + w]
            }

            /// `1×K×H×W` tensor.
            pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
                Tensor::from_f64(&[1, self.keypoints, self.grid.height, self.grid.width], &self.data)
                    .expect("consistent shape")
            }

            pub fn decode(&self) -> KeypointSet {
                decode_maps(&self.data, self.keypoints, self.grid)
            }
        }
    };
}

map_accessors!(Heatmap);
map_accessors!(SpatialDistribution);

impl Heatmap {
    pub fn new(grid: Grid, keypoints: usize, data: Vec<f64>) -> Result<Self> {
        if keypoints == 0 || data.len() != keypoints * grid.cells() {
            return Err(Error::invalid(
                "heatmap",
                format!("{} values for {keypoints} maps of {grid:?}", data.len()),
            ));
        }
        if data.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid("heatmap", "entries must be finite and nonnegative"));
        }
        Ok(Self {
            grid,
            keypoints,
            data,
        })
    }
}

impl SpatialDistribution {
    /// Wraps maps that are already normalized, checking the invariant.
    pub fn new(grid: Grid, keypoints: usize, data: Vec<f64>) -> Result<Self> {
        let h = Heatmap::new(grid, keypoints, data)?;
        for k in 0..keypoints {
            let s: f64 = h.slice(k).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("spatial distribution", format!("slice {k} sums to {s}")));
            }
        }
        Ok(Self {
            grid,
            keypoints,
            data: h.data,
        })
    }
}

fn gaussian_into(out: &mut [f64], grid: Grid, (ch, cw): (f64, f64), sigma: f64, weight: f64) {
    let denom = 2.0 * sigma * sigma;
    // Separable: exp(-(dh²+dw²)/2σ²) = exp(-dh²/2σ²)·exp(-dw²/2σ²).
    let col: Vec<f64> = (0..grid.width)
        .map(|w| (-(w as f64 - cw).powi(2) / denom).exp())
        .collect();
    for h in 0..grid.height {
        let row = weight * (-(h as f64 - ch).powi(2) / denom).exp();
        for (o, &c) in out[h * grid.width..(h + 1) * grid.width].iter_mut().zip(&col) {
            *o += row * c;
        }
    }
}

/// Unit-amplitude Gaussian blob per keypoint. Invisible keypoints get a
/// uniform slice.
pub fn gaussian_heatmap(points: &KeypointSet, grid: Grid, sigma: f64) -> Result<Heatmap> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("gaussian_heatmap", format!("sigma must be positive, got {sigma}")));
    }
    points.validate(grid)?;
    let n = grid.cells();
    let mut data = vec![0.0; points.len() * n];
    for (k, (&p, &vis)) in points.points.iter().zip(&points.visible).enumerate() {
        let slice = &mut data[k * n..(k + 1) * n];
        if vis {
            gaussian_into(slice, grid, p, sigma, 1.0);
        } else {
            slice.fill(1.0);
        }
    }
    Heatmap::new(grid, points.len(), data)
}

/// Divides every slice by its total mass.
pub fn normalize_spatial(h: &Heatmap) -> Result<SpatialDistribution> {
    let n = h.grid.cells();
    let mut data = h.data.clone();
    for (k, slice) in data.chunks_mut(n).enumerate() {
        let total: f64 = slice.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("normalize_spatial", format!("slice {k} has total mass {total}")));
        }
        slice.iter_mut().for_each(|v| *v /= total);
    }
    Ok(SpatialDistribution {
        grid: h.grid,
        keypoints: h.keypoints,
        data,
    })
}

/// Integer argmax per slice, ties to the smallest row-major index.
pub fn decode_maps(data: &[f64], keypoints: usize, grid: Grid) -> KeypointSet {
    let n = grid.cells();
    let points = (0..keypoints)
        .map(|k| {
            let slice = &data[k * n..(k + 1) * n];
            let mut best = 0;
            for (i, &v) in slice.iter().enumerate().skip(1) {
                if v > slice[best] {
                    best = i;
                }
            }
            ((best / grid.width) as f64, (best % grid.width) as f64)
        })
        .collect();
    KeypointSet::new(points)
}

/// Decodes a `B×K×H×W` tensor into one keypoint set per sample.
pub fn decode_batch<T: Scalar>(maps: &Tensor<T>) -> Result<Vec<KeypointSet>> {
    let shape = maps.shape();
    if shape.len() != 4 {
        return Err(Error::invalid("decode", format!("expected B×K×H×W, got {shape:?}")));
    }
    let (b, k, w) = (shape[0], shape[1], shape[3]);
    let best = maps.spatial_argmax();
    Ok((0..b)
        .map(|i| {
            KeypointSet::new(
                best[i * k..(i + 1) * k]
                    .iter()
                    .map(|&(_, idx)| ((idx / w) as f64, (idx % w) as f64))
                    .collect(),
            )
        })
        .collect())
}

/// Ground-false distribution for `K ≥ 2`: slice `k` is the normalized sum of
/// the Gaussians at every *other* predicted keypoint.
pub fn ground_false(predictions: &KeypointSet, grid: Grid, sigma: f64) -> Result<SpatialDistribution> {
    let k_total = predictions.len();
    if k_total < 2 {
        return Err(Error::invalid(
            "ground_false",
            "needs K ≥ 2 keypoints; use ground_false_masked for single-keypoint tasks",
        ));
    }
    let single = gaussian_heatmap(predictions, grid, sigma)?;
    let n = grid.cells();
    let mut data = Vec::with_capacity(k_total * n);
    for k in 0..k_total {
        let mut others = vec![0.0; n];
        for k2 in (0..k_total).filter(|&k2| k2 != k) {
            for (o, v) in others.iter_mut().zip(single.slice(k2)) {
                *o += v;
            }
        }
        data.extend(others);
    }
    normalize_spatial(&Heatmap::new(grid, k_total, data)?)
}

/// Cells allowed to carry ground-false probability mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaMask {
    grid: Grid,
    cells: Vec<bool>,
}

impl AreaMask {
    pub fn new(grid: Grid, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid.cells() {
            return Err(Error::invalid("area mask", "cell count differs from grid"));
        }
        let active = cells.iter().filter(|&&c| c).count();
        if active < 2 {
            return Err(Error::invalid("area mask", format!("needs at least 2 cells, has {active}")));
        }
        Ok(Self { grid, cells })
    }

    /// Inclusive rectangle `h_lo..=h_hi × w_lo..=w_hi`.
    pub fn rect(grid: Grid, (h_lo, h_hi): (usize, usize), (w_lo, w_hi): (usize, usize)) -> Result<Self> {
        let cells = (0..grid.height)
            .flat_map(|h| (0..grid.width).map(move |w| (h, w)))
            .map(|(h, w)| h >= h_lo && h <= h_hi && w >= w_lo && w <= w_hi)
            .collect();
        Self::new(grid, cells)
    }

    /// Central half of the grid, e.g. `16..=47` on a 64-cell side.
    pub fn central(grid: Grid) -> Result<Self> {
        let (qh, qw) = (grid.height / 4, grid.width / 4);
        Self::rect(grid, (qh, grid.height - qh - 1), (qw, grid.width - qw - 1))
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn contains_cell(&self, h: usize, w: usize) -> bool {
        h < self.grid.height && w < self.grid.width && self.cells[h * self.grid.width + w]
    }

    pub fn active_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.grid.width;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(move |(i, _)| (i / w, i % w))
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Single-keypoint ground-false target restricted to an [`AreaMask`].
///
/// Caches the sum of Gaussians over every mask cell so each query is one
/// subtraction of the predicted cell's Gaussian.
#[derive(Clone, Debug)]
pub struct MaskedGroundFalse {
    mask: AreaMask,
    sigma: f64,
    area_sum: Vec<f64>,
}

impl MaskedGroundFalse {
    pub fn new(mask: AreaMask, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid("ground_false_masked", format!("sigma must be positive, got {sigma}")));
        }
        let grid = mask.grid;
        let mut area_sum = vec![0.0; grid.cells()];
        for (h, w) in mask.active_cells() {
            gaussian_into(&mut area_sum, grid, (h as f64, w as f64), sigma, 1.0);
        }
        Ok(Self { mask, sigma, area_sum })
    }

    pub fn mask(&self) -> &AreaMask {
        &self.mask
    }

    /// `P_F` for prediction `(h, w)`; a prediction off the mask keeps every
    /// mask center.
    pub fn distribution(&self, prediction: (f64, f64)) -> Result<SpatialDistribution> {
        let grid = self.mask.grid;
        if !grid.contains(prediction) {
            return Err(Error::invalid("ground_false_masked", format!("prediction {prediction:?} outside grid")));
        }
        let (ph, pw) = (prediction.0.round() as usize, prediction.1.round() as usize);
        let mut data = self.area_sum.clone();
        if self.mask.contains_cell(ph, pw) {
            let mut own = vec![0.0; grid.cells()];
            gaussian_into(&mut own, grid, (ph as f64, pw as f64), self.sigma, 1.0);
            for (d, o) in data.iter_mut().zip(&own) {
                *d = (*d - o).max(0.0);
            }
        }
        normalize_spatial(&Heatmap::new(grid, 1, data)?)
    }
}

/// `P_F` for a single keypoint, restricted to `mask`.
pub fn ground_false_masked(
    prediction: &KeypointSet,
    mask: &AreaMask,
    sigma: f64,
) -> Result<SpatialDistribution> {
    if prediction.len() != 1 {
        return Err(Error::invalid("ground_false_masked", format!("expects K = 1, got {}", prediction.len())));
    }
    MaskedGroundFalse::new(mask.clone(), sigma)?.distribution(prediction.points[0])
}
