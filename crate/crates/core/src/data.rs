//! Procedural two-domain shape dataset, its on-disk layout, and batching.
//!
//! Every random draw comes from ChaCha8 seeded with the dataset seed; each
//! sample owns a few dedicated stream ids, so sample `i` renders the same
//! no matter which thread produces it or how many samples come before it.
//!
//! Images are kept as 8-bit RGB (`H×W×3`, row-major), exactly as written to
//! PNG, and converted to `[0, 1]` floats when batched.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::heatmap::{AreaMask, Grid, KeypointSet};

/// Background style of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Style {
    /// Solid background.
    Color,
    /// Solid background blended with per-pixel uniform noise.
    Noisy { amplitude: f64 },
    /// Smooth low-frequency color field.
    Scream { cells: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Square,
    Triangle,
}

/// Inclusive cell range for keypoint positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaRange {
    pub h: [usize; 2],
    pub w: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Free-form domain tag, e.g. `C` or `N`.
    pub domain: String,
    pub style: Style,
    pub shape: ShapeKind,
    /// 1 (shape center), 3 (triangle corners) or 4 (square corners).
    pub keypoints: usize,
    pub image_size: usize,
    pub grid_size: usize,
    /// Nominal shape radius in pixels before per-sample jitter.
    pub shape_radius: f64,
    pub area: AreaRange,
    pub count: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            domain: "C".into(),
            style: Style::Color,
            shape: ShapeKind::Ellipse,
            keypoints: 1,
            image_size: 64,
            grid_size: 16,
            shape_radius: 8.0,
            area: AreaRange { h: [2, 13], w: [2, 13] },
            count: 1000,
            seed: 0,
        }
    }
}

const STREAM_POSITION: u64 = 0;
const STREAM_SHAPE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAMS_PER_SAMPLE: u64 = 4;

const JITTER: (f64, f64) = (0.85, 1.15);
const MAX_TILT: f64 = std::f64::consts::PI / 12.0;

impl DatasetSpec {
    pub fn grid(&self) -> Grid {
        Grid::square(self.grid_size)
    }

    /// Pixels per grid cell.
    pub fn scale(&self) -> f64 {
        self.image_size as f64 / self.grid_size as f64
    }

    pub fn area_mask(&self) -> Result<AreaMask> {
        AreaMask::rect(
            self.grid(),
            (self.area.h[0], self.area.h[1]),
            (self.area.w[0], self.area.w[1]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("dataset.{field}: {msg}")));
        if self.count == 0 {
            return bad("count", "must be positive".into());
        }
        if self.grid_size == 0 || self.image_size < self.grid_size || self.image_size % self.grid_size != 0 {
            return bad(
                "grid_size",
                format!("{} must divide image_size {}", self.grid_size, self.image_size),
            );
        }
        for (name, r) in [("h", self.area.h), ("w", self.area.w)] {
            if r[0] > r[1] || r[1] >= self.grid_size {
                return bad(
                    &format!("area.{name}"),
                    format!("range {r:?} empty or outside a {} grid", self.grid_size),
                );
            }
        }
        if self.area.h[0] == self.area.h[1] && self.area.w[0] == self.area.w[1] {
            return bad("area", "needs at least two cells".into());
        }
        match (self.keypoints, self.shape) {
            (1, _) | (3, ShapeKind::Triangle) | (4, ShapeKind::Square) => {}
            (k, s) => return bad("keypoints", format!("{k} keypoints unsupported for {s:?}")),
        }
        if !(self.shape_radius > 0.0) {
            return bad("shape_radius", "must be positive".into());
        }
        match self.style {
            Style::Noisy { amplitude } if !(0.0..=1.0).contains(&amplitude) => {
                return bad("style.amplitude", format!("{amplitude} outside [0, 1]"));
            }
            Style::Scream { cells } if cells < 2 => {
                return bad("style.cells", "need at least 2 lattice cells".into());
            }
            _ => {}
        }
        self.center_range().map(|_| ())
    }

    /// Largest corner distance from the center, in grid units.
    fn corner_reach(&self) -> f64 {
        if self.keypoints == 1 {
            0.0
        } else {
            self.shape_radius * JITTER.1 / self.scale()
        }
    }

    /// Continuous center range `((h_lo, h_hi), (w_lo, w_hi))` keeping every
    /// keypoint inside the area.
    fn center_range(&self) -> Result<((f64, f64), (f64, f64))> {
        let reach = self.corner_reach();
        let shrink = |r: [usize; 2]| (r[0] as f64 + reach, r[1] as f64 - reach);
        let (h, w) = (shrink(self.area.h), shrink(self.area.w));
        if h.0 > h.1 || w.0 > w.1 {
            return Err(Error::Config(format!(
                "dataset.area: shape corners ({reach:.2} cells) do not fit inside {:?}",
                self.area
            )));
        }
        Ok((h, w))
    }

    fn rng(&self, id: u64, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id.wrapping_mul(STREAMS_PER_SAMPLE).wrapping_add(purpose));
        rng
    }

    /// Center of sample `id` in grid units, uniform over the allowed range.
    pub fn sample_position(&self, id: u64) -> Result<(f64, f64)> {
        let ((h0, h1), (w0, w1)) = self.center_range()?;
        let mut rng = self.rng(id, STREAM_POSITION);
        let mut draw = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        Ok((draw(h0, h1), draw(w0, w1)))
    }
}

/// One rendered image with its keypoints in grid units.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: String,
    /// `H×W×3` RGB bytes.
    pub image: Vec<u8>,
    pub keypoints: KeypointSet,
}

struct Shape {
    kind: ShapeKind,
    center: (f64, f64),
    radius: f64,
    angle: f64,
    aspect: f64,
}

impl Shape {
    /// Corner positions in pixel units, in a fixed order.
    fn corners(&self) -> Vec<(f64, f64)> {
        let (n, phase) = match self.kind {
            ShapeKind::Triangle => (3, -std::f64::consts::FRAC_PI_2),
            ShapeKind::Square => (4, -3.0 * std::f64::consts::FRAC_PI_4),
            ShapeKind::Ellipse => return Vec::new(),
        };
        (0..n)
            .map(|j| {
                let a = self.angle + phase + std::f64::consts::TAU * j as f64 / n as f64;
                (self.center.0 + self.radius * a.sin(), self.center.1 + self.radius * a.cos())
            })
            .collect()
    }

    fn contains(&self, p: (f64, f64)) -> bool {
        let (dy, dx) = (p.0 - self.center.0, p.1 - self.center.1);
        let (s, c) = self.angle.sin_cos();
        // Rotate into the shape frame.
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => {
                let (a, b) = (self.radius, self.radius * self.aspect);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            ShapeKind::Square => {
                let half = self.radius / std::f64::consts::SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => {
                let c = self.corners();
                let sign = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
                let d = [sign(c[0], c[1]), sign(c[1], c[2]), sign(c[2], c[0])];
                d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0)
            }
        }
    }
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Renders the sample `id` with its shape centered at `center` (grid units).
pub fn render_sample(spec: &DatasetSpec, center: (f64, f64), id: u64) -> Result<Sample> {
    let ((h0, h1), (w0, w1)) = spec.center_range()?;
    if !(center.0 >= h0 && center.0 <= h1 && center.1 >= w0 && center.1 <= w1) {
        return Err(Error::invalid(
            "render_sample",
            format!("center {center:?} outside allowed range h {h0}..={h1}, w {w0}..={w1}"),
        ));
    }
    let scale = spec.scale();
    let mut rng = spec.rng(id, STREAM_SHAPE);
    let radius = spec.shape_radius * rng.random_range(JITTER.0..=JITTER.1);
    let angle = match spec.shape {
        ShapeKind::Ellipse => rng.random_range(0.0..std::f64::consts::PI),
        _ => rng.random_range(-MAX_TILT..=MAX_TILT),
    };
    let aspect = rng.random_range(0.6..=1.0);
    let shape = Shape {
        kind: spec.shape,
        center: (center.0 * scale, center.1 * scale),
        radius,
        angle,
        aspect,
    };
    let background: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut foreground: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    for _ in 0..64 {
        if (luminance(foreground) - luminance(background)).abs() >= 0.3 {
            break;
        }
        foreground = [rng.random(), rng.random(), rng.random()];
    }
    if (luminance(foreground) - luminance(background)).abs() < 0.3 {
        foreground = background.map(|v| 1.0 - v);
    }

    let size = spec.image_size;
    let mut noise = spec.rng(id, STREAM_NOISE);
    let lattice: Vec<[f64; 3]> = match spec.style {
        Style::Scream { cells } => (0..(cells + 1) * (cells + 1))
            .map(|_| [noise.random(), noise.random(), noise.random()])
            .collect(),
        _ => Vec::new(),
    };
    let mut image = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let mut coverage = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if shape.contains((r as f64 + oy, c as f64 + ox)) {
                    coverage += 0.25;
                }
            }
            let bg = match spec.style {
                Style::Color => background,
                Style::Noisy { amplitude } => {
                    let n: [f64; 3] = [noise.random(), noise.random(), noise.random()];
                    [0, 1, 2].map(|i| (1.0 - amplitude) * background[i] + amplitude * n[i])
                }
                Style::Scream { cells } => {
                    let fy = (r as f64 + 0.5) / size as f64 * cells as f64;
                    let fx = (c as f64 + 0.5) / size as f64 * cells as f64;
                    let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
                    let at = |y: usize, x: usize| lattice[y * (cells + 1) + x];
                    [0, 1, 2].map(|i| {
                        let top = at(iy, ix)[i] * (1.0 - tx) + at(iy, ix + 1)[i] * tx;
                        let bottom = at(iy + 1, ix)[i] * (1.0 - tx) + at(iy + 1, ix + 1)[i] * tx;
                        top * (1.0 - ty) + bottom * ty
                    })
                }
            };
            for i in 0..3 {
                let v = coverage * foreground[i] + (1.0 - coverage) * bg[i];
                image.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }

    let points = if spec.keypoints == 1 {
        vec![center]
    } else {
        shape
            .corners()
            .into_iter()
            .map(|(y, x)| (y / scale, x / scale))
            .collect()
    };
    Ok(Sample {
        id,
        domain: spec.domain.clone(),
        image,
        keypoints: KeypointSet::new(points),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub image_size: usize,
    pub keypoints: usize,
    /// Generation recipe, when known.
    pub spec: Option<DatasetSpec>,
    pub samples: Vec<Sample>,
}

/// Renders `spec.count` samples with ids `0..count`, split over `threads`
/// workers. The result does not depend on `threads`.
pub fn make_dataset(spec: &DatasetSpec, threads: usize) -> Result<Dataset> {
    spec.validate()?;
    let render = |id: u64| render_sample(spec, spec.sample_position(id)?, id);
    let n = spec.count as u64;
    let threads = threads.clamp(1, spec.count);
    let samples = if threads == 1 {
        (0..n).map(render).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = n.div_ceil(threads as u64);
        let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads as u64)
                .map(|t| {
                    let render = &render;
                    s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(render).collect())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(spec.count);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(Dataset {
        grid: spec.grid(),
        image_size: spec.image_size,
        keypoints: spec.keypoints,
        spec: Some(spec.clone()),
        samples,
    })
}

const ANNOTATIONS: &str = "annotations.csv";
const IMAGES: &str = "images";
const SPEC: &str = "spec.json";

fn image_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(IMAGES).join(format!("{id}.png"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `images/<id>.png`, `annotations.csv` and `spec.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(IMAGES))?;
        for s in &self.samples {
            let file = BufWriter::new(File::create(image_path(dir, s.id))?);
            let mut enc = png::Encoder::new(file, self.image_size as u32, self.image_size as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&s.image)?;
            w.finish()?;
        }

        let mut text = format!(
            "# keypoints={} grid={}x{}\n",
            self.keypoints, self.grid.height, self.grid.width
        );
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        for k in 0..self.keypoints {
            header.push(format!("k{k}_h"));
            header.push(format!("k{k}_w"));
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.id.to_string()];
            for (&(h, wd), &vis) in s.keypoints.points.iter().zip(&s.keypoints.visible) {
                if vis {
                    row.push(h.to_string());
                    row.push(wd.to_string());
                } else {
                    row.extend([String::new(), String::new()]);
                }
            }
            w.write_record(&row)?;
        }
        let body = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        text.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
        fs::write(dir.join(ANNOTATIONS), text)?;

        if let Some(spec) = &self.spec {
            fs::write(dir.join(SPEC), serde_json::to_string_pretty(spec)?)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::save`] or laid out the same way.
    pub fn load(dir: &Path) -> Result<Self> {
        let index = dir.join(ANNOTATIONS);
        let text = fs::read_to_string(&index).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(index.clone()),
            _ => Error::Io(e),
        })?;
        let annotation = |line: u64, msg: String| Error::Annotation {
            path: index.clone(),
            line,
            msg,
        };
        let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let (keypoints, grid) = parse_index_comment(first).ok_or_else(|| {
            annotation(1, "expected `# keypoints=K grid=HxW` as the first line".into())
        })?;

        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_reader(rest.as_bytes());
        let header = reader.headers()?.clone();
        let expected_cols = 1 + 2 * keypoints;
        if header.len() != expected_cols || &header[0] != "id" {
            return Err(annotation(
                2,
                format!("header needs id plus {keypoints} (h, w) pairs, got {} columns", header.len()),
            ));
        }

        let spec = match fs::read_to_string(dir.join(SPEC)) {
            Ok(s) => Some(serde_json::from_str::<DatasetSpec>(&s)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let domain = spec.as_ref().map_or_else(String::new, |s| s.domain.clone());

        let mut samples = Vec::new();
        let mut image_size = spec.as_ref().map_or(0, |s| s.image_size);
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line()) + 1;
            if record.len() != expected_cols {
                return Err(annotation(line, format!("expected {expected_cols} fields, got {}", record.len())));
            }
            let id: u64 = record[0]
                .trim()
                .parse()
                .map_err(|_| annotation(line, format!("bad id {:?}", &record[0])))?;
            let mut points = Vec::with_capacity(keypoints);
            let mut visible = Vec::with_capacity(keypoints);
            for k in 0..keypoints {
                let (hs, ws) = (record[1 + 2 * k].trim(), record[2 + 2 * k].trim());
                if hs.is_empty() && ws.is_empty() {
                    points.push((0.0, 0.0));
                    visible.push(false);
                    continue;
                }
                let parse = |s: &str| -> Result<f64> {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| annotation(line, format!("keypoint {k}: bad coordinate {s:?}")))
                };
                points.push((parse(hs)?, parse(ws)?));
                visible.push(true);
            }
            let kp = KeypointSet { points, visible };
            kp.validate(grid).map_err(|e| annotation(line, e.to_string()))?;

            let path = image_path(dir, id);
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            let (size, image) = read_png(&path)?;
            if image_size == 0 {
                image_size = size;
            } else if size != image_size {
                return Err(annotation(line, format!("image is {size}px, expected {image_size}px")));
            }
            samples.push(Sample {
                id,
                domain: domain.clone(),
                image,
                keypoints: kp,
            });
        }
        if samples.is_empty() {
            log::warn!("{} lists no samples", index.display());
        }
        Ok(Self {
            grid,
            image_size,
            keypoints,
            spec,
            samples,
        })
    }

    /// Images of the given samples as a `B×3×H×W` tensor in `[0, 1]`.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let s = self.image_size;
        let plane = s * s;
        let mut data = vec![T::zero(); indices.len() * 3 * plane];
        let inv = T::from_f64(1.0 / 255.0);
        for (b, &i) in indices.iter().enumerate() {
            let img = &self.samples[i].image;
            let out = &mut data[b * 3 * plane..(b + 1) * 3 * plane];
            for (p, px) in img.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    out[ch * plane + p] = T::from_f64(px[ch] as f64) * inv;
                }
            }
        }
        Tensor::new(&[indices.len(), 3, s, s], data).expect("sized")
    }

    pub fn labeled_batch<T: Scalar>(&self, indices: &[usize]) -> LabeledBatch<T> {
        LabeledBatch {
            ids: indices.iter().map(|&i| self.samples[i].id).collect(),
            images: self.images(indices),
            keypoints: indices.iter().map(|&i| self.samples[i].keypoints.clone()).collect(),
        }
    }

    /// A batch whose labels cannot be read through the training API.
    pub fn unlabeled_batch<T: Scalar>(&self, indices: &[usize]) -> UnlabeledBatch<T> {
        UnlabeledBatch {
            ids: indices.iter().map(|&i| self.samples[i].id).collect(),
            images: self.images(indices),
        }
    }

    /// First `n` samples and the rest, as two datasets.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.samples.len());
        let part = |samples: &[Sample]| Dataset {
            grid: self.grid,
            image_size: self.image_size,
            keypoints: self.keypoints,
            spec: self.spec.clone(),
            samples: samples.to_vec(),
        };
        (part(&self.samples[..n]), part(&self.samples[n..]))
    }
}

fn parse_index_comment(line: &str) -> Option<(usize, Grid)> {
    let body = line.trim().strip_prefix('#')?;
    let (mut k, mut grid) = (None, None);
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("keypoints=") {
            k = v.parse().ok().filter(|&k: &usize| k > 0);
        } else if let Some(v) = tok.strip_prefix("grid=") {
            let (h, w) = v.split_once('x')?;
            grid = Some(Grid::new(h.parse().ok()?, w.parse().ok()?));
        }
    }
    Some((k?, grid?))
}

fn read_png(path: &Path) -> Result<(usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::invalid(
            "load_dataset",
            format!("{}: expected 8-bit RGB", path.display()),
        ));
    }
    if info.width != info.height {
        return Err(Error::invalid("load_dataset", format!("{}: image is not square", path.display())));
    }
    let size = info.width as usize;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(size * size * 3)];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    Ok((size, buf))
}

/// Source batch: images with their keypoints.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub ids: Vec<u64>,
    pub images: Tensor<T>,
    pub keypoints: Vec<KeypointSet>,
}

/// Target batch: images only.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch<T> {
    pub ids: Vec<u64>,
    pub images: Tensor<T>,
}

impl<T> UnlabeledBatch<T> {
    /// Always an error: target labels never reach the training path.
    pub fn labels(&self) -> Result<&[KeypointSet]> {
        Err(Error::LabelsWithheld)
    }
}

/// Sample indices of one epoch, shuffled by `epoch_seed`, in full batches.
pub fn batch_iter(len: usize, batch_size: usize, epoch_seed: u64) -> Result<impl Iterator<Item = Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_iter", "batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    let batches = len / batch_size;
    Ok((0..batches).map(move |b| order[b * batch_size..(b + 1) * batch_size].to_vec()))
}

/// Endless sequence of full batches; epoch `e` is shuffled with a seed derived
/// from `(seed, e)`.
#[derive(Clone, Debug)]
pub struct BatchStream {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || len < batch_size {
            return Err(Error::invalid(
                "batch_stream",
                format!("cannot draw batches of {batch_size} from {len} samples"),
            ));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            queue: Default::default(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
            self.queue = batch_iter(self.len, self.batch_size, seed)
                .expect("validated batch size")
                .collect();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("at least one batch per epoch")
    }
}
