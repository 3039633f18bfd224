//! Datasets, synthetic distribution shifts and partner sampling.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::format::{self, NamedTensor};
use crate::tensor::Tensor;

/// Labeled images, `[N, C, H, W]` with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::input(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::input(format!("label {l} outside [0, {classes})"))),
            None => Ok(()),
        }
    }

    pub fn check_pixel_range(&self) -> Result<()> {
        if self.images.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(())
        } else {
            Err(Error::input("pixel values outside [0, 1]"))
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new(
                "images",
                self.images.shape().to_vec(),
                self.images.data().to_vec(),
            ),
            NamedTensor::new(
                "labels",
                vec![self.labels.len()],
                self.labels.iter().map(|&l| l as f64).collect(),
            ),
        ]
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let images = format::find(tensors, "images")?;
        let labels = format::find(tensors, "labels")?;
        if images.dims.len() != 4 {
            return Err(Error::format(format!(
                "images tensor has dims {:?}, expected 4",
                images.dims
            )));
        }
        if labels.dims != [images.dims[0]] {
            return Err(Error::format(format!(
                "labels dims {:?} do not match {} images",
                labels.dims, images.dims[0]
            )));
        }
        let labels = labels
            .values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::format(format!("label {v} is not a u32")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images: Tensor::new(images.dims.clone(), images.values.clone())?,
            labels,
        })
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    format::write_file(path, &ds.to_tensors())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_tensors(&format::read_file(path)?)
}

/// Uniform sample of `b` distinct indices, with the corresponding images.
pub fn sample_partners(ds: &Dataset, rng: &mut impl Rng, b: usize) -> Result<(Tensor, Vec<usize>)> {
    if b > ds.len() {
        return Err(Error::input(format!(
            "cannot draw {b} distinct partners from {} images",
            ds.len()
        )));
    }
    let idx = index::sample(rng, ds.len(), b).into_vec();
    Ok((ds.images.select_rows(&idx), idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise
                | CorruptionKind::ShotNoise
                | CorruptionKind::ImpulseNoise
        )
    }

    /// The severity parameter table, indexed by `severity - 1`.
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            // noise standard deviation
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            // photon count scale: x ~ Poisson(x·c) / c
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            // fraction of pixels set to 0 or 1
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            // additive offset
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            // scale of deviations from the image mean
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            // block edge length in pixels
            CorruptionKind::Pixelate => [2.0, 3.0, 4.0, 5.0, 6.0],
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown corruption kind {s:?}")))
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1–5; 0 is accepted as an identity level for debugging.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::config(format!("severity {severity} outside 0..=5")));
        }
        Ok(CorruptionSpec {
            kind,
            severity,
            seed,
        })
    }

    pub fn parameter(&self) -> Option<f64> {
        (self.severity > 0).then(|| self.kind.severity_table()[self.severity as usize - 1])
    }
}

/// Applies a corruption to `[N, C, H, W]` images, clipping to `[0, 1]`.
pub fn corrupt(images: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::input("corruption needs [N, C, H, W] images"));
    }
    if spec.severity > 5 {
        return Err(Error::config(format!(
            "severity {} outside 0..=5",
            spec.severity
        )));
    }
    let Some(p) = spec.parameter() else {
        return Ok(images.clone());
    };
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = images.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, p).expect("positive sigma");
            for v in out.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        CorruptionKind::ShotNoise => {
            for v in out.data_mut() {
                let lambda = v.clamp(0.0, 1.0) * p;
                *v = if lambda > 0.0 {
                    Poisson::new(lambda)
                        .expect("positive rate")
                        .sample(&mut rng)
                        / p
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            for v in out.data_mut() {
                if rng.random::<f64>() < p {
                    *v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::Brightness => {
            for v in out.data_mut() {
                *v += p;
            }
        }
        CorruptionKind::Contrast => {
            for i in 0..n {
                let row = out.row_mut(i);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for v in row {
                    *v = (*v - mean) * p + mean;
                }
            }
        }
        CorruptionKind::Pixelate => {
            let k = p as usize;
            for i in 0..n {
                let row = out.row_mut(i);
                for ch in 0..c {
                    let plane = &mut row[ch * h * w..(ch + 1) * h * w];
                    for by in (0..h).step_by(k) {
                        for bx in (0..w).step_by(k) {
                            let ys = by..(by + k).min(h);
                            let xs = bx..(bx + k).min(w);
                            let count = (ys.len() * xs.len()) as f64;
                            let mut sum = 0.0;
                            for y in ys.clone() {
                                for x in xs.clone() {
                                    sum += plane[y * w + x];
                                }
                            }
                            for y in ys.clone() {
                                for x in xs.clone() {
                                    plane[y * w + x] = sum / count;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn corrupt_dataset(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    Dataset::new(corrupt(&ds.images, spec)?, ds.labels.clone())
}

/// Parameters of the procedural desk-scale image set.
///
/// Each class is a fixed binary glyph on a `grid × grid` lattice. Instances
/// paint the glyph with random foreground and background colors, so the
/// class is carried by shape rather than color.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    /// Cells per side of each class glyph.
    pub grid: usize,
    /// Maximum translation in pixels.
    pub max_shift: usize,
    /// Per-pixel noise added to every instance.
    pub pixel_noise: f64,
    /// Amplitude of per-instance, per-cell perturbation.
    pub cell_jitter: f64,
    /// Foreground/background difference per channel.
    pub contrast: f64,
}

impl SynthSpec {
    pub fn desk_default(size: usize) -> Self {
        SynthSpec {
            classes: 10,
            channels: 3,
            size,
            grid: 4,
            max_shift: 1,
            pixel_noise: 0.02,
            cell_jitter: 0.05,
            contrast: 0.3,
        }
    }
}

/// Distinct binary glyphs, none invariant under a quarter turn.
fn synth_templates(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let g = spec.grid;
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(spec.classes);
    while out.len() < spec.classes {
        let m: Vec<bool> = (0..g * g).map(|_| rng.random_bool(0.5)).collect();
        let as_f: Vec<f64> = m.iter().map(|&b| b as u8 as f64).collect();
        let rot = crate::aux_tasks::rotate_image(&as_f, 1, g, 1);
        let on = m.iter().filter(|&&b| b).count();
        if rot == as_f || on < 3 || on + 3 > g * g || out.contains(&m) {
            continue;
        }
        out.push(m);
    }
    out
}

/// Bilinear upsampling of a `[C, g, g]` grid to `[C, s, s]` with a shift.
fn render(grid: &[f64], c: usize, g: usize, s: usize, dy: f64, dx: f64) -> Vec<f64> {
    let mut out = vec![0.0; c * s * s];
    let scale = g as f64 / s as f64;
    for ch in 0..c {
        let cells = &grid[ch * g * g..(ch + 1) * g * g];
        for y in 0..s {
            let gy = ((y as f64 + 0.5 - dy) * scale - 0.5).clamp(0.0, (g - 1) as f64);
            let y0 = gy.floor() as usize;
            let y1 = (y0 + 1).min(g - 1);
            let fy = gy - y0 as f64;
            for x in 0..s {
                let gx = ((x as f64 + 0.5 - dx) * scale - 0.5).clamp(0.0, (g - 1) as f64);
                let x0 = gx.floor() as usize;
                let x1 = (x0 + 1).min(g - 1);
                let fx = gx - x0 as f64;
                let top = cells[y0 * g + x0] * (1.0 - fx) + cells[y0 * g + x1] * fx;
                let bot = cells[y1 * g + x0] * (1.0 - fx) + cells[y1 * g + x1] * fx;
                out[(ch * s + y) * s + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Generates a train and a test split from shared class templates.
pub fn synthetic_splits(
    spec: &SynthSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if spec.classes == 0 || spec.channels == 0 || spec.size == 0 || spec.grid < 2 {
        return Err(Error::config("synthetic spec has a degenerate dimension"));
    }
    if spec.classes > 1 << (spec.grid * spec.grid - 2) {
        return Err(Error::config("too many classes for the glyph grid"));
    }
    if !(0.0..=0.6).contains(&spec.contrast) || spec.cell_jitter < 0.0 || spec.pixel_noise < 0.0 {
        return Err(Error::config(
            "contrast must lie in [0, 0.6]; jitter and noise >= 0",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = synth_templates(spec, &mut rng);
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let (c, s, g) = (spec.channels, spec.size, spec.grid);
        let noise = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("positive");
        let mut data = Vec::with_capacity(n * c * s * s);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let mut grid = Vec::with_capacity(c * g * g);
            for _ in 0..c {
                let bg = rng.random_range(0.2..=0.8);
                let fg =
                    if bg + spec.contrast <= 1.0 && (bg < spec.contrast || rng.random_bool(0.5)) {
                        bg + spec.contrast
                    } else {
                        bg - spec.contrast
                    };
                for &on in &templates[class] {
                    let v = if on { fg } else { bg };
                    grid.push(
                        (v + rng.random_range(-spec.cell_jitter..=spec.cell_jitter))
                            .clamp(0.0, 1.0),
                    );
                }
            }
            let m = spec.max_shift as f64;
            let dy = rng.random_range(-m..=m);
            let dx = rng.random_range(-m..=m);
            let img = render(&grid, c, g, s, dy, dx);
            data.extend(
                img.into_iter()
                    .map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)),
            );
            labels.push(class as u32);
        }
        Dataset::new(Tensor::new(vec![n, c, s, s], data)?, labels)
    };
    let train = make(n_train, &mut rng)?;
    let test = make(n_test, &mut rng)?;
    Ok((train, test))
}
