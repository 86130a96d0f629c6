//! Procedural source images and graded distortions.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, Record};
use super::ppm;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distortion {
    Blur,
    Noise,
    Quantization,
    Contrast,
}

impl Distortion {
    pub const ALL: [Distortion; 4] = [
        Distortion::Blur,
        Distortion::Noise,
        Distortion::Quantization,
        Distortion::Contrast,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::Noise => "noise",
            Distortion::Quantization => "quant",
            Distortion::Contrast => "contrast",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }

    /// Score offset reached at the strongest level.
    fn calibration(self) -> f64 {
        match self {
            Distortion::Blur => 0.02,
            Distortion::Noise => -0.01,
            Distortion::Quantization => 0.01,
            Distortion::Contrast => -0.02,
        }
    }

    /// Apply this distortion at relative strength `t ∈ [0, 1]`.
    pub fn apply<R: Rng>(self, image: &Tensor, t: f64, rng: &mut R) -> Tensor {
        if t <= 0.0 {
            return image.clone();
        }
        let mut out = image.clone();
        match self {
            Distortion::Blur => gaussian_blur(&mut out, 2.5 * t),
            Distortion::Noise => {
                let normal = Normal::new(0.0, 0.2 * t).expect("positive deviation");
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v + normal.sample(rng)).clamp(0.0, 1.0));
            }
            Distortion::Quantization => {
                let steps = 2f64.powf(1.0 + 6.0 * (1.0 - t)).round().max(2.0) - 1.0;
                out.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = (*v * steps).round() / steps);
            }
            Distortion::Contrast => {
                let c = 1.0 - 0.8 * t;
                let mean = out.data().iter().sum::<f64>() / out.len() as f64;
                out.data_mut().iter_mut().for_each(|v| *v = mean + c * (*v - mean));
            }
        }
        out
    }
}

fn gaussian_blur(image: &mut Tensor, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= z);
    let s = image.shape().to_vec();
    let (h, w) = (s[1] as isize, s[2] as isize);
    let clamp = |v: isize, n: isize| v.clamp(0, n - 1) as usize;
    for plane in image.data_mut().chunks_mut((h * w) as usize) {
        let src = plane.to_vec();
        let mut tmp = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * src[(y * w) as usize + clamp(x + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * tmp[clamp(y + k as isize - radius, h) * w as usize + x as usize])
                    .sum();
            }
        }
    }
}

/// Smooth two-colour gradient with a few flat shapes and fine texture.
pub fn render_source<R: Rng>(size: usize, rng: &mut R) -> Tensor {
    let n = size as f64;
    let c0: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let c1: [f64; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());

    struct Shape {
        circle: bool,
        cx: f64,
        cy: f64,
        r: f64,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.gen_range(2..=4))
        .map(|_| Shape {
            circle: rng.gen_bool(0.5),
            cx: rng.gen_range(0.0..n),
            cy: rng.gen_range(0.0..n),
            r: rng.gen_range(0.12..0.3) * n,
            color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
        })
        .collect();
    let freq = rng.gen_range(0.6..1.4);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx - n / 2.0) * dx + (fy - n / 2.0) * dy) / n + 0.5).clamp(0.0, 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
            for s in &shapes {
                let inside = if s.circle {
                    (fx - s.cx).powi(2) + (fy - s.cy).powi(2) <= s.r * s.r
                } else {
                    (fx - s.cx).abs() <= s.r && (fy - s.cy).abs() <= 0.6 * s.r
                };
                if inside {
                    px = s.color;
                }
            }
            let texture = 0.06 * (freq * fx + phase).sin() * (freq * fy - phase).cos();
            for c in 0..3 {
                data[c * size * size + y * size + x] = (px[c] + texture).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("consistent image shape")
}

/// Subjective score for distortion level `level` out of `levels`.
/// Level 0 is undistorted and scores `1 − 1/(levels+1)` for every type.
pub fn score(kind: Distortion, level: usize, levels: usize) -> f64 {
    1.0 - (level + 1) as f64 / (levels + 1) as f64 + kind.calibration() * strength(level, levels)
}

fn strength(level: usize, levels: usize) -> f64 {
    if levels <= 1 {
        0.0
    } else {
        level as f64 / (levels - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub sources: usize,
    pub levels: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sources: 10,
            levels: 5,
            size: 32,
            seed: 0,
        }
    }
}

const STREAM_SOURCE: u64 = 0;
const STREAM_DISTORT: u64 = 1;

fn stream(purpose: u64, source: usize, kind: usize, level: usize) -> u64 {
    (purpose << 56) | ((source as u64) << 24) | ((kind as u64) << 16) | level as u64
}

fn seeded(seed: u64, stream_id: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Render one record's image in memory.
pub fn render(cfg: &SynthConfig, source: usize, kind: Distortion, level: usize) -> Tensor {
    let src = render_source(cfg.size, &mut seeded(cfg.seed, stream(STREAM_SOURCE, source, 0, 0)));
    let k = Distortion::ALL.iter().position(|&d| d == kind).unwrap_or(0);
    let mut rng = seeded(cfg.seed, stream(STREAM_DISTORT, source, k, level));
    kind.apply(&src, strength(level, cfg.levels), &mut rng)
}

/// Render `sources × 4 × levels` images into `out_dir` and write
/// `manifest.csv` next to them.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if cfg.sources == 0 || cfg.levels == 0 {
        return Err(Error::Config("source count and level count must be at least 1".into()));
    }
    if cfg.size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut jobs = Vec::new();
    for source in 0..cfg.sources {
        for kind in Distortion::ALL {
            for level in 0..cfg.levels {
                jobs.push((source, kind, level));
            }
        }
    }
    let records = par::map(&jobs, |&(source, kind, level)| -> Result<Record> {
        let name = format!("src{source:03}_{}_{level}.ppm", kind.tag());
        ppm::write(out_dir.join(&name), &render(cfg, source, kind, level))?;
        Ok(Record {
            path: name,
            score: score(kind, level, cfg.levels),
            kind: kind.tag().into(),
            level,
            source_id: source,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest::new(out_dir, records)?;
    manifest.write(out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
