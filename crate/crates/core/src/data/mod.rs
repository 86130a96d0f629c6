//! Synthetic dataset generation, image I/O, patch sampling, mirroring and
//! source-level splitting.

pub mod manifest;
pub mod ppm;
pub mod synth;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub use manifest::{DatasetManifest, Record};
pub use synth::{generate_dataset, Distortion, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub edge: usize,
    pub n_patch: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { edge: 32, n_patch: 8 }
    }
}

impl PatchSpec {
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        if self.edge == 0 || self.n_patch == 0 {
            return Err(Error::Config("patch edge and patch count must be positive".into()));
        }
        if self.edge > h || self.edge > w {
            return Err(Error::Config(format!(
                "patch edge {} exceeds image extent {h}x{w}",
                self.edge
            )));
        }
        Ok(())
    }
}

/// Top-left corners of `n_patch` uniformly random crops.
pub fn sample_offsets<R: Rng>(h: usize, w: usize, spec: &PatchSpec, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    spec.validate_for(h, w)?;
    Ok((0..spec.n_patch)
        .map(|_| (rng.gen_range(0..=h - spec.edge), rng.gen_range(0..=w - spec.edge)))
        .collect())
}

/// Square crop of a `[c, h, w]` image.
pub fn crop(image: &Tensor, top: usize, left: usize, edge: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || top + edge > s[1] || left + edge > s[2] || edge == 0 {
        return Err(Error::Config(format!(
            "crop {edge}x{edge} at ({top}, {left}) does not fit image {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = Vec::with_capacity(c * edge * edge);
    for ch in 0..c {
        for y in top..top + edge {
            let row = ch * h * w + y * w;
            data.extend_from_slice(&image.data()[row + left..row + left + edge]);
        }
    }
    Tensor::new(&[c, edge, edge], data)
}

pub fn sample_patches<R: Rng>(image: &Tensor, spec: &PatchSpec, rng: &mut R) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("sample_patches (expected [c, h, w])", s, &[0, 0, 0]));
    }
    sample_offsets(s[1], s[2], spec, rng)?
        .into_iter()
        .map(|(y, x)| crop(image, y, x, spec.edge))
        .collect()
}

/// Reverse the last (width) axis.
pub fn hflip(x: &Tensor) -> Tensor {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    out.data_mut().chunks_mut(w).for_each(<[f64]>::reverse);
    out
}

/// Partition by source id: `round(ratio · sources)` ids (at least one on
/// each side) go to the training manifest.
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut ids = manifest.source_ids();
    if ids.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 source images to split, found {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_ids = &ids[..n_train];
    Ok((
        manifest.filter_sources(|s| train_ids.contains(&s)),
        manifest.filter_sources(|s| !train_ids.contains(&s)),
    ))
}

/// Decode every image of a manifest, in record order.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<Tensor>> {
    par::map(&manifest.records, |r| ppm::read(manifest.resolve(r)))
        .into_iter()
        .collect()
}
