//! Patch-averaged evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use crate::data::{crop, hflip, sample_offsets, PatchSpec};
use crate::error::{Error, Result};
use crate::metrics::{plcc, srocc};
use crate::model::Model;
use crate::par;
use crate::session::Session;
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub plcc: f64,
    pub srocc: f64,
    pub predictions: Vec<f64>,
}

/// Rebuild a model from a checkpoint, rejecting mismatched tensors.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::new(&ckpt.config.model, ckpt.config.seed.unwrap_or(0))?;
    store.load(&ckpt.params)?;
    Ok((model, store))
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 2);
    rng
}

/// Mean dropout-free prediction over `n_patch` crops. Crops that repeat an
/// earlier offset reuse its prediction; the mean runs over all `n_patch`
/// values in sampling order.
fn patch_mean(
    model: &Model,
    store: &ParamStore,
    image: &Tensor,
    spec: &PatchSpec,
    rng: &mut ChaCha8Rng,
    mirrored: bool,
) -> Result<f64> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("evaluate (expected [c, h, w])", s, &[0, 0, 0]));
    }
    let offsets = sample_offsets(s[1], s[2], spec, rng)?;
    let mut unique: Vec<(usize, usize)> = Vec::new();
    let slot: Vec<usize> = offsets
        .iter()
        .map(|o| match unique.iter().position(|u| u == o) {
            Some(p) => p,
            None => {
                unique.push(*o);
                unique.len() - 1
            }
        })
        .collect();
    let crops = unique
        .iter()
        .map(|&(y, x)| {
            let c = crop(image, y, x, spec.edge)?;
            Ok(if mirrored { hflip(&c) } else { c })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sess = Session::new(store, false);
    let x = sess.constant(Tensor::stack(&crops)?);
    let out = model.forward(&mut sess, x, None)?;
    let q = sess.tape.value(out.scores).data();
    Ok(slot.iter().map(|&i| q[i]).sum::<f64>() / slot.len() as f64)
}

/// Per-image scores, computed in parallel over images.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    par::map_range(images.len(), |i| {
        patch_mean(model, store, &images[i], spec, &mut image_rng(seed, i), false)
    })
    .into_iter()
    .collect()
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    scores: &[f64],
    spec: &PatchSpec,
    seed: u64,
) -> Result<EvalReport> {
    let predictions = predict(model, store, images, spec, seed)?;
    Ok(EvalReport {
        plcc: plcc(&predictions, scores)?,
        srocc: srocc(&predictions, scores)?,
        predictions,
    })
}

/// Mean `|score(I) − score(τ(I))|`, with both sides using the same crops.
pub fn flip_discrepancy(
    model: &Model,
    store: &ParamStore,
    images: &[Tensor],
    spec: &PatchSpec,
    seed: u64,
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    let gaps = par::map_range(images.len(), |i| -> Result<f64> {
        let a = patch_mean(model, store, &images[i], spec, &mut image_rng(seed, i), false)?;
        let b = patch_mean(model, store, &images[i], spec, &mut image_rng(seed, i), true)?;
        Ok((a - b).abs())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Score a single image.
pub fn score_image(model: &Model, store: &ParamStore, image: &Tensor, spec: &PatchSpec, seed: u64) -> Result<f64> {
    patch_mean(model, store, image, spec, &mut image_rng(seed, 0), false)
}
