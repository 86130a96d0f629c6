//! Training loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::optim::Sgd;
use crate::data::{crop, hflip, sample_offsets};
use crate::error::{Error, Result};
use crate::heads::losses::{tape_composite, tape_quality_loss, tape_ranking_loss, tape_self_consistency};
use crate::heads::LossWeights;
use crate::metrics::{plcc, srocc};
use crate::model::Model;
use crate::session::Session;
use crate::tensor::{ParamStore, Tensor, Var};

/// Loss graph of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub composite: Var,
    pub lq: Var,
    pub lrr: Var,
    pub lsc: Option<Var>,
    pub predictions: Var,
    /// Number of model forward passes recorded (1, or 2 with the mirror).
    pub passes: usize,
}

/// Build the composite objective for `images: [b, c, h, w]` with scores
/// `s`. The mirrored pass runs only when `θ3 > 0`.
pub fn batch_objective(
    model: &Model,
    sess: &mut Session<'_>,
    images: &Tensor,
    s: &[f64],
    w: &LossWeights,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Objective> {
    let x = sess.constant(images.clone());
    let out = model.forward(sess, x, rng.as_deref_mut())?;
    let lq = tape_quality_loss(&mut sess.tape, out.scores, s)?;
    let lrr = tape_ranking_loss(&mut sess.tape, out.scores, s)?;
    let (lsc, passes) = if w.theta3 > 0.0 {
        let xf = sess.constant(hflip(images));
        let flip = model.forward(sess, xf, rng)?;
        let lrr_flip = tape_ranking_loss(&mut sess.tape, flip.scores, s)?;
        let lsc = tape_self_consistency(
            &mut sess.tape,
            out.conv,
            out.atten,
            flip.conv,
            flip.atten,
            lrr,
            lrr_flip,
            w.theta1,
        )?;
        (Some(lsc), 2)
    } else {
        (None, 1)
    };
    let composite = tape_composite(&mut sess.tape, lq, lrr, lsc, w)?;
    Ok(Objective {
        composite,
        lq,
        lrr,
        lsc,
        predictions: out.scores,
        passes,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lq: f64,
    pub lrr: f64,
    pub lsc: f64,
    pub composite: f64,
    pub train_srocc: f64,
    pub train_plcc: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,lq,lrr,lsc,composite,train_srocc,train_plcc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lq, self.lrr, self.lsc, self.composite, self.train_srocc, self.train_plcc
        )
    }
}

pub fn write_log(path: impl AsRef<Path>, logs: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = format!("{}\n", EpochLog::HEADER);
    for l in logs {
        text.push_str(&l.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Stack `[c, h, w]` tensors into `[n, c, h, w]`.
pub fn stack_images(items: &[Tensor]) -> Result<Tensor> {
    Tensor::stack(items)
}

pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    store: ParamStore,
    opt: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
    images: Vec<Tensor>,
    scores: Vec<f64>,
    forward_passes: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, images: Vec<Tensor>, scores: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.require_seed()?;
        let (model, store) = Model::new(&cfg.model, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self::assemble(cfg, model, store, rng, 0, images, scores)
    }

    /// Resume from a checkpoint; momentum buffers restart at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint, images: Vec<Tensor>, scores: Vec<f64>) -> Result<Self> {
        let cfg = &ckpt.config;
        cfg.validate()?;
        let (model, mut store) = Model::new(&cfg.model, cfg.require_seed()?)?;
        store.load(&ckpt.params)?;
        Self::assemble(cfg, model, store, ckpt.rng.restore(), ckpt.epoch, images, scores)
    }

    fn assemble(
        cfg: &RunConfig,
        model: Model,
        store: ParamStore,
        rng: ChaCha8Rng,
        epoch: usize,
        images: Vec<Tensor>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if images.is_empty() || images.len() != scores.len() {
            return Err(Error::Config(format!(
                "training set needs matching non-empty images and scores ({} vs {})",
                images.len(),
                scores.len()
            )));
        }
        for img in &images {
            let s = img.shape();
            if s.len() != 3 || s[0] != cfg.model.in_channels {
                return Err(Error::shape("training image", s, &[cfg.model.in_channels, 0, 0]));
            }
            cfg.patch.validate_for(s[1], s[2])?;
        }
        let opt = Sgd::new(&store, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            rng,
            epoch,
            images,
            scores,
            forward_passes: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Model forward passes executed by this trainer.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Learning rate for the upcoming epoch.
    pub fn current_lr(&self) -> f64 {
        self.cfg.lr / self.cfg.lr_decay.powi(self.epoch as i32)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.cfg, self.epoch, &self.rng)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.current_lr();
        let spec = self.cfg.patch;
        let mut items = Vec::with_capacity(self.images.len() * spec.n_patch);
        for (i, img) in self.images.iter().enumerate() {
            let s = img.shape();
            for (y, x) in sample_offsets(s[1], s[2], &spec, &mut self.rng)? {
                items.push((i, y, x));
            }
        }
        items.shuffle(&mut self.rng);

        let mut pred_sum = vec![0.0; self.images.len()];
        let mut pred_count = vec![0usize; self.images.len()];
        let (mut lq, mut lrr, mut lsc, mut comp) = (0.0, 0.0, 0.0, 0.0);
        let batches = items.chunks(self.cfg.batch_size).count();
        for (b, chunk) in items.chunks(self.cfg.batch_size).enumerate() {
            let crops = chunk
                .iter()
                .map(|&(i, y, x)| crop(&self.images[i], y, x, spec.edge))
                .collect::<Result<Vec<_>>>()?;
            let batch = stack_images(&crops)?;
            let s: Vec<f64> = chunk.iter().map(|&(i, _, _)| self.scores[i]).collect();

            let mut sess = Session::new(&self.store, true);
            let obj = batch_objective(&self.model, &mut sess, &batch, &s, &self.cfg.loss, Some(&mut self.rng))
                .map_err(|e| match e {
                    Error::TrainingAborted(m) => {
                        Error::TrainingAborted(format!("epoch {} batch {b}: {m}", self.epoch + 1))
                    }
                    other => other,
                })?;
            self.forward_passes += obj.passes;
            let t = &sess.tape;
            lq += t.value(obj.lq).item();
            lrr += t.value(obj.lrr).item();
            lsc += obj.lsc.map_or(0.0, |v| t.value(v).item());
            comp += t.value(obj.composite).item();
            for (&(i, _, _), q) in chunk.iter().zip(t.value(obj.predictions).data()) {
                pred_sum[i] += q;
                pred_count[i] += 1;
            }
            let grads = sess.backward(obj.composite)?;
            drop(sess);
            self.opt.step(&mut self.store, &grads, lr)?;
        }
        self.epoch += 1;

        let preds: Vec<f64> = pred_sum.iter().zip(&pred_count).map(|(s, &c)| s / c as f64).collect();
        let n = batches as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            lq: lq / n,
            lrr: lrr / n,
            lsc: lsc / n,
            composite: comp / n,
            train_srocc: srocc(&preds, &self.scores).unwrap_or(f64::NAN),
            train_plcc: plcc(&preds, &self.scores).unwrap_or(f64::NAN),
        })
    }

    /// Run until the configured epoch count is reached.
    pub fn train(&mut self) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            logs.push(self.run_epoch()?);
        }
        Ok(logs)
    }
}
