//! Central finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::RunConfig;
use super::train::batch_objective;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par;
use crate::session::Session;
use crate::tensor::{ParamStore, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-5;
const MAX_RESAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
    /// Coordinates redrawn because a perturbation crossed a kink.
    pub resampled: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Fail with every offending parameter coordinate listed.
    pub fn check(&self, tol: f64) -> Result<()> {
        let bad: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !(e.rel_err < tol))
            .map(|e| {
                format!(
                    "{}[{}]: analytic {:.6e}, numeric {:.6e}, rel {:.3e}",
                    e.name, e.index, e.analytic, e.numeric, e.rel_err
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::GradCheck(bad.join("; ")))
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let mut sess = Session::new(store, false);
    let loss = f(&mut sess)?;
    Ok((sess.tape.value(loss).item(), sess.tape.kink_signature()))
}

/// Compare the tape gradient of the scalar built by `f` against central
/// differences at `coords` random coordinates of every parameter tensor.
/// A coordinate whose `±STEP` evaluations change the sign pattern of any
/// ReLU or absolute value is redrawn.
pub fn check_function<F>(store: &ParamStore, f: F, coords: usize, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var> + Sync,
{
    let mut sess = Session::new(store, true);
    let loss = f(&mut sess)?;
    let base_sig = sess.tape.kink_signature();
    let grads = sess.backward(loss)?;
    drop(sess);

    let ids: Vec<_> = store.ids().collect();
    let jobs: Vec<(usize, usize)> = (0..ids.len()).flat_map(|t| (0..coords).map(move |c| (t, c))).collect();
    let results = par::map(&jobs, |&(t, c)| -> Result<(GradEntry, usize)> {
        let id = ids[t];
        let len = store.get(id).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((t * coords + c) as u64);
        let mut local = store.clone();
        for attempt in 0..MAX_RESAMPLES {
            let index = rng.gen_range(0..len);
            let orig = store.get(id).data()[index];
            local.get_mut(id).data_mut()[index] = orig + STEP;
            let (plus, sig_p) = evaluate(&local, &f)?;
            local.get_mut(id).data_mut()[index] = orig - STEP;
            let (minus, sig_m) = evaluate(&local, &f)?;
            local.get_mut(id).data_mut()[index] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[index]);
            return Ok((
                GradEntry {
                    name: store.name(id).to_string(),
                    index,
                    analytic,
                    numeric,
                    rel_err: rel_err(analytic, numeric),
                },
                attempt,
            ));
        }
        Err(Error::GradCheck(format!(
            "{}: no smooth coordinate found in {MAX_RESAMPLES} draws",
            store.name(id)
        )))
    });
    let mut report = GradReport::default();
    for r in results {
        let (entry, redraws) = r?;
        report.resampled += redraws;
        report.entries.push(entry);
    }
    Ok(report)
}

/// Gradient check of the full composite loss (dropout off, mirrored pass
/// included) on a random batch.
pub fn gradcheck(cfg: &RunConfig, coords: usize, seed: u64) -> Result<GradReport> {
    cfg.model.validate()?;
    cfg.loss.validate()?;
    if coords == 0 {
        return Err(Error::Config("need at least one coordinate per tensor".into()));
    }
    let (model, mut store) = Model::new(&cfg.model, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let jitter = Normal::new(0.0, 0.05).expect("positive deviation");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += jitter.sample(&mut rng));
    }
    let (b, e, c) = (cfg.batch_size.max(4), cfg.patch.edge, cfg.model.in_channels);
    let images = Tensor::new(&[b, c, e, e], (0..b * c * e * e).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let scores: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..1.0)).collect();
    let weights = cfg.loss;
    check_function(
        &store,
        |sess| Ok(batch_objective(&model, sess, &images, &scores, &weights, None)?.composite),
        coords,
        seed,
    )
}
