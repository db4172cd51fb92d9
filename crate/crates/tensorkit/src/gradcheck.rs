//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Mode, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Number of trainable scalars compared.
    pub samples: usize,
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { samples: 100, epsilon: 1e-4, mode: Mode::Train, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Samples skipped because the perturbation moved a relu input across zero.
    pub excluded: usize,
    /// Parameter name and element of the worst sample.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of the scalar built by `loss` against central
/// differences with step `epsilon`, for a random sample of trainable scalars.
///
/// The relative error of a sample is `|analytic - numeric| / (|numeric| + 1e-12)`.
/// A sample is excluded (and another one drawn) when either perturbed
/// evaluation changes the sign pattern of any relu input, since the
/// derivative is not defined across a kink.
pub fn grad_check<F>(store: &ParamStore<f64>, cfg: GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(cfg.mode);
    g.track_kinks(true);
    let out = loss(&mut g, store)?;
    let signature = g.kink_signature();
    let grads = g.backward(out)?;

    let trainable: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
        .collect();
    if trainable.is_empty() {
        return Err(TensorError::Usage("grad_check on a store without trainable parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order = sample(&mut rng, trainable.len(), trainable.len());

    let eval = |s: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::inference(cfg.mode);
        g.track_kinks(true);
        let v = loss(&mut g, s)?;
        Ok((g.value(v)[0], g.kink_signature()))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded: 0, worst: None };
    for k in order.iter() {
        if report.checked >= cfg.samples {
            break;
        }
        let (id, i) = trainable[k];
        let orig = work.get(id).value[i];
        work.get_mut(id).value[i] = orig + cfg.epsilon;
        let (fp, sp) = eval(&work)?;
        work.get_mut(id).value[i] = orig - cfg.epsilon;
        let (fm, sm) = eval(&work)?;
        work.get_mut(id).value[i] = orig;
        if sp != signature || sm != signature {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.epsilon);
        let analytic = grads.param(id).map_or(0.0, |g| g[i]);
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-12);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((store.get(id).name.clone(), i));
        }
    }
    Ok(report)
}
