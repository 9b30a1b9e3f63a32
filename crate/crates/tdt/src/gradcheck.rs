//! Finite-difference verification of tape gradients.
//!
//! The checker is the independent oracle: it only ever calls the loss as a
//! black-box function of the parameter values and compares central
//! differences against whatever the backward pass reported.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::params::ParamSet;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite loss while perturbing {param}[{coord}]")]
    NonFiniteLoss { param: String, coord: usize },
    #[error("loss evaluation failed: {0}")]
    Eval(String),
}

/// Worst relative error observed for one parameter array.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Central differences of an O(1) loss carry roundoff of roughly
/// eps/(2h) ~ 1e-9 plus truncation; differences below this floor are
/// finite-difference noise, not gradient signal.
const FD_NOISE_ABS: f64 = 1e-8;

fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= FD_NOISE_ABS {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences.
///
/// `loss_and_grads` must be deterministic in the parameter values: it
/// returns the scalar loss and one gradient array per parameter in
/// ParamSet order. `samples_per_param` coordinates are checked per array
/// (all of them when 0).
pub fn grad_check<F>(
    mut loss_and_grads: F,
    params: &ParamSet,
    h: f64,
    tol: f64,
    samples_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamSet) -> Result<(f64, Option<Vec<Vec<f64>>>), String>,
{
    assert!(h > 0.0, "grad_check: step must be positive");
    let (base_loss, grads) = loss_and_grads(params).map_err(GradCheckError::Eval)?;
    if !base_loss.is_finite() {
        return Err(GradCheckError::NonFiniteLoss { param: "<unperturbed>".into(), coord: 0 });
    }
    let grads = grads.expect("grad_check: initial call must return gradients");

    let mut entries = Vec::new();
    let mut work = params.clone();
    for (pi, param) in params.iter().enumerate() {
        let n = param.data.len();
        let coords: Vec<usize> = if samples_per_param == 0 || samples_per_param >= n {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(rng);
            all.truncate(samples_per_param);
            all
        };
        let mut entry = GradCheckEntry {
            param: param.name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &c in &coords {
            let orig = param.data[c];
            work.get_mut(&param.name).data[c] = orig + h;
            let (up, _) = loss_and_grads(&work).map_err(GradCheckError::Eval)?;
            work.get_mut(&param.name).data[c] = orig - h;
            let (down, _) = loss_and_grads(&work).map_err(GradCheckError::Eval)?;
            work.get_mut(&param.name).data[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(GradCheckError::NonFiniteLoss { param: param.name.clone(), coord: c });
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[pi][c];
            let e = rel_err(analytic, numeric);
            if e > entry.max_rel_err {
                entry.max_rel_err = e;
                entry.worst_coord = c;
                entry.analytic = analytic;
                entry.numeric = numeric;
            }
        }
        entries.push(entry);
    }
    Ok(GradCheckReport { entries, h, tol })
}
