//! Central finite-difference verification of analytic gradients.
//!
//! Only forward evaluations of the loss are used, so the check is independent
//! of every backward rule on the tape.

use rayon::prelude::*;

use crate::autodiff::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements whose one-sided slopes disagree by at least the observed
    /// mismatch: the perturbation straddles a ReLU kink.
    pub kinks: usize,
    pub failures: Vec<Mismatch>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks `analytic[p]` against central differences of `loss` for every
/// element of every parameter in `params`.
pub fn check<F>(params: &[Parameter], analytic: &[Tensor], loss: F, cfg: GradCheck) -> GradCheckReport
where
    F: Fn(&[Parameter]) -> f64 + Sync,
{
    assert_eq!(params.len(), analytic.len());
    let base = loss(params);
    let elements: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, param)| (0..param.value.len()).map(move |e| (p, e)))
        .collect();

    let outcomes: Vec<(f64, Option<Mismatch>, bool)> = elements
        .par_chunks(64)
        .flat_map_iter(|chunk| {
            let mut work = params.to_vec();
            let mut out = Vec::with_capacity(chunk.len());
            for &(p, e) in chunk {
                let orig = work[p].value.data()[e];
                work[p].value.data_mut()[e] = orig + cfg.step;
                let plus = loss(&work);
                work[p].value.data_mut()[e] = orig - cfg.step;
                let minus = loss(&work);
                work[p].value.data_mut()[e] = orig;

                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = analytic[p].data()[e];
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                let tol = (cfg.rel_tol * scale).max(cfg.abs_tol);
                let rel = if scale > 0.0 { err / scale } else { 0.0 };
                if err <= tol {
                    out.push((rel, None, false));
                    continue;
                }
                let right = (plus - base) / cfg.step;
                let left = (base - minus) / cfg.step;
                if (right - left).abs() >= err {
                    out.push((0.0, None, true));
                } else {
                    out.push((
                        rel,
                        Some(Mismatch {
                            param: params[p].name.clone(),
                            index: e,
                            analytic: a,
                            numeric,
                        }),
                        false,
                    ));
                }
            }
            out
        })
        .collect();

    let mut report = GradCheckReport {
        checked: outcomes.len(),
        ..Default::default()
    };
    for (rel, mismatch, kink) in outcomes {
        if kink {
            report.kinks += 1;
            continue;
        }
        report.max_rel_err = report.max_rel_err.max(rel);
        if let Some(m) = mismatch {
            report.failures.push(m);
        }
    }
    report
}
