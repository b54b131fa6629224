//! Central-difference verification of the tape's analytic gradients.

use super::store::ParamStore;
use super::tape::{Tape, Tid};
use crate::{Error, Result};
use rand::Rng as _;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences for the given
/// parameters. `build` must be deterministic: called repeatedly with
/// perturbed parameter values, any internal randomness has to be
/// re-seeded identically on every call. Checks up to `coords_per_param`
/// coordinates per parameter (seeded choice) with step `h`.
///
/// Relative error per coordinate:
/// |analytic − numeric| / (|analytic| + |numeric| + 1e-8).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    params: &[usize],
    h: f32,
    coords_per_param: usize,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Tid)>,
{
    // Analytic pass.
    store.zero_grads();
    let (mut tape, loss) = build(store)?;
    let base = tape.scalar_value(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite {
            term: "gradcheck loss".into(),
        });
    }
    tape.backward(loss)?;
    tape.export_param_grads(store);

    let mut analytic: Vec<Vec<f32>> = Vec::with_capacity(params.len());
    for &pid in params {
        analytic.push(store.grad(pid).to_vec());
    }

    let mut rng = crate::rng::seeded(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };

    for (slot, &pid) in params.iter().enumerate() {
        let n = store.value(pid).len();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for &ci in &coords {
            let orig = store.value(pid)[ci];

            store.value_mut(pid)[ci] = orig + h;
            let (tp, lp) = build(store)?;
            let fp = tp.scalar_value(lp);

            store.value_mut(pid)[ci] = orig - h;
            let (tm, lm) = build(store)?;
            let fm = tm.scalar_value(lm);

            store.value_mut(pid)[ci] = orig;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    term: format!("gradcheck of {} at {ci}", store.name(pid)),
                });
            }

            let numeric = (fp - fm) / (2.0 * h);
            let an = analytic[slot][ci];
            let rel = (an - numeric).abs() / (an.abs() + numeric.abs() + 1e-8);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.name(pid).to_string(), ci));
            }
        }
    }
    Ok(report)
}
