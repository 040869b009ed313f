use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` returns the scalar value and its gradient. At most `max_coords`
/// coordinates (at least 100 when the store has that many) are sampled
/// uniformly without replacement using `seed`. The relative error of one
/// coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    f: F,
    epsilon: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    if !(1e-6..=1e-4).contains(&epsilon) {
        return Err(Error::Config(format!(
            "epsilon {epsilon} outside [1e-6, 1e-4]"
        )));
    }
    let (value, grads) = f(store)?;
    if !value.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite(
            "grad_check at the evaluation point".into(),
        ));
    }
    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let want = max_coords.max(100).min(coords.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample(&mut rng, coords.len(), want);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for k in picked.iter() {
        let (id, i) = coords[k];
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + epsilon;
        let plus = f(store)?.0;
        store.get_mut(id).data_mut()[i] = orig - epsilon;
        let minus = f(store)?.0;
        store.get_mut(id).data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference at {}[{i}]",
                store.name(id)
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grads.get(id).data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    Ok(report)
}
