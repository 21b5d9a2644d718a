use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DiffError, Gradients, ParamKey, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinate with the largest error: key, flat index, analytic, numeric.
    pub worst: Option<(ParamKey, usize, f64, f64)>,
}

/// `|a − n| / (|a| + |n| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares `analytic` against central differences of `loss` on up to
/// `max_coords` coordinates of `store`, sampled uniformly with `seed`.
///
/// `loss` must be deterministic: it is evaluated twice at the unperturbed
/// point and any difference is reported as an oracle failure.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut loss: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DiffError::Epsilon(eps));
    }
    let total = store.scalar_count();
    if total == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
            worst: None,
        });
    }
    let base = loss(store);
    let again = loss(store);
    if base.to_bits() != again.to_bits() {
        return Err(DiffError::NondeterministicOracle { first: base, second: again });
    }

    let flat: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, total, max_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    // flat index -> (tensor, offset)
    let mut offsets = Vec::with_capacity(store.len());
    let mut acc = 0;
    for i in 0..store.len() {
        offsets.push(acc);
        acc += store.tensor(i).len();
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for f in flat {
        let t = offsets.partition_point(|&o| o <= f) - 1;
        let j = f - offsets[t];
        let key = store.key(t);
        let a = analytic.get(key).map(|g| g.data()[j]).unwrap_or(0.0);

        let orig = store.tensor(t).data()[j];
        store.tensor_mut(t).data_mut()[j] = orig + eps;
        let up = loss(store);
        store.tensor_mut(t).data_mut()[j] = orig - eps;
        let down = loss(store);
        store.tensor_mut(t).data_mut()[j] = orig;
        let n = (up - down) / (2.0 * eps);

        let err = relative_error(a, n);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((key, j, a, n));
        }
    }
    Ok(report)
}
