//! Central finite-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const MIN_SAMPLES: usize = 64;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares analytic parameter gradients of the scalar program `f` against
/// `(f(p+eps) - f(p-eps)) / 2eps` on a random subsample of at least
/// [`MIN_SAMPLES`] coordinates (all of them if there are fewer). Relative
/// error uses the denominator `max(|analytic|, |numeric|, floor)` with
/// `floor = max(1e-8, 1e-4 * max |gradient|)`: coordinates that cancel to
/// almost nothing are measured against the gradient's scale, since their
/// differences are dominated by rounding in `f`.
pub fn finite_diff_check<F>(f: F, point: &ParamStore, eps: f64, samples: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut store = point.clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &store)?;
    tape.backward(loss, Some(&mut store))?;

    let scale = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-4 * scale).max(1e-8);
    let mut coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_owned(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(samples.max(MIN_SAMPLES));

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = f(&mut t, s)?;
        Ok(t.value(v).item())
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: coords.len(),
    };
    let mut probe = store.clone();
    for (name, i) in coords {
        let analytic = store.grad(&name)?.data()[i];
        let orig = store.get(&name)?.data()[i];
        probe.get_mut(&name)?.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.get_mut(&name)?.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.get_mut(&name)?.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        let rel = if rel.is_finite() { rel } else { f64::MAX };
        if rel > out.max_rel_err || out.worst.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst = Some((name, i, analytic, numeric));
        }
    }
    Ok(out)
}
