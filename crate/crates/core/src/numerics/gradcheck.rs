use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NodeId, NumericsError, ParamId, ParameterStore};

/// Gradients smaller than this are compared in absolute terms.
const MAGNITUDE_FLOOR: f64 = 1e-7;

/// Parameters with at most this many scalars are probed exhaustively.
const EXHAUSTIVE_BELOW: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares reverse-mode gradients of `forward` against central differences
/// with step `h`.
///
/// Every small parameter (such as the ERNN step sizes) is probed in full and
/// every larger one at least once; the remaining probes are drawn uniformly
/// over all scalars until `probes` coordinates have been checked.
pub fn grad_check<F, E>(
    forward: F,
    store: &mut ParameterStore<f64>,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<NodeId, E>,
    E: From<NumericsError>,
{
    let eval = |store: &ParameterStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        let v = g.value(loss)[0];
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(format!("loss = {v}")).into());
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new(store);
        let loss = forward(&mut g)?;
        let v = g.value(loss)[0];
        if !v.is_finite() {
            return Err(NumericsError::NonFinite(format!("loss = {v}")).into());
        }
        g.backward(loss)?.into_gradients()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        let n = store.value(id).numel();
        if n <= EXHAUSTIVE_BELOW {
            coords.extend((0..n).map(|i| (id, i)));
        } else {
            coords.push((id, rng.gen_range(0..n)));
        }
    }
    let total = store.num_scalars();
    while coords.len() < probes.min(total) {
        let mut flat = rng.gen_range(0..total);
        for id in store.ids() {
            let n = store.value(id).numel();
            if flat < n {
                if !coords.contains(&(id, flat)) {
                    coords.push((id, flat));
                }
                break;
            }
            flat -= n;
        }
    }

    let mut results = Vec::with_capacity(coords.len());
    for (id, i) in coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let plus = eval(store);
        store.value_mut(id).data_mut()[i] = orig - h;
        let minus = eval(store);
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let a = analytic.get(id).map_or(0.0, |g| g[i]);
        results.push(ProbeResult {
            param: store.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    let max_rel_err = results.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        probes: results,
    })
}
