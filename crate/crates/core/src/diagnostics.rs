//! State-gradient norm traces for ERNN, LSTM and vanilla RNN cells driven
//! by the same feature sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{log_magnitude, Stft, StftConfig, NUM_BINS};
use crate::numerics::{ParameterStore, Real};
use crate::recurrent::{
    measure_state_gradient_norms, CellError, CellKind, ErnnCell, ErnnConfig, LstmCell, LstmConfig, VanillaCell,
};
use crate::synth::{generate_pairs, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub state_dim: usize,
    pub hidden_dim: usize,
    pub iterations: usize,
    /// Number of frames after the probed state.
    pub distance: usize,
    pub probe_index: usize,
    pub probes: usize,
    /// Spectral norm of the vanilla recurrent matrix.
    pub vanilla_norm: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            state_dim: 64,
            hidden_dim: 32,
            iterations: 3,
            distance: 30,
            probe_index: 5,
            probes: 8,
            vanilla_norm: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub cell: CellKind,
    /// Entry `d` estimates `‖∂h_{p+d}/∂h_p‖`.
    pub norms: Vec<f64>,
}

/// Sets `w` (row-major `n × n`) to `scale · (I − 2vvᵀ/‖v‖²)`, a scaled
/// reflection whose spectral norm is exactly `|scale|`.
pub fn scaled_reflection<T: Real, R: Rng>(w: &mut [T], n: usize, scale: f64, rng: &mut R) {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vv: f64 = v.iter().map(|x| x * x).sum();
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            w[i * n + j] = T::of(scale * (id - 2.0 * v[i] * v[j] / vv));
        }
    }
}

/// Log-magnitude frames of a synthetic noisy utterance.
fn feature_frames(frames: usize, seed: u64) -> Vec<Vec<f64>> {
    let seconds = (frames as f64 + 2.0) * 256.0 / 16000.0;
    let pair = generate_pairs(&SynthConfig {
        pairs: 1,
        seconds,
        seed,
        ..SynthConfig::default()
    })
    .remove(0);
    let x: Vec<f64> = pair.noisy.iter().map(|&v| v as f64).collect();
    let stft = Stft::<f64>::new(StftConfig::default()).expect("default config");
    let feats = log_magnitude(&stft.stft(&x).expect("non-empty"));
    feats.data().chunks_exact(NUM_BINS).take(frames).map(<[f64]>::to_vec).collect()
}

/// One trace per cell kind, in the order ERNN, LSTM, vanilla.
pub fn gradient_norm_traces(cfg: &TraceConfig) -> Result<Vec<NormTrace>, CellError> {
    let len = cfg.probe_index + 1 + cfg.distance;
    let inputs = feature_frames(len, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::<f64>::new();
    let n = cfg.state_dim;
    let ernn = ErnnCell::register(
        &mut store,
        "ernn",
        ErnnConfig {
            input_dim: NUM_BINS,
            state_dim: n,
            hidden_dim: cfg.hidden_dim,
            iterations: cfg.iterations,
        },
        &mut rng,
    )?;
    let lstm = LstmCell::register(
        &mut store,
        "lstm",
        LstmConfig {
            input_dim: NUM_BINS,
            state_dim: n,
        },
        &mut rng,
    )?;
    let vanilla = VanillaCell::register(&mut store, "vanilla", NUM_BINS, n, &mut rng)?;
    scaled_reflection(
        store.value_mut(vanilla.recurrent).data_mut(),
        n,
        cfg.vanilla_norm,
        &mut rng,
    );

    let p = cfg.probe_index;
    let k = cfg.probes;
    Ok(vec![
        NormTrace {
            cell: CellKind::Ernn,
            norms: measure_state_gradient_norms(&ernn, &store, &inputs, p, k, &mut rng)?,
        },
        NormTrace {
            cell: CellKind::Lstm,
            norms: measure_state_gradient_norms(&lstm, &store, &inputs, p, k, &mut rng)?,
        },
        NormTrace {
            cell: CellKind::Vanilla,
            norms: measure_state_gradient_norms(&vanilla, &store, &inputs, p, k, &mut rng)?,
        },
    ])
}

/// `distance,<cell>,<cell>,…` with one row per distance.
pub fn traces_to_csv(traces: &[NormTrace]) -> String {
    let mut out = String::from("distance");
    for t in traces {
        out.push_str(&format!(",{}", t.cell));
    }
    out.push('\n');
    let rows = traces.iter().map(|t| t.norms.len()).max().unwrap_or(0);
    for d in 0..rows {
        out.push_str(&d.to_string());
        for t in traces {
            match t.norms.get(d) {
                Some(v) => out.push_str(&format!(",{v:e}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
