//! Mask estimators: log-magnitude features → recurrent body → sigmoid head.
//!
//! Two bodies are supported. `ernn` is a single ERNN layer (257 → N_s);
//! `lstm2` stacks two LSTM layers (257 → N_s → N_s). Both end in a fully
//! connected N_s → 257 layer with a sigmoid, so every mask entry lies in
//! (0, 1). Evaluation is frame-recurrent from a zero state, which makes the
//! mask at frame τ a function of frames 1..τ only.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, FORMAT_VERSION, MAGIC,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{DspError, Mask, NUM_BINS};
use crate::numerics::{sigmoid, Graph, NodeId, NumericsError, ParameterStore, Real, Tensor};
use crate::recurrent::{Affine, CellError, ErnnCell, ErnnConfig, LstmCell, LstmConfig, LstmState};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("feature dimension {found} does not match the model's {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("empty feature sequence")]
    EmptySequence,
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Ernn,
    Lstm2,
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ernn" => Ok(Architecture::Ernn),
            "lstm2" => Ok(Architecture::Lstm2),
            other => Err(ModelError::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

fn default_feature_dim() -> usize {
    NUM_BINS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub state_dim: usize,
    /// ERNN only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    /// ERNN only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn ernn(state_dim: usize, hidden_dim: usize, iterations: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Ernn,
            state_dim,
            hidden_dim: Some(hidden_dim),
            iterations: Some(iterations),
            feature_dim: NUM_BINS,
            seed: 0,
        }
    }

    pub fn lstm2(state_dim: usize) -> Self {
        ModelConfig {
            architecture: Architecture::Lstm2,
            state_dim,
            hidden_dim: None,
            iterations: None,
            feature_dim: NUM_BINS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.feature_dim == 0 {
            return Err(ModelError::Config(
                "state and feature dimensions must be positive".into(),
            ));
        }
        match (self.architecture, self.hidden_dim, self.iterations) {
            (Architecture::Ernn, Some(h), Some(k)) if h > 0 && k > 0 => Ok(()),
            (Architecture::Ernn, _, _) => Err(ModelError::Config(
                "ernn needs positive hidden_dim and iterations".into(),
            )),
            (Architecture::Lstm2, None, None) => Ok(()),
            (Architecture::Lstm2, _, _) => Err(ModelError::Config(
                "lstm2 takes neither hidden_dim nor iterations".into(),
            )),
        }
    }

    fn ernn_config(&self) -> ErnnConfig {
        ErnnConfig {
            input_dim: self.feature_dim,
            state_dim: self.state_dim,
            hidden_dim: self.hidden_dim.unwrap_or(0),
            iterations: self.iterations.unwrap_or(0),
        }
    }

    fn lstm_configs(&self) -> [LstmConfig; 2] {
        [
            LstmConfig {
                input_dim: self.feature_dim,
                state_dim: self.state_dim,
            },
            LstmConfig {
                input_dim: self.state_dim,
                state_dim: self.state_dim,
            },
        ]
    }
}

/// Exact number of trainable scalars, head included.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let head = Affine::param_count(cfg.state_dim, cfg.feature_dim);
    let body = match cfg.architecture {
        Architecture::Ernn => cfg.ernn_config().param_count(),
        Architecture::Lstm2 => cfg.lstm_configs().iter().map(LstmConfig::param_count).sum(),
    };
    Ok(body + head)
}

/// Rounded display used in parameter tables: nearest thousand below one
/// million (`329k`), three significant digits above (`1.12M`).
pub fn format_param_count(n: usize) -> String {
    if n < 1_000 {
        n.to_string()
    } else if n < 999_500 {
        format!("{}k", (n as f64 / 1e3).round() as u64)
    } else {
        format!("{:.2}M", n as f64 / 1e6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Ernn(ErnnCell),
    Lstm2(LstmCell, LstmCell),
}

/// Recurrent state carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentState<T> {
    Ernn(Vec<T>),
    Lstm2(LstmState<T>, LstmState<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskModel<T> {
    config: ModelConfig,
    store: ParameterStore<T>,
    body: Body,
    head: Affine,
}

impl<T: Real> MaskModel<T> {
    /// Registers all parameters in a fixed order and initializes them from
    /// `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let body = match config.architecture {
            Architecture::Ernn => {
                Body::Ernn(ErnnCell::register(&mut store, "ernn", config.ernn_config(), &mut rng)?)
            }
            Architecture::Lstm2 => {
                let [c1, c2] = config.lstm_configs();
                let l1 = LstmCell::register(&mut store, "lstm1", c1, &mut rng)?;
                let l2 = LstmCell::register(&mut store, "lstm2", c2, &mut rng)?;
                Body::Lstm2(l1, l2)
            }
        };
        let head = Affine::register(&mut store, "head", config.state_dim, config.feature_dim, &mut rng)?;
        Ok(MaskModel {
            config,
            store,
            body,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn body(&self) -> &Body {
        &self.body
    }

    pub fn head(&self) -> &Affine {
        &self.head
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Real>(&self) -> MaskModel<U> {
        MaskModel {
            config: self.config,
            store: self.store.cast(),
            body: self.body.clone(),
            head: self.head,
        }
    }

    pub fn initial_state(&self) -> RecurrentState<T> {
        let n = self.config.state_dim;
        match self.body {
            Body::Ernn(_) => RecurrentState::Ernn(vec![T::zero(); n]),
            Body::Lstm2(..) => RecurrentState::Lstm2(LstmState::zeros(n), LstmState::zeros(n)),
        }
    }

    /// Advances the state by one frame and returns that frame's mask.
    pub fn step(&self, psi: &[T], state: &mut RecurrentState<T>) -> Result<Vec<T>> {
        if psi.len() != self.config.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.feature_dim,
                found: psi.len(),
            });
        }
        let h = match (&self.body, state) {
            (Body::Ernn(cell), RecurrentState::Ernn(h)) => {
                *h = cell.step(&self.store, psi, h)?;
                &*h
            }
            (Body::Lstm2(l1, l2), RecurrentState::Lstm2(s1, s2)) => {
                *s1 = l1.step(&self.store, psi, s1)?;
                *s2 = l2.step(&self.store, &s1.h, s2)?;
                &s2.h
            }
            _ => return Err(ModelError::Config("state does not match the model body".into())),
        };
        let mut g = self.head.forward(&self.store, h);
        for v in &mut g {
            *v = sigmoid(*v);
        }
        Ok(g)
    }

    fn check_features(&self, features: &Tensor<T>) -> Result<usize> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.feature_dim,
                found: *shape.last().unwrap_or(&0),
            });
        }
        if shape[0] == 0 {
            return Err(ModelError::EmptySequence);
        }
        Ok(shape[0])
    }

    /// Masks for a `[frames, feature_dim]` feature sequence.
    pub fn forward_sequence(&self, features: &Tensor<T>) -> Result<Mask<T>> {
        let frames = self.check_features(features)?;
        let bins = self.config.feature_dim;
        let mut state = self.initial_state();
        let mut data = Vec::with_capacity(frames * bins);
        for psi in features.data().chunks_exact(bins) {
            data.extend(self.step(psi, &mut state)?);
        }
        Ok(Mask::new(frames, bins, data)?)
    }

    /// Records the forward pass on `g` (which must read this model's store)
    /// and returns one mask node per frame.
    pub fn record_sequence(&self, g: &mut Graph<'_, T>, features: &Tensor<T>) -> Result<Vec<NodeId>> {
        let frames = self.check_features(features)?;
        let bins = self.config.feature_dim;
        let n = self.config.state_dim;
        let mut masks = Vec::with_capacity(frames);
        match &self.body {
            Body::Ernn(cell) => {
                let mut h = g.constant(Tensor::zeros(&[n]));
                for psi in features.data().chunks_exact(bins) {
                    let x = g.constant_vector(psi.to_vec());
                    h = cell.record_step(g, x, h)?;
                    masks.push(self.record_head(g, h)?);
                }
            }
            Body::Lstm2(l1, l2) => {
                let zero = || Tensor::zeros(&[n]);
                let (mut h1, mut c1) = (g.constant(zero()), g.constant(zero()));
                let (mut h2, mut c2) = (g.constant(zero()), g.constant(zero()));
                for psi in features.data().chunks_exact(bins) {
                    let x = g.constant_vector(psi.to_vec());
                    (h1, c1) = l1.record_step(g, x, h1, c1)?;
                    (h2, c2) = l2.record_step(g, h1, h2, c2)?;
                    masks.push(self.record_head(g, h2)?);
                }
            }
        }
        Ok(masks)
    }

    fn record_head(&self, g: &mut Graph<'_, T>, h: NodeId) -> Result<NodeId> {
        let z = self.head.record(g, h)?;
        Ok(g.sigmoid(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn features(frames: usize, seed: u64) -> Tensor<f64> {
        let data = (0..frames * NUM_BINS)
            .map(|i| ((i as f64 * 0.618 + seed as f64).sin() * 3.0) - 1.0)
            .collect();
        Tensor::new(vec![frames, NUM_BINS], data).unwrap()
    }

    #[test]
    fn parameter_counts_match_tables() {
        let cases = [
            (ModelConfig::ernn(256, 256, 3), 329_476, "329k"),
            (ModelConfig::lstm2(256), 1_117_697, "1.12M"),
            (ModelConfig::lstm2(512), 3_808_001, "3.81M"),
            (ModelConfig::ernn(512, 64, 1), 592_706, "593k"),
            (ModelConfig::ernn(512, 64, 3), 592_708, "593k"),
            (ModelConfig::ernn(512, 64, 5), 592_710, "593k"),
            (ModelConfig::ernn(256, 32, 1), 214_562, "215k"),
            (ModelConfig::ernn(512, 512, 5), 1_051_910, "1.05M"),
        ];
        for (cfg, exact, rounded) in cases {
            let n = count_parameters(&cfg).unwrap();
            assert_eq!(n, exact, "{cfg:?}");
            assert_eq!(format_param_count(n), rounded);
        }
    }

    #[test]
    fn count_matches_registered_scalars() {
        for cfg in [
            ModelConfig::ernn(16, 8, 3),
            ModelConfig::ernn(256, 32, 5),
            ModelConfig::lstm2(12),
        ] {
            let m = MaskModel::<f32>::new(cfg).unwrap();
            assert_eq!(m.num_parameters(), count_parameters(&cfg).unwrap());
        }
    }

    #[test]
    fn rounding_edges() {
        assert_eq!(format_param_count(999), "999");
        assert_eq!(format_param_count(1_499), "1k");
        assert_eq!(format_param_count(999_499), "999k");
        assert_eq!(format_param_count(999_500), "1.00M");
    }

    #[test]
    fn illegal_combinations_are_rejected() {
        let mut c = ModelConfig::lstm2(8);
        c.iterations = Some(3);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::ernn(8, 4, 2);
        c.hidden_dim = None;
        assert!(count_parameters(&c).is_err());
        assert!(ModelConfig::ernn(8, 4, 0).validate().is_err());
    }

    #[test]
    fn zero_model_gives_half_masks() {
        for cfg in [ModelConfig::ernn(8, 4, 2), ModelConfig::lstm2(6)] {
            let mut m = MaskModel::<f64>::new(cfg).unwrap();
            for p in m.store_mut().iter_mut() {
                p.value.data_mut().fill(0.0);
            }
            let mask = m.forward_sequence(&features(5, 1)).unwrap();
            assert!(mask.data().iter().all(|&g| g == 0.5));
        }
    }

    #[test]
    fn wrong_feature_dim_is_rejected() {
        let m = MaskModel::<f64>::new(ModelConfig::ernn(8, 4, 2)).unwrap();
        let bad = Tensor::zeros(&[3, 100]);
        assert_eq!(
            m.forward_sequence(&bad).unwrap_err(),
            ModelError::FeatureDim {
                expected: 257,
                found: 100
            }
        );
    }

    #[test]
    fn recorded_and_plain_sequences_agree() {
        for cfg in [ModelConfig::ernn(8, 4, 3), ModelConfig::lstm2(6)] {
            let m = MaskModel::<f64>::new(cfg.with_seed(4)).unwrap();
            let f = features(6, 2);
            let plain = m.forward_sequence(&f).unwrap();
            let mut g = Graph::new(m.store());
            let nodes = m.record_sequence(&mut g, &f).unwrap();
            for (t, n) in nodes.iter().enumerate() {
                for (a, b) in plain.frame(t).iter().zip(g.value(*n)) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = MaskModel::<f32>::new(ModelConfig::ernn(8, 4, 2).with_seed(9)).unwrap();
        let b = MaskModel::<f32>::new(ModelConfig::ernn(8, 4, 2).with_seed(9)).unwrap();
        let c = MaskModel::<f32>::new(ModelConfig::ernn(8, 4, 2).with_seed(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let eta = a.store().id("ernn.eta").unwrap();
        assert_eq!(a.store().value(eta).data(), &[0.1, 0.1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn masks_are_causal_and_bounded(
            seed in 0u64..1000,
            cut in 1usize..6,
            lstm in any::<bool>(),
        ) {
            let cfg = if lstm { ModelConfig::lstm2(6) } else { ModelConfig::ernn(8, 4, 2) };
            let m = MaskModel::<f64>::new(cfg.with_seed(seed)).unwrap();
            let f = features(6, seed);
            let mut perturbed = f.clone();
            for v in &mut perturbed.data_mut()[cut * NUM_BINS..] {
                *v = -*v * 7.0 + 3.0;
            }
            let a = m.forward_sequence(&f).unwrap();
            let b = m.forward_sequence(&perturbed).unwrap();
            prop_assert_eq!(&a.data()[..cut * NUM_BINS], &b.data()[..cut * NUM_BINS]);
            prop_assert!(a.data().iter().all(|&g| g > 0.0 && g < 1.0));
        }
    }
}
