//! Model architecture: embeddings, GRU encoders/decoder, recognition
//! network, and the two-level hierarchical softmax.

mod checkpoint;
mod forward;
mod tree;

pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, Checkpoint, OptState};
pub use forward::{
    decoder_init, decoder_step, encode_bidir, gru_step, prompt_state, recognize, represent,
    sample_latent, sequence_nll, Bound, GruTensors, Side,
};
pub use tree::{assign_classes, compose_tree_distribution, ClassAssignment};

use std::collections::BTreeMap;

use rand::Rng;

use crate::corpus;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

/// Which of the two trained variants a parameter set belongs to.
///
/// The deterministic baseline shares the latent model's architecture but has
/// no response encoder or recognition network; its latent slot is pinned to
/// the zero vector, which both keeps decoder capacity identical and makes
/// the decoder-init contract ([h_x z]) uniform across variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Latent,
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Latent => "latent",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "latent" => Ok(ModelKind::Latent),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected latent or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub max_len: usize,
    pub word_dropout: f64,
}

impl ModelConfig {
    /// Decoder hidden width; the decoder starts from the concatenation
    /// [h_x z], so this is enc_hidden + latent_dim by construction.
    pub fn dec_hidden(&self) -> usize {
        self.enc_hidden + self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < corpus::RESERVED.len() {
            return Err(Error::Config(format!(
                "vocab_size {} is smaller than the reserved-token set",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("enc_hidden", self.enc_hidden),
            ("latent_dim", self.latent_dim),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_classes == 0 || self.n_classes > self.vocab_size {
            return Err(Error::Config(format!(
                "n_classes {} outside 1..={}",
                self.n_classes, self.vocab_size
            )));
        }
        if !(0.0..=1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!(
                "word_dropout {} outside [0, 1]",
                self.word_dropout
            )));
        }
        Ok(())
    }

    /// Default class count: ⌈√vocab⌉, clamped so no class can end up empty.
    pub fn auto_classes(vocab_size: usize) -> usize {
        let content = vocab_size.saturating_sub(corpus::RESERVED.len());
        let root = (vocab_size as f64).sqrt().ceil() as usize;
        root.clamp(1, content + 1)
    }
}

/// Diagonal-Gaussian posterior parameters: mean and log-variance per latent
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub log_sigma_diag: Vec<f64>,
}

pub type LatentVector = Vec<f64>;

/// All learned weights, stored under canonical dotted names so that the
/// optimizer, gradient extraction, and the checkpoint format all traverse
/// one ordering.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub classes: ClassAssignment,
    pub class_seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fresh Glorot-initialized parameters. Matrices draw from
    /// U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))); biases start at 0.
    pub fn init(kind: ModelKind, config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let classes = assign_classes(config.vocab_size, config.n_classes, seed)?;
        let mut rng = rng::stream(seed, "init");
        let mut tensors = BTreeMap::new();
        for (name, shape) in tensor_specs(kind, &config, &classes) {
            let t = if shape.len() == 2 {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1])
                    .map(|_| rng.random_range(-a..a))
                    .collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)?
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            kind,
            config,
            classes,
            class_seed: seed,
            tensors,
        })
    }

    pub(crate) fn from_parts(
        kind: ModelKind,
        config: ModelConfig,
        classes: ClassAssignment,
        class_seed: u64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<ModelParams> {
        config.validate()?;
        let expected: BTreeMap<String, Vec<usize>> =
            tensor_specs(kind, &config, &classes).into_iter().collect();
        if expected.len() != tensors.len() {
            return Err(Error::DataCorruption(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, t) in &tensors {
            match expected.get(name) {
                Some(shape) if shape == &t.shape().to_vec() => {}
                Some(shape) => {
                    return Err(Error::DataCorruption(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::DataCorruption(format!(
                        "unexpected tensor {name}"
                    )))
                }
            }
        }
        Ok(ModelParams {
            kind,
            config,
            classes,
            class_seed,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no parameter tensor named {name:?}"))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn replace(&mut self, name: &str, t: Tensor) {
        let slot = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter tensor named {name:?}"));
        assert_eq!(slot.shape(), t.shape(), "replacing {name} changed shape");
        *slot = t;
    }
}

fn gru_specs(prefix: &str, input: usize, hidden: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    for gate in ["r", "u", "h"] {
        v.push((format!("{prefix}.w_{gate}"), vec![hidden, input]));
        v.push((format!("{prefix}.u_{gate}"), vec![hidden, hidden]));
        v.push((format!("{prefix}.b_{gate}"), vec![hidden]));
    }
    v
}

/// Canonical (name, shape) list for a model variant. Everything that walks
/// the parameter set (init, optimizer, checkpoints, binding) derives its
/// order from the sorted names.
fn tensor_specs(
    kind: ModelKind,
    config: &ModelConfig,
    classes: &ClassAssignment,
) -> Vec<(String, Vec<usize>)> {
    let (v, e, h, d) = (
        config.vocab_size,
        config.embed_dim,
        config.enc_hidden,
        config.latent_dim,
    );
    let dec = config.dec_hidden();
    let mut specs = vec![("embedding".to_string(), vec![v, e])];
    specs.extend(gru_specs("enc_x_fw", e, h));
    specs.extend(gru_specs("enc_x_bw", e, h));
    specs.push(("repr_x.w".to_string(), vec![h, 2 * h]));
    specs.push(("repr_x.b".to_string(), vec![h]));
    if kind == ModelKind::Latent {
        specs.extend(gru_specs("enc_y_fw", e, h));
        specs.extend(gru_specs("enc_y_bw", e, h));
        specs.push(("repr_y.w".to_string(), vec![h, 2 * h]));
        specs.push(("repr_y.b".to_string(), vec![h]));
        specs.push(("recog.w_mu".to_string(), vec![d, 2 * h]));
        specs.push(("recog.b_mu".to_string(), vec![d]));
        specs.push(("recog.w_sigma".to_string(), vec![d, 2 * h]));
        specs.push(("recog.b_sigma".to_string(), vec![d]));
    }
    specs.extend(gru_specs("dec", e, dec));
    specs.push(("tree.class_w".to_string(), vec![classes.members.len(), dec]));
    specs.push(("tree.class_b".to_string(), vec![classes.members.len()]));
    for (c, members) in classes.members.iter().enumerate() {
        specs.push((format!("tree.word_w.{c:04}"), vec![members.len(), dec]));
        specs.push((format!("tree.word_b.{c:04}"), vec![members.len()]));
    }
    specs
}
