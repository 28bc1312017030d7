//! Message-passing VAE/GAN over layout graphs.
//!
//! Parameters live in one [`ParamStore`] under four prefixes: `enc.` (graph
//! encoder), `vae.` (posterior heads), `dec.` (slot decoder) and `disc.`
//! (discriminator). Forward passes record onto a [`Tape`] through a
//! [`Bound`] view that decides per prefix whether parameters are trainable.

mod checkpoint;
mod discriminator;
mod encoder;
mod objective;
mod train;
mod vae;

use std::collections::BTreeMap;

use layoutgen_numeric::{ParamStore, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::graph::{EDGE_FEATURES, NODE_FEATURES};
use crate::layout::ElementType;
use crate::{Error, Result};

pub use checkpoint::{checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use discriminator::{discriminate, DISC_EDGE_FEATURES, DISC_NODE_FEATURES};
pub use encoder::{encode_graph, graph_messages, message_passing_layer, Messages};
pub use objective::{
    composite_loss, discriminator_loss, gan_value, generator_adversarial_loss, grad_check_fixture,
    run_grad_check, total_generator_loss, GeneratorBatch, GeneratorTerms,
};
pub use train::{
    clip_discriminator, corpus_graphs, fine_tune, train, train_with_progress, EpochLoss, FineTuneOverrides, ModelCheckpoint,
};
pub use vae::{decode, reconstruction_loss, reparameterize, vae_heads, vae_loss, BBOX_DELTA};

/// Generator objective for the adversarial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenObjective {
    /// Minimize `log(1 − D(G(z)))`.
    Minimax,
    /// Minimize `−log D(G(z))`.
    NonSaturating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// KL weight.
    pub beta: f64,
    /// L2 weight on encoder, head and decoder parameters.
    pub lambda: f64,
    /// Weight of the generator's adversarial term.
    pub gamma: f64,
    pub gen_objective: GenObjective,
    /// Discriminator weights are clamped to `[-disc_clip, disc_clip]` after
    /// every update; 0 turns clamping off.
    pub disc_clip: f64,
    pub d_hidden: usize,
    pub d_latent: usize,
    pub layers: usize,
    pub n_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda: 1e-4,
            gamma: 0.1,
            gen_objective: GenObjective::NonSaturating,
            disc_clip: 0.03,
            d_hidden: 32,
            d_latent: 8,
            layers: 2,
            n_max: 12,
            epochs: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("disc_clip", self.disc_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("training.{name} must be ≥ 0, got {v}"));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("training.lr must be > 0, got {}", self.lr));
        }
        for (name, v, min) in [
            ("d_hidden", self.d_hidden, 1),
            ("d_latent", self.d_latent, 1),
            ("layers", self.layers, 1),
            ("n_max", self.n_max, 2),
            ("batch_size", self.batch_size, 1),
        ] {
            if v < min {
                return bad(format!("training.{name} must be ≥ {min}, got {v}"));
            }
        }
        Ok(())
    }

    /// Flat decoder output width: per-slot presence, type and box logits, then pair logits.
    pub fn decoder_outputs(&self) -> usize {
        self.n_max * 13 + num_pairs(self.n_max)
    }

    /// Parameter names and shapes in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, z) = (self.d_hidden, self.d_latent);
        let mut shapes = vec![
            (names::ENC_PROJ_W.to_string(), vec![NODE_FEATURES, h]),
            (names::ENC_PROJ_B.to_string(), vec![h]),
        ];
        for l in 0..self.layers {
            shapes.push((names::enc_layer_w(l), vec![2 * h + EDGE_FEATURES, h]));
            shapes.push((names::enc_layer_b(l), vec![h]));
        }
        shapes.extend([
            (names::VAE_MU_W.to_string(), vec![h, z]),
            (names::VAE_MU_B.to_string(), vec![z]),
            (names::VAE_LOGVAR_W.to_string(), vec![h, z]),
            (names::VAE_LOGVAR_B.to_string(), vec![z]),
            (names::DEC_HIDDEN_W.to_string(), vec![z, h]),
            (names::DEC_HIDDEN_B.to_string(), vec![h]),
            (names::DEC_OUT_W.to_string(), vec![h, self.decoder_outputs()]),
            (names::DEC_OUT_B.to_string(), vec![self.decoder_outputs()]),
            (names::DISC_PROJ_W.to_string(), vec![DISC_NODE_FEATURES, h]),
            (names::DISC_PROJ_B.to_string(), vec![h]),
        ]);
        for l in 0..self.layers {
            shapes.push((names::disc_layer_w(l), vec![2 * h + DISC_EDGE_FEATURES, h]));
            shapes.push((names::disc_layer_b(l), vec![h]));
        }
        shapes.push((names::DISC_HEAD_W.to_string(), vec![h, 1]));
        shapes.push((names::DISC_HEAD_B.to_string(), vec![1]));
        shapes
    }
}

pub mod names {
    pub const ENC_PROJ_W: &str = "enc.proj.w";
    pub const ENC_PROJ_B: &str = "enc.proj.b";
    pub const VAE_MU_W: &str = "vae.mu.w";
    pub const VAE_MU_B: &str = "vae.mu.b";
    pub const VAE_LOGVAR_W: &str = "vae.logvar.w";
    pub const VAE_LOGVAR_B: &str = "vae.logvar.b";
    pub const DEC_HIDDEN_W: &str = "dec.hidden.w";
    pub const DEC_HIDDEN_B: &str = "dec.hidden.b";
    pub const DEC_OUT_W: &str = "dec.out.w";
    pub const DEC_OUT_B: &str = "dec.out.b";
    pub const DISC_PROJ_W: &str = "disc.proj.w";
    pub const DISC_PROJ_B: &str = "disc.proj.b";
    pub const DISC_HEAD_W: &str = "disc.head.w";
    pub const DISC_HEAD_B: &str = "disc.head.b";

    /// Prefixes of the generator side (encoder, heads, decoder).
    pub const GENERATOR: [&str; 3] = ["enc.", "vae.", "dec."];
    pub const DISCRIMINATOR: [&str; 1] = ["disc."];

    pub fn enc_layer_w(l: usize) -> String {
        format!("enc.mp{l}.w")
    }
    pub fn enc_layer_b(l: usize) -> String {
        format!("enc.mp{l}.b")
    }
    pub fn disc_layer_w(l: usize) -> String {
        format!("disc.mp{l}.w")
    }
    pub fn disc_layer_b(l: usize) -> String {
        format!("disc.mp{l}.b")
    }

    pub fn is_generator(name: &str) -> bool {
        GENERATOR.iter().any(|p| name.starts_with(p))
    }

    pub fn is_discriminator(name: &str) -> bool {
        DISCRIMINATOR.iter().any(|p| name.starts_with(p))
    }
}

/// Weights `~ N(0, gain²/fan_in)`, biases zero, drawn in
/// [`TrainingConfig::param_shapes`] order.
///
/// Message-passing weights get gain 0.25 because sum aggregation adds up
/// several messages per node; the log-variance head gets 0.1 so the initial
/// posterior is close to unit variance.
pub fn init_params(cfg: &TrainingConfig, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes() {
        let value = if shape.len() == 2 {
            let gain = if name.contains(".mp") {
                0.25
            } else if name == names::VAE_LOGVAR_W {
                0.1
            } else {
                1.0
            };
            let scale = gain * (1.0 / shape[0] as f64).sqrt();
            rng.normal_tensor(&shape).map(|v| v * scale)
        } else {
            Tensor::zeros(&shape)
        };
        store.insert(name, value).expect("parameter names are unique");
    }
    store
}

/// Parameters recorded once on a tape, by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every parameter; those accepted by `trainable` become gradient
    /// leaves, the rest constants.
    pub fn new(tape: &mut Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for name in store.names() {
            let v = if trainable(name) {
                tape.param(store, name)?
            } else {
                tape.frozen_param(store, name)?
            };
            vars.insert(name.to_string(), v);
        }
        Ok(Self { vars })
    }

    pub fn all_trainable(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        Self::new(tape, store, |_| true)
    }

    pub fn all_frozen(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        Self::new(tape, store, |_| false)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn num_pairs(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Unordered slot pairs `(a, b)`, `a < b`, in lexicographic order.
pub fn slot_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect()
}

/// Position of the unordered pair `{a, b}` in [`slot_pairs`].
pub fn pair_index(n: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// Continuous decoder output over `n_max` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftGraph {
    /// `n_max` presence probabilities.
    pub presence: Vec<f64>,
    /// `n_max × 8`, rows are distributions over element types.
    pub type_probs: Tensor,
    /// `n_max × 4` boxes `(x0, y0, x1, y1)`.
    pub bbox: Tensor,
    /// One probability per entry of [`slot_pairs`].
    pub edge_probs: Vec<f64>,
}

impl SoftGraph {
    pub fn n_max(&self) -> usize {
        self.presence.len()
    }

    /// Lifts a hard graph into slot form: present slots carry one-hot types
    /// and exact boxes, absent slots zero presence, uniform types and zero
    /// boxes, edges 0/1 adjacency.
    pub fn from_graph(g: &crate::graph::LayoutGraph, n_max: usize) -> Result<Self> {
        let n = g.num_nodes();
        if n > n_max {
            return Err(Error::Capacity {
                doc_id: g.doc_id.clone(),
                n,
                n_max,
            });
        }
        let mut presence = vec![0.0; n_max];
        let mut types = vec![1.0 / ElementType::COUNT as f64; n_max * ElementType::COUNT];
        let mut bbox = vec![0.0; n_max * 4];
        for i in 0..n {
            presence[i] = 1.0;
            let row = g.node_features.row(i);
            types[i * 8..(i + 1) * 8].copy_from_slice(&row[0..8]);
            bbox[i * 4..(i + 1) * 4].copy_from_slice(&row[8..12]);
        }
        let adj = g.adjacency();
        let edge_probs = slot_pairs(n_max)
            .into_iter()
            .map(|(a, b)| if a < n && b < n && adj[a][b] { 1.0 } else { 0.0 })
            .collect();
        Ok(Self {
            presence,
            type_probs: Tensor::new(vec![n_max, 8], types)?,
            bbox: Tensor::new(vec![n_max, 4], bbox)?,
            edge_probs,
        })
    }

    /// Violated invariants, empty when sound.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = self.n_max();
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !self.presence.iter().all(|&p| in_unit(p)) {
            v.push("presence outside [0, 1]".to_string());
        }
        if !self.edge_probs.iter().all(|&p| in_unit(p)) {
            v.push("edge probability outside [0, 1]".to_string());
        }
        if self.edge_probs.len() != num_pairs(n) {
            v.push("edge probability count".to_string());
        }
        for k in 0..n {
            let row = self.type_probs.row(k);
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || !row.iter().all(|&p| in_unit(p)) {
                v.push(format!("type row {k} is not a distribution"));
            }
            if !self.bbox.row(k).iter().all(|&c| in_unit(c)) {
                v.push(format!("bbox row {k} outside [0, 1]"));
            }
        }
        v
    }
}

/// A [`SoftGraph`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SoftVars {
    /// `n_max × 1`
    pub presence: Var,
    /// `n_max × 8`
    pub type_probs: Var,
    /// `n_max × 4`
    pub bbox: Var,
    /// `pairs × 1`
    pub edge_probs: Var,
}

impl SoftVars {
    pub fn constant(tape: &mut Tape, s: &SoftGraph) -> Result<Self> {
        let n = s.n_max();
        Ok(Self {
            presence: tape.constant(Tensor::new(vec![n, 1], s.presence.clone())?),
            type_probs: tape.constant(s.type_probs.clone()),
            bbox: tape.constant(s.bbox.clone()),
            edge_probs: tape.constant(Tensor::new(vec![s.edge_probs.len(), 1], s.edge_probs.clone())?),
        })
    }

    pub fn values(&self, tape: &Tape) -> SoftGraph {
        SoftGraph {
            presence: tape.value(self.presence).data().to_vec(),
            type_probs: tape.value(self.type_probs).clone(),
            bbox: tape.value(self.bbox).clone(),
            edge_probs: tape.value(self.edge_probs).data().to_vec(),
        }
    }
}
