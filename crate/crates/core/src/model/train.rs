use layoutgen_numeric::{adam_step, AdamConfig, AdamState, ParamStore, Rng, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    decode, discriminate, discriminator_loss, encode_graph, init_params, names, reconstruction_loss, total_generator_loss,
    vae_heads, Bound, GeneratorBatch, SoftGraph, SoftVars, TrainingConfig,
};
use crate::graph::{build_graph, GraphConfig, LayoutGraph};
use crate::layout::LayoutDocument;
use crate::{Error, Result};

/// Example-weighted means over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    pub generator: f64,
    pub discriminator: f64,
    pub reconstruction: f64,
}

/// Everything needed to continue training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub training: TrainingConfig,
    pub graph: GraphConfig,
    pub params: ParamStore,
    pub gen_opt: AdamState,
    pub disc_opt: AdamState,
    pub rng_state: u64,
    pub loss_trace: Vec<EpochLoss>,
}

impl ModelCheckpoint {
    /// Freshly initialized model; what [`train`] returns for zero epochs.
    pub fn init(training: TrainingConfig, graph: GraphConfig) -> Result<Self> {
        training.validate()?;
        graph.validate()?;
        let mut rng = Rng::new(training.seed);
        let params = init_params(&training, &mut rng);
        let adam = AdamConfig {
            lr: training.lr,
            ..AdamConfig::default()
        };
        Ok(Self {
            gen_opt: AdamState::new(&params, adam, names::is_generator),
            disc_opt: AdamState::new(&params, adam, names::is_discriminator),
            training: TrainingConfig { epochs: 0, ..training },
            graph,
            params,
            rng_state: rng.state(),
            loss_trace: Vec::new(),
        })
    }

    /// FNV-1a hash of the parameter values, as 16 hex digits.
    pub fn id(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, p) in self.params.iter() {
            eat(name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }

    /// Posterior mean and log-variance for `g`.
    pub fn posterior(&self, g: &LayoutGraph) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = Bound::all_frozen(&mut tape, &self.params)?;
        let (_, pooled) = encode_graph(&mut tape, g, &p, self.training.layers)?;
        let (mu, log_var) = vae_heads(&mut tape, pooled, &p)?;
        Ok((tape.value(mu).clone(), tape.value(log_var).clone()))
    }

    /// Pooled encoder embedding of `g`.
    pub fn encode(&self, g: &LayoutGraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = Bound::all_frozen(&mut tape, &self.params)?;
        let (_, pooled) = encode_graph(&mut tape, g, &p, self.training.layers)?;
        Ok(tape.value(pooled).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<SoftGraph> {
        let mut tape = Tape::new();
        let p = Bound::all_frozen(&mut tape, &self.params)?;
        let z = tape.constant(z.clone().reshape(vec![1, self.training.d_latent])?);
        let s = decode(&mut tape, z, &p, self.training.n_max)?;
        Ok(s.values(&tape))
    }

    pub fn discriminate(&self, s: &SoftGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let p = Bound::all_frozen(&mut tape, &self.params)?;
        let s = SoftVars::constant(&mut tape, s)?;
        let d = discriminate(&mut tape, &s, &p, self.training.layers)?;
        Ok(tape.value(d).item())
    }

    /// One Adam update of the discriminator on `real` against `fake`, pairwise,
    /// followed by weight clamping. Returns the mean discriminator loss before
    /// the update.
    pub fn discriminator_step(&mut self, real: &[&SoftGraph], fake: &[SoftGraph]) -> Result<f64> {
        assert_eq!(real.len(), fake.len(), "one fake per real example");
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &self.params, names::is_discriminator)?;
        let mut terms = Vec::with_capacity(real.len());
        for (r, f) in real.iter().zip(fake) {
            let r = SoftVars::constant(&mut tape, r)?;
            let d_real = discriminate(&mut tape, &r, &p, self.training.layers)?;
            let f = SoftVars::constant(&mut tape, f)?;
            let d_fake = discriminate(&mut tape, &f, &p, self.training.layers)?;
            terms.push(discriminator_loss(&mut tape, d_real, d_fake)?);
        }
        let sum = tape.add_all(&terms)?;
        let loss = tape.scale(sum, 1.0 / real.len() as f64);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NumericFailure(format!("discriminator loss is {value}")));
        }
        tape.backward(loss, &mut self.params)?;
        adam_step(&mut self.params, &mut self.disc_opt)?;
        clip_discriminator(&mut self.params, self.training.disc_clip);
        Ok(value)
    }

    /// Mean reconstruction loss decoding each graph from its posterior mean.
    pub fn mean_reconstruction(&self, graphs: &[LayoutGraph]) -> Result<f64> {
        if graphs.is_empty() {
            return Err(Error::EmptyCorpus("reconstruction".into()));
        }
        let mut total = 0.0;
        for g in graphs {
            let mut tape = Tape::new();
            let p = Bound::all_frozen(&mut tape, &self.params)?;
            let (_, pooled) = encode_graph(&mut tape, g, &p, self.training.layers)?;
            let (mu, _) = vae_heads(&mut tape, pooled, &p)?;
            let s = decode(&mut tape, mu, &p, self.training.n_max)?;
            let loss = reconstruction_loss(&mut tape, &s, g)?;
            total += tape.value(loss).item();
        }
        Ok(total / graphs.len() as f64)
    }
}

/// Validates `corpus` and builds one graph per document.
pub fn corpus_graphs(corpus: &[LayoutDocument], graph_cfg: &GraphConfig, n_max: usize) -> Result<Vec<LayoutGraph>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus("training".into()));
    }
    corpus
        .iter()
        .map(|doc| {
            doc.validate()?;
            if doc.elements.len() > n_max {
                return Err(Error::Capacity {
                    doc_id: doc.id.clone(),
                    n: doc.elements.len(),
                    n_max,
                });
            }
            build_graph(doc, graph_cfg)
        })
        .collect()
}

pub fn train(corpus: &[LayoutDocument], graph_cfg: &GraphConfig, cfg: &TrainingConfig) -> Result<ModelCheckpoint> {
    train_with_progress(corpus, graph_cfg, cfg, |_| {})
}

/// Like [`train`], calling `progress` after every epoch.
pub fn train_with_progress(
    corpus: &[LayoutDocument],
    graph_cfg: &GraphConfig,
    cfg: &TrainingConfig,
    progress: impl FnMut(&EpochLoss),
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let graphs = corpus_graphs(corpus, graph_cfg, cfg.n_max)?;
    let mut ckpt = ModelCheckpoint::init(cfg.clone(), *graph_cfg)?;
    run_epochs(&mut ckpt, &graphs, cfg.epochs, progress)?;
    Ok(ckpt)
}

/// Permitted changes when continuing from a checkpoint. Architecture fields
/// may be restated but must match the checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FineTuneOverrides {
    pub epochs: usize,
    pub lr: Option<f64>,
    pub d_hidden: Option<usize>,
    pub d_latent: Option<usize>,
    pub layers: Option<usize>,
    pub n_max: Option<usize>,
}

/// Continues training `ckpt` on `corpus` from its parameters, optimizer
/// moments and RNG state.
pub fn fine_tune(
    ckpt: &ModelCheckpoint,
    corpus: &[LayoutDocument],
    overrides: &FineTuneOverrides,
    progress: impl FnMut(&EpochLoss),
) -> Result<ModelCheckpoint> {
    let t = &ckpt.training;
    for (field, want, have) in [
        ("d_hidden", overrides.d_hidden, t.d_hidden),
        ("d_latent", overrides.d_latent, t.d_latent),
        ("layers", overrides.layers, t.layers),
        ("n_max", overrides.n_max, t.n_max),
    ] {
        if let Some(want) = want {
            if want != have {
                return Err(Error::Config(format!(
                    "architecture mismatch: {field} is {have} in the checkpoint, override asks for {want}"
                )));
            }
        }
    }
    let mut next = ckpt.clone();
    if let Some(lr) = overrides.lr {
        next.training.lr = lr;
        next.gen_opt.config.lr = lr;
        next.disc_opt.config.lr = lr;
    }
    next.training.validate()?;
    let graphs = corpus_graphs(corpus, &next.graph, next.training.n_max)?;
    run_epochs(&mut next, &graphs, overrides.epochs, progress)?;
    Ok(next)
}

/// Clamps every discriminator parameter to `[-c, c]`; no-op for `c = 0`.
pub fn clip_discriminator(params: &mut ParamStore, c: f64) {
    if c <= 0.0 {
        return;
    }
    for (name, p) in params.iter_mut() {
        if names::is_discriminator(name) {
            for v in p.value.data_mut() {
                *v = v.clamp(-c, c);
            }
        }
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericFailure(msg) => Error::NumericFailure(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

fn run_epochs(
    ckpt: &mut ModelCheckpoint,
    graphs: &[LayoutGraph],
    epochs: usize,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<()> {
    let cfg = ckpt.training.clone();
    let lifted: Vec<SoftGraph> = graphs
        .iter()
        .map(|g| SoftGraph::from_graph(g, cfg.n_max))
        .collect::<Result<_>>()?;
    let mut rng = Rng::new(ckpt.rng_state);
    for _ in 0..epochs {
        let epoch = ckpt.loss_trace.len() + 1;
        // A fresh permutation each epoch, so resuming needs only the RNG state.
        let mut order: Vec<usize> = (0..graphs.len()).collect();
        rng.shuffle(&mut order);
        let (mut gen_sum, mut disc_sum, mut recon_sum) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = b + 1;
            let weight = chunk.len() as f64;

            let real: Vec<&SoftGraph> = chunk.iter().map(|&i| &lifted[i]).collect();
            let fake = chunk
                .iter()
                .map(|_| ckpt.decode(&rng.normal_tensor(&[cfg.d_latent])))
                .collect::<Result<Vec<_>>>()?;
            let value = ckpt
                .discriminator_step(&real, &fake)
                .map_err(|e| with_context(e, epoch, batch))?;
            disc_sum += value * weight;

            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &ckpt.params, names::is_generator)?;
            let batch_graphs: Vec<&LayoutGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let eps: Vec<Tensor> = chunk.iter().map(|_| rng.normal_tensor(&[1, cfg.d_latent])).collect();
            let terms = total_generator_loss(
                &mut tape,
                &p,
                GeneratorBatch {
                    graphs: &batch_graphs,
                    eps: &eps,
                },
                &cfg,
            )?;
            let value = tape.value(terms.total).item();
            if !value.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "epoch {epoch}, batch {batch}: generator loss is {value}"
                )));
            }
            tape.backward(terms.total, &mut ckpt.params)?;
            adam_step(&mut ckpt.params, &mut ckpt.gen_opt).map_err(|e| with_context(e.into(), epoch, batch))?;
            gen_sum += value * weight;
            recon_sum += terms.mean_reconstruction * weight;
        }
        let n = graphs.len() as f64;
        let record = EpochLoss {
            epoch,
            generator: gen_sum / n,
            discriminator: disc_sum / n,
            reconstruction: recon_sum / n,
        };
        progress(&record);
        ckpt.loss_trace.push(record);
        ckpt.training.epochs += 1;
    }
    ckpt.rng_state = rng.state();
    Ok(())
}
