use layoutgen_numeric::{finite_diff_check, GradCheckReport, ParamStore, Rng, Tape, Tensor, Var};

use super::{
    decode, discriminate, encode_graph, init_params, names, reconstruction_loss, reparameterize, vae_heads, Bound, GenObjective,
    SoftGraph, SoftVars, TrainingConfig,
};
use crate::graph::{build_graph, GraphConfig, LayoutGraph};
use crate::layout::{BBox, ElementType, LayoutDocument, LayoutElement};
use crate::Result;

/// `log d_real + log(1 − d_fake)`, probabilities clamped.
pub fn gan_value(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let loss = discriminator_loss(tape, d_real, d_fake)?;
    Ok(tape.scale(loss, -1.0))
}

/// `−gan_value`, minimized by the discriminator.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = tape.bce(d_real, &Tensor::scalar(1.0))?;
    let fake = tape.bce(d_fake, &Tensor::scalar(0.0))?;
    Ok(tape.add(real, fake)?)
}

/// Generator side of the adversarial game: `log(1 − d_fake)` under
/// minimax, `−log d_fake` under the non-saturating objective.
pub fn generator_adversarial_loss(tape: &mut Tape, d_fake: Var, objective: GenObjective) -> Result<Var> {
    Ok(match objective {
        GenObjective::Minimax => {
            let l = tape.bce(d_fake, &Tensor::scalar(0.0))?;
            tape.scale(l, -1.0)
        }
        GenObjective::NonSaturating => tape.bce(d_fake, &Tensor::scalar(1.0))?,
    })
}

/// One minibatch of training graphs with frozen reparameterization noise.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorBatch<'a> {
    pub graphs: &'a [&'a LayoutGraph],
    /// One `d_latent` noise vector per graph.
    pub eps: &'a [Tensor],
}

/// Scalar pieces of [`total_generator_loss`] for logging.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub total: Var,
    pub mean_vae: f64,
    pub mean_reconstruction: f64,
    pub mean_adversarial: f64,
}

/// `mean(recon + β·KL) + γ·mean(adversarial) + λ·Σ‖θ_gen‖²`.
///
/// The adversarial term scores the decoded reconstruction of each graph.
/// With `γ = 0` the discriminator is not evaluated.
pub fn total_generator_loss(
    tape: &mut Tape,
    p: &Bound,
    batch: GeneratorBatch<'_>,
    cfg: &TrainingConfig,
) -> Result<GeneratorTerms> {
    assert_eq!(batch.graphs.len(), batch.eps.len(), "one noise vector per graph");
    let inv = 1.0 / batch.graphs.len() as f64;
    let mut vae_terms = Vec::with_capacity(batch.graphs.len());
    let mut adv_terms = Vec::with_capacity(batch.graphs.len());
    let mut recon_sum = 0.0;
    for (g, eps) in batch.graphs.iter().zip(batch.eps) {
        let (_, pooled) = encode_graph(tape, g, p, cfg.layers)?;
        let (mu, log_var) = vae_heads(tape, pooled, p)?;
        let z = reparameterize(tape, mu, log_var, eps)?;
        let soft = decode(tape, z, p, cfg.n_max)?;
        let recon = reconstruction_loss(tape, &soft, g)?;
        recon_sum += tape.value(recon).item();
        let kl = tape.kl_diag_gaussian(mu, log_var)?;
        let kl = tape.scale(kl, cfg.beta);
        let vae = tape.add(recon, kl)?;
        vae_terms.push(vae);
        if cfg.gamma != 0.0 {
            let d_fake = discriminate(tape, &soft, p, cfg.layers)?;
            adv_terms.push(generator_adversarial_loss(tape, d_fake, cfg.gen_objective)?);
        }
    }
    let vae_sum = tape.add_all(&vae_terms)?;
    let mean_vae = tape.scale(vae_sum, inv);
    let mut total = mean_vae;
    let mut mean_adversarial = 0.0;
    if !adv_terms.is_empty() {
        let adv_sum = tape.add_all(&adv_terms)?;
        let adv = tape.scale(adv_sum, inv);
        mean_adversarial = tape.value(adv).item();
        let weighted = tape.scale(adv, cfg.gamma);
        total = tape.add(total, weighted)?;
    }
    let gen_params: Vec<Var> = p
        .iter()
        .filter(|(name, _)| names::is_generator(name))
        .map(|(_, v)| v)
        .collect();
    let squares: Vec<Var> = gen_params.into_iter().map(|v| tape.sum_squares(v)).collect();
    let l2 = tape.add_all(&squares)?;
    let l2 = tape.scale(l2, cfg.lambda);
    total = tape.add(total, l2)?;
    Ok(GeneratorTerms {
        total,
        mean_vae: tape.value(mean_vae).item(),
        mean_reconstruction: recon_sum * inv,
        mean_adversarial,
    })
}

/// Generator loss on `graph` plus the discriminator loss of `graph` against
/// the decoded prior sample `z_prior`, every parameter trainable.
pub fn composite_loss(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &LayoutGraph,
    eps: &Tensor,
    z_prior: &Tensor,
    cfg: &TrainingConfig,
) -> Result<Var> {
    let p = Bound::all_trainable(tape, store)?;
    let batch = GeneratorBatch {
        graphs: &[graph],
        eps: std::slice::from_ref(eps),
    };
    let gen = total_generator_loss(tape, &p, batch, cfg)?;
    let real = SoftGraph::from_graph(graph, cfg.n_max)?;
    let real = SoftVars::constant(tape, &real)?;
    let d_real = discriminate(tape, &real, &p, cfg.layers)?;
    let z = tape.constant(z_prior.clone());
    let fake = decode(tape, z, &p, cfg.n_max)?;
    let d_fake = discriminate(tape, &fake, &p, cfg.layers)?;
    let disc = discriminator_loss(tape, d_real, d_fake)?;
    Ok(tape.add(gen.total, disc)?)
}

/// A four-element page: title, text block, image and its caption.
pub fn grad_check_fixture() -> LayoutGraph {
    let el = |t, b: [f64; 4]| LayoutElement::new(t, BBox::new(b[0], b[1], b[2], b[3]));
    let doc = LayoutDocument::new(
        "fixture",
        vec![
            el(ElementType::Title, [0.10, 0.05, 0.90, 0.12]),
            el(ElementType::TextBlock, [0.10, 0.15, 0.90, 0.40]),
            el(ElementType::Image, [0.20, 0.45, 0.80, 0.70]),
            el(ElementType::Caption, [0.20, 0.72, 0.80, 0.76]),
        ],
    );
    build_graph(&doc, &GraphConfig::default()).expect("fixture is valid")
}

/// Finite-difference check of [`composite_loss`] over every parameter of a
/// model initialized from `seed`, noise frozen.
pub fn run_grad_check(cfg: &TrainingConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(seed);
    let mut store = init_params(cfg, &mut rng);
    // Nonzero biases so no pre-activation sits exactly on a relu kink.
    for (name, param) in store.iter_mut() {
        if name.ends_with(".b") {
            for v in param.value.data_mut() {
                *v = 0.1 * rng.normal();
            }
        }
    }
    let graph = grad_check_fixture();
    let eps = rng.normal_tensor(&[1, cfg.d_latent]);
    let z_prior = rng.normal_tensor(&[1, cfg.d_latent]);
    Ok(finite_diff_check(
        |tape, store| {
            composite_loss(tape, store, &graph, &eps, &z_prior, cfg)
                .map_err(|e| layoutgen_numeric::NumericError::NumericFailure(e.to_string()))
        },
        &mut store,
        1e-5,
    )?)
}
