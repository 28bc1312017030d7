use layoutgen_numeric::{Tape, Tensor, Var};

use super::{names, num_pairs, pair_index, Bound, SoftVars};
use crate::graph::LayoutGraph;
use crate::layout::ElementType;
use crate::{Error, Result};

/// Minimum decoded box extent.
pub const BBOX_DELTA: f64 = 1e-3;

/// Posterior mean and log-variance, each `1 × d_latent`.
pub fn vae_heads(tape: &mut Tape, pooled: Var, p: &Bound) -> Result<(Var, Var)> {
    let mu = tape.affine(pooled, p.get(names::VAE_MU_W)?, p.get(names::VAE_MU_B)?)?;
    let log_var = tape.affine(pooled, p.get(names::VAE_LOGVAR_W)?, p.get(names::VAE_LOGVAR_B)?)?;
    Ok((mu, log_var))
}

/// `z = mu + exp(log_var / 2) ⊙ eps`, with `eps` supplied by the caller.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let shape = tape.value(mu).shape().to_vec();
    let eps = tape.constant(eps.clone().reshape(shape)?);
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// Maps a `1 × d_latent` latent to slot outputs over `n_max` slots.
pub fn decode(tape: &mut Tape, z: Var, p: &Bound, n_max: usize) -> Result<SoftVars> {
    let hidden = tape.affine(z, p.get(names::DEC_HIDDEN_W)?, p.get(names::DEC_HIDDEN_B)?)?;
    let hidden = tape.relu(hidden);
    let out = tape.affine(hidden, p.get(names::DEC_OUT_W)?, p.get(names::DEC_OUT_B)?)?;
    let n = n_max;

    let presence_logits = tape.slice(out, 0, &[n, 1])?;
    let presence = tape.sigmoid(presence_logits);
    let type_logits = tape.slice(out, n, &[n, ElementType::COUNT])?;
    let type_probs = tape.softmax_rows(type_logits);

    let mut coords = Vec::with_capacity(4);
    for k in 0..4 {
        let logits = tape.slice(out, (9 + k) * n, &[n, 1])?;
        coords.push(tape.sigmoid(logits));
    }
    let delta = tape.constant(Tensor::filled(&[n, 1], BBOX_DELTA));
    let (x0, x1) = ordered_span(tape, coords[0], coords[1], delta)?;
    let (y0, y1) = ordered_span(tape, coords[2], coords[3], delta)?;
    let bbox = tape.concat_cols(&[x0, y0, x1, y1])?;

    let edge_logits = tape.slice(out, 13 * n, &[num_pairs(n), 1])?;
    let edge_probs = tape.sigmoid(edge_logits);
    Ok(SoftVars {
        presence,
        type_probs,
        bbox,
        edge_probs,
    })
}

// lo = min(a, b) capped at 1 − δ, hi = max(a, b) + δ capped at 1, so lo < hi
// even when both sigmoids saturate at 1.
fn ordered_span(tape: &mut Tape, a: Var, b: Var, delta: Var) -> Result<(Var, Var)> {
    let lo = tape.min(a, b)?;
    let lo = tape.clamp_max(lo, 1.0 - BBOX_DELTA);
    let hi = tape.max(a, b)?;
    let hi = tape.add(hi, delta)?;
    let hi = tape.clamp_max(hi, 1.0);
    Ok((lo, hi))
}

/// Presence bce + type cross-entropy + bbox mse + pair bce, slots aligned to
/// nodes in reading order.
pub fn reconstruction_loss(tape: &mut Tape, s: &SoftVars, g: &LayoutGraph) -> Result<Var> {
    let n_max = tape.value(s.presence).len();
    let n = g.num_nodes();
    if n > n_max {
        return Err(Error::Capacity {
            doc_id: g.doc_id.clone(),
            n,
            n_max,
        });
    }
    let presence_target: Vec<f64> = (0..n_max).map(|k| if k < n { 1.0 } else { 0.0 }).collect();
    let presence = tape.bce_sum(s.presence, &Tensor::vector(presence_target))?;

    let mut type_target = Vec::with_capacity(n * ElementType::COUNT);
    let mut bbox_target = Vec::with_capacity(n * 4);
    for i in 0..n {
        let row = g.node_features.row(i);
        type_target.extend_from_slice(&row[0..8]);
        bbox_target.extend_from_slice(&row[8..12]);
    }
    let types = tape.slice(s.type_probs, 0, &[n, ElementType::COUNT])?;
    let types = tape.cross_entropy(types, &Tensor::new(vec![n, ElementType::COUNT], type_target)?)?;
    let bbox = tape.slice(s.bbox, 0, &[n, 4])?;
    let bbox = tape.mse(bbox, &Tensor::new(vec![n, 4], bbox_target)?)?;

    let mut edge_target = vec![0.0; num_pairs(n_max)];
    let adj = g.adjacency();
    for a in 0..n {
        for b in a + 1..n {
            if adj[a][b] {
                edge_target[pair_index(n_max, a, b)] = 1.0;
            }
        }
    }
    let edges = tape.bce_sum(s.edge_probs, &Tensor::vector(edge_target))?;
    Ok(tape.add_all(&[presence, types, bbox, edges])?)
}

/// Reconstruction plus `beta` times the KL divergence from the prior.
pub fn vae_loss(tape: &mut Tape, s: &SoftVars, g: &LayoutGraph, mu: Var, log_var: Var, beta: f64) -> Result<Var> {
    let recon = reconstruction_loss(tape, s, g)?;
    let kl = tape.kl_diag_gaussian(mu, log_var)?;
    let kl = tape.scale(kl, beta);
    Ok(tape.add(recon, kl)?)
}
