use layoutgen_numeric::{Tape, Tensor, Var};

use super::encoder::{message_passing_layer, Messages};
use super::{names, num_pairs, pair_index, Bound, SoftVars};
use crate::Result;

/// Slot features: presence, presence-gated type distribution and box, slot fraction.
pub const DISC_NODE_FEATURES: usize = 14;
/// Box-center offset, receiver minus sender.
pub const DISC_EDGE_FEATURES: usize = 2;

/// Probability that `s` is a real layout.
///
/// Every ordered slot pair exchanges a message scaled by the pair's edge
/// probability; each slot also messages itself with weight 1.
pub fn discriminate(tape: &mut Tape, s: &SoftVars, p: &Bound, layers: usize) -> Result<Var> {
    let n = tape.value(s.presence).len();
    let types = tape.scale_rows(s.type_probs, s.presence)?;
    let bbox = tape.scale_rows(s.bbox, s.presence)?;
    let frac: Vec<f64> = (0..n).map(|k| k as f64 / n as f64).collect();
    let frac = tape.constant(Tensor::new(vec![n, 1], frac)?);
    let x = tape.concat_cols(&[s.presence, types, bbox, frac])?;

    let (senders, receivers, weight_idx) = all_pairs(n);
    // Box centers: (x0 + x1) / 2, (y0 + y1) / 2.
    let center = Tensor::new(vec![4, 2], vec![0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.5])?;
    let center = tape.constant(center);
    let centers = tape.matmul(s.bbox, center)?;
    let at_recv = tape.gather_rows(centers, &receivers)?;
    let at_send = tape.gather_rows(centers, &senders)?;
    let offsets = tape.sub(at_recv, at_send)?;
    let one = tape.constant(Tensor::new(vec![1, 1], vec![1.0])?);
    let weight_src = tape.concat_rows(&[s.edge_probs, one])?;
    let weights = tape.gather_rows(weight_src, &weight_idx)?;
    let msgs = Messages {
        senders: &senders,
        receivers: &receivers,
        features: Some(offsets),
        weights: Some(weights),
    };

    let mut h = tape.affine(x, p.get(names::DISC_PROJ_W)?, p.get(names::DISC_PROJ_B)?)?;
    for l in 0..layers {
        let w = p.get(&names::disc_layer_w(l))?;
        let b = p.get(&names::disc_layer_b(l))?;
        h = message_passing_layer(tape, h, &msgs, w, b)?;
    }
    let pooled = tape.mean_rows(h);
    let logit = tape.affine(pooled, p.get(names::DISC_HEAD_W)?, p.get(names::DISC_HEAD_B)?)?;
    Ok(tape.sigmoid(logit))
}

// Ordered pairs (j → i, i ≠ j) then self-loops; the weight index points into
// edge_probs, or one past its end for the constant self-loop weight.
fn all_pairs(n: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut senders = Vec::with_capacity(n * n);
    let mut receivers = Vec::with_capacity(n * n);
    let mut weight_idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                senders.push(j);
                receivers.push(i);
                weight_idx.push(pair_index(n, i, j));
            }
        }
    }
    for i in 0..n {
        senders.push(i);
        receivers.push(i);
        weight_idx.push(num_pairs(n));
    }
    (senders, receivers, weight_idx)
}
