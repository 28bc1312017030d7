use layoutgen_numeric::{Tape, Tensor, Var};

use super::{names, Bound};
use crate::graph::{LayoutGraph, EDGE_FEATURES};
use crate::Result;

/// Directed messages for one message-passing layer.
#[derive(Debug, Clone, Copy)]
pub struct Messages<'a> {
    pub senders: &'a [usize],
    pub receivers: &'a [usize],
    /// `m × d_edge` features per message; `None` only when there are no messages.
    pub features: Option<Var>,
    /// Optional `m`-entry scaling applied to each message before aggregation.
    pub weights: Option<Var>,
}

/// `h_i' = relu(Σ_{j → i} [h_i ‖ h_j ‖ e_ij] · W + b)`.
///
/// `w` is `(2·d_in + d_edge) × d_out`; it is applied blockwise so the
/// concatenation is never materialized.
pub fn message_passing_layer(tape: &mut Tape, h: Var, msgs: &Messages<'_>, w: Var, b: Var) -> Result<Var> {
    let n = tape.value(h).rows();
    let d_in = tape.value(h).cols();
    let (w_rows, d_out) = (tape.value(w).rows(), tape.value(w).cols());
    if w_rows < 2 * d_in {
        return Err(layoutgen_numeric::NumericError::Shape {
            op: "message_passing_layer",
            left: format!("{:?}", [n, d_in]),
            right: format!("{:?}", [w_rows, d_out]),
        }
        .into());
    }
    if msgs.senders.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[n, d_out])));
    }
    let d_edge = w_rows - 2 * d_in;
    let w_recv = tape.slice(w, 0, &[d_in, d_out])?;
    let w_send = tape.slice(w, d_in * d_out, &[d_in, d_out])?;
    let a = tape.matmul(h, w_recv)?;
    let c = tape.matmul(h, w_send)?;
    let from_recv = tape.gather_rows(a, msgs.receivers)?;
    let from_send = tape.gather_rows(c, msgs.senders)?;
    let mut msg = tape.add(from_recv, from_send)?;
    if let Some(e) = msgs.features {
        if d_edge > 0 {
            let w_edge = tape.slice(w, 2 * d_in * d_out, &[d_edge, d_out])?;
            let from_edge = tape.matmul(e, w_edge)?;
            msg = tape.add(msg, from_edge)?;
        }
    }
    msg = tape.add_bias(msg, b)?;
    if let Some(weights) = msgs.weights {
        msg = tape.scale_rows(msg, weights)?;
    }
    let agg = tape.scatter_add_rows(msg, msgs.receivers, n)?;
    Ok(tape.relu(agg))
}

/// Senders, receivers and an `m × EDGE_FEATURES` feature tensor for `g`.
pub fn graph_messages(g: &LayoutGraph) -> (Vec<usize>, Vec<usize>, Option<Tensor>) {
    let msgs = g.messages();
    let senders = msgs.iter().map(|m| m.sender).collect();
    let receivers = msgs.iter().map(|m| m.receiver).collect();
    let features = if msgs.is_empty() {
        None
    } else {
        let data = msgs.iter().flat_map(|m| m.features).collect();
        Some(Tensor::new(vec![msgs.len(), EDGE_FEATURES], data).expect("message feature shape"))
    };
    (senders, receivers, features)
}

/// Input projection then `layers` message-passing layers; returns node
/// embeddings `n × d_hidden` and their row mean `1 × d_hidden`.
pub fn encode_graph(tape: &mut Tape, g: &LayoutGraph, p: &Bound, layers: usize) -> Result<(Var, Var)> {
    let x = tape.constant(g.node_features.clone());
    let mut h = tape.affine(x, p.get(names::ENC_PROJ_W)?, p.get(names::ENC_PROJ_B)?)?;
    let (senders, receivers, features) = graph_messages(g);
    let features = features.map(|f| tape.constant(f));
    let msgs = Messages {
        senders: &senders,
        receivers: &receivers,
        features,
        weights: None,
    };
    for l in 0..layers {
        let w = p.get(&names::enc_layer_w(l))?;
        let b = p.get(&names::enc_layer_b(l))?;
        h = message_passing_layer(tape, h, &msgs, w, b)?;
    }
    let pooled = tape.mean_rows(h);
    Ok((h, pooled))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_scalar_example() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let e = tape.constant(Tensor::zeros(&[2, 1]));
        let w = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let msgs = Messages {
            senders: &[1, 0],
            receivers: &[0, 1],
            features: Some(e),
            weights: None,
        };
        let out = message_passing_layer(&mut tape, h, &msgs, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);
    }

    #[test]
    fn isolated_node_is_zero() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::filled(&[1, 2], 5.0));
        let w = tape.constant(Tensor::filled(&[4, 3], 1.0));
        let b = tape.constant(Tensor::filled(&[3], 1.0));
        let msgs = Messages {
            senders: &[],
            receivers: &[],
            features: None,
            weights: None,
        };
        let out = message_passing_layer(&mut tape, h, &msgs, w, b).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn weight_shape_is_checked() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::filled(&[2, 3], 1.0));
        let w = tape.constant(Tensor::filled(&[4, 3], 1.0));
        let b = tape.constant(Tensor::filled(&[3], 0.0));
        let msgs = Messages {
            senders: &[0],
            receivers: &[1],
            features: None,
            weights: None,
        };
        assert!(message_passing_layer(&mut tape, h, &msgs, w, b).is_err());
    }
}
