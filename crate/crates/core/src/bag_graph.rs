//! One round of message passing over the fully connected graph of a bag.
//!
//! Edge weights are row-softmaxed cosine similarities between sentence
//! vectors, so there are no trainable parameters in this layer.

use rand::Rng;

use crate::error::{GbreError, Result};
use crate::numerics::{Tape, Var};

pub const SCOPE: &str = "bag_graph";

#[derive(Clone, Copy, Debug)]
pub struct BagGraphOutput {
    /// Updated sentence matrix, `N x 3c`.
    pub updated: Var,
    /// Row-stochastic attention, `N x N`.
    pub alpha: Var,
}

/// `s'_i = sum_j softmax_j(cos(s_i, s_j)) s_j`, followed by dropout on the
/// updated rows when `dropout` is given.
pub fn bag_self_attention<R: Rng + ?Sized>(
    tape: &mut Tape,
    sentences: Var,
    dropout: Option<(f64, &mut R)>,
) -> Result<BagGraphOutput> {
    if !tape.value(sentences).is_finite() {
        return Err(GbreError::NonFinite("bag_self_attention input".into()));
    }
    tape.scoped(SCOPE, |tape| {
        let scores = tape.cosine_rows(sentences)?;
        let alpha = tape.softmax_rows(scores)?;
        let mut updated = tape.matmul(alpha, sentences)?;
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                updated = tape.dropout(updated, rate, rng)?;
            }
        }
        Ok(BagGraphOutput { updated, alpha })
    })
}
