//! Bidirectional attention between a sentence and its relation query.
//!
//! A trainable trilinear score compares every sentence word with every
//! query word. Sentence-to-query attention gives each sentence position a
//! query summary; query-to-sentence attention picks out the sentence words
//! most related to the query. Both are fused with the original word vectors
//! into a `3 * d_w` wide representation per position.

use crate::error::{GbreError, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const SCOPE: &str = "qs_attention";

/// Pre-softmax value used for padded positions.
pub const MASK_VALUE: f64 = -1e9;

/// Query-aware sentence and the attention distributions behind it.
#[derive(Clone, Copy, Debug)]
pub struct QueryAwareSentence {
    /// `L x 3d_w`; rows at PAD positions are zero.
    pub fused: Var,
    /// Sentence-to-query weights, `L x T`.
    pub s2q: Var,
    /// Query-to-sentence weights, `1 x L`.
    pub q2s: Var,
}

fn mask_tensor(rows: &[bool], cols: &[bool]) -> Tensor {
    let data = rows
        .iter()
        .flat_map(|&r| {
            cols.iter()
                .map(move |&c| if r && c { 0.0 } else { MASK_VALUE })
        })
        .collect();
    Tensor::matrix(rows.len(), cols.len(), data).expect("nonempty mask")
}

fn check_mask(op: &'static str, mask: &[bool], rows: usize) -> Result<()> {
    if mask.len() != rows {
        return Err(GbreError::shape(op, &[rows], &[mask.len()]));
    }
    Ok(())
}

/// `H[l, t] = W_h . [w_l ; q_t ; w_l * q_t]`, with entries in PAD rows or
/// columns replaced by [`MASK_VALUE`]-shifted scores.
///
/// The trilinear form is split as `a.w_l + b.q_t + (w_l * c).q_t` so the
/// `L x T x 3d_w` concatenation never has to be materialized.
pub fn similarity_matrix(
    tape: &mut Tape,
    sentence: Var,
    query: Var,
    w_h: Var,
    sentence_mask: &[bool],
    query_mask: &[bool],
) -> Result<Var> {
    let (l, d) = tape.value(sentence).dims();
    let (t, dq) = tape.value(query).dims();
    if d != dq {
        return Err(GbreError::shape("similarity_matrix", &[l, d], &[t, dq]));
    }
    let wh = tape.value(w_h).dims();
    if wh != (1, 3 * d) {
        return Err(GbreError::shape(
            "similarity_matrix",
            &[1, 3 * d],
            &[wh.0, wh.1],
        ));
    }
    check_mask("similarity_matrix", sentence_mask, l)?;
    check_mask("similarity_matrix", query_mask, t)?;

    let a = tape.slice_cols(w_h, 0, d)?;
    let b = tape.slice_cols(w_h, d, 2 * d)?;
    let c = tape.slice_cols(w_h, 2 * d, 3 * d)?;

    let a_col = tape.transpose(a);
    let sent_term = tape.matmul(sentence, a_col)?; // L x 1
    let ones_t = tape.constant(Tensor::filled(&[1, t], 1.0));
    let sent_term = tape.matmul(sent_term, ones_t)?;

    let b_col = tape.transpose(b);
    let query_term = tape.matmul(query, b_col)?; // T x 1
    let query_term = tape.transpose(query_term);
    let query_term = tape.tile_rows(query_term, l)?;

    let weighted = tape.mul_row(sentence, c)?;
    let q_t = tape.transpose(query);
    let cross = tape.matmul(weighted, q_t)?; // L x T

    let h = tape.add(cross, sent_term)?;
    let h = tape.add(h, query_term)?;
    let mask = tape.constant(mask_tensor(sentence_mask, query_mask));
    tape.add(h, mask)
}

/// Sentence-to-query attention: row softmax of `H` and the matching
/// weighted sum of query vectors (`L x d_w`). Returns `(weights, q_hat)`.
pub fn s2q_attention(
    tape: &mut Tape,
    h: Var,
    query: Var,
    query_mask: &[bool],
) -> Result<(Var, Var)> {
    if !query_mask.iter().any(|&v| v) {
        return Err(GbreError::invalid(
            "s2q_attention",
            "query has no valid position",
        ));
    }
    let alpha = tape.softmax_rows(h)?;
    let q_hat = tape.matmul(alpha, query)?;
    Ok((alpha, q_hat))
}

/// Query-to-sentence attention: softmax over sentence positions of the row
/// maxima of `H`, then the weighted sum of sentence vectors (`1 x d_w`).
/// Returns `(weights, w_hat)`.
pub fn q2s_attention(tape: &mut Tape, h: Var, sentence: Var) -> Result<(Var, Var)> {
    let (l, t) = tape.value(h).dims();
    if l == 0 || t == 0 {
        return Err(GbreError::invalid(
            "q2s_attention",
            "empty similarity matrix",
        ));
    }
    let row_max = tape.segment_max(h, &[(0, t)])?; // L x 1
    let row_max = tape.transpose(row_max);
    let alpha = tape.softmax_rows(row_max)?;
    let w_hat = tape.matmul(alpha, sentence)?;
    Ok((alpha, w_hat))
}

/// `x_l = [w_l ; w_l * q_hat_l ; w_l * w_hat]`, PAD rows zeroed.
pub fn fuse(
    tape: &mut Tape,
    sentence: Var,
    q_hat: Var,
    w_hat: Var,
    sentence_mask: &[bool],
) -> Result<Var> {
    let (l, d) = tape.value(sentence).dims();
    check_mask("fuse", sentence_mask, l)?;
    let with_query = tape.mul(sentence, q_hat)?;
    let tiled = tape.tile_rows(w_hat, l)?;
    let with_focus = tape.mul(sentence, tiled)?;
    let fused = tape.concat_cols(&[sentence, with_query, with_focus])?;
    let keep: Vec<f64> = sentence_mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, 3 * d))
        .collect();
    let keep = tape.constant(Tensor::matrix(l, 3 * d, keep)?);
    tape.mul(fused, keep)
}

/// Full query-sentence attention block, recorded under the
/// `qs_attention` scope.
pub fn query_sentence_attention(
    tape: &mut Tape,
    sentence: Var,
    query: Var,
    w_h: Var,
    sentence_mask: &[bool],
    query_mask: &[bool],
) -> Result<QueryAwareSentence> {
    tape.scoped(SCOPE, |tape| {
        let h = similarity_matrix(tape, sentence, query, w_h, sentence_mask, query_mask)?;
        let (s2q, q_hat) = s2q_attention(tape, h, query, query_mask)?;
        let (q2s, w_hat) = q2s_attention(tape, h, sentence)?;
        let fused = fuse(tape, sentence, q_hat, w_hat, sentence_mask)?;
        Ok(QueryAwareSentence { fused, s2q, q2s })
    })
}
