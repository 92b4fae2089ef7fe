//! Piecewise convolutional sentence encoder with position features.

use crate::corpus::EncodedInstance;
use crate::error::{GbreError, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub const SCOPE: &str = "pcnn";

/// Parameter handles used by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    /// `(2 * max_len + 1) x d_p` table for offsets to the head entity.
    pub head_positions: ParamId,
    /// Same for the tail entity.
    pub tail_positions: ParamId,
    /// `(window * input_width) x c` kernel matrix.
    pub kernel: ParamId,
    /// `1 x c`.
    pub bias: ParamId,
    pub window: usize,
}

/// `x_l = [x_hat_l ; p_head(l) ; p_tail(l)]` for the first `L` positions.
pub fn append_position_features(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    x_hat: Var,
    head_offsets: &[usize],
    tail_offsets: &[usize],
) -> Result<Var> {
    let l = tape.value(x_hat).rows();
    if head_offsets.len() < l || tail_offsets.len() < l {
        return Err(GbreError::shape(
            "append_position_features",
            &[l],
            &[head_offsets.len().min(tail_offsets.len())],
        ));
    }
    let ph = tape.gather(store, params.head_positions, &head_offsets[..l])?;
    let pt = tape.gather(store, params.tail_positions, &tail_offsets[..l])?;
    tape.concat_cols(&[x_hat, ph, pt])
}

/// Same-length convolution: each position sees `window` consecutive rows
/// centred on it, with zero rows beyond either end. Returns `c x L`.
pub fn convolve(tape: &mut Tape, x: Var, kernel: Var, bias: Var, window: usize) -> Result<Var> {
    let unfolded = tape.unfold(x, window)?;
    let m = tape.matmul(unfolded, kernel)?;
    let m = tape.add_row(m, bias)?;
    Ok(tape.transpose(m))
}

/// Segment column ranges `[0, first]`, `(first, second]`, `(second, L)` for
/// zero-based entity end positions `first <= second < L`.
pub fn segments(first: usize, second: usize, len: usize) -> Result<[(usize, usize); 3]> {
    if len == 0 {
        return Err(GbreError::invalid("piecewise_pool", "empty sentence"));
    }
    if first > second || second >= len {
        return Err(GbreError::invalid(
            "piecewise_pool",
            format!("entity positions ({first}, {second}) invalid for length {len}"),
        ));
    }
    Ok([(0, first + 1), (first + 1, second + 1), (second + 1, len)])
}

/// Max over each of the three segments of every row of `M` (`c x L`),
/// giving `c x 3`. Empty segments pool to 0.
pub fn piecewise_pool(tape: &mut Tape, m: Var, first: usize, second: usize) -> Result<Var> {
    let (c, l) = tape.value(m).dims();
    let segs = segments(first, second, l)?;
    let nonempty: Vec<(usize, usize)> = segs.iter().copied().filter(|(lo, hi)| lo < hi).collect();
    let pooled = tape.segment_max(m, &nonempty)?;
    if nonempty.len() == 3 {
        return Ok(pooled);
    }
    let mut cols = Vec::with_capacity(3);
    let mut next = 0;
    for (lo, hi) in segs {
        if lo < hi {
            cols.push(tape.slice_cols(pooled, next, next + 1)?);
            next += 1;
        } else {
            cols.push(tape.constant(Tensor::zeros(&[c, 1])));
        }
    }
    tape.concat_cols(&cols)
}

/// Position features, convolution, piecewise pooling and ReLU over the
/// first `instance.len` positions. Output is `1 x 3c`, laid out kernel by
/// kernel.
pub fn encode_sentence(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EncoderParams,
    x_hat: Var,
    instance: &EncodedInstance,
) -> Result<Var> {
    let (first, second) = instance.segment_bounds();
    tape.scoped(SCOPE, |tape| {
        let x = append_position_features(
            tape,
            store,
            params,
            x_hat,
            &instance.head_offsets,
            &instance.tail_offsets,
        )?;
        let kernel = tape.param(store, params.kernel);
        let bias = tape.param(store, params.bias);
        let m = convolve(tape, x, kernel, bias, params.window)?;
        let u = piecewise_pool(tape, m, first, second)?;
        let c = tape.value(u).rows();
        let flat = tape.reshape(u, 1, 3 * c)?;
        Ok(tape.relu(flat))
    })
}
