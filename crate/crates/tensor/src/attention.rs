use std::sync::Arc;

use crate::error::{mismatch, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Scaled cosine attention over windows.
///
/// `q`, `k`, `v` are `[windows, heads, n, d]`. Scores are the cosine
/// similarity of query and key rows divided by the per-head temperature
/// `max(exp(log_tau), TAU_MIN)`, plus `bias` (`[heads, n, n]`, shared by all
/// windows). Where `mask` (`[windows, n, n]`) is false the score is `-inf`
/// before the softmax.
pub fn cosine_attention<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    log_tau: Var,
    bias: Option<Var>,
    mask: Option<Arc<[bool]>>,
) -> Result<Var, TensorError> {
    let sq = tape.shape(q).to_vec();
    if sq.len() != 4 || tape.shape(k) != sq.as_slice() || tape.shape(v)[..3] != sq[..3] {
        return Err(mismatch("cosine_attention", &sq, tape.shape(k)));
    }
    let (w, n) = (sq[0], sq[2]);
    let qn = tape.l2_normalize_rows(q);
    let kn = tape.l2_normalize_rows(k);
    let mut scores = tape.matmul_nt(qn, kn)?;
    scores = tape.temperature_scale(scores, log_tau)?;
    if let Some(b) = bias {
        scores = tape.add_broadcast(scores, b)?;
    }
    if let Some(m) = mask {
        if m.len() != w * n * n {
            return Err(mismatch("cosine_attention mask", &[w, n, n], &[m.len()]));
        }
        scores = tape.masked_fill(scores, m, T::neg_infinity())?;
    }
    let p = tape.softmax(scores);
    tape.matmul(p, v)
}
