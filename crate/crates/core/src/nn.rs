//! Word embedding, the LSTM cell and the word-prediction head, built on the tape.

use crate::error::{Error, Result};
use crate::model::{HeadWeights, LstmWeights};
use crate::tape::{Tape, Var};
use crate::vocab::TokenId;

/// Looks up embedding rows of `ids`, giving `[ids.len(), d_e]`.
pub fn embed(tape: &mut Tape, table: Var, ids: &[TokenId]) -> Result<Var> {
    let size = tape.value(table).rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: bad,
            size,
        });
    }
    tape.index_select(table, ids)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    /// Output fed to the word head. Equal to `h`.
    pub o: Var,
    pub h: Var,
    pub c: Var,
}

/// One LSTM step over a batch: `x [B, d_in]`, `h_prev`/`c_prev [B, h]`.
pub fn lstm_step(tape: &mut Tape, w: &LstmWeights<Var>, h_prev: Var, c_prev: Var, x: Var) -> Result<LstmOutput> {
    let hid = tape.value(w.w_hidden).rows();
    for (what, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
        let t = tape.value(v);
        if t.cols() != hid || t.rows() != tape.value(x).rows() {
            return Err(Error::InvalidArgument(format!(
                "lstm {what} has shape {:?}, expected [{}, {hid}]",
                t.shape(),
                tape.value(x).rows()
            )));
        }
    }
    let zx = tape.matmul(x, w.w_input)?;
    let zh = tape.matmul(h_prev, w.w_hidden)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, w.bias)?;
    let i = tape.slice_cols(z, 0, hid)?;
    let f = tape.slice_cols(z, hid, hid)?;
    let o = tape.slice_cols(z, 2 * hid, hid)?;
    let g = tape.slice_cols(z, 3 * hid, hid)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let o = tape.sigmoid(o)?;
    let g = tape.tanh(g)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmOutput { o: h, h, c })
}

/// Unnormalised word scores `o W + b`, `[B, |V|]`.
pub fn word_logits(tape: &mut Tape, head: &HeadWeights<Var>, o: Var) -> Result<Var> {
    let z = tape.matmul(o, head.w)?;
    tape.add(z, head.b)
}

/// Word distribution `softmax(o W + b)`.
pub fn predict_word_dist(tape: &mut Tape, head: &HeadWeights<Var>, o: Var) -> Result<Var> {
    let z = word_logits(tape, head, o)?;
    tape.softmax(z)
}

/// Log of [`predict_word_dist`], computed stably.
pub fn predict_word_log_dist(tape: &mut Tape, head: &HeadWeights<Var>, o: Var) -> Result<Var> {
    let z = word_logits(tape, head, o)?;
    tape.log_softmax(z)
}
