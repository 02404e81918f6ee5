//! Scalar-loop reference computations, deliberately independent of the
//! tape: every product here is written out index by index. These back the
//! `equivalence` command and the oracle side of the cell and selector
//! checks.

use crate::cells::{GruWeights, LstmWeights};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::shuttle::AttnWeights;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `w . x_row + u . h_row + b` for one batch row, one output coordinate.
fn gate_pre(w: &Tensor, u: &Tensor, b: &Tensor, x: &[f64], h: &[f64], i: usize) -> f64 {
    let mut acc = b.data()[i];
    for (k, &xv) in x.iter().enumerate() {
        acc += w.at2(i, k) * xv;
    }
    for (k, &hv) in h.iter().enumerate() {
        acc += u.at2(i, k) * hv;
    }
    acc
}

/// One GRU step by scalar loops.
pub fn gru_step(w: &GruWeights, x: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let batch = x.shape()[0];
    let s = w.state_size();
    let mut out = vec![0.0; batch * s];
    for row in 0..batch {
        let xr = x.row(row);
        let hr = h.row(row);
        for i in 0..s {
            let z = sigmoid(gate_pre(&w.wz, &w.uz, &w.bz, xr, hr, i));
            let r_all: Vec<f64> = (0..s)
                .map(|j| sigmoid(gate_pre(&w.wr, &w.ur, &w.br, xr, hr, j)))
                .collect();
            let gated: Vec<f64> = r_all.iter().zip(hr).map(|(r, hv)| r * hv).collect();
            let cand = gate_pre(&w.wh, &w.uh, &w.bh, xr, &gated, i).tanh();
            out[row * s + i] = (1.0 - z) * hr[i] + z * cand;
        }
    }
    let h_new = Tensor::new(&[batch, s], out)?;
    Ok((h_new.clone(), h_new))
}

/// One LSTM step by scalar loops.
pub fn lstm_step(
    w: &LstmWeights,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, (Tensor, Tensor))> {
    let batch = x.shape()[0];
    let s = w.wi.shape()[0];
    let mut h_out = vec![0.0; batch * s];
    let mut c_out = vec![0.0; batch * s];
    for row in 0..batch {
        let xr = x.row(row);
        let hr = h.row(row);
        let cr = c.row(row);
        for i in 0..s {
            let ig = sigmoid(gate_pre(&w.wi, &w.ui, &w.bi, xr, hr, i));
            let fg = sigmoid(gate_pre(&w.wf, &w.uf, &w.bf, xr, hr, i));
            let gg = gate_pre(&w.wg, &w.ug, &w.bg, xr, hr, i).tanh();
            let og = sigmoid(gate_pre(&w.wo, &w.uo, &w.bo, xr, hr, i));
            let c_new = fg * cr[i] + ig * gg;
            c_out[row * s + i] = c_new;
            h_out[row * s + i] = og * c_new.tanh();
        }
    }
    let h_new = Tensor::new(&[batch, s], h_out)?;
    let c_new = Tensor::new(&[batch, s], c_out)?;
    Ok((h_new.clone(), (h_new, c_new)))
}

/// Attention selection by scalar loops: scores, softmax mask, convex
/// combination. Returns (y, alpha).
pub fn select_output(
    attn: &AttnWeights,
    x_proj: &Tensor,
    outputs: &[Tensor],
) -> Result<(Tensor, Tensor)> {
    let batch = x_proj.shape()[0];
    let s = x_proj.shape()[1];
    let n = outputs.len();
    let mut alpha = vec![0.0; batch * n];
    let mut y = vec![0.0; batch * s];
    for row in 0..batch {
        let xr = x_proj.row(row);
        let mut scores = Vec::with_capacity(n);
        for o in outputs {
            let or = o.row(row);
            let mut e = 0.0;
            for i in 0..s {
                let mut pre = 0.0;
                for k in 0..s {
                    pre += attn.w_x.at2(i, k) * xr[k] + attn.w_o.at2(i, k) * or[k];
                }
                e += attn.nu.data()[i] * pre.tanh();
            }
            scores.push(e);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|&e| (e - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            alpha[row * n + j] = e / total;
        }
        for (j, o) in outputs.iter().enumerate() {
            let weight = alpha[row * n + j];
            for (i, &ov) in o.row(row).iter().enumerate() {
                y[row * s + i] += weight * ov;
            }
        }
    }
    Ok((
        Tensor::new(&[batch, s], y)?,
        Tensor::new(&[batch, n], alpha)?,
    ))
}

/// Degenerate-form oracle for D = 1: a bank of independent GRUs feeding
/// the selector. Returns (y, alpha, new states).
pub fn gru_bank(
    procs: &[GruWeights],
    attn: &AttnWeights,
    x: &Tensor,
    states: &[Tensor],
) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let mut outputs = Vec::with_capacity(procs.len());
    let mut new_states = Vec::with_capacity(procs.len());
    for (w, h) in procs.iter().zip(states) {
        let (o, h_new) = gru_step(w, x, h)?;
        outputs.push(o);
        new_states.push(h_new);
    }
    let (y, alpha) = select_output(attn, x, &outputs)?;
    Ok((y, alpha, new_states))
}

/// Degenerate-form oracle for N = 1: the single processor applied D
/// times with per-step states, then the singleton selector. Returns
/// (y, alpha, new states indexed by step).
pub fn shared_stack(
    proc: &GruWeights,
    attn: &AttnWeights,
    x: &Tensor,
    states: &[Tensor],
) -> Result<(Tensor, Tensor, Vec<Tensor>)> {
    let mut new_states = Vec::with_capacity(states.len());
    let mut signal = x.clone();
    for h in states {
        let (o, h_new) = gru_step(proc, &signal, h)?;
        new_states.push(h_new);
        signal = o;
    }
    let (y, alpha) = select_output(attn, x, &[signal])?;
    Ok((y, alpha, new_states))
}
