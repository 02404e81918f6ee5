//! Gated recurrent processor cells: GRU (the processor used by the
//! shuttle layer) and LSTM (a baseline for parameter-count comparisons).
//! Each step is a pure function from (input, state) to (output, new state).

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Tensor, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

/// Exact trainable-scalar count for one cell.
pub fn param_count(kind: CellKind, input_size: usize, state_size: usize) -> usize {
    let per_gate = input_size * state_size + state_size * state_size + state_size;
    match kind {
        CellKind::Gru => 3 * per_gate,
        CellKind::Lstm => 4 * per_gate,
    }
}

/// Owned GRU weights. Gate equations follow Cho et al.: the update gate
/// blends the previous state with a candidate whose recurrent term is
/// reset-gated, and the output equals the new state.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub wz: Tensor,
    pub wr: Tensor,
    pub wh: Tensor,
    pub uz: Tensor,
    pub ur: Tensor,
    pub uh: Tensor,
    pub bz: Tensor,
    pub br: Tensor,
    pub bh: Tensor,
}

const GRU_FIELDS: [&str; 9] = ["Wz", "Wr", "Wh", "Uz", "Ur", "Uh", "bz", "br", "bh"];

impl GruWeights {
    /// Uniform(-1/sqrt(s), 1/sqrt(s)) matrices, zero biases.
    pub fn init<R: Rng>(input_size: usize, state_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (state_size as f64).sqrt();
        let mat_in = |rng: &mut R| Tensor::uniform(&[state_size, input_size], bound, rng);
        let mat_s = |rng: &mut R| Tensor::uniform(&[state_size, state_size], bound, rng);
        GruWeights {
            wz: mat_in(rng),
            wr: mat_in(rng),
            wh: mat_in(rng),
            uz: mat_s(rng),
            ur: mat_s(rng),
            uh: mat_s(rng),
            bz: Tensor::zeros(&[state_size]),
            br: Tensor::zeros(&[state_size]),
            bh: Tensor::zeros(&[state_size]),
        }
    }

    pub fn zeros(input_size: usize, state_size: usize) -> Self {
        GruWeights {
            wz: Tensor::zeros(&[state_size, input_size]),
            wr: Tensor::zeros(&[state_size, input_size]),
            wh: Tensor::zeros(&[state_size, input_size]),
            uz: Tensor::zeros(&[state_size, state_size]),
            ur: Tensor::zeros(&[state_size, state_size]),
            uh: Tensor::zeros(&[state_size, state_size]),
            bz: Tensor::zeros(&[state_size]),
            br: Tensor::zeros(&[state_size]),
            bh: Tensor::zeros(&[state_size]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.wz.shape()[1]
    }

    pub fn state_size(&self) -> usize {
        self.wz.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        param_count(CellKind::Gru, self.input_size(), self.state_size())
    }

    fn fields(&self) -> [&Tensor; 9] {
        [
            &self.wz, &self.wr, &self.wh, &self.uz, &self.ur, &self.uh, &self.bz, &self.br,
            &self.bh,
        ]
    }

    /// Register all nine tensors under `prefix/` in insertion order.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, tensor) in GRU_FIELDS.iter().zip(self.fields()) {
            store.register(&format!("{prefix}/{name}"), tensor.clone())?;
        }
        Ok(())
    }

    /// Clone the current values back out of a store.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| -> Result<Tensor> {
            Ok(store.value_by_name(&format!("{prefix}/{n}"))?.clone())
        };
        Ok(GruWeights {
            wz: get("Wz")?,
            wr: get("Wr")?,
            wh: get("Wh")?,
            uz: get("Uz")?,
            ur: get("Ur")?,
            uh: get("Uh")?,
            bz: get("bz")?,
            br: get("br")?,
            bh: get("bh")?,
        })
    }
}

/// GRU parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wz: ValueId,
    pub wr: ValueId,
    pub wh: ValueId,
    pub uz: ValueId,
    pub ur: ValueId,
    pub uh: ValueId,
    pub bz: ValueId,
    pub br: ValueId,
    pub bh: ValueId,
}

impl GruParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = [None; 9];
        for (slot, name) in ids.iter_mut().zip(GRU_FIELDS) {
            *slot = Some(tape.param(store, &format!("{prefix}/{name}"))?);
        }
        let [wz, wr, wh, uz, ur, uh, bz, br, bh] = ids.map(|i| i.expect("bound"));
        Ok(GruParams {
            wz, wr, wh, uz, ur, uh, bz, br, bh,
        })
    }
}

/// `x . w^T + h . u^T + b`, the shared pre-activation of every gate.
fn affine(
    tape: &mut Tape,
    x: ValueId,
    w: ValueId,
    h: ValueId,
    u: ValueId,
    b: ValueId,
) -> Result<ValueId> {
    let rows = tape.value(x).shape()[0];
    let xs = tape.linear(x, w)?;
    let hs = tape.linear(h, u)?;
    let lin = tape.add(xs, hs)?;
    let bias = tape.broadcast_row(b, rows)?;
    tape.add(lin, bias)
}

/// One GRU step:
///   z = sigma(Wz x + Uz h + bz)
///   r = sigma(Wr x + Ur h + br)
///   hc = tanh(Wh x + Uh (r * h) + bh)
///   h' = (1 - z) * h + z * hc
/// The output is the new state.
pub fn gru_step(
    tape: &mut Tape,
    p: &GruParams,
    x: ValueId,
    h: ValueId,
) -> Result<(ValueId, ValueId)> {
    let z_pre = affine(tape, x, p.wz, h, p.uz, p.bz)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = affine(tape, x, p.wr, h, p.ur, p.br)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let hc_pre = affine(tape, x, p.wh, rh, p.uh, p.bh)?;
    let hc = tape.tanh(hc_pre);

    let one = tape.constant(Tensor::scalar(1.0));
    let keep = tape.sub(one, z)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, hc)?;
    let h_new = tape.add(old, new)?;
    Ok((h_new, h_new))
}

/// Plain-value wrapper: runs `gru_step` on a scratch tape.
pub fn gru_step_tensors(w: &GruWeights, x: &Tensor, h: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut store = ParamStore::new();
    w.register(&mut store, "cell")?;
    let mut tape = Tape::new();
    let p = GruParams::bind(&mut tape, &store, "cell")?;
    let xi = tape.constant(x.clone());
    let hi = tape.constant(h.clone());
    let (o, h_new) = gru_step(&mut tape, &p, xi, hi)?;
    Ok((tape.value(o).clone(), tape.value(h_new).clone()))
}

/// Owned LSTM weights: input, forget, cell-candidate and output gate
/// blocks, each with input map, recurrent map and bias.
#[derive(Debug, Clone)]
pub struct LstmWeights {
    pub wi: Tensor,
    pub ui: Tensor,
    pub bi: Tensor,
    pub wf: Tensor,
    pub uf: Tensor,
    pub bf: Tensor,
    pub wg: Tensor,
    pub ug: Tensor,
    pub bg: Tensor,
    pub wo: Tensor,
    pub uo: Tensor,
    pub bo: Tensor,
}

const LSTM_FIELDS: [&str; 12] = [
    "Wi", "Ui", "bi", "Wf", "Uf", "bf", "Wg", "Ug", "bg", "Wo", "Uo", "bo",
];

impl LstmWeights {
    /// Uniform matrices, zero biases, forget bias raised to 1.0.
    pub fn init<R: Rng>(input_size: usize, state_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (state_size as f64).sqrt();
        let mat_in = |rng: &mut R| Tensor::uniform(&[state_size, input_size], bound, rng);
        let mat_s = |rng: &mut R| Tensor::uniform(&[state_size, state_size], bound, rng);
        LstmWeights {
            wi: mat_in(rng),
            ui: mat_s(rng),
            bi: Tensor::zeros(&[state_size]),
            wf: mat_in(rng),
            uf: mat_s(rng),
            bf: Tensor::filled(&[state_size], 1.0),
            wg: mat_in(rng),
            ug: mat_s(rng),
            bg: Tensor::zeros(&[state_size]),
            wo: mat_in(rng),
            uo: mat_s(rng),
            bo: Tensor::zeros(&[state_size]),
        }
    }

    pub fn zeros(input_size: usize, state_size: usize) -> Self {
        let mat_in = || Tensor::zeros(&[state_size, input_size]);
        let mat_s = || Tensor::zeros(&[state_size, state_size]);
        let bias = || Tensor::zeros(&[state_size]);
        LstmWeights {
            wi: mat_in(),
            ui: mat_s(),
            bi: bias(),
            wf: mat_in(),
            uf: mat_s(),
            bf: bias(),
            wg: mat_in(),
            ug: mat_s(),
            bg: bias(),
            wo: mat_in(),
            uo: mat_s(),
            bo: bias(),
        }
    }

    pub fn param_count(&self) -> usize {
        param_count(CellKind::Lstm, self.wi.shape()[1], self.wi.shape()[0])
    }

    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.wi, &self.ui, &self.bi, &self.wf, &self.uf, &self.bf, &self.wg, &self.ug,
            &self.bg, &self.wo, &self.uo, &self.bo,
        ]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        for (name, tensor) in LSTM_FIELDS.iter().zip(self.fields()) {
            store.register(&format!("{prefix}/{name}"), tensor.clone())?;
        }
        Ok(())
    }
}

/// LSTM parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub wi: ValueId,
    pub ui: ValueId,
    pub bi: ValueId,
    pub wf: ValueId,
    pub uf: ValueId,
    pub bf: ValueId,
    pub wg: ValueId,
    pub ug: ValueId,
    pub bg: ValueId,
    pub wo: ValueId,
    pub uo: ValueId,
    pub bo: ValueId,
}

impl LstmParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut ids = [None; 12];
        for (slot, name) in ids.iter_mut().zip(LSTM_FIELDS) {
            *slot = Some(tape.param(store, &format!("{prefix}/{name}"))?);
        }
        let [wi, ui, bi, wf, uf, bf, wg, ug, bg, wo, uo, bo] = ids.map(|i| i.expect("bound"));
        Ok(LstmParams {
            wi, ui, bi, wf, uf, bf, wg, ug, bg, wo, uo, bo,
        })
    }
}

/// One standard LSTM step:
///   i = sigma(Wi x + Ui h + bi), f = sigma(Wf x + Uf h + bf)
///   g = tanh(Wg x + Ug h + bg), o = sigma(Wo x + Uo h + bo)
///   c' = f * c + i * g, h' = o * tanh(c')
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmParams,
    x: ValueId,
    state: (ValueId, ValueId),
) -> Result<(ValueId, (ValueId, ValueId))> {
    let (h, c) = state;
    let i_pre = affine(tape, x, p.wi, h, p.ui, p.bi)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = affine(tape, x, p.wf, h, p.uf, p.bf)?;
    let f = tape.sigmoid(f_pre);
    let g_pre = affine(tape, x, p.wg, h, p.ug, p.bg)?;
    let g = tape.tanh(g_pre);
    let o_pre = affine(tape, x, p.wo, h, p.uo, p.bo)?;
    let o = tape.sigmoid(o_pre);

    let hold = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(hold, write)?;
    let c_act = tape.tanh(c_new);
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, (h_new, c_new)))
}

/// Plain-value wrapper for one LSTM step on a scratch tape.
pub fn lstm_step_tensors(
    w: &LstmWeights,
    x: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, (Tensor, Tensor))> {
    let mut store = ParamStore::new();
    w.register(&mut store, "cell")?;
    let mut tape = Tape::new();
    let p = LstmParams::bind(&mut tape, &store, "cell")?;
    let xi = tape.constant(x.clone());
    let hi = tape.constant(h.clone());
    let ci = tape.constant(c.clone());
    let (o, (h_new, c_new)) = lstm_step(&mut tape, &p, xi, (hi, ci))?;
    Ok((
        tape.value(o).clone(),
        (tape.value(h_new).clone(), tape.value(c_new).clone()),
    ))
}
