//! The shuttle layer: an input projector, a ring of N weight-shared gated
//! processors unrolled for D steps with an N x D grid of standalone hidden
//! states, and an additive-attention selector over the N pathway outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{self, gru_step, GruParams, GruWeights};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, ValueId};

/// Layer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ShuttleConfig {
    /// Number of processors in the ring (N).
    #[serde(rename = "N")]
    pub processors: usize,
    /// Processor applications per pathway (D).
    #[serde(rename = "D")]
    pub steps: usize,
    /// Ring stride between consecutive steps (K).
    #[serde(rename = "K", default = "default_stride")]
    pub stride: usize,
    /// Raw feature width (F).
    pub input_size: usize,
    /// Hidden state width (s).
    pub state_size: usize,
    /// Whether the projector is present. Without it the input must
    /// already have the state width.
    #[serde(default = "default_projector")]
    pub projector: bool,
}

fn default_stride() -> usize {
    1
}

fn default_projector() -> bool {
    true
}

impl ShuttleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.processors < 1
            || self.steps < 1
            || self.stride < 1
            || self.input_size < 1
            || self.state_size < 1
        {
            return Err(Error::contract(format!(
                "all shuttle dimensions must be >= 1, got {self:?}"
            )));
        }
        if !self.projector && self.input_size != self.state_size {
            return Err(Error::contract(format!(
                "projector disabled but input_size {} != state_size {}",
                self.input_size, self.state_size
            )));
        }
        Ok(())
    }
}

/// Processor applied at step `step` (1-based) of pathway `pathway`:
/// `(pathway + (step - 1) * K) mod N`.
pub fn pathway_processor_index(
    cfg: &ShuttleConfig,
    pathway: usize,
    step: usize,
) -> Result<usize> {
    if pathway >= cfg.processors {
        return Err(Error::contract(format!(
            "pathway {pathway} out of range for {} processors",
            cfg.processors
        )));
    }
    if step < 1 || step > cfg.steps {
        return Err(Error::contract(format!(
            "step {step} out of range 1..={}",
            cfg.steps
        )));
    }
    Ok((pathway + (step - 1) * cfg.stride) % cfg.processors)
}

/// The N x D grid of per-(processor, step) hidden states carried across
/// time. Cell (n, d) is touched only by processor n at step d.
#[derive(Debug, Clone)]
pub struct StateGrid {
    cells: Vec<Vec<Tensor>>,
    batch: usize,
}

impl StateGrid {
    pub fn zeros(cfg: &ShuttleConfig, batch: usize) -> Self {
        let cells = (0..cfg.processors)
            .map(|_| {
                (0..cfg.steps)
                    .map(|_| Tensor::zeros(&[batch, cfg.state_size]))
                    .collect()
            })
            .collect();
        StateGrid { cells, batch }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// State of processor `n` at step `d` (1-based step).
    pub fn get(&self, n: usize, d: usize) -> &Tensor {
        &self.cells[n][d - 1]
    }

    pub fn set(&mut self, n: usize, d: usize, value: Tensor) {
        self.cells[n][d - 1] = value;
    }
}

/// Projector weights: the fully-connected map plus the post-normalization
/// bias.
#[derive(Debug, Clone)]
pub struct ProjectorWeights {
    pub w_p: Tensor,
    pub b: Tensor,
}

impl ProjectorWeights {
    pub fn init<R: Rng>(input_size: usize, state_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        ProjectorWeights {
            w_p: Tensor::uniform(&[state_size, input_size], bound, rng),
            b: Tensor::zeros(&[state_size]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w_p.len() + self.b.len()
    }
}

/// Non-trainable batch-norm inference statistics, updated by exponential
/// moving average during training.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

impl BnState {
    pub fn new(state_size: usize) -> Self {
        BnState {
            running_mean: Tensor::zeros(&[state_size]),
            running_var: Tensor::filled(&[state_size], 1.0),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    fn update(&mut self, mean: &Tensor, var: &Tensor) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Attention selector weights: scoring vector and the two square maps
/// mixing the projected input with each pathway output. The count
/// 2s^2 + s does not depend on N or D.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub nu: Tensor,
    pub w_x: Tensor,
    pub w_o: Tensor,
}

impl AttnWeights {
    pub fn init<R: Rng>(state_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (state_size as f64).sqrt();
        AttnWeights {
            nu: Tensor::uniform(&[state_size], bound, rng),
            w_x: Tensor::uniform(&[state_size, state_size], bound, rng),
            w_o: Tensor::uniform(&[state_size, state_size], bound, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.nu.len() + self.w_x.len() + self.w_o.len()
    }
}

/// Forward mode: training uses batch statistics and updates the running
/// ones; inference uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Trainable-scalar breakdown of one shuttle layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub projector: usize,
    pub processors: usize,
    pub attention: usize,
    pub total: usize,
}

/// Exact parameter counts. A pure function of (N, F, s): the step count
/// D and stride K never appear.
pub fn shuttle_param_count(cfg: &ShuttleConfig) -> ParamBreakdown {
    let s = cfg.state_size;
    let projector = if cfg.projector {
        cfg.input_size * s + s
    } else {
        0
    };
    let processors = cfg.processors * cells::param_count(cells::CellKind::Gru, s, s);
    let attention = 2 * s * s + s;
    ParamBreakdown {
        projector,
        processors,
        attention,
        total: projector + processors + attention,
    }
}

/// The layer: configuration, named parameters and (when the projector is
/// enabled) batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct ShuttleNet {
    pub cfg: ShuttleConfig,
    pub store: ParamStore,
    pub bn: Option<BnState>,
}

impl ShuttleNet {
    /// Initialize all parameters into a fresh store.
    pub fn new<R: Rng>(cfg: ShuttleConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let bn = if cfg.projector {
            let proj = ProjectorWeights::init(cfg.input_size, cfg.state_size, rng);
            store.register("projector/w_p", proj.w_p)?;
            store.register("projector/b", proj.b)?;
            Some(BnState::new(cfg.state_size))
        } else {
            None
        };
        for n in 0..cfg.processors {
            let w = GruWeights::init(cfg.state_size, cfg.state_size, rng);
            w.register(&mut store, &format!("proc{n}"))?;
        }
        let attn = AttnWeights::init(cfg.state_size, rng);
        store.register("attention/nu", attn.nu)?;
        store.register("attention/w_x", attn.w_x)?;
        store.register("attention/w_o", attn.w_o)?;
        Ok(ShuttleNet { cfg, store, bn })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ShuttleNodes> {
        let projector = if self.cfg.projector {
            Some(ProjectorNodes {
                w_p: tape.param(&self.store, "projector/w_p")?,
                b: tape.param(&self.store, "projector/b")?,
            })
        } else {
            None
        };
        let procs = (0..self.cfg.processors)
            .map(|n| GruParams::bind(tape, &self.store, &format!("proc{n}")))
            .collect::<Result<Vec<_>>>()?;
        let attn = AttnNodes {
            nu: tape.param(&self.store, "attention/nu")?,
            w_x: tape.param(&self.store, "attention/w_x")?,
            w_o: tape.param(&self.store, "attention/w_o")?,
        };
        Ok(ShuttleNodes {
            projector,
            procs,
            attn,
        })
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        shuttle_param_count(&self.cfg)
    }

    /// Value-level single time step: projector, loop core and selector on
    /// a scratch tape. Returns (y_t, attention mask, advanced grid).
    pub fn forward_values(
        &mut self,
        x_t: &Tensor,
        grid: &StateGrid,
        mode: Mode,
    ) -> Result<(Tensor, Tensor, StateGrid)> {
        let mut tape = Tape::new();
        let nodes = self.bind(&mut tape)?;
        let x = tape.constant_named(x_t.clone(), "input/x_t");
        let mut grid_nodes = GridNodes::from_grid(&mut tape, grid);
        let out = forward_step(
            &mut tape,
            &self.cfg,
            &nodes,
            self.bn.as_mut(),
            mode,
            x,
            &mut grid_nodes,
        )?;
        let mut new_grid = grid.clone();
        for n in 0..self.cfg.processors {
            for d in 1..=self.cfg.steps {
                new_grid.set(n, d, tape.value(grid_nodes.get(n, d)).clone());
            }
        }
        Ok((
            tape.value(out.y).clone(),
            tape.value(out.alpha).clone(),
            new_grid,
        ))
    }
}

/// Projector parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorNodes {
    pub w_p: ValueId,
    pub b: ValueId,
}

/// Attention parameters bound onto a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnNodes {
    pub nu: ValueId,
    pub w_x: ValueId,
    pub w_o: ValueId,
}

/// All layer parameters bound onto one tape.
#[derive(Debug, Clone)]
pub struct ShuttleNodes {
    pub projector: Option<ProjectorNodes>,
    pub procs: Vec<GruParams>,
    pub attn: AttnNodes,
}

/// The state grid as tape nodes, so gradients flow across time steps.
#[derive(Debug, Clone)]
pub struct GridNodes {
    cells: Vec<Vec<ValueId>>,
}

impl GridNodes {
    pub fn zeros(tape: &mut Tape, cfg: &ShuttleConfig, batch: usize) -> Self {
        let cells = (0..cfg.processors)
            .map(|_| {
                (0..cfg.steps)
                    .map(|_| tape.constant(Tensor::zeros(&[batch, cfg.state_size])))
                    .collect()
            })
            .collect();
        GridNodes { cells }
    }

    pub fn from_grid(tape: &mut Tape, grid: &StateGrid) -> Self {
        let cells = grid
            .cells
            .iter()
            .map(|row| row.iter().map(|t| tape.constant(t.clone())).collect())
            .collect();
        GridNodes { cells }
    }

    /// State node of processor `n` at step `d` (1-based step).
    pub fn get(&self, n: usize, d: usize) -> ValueId {
        self.cells[n][d - 1]
    }

    fn set(&mut self, n: usize, d: usize, id: ValueId) {
        self.cells[n][d - 1] = id;
    }
}

/// Output of one time step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// Layer output y_t, `[B, s]`.
    pub y: ValueId,
    /// Attention mask over pathways, `[B, N]`.
    pub alpha: ValueId,
}

/// Project the raw input: linear map, batch normalization, bias, ReLU.
/// Training mode normalizes with batch statistics (batch size >= 2) and
/// updates the running ones; inference mode uses the running statistics.
pub fn project_input(
    tape: &mut Tape,
    proj: &ProjectorNodes,
    bn: Option<&mut BnState>,
    mode: Mode,
    x: ValueId,
) -> Result<ValueId> {
    let bn = bn.ok_or_else(|| Error::contract("projector enabled but no batch-norm state"))?;
    let rows = tape.value(x).shape()[0];
    let lin = tape.linear(x, proj.w_p)?;
    let normalized = match mode {
        Mode::Train => {
            let (norm, stats) = tape.batch_norm_train(lin, bn.eps)?;
            bn.update(&stats.mean, &stats.var);
            norm
        }
        Mode::Infer => {
            let mean = tape.constant(bn.running_mean.clone());
            let inv_std = Tensor::new(
                bn.running_var.shape(),
                bn.running_var
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (v + bn.eps).sqrt())
                    .collect(),
            )?;
            let inv = tape.constant(inv_std);
            let mean_rows = tape.broadcast_row(mean, rows)?;
            let inv_rows = tape.broadcast_row(inv, rows)?;
            let centered = tape.sub(lin, mean_rows)?;
            tape.mul(centered, inv_rows)?
        }
    };
    let bias = tape.broadcast_row(proj.b, rows)?;
    let shifted = tape.add(normalized, bias)?;
    Ok(tape.relu(shifted))
}

/// Run the D-step loop core for one time step. Every processor fires at
/// every step: at step 1 it reads the projected input, afterwards the
/// step-(d-1) output of the processor K positions back along the ring.
/// Processor n at step d uses grid state (n, d) and writes it back.
/// Returns the N pathway outputs (pathway j ends at processor
/// (j + (D-1)K) mod N).
pub fn loop_step(
    tape: &mut Tape,
    cfg: &ShuttleConfig,
    procs: &[GruParams],
    grid: &mut GridNodes,
    x_proj: ValueId,
) -> Result<Vec<ValueId>> {
    let n_procs = cfg.processors;
    let back = cfg.stride % n_procs;
    let mut prev: Vec<ValueId> = vec![x_proj; n_procs];
    for d in 1..=cfg.steps {
        let mut current = Vec::with_capacity(n_procs);
        for n in 0..n_procs {
            let input = if d == 1 {
                x_proj
            } else {
                prev[(n + n_procs - back) % n_procs]
            };
            let (o, h_new) = gru_step(tape, &procs[n], input, grid.get(n, d))?;
            grid.set(n, d, h_new);
            current.push(o);
        }
        prev = current;
    }
    Ok((0..n_procs)
        .map(|pathway| prev[(pathway + (cfg.steps - 1) * cfg.stride) % n_procs])
        .collect())
}

/// Additive-attention selection over the pathway outputs:
/// `e_n = nu . tanh(w_x x + w_o o_n)`, `alpha = softmax(e)`,
/// `y = sum_n alpha_n o_n`.
pub fn select_output(
    tape: &mut Tape,
    attn: &AttnNodes,
    x_proj: ValueId,
    outputs: &[ValueId],
) -> Result<StepOutput> {
    if outputs.is_empty() {
        return Err(Error::contract("select_output needs at least one pathway"));
    }
    let s = tape.value(x_proj).shape()[1];
    let from_input = tape.linear(x_proj, attn.w_x)?;
    let nu_col = tape.reshape(attn.nu, &[s, 1])?;
    let mut scores = Vec::with_capacity(outputs.len());
    for &o in outputs {
        let from_output = tape.linear(o, attn.w_o)?;
        let mixed = tape.add(from_input, from_output)?;
        let activated = tape.tanh(mixed);
        scores.push(tape.matmul(activated, nu_col)?);
    }
    let logits = tape.concat_cols(&scores)?;
    let alpha = tape.softmax(logits)?;
    let mut y = None;
    for (n, &o) in outputs.iter().enumerate() {
        let weight = tape.slice_col(alpha, n)?;
        let spread = tape.broadcast_col(weight, s)?;
        let contrib = tape.mul(spread, o)?;
        y = Some(match y {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    Ok(StepOutput {
        y: y.expect("at least one pathway"),
        alpha,
    })
}

/// One full time step on the tape: project, run the loop core, select.
pub fn forward_step(
    tape: &mut Tape,
    cfg: &ShuttleConfig,
    nodes: &ShuttleNodes,
    bn: Option<&mut BnState>,
    mode: Mode,
    x_t: ValueId,
    grid: &mut GridNodes,
) -> Result<StepOutput> {
    let x_proj = match &nodes.projector {
        Some(proj) => project_input(tape, proj, bn, mode, x_t)?,
        None => {
            let shape = tape.value(x_t).shape();
            if shape[1] != cfg.state_size {
                return Err(Error::dim(
                    "forward_step",
                    shape,
                    &[shape[0], cfg.state_size],
                ));
            }
            x_t
        }
    };
    let outputs = loop_step(tape, cfg, &nodes.procs, grid, x_proj)?;
    select_output(tape, &nodes.attn, x_proj, &outputs)
}

/// Value-level wrapper over `loop_step` for a single time step.
pub fn loop_step_values(
    cfg: &ShuttleConfig,
    procs: &[GruWeights],
    grid: &StateGrid,
    x_proj: &Tensor,
) -> Result<(Vec<Tensor>, StateGrid)> {
    let mut store = ParamStore::new();
    for (n, w) in procs.iter().enumerate() {
        w.register(&mut store, &format!("proc{n}"))?;
    }
    let mut tape = Tape::new();
    let params = (0..procs.len())
        .map(|n| GruParams::bind(&mut tape, &store, &format!("proc{n}")))
        .collect::<Result<Vec<_>>>()?;
    let x = tape.constant(x_proj.clone());
    let mut grid_nodes = GridNodes::from_grid(&mut tape, grid);
    let outputs = loop_step(&mut tape, cfg, &params, &mut grid_nodes, x)?;
    let out_values = outputs.iter().map(|&o| tape.value(o).clone()).collect();
    let mut new_grid = grid.clone();
    for n in 0..cfg.processors {
        for d in 1..=cfg.steps {
            new_grid.set(n, d, tape.value(grid_nodes.get(n, d)).clone());
        }
    }
    Ok((out_values, new_grid))
}

/// Value-level wrapper over `select_output`.
pub fn select_output_values(
    attn: &AttnWeights,
    x_proj: &Tensor,
    outputs: &[Tensor],
) -> Result<(Tensor, Tensor)> {
    let mut store = ParamStore::new();
    store.register("attention/nu", attn.nu.clone())?;
    store.register("attention/w_x", attn.w_x.clone())?;
    store.register("attention/w_o", attn.w_o.clone())?;
    let mut tape = Tape::new();
    let nodes = AttnNodes {
        nu: tape.param(&store, "attention/nu")?,
        w_x: tape.param(&store, "attention/w_x")?,
        w_o: tape.param(&store, "attention/w_o")?,
    };
    let x = tape.constant(x_proj.clone());
    let out_ids: Vec<ValueId> = outputs
        .iter()
        .map(|o| tape.constant(o.clone()))
        .collect();
    let out = select_output(&mut tape, &nodes, x, &out_ids)?;
    Ok((tape.value(out.y).clone(), tape.value(out.alpha).clone()))
}

/// Pathway topology summary for the DOT export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopologySummary {
    pub processor_nodes: usize,
    pub input_edges: usize,
    pub step_edges: usize,
}

/// Render the (N, D, K) pathway topology as a DOT digraph: one node per
/// processor-at-step, an input fan-out to every processor at step 1, and
/// the stride-K edges between consecutive steps.
pub fn topology_dot(cfg: &ShuttleConfig) -> (String, TopologySummary) {
    let n = cfg.processors;
    let d = cfg.steps;
    let mut out = String::from("digraph shuttle {\n  rankdir=LR;\n");
    out.push_str("  input [shape=box, label=\"x_t\"];\n");
    for step in 1..=d {
        for proc in 0..n {
            out.push_str(&format!(
                "  p{proc}_s{step} [label=\"p{proc}@{step}\"];\n"
            ));
        }
    }
    for proc in 0..n {
        out.push_str(&format!("  input -> p{proc}_s1;\n"));
    }
    for step in 1..d {
        for proc in 0..n {
            let next = (proc + cfg.stride) % n;
            out.push_str(&format!("  p{proc}_s{step} -> p{next}_s{};\n", step + 1));
        }
    }
    out.push_str("}\n");
    let summary = TopologySummary {
        processor_nodes: n * d,
        input_edges: n,
        step_edges: n * (d - 1),
    };
    (out, summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_reports;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, d: usize, k: usize, f: usize, s: usize, projector: bool) -> ShuttleConfig {
        ShuttleConfig {
            processors: n,
            steps: d,
            stride: k,
            input_size: f,
            state_size: s,
            projector,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 1, 1, 4, 4, true).validate().is_err());
        assert!(cfg(2, 0, 1, 4, 4, true).validate().is_err());
        assert!(cfg(2, 2, 0, 4, 4, true).validate().is_err());
        assert!(cfg(2, 2, 1, 3, 4, false).validate().is_err());
        assert!(cfg(2, 2, 1, 4, 4, false).validate().is_ok());
        assert!(cfg(2, 2, 1, 3, 4, true).validate().is_ok());
    }

    #[test]
    fn pathway_index_walks_the_ring() {
        let c = cfg(4, 8, 1, 4, 4, false);
        let walked: Vec<usize> = (1..=4)
            .map(|d| pathway_processor_index(&c, 0, d).unwrap())
            .collect();
        assert_eq!(walked, vec![0, 1, 2, 3]);
        // Step 5 closes the loop back to the origin.
        assert_eq!(pathway_processor_index(&c, 0, 5).unwrap(), 0);

        let single = cfg(1, 4, 1, 4, 4, false);
        for d in 1..=4 {
            assert_eq!(pathway_processor_index(&single, 0, d).unwrap(), 0);
        }

        let strided = cfg(6, 3, 2, 4, 4, false);
        assert_eq!(pathway_processor_index(&strided, 1, 3).unwrap(), 5);
    }

    #[test]
    fn pathway_index_rejects_out_of_range() {
        let c = cfg(4, 2, 1, 4, 4, false);
        assert!(pathway_processor_index(&c, 4, 1).is_err());
        assert!(pathway_processor_index(&c, 0, 0).is_err());
        assert!(pathway_processor_index(&c, 0, 3).is_err());
    }

    #[test]
    fn loop_closure_after_n_over_gcd_steps() {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 { a } else { gcd(b, a % b) }
        }
        for n in 1..=8 {
            for k in 1..=n {
                let c = cfg(n, 64, k, 4, 4, false);
                let period = n / gcd(n, k);
                for j in 0..n {
                    assert_eq!(
                        pathway_processor_index(&c, j, 1 + period).unwrap(),
                        j,
                        "N={n} K={k} pathway {j} did not close after {period} steps"
                    );
                    for d in 2..=period {
                        assert_ne!(
                            pathway_processor_index(&c, j, d).unwrap(),
                            j,
                            "N={n} K={k} pathway {j} closed early at step {d}"
                        );
                    }
                }
            }
        }
    }

    fn scratch_projector(
        f: usize,
        s: usize,
        rng: &mut ChaCha8Rng,
    ) -> (ParamStore, BnState) {
        let w = ProjectorWeights::init(f, s, rng);
        let mut store = ParamStore::new();
        store.register("projector/w_p", w.w_p).unwrap();
        store.register("projector/b", w.b).unwrap();
        (store, BnState::new(s))
    }

    fn run_projector(
        store: &ParamStore,
        bn: &mut BnState,
        x: &Tensor,
        mode: Mode,
    ) -> Tensor {
        let mut tape = Tape::new();
        let nodes = ProjectorNodes {
            w_p: tape.param(store, "projector/w_p").unwrap(),
            b: tape.param(store, "projector/b").unwrap(),
        };
        let xi = tape.constant(x.clone());
        let out = project_input(&mut tape, &nodes, Some(bn), mode, xi).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn projector_output_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (store, mut bn) = scratch_projector(5, 4, &mut rng);
        let x = Tensor::uniform(&[6, 5], 2.0, &mut rng);
        let out = run_projector(&store, &mut bn, &x, Mode::Train);
        assert!(out.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn projector_large_negative_bias_zeroes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (mut store, mut bn) = scratch_projector(5, 4, &mut rng);
        let slot = store.slot("projector/b").unwrap();
        store.entry_mut(slot).value = Tensor::filled(&[4], -10.0);
        let x = Tensor::uniform(&[6, 5], 2.0, &mut rng);
        let out = run_projector(&store, &mut bn, &x, Mode::Train);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projector_is_identity_on_normalized_input() {
        // w_p = I, zero bias, eps = 0, and a batch whose features already
        // have mean 0 and biased variance 1: the output is ReLU(x).
        let mut store = ParamStore::new();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.register("projector/w_p", eye).unwrap();
        store.register("projector/b", Tensor::zeros(&[2])).unwrap();
        let mut bn = BnState::new(2);
        bn.eps = 0.0;
        let x = Tensor::new(&[2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let out = run_projector(&store, &mut bn, &x, Mode::Train);
        let relu_x: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(out.data(), relu_x.as_slice());
    }

    #[test]
    fn projector_infer_uses_running_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (store, mut bn) = scratch_projector(3, 4, &mut rng);
        // Inference right after init normalizes with mean 0 / var 1.
        let x = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let out = run_projector(&store, &mut bn, &x, Mode::Infer);
        let w = store.value_by_name("projector/w_p").unwrap();
        let lin = crate::numerics::tensor::matmul_nt(&x, w).unwrap();
        let expect: Vec<f64> = lin
            .data()
            .iter()
            .map(|&v| (v / (1.0 + bn.eps).sqrt()).max(0.0))
            .collect();
        assert!(out
            .data()
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    fn random_procs(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<GruWeights> {
        (0..n).map(|_| GruWeights::init(s, s, rng)).collect()
    }

    #[test]
    fn loop_step_with_one_step_is_a_gru_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = cfg(3, 1, 1, 4, 4, false);
        let procs = random_procs(3, 4, &mut rng);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let mut grid = StateGrid::zeros(&c, 2);
        for n in 0..3 {
            grid.set(n, 1, Tensor::uniform(&[2, 4], 1.0, &mut rng));
        }
        let (outputs, _) = loop_step_values(&c, &procs, &grid, &x).unwrap();
        for n in 0..3 {
            let (expect, _) = reference::gru_step(&procs[n], &x, grid.get(n, 1)).unwrap();
            assert!(outputs[n].max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn loop_step_single_processor_is_weight_shared_stack() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let c = cfg(1, 2, 1, 4, 4, false);
        let procs = random_procs(1, 4, &mut rng);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let mut grid = StateGrid::zeros(&c, 2);
        grid.set(0, 1, Tensor::uniform(&[2, 4], 1.0, &mut rng));
        grid.set(0, 2, Tensor::uniform(&[2, 4], 1.0, &mut rng));
        let (outputs, _) = loop_step_values(&c, &procs, &grid, &x).unwrap();
        let (o1, _) = reference::gru_step(&procs[0], &x, grid.get(0, 1)).unwrap();
        let (o2, _) = reference::gru_step(&procs[0], &o1, grid.get(0, 2)).unwrap();
        assert!(outputs[0].max_abs_diff(&o2) < 1e-12);
    }

    #[test]
    fn loop_step_two_by_two_matches_hand_unrolled_pathways() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = cfg(2, 2, 1, 3, 3, false);
        let procs = random_procs(2, 3, &mut rng);
        let x = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let mut grid = StateGrid::zeros(&c, 1);
        for n in 0..2 {
            for d in 1..=2 {
                grid.set(n, d, Tensor::uniform(&[1, 3], 1.0, &mut rng));
            }
        }
        let (outputs, new_grid) = loop_step_values(&c, &procs, &grid, &x).unwrap();

        // Step 1: both processors read x with their step-1 states.
        let (o0_1, h0_1) = reference::gru_step(&procs[0], &x, grid.get(0, 1)).unwrap();
        let (o1_1, h1_1) = reference::gru_step(&procs[1], &x, grid.get(1, 1)).unwrap();
        // Step 2: processor n reads the step-1 output of processor n-1.
        let (o0_2, h0_2) = reference::gru_step(&procs[0], &o1_1, grid.get(0, 2)).unwrap();
        let (o1_2, h1_2) = reference::gru_step(&procs[1], &o0_1, grid.get(1, 2)).unwrap();

        // Pathway 0 = p0 then p1; pathway 1 = p1 then p0.
        assert!(outputs[0].max_abs_diff(&o1_2) < 1e-12);
        assert!(outputs[1].max_abs_diff(&o0_2) < 1e-12);
        for (n, d, expect) in [
            (0, 1, &h0_1),
            (1, 1, &h1_1),
            (0, 2, &h0_2),
            (1, 2, &h1_2),
        ] {
            assert!(new_grid.get(n, d).max_abs_diff(expect) < 1e-12);
        }
    }

    #[test]
    fn state_grid_cells_are_isolated_within_a_step() {
        // Perturbing state (n, d) may only move the pathway that passes
        // through processor n at step d; every other pathway output and
        // every other updated cell must be bitwise unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = cfg(3, 2, 1, 4, 4, false);
        let procs = random_procs(3, 4, &mut rng);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let mut grid = StateGrid::zeros(&c, 2);
        for n in 0..3 {
            for d in 1..=2 {
                grid.set(n, d, Tensor::uniform(&[2, 4], 1.0, &mut rng));
            }
        }
        let (base_out, base_grid) = loop_step_values(&c, &procs, &grid, &x).unwrap();

        let (pn, pd) = (1, 2);
        let mut perturbed = grid.clone();
        let mut bumped = perturbed.get(pn, pd).clone();
        bumped.data_mut()[0] += 0.5;
        perturbed.set(pn, pd, bumped);
        let (out, new_grid) = loop_step_values(&c, &procs, &perturbed, &x).unwrap();

        // Processor 1 at step 2 belongs to the pathway ending there.
        let owner = (0..3)
            .find(|&j| pathway_processor_index(&c, j, pd).unwrap() == pn)
            .unwrap();
        for j in 0..3 {
            if j == owner {
                assert!(out[j].max_abs_diff(&base_out[j]) > 0.0);
            } else {
                assert_eq!(out[j].data(), base_out[j].data(), "pathway {j} moved");
            }
        }
        for n in 0..3 {
            for d in 1..=2 {
                if (n, d) != (pn, pd) {
                    assert_eq!(
                        new_grid.get(n, d).data(),
                        base_grid.get(n, d).data(),
                        "cell ({n},{d}) moved"
                    );
                }
            }
        }
    }

    #[test]
    fn select_output_singleton_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let attn = AttnWeights::init(4, &mut rng);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let o = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let (y, alpha) = select_output_values(&attn, &x, &[o.clone()]).unwrap();
        assert_eq!(alpha.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(y.data(), o.data());
    }

    #[test]
    fn select_output_uniform_mask_on_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let attn = AttnWeights::init(4, &mut rng);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let o = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let outputs = vec![o.clone(), o.clone(), o.clone()];
        let (y, alpha) = select_output_values(&attn, &x, &outputs).unwrap();
        for &a in alpha.data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(y.max_abs_diff(&o) < 1e-12);
    }

    #[test]
    fn select_output_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let attn = AttnWeights::init(5, &mut rng);
        let x = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let outputs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[3, 5], 1.0, &mut rng))
            .collect();
        let (y, alpha) = select_output_values(&attn, &x, &outputs).unwrap();
        let (y_ref, alpha_ref) = reference::select_output(&attn, &x, &outputs).unwrap();
        assert!(y.max_abs_diff(&y_ref) < 1e-12);
        assert!(alpha.max_abs_diff(&alpha_ref) < 1e-12);
        for r in 0..3 {
            let total: f64 = alpha.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_degenerates_to_plain_gru() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let c = cfg(1, 1, 1, 4, 4, false);
        let mut net = ShuttleNet::new(c.clone(), &mut rng).unwrap();
        let weights = GruWeights::from_store(&net.store, "proc0").unwrap();
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let grid = StateGrid::zeros(&c, 2);
        let (y, alpha, new_grid) = net.forward_values(&x, &grid, Mode::Infer).unwrap();
        let (o, h_new) = crate::cells::gru_step_tensors(&weights, &x, grid.get(0, 1)).unwrap();
        // Shared cell implementation: the deviation is exactly zero.
        assert_eq!(y.data(), o.data());
        assert_eq!(alpha.data(), &[1.0, 1.0]);
        assert_eq!(new_grid.get(0, 1).data(), h_new.data());
    }

    #[test]
    fn forward_zero_params_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let c = cfg(2, 2, 1, 3, 4, true);
        let mut net = ShuttleNet::new(c.clone(), &mut rng).unwrap();
        for slot in 0..net.store.len() {
            net.store.entry_mut(slot).value.data_mut().fill(0.0);
        }
        let x = Tensor::zeros(&[2, 3]);
        let grid = StateGrid::zeros(&c, 2);
        let (y, _, _) = net.forward_values(&x, &grid, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0; 8]);
    }

    #[test]
    fn forward_two_by_two_matches_hand_unrolled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let c = cfg(2, 2, 1, 3, 3, false);
        let mut net = ShuttleNet::new(c.clone(), &mut rng).unwrap();
        let p0 = GruWeights::from_store(&net.store, "proc0").unwrap();
        let p1 = GruWeights::from_store(&net.store, "proc1").unwrap();
        let attn = AttnWeights {
            nu: net.store.value_by_name("attention/nu").unwrap().clone(),
            w_x: net.store.value_by_name("attention/w_x").unwrap().clone(),
            w_o: net.store.value_by_name("attention/w_o").unwrap().clone(),
        };
        let x = Tensor::uniform(&[1, 3], 1.0, &mut rng);
        let mut grid = StateGrid::zeros(&c, 1);
        for n in 0..2 {
            for d in 1..=2 {
                grid.set(n, d, Tensor::uniform(&[1, 3], 1.0, &mut rng));
            }
        }
        let (y, alpha, _) = net.forward_values(&x, &grid, Mode::Infer).unwrap();

        let (o0_1, _) = reference::gru_step(&p0, &x, grid.get(0, 1)).unwrap();
        let (o1_1, _) = reference::gru_step(&p1, &x, grid.get(1, 1)).unwrap();
        let (o0_2, _) = reference::gru_step(&p0, &o1_1, grid.get(0, 2)).unwrap();
        let (o1_2, _) = reference::gru_step(&p1, &o0_1, grid.get(1, 2)).unwrap();
        let (y_ref, alpha_ref) =
            reference::select_output(&attn, &x, &[o1_2, o0_2]).unwrap();
        assert!(y.max_abs_diff(&y_ref) < 1e-12);
        assert!(alpha.max_abs_diff(&alpha_ref) < 1e-12);
    }

    #[test]
    fn param_breakdown_reference_values() {
        let big = cfg(1, 2, 1, 1024, 1024, false);
        assert_eq!(shuttle_param_count(&big).processors, 6_294_528);

        // Constant across step counts.
        let totals: Vec<usize> = (1..=3)
            .map(|d| shuttle_param_count(&cfg(2, d, 1, 64, 32, true)).total)
            .collect();
        assert_eq!(totals[0], totals[1]);
        assert_eq!(totals[1], totals[2]);

        // Attention is independent of N; 2s^2 + s at s = 2 is 10.
        for n in [1, 3, 7] {
            assert_eq!(shuttle_param_count(&cfg(n, 1, 1, 2, 2, true)).attention, 10);
        }

        // Linear in N with slope exactly one GRU.
        let gru = crate::cells::param_count(crate::cells::CellKind::Gru, 32, 32);
        let t1 = shuttle_param_count(&cfg(1, 2, 1, 64, 32, true)).total;
        let t2 = shuttle_param_count(&cfg(2, 2, 1, 64, 32, true)).total;
        let t3 = shuttle_param_count(&cfg(3, 2, 1, 64, 32, true)).total;
        assert_eq!(t2 - t1, gru);
        assert_eq!(t3 - t2, gru);
    }

    #[test]
    fn full_layer_gradients_through_time_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let c = cfg(2, 2, 1, 3, 4, true);
        let mut net = ShuttleNet::new(c.clone(), &mut rng).unwrap();
        let steps: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[3, 3], 1.0, &mut rng))
            .collect();

        let run = |store: &ParamStore| -> crate::error::Result<(Tape, ValueId)> {
            let mut tape = Tape::new();
            let shadow = ShuttleNet {
                cfg: c.clone(),
                store: store.clone(),
                bn: Some(BnState::new(c.state_size)),
            };
            let nodes = shadow.bind(&mut tape)?;
            let mut bn = shadow.bn.clone();
            let mut grid = GridNodes::zeros(&mut tape, &c, 3);
            let mut loss = None;
            for x in &steps {
                let xi = tape.constant(x.clone());
                let out = forward_step(
                    &mut tape,
                    &c,
                    &nodes,
                    bn.as_mut(),
                    Mode::Train,
                    xi,
                    &mut grid,
                )?;
                let term = tape.sum(out.y);
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            Ok((tape, loss.expect("at least one step")))
        };

        let (tape, loss) = run(&net.store).unwrap();
        net.store.zero_grads();
        tape.backward(loss, &mut net.store).unwrap();
        let mut loss_fn = |s: &ParamStore| {
            let (t, l) = run(s)?;
            Ok(t.value(l).item())
        };
        for report in finite_difference_reports(&mut net.store, &mut loss_fn, 1e-5).unwrap() {
            assert!(
                report.worst_rel_err < 1e-4,
                "{} rel err {}",
                report.name,
                report.worst_rel_err
            );
        }
    }

    #[test]
    fn topology_export_counts() {
        let (dot, summary) = topology_dot(&cfg(4, 2, 1, 4, 4, false));
        assert_eq!(summary.processor_nodes, 8);
        assert_eq!(summary.input_edges, 4);
        assert_eq!(summary.step_edges, 4);
        assert!(dot.contains("p0_s1 -> p1_s2;"));
        assert!(dot.contains("p3_s1 -> p0_s2;"));

        let (_, tiny) = topology_dot(&cfg(1, 1, 1, 4, 4, false));
        assert_eq!(tiny.processor_nodes, 1);
        assert_eq!(tiny.input_edges, 1);
        assert_eq!(tiny.step_edges, 0);
    }
}
