//! GRU cell and forward, backward and bidirectional sequence runners.
//!
//! Gate equations (reset applied before the candidate's recurrent product):
//!
//! ```text
//! z  = σ(W_z v + U_z h + b_z)
//! r  = σ(W_r v + U_r h + b_r)
//! h~ = tanh(W_h v + U_h (r ⊙ h) + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! Input weights are stored `[p, m]`, recurrent weights `[p, p]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn_core::{
    init_param, matvec_acc, matvec_t_acc, outer_acc, sigmoid, CustomOp, GradSink, InitScheme, NodeId,
    ParamId, ParamKind, ParamStore, Tape, Tensor,
};

const GATE_NAMES: [&str; 9] = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"];

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (m, p) = (input_dim, hidden_dim);
        GruParams {
            w_z: Tensor::zeros(&[p, m]),
            u_z: Tensor::zeros(&[p, p]),
            b_z: Tensor::zeros(&[p]),
            w_r: Tensor::zeros(&[p, m]),
            u_r: Tensor::zeros(&[p, p]),
            b_r: Tensor::zeros(&[p]),
            w_h: Tensor::zeros(&[p, m]),
            u_h: Tensor::zeros(&[p, p]),
            b_h: Tensor::zeros(&[p]),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let (m, p) = (input_dim, hidden_dim);
        let mut w = |shape: &[usize]| init_param(shape, InitScheme::GlorotUniform, rng);
        GruParams {
            w_z: w(&[p, m]),
            u_z: w(&[p, p]),
            b_z: Tensor::zeros(&[p]),
            w_r: w(&[p, m]),
            u_r: w(&[p, p]),
            b_r: Tensor::zeros(&[p]),
            w_h: w(&[p, m]),
            u_h: w(&[p, p]),
            b_h: Tensor::zeros(&[p]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_z.len()
    }

    fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (m, p) = (self.input_dim(), self.hidden_dim());
        for (name, t) in GATE_NAMES.iter().zip(self.tensors()) {
            let expected: &[usize] = match name.as_bytes()[0] {
                b'W' => &[p, m],
                b'U' => &[p, p],
                _ => &[p],
            };
            if t.shape() != expected {
                return Err(Error::dim(
                    "gru_params",
                    format!("{name}: expected {expected:?}, got {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Adds the nine tensors to `store` as `{prefix}.W_z`, `{prefix}.U_z`, ...
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<GruIds> {
        self.validate()?;
        let mut ids = Vec::with_capacity(9);
        for (name, t) in GATE_NAMES.iter().zip(self.tensors()) {
            let kind = if name.starts_with('b') {
                ParamKind::Bias
            } else {
                ParamKind::Weight
            };
            ids.push(store.insert(&format!("{prefix}.{name}"), kind, t.clone())?);
        }
        Ok(GruIds {
            ids: ids.try_into().expect("nine gates"),
        })
    }

    /// Records the tensors as constants, for gradient-free evaluation.
    pub fn constants(&self, tape: &mut Tape) -> GruNodes {
        GruNodes {
            nodes: self.tensors().map(|t| tape.constant(t.clone())),
        }
    }
}

/// Parameter ids of one registered GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIds {
    ids: [ParamId; 9],
}

impl GruIds {
    pub fn on_tape(&self, tape: &mut Tape) -> GruNodes {
        GruNodes {
            nodes: self.ids.map(|id| tape.param(id)),
        }
    }

    pub fn ids(&self) -> &[ParamId; 9] {
        &self.ids
    }

    /// Reads the current values back out of a store.
    pub fn params(&self, store: &ParamStore) -> GruParams {
        let t = |i: usize| store.get(self.ids[i]).clone();
        GruParams {
            w_z: t(0),
            u_z: t(1),
            b_z: t(2),
            w_r: t(3),
            u_r: t(4),
            b_r: t(5),
            w_h: t(6),
            u_h: t(7),
            b_h: t(8),
        }
    }
}

/// GRU parameters as tape nodes, in `GATE_NAMES` order.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    nodes: [NodeId; 9],
}

impl GruNodes {
    fn hidden_dim(&self, tape: &Tape) -> usize {
        tape.value(self.nodes[2]).len()
    }
}

struct GruActivations {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    reset_h: Vec<f64>,
    out: Vec<f64>,
}

/// `x` holds the input projections `[W_z v + b_z; W_r v + b_r; W_h v + b_h]`.
fn gru_recur_raw(u: [&[f64]; 3], x: &[f64], h: &[f64]) -> GruActivations {
    let p = h.len();
    let gate = |k: usize, state: &[f64]| {
        let mut a = x[k * p..(k + 1) * p].to_vec();
        matvec_acc(u[k], p, p, state, &mut a);
        a
    };
    let z: Vec<f64> = gate(0, h).into_iter().map(sigmoid).collect();
    let r: Vec<f64> = gate(1, h).into_iter().map(sigmoid).collect();
    let reset_h: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = gate(2, &reset_h).into_iter().map(f64::tanh).collect();
    let out = (0..p).map(|i| (1.0 - z[i]) * h[i] + z[i] * cand[i]).collect();
    GruActivations {
        z,
        r,
        cand,
        reset_h,
        out,
    }
}

/// Input projections of all three gates; inputs are `[v, W_z, b_z, W_r, b_r, W_h, b_h]`.
struct GruInput;

impl CustomOp for GruInput {
    fn name(&self) -> &'static str {
        "gru_input"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let v = inputs[0].data();
        let m = v.len();
        let p = inputs[2].len();
        let g = grad.data();
        sink.add_with(0, |dv| {
            for k in 0..3 {
                matvec_t_acc(inputs[1 + 2 * k].data(), m, &g[k * p..(k + 1) * p], dv);
            }
        });
        for k in 0..3 {
            let da = &g[k * p..(k + 1) * p];
            sink.add_with(1 + 2 * k, |dw| outer_acc(dw, m, da, v));
            sink.add(2 + 2 * k, da);
        }
    }
}

/// Recurrent half of a GRU step; inputs are `[x, h_prev, U_z, U_r, U_h]`
/// with `x` from [`GruInput`].
struct GruRecur {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    reset_h: Vec<f64>,
}

impl CustomOp for GruRecur {
    fn name(&self) -> &'static str {
        "gru_recur"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor, sink: &mut GradSink) {
        let h = inputs[1].data();
        let p = h.len();
        let g = grad.data();
        let (u_z, u_r, u_h) = (inputs[2].data(), inputs[3].data(), inputs[4].data());

        let mut dh = vec![0.0; p];
        let mut da = vec![0.0; 3 * p];
        for i in 0..p {
            let (z, n) = (self.z[i], self.cand[i]);
            dh[i] = g[i] * (1.0 - z);
            da[i] = g[i] * (n - h[i]) * z * (1.0 - z);
            da[2 * p + i] = g[i] * z * (1.0 - n * n);
        }
        // through U_h (r ⊙ h)
        let mut d_reset_h = vec![0.0; p];
        matvec_t_acc(u_h, p, &da[2 * p..], &mut d_reset_h);
        for i in 0..p {
            let r = self.r[i];
            dh[i] += d_reset_h[i] * r;
            da[p + i] = d_reset_h[i] * h[i] * r * (1.0 - r);
        }
        let (da_z, da_r, da_h) = (&da[..p], &da[p..2 * p], &da[2 * p..]);
        if sink.needs(1) {
            matvec_t_acc(u_z, p, da_z, &mut dh);
            matvec_t_acc(u_r, p, da_r, &mut dh);
            sink.add(1, &dh);
        }
        sink.add(0, &da);
        sink.add_with(2, |du| outer_acc(du, p, da_z, h));
        sink.add_with(3, |du| outer_acc(du, p, da_r, h));
        sink.add_with(4, |du| outer_acc(du, p, da_h, &self.reset_h));
    }
}

fn check_step_shapes(tape: &Tape, gru: &GruNodes, v: Option<NodeId>, h_prev: NodeId) -> Result<()> {
    let p = gru.hidden_dim(tape);
    let m = tape.value(gru.nodes[0]).cols();
    let v_ok = v.is_none_or(|v| tape.shape(v) == [m]);
    if !v_ok || tape.shape(h_prev) != [p] {
        return Err(Error::dim(
            "gru_step",
            format!(
                "input {:?} / state {:?} for m={m}, p={p}",
                v.map(|v| tape.shape(v).to_vec()),
                tape.shape(h_prev)
            ),
        ));
    }
    Ok(())
}

/// Input projections `[W_z v + b_z; W_r v + b_r; W_h v + b_h]` as one node,
/// reusable across every recurrence that reads `v`.
pub fn gru_input_node(tape: &mut Tape, gru: &GruNodes, v: NodeId) -> Result<NodeId> {
    let n = gru.nodes;
    let (p, m) = (gru.hidden_dim(tape), tape.value(n[0]).cols());
    if tape.shape(v) != [m] {
        return Err(Error::dim("gru_step", format!("input {:?} for m={m}", tape.shape(v))));
    }
    let mut x = Vec::with_capacity(3 * p);
    for k in 0..3 {
        let mut a = tape.value(n[3 * k + 2]).data().to_vec();
        matvec_acc(tape.value(n[3 * k]).data(), p, m, tape.value(v).data(), &mut a);
        x.extend(a);
    }
    let inputs = [v, n[0], n[2], n[3], n[5], n[6], n[8]];
    Ok(tape.custom(&inputs, Tensor::vector(x), Box::new(GruInput)))
}

/// Recurrent update from precomputed input projections.
pub fn gru_recur_node(tape: &mut Tape, gru: &GruNodes, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
    check_step_shapes(tape, gru, None, h_prev)?;
    let p = gru.hidden_dim(tape);
    if tape.shape(x) != [3 * p] {
        return Err(Error::dim("gru_step", format!("projection {:?} for p={p}", tape.shape(x))));
    }
    let n = gru.nodes;
    let u = [tape.value(n[1]).data(), tape.value(n[4]).data(), tape.value(n[7]).data()];
    let act = gru_recur_raw(u, tape.value(x).data(), tape.value(h_prev).data());
    let out = Tensor::vector(act.out);
    Ok(tape.custom(
        &[x, h_prev, n[1], n[4], n[7]],
        out,
        Box::new(GruRecur {
            z: act.z,
            r: act.r,
            cand: act.cand,
            reset_h: act.reset_h,
        }),
    ))
}

/// One GRU step as two fused nodes (input projection, recurrence).
pub fn gru_step_node(tape: &mut Tape, gru: &GruNodes, v: NodeId, h_prev: NodeId) -> Result<NodeId> {
    check_step_shapes(tape, gru, Some(v), h_prev)?;
    let x = gru_input_node(tape, gru, v)?;
    gru_recur_node(tape, gru, x, h_prev)
}

/// The same step built from primitive tape ops; slower, kept as a reference.
pub fn gru_step_composed(tape: &mut Tape, gru: &GruNodes, v: NodeId, h_prev: NodeId) -> Result<NodeId> {
    check_step_shapes(tape, gru, Some(v), h_prev)?;
    let n = gru.nodes;
    let a_z = tape.linear(&[(n[0], v), (n[1], h_prev)], Some(n[2]))?;
    let z = tape.sigmoid(a_z);
    let a_r = tape.linear(&[(n[3], v), (n[4], h_prev)], Some(n[5]))?;
    let r = tape.sigmoid(a_r);
    let reset_h = tape.mul(r, h_prev)?;
    let a_h = tape.linear(&[(n[6], v), (n[7], reset_h)], Some(n[8]))?;
    let cand = tape.tanh(a_h);
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

fn zero_state(tape: &mut Tape, gru: &GruNodes) -> NodeId {
    let p = gru.hidden_dim(tape);
    tape.constant(Tensor::zeros(&[p]))
}

pub fn project_nodes(tape: &mut Tape, gru: &GruNodes, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
    inputs.iter().map(|&v| gru_input_node(tape, gru, v)).collect()
}

/// Forward states from inputs already passed through [`project_nodes`].
pub fn run_forward_projected(tape: &mut Tape, gru: &GruNodes, projected: &[NodeId]) -> Result<Vec<NodeId>> {
    let mut h = zero_state(tape, gru);
    let mut states = Vec::with_capacity(projected.len());
    for &x in projected {
        h = gru_recur_node(tape, gru, x, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Backward states from inputs already passed through [`project_nodes`].
pub fn run_backward_projected(tape: &mut Tape, gru: &GruNodes, projected: &[NodeId]) -> Result<Vec<NodeId>> {
    let mut h = zero_state(tape, gru);
    let mut states = vec![h; projected.len()];
    for (i, &x) in projected.iter().enumerate().rev() {
        h = gru_recur_node(tape, gru, x, h)?;
        states[i] = h;
    }
    Ok(states)
}

/// Forward states `h_1..h_T` from `h_0 = 0`.
pub fn run_forward_nodes(tape: &mut Tape, gru: &GruNodes, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
    let projected = project_nodes(tape, gru, inputs)?;
    run_forward_projected(tape, gru, &projected)
}

/// Backward states, recursing from the last input with a zero start state;
/// `states[i]` belongs to `inputs[i]`.
pub fn run_backward_nodes(tape: &mut Tape, gru: &GruNodes, inputs: &[NodeId]) -> Result<Vec<NodeId>> {
    let projected = project_nodes(tape, gru, inputs)?;
    run_backward_projected(tape, gru, &projected)
}

/// How much of the sequence the backward pass may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BidirectionalMode {
    /// Both directions read all of `x_1..x_T`.
    Full,
    /// Both directions read only `x_1..x_t` (1-based `t`); states exist for positions `1..=t`.
    Prefix(usize),
}

/// Concatenated `[forward; backward]` states.
pub fn run_bidirectional_nodes(
    tape: &mut Tape,
    fwd: &GruNodes,
    bwd: &GruNodes,
    inputs: &[NodeId],
    mode: BidirectionalMode,
) -> Result<Vec<NodeId>> {
    let visible = match mode {
        BidirectionalMode::Full => inputs,
        BidirectionalMode::Prefix(t) => {
            if t == 0 || t > inputs.len() {
                return Err(Error::OutOfRange(format!(
                    "prefix length {t} for a sequence of {}",
                    inputs.len()
                )));
            }
            &inputs[..t]
        }
    };
    let f = run_forward_nodes(tape, fwd, visible)?;
    let b = run_backward_nodes(tape, bwd, visible)?;
    f.into_iter()
        .zip(b)
        .map(|(fi, bi)| tape.concat(&[fi, bi], 0))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub states: Vec<Tensor>,
    pub direction: Direction,
}

impl HiddenSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn width(&self) -> usize {
        self.states.first().map_or(0, Tensor::len)
    }

    /// States as a `T × width` matrix.
    pub fn as_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.states.iter().map(|s| s.data().to_vec()).collect();
        Tensor::from_rows(&rows).expect("equal-width states")
    }
}

fn collect(tape: &Tape, nodes: Vec<NodeId>, direction: Direction) -> HiddenSequence {
    HiddenSequence {
        states: nodes.into_iter().map(|n| tape.value(n).clone()).collect(),
        direction,
    }
}

fn constant_inputs(tape: &mut Tape, inputs: &[Tensor]) -> Vec<NodeId> {
    inputs.iter().map(|x| tape.constant(x.clone())).collect()
}

pub fn gru_step(params: &GruParams, v: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    params.validate()?;
    let mut tape = Tape::detached();
    let g = params.constants(&mut tape);
    let (vn, hn) = (tape.constant(v.clone()), tape.constant(h_prev.clone()));
    let out = gru_step_node(&mut tape, &g, vn, hn)?;
    Ok(tape.value(out).clone())
}

pub fn run_forward(params: &GruParams, inputs: &[Tensor]) -> Result<HiddenSequence> {
    params.validate()?;
    let mut tape = Tape::detached();
    let g = params.constants(&mut tape);
    let xs = constant_inputs(&mut tape, inputs);
    let states = run_forward_nodes(&mut tape, &g, &xs)?;
    Ok(collect(&tape, states, Direction::Forward))
}

pub fn run_backward(params: &GruParams, inputs: &[Tensor]) -> Result<HiddenSequence> {
    params.validate()?;
    let mut tape = Tape::detached();
    let g = params.constants(&mut tape);
    let xs = constant_inputs(&mut tape, inputs);
    let states = run_backward_nodes(&mut tape, &g, &xs)?;
    Ok(collect(&tape, states, Direction::Backward))
}

pub fn run_bidirectional(
    fwd: &GruParams,
    bwd: &GruParams,
    inputs: &[Tensor],
    mode: BidirectionalMode,
) -> Result<HiddenSequence> {
    fwd.validate()?;
    bwd.validate()?;
    let mut tape = Tape::detached();
    let f = fwd.constants(&mut tape);
    let b = bwd.constants(&mut tape);
    let xs = constant_inputs(&mut tape, inputs);
    let states = run_bidirectional_nodes(&mut tape, &f, &b, &xs, mode)?;
    Ok(collect(&tape, states, Direction::Bidirectional))
}
