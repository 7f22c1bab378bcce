//! Location, general and concatenation attention over past hidden states.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{init_param, InitScheme, NodeId, ParamId, ParamKind, ParamStore, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Location,
    General,
    Concat,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Location, AttentionKind::General, AttentionKind::Concat];

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Location => "location",
            AttentionKind::General => "general",
            AttentionKind::Concat => "concat",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention kind {s}")))
    }
}

/// Scoring parameters for states of width `w`.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionParams {
    /// `score = weight · h_i + bias`; weight `[w]`, bias `[1]`.
    Location { weight: Tensor, bias: Tensor },
    /// `score = h_tᵀ weight h_i`; weight `[w, w]`.
    General { weight: Tensor },
    /// `score = v · tanh(weight [h_t; h_i])`; weight `[q, 2w]`, v `[q]`.
    Concat { weight: Tensor, v: Tensor },
}

impl AttentionParams {
    pub fn zeros(kind: AttentionKind, width: usize, q: usize) -> Self {
        match kind {
            AttentionKind::Location => AttentionParams::Location {
                weight: Tensor::zeros(&[width]),
                bias: Tensor::zeros(&[1]),
            },
            AttentionKind::General => AttentionParams::General {
                weight: Tensor::zeros(&[width, width]),
            },
            AttentionKind::Concat => AttentionParams::Concat {
                weight: Tensor::zeros(&[q, 2 * width]),
                v: Tensor::zeros(&[q]),
            },
        }
    }

    pub fn init<R: Rng + ?Sized>(kind: AttentionKind, width: usize, q: usize, rng: &mut R) -> Self {
        let g = InitScheme::GlorotUniform;
        match kind {
            AttentionKind::Location => AttentionParams::Location {
                weight: init_param(&[width], g, rng),
                bias: Tensor::zeros(&[1]),
            },
            AttentionKind::General => AttentionParams::General {
                weight: init_param(&[width, width], g, rng),
            },
            AttentionKind::Concat => AttentionParams::Concat {
                weight: init_param(&[q, 2 * width], g, rng),
                v: init_param(&[q], g, rng),
            },
        }
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionParams::Location { .. } => AttentionKind::Location,
            AttentionParams::General { .. } => AttentionKind::General,
            AttentionParams::Concat { .. } => AttentionKind::Concat,
        }
    }

    /// Width of the states this scorer accepts.
    pub fn width(&self) -> usize {
        match self {
            AttentionParams::Location { weight, .. } => weight.len(),
            AttentionParams::General { weight } => weight.rows(),
            AttentionParams::Concat { weight, .. } => weight.cols() / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            AttentionParams::Location { weight, bias } => weight.is_vector() && bias.shape() == [1],
            AttentionParams::General { weight } => weight.is_matrix() && weight.rows() == weight.cols(),
            AttentionParams::Concat { weight, v } => {
                weight.is_matrix()
                    && weight.cols() % 2 == 0
                    && v.is_vector()
                    && !v.is_empty()
                    && v.len() == weight.rows()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::dim("attention_params", format!("inconsistent {} shapes", self.kind())))
        }
    }

    fn named(&self) -> Vec<(&'static str, ParamKind, &Tensor)> {
        match self {
            AttentionParams::Location { weight, bias } => {
                vec![("weight", ParamKind::Weight, weight), ("bias", ParamKind::Bias, bias)]
            }
            AttentionParams::General { weight } => vec![("weight", ParamKind::Weight, weight)],
            AttentionParams::Concat { weight, v } => {
                vec![("weight", ParamKind::Weight, weight), ("v", ParamKind::Weight, v)]
            }
        }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<AttentionIds> {
        self.validate()?;
        let ids = self
            .named()
            .into_iter()
            .map(|(n, kind, t)| store.insert(&format!("{prefix}.{n}"), kind, t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionIds { kind: self.kind(), ids })
    }

    pub fn constants(&self, tape: &mut Tape) -> AttentionNodes {
        let nodes: Vec<NodeId> = self.named().into_iter().map(|(_, _, t)| tape.constant(t.clone())).collect();
        AttentionNodes::from_nodes(tape, self.kind(), &nodes)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    kind: AttentionKind,
    ids: Vec<ParamId>,
}

impl AttentionIds {
    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn on_tape(&self, tape: &mut Tape) -> AttentionNodes {
        let nodes: Vec<NodeId> = self.ids.iter().map(|&id| tape.param(id)).collect();
        AttentionNodes::from_nodes(tape, self.kind, &nodes)
    }

    pub fn params(&self, store: &ParamStore) -> AttentionParams {
        let t = |i: usize| store.get(self.ids[i]).clone();
        match self.kind {
            AttentionKind::Location => AttentionParams::Location { weight: t(0), bias: t(1) },
            AttentionKind::General => AttentionParams::General { weight: t(0) },
            AttentionKind::Concat => AttentionParams::Concat { weight: t(0), v: t(1) },
        }
    }
}

/// Scoring parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum AttentionNodes {
    Location { weight: NodeId, bias: NodeId },
    /// The transposed weight is recorded once and reused for every query.
    General { weight_t: NodeId },
    Concat { weight: NodeId, v: NodeId },
}

impl AttentionNodes {
    fn from_nodes(tape: &mut Tape, kind: AttentionKind, nodes: &[NodeId]) -> Self {
        match kind {
            AttentionKind::Location => AttentionNodes::Location {
                weight: nodes[0],
                bias: nodes[1],
            },
            AttentionKind::General => AttentionNodes::General {
                weight_t: tape.transpose(nodes[0]).expect("matrix weight"),
            },
            AttentionKind::Concat => AttentionNodes::Concat {
                weight: nodes[0],
                v: nodes[1],
            },
        }
    }
}

/// Node ids of one attention step. `weights` is `None` when there was no past state.
#[derive(Clone, Copy, Debug)]
pub struct AttendNodes {
    pub weights: Option<NodeId>,
    pub context: NodeId,
}

/// Scores every past state against `query`, normalizes, and forms the context.
/// With no past states the context is zero and no softmax is taken.
pub fn attend_nodes(tape: &mut Tape, att: &AttentionNodes, past: &[NodeId], query: NodeId) -> Result<AttendNodes> {
    let width = tape.shape(query).iter().product::<usize>();
    if tape.shape(query).len() != 1 {
        return Err(Error::dim("attend", format!("query shape {:?}", tape.shape(query))));
    }
    if past.is_empty() {
        let context = tape.constant(Tensor::zeros(&[width]));
        return Ok(AttendNodes { weights: None, context });
    }
    let states = tape.stack(past)?;
    if tape.shape(states)[1] != width {
        return Err(Error::dim(
            "attend",
            format!("past states of width {} vs query {width}", tape.shape(states)[1]),
        ));
    }
    let scores = match *att {
        AttentionNodes::Location { weight, bias } => {
            let s = tape.matvec(states, weight)?;
            tape.shift(s, bias)?
        }
        AttentionNodes::General { weight_t } => {
            let projected = tape.matvec(weight_t, query)?;
            tape.matvec(states, projected)?
        }
        AttentionNodes::Concat { weight, v } => {
            let mut s = Vec::with_capacity(past.len());
            for &h in past {
                let joined = tape.concat(&[query, h], 0)?;
                let hidden = tape.matvec(weight, joined)?;
                let hidden = tape.tanh(hidden);
                s.push(tape.dot(v, hidden)?);
            }
            tape.concat(&s, 0)?
        }
    };
    let weights = tape.softmax(scores, 0)?;
    let states_t = tape.transpose(states)?;
    let context = tape.matvec(states_t, weights)?;
    Ok(AttendNodes {
        weights: Some(weights),
        context,
    })
}

/// `tanh(W_c [context; query])`.
pub fn attentional_state_nodes(tape: &mut Tape, w_c: NodeId, context: NodeId, query: NodeId) -> Result<NodeId> {
    let joined = tape.concat(&[context, query], 0)?;
    let pre = tape.linear(&[(w_c, joined)], None)?;
    Ok(tape.tanh(pre))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub weights: Vec<f64>,
    pub context: Tensor,
}

fn expect_kind(params: &AttentionParams, kind: AttentionKind) -> Result<()> {
    params.validate()?;
    if params.kind() != kind {
        return Err(Error::Config(format!("expected {kind} attention parameters, got {}", params.kind())));
    }
    Ok(())
}

fn single_score(params: &AttentionParams, query: &Tensor, h_i: &Tensor) -> Result<f64> {
    if query.len() != params.width() || h_i.len() != params.width() {
        return Err(Error::dim(
            "attention_score",
            format!("states of width {}/{} for {}-wide parameters", query.len(), h_i.len(), params.width()),
        ));
    }
    let mut tape = Tape::detached();
    let att = params.constants(&mut tape);
    let (q, h) = (tape.constant(query.clone()), tape.constant(h_i.clone()));
    let score = match att {
        AttentionNodes::Location { weight, bias } => {
            let s = tape.dot(weight, h)?;
            tape.add(s, bias)?
        }
        AttentionNodes::General { weight_t } => {
            let projected = tape.matvec(weight_t, q)?;
            tape.dot(projected, h)?
        }
        AttentionNodes::Concat { weight, v } => {
            let joined = tape.concat(&[q, h], 0)?;
            let hidden = tape.matvec(weight, joined)?;
            let hidden = tape.tanh(hidden);
            tape.dot(v, hidden)?
        }
    };
    Ok(tape.value(score).item())
}

pub fn score_location(params: &AttentionParams, h_i: &Tensor) -> Result<f64> {
    expect_kind(params, AttentionKind::Location)?;
    single_score(params, h_i, h_i)
}

pub fn score_general(params: &AttentionParams, h_t: &Tensor, h_i: &Tensor) -> Result<f64> {
    expect_kind(params, AttentionKind::General)?;
    single_score(params, h_t, h_i)
}

pub fn score_concat(params: &AttentionParams, h_t: &Tensor, h_i: &Tensor) -> Result<f64> {
    expect_kind(params, AttentionKind::Concat)?;
    single_score(params, h_t, h_i)
}

/// Attention over `past` for the query state. Requires at least one past state.
pub fn attend(params: &AttentionParams, past: &[Tensor], query: &Tensor) -> Result<AttentionOutput> {
    params.validate()?;
    if past.is_empty() {
        return Err(Error::Contract("attention needs at least one past state".into()));
    }
    if query.len() != params.width() {
        return Err(Error::dim(
            "attend",
            format!("query width {} for {}-wide parameters", query.len(), params.width()),
        ));
    }
    let mut tape = Tape::detached();
    let att = params.constants(&mut tape);
    let nodes: Vec<NodeId> = past.iter().map(|h| tape.constant(h.clone())).collect();
    let q = tape.constant(query.clone());
    let out = attend_nodes(&mut tape, &att, &nodes, q)?;
    Ok(AttentionOutput {
        weights: tape.value(out.weights.expect("non-empty past")).data().to_vec(),
        context: tape.value(out.context).clone(),
    })
}

pub fn attentional_state(w_c: &Tensor, context: &Tensor, query: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::detached();
    let w = tape.constant(w_c.clone());
    let c = tape.constant(context.clone());
    let q = tape.constant(query.clone());
    let out = attentional_state_nodes(&mut tape, w, c, q)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn location_examples() {
        let p = AttentionParams::Location { weight: v(&[1.0, 1.0]), bias: v(&[0.0]) };
        assert_eq!(score_location(&p, &v(&[2.0, 3.0])).unwrap(), 5.0);
        let p = AttentionParams::Location { weight: v(&[0.0, 0.0]), bias: v(&[7.0]) };
        assert_eq!(score_location(&p, &v(&[-4.0, 9.0])).unwrap(), 7.0);
    }

    #[test]
    fn general_examples() {
        let p = AttentionParams::General { weight: Tensor::identity(2) };
        assert_eq!(score_general(&p, &v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(score_general(&p, &v(&[1.0, 1.0]), &v(&[1.0, 1.0])).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = AttentionParams::init(AttentionKind::General, 3, 0, &mut rng);
        let (a, b) = (v(&[0.3, -1.0, 2.0]), v(&[1.5, 0.2, -0.4]));
        let s1 = score_general(&p, &a, &b).unwrap();
        let s2 = score_general(&p, &a.map(|x| 2.0 * x), &b).unwrap();
        assert!((s2 - 2.0 * s1).abs() < 1e-12);
        // asymmetric weight: query and key roles matter
        let p = AttentionParams::General { weight: Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap() };
        assert_eq!(score_general(&p, &v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(score_general(&p, &v(&[0.0, 1.0]), &v(&[1.0, 0.0])).unwrap(), 0.0);
    }

    #[test]
    fn concat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (v(&[0.3, -1.0]), v(&[1.5, 0.2]));
        let p = AttentionParams::Concat { weight: init_param(&[3, 4], InitScheme::GlorotUniform, &mut rng), v: Tensor::zeros(&[3]) };
        assert_eq!(score_concat(&p, &a, &b).unwrap(), 0.0);
        let p = AttentionParams::Concat { weight: Tensor::zeros(&[3, 4]), v: v(&[1.0, 2.0, 3.0]) };
        assert_eq!(score_concat(&p, &a, &b).unwrap(), 0.0);
        let p = AttentionParams::Concat {
            weight: Tensor::full(&[3, 4], 100.0),
            v: v(&[1.0, -2.0, 3.0]),
        };
        assert!(score_concat(&p, &a, &b).unwrap().abs() <= 6.0);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let p = AttentionParams::zeros(AttentionKind::General, 2, 0);
        assert!(score_location(&p, &v(&[1.0, 1.0])).is_err());
        let bad = AttentionParams::Concat { weight: Tensor::zeros(&[0, 4]), v: Tensor::zeros(&[0]) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attend_examples() {
        let p = AttentionParams::zeros(AttentionKind::Location, 2, 0);
        let out = attend(&p, &[v(&[2.0, 0.0]), v(&[0.0, 2.0])], &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out.weights, vec![0.5, 0.5]);
        assert_eq!(out.context.data(), &[1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AttentionParams::init(AttentionKind::Concat, 2, 3, &mut rng);
        let out = attend(&p, &[v(&[0.4, -0.1])], &v(&[1.0, 1.0])).unwrap();
        assert_eq!(out.weights, vec![1.0]);
        assert_eq!(out.context.data(), &[0.4, -0.1]);
        assert!(attend(&p, &[], &v(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn context_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in AttentionKind::ALL {
            let p = AttentionParams::init(kind, 3, 2, &mut rng);
            let past: Vec<Tensor> = (0..4)
                .map(|_| Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let query = v(&[0.2, -0.5, 0.9]);
            let out = attend(&p, &past, &query).unwrap();
            let scores: Vec<f64> = past
                .iter()
                .map(|h| match kind {
                    AttentionKind::Location => score_location(&p, h),
                    AttentionKind::General => score_general(&p, &query, h),
                    AttentionKind::Concat => score_concat(&p, &query, h),
                })
                .collect::<Result<_>>()
                .unwrap();
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for d in 0..3 {
                let direct: f64 = past
                    .iter()
                    .zip(&scores)
                    .map(|(h, s)| (s - max).exp() / z * h.data()[d])
                    .sum();
                assert!((out.context.data()[d] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attentional_state_examples() {
        let out = attentional_state(&Tensor::zeros(&[3, 4]), &v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        let out = attentional_state(&Tensor::full(&[3, 4], 5.0), &v(&[1.0, 2.0]), &v(&[-3.0, 4.0])).unwrap();
        assert!(out.data().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn gradients_pass_check_for_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in AttentionKind::ALL {
            let mut store = ParamStore::new();
            let mut p = AttentionParams::init(kind, 3, 2, &mut rng);
            if let AttentionParams::Location { bias, .. } = &mut p {
                *bias = v(&[0.3]);
            }
            let ids = p.register(&mut store, "att").unwrap();
            let w_c = store
                .insert("w_c", ParamKind::Weight, init_param(&[4, 6], InitScheme::GlorotUniform, &mut rng))
                .unwrap();
            let past: Vec<ParamId> = (0..3)
                .map(|i| {
                    let h = Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
                    store.insert(&format!("h{i}"), ParamKind::Weight, h).unwrap()
                })
                .collect();
            let query = store.insert("q", ParamKind::Weight, v(&[0.1, 0.7, -0.4])).unwrap();
            let report = grad_check(
                &store,
                |tape| {
                    let att = ids.on_tape(tape);
                    let hs: Vec<NodeId> = past.iter().map(|&id| tape.param(id)).collect();
                    let q = tape.param(query);
                    let out = attend_nodes(tape, &att, &hs, q)?;
                    let w = tape.param(w_c);
                    let s = attentional_state_nodes(tape, w, out.context, q)?;
                    let probe = tape.constant(v(&[1.0, -0.5, 2.0, 0.25]));
                    tape.dot(s, probe)
                },
                GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "{kind}: {report}");
        }
    }

    #[test]
    fn location_weight_gradient_is_the_state() {
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamKind::Weight, v(&[0.5, -0.25])).unwrap();
        let b = store.insert("b", ParamKind::Bias, v(&[0.0])).unwrap();
        let mut tape = Tape::new(&store);
        let att = AttentionNodes::Location { weight: tape.param(w), bias: tape.param(b) };
        let AttentionNodes::Location { weight, bias } = att else { unreachable!() };
        let h = tape.constant(v(&[2.0, 3.0]));
        let s = tape.dot(weight, h).unwrap();
        let s = tape.add(s, bias).unwrap();
        let mut grads = store.zero_grads();
        tape.backward(s, &mut grads).unwrap();
        assert_eq!(grads.get(w).data(), &[2.0, 3.0]);
    }
}
