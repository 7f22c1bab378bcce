//! The eight predictive variants: visit embedding, recurrent encoder,
//! optional attention, softmax output and the cross-entropy objective.

mod persist;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_nodes, attentional_state_nodes, AttentionIds, AttentionKind, AttentionNodes, AttentionParams,
};
use crate::ehr_data::EncodedPatient;
use crate::error::{Error, Result};
use crate::nn_core::{init_param, InitScheme, NodeId, ParamId, ParamKind, ParamStore, Tape, Tensor};
use crate::recurrent::{
    project_nodes, run_backward_nodes, run_backward_projected, run_forward_nodes, GruIds, GruNodes, GruParams,
};

pub use persist::{load_model, save_model, Manifest, ManifestParam, FORMAT_VERSION};

/// Clamp applied to probabilities inside the cross-entropy.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Rnn,
    RnnL,
    RnnG,
    RnnC,
    DipolePlain,
    DipoleL,
    DipoleG,
    DipoleC,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Rnn,
        Variant::RnnL,
        Variant::RnnG,
        Variant::RnnC,
        Variant::DipolePlain,
        Variant::DipoleL,
        Variant::DipoleG,
        Variant::DipoleC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rnn => "rnn",
            Variant::RnnL => "rnn_l",
            Variant::RnnG => "rnn_g",
            Variant::RnnC => "rnn_c",
            Variant::DipolePlain => "dipole_plain",
            Variant::DipoleL => "dipole_l",
            Variant::DipoleG => "dipole_g",
            Variant::DipoleC => "dipole_c",
        }
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, Variant::DipolePlain | Variant::DipoleL | Variant::DipoleG | Variant::DipoleC)
    }

    pub fn attention(self) -> Option<AttentionKind> {
        match self {
            Variant::RnnL | Variant::DipoleL => Some(AttentionKind::Location),
            Variant::RnnG | Variant::DipoleG => Some(AttentionKind::General),
            Variant::RnnC | Variant::DipoleC => Some(AttentionKind::Concat),
            Variant::Rnn | Variant::DipolePlain => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s}")))
    }
}

/// What the backward recurrence may read when predicting the next visit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalityMode {
    /// Only visits up to the current step.
    #[default]
    Prefix,
    /// The whole record, including visits after the prediction target.
    Full,
}

impl fmt::Display for CausalityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CausalityMode::Prefix => "prefix",
            CausalityMode::Full => "full",
        })
    }
}

impl FromStr for CausalityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(CausalityMode::Prefix),
            "full" => Ok(CausalityMode::Full),
            _ => Err(Error::Config(format!("unknown causality mode {s} (expected prefix or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_codes: usize,
    pub n_categories: usize,
    /// Visit embedding width `m`.
    pub embed_dim: usize,
    /// GRU state width `p`.
    pub hidden_dim: usize,
    /// Concat-attention hidden width `q`.
    pub attention_dim: usize,
    /// Attentional state width `r`.
    pub attentional_dim: usize,
    pub dropout: f64,
    pub l2: f64,
    /// Mode the model is trained and traced with.
    pub brnn_mode: CausalityMode,
}

impl ModelConfig {
    pub fn new(variant: Variant, n_codes: usize, n_categories: usize) -> Self {
        ModelConfig {
            variant,
            n_codes,
            n_categories,
            embed_dim: 256,
            hidden_dim: 256,
            attention_dim: 128,
            attentional_dim: 0,
            dropout: 0.5,
            l2: 0.001,
            brnn_mode: CausalityMode::Prefix,
        }
        .with_dims(256, 256, 128)
    }

    /// Sets `m`, `p`, `q` and resets `r` to the encoder width.
    pub fn with_dims(mut self, embed_dim: usize, hidden_dim: usize, attention_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self.hidden_dim = hidden_dim;
        self.attention_dim = attention_dim;
        self.attentional_dim = self.encoder_width();
        self
    }

    /// `p` for unidirectional variants, `2p` for bidirectional ones.
    pub fn encoder_width(&self) -> usize {
        if self.variant.bidirectional() {
            2 * self.hidden_dim
        } else {
            self.hidden_dim
        }
    }

    /// Width of the vector fed to the output layer.
    pub fn output_input_width(&self) -> usize {
        if self.variant.attention().is_some() {
            self.attentional_dim
        } else {
            self.encoder_width()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_codes", self.n_codes),
            ("n_categories", self.n_categories),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("attention_dim", self.attention_dim),
            ("attentional_dim", self.attentional_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Config(format!("l2 {} must be a finite non-negative number", self.l2)));
        }
        Ok(())
    }
}

/// Parameter ids of a model, in registration order.
#[derive(Clone, Debug)]
struct ModelIds {
    w_v: ParamId,
    b_c: ParamId,
    forward: GruIds,
    backward: Option<GruIds>,
    attention: Option<AttentionIds>,
    w_c: Option<ParamId>,
    w_s: ParamId,
    b_s: ParamId,
    weights: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    ids: ModelIds,
}

/// One next-visit prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub patient_id: String,
    /// 1-based index of the last visit read; the target is visit `step + 1`.
    pub step: usize,
    /// Visits in the patient's record.
    pub n_visits: usize,
    pub scores: Vec<f64>,
    /// Sorted category indices present in the target visit.
    pub truth: Vec<usize>,
    /// Weights over the `step - 1` earlier states, for attentive variants.
    pub attention: Option<Vec<f64>>,
}

/// Nodes recorded for one patient.
#[derive(Clone, Debug)]
pub struct PatientGraph {
    pub probs: Vec<NodeId>,
    pub attention: Vec<Option<NodeId>>,
    /// Mean per-step cross-entropy, without the weight penalty.
    pub loss: NodeId,
}

fn weight(shape: &[usize], rng: &mut Option<&mut dyn RngCore>) -> Tensor {
    match rng {
        Some(r) => init_param(shape, InitScheme::GlorotUniform, *r),
        None => Tensor::zeros(shape),
    }
}

impl Model {
    /// Glorot-uniform weights and zero biases.
    pub fn init(config: ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    /// All parameters zero; used as a template when loading.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, mut rng: Option<&mut dyn RngCore>) -> Result<Self> {
        config.validate()?;
        let (m, p, q) = (config.embed_dim, config.hidden_dim, config.attention_dim);
        let width = config.encoder_width();
        let mut store = ParamStore::new();
        let w_v = store.insert("embed.W_v", ParamKind::Weight, weight(&[m, config.n_codes], &mut rng))?;
        let b_c = store.insert("embed.b_c", ParamKind::Bias, Tensor::zeros(&[m]))?;
        let gru = |rng: &mut Option<&mut dyn RngCore>| match rng {
            Some(r) => GruParams::init(m, p, *r),
            None => GruParams::zeros(m, p),
        };
        let forward = gru(&mut rng).register(&mut store, "gru_fwd")?;
        let backward = if config.variant.bidirectional() {
            Some(gru(&mut rng).register(&mut store, "gru_bwd")?)
        } else {
            None
        };
        let (attention, w_c) = match config.variant.attention() {
            Some(kind) => {
                let params = match &mut rng {
                    Some(r) => AttentionParams::init(kind, width, q, *r),
                    None => AttentionParams::zeros(kind, width, q),
                };
                let ids = params.register(&mut store, "attention")?;
                let w_c = store.insert(
                    "attn_state.W_c",
                    ParamKind::Weight,
                    weight(&[config.attentional_dim, 2 * width], &mut rng),
                )?;
                (Some(ids), Some(w_c))
            }
            None => (None, None),
        };
        let out_w = config.output_input_width();
        let w_s = store.insert("output.W_s", ParamKind::Weight, weight(&[config.n_categories, out_w], &mut rng))?;
        let b_s = store.insert("output.b_s", ParamKind::Bias, Tensor::zeros(&[config.n_categories]))?;
        let weights = store.ids().filter(|&id| store.kind(id) == ParamKind::Weight).collect();
        Ok(Model {
            config,
            store,
            ids: ModelIds {
                w_v,
                b_c,
                forward,
                backward,
                attention,
                w_c,
                w_s,
                b_s,
                weights,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces a parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        self.store.set(id, value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.by_name(name)
    }

    /// Ids of the penalized (non-bias) parameters.
    pub fn weight_ids(&self) -> &[ParamId] {
        &self.ids.weights
    }

    pub fn embedding_weight(&self) -> &Tensor {
        self.store.get(self.ids.w_v)
    }

    pub fn weight_penalty(&self) -> f64 {
        self.config.l2 * self.store.weight_sq_norm()
    }

    /// Records the forward pass for one patient on `tape`, which must be over
    /// this model's store (or a clone of it). Dropout is active iff `dropout_rng` is given.
    pub fn graph(
        &self,
        tape: &mut Tape,
        patient: &EncodedPatient,
        mode: CausalityMode,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<PatientGraph> {
        let cfg = &self.config;
        let n = patient.inputs.len();
        if n < 2 || patient.targets.len() != n - 1 {
            return Err(Error::Contract(format!(
                "patient {} needs at least 2 visits and one target per step",
                patient.patient_id
            )));
        }
        let steps = n - 1;
        let ids = &self.ids;
        let (w_v, b_c) = (tape.param(ids.w_v), tape.param(ids.b_c));
        let fwd = ids.forward.on_tape(tape);
        let bwd: Option<GruNodes> = ids.backward.map(|b| b.on_tape(tape));
        let att: Option<AttentionNodes> = ids.attention.as_ref().map(|a| a.on_tape(tape));
        let w_c = ids.w_c.map(|id| tape.param(id));
        let (w_s, b_s) = (tape.param(ids.w_s), tape.param(ids.b_s));

        let reads_future = bwd.is_some() && mode == CausalityMode::Full;
        let n_embed = if reads_future { n } else { steps };
        let mut embedded = Vec::with_capacity(n_embed);
        for x in &patient.inputs[..n_embed] {
            if x.len() != cfg.n_codes {
                return Err(Error::dim(
                    "embed_visit",
                    format!("visit of width {} for {} codes", x.len(), cfg.n_codes),
                ));
            }
            let x = tape.constant(x.clone());
            let pre = tape.linear(&[(w_v, x)], Some(b_c))?;
            let v = tape.relu(pre);
            embedded.push(apply_dropout(tape, v, cfg.dropout, &mut dropout_rng)?);
        }

        let forward_states = run_forward_nodes(tape, &fwd, &embedded)?;
        let full_states: Option<Vec<NodeId>> = match (bwd, reads_future) {
            (Some(b), true) => {
                let back = run_backward_nodes(tape, &b, &embedded)?;
                Some(
                    forward_states
                        .iter()
                        .zip(&back)
                        .map(|(&f, &bk)| tape.concat(&[f, bk], 0))
                        .collect::<Result<_>>()?,
                )
            }
            (None, _) => Some(forward_states.clone()),
            (Some(_), false) => None,
        };

        // Backward input projections, shared by every prefix restart.
        let bwd_projected = match (bwd, &full_states) {
            (Some(b), None) => project_nodes(tape, &b, &embedded)?,
            _ => Vec::new(),
        };
        let mut probs = Vec::with_capacity(steps);
        let mut attention = Vec::with_capacity(steps);
        let mut losses = Vec::with_capacity(steps);
        for t in 0..steps {
            let states: Vec<NodeId> = match (&full_states, bwd) {
                (Some(all), _) => all[..=t].to_vec(),
                (None, Some(b)) => {
                    // Backward recurrence restarted over the visible prefix.
                    let start = if att.is_some() { 0 } else { t };
                    let back = run_backward_projected(tape, &b, &bwd_projected[start..=t])?;
                    (start..=t)
                        .map(|i| tape.concat(&[forward_states[i], back[i - start]], 0))
                        .collect::<Result<_>>()?
                }
                (None, None) => unreachable!("unidirectional states are always precomputed"),
            };
            let (&query, past) = states.split_last().expect("at least one state");
            let (hidden, weights) = match (&att, w_c) {
                (Some(a), Some(w_c)) => {
                    let out = attend_nodes(tape, a, past, query)?;
                    (attentional_state_nodes(tape, w_c, out.context, query)?, out.weights)
                }
                _ => (query, None),
            };
            let hidden = apply_dropout(tape, hidden, cfg.dropout, &mut dropout_rng)?;
            let logits = tape.linear(&[(w_s, hidden)], Some(b_s))?;
            let p = tape.softmax(logits, 0)?;
            let y = tape.constant(patient.targets[t].clone());
            losses.push(tape.binary_cross_entropy(p, y, LOSS_EPS)?);
            probs.push(p);
            attention.push(weights);
        }
        let stacked = tape.concat(&losses, 0)?;
        let loss = tape.mean(stacked);
        Ok(PatientGraph { probs, attention, loss })
    }

    /// Mean patient loss plus the weight penalty, all on one tape.
    pub fn batch_loss(&self, tape: &mut Tape, patients: &[EncodedPatient], mode: CausalityMode) -> Result<NodeId> {
        if patients.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut losses = Vec::with_capacity(patients.len());
        for p in patients {
            losses.push(self.graph(tape, p, mode, None)?.loss);
        }
        let stacked = tape.concat(&losses, 0)?;
        let data = tape.mean(stacked);
        if self.config.l2 == 0.0 {
            return Ok(data);
        }
        let mut penalty = Vec::with_capacity(self.ids.weights.len());
        for &id in &self.ids.weights {
            let w = tape.param(id);
            penalty.push(tape.sum_squares(w));
        }
        let stacked = tape.concat(&penalty, 0)?;
        let total = tape.sum(stacked);
        let scaled = tape.scale(total, self.config.l2);
        tape.add(data, scaled)
    }

    /// Deterministic predictions for every step of one patient.
    pub fn predict(&self, patient: &EncodedPatient, mode: CausalityMode) -> Result<Vec<PredictionRecord>> {
        let mut tape = Tape::new(&self.store);
        let graph = self.graph(&mut tape, patient, mode, None)?;
        Ok(graph
            .probs
            .iter()
            .zip(&graph.attention)
            .enumerate()
            .map(|(t, (&p, w))| PredictionRecord {
                patient_id: patient.patient_id.clone(),
                step: t + 1,
                n_visits: patient.inputs.len(),
                scores: tape.value(p).data().to_vec(),
                truth: support(&patient.targets[t]),
                attention: match (w, self.config.variant.attention()) {
                    (Some(w), _) => Some(tape.value(*w).data().to_vec()),
                    (None, Some(_)) => Some(Vec::new()),
                    (None, None) => None,
                },
            })
            .collect())
    }
}

fn apply_dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    match rng {
        Some(r) => tape.dropout(x, rate, true, *r),
        None => Ok(x),
    }
}

fn support(multi_hot: &Tensor) -> Vec<usize> {
    multi_hot
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// `ReLU(W_v x + b_c)`.
pub fn embed_visit(w_v: &Tensor, b_c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::detached();
    let (w, b, x) = (tape.constant(w_v.clone()), tape.constant(b_c.clone()), tape.constant(x.clone()));
    let pre = tape.linear(&[(w, x)], Some(b))?;
    let out = tape.relu(pre);
    Ok(tape.value(out).clone())
}

/// Cross-entropy of one prediction against its category set, with the usual clamp.
pub fn step_loss(scores: &[f64], truth: &[usize]) -> f64 {
    let mut total = 0.0;
    for (g, &p) in scores.iter().enumerate() {
        let p = p.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        total -= if truth.binary_search(&g).is_ok() { p.ln() } else { (1.0 - p).ln() };
    }
    total
}

/// Mean over patients of the mean step loss, plus `l2 · Σ‖W‖²` over weights.
pub fn loss(patients: &[Vec<PredictionRecord>], store: &ParamStore, l2: f64) -> Result<f64> {
    if patients.is_empty() || patients.iter().any(Vec::is_empty) {
        return Err(Error::Contract("loss needs at least one record per patient".into()));
    }
    let data: f64 = patients
        .iter()
        .map(|recs| recs.iter().map(|r| step_loss(&r.scores, &r.truth)).sum::<f64>() / recs.len() as f64)
        .sum::<f64>()
        / patients.len() as f64;
    Ok(data + l2 * store.weight_sq_norm())
}
