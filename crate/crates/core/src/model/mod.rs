//! The multiple-choice scorer: question/image fusion, fusion with each
//! candidate answer, logistic score and argmax prediction.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};
use crate::features::{EncodedInstance, EncodedText, WordTables};
use crate::training::glorot_init;

mod check;
mod checkpoint;

pub use check::{model_grad_check, GradCheckOptions};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interaction {
    #[default]
    Multiplicative,
    /// Answer branch through W3, question/image branch through W4.
    Order,
    /// Operand roles of `Order` swapped.
    OrderReversed,
}

impl Interaction {
    pub fn as_str(self) -> &'static str {
        match self {
            Interaction::Multiplicative => "multiplicative",
            Interaction::Order => "order",
            Interaction::OrderReversed => "order_reversed",
        }
    }
}

impl FromStr for Interaction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" | "mult" => Ok(Interaction::Multiplicative),
            "order" => Ok(Interaction::Order),
            "order_reversed" | "order-reversed" | "reversed" => Ok(Interaction::OrderReversed),
            other => Err(Error::Config(format!(
                "unknown interaction '{other}' (expected multiplicative, order or order_reversed)"
            ))),
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which input channels are shuffled across each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskConfig {
    pub mask_question: bool,
    pub mask_image: bool,
}

impl MaskConfig {
    pub const NONE: MaskConfig = MaskConfig { mask_question: false, mask_image: false };

    pub fn is_none(&self) -> bool {
        !self.mask_question && !self.mask_image
    }

    pub fn as_str(&self) -> &'static str {
        match (self.mask_question, self.mask_image) {
            (false, false) => "none",
            (true, false) => "question",
            (false, true) => "image",
            (true, true) => "both",
        }
    }
}

impl FromStr for MaskConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (q, i) = match s {
            "none" | "QI" => (false, false),
            "question" | "q" | "-QI" => (true, false),
            "image" | "i" | "Q-I" => (false, true),
            "both" | "qi" | "-Q-I" => (true, true),
            other => {
                return Err(Error::Config(format!(
                    "unknown mask '{other}' (expected none, question, image or both)"
                )))
            }
        };
        Ok(MaskConfig { mask_question: q, mask_image: i })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub q_dim: usize,
    pub i_dim: usize,
    pub a_dim: usize,
    pub hidden: usize,
    pub hidden2: usize,
    pub interaction: Interaction,
}

pub const W1: ParamId = ParamId(0);
pub const B1: ParamId = ParamId(1);
pub const W2: ParamId = ParamId(2);
pub const B2: ParamId = ParamId(3);
pub const W3: ParamId = ParamId(4);
pub const B3: ParamId = ParamId(5);
pub const W4: ParamId = ParamId(6);
pub const B4: ParamId = ParamId(7);
pub const W5: ParamId = ParamId(8);
pub const B5: ParamId = ParamId(9);
const DENSE: usize = 10;
const NAMES: [&str; DENSE] = ["W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "W5", "b5"];

impl ModelConfig {
    /// (rows, cols) of W1, b1, ..., W5, b5.
    pub fn shapes(&self) -> [(usize, usize); DENSE] {
        let (h, h2) = (self.hidden, self.hidden2);
        let (w3_in, w4_in) = match self.interaction {
            Interaction::Multiplicative | Interaction::OrderReversed => (h, self.a_dim),
            Interaction::Order => (self.a_dim, h),
        };
        [
            (h, self.q_dim),
            (h, 1),
            (h, self.i_dim),
            (h, 1),
            (h2, w3_in),
            (h2, 1),
            (h2, w4_in),
            (h2, 1),
            (1, h2),
            (1, 1),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.q_dim, self.i_dim, self.a_dim, self.hidden, self.hidden2];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// W1..W5, b1..b5 and the embedding tables feeding x^Q, x^A and x^I.
///
/// As a [`ParamStore`], ids `0..10` are the dense weights in the order of
/// [`W1`]..[`B5`] and id `10 + t` is embedding table `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    dense: Vec<Parameter>,
    tables: Option<WordTables>,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, tables: Option<WordTables>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dense = config
            .shapes()
            .iter()
            .zip(NAMES)
            .map(|(&(r, c), name)| {
                let value = if c == 1 { Tensor::zeros(r, 1) } else { glorot_init(c, r, rng) };
                Parameter::new(name, value)
            })
            .collect();
        Ok(ModelParams { config, dense, tables })
    }

    /// Assemble from explicit values; shapes must agree with `config`.
    pub fn from_parts(config: ModelConfig, dense: Vec<Parameter>, tables: Option<WordTables>) -> Result<Self> {
        config.validate()?;
        if dense.len() != DENSE {
            return Err(Error::Config(format!("expected {DENSE} dense parameters, got {}", dense.len())));
        }
        for ((p, want), name) in dense.iter().zip(config.shapes()).zip(NAMES) {
            if p.value.shape() != want {
                return Err(Error::Shape {
                    node: name.into(),
                    message: format!("is {:?}, expected {want:?}", p.value.shape()),
                });
            }
            if !p.value.is_finite() {
                return Err(Error::Numerical(format!("{name} has non-finite values")));
            }
        }
        Ok(ModelParams { config, dense, tables })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tables(&self) -> Option<&WordTables> {
        self.tables.as_ref()
    }

    pub fn tables_mut(&mut self) -> Option<&mut WordTables> {
        self.tables.as_mut()
    }

    pub fn dense(&self) -> &[Parameter] {
        &self.dense
    }

    pub fn dense_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.dense[id.0]
    }

    pub fn table_id(&self, table: usize) -> ParamId {
        ParamId(DENSE + table)
    }

    pub fn is_finite(&self) -> bool {
        (0..self.num_params()).all(|i| self.param(ParamId(i)).value.is_finite())
    }
}

impl ParamStore for ModelParams {
    fn num_params(&self) -> usize {
        DENSE + self.tables.as_ref().map_or(0, |t| t.tables.len())
    }

    fn param(&self, id: ParamId) -> &Parameter {
        match id.0.checked_sub(DENSE) {
            None => &self.dense[id.0],
            Some(t) => self.tables.as_ref().expect("table id without tables").tables[t].parameter(),
        }
    }

    fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        match id.0.checked_sub(DENSE) {
            None => &mut self.dense[id.0],
            Some(t) => self.tables.as_mut().expect("table id without tables").tables[t].parameter_mut(),
        }
    }
}

/// Graph nodes of the dense weights, created once per graph.
#[derive(Clone, Copy, Debug)]
pub struct WeightNodes {
    w: [NodeId; DENSE],
}

impl WeightNodes {
    pub fn new(g: &mut Graph, params: &ModelParams) -> Self {
        WeightNodes {
            w: std::array::from_fn(|i| g.param(params, ParamId(i))),
        }
    }

    fn get(&self, id: ParamId) -> NodeId {
        self.w[id.0]
    }
}

/// Nodes of one fused candidate, kept for kink inspection.
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub pre3: NodeId,
    pub pre4: NodeId,
    pub fused: NodeId,
    pub score: NodeId,
}

/// `relu(W1 xq + b1) ∘ relu(W2 xi + b2)`; also returns the two pre-activations.
pub fn qi_node(g: &mut Graph, w: &WeightNodes, xq: NodeId, xi: NodeId) -> Result<(NodeId, [NodeId; 2])> {
    let z1 = g.affine(w.get(W1), xq, w.get(B1))?;
    let z2 = g.affine(w.get(W2), xi, w.get(B2))?;
    let r1 = g.relu(z1)?;
    let r2 = g.relu(z2)?;
    Ok((g.hadamard(r1, r2)?, [z1, z2]))
}

/// Fuse x^QI with one candidate and score it.
pub fn candidate_node(
    g: &mut Graph,
    w: &WeightNodes,
    interaction: Interaction,
    qi: NodeId,
    xa: NodeId,
) -> Result<FusionNodes> {
    let (in3, in4) = match interaction {
        Interaction::Multiplicative | Interaction::OrderReversed => (qi, xa),
        Interaction::Order => (xa, qi),
    };
    let pre3 = g.affine(w.get(W3), in3, w.get(B3))?;
    let pre4 = g.affine(w.get(W4), in4, w.get(B4))?;
    let r3 = g.relu(pre3)?;
    let r4 = g.relu(pre4)?;
    let fused = match interaction {
        Interaction::Multiplicative => g.hadamard(r3, r4)?,
        Interaction::Order | Interaction::OrderReversed => {
            let a3 = g.abs(r3)?;
            let a4 = g.abs(r4)?;
            let d = g.relu_of_diff(a3, a4)?;
            g.square(d)?
        }
    };
    let z5 = g.affine(w.get(W5), fused, w.get(B5))?;
    let score = g.sigmoid(z5)?;
    Ok(FusionNodes { pre3, pre4, fused, score })
}

fn table_of(params: &ModelParams, question: bool) -> Result<usize> {
    let t = params
        .tables
        .as_ref()
        .ok_or_else(|| Error::State("model has no embedding tables".into()))?;
    Ok(if question { t.question } else { t.answer })
}

fn text_node(g: &mut Graph, params: &ModelParams, text: &EncodedText, question: bool) -> Result<NodeId> {
    let table = params.table_id(table_of(params, question)?);
    let mut parts = vec![g.embed_bag(params, table, text.bag.entries.clone())?];
    if let Some(v) = &text.visual {
        parts.push(g.input(v.to_vec()));
    }
    g.concat(&parts)
}

/// Graph nodes built for one instance.
#[derive(Clone, Debug)]
pub struct InstanceNodes {
    pub pre_qi: [NodeId; 2],
    pub candidates: Vec<FusionNodes>,
}

pub fn instance_nodes(
    g: &mut Graph,
    params: &ModelParams,
    w: &WeightNodes,
    inst: &EncodedInstance,
) -> Result<InstanceNodes> {
    let xq = text_node(g, params, &inst.question, true)?;
    let mut img = vec![g.input(inst.image.cnn.to_vec())];
    if let Some(bag) = &inst.image.detections {
        let class = params
            .tables
            .as_ref()
            .and_then(|t| t.class)
            .ok_or_else(|| Error::State("detections encoded but the model has no class table".into()))?;
        img.push(g.embed_bag(params, params.table_id(class), bag.entries.clone())?);
    }
    let xi = g.concat(&img)?;
    let (qi, pre_qi) = qi_node(g, w, xq, xi)?;
    let candidates = inst
        .choices
        .iter()
        .map(|c| {
            let xa = text_node(g, params, &c.enc, false)?;
            candidate_node(g, w, params.config.interaction, qi, xa)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InstanceNodes { pre_qi, candidates })
}

/// Mean binary cross-entropy over every candidate of every instance.
pub fn batch_loss(g: &mut Graph, params: &ModelParams, batch: &[EncodedInstance]) -> Result<(NodeId, Vec<InstanceNodes>)> {
    let w = WeightNodes::new(g, params);
    let mut terms = Vec::new();
    let mut all = Vec::with_capacity(batch.len());
    for inst in batch {
        let nodes = instance_nodes(g, params, &w, inst)?;
        for (i, c) in nodes.candidates.iter().enumerate() {
            terms.push(g.bce(c.score, inst.label(i))?);
        }
        all.push(nodes);
    }
    if terms.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    Ok((g.mean(&terms)?, all))
}

/// Scores of every candidate of every instance.
pub fn score_batch(params: &ModelParams, batch: &[EncodedInstance]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let w = WeightNodes::new(&mut g, params);
    let nodes = batch
        .iter()
        .map(|inst| instance_nodes(&mut g, params, &w, inst))
        .collect::<Result<Vec<_>>>()?;
    g.forward(params)?;
    nodes
        .iter()
        .map(|n| n.candidates.iter().map(|c| g.scalar(c.score)).collect())
        .collect()
}

pub fn predict(params: &ModelParams, inst: &EncodedInstance) -> Result<usize> {
    let scores = score_batch(params, std::slice::from_ref(inst))?;
    Ok(argmax(&scores[0]))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn eval_vec(params: &ModelParams, build: impl FnOnce(&mut Graph, &WeightNodes) -> Result<NodeId>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = WeightNodes::new(&mut g, params);
    let out = build(&mut g, &w)?;
    g.forward(params)?;
    Ok(g.value(params, out).to_vec())
}

/// x^QI for raw input vectors.
pub fn fuse_qi(xq: &[f64], xi: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    eval_vec(params, |g, w| {
        let (q, i) = (g.input(xq.to_vec()), g.input(xi.to_vec()));
        Ok(qi_node(g, w, q, i)?.0)
    })
}

fn fuse_with(xqi: &[f64], xa: &[f64], params: &ModelParams, interaction: Interaction) -> Result<Vec<f64>> {
    eval_vec(params, |g, w| {
        let (qi, a) = (g.input(xqi.to_vec()), g.input(xa.to_vec()));
        Ok(candidate_node(g, w, interaction, qi, a)?.fused)
    })
}

/// `relu(W3 xqi + b3) ∘ relu(W4 xa + b4)`.
pub fn fuse_qia_mult(xqi: &[f64], xa: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    fuse_with(xqi, xa, params, Interaction::Multiplicative)
}

/// `max(0, |relu(W3 xa + b3)| - |relu(W4 xqi + b4)|)^2`, or with the two
/// operands exchanged when `reversed`.
pub fn fuse_qia_order(xqi: &[f64], xa: &[f64], params: &ModelParams, reversed: bool) -> Result<Vec<f64>> {
    let mode = if reversed { Interaction::OrderReversed } else { Interaction::Order };
    fuse_with(xqi, xa, params, mode)
}

/// Order fusion on branch values directly: `max(0, |a| - |b|)^2`.
pub fn order_fusion(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x.abs() - y.abs()).max(0.0);
            d * d
        })
        .collect()
}

/// `sigmoid(W5 x + b5)`.
pub fn score(x: &[f64], params: &ModelParams) -> Result<f64> {
    let v = eval_vec(params, |g, w| {
        let x = g.input(x.to_vec());
        let z = g.affine(w.get(W5), x, w.get(B5))?;
        g.sigmoid(z)
    })?;
    Ok(v[0])
}

/// Shuffle the question and/or image channel across the batch, one uniform
/// permutation per masked channel.
pub fn mask_batch<R: Rng + ?Sized>(batch: &mut [EncodedInstance], mask: MaskConfig, rng: &mut R) {
    if mask.mask_question {
        let mut perm: Vec<usize> = (0..batch.len()).collect();
        perm.shuffle(rng);
        let moved: Vec<EncodedText> = perm.iter().map(|&j| batch[j].question.clone()).collect();
        for (inst, q) in batch.iter_mut().zip(moved) {
            inst.question = q;
        }
    }
    if mask.mask_image {
        let mut perm: Vec<usize> = (0..batch.len()).collect();
        perm.shuffle(rng);
        let moved: Vec<_> = perm.iter().map(|&j| batch[j].image.clone()).collect();
        for (inst, i) in batch.iter_mut().zip(moved) {
            inst.image = i;
        }
    }
}

#[cfg(test)]
mod tests;
