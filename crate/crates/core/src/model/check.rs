use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, Interaction, ModelConfig, ModelParams, B1, B2, B3, B4, B5};
use crate::autodiff::{grad_check, GradCheckReport, Graph, ParamStore, Tensor};
use crate::dataset::{QuestionType, ZsFlags};
use crate::embeddings::{Bag, EmbeddingTable, KeyMode, Scope, Vocab};
use crate::error::{Error, Result};
use crate::features::{Candidate, EncodedImage, EncodedInstance, EncodedText, WordTables};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Every model dimension (inputs, embeddings, hidden layers).
    pub dims: usize,
    pub interaction: Interaction,
    pub seed: u64,
    pub eps: f64,
    /// Minimum distance of every ReLU input and order difference from its
    /// kink; draws closer than this are rejected and redrawn.
    pub margin: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            dims: 8,
            interaction: Interaction::Multiplicative,
            seed: 0,
            eps: 1e-4,
            margin: 1e-3,
        }
    }
}

const VOCAB: usize = 6;
const MAX_ATTEMPTS: usize = 200;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn table(name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingTable> {
    let vocab = Vocab::new((0..VOCAB).map(|i| format!("{name}{i}")));
    EmbeddingTable::new(name, vocab, Tensor::from_vec(VOCAB, d, uniform(rng, VOCAB * d, 1.0)), KeyMode::Surface, Scope::Question)
}

fn bag(rng: &mut ChaCha8Rng) -> Bag {
    let n = rng.gen_range(1..=3);
    Bag {
        entries: (0..n).map(|_| (rng.gen_range(0..VOCAB), 1.0 / n as f64)).collect(),
    }
}

fn draw(opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Result<(ModelParams, Vec<EncodedInstance>)> {
    let d = opts.dims;
    let cfg = ModelConfig { q_dim: d, i_dim: d, a_dim: d, hidden: d, hidden2: d, interaction: opts.interaction };
    let tables = WordTables {
        tables: vec![table("q", d, rng)?, table("a", d, rng)?],
        question: 0,
        answer: 1,
        class: None,
    };
    let mut params = ModelParams::init(cfg, Some(tables), rng)?;
    for b in [B1, B2, B3, B4, B5] {
        let n = params.param(b).value.len();
        params.dense_mut(b).value.data_mut().copy_from_slice(&uniform(rng, n, 0.5));
    }
    let batch = (0..2)
        .map(|k| EncodedInstance {
            id: format!("g{k}"),
            question_type: QuestionType::What,
            question: EncodedText { bag: bag(rng), visual: None },
            image: EncodedImage { cnn: uniform(rng, d, 1.0).into(), detections: None },
            choices: (0..4)
                .map(|c| Candidate { text: format!("c{c}"), enc: EncodedText { bag: bag(rng), visual: None } })
                .collect(),
            correct_index: rng.gen_range(0..4),
            flags: ZsFlags::default(),
        })
        .collect();
    Ok((params, batch))
}

/// Finite-difference check of the full training loss (embeddings, question-image
/// fusion, candidate fusion, score and mean BCE) on a random draw whose
/// inputs sit at least `margin` away from every non-differentiable point.
pub fn model_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.dims == 0 || opts.dims > 16 {
        return Err(Error::Config(format!("gradcheck dims must be in 1..=16, got {}", opts.dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..MAX_ATTEMPTS {
        let (mut params, batch) = draw(opts, &mut rng)?;
        let mut g = Graph::new();
        let (loss, nodes) = batch_loss(&mut g, &params, &batch)?;
        g.forward(&params)?;
        let far = |v: &[f64]| v.iter().all(|x| x.abs() > opts.margin);
        let mut ok = true;
        for n in &nodes {
            ok &= n.pre_qi.iter().all(|&z| far(g.value(&params, z)));
            for c in &n.candidates {
                let (p3, p4) = (g.value(&params, c.pre3), g.value(&params, c.pre4));
                ok &= far(p3) && far(p4);
                if opts.interaction != Interaction::Multiplicative {
                    ok &= p3
                        .iter()
                        .zip(p4)
                        .all(|(a, b)| *a <= 0.0 || *b <= 0.0 || (a - b).abs() > opts.margin);
                }
            }
        }
        if ok {
            return grad_check(&mut g, &mut params, loss, opts.eps);
        }
    }
    Err(Error::Numerical(format!(
        "no draw kept every kink at distance > {} after {MAX_ATTEMPTS} attempts",
        opts.margin
    )))
}
