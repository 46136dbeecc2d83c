use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{QuestionType, ZsFlags};
use crate::embeddings::{Bag, EmbeddingTable, KeyMode, Scope, Vocab};
use crate::features::{Candidate, EncodedImage, FeatureConfig};

fn cfg(d: usize, interaction: Interaction) -> ModelConfig {
    ModelConfig { q_dim: d, i_dim: d, a_dim: d, hidden: d, hidden2: d, interaction }
}

fn identity(d: usize) -> Vec<f64> {
    (0..d * d).map(|k| if k % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
}

fn set(p: &mut ModelParams, id: ParamId, v: Vec<f64>) {
    p.dense_mut(id).value.data_mut().copy_from_slice(&v);
}

fn identity_params(d: usize, interaction: Interaction) -> ModelParams {
    let mut p = ModelParams::init(cfg(d, interaction), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for w in [W1, W2, W3, W4] {
        set(&mut p, w, identity(d));
    }
    p
}

fn random_params(seed: u64, q: usize, i: usize, a: usize, h: usize, h2: usize, mode: Interaction) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = ModelConfig { q_dim: q, i_dim: i, a_dim: a, hidden: h, hidden2: h2, interaction: mode };
    let mut p = ModelParams::init(c, None, &mut rng).unwrap();
    for b in [B1, B2, B3, B4, B5] {
        let n = p.param(b).value.len();
        set(&mut p, b, (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect());
    }
    p
}

fn naive_affine_relu(w: &Parameter, b: &Parameter, x: &[f64]) -> Vec<f64> {
    let (r, c) = w.value.shape();
    (0..r)
        .map(|i| {
            let mut s = 0.0;
            for j in 0..c {
                s += w.value.data()[i * c + j] * x[j];
            }
            (s + b.value.data()[i]).max(0.0)
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn fuse_qi_examples() {
    let p = identity_params(2, Interaction::Multiplicative);
    assert_eq!(fuse_qi(&[1.0, -1.0], &[2.0, 3.0], &p).unwrap(), vec![2.0, 0.0]);
    let p = random_params(1, 3, 4, 2, 5, 5, Interaction::Multiplicative);
    let mut p0 = p.clone();
    set(&mut p0, B2, vec![0.0; 5]);
    assert_eq!(fuse_qi(&[0.3, -0.2, 0.9], &[0.0; 4], &p0).unwrap(), vec![0.0; 5]);
    assert!(fuse_qi(&[1.0; 2], &[0.0; 4], &p).is_err());
}

#[test]
fn fusions_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..10 {
        for mode in [Interaction::Multiplicative, Interaction::Order, Interaction::OrderReversed] {
            let p = random_params(seed, 3, 4, 2, 5, 6, mode);
            let d = p.dense();
            let (xq, xi, xa) = (rand_vec(&mut rng, 3), rand_vec(&mut rng, 4), rand_vec(&mut rng, 2));
            let qi: Vec<f64> = naive_affine_relu(&d[0], &d[1], &xq)
                .iter()
                .zip(naive_affine_relu(&d[2], &d[3], &xi))
                .map(|(a, b)| a * b)
                .collect();
            assert_eq!(fuse_qi(&xq, &xi, &p).unwrap(), qi);
            let fused: Vec<f64> = match mode {
                Interaction::Multiplicative => naive_affine_relu(&d[4], &d[5], &qi)
                    .iter()
                    .zip(naive_affine_relu(&d[6], &d[7], &xa))
                    .map(|(a, b)| a * b)
                    .collect(),
                Interaction::Order => {
                    let a = naive_affine_relu(&d[4], &d[5], &xa);
                    let b = naive_affine_relu(&d[6], &d[7], &qi);
                    a.iter().zip(&b).map(|(x, y)| (x - y).max(0.0).powi(2)).collect()
                }
                Interaction::OrderReversed => {
                    let a = naive_affine_relu(&d[4], &d[5], &qi);
                    let b = naive_affine_relu(&d[6], &d[7], &xa);
                    a.iter().zip(&b).map(|(x, y)| (x - y).max(0.0).powi(2)).collect()
                }
            };
            let got = match mode {
                Interaction::Multiplicative => fuse_qia_mult(&qi, &xa, &p).unwrap(),
                Interaction::Order => fuse_qia_order(&qi, &xa, &p, false).unwrap(),
                Interaction::OrderReversed => fuse_qia_order(&qi, &xa, &p, true).unwrap(),
            };
            for (g, f) in got.iter().zip(&fused) {
                assert!((g - f).abs() <= 1e-15 * (1.0 + f.abs()));
            }
            let z: f64 = d[8].value.data().iter().zip(&fused).map(|(w, x)| w * x).sum::<f64>() + d[9].value.data()[0];
            let s = 1.0 / (1.0 + (-z).exp());
            assert!((score(&fused, &p).unwrap() - s).abs() < 1e-15);
        }
    }
}

#[test]
fn mult_fusion_examples() {
    let p = identity_params(3, Interaction::Multiplicative);
    assert_eq!(fuse_qia_mult(&[1.0, 2.0, 3.0], &[0.0; 3], &p).unwrap(), vec![0.0; 3]);
    assert_eq!(fuse_qia_mult(&[1.0, 2.0, 3.0], &[2.0, 0.5, 1.0], &p).unwrap(), vec![2.0, 1.0, 3.0]);
}

#[test]
fn order_fusion_examples() {
    assert_eq!(order_fusion(&[2.0, 1.0], &[1.0, 3.0]), vec![1.0, 0.0]);
    assert_eq!(order_fusion(&[1.0, 3.0], &[2.0, 1.0]), vec![0.0, 4.0]);
    // through the weights: answer branch a = (2, 1), question/image branch b = (1, 3)
    let p = identity_params(2, Interaction::Order);
    assert_eq!(fuse_qia_order(&[1.0, 3.0], &[2.0, 1.0], &p, false).unwrap(), vec![1.0, 0.0]);
    let p = identity_params(2, Interaction::OrderReversed);
    assert_eq!(fuse_qia_order(&[1.0, 3.0], &[2.0, 1.0], &p, true).unwrap(), vec![0.0, 4.0]);
}

#[test]
fn score_examples() {
    let mut p = identity_params(2, Interaction::Multiplicative);
    set(&mut p, W5, vec![0.0, 0.0]);
    assert_eq!(score(&[3.0, -1.0], &p).unwrap(), 0.5);
    set(&mut p, B5, vec![10.0]);
    assert!(score(&[3.0, -1.0], &p).unwrap() > 0.9999);
    assert!(score(&[3.0], &p).is_err());
}

#[test]
fn argmax_rules() {
    assert_eq!(argmax(&[0.1, 0.9, 0.2, 0.3]), 1);
    assert_eq!(argmax(&[0.5; 4]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7, 0.2]), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let s: Vec<f64> = (0..4).map(|_| (rng.gen_range(0..5) as f64) / 4.0).collect();
        let mut best = 0;
        for i in 0..4 {
            if s[i] > s[best] {
                best = i;
            }
        }
        assert_eq!(argmax(&s), best);
    }
}

fn tables(d: usize, rng: &mut ChaCha8Rng) -> WordTables {
    let t = |name: &str, rng: &mut ChaCha8Rng| {
        let v = Vocab::new((0..10).map(|i| format!("{name}{i}")));
        let w = Tensor::from_vec(10, d, rand_vec(rng, 10 * d));
        EmbeddingTable::new(name, v, w, KeyMode::Surface, Scope::Question).unwrap()
    };
    WordTables { tables: vec![t("q", rng), t("a", rng)], question: 0, answer: 1, class: None }
}

fn instance(rng: &mut ChaCha8Rng, d: usize, id: usize) -> EncodedInstance {
    let text = |rng: &mut ChaCha8Rng| EncodedText {
        bag: Bag { entries: vec![(rng.gen_range(0..10), 0.5), (rng.gen_range(0..10), 0.5)] },
        visual: None,
    };
    EncodedInstance {
        id: format!("x{id}"),
        question_type: QuestionType::What,
        question: text(rng),
        image: EncodedImage { cnn: rand_vec(rng, d).into(), detections: None },
        choices: (0..4).map(|c| Candidate { text: format!("c{c}"), enc: text(rng) }).collect(),
        correct_index: rng.gen_range(0..4),
        flags: ZsFlags::default(),
    }
}

fn full_model(seed: u64, d: usize, mode: Interaction) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = tables(d, &mut rng);
    ModelParams::init(cfg(d, mode), Some(t), &mut rng).unwrap()
}

#[test]
fn candidate_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = full_model(2, 6, Interaction::Multiplicative);
    for k in 0..20 {
        let inst = instance(&mut rng, 6, k);
        let base = score_batch(&p, std::slice::from_ref(&inst)).unwrap().remove(0);
        let perm = [2, 0, 3, 1];
        let mut shuffled = inst.clone();
        shuffled.choices = perm.iter().map(|&j| inst.choices[j].clone()).collect();
        let s = score_batch(&p, &[shuffled]).unwrap().remove(0);
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(s[i], base[j]);
        }
        // scores do not depend on evaluation order or batching
        let batch = vec![instance(&mut rng, 6, 99), inst.clone()];
        assert_eq!(score_batch(&p, &batch).unwrap()[1], base);
        assert_eq!(predict(&p, &inst).unwrap(), argmax(&base));
    }
}

#[test]
fn hadamard_symmetry() {
    let p = random_params(4, 5, 5, 3, 4, 4, Interaction::Multiplicative);
    let mut swapped = p.clone();
    let d = p.dense().to_vec();
    set(&mut swapped, W1, d[2].value.data().to_vec());
    set(&mut swapped, B1, d[3].value.data().to_vec());
    set(&mut swapped, W2, d[0].value.data().to_vec());
    set(&mut swapped, B2, d[1].value.data().to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (xq, xi) = (rand_vec(&mut rng, 5), rand_vec(&mut rng, 5));
    assert_eq!(fuse_qi(&xq, &xi, &p).unwrap(), fuse_qi(&xi, &xq, &swapped).unwrap());
}

#[test]
fn order_region_kills_output_and_gradient() {
    let d = 4;
    let mut p = identity_params(d, Interaction::Order);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    set(&mut p, W5, rand_vec(&mut rng, d));
    for _ in 0..200 {
        let qi: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
        let xa: Vec<f64> = qi.iter().map(|v| v * rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let w = WeightNodes::new(&mut g, &p);
        let (qn, an) = (g.input(qi.clone()), g.input(xa.clone()));
        let nodes = candidate_node(&mut g, &w, Interaction::Order, qn, an).unwrap();
        g.forward(&p).unwrap();
        assert!(g.value(&p, nodes.fused).iter().all(|&v| v == 0.0));
        g.backward(&mut p, nodes.score, 1.0).unwrap();
        for id in [W3, B3, W4, B4] {
            assert!(p.param(id).grad.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn mask_batch_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batch: Vec<EncodedInstance> = (0..64).map(|k| instance(&mut rng, 3, k)).collect();

    let mut one = batch[..1].to_vec();
    mask_batch(&mut one, MaskConfig { mask_question: true, mask_image: true }, &mut rng);
    assert_eq!(one, batch[..1]);

    let mut same = batch.clone();
    mask_batch(&mut same, MaskConfig::NONE, &mut rng);
    assert_eq!(same, batch);

    let mut masked = batch.clone();
    mask_batch(&mut masked, MaskConfig { mask_question: true, mask_image: false }, &mut rng);
    let key = |t: &EncodedText| format!("{:?}", t.bag.entries);
    let mut before: Vec<String> = batch.iter().map(|i| key(&i.question)).collect();
    let mut after: Vec<String> = masked.iter().map(|i| key(&i.question)).collect();
    assert_ne!(before, after);
    before.sort();
    after.sort();
    assert_eq!(before, after);
    for (a, b) in batch.iter().zip(&masked) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.choices, b.choices);
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    for mode in [Interaction::Multiplicative, Interaction::Order, Interaction::OrderReversed] {
        for seed in 0..5 {
            let opts = GradCheckOptions { dims: 8, interaction: mode, seed, ..Default::default() };
            let r = model_grad_check(&opts).unwrap();
            assert!(r.max_relative_error < 1e-4, "{mode} seed {seed}: {r:?}");
        }
    }
    assert!(model_grad_check(&GradCheckOptions { dims: 17, ..Default::default() }).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let p = full_model(6, 5, Interaction::Order);
    let ck = Checkpoint { params: p, features: FeatureConfig::default(), mask: MaskConfig::NONE };
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.params.config(), ck.params.config());
    for (a, b) in back.params.dense().iter().zip(ck.params.dense()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ck");
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Checkpoint::load(&path).unwrap(), back);

    assert!(Checkpoint::from_bytes(b"NOTACKPTxxxxxxxxxxxx").is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn parse_modes() {
    assert_eq!("order-reversed".parse::<Interaction>().unwrap(), Interaction::OrderReversed);
    assert!("attention".parse::<Interaction>().is_err());
    assert_eq!("both".parse::<MaskConfig>().unwrap(), MaskConfig { mask_question: true, mask_image: true });
    assert!("sideways".parse::<MaskConfig>().is_err());
}
