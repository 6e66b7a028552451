//! Shared fixtures for the integration suites.

#![allow(dead_code)]

use ldf_core::autodiff::gradcheck::{check_gradients, rel_err};
use ldf_core::autodiff::{Rng, Tape, Tensor, Var};
use ldf_core::episodes::{make_synthetic_corpus, sample_episode, EpisodeShape, SyntheticSpec};
use ldf_core::losses::{lcl_loss, scl_loss, ContrastiveBatch};
use ldf_core::model::{
    base_attention, gated_attention, instance_representation, query_representation, score_query,
    Model, ModelConfig,
};
use ldf_core::trainer::{episode_loss, Ablation, TrainConfig};
use ldf_core::Result;

pub const GRAD_STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const GRAD_SEEDS: u64 = 10;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable operation under test: input tensors plus a closure
/// reducing its output to a scalar.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn positive(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let t = Tensor::randn(shape.clone(), 1.0, rng);
    Tensor::new(shape, t.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap()
}

/// Away from zero by at least 0.1, so kinks stay outside the stencil.
fn off_kink(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let t = Tensor::randn(shape.clone(), 1.0, rng);
    let d = t
        .data()
        .iter()
        .map(|x| if x.abs() < 0.1 { x.signum() * 0.1 + x } else { *x })
        .collect();
    Tensor::new(shape, d).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = t.value(out).shape().to_vec();
    if shape.is_empty() {
        return Ok(out);
    }
    let r = t.constant(Tensor::randn(shape, 1.0, &mut Rng::new(seed ^ 0xabc)));
    let m = t.mul(out, r)?;
    Ok(t.sum(m))
}

macro_rules! case {
    ($name:expr, $inputs:expr, $seed:expr, |$t:ident, $v:ident| $body:expr) => {{
        let seed = $seed;
        OpCase {
            name: $name,
            inputs: $inputs,
            build: Box::new(move |$t: &mut Tape, $v: &[Var]| {
                let out = $body?;
                project($t, out, seed)
            }),
        }
    }};
}

/// Every tape operation and model stage, instantiated for one seed.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let n = |shape: Vec<usize>, r: &mut Rng| Tensor::randn(shape, 1.0, r);
    let mask = [true, false, true, true, true];
    let mut cases = vec![
        case!("matmul", vec![n(vec![3, 4], r), n(vec![4, 2], r)], seed, |t, v| t.matmul(v[0], v[1])),
        case!("conv1d_same", vec![n(vec![5, 3], r), n(vec![3, 3, 4], r), n(vec![4], r)], seed, |t, v| t
            .conv1d_same(v[0], v[1], v[2])),
        case!("softmax", vec![n(vec![5], r)], seed, |t, v| t.softmax(v[0], None)),
        case!("softmax_masked", vec![n(vec![5], r)], seed, |t, v| t.softmax(v[0], Some(&mask))),
        case!("cosine", vec![n(vec![4], r), n(vec![4], r)], seed, |t, v| t.cosine(v[0], v[1])),
        case!("dot", vec![n(vec![4], r), n(vec![4], r)], seed, |t, v| t.dot(v[0], v[1])),
        case!("add", vec![n(vec![2, 3], r), n(vec![2, 3], r)], seed, |t, v| t.add(v[0], v[1])),
        case!("sub", vec![n(vec![2, 3], r), n(vec![2, 3], r)], seed, |t, v| t.sub(v[0], v[1])),
        case!("mul", vec![n(vec![2, 3], r), n(vec![2, 3], r)], seed, |t, v| t.mul(v[0], v[1])),
        case!("mul_scalar", vec![n(vec![4], r), n(vec![1], r)], seed, |t, v| t.mul_scalar(v[0], v[1])),
        case!("add_scalar", vec![n(vec![4], r), n(vec![1], r)], seed, |t, v| t.add_scalar(v[0], v[1])),
        case!("scale", vec![n(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.scale(v[0], -1.7))),
        case!("neg", vec![n(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.neg(v[0]))),
        case!("tanh", vec![n(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.tanh(v[0]))),
        case!("relu", vec![off_kink(vec![6], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.relu(v[0]))),
        case!("exp", vec![n(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.exp(v[0]))),
        case!("log", vec![positive(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.log(v[0]))),
        case!("clamp_min", vec![off_kink(vec![6], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.clamp_min(v[0], 0.0))),
        case!("sum", vec![n(vec![2, 3], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.sum(v[0]))),
        case!("mean", vec![n(vec![2, 3], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.mean(v[0]))),
        case!("mean_rows", vec![n(vec![3, 4], r)], seed, |t, v| t.mean_rows(v[0])),
        case!("concat_rows", vec![n(vec![2, 3], r), n(vec![1, 3], r)], seed, |t, v| t.concat(&[v[0], v[1]], 0)),
        case!("concat_cols", vec![n(vec![2, 3], r), n(vec![2, 1], r)], seed, |t, v| t.concat(&[v[0], v[1]], 1)),
        case!("stack", vec![n(vec![3], r), n(vec![3], r)], seed, |t, v| t.stack(&[v[0], v[1], v[0]])),
        case!("gather_rows", vec![n(vec![4, 2], r)], seed, |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        case!("reshape", vec![n(vec![2, 3], r)], seed, |t, v| t.reshape(v[0], vec![3, 2])),
        case!("element", vec![n(vec![5], r)], seed, |t, v| t.element(v[0], 3)),
        case!("row", vec![n(vec![3, 2], r)], seed, |t, v| t.row(v[0], 1)),
        case!("normalize", vec![n(vec![4], r)], seed, |t, v| Ok::<_, ldf_core::Error>(t.normalize(v[0]))),
        case!("euclidean_distance", vec![n(vec![4], r), n(vec![4], r)], seed, |t, v| t
            .euclidean_distance(v[0], v[1])),
        case!("base_attention", vec![n(vec![5, 3], r), n(vec![3, 3], r), n(vec![3], r)], seed, |t, v| {
            base_attention(t, v[0], &mask, v[1], v[2])
        }),
        case!(
            "gated_attention",
            vec![n(vec![5], r), n(vec![5], r), n(vec![1, 2], r), n(vec![1], r)],
            seed,
            |t, v| gated_attention(t, v[0], v[1], &mask, v[2], v[3])
        ),
        case!("instance_representation", vec![n(vec![4, 3], r), n(vec![4], r)], seed, |t, v| {
            instance_representation(t, v[0], v[1])
        }),
        case!("query_representation", vec![n(vec![5, 3], r), n(vec![3], r)], seed, |t, v| {
            query_representation(t, v[0], &mask, v[1])
        }),
        case!(
            "score_query",
            vec![n(vec![3], r), n(vec![3], r), n(vec![3], r), n(vec![3], r)],
            seed,
            |t, v| score_query(t, &[v[0], v[1]], &[v[2], v[3]])
        ),
    ];
    let gold = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    cases.push(OpCase {
        name: "mse_loss",
        inputs: vec![n(vec![2, 3], r)],
        build: Box::new(move |t, v| ldf_core::losses::mse_loss(t, v[0], &gold)),
    });
    let weights = vec![
        vec![1.0, 0.9, 0.1],
        vec![0.9, 1.0, 0.3],
        vec![0.1, 0.3, 1.0],
    ];
    for strict in [false, true] {
        let w = weights.clone();
        cases.push(OpCase {
            name: if strict { "lcl_loss_strict" } else { "lcl_loss" },
            inputs: (0..6).map(|_| n(vec![4], r)).collect(),
            build: Box::new(move |t, v| {
                let batch = ContrastiveBatch {
                    reps: v.to_vec(),
                    labels: vec![0, 0, 1, 1, 2, 2],
                    weights: w.clone(),
                    tau: 0.5,
                    strict_negatives: strict,
                };
                lcl_loss(t, &batch)
            }),
        });
    }
    cases.push(OpCase {
        name: "scl_loss",
        inputs: (0..6).map(|_| n(vec![4], r)).collect(),
        build: Box::new(|t, v| scl_loss(t, &ContrastiveBatch::unweighted(v.to_vec(), vec![0, 1, 0, 1, 2, 2], 0.5))),
    });
    cases
}

/// Largest relative error of one case.
pub fn check_case(case: &OpCase) -> f64 {
    check_gradients(&case.inputs, GRAD_STEP, |t, v| (case.build)(t, v))
        .unwrap_or_else(|e| panic!("{}: {e}", case.name))
        .max_rel_err
}

/// Worst error per operation over `seeds` seeds, in case order.
pub fn op_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        for (i, case) in op_cases(seed).iter().enumerate() {
            let e = check_case(case);
            if seed == 0 {
                worst.push((case.name, e));
            } else {
                worst[i].1 = worst[i].1.max(e);
            }
        }
    }
    worst
}

/// Small noisy corpus shared by the end-to-end checks.
pub fn tiny_world(seed: u64) -> (ldf_core::episodes::Corpus, ldf_core::embeddings::EmbeddingTable) {
    let spec = SyntheticSpec {
        n_classes: 5,
        instances_per_class: 6,
        dim: 6,
        min_len: 3,
        max_len: 6,
        noise_vocab_size: 4,
        noise_fraction: 0.3,
        similarity_groups: 1,
        ..SyntheticSpec::default()
    };
    make_synthetic_corpus(&spec, &mut Rng::new(seed)).unwrap()
}

/// Worst relative error of the full LDF objective with respect to every
/// model parameter (every element of the small tensors, a spread of the
/// larger ones).
pub fn end_to_end_rel_err(seed: u64) -> f64 {
    let (corpus, table) = tiny_world(seed);
    let config = TrainConfig {
        n_way: 3,
        k_shot: 2,
        queries_per_class: 2,
        threshold: Some(0.3),
        tau: 0.5,
        ..TrainConfig::default()
    }
    .with_ablation(Ablation::Ldf);
    let model_config = ModelConfig {
        dim: table.dim(),
        hidden: 4,
        use_las: true,
        ..ModelConfig::default()
    };
    let mut model = Model::new(model_config, &table, &mut Rng::new(seed + 100)).unwrap();
    let shape = EpisodeShape {
        n_way: 3,
        k_shot: 2,
        queries_per_class: 2,
    };
    let ep = sample_episode(&corpus, shape, &mut Rng::new(seed + 200)).unwrap();
    let loss = |m: &Model| {
        let l = episode_loss(m, &ep, &corpus, &table, &config).unwrap();
        l.tape.scalar(l.loss)
    };
    let mut step = episode_loss(&model, &ep, &corpus, &table, &config).unwrap();
    step.tape.backward(step.loss).unwrap();
    model.accumulate_grads(&step.tape, &step.bound, &step.forward).unwrap();

    let mut worst: f64 = 0.0;
    let n_params = model.params.named().len();
    for p in 0..n_params {
        let len = model.params.named()[p].1.len();
        let stride = (len / 12).max(1);
        for i in (0..len).step_by(stride) {
            let analytic = model.params.named()[p].1.grad().unwrap()[i];
            let mut plus = model.clone();
            plus.params.tensors_mut()[p].data_mut()[i] += GRAD_STEP;
            let mut minus = model.clone();
            minus.params.tensors_mut()[p].data_mut()[i] -= GRAD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * GRAD_STEP);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}
