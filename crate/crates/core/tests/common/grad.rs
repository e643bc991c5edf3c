//! Central-difference gradient checks in f64.

use std::sync::Arc;

use mtxl::model::{joint_loss, Dropout, Model, ModelConfig, StreamMemory};
use mtxl::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const STEP: f64 = 1e-5;

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Checks `f` (inputs → output tensor) through `loss = Σ out ⊙ W` for a
/// fixed random `W`. Returns the worst relative error over inputs.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>, grads: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| {
                if grads {
                    g.param(Arc::new(x.clone()))
                } else {
                    g.constant(x.clone())
                }
            })
            .collect();
        let out = f(&mut g, &vars);
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(g.value(out).shape(), 1.0));
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        let value = g.value(loss).data()[0];
        let gs = if grads {
            g.backward(loss).unwrap();
            vars.iter()
                .map(|v| g.grad(*v).map_or_else(|| vec![0.0; g.value(*v).len()], |t| t.data().to_vec()))
                .collect()
        } else {
            Vec::new()
        };
        (value, gs)
    };
    let shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let weights = randn(&shape, &mut rng);
    let (_, analytic) = eval(inputs, Some(&weights), true);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[e] += STEP;
            let up = eval(&xs, Some(&weights), false).0;
            xs[i].data_mut()[e] -= 2.0 * STEP;
            let down = eval(&xs, Some(&weights), false).0;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(a, &numeric));
    }
    worst
}

pub struct GroupCheck {
    pub name: String,
    pub rel_error: f64,
    pub probes: usize,
}

/// One segment of model inputs with next-position targets.
pub struct Batch {
    pub inputs: [Vec<u32>; 4],
    pub targets: [Vec<u32>; 4],
    pub valid: Vec<bool>,
}

impl Batch {
    pub fn random(len: usize, vocab: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let draw = |rng: &mut ChaCha8Rng| -> [Vec<u32>; 4] {
            std::array::from_fn(|s| (0..len).map(|_| rng.random_range(0..vocab[s] as u32)).collect())
        };
        let inputs = draw(rng);
        let targets = draw(rng);
        let mut valid = vec![true; len];
        valid[len - 1] = false;
        Self { inputs, targets, valid }
    }
}

pub fn model_loss(model: &Model<f64>, batch: &Batch, memory: &StreamMemory<f64>) -> f64 {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let inputs = std::array::from_fn(|s| batch.inputs[s].as_slice());
    let out = model.forward(&mut g, &bound, inputs, memory, &mut Dropout::Off).unwrap();
    let targets = std::array::from_fn(|s| batch.targets[s].as_slice());
    let loss = joint_loss(&mut g, &out.logits, targets, &batch.valid).unwrap();
    g.value(loss.total).data()[0]
}

/// A model with every parameter, layer-norm gains and biases included,
/// drawn at random so no gradient is trivially zero.
pub fn random_model(config: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(ModelConfig { init_std: 0.2, ..config }, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for v in model.params_mut().values_mut() {
        let t = Arc::make_mut(v);
        for x in t.data_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *x += 0.1 * n;
        }
    }
    model
}

/// Gradient of the joint loss for every parameter tensor against central
/// differences along one random direction and along the three coordinates
/// of largest analytic gradient. Memory from a previous segment is live.
pub fn model_gradcheck(model: &Model<f64>, seed: u64) -> Vec<GroupCheck> {
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.segment_len;
    let first = Batch::random(len, cfg.vocab_sizes, &mut rng);
    let batch = Batch::random(len, cfg.vocab_sizes, &mut rng);

    let memory = {
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let inputs = std::array::from_fn(|s| first.inputs[s].as_slice());
        model
            .forward(&mut g, &bound, inputs, &model.empty_memory(), &mut Dropout::Off)
            .unwrap()
            .memory
    };
    assert!(!memory.is_empty());

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let inputs = std::array::from_fn(|s| batch.inputs[s].as_slice());
    let out = model.forward(&mut g, &bound, inputs, &memory, &mut Dropout::Off).unwrap();
    let targets = std::array::from_fn(|s| batch.targets[s].as_slice());
    let loss = joint_loss(&mut g, &out.logits, targets, &batch.valid).unwrap();
    g.backward(loss.total).unwrap();

    let mut report = Vec::new();
    for (i, name) in model.params().names().iter().enumerate() {
        let value = &model.params().values()[i];
        let grad = g
            .grad(bound[i])
            .map_or_else(|| vec![0.0; value.len()], |t| t.data().to_vec());

        let mut directions: Vec<Vec<f64>> = Vec::new();
        let mut d: Vec<f64> = (0..value.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= norm);
        directions.push(d);
        let mut order: Vec<usize> = (0..value.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        for &e in order.iter().take(3) {
            let mut d = vec![0.0; value.len()];
            d[e] = 1.0;
            directions.push(d);
        }

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for d in &directions {
            analytic.push(grad.iter().zip(d).map(|(a, b)| a * b).sum::<f64>());
            let shifted = |sign: f64| {
                let mut m = model.clone();
                let t = Arc::make_mut(&mut m.params_mut().values_mut()[i]);
                t.data_mut().iter_mut().zip(d).for_each(|(x, dx)| *x += sign * STEP * dx);
                model_loss(&m, &batch, &memory)
            };
            numeric.push((shifted(1.0) - shifted(-1.0)) / (2.0 * STEP));
        }
        report.push(GroupCheck {
            name: name.clone(),
            rel_error: relative_error(&analytic, &numeric),
            probes: directions.len(),
        });
    }
    report
}
