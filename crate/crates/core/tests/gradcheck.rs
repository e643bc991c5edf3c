mod common;

use common::grad::{check_op, model_gradcheck, randn, random_model};
use mtxl::model::{causal_mask, FfnResidual, ModelConfig};
use mtxl::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| randn(s, &mut rng)).collect()
}

fn assert_op(name: &str, xs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let err = check_op(xs, 11, f);
    assert!(err < OP_TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul_variants() {
    assert_op("matmul", &inputs(&[&[3, 4], &[4, 5]], 1), |g, v| g.matmul(v[0], v[1]).unwrap());
    assert_op("matmul_nt", &inputs(&[&[3, 4], &[6, 4]], 2), |g, v| g.matmul_nt(v[0], v[1]).unwrap());
    // Single-row and wide products take a different kernel path.
    assert_op("matvec", &inputs(&[&[1, 7], &[7, 40]], 3), |g, v| g.matmul(v[0], v[1]).unwrap());
    assert_op("tall", &inputs(&[&[9, 3], &[3, 2]], 4), |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn elementwise() {
    let xs = inputs(&[&[3, 4], &[3, 4]], 5);
    assert_op("add", &xs, |g, v| g.add(v[0], v[1]).unwrap());
    assert_op("mul", &xs, |g, v| g.mul(v[0], v[1]).unwrap());
    assert_op("scale", &xs[..1], |g, v| g.scale(v[0], -0.37));
    assert_op("add_row", &inputs(&[&[3, 4], &[1, 4]], 6), |g, v| g.add_row(v[0], v[1]).unwrap());
    // Keep inputs clear of the kink.
    let mut r = inputs(&[&[4, 5]], 7);
    r[0].data_mut().iter_mut().for_each(|x| *x += 0.05 * x.signum());
    assert_op("relu", &r, |g, v| g.relu(v[0]));
    assert_op("sum", &xs[..1], |g, v| g.sum(v[0]));
}

#[test]
fn shape_ops() {
    let xs = inputs(&[&[3, 4], &[3, 2], &[5, 4]], 8);
    assert_op("transpose", &xs[..1], |g, v| g.transpose(v[0]));
    assert_op("concat_cols", &xs[..2], |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap());
    assert_op("concat_rows", &[xs[0].clone(), xs[2].clone()], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap());
    assert_op("slice_cols", &xs[..1], |g, v| g.slice_cols(v[0], 1, 3).unwrap());
    assert_op("slice_rows", &xs[2..], |g, v| g.slice_rows(v[0], 2, 5).unwrap());
    for offset in [0, 2] {
        assert_op("rel_shift", &inputs(&[&[3, 3 + offset]], 9), move |g, v| g.rel_shift(v[0], offset, 3 + offset));
    }
}

#[test]
fn softmax_norm_embedding() {
    let mask = causal_mask::<f64>(3, 2);
    assert_op("masked_softmax", &inputs(&[&[3, 5]], 10), |g, v| g.masked_softmax(v[0], &mask).unwrap());
    assert_op("layer_norm", &inputs(&[&[4, 6], &[1, 6], &[1, 6]], 11), |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    assert_op("embedding", &inputs(&[&[5, 3]], 12), |g, v| g.embedding(v[0], &[4, 0, 4, 2]).unwrap());
    assert_op("cross_entropy", &inputs(&[&[4, 6]], 13), |g, v| {
        g.cross_entropy(v[0], &[1, 5, 0, 3], &[true, false, true, true]).unwrap()
    });
}

#[test]
fn dropout_with_fixed_mask() {
    assert_op("dropout", &inputs(&[&[6, 5]], 14), |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        g.dropout(v[0], 0.3, &mut rng)
    });
}

fn check_model(residual: FfnResidual) {
    let cfg = ModelConfig {
        segment_len: 5,
        mem_len: 4,
        ffn_residual: residual,
        ..ModelConfig::tiny(16, 2, 2)
    };
    let model = random_model(cfg, 21);
    let report = model_gradcheck(&model, 5);
    assert_eq!(report.len(), model.params().len());
    for r in &report {
        assert!(r.rel_error < MODEL_TOL, "{}: {:e}", r.name, r.rel_error);
    }
}

#[test]
fn joint_model_as_printed() {
    check_model(FfnResidual::AsPrinted);
}

#[test]
fn joint_model_standard_residual() {
    check_model(FfnResidual::Standard);
}
