mod common;

use common::*;
use docre::classifier::{mean_pool, project_side};
use docre::config::{MentionPooling, TrainConfig};
use docre::corpus::PairTask;
use docre::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

fn inputs(shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(shapes.len() as u64 * 13 + shapes[0][0] as u64);
    shapes.iter().map(|s| random_tensor(&mut rng, s, 1.0)).collect()
}

/// Keeps entries at least 0.05 away from zero so ReLU kinks are never crossed.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v += 0.1 * v.signum();
    }
    t
}

fn assert_grad(name: &str, xs: &[Tensor], tol: f64, f: impl Fn(&mut Tape<'_>, &[Var]) -> Var) {
    let err = max_grad_error(xs, STEP, f);
    assert!(err <= tol, "{name}: rel err {err:.3e} > {tol:.0e}");
}

#[test]
fn linear_ops() {
    let xs = inputs(&[&[3, 4], &[4, 5]]);
    assert_grad("matmul", &xs, 1e-6, |t, v| t.matmul(v[0], v[1]).unwrap());
    let xs = inputs(&[&[3, 4], &[3, 4]]);
    assert_grad("add", &xs, 1e-6, |t, v| t.add(v[0], v[1]).unwrap());
    assert_grad("mul", &xs, 1e-6, |t, v| t.mul(v[0], v[1]).unwrap());
    assert_grad("concat", &xs, 1e-6, |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap());
    let xs = inputs(&[&[3, 4], &[4]]);
    assert_grad("add_row", &xs, 1e-6, |t, v| t.add_row(v[0], v[1]).unwrap());
    let xs = inputs(&[&[3, 4], &[3, 1]]);
    assert_grad("mul_col", &xs, 1e-6, |t, v| t.mul_col(v[0], v[1]).unwrap());
    let xs = inputs(&[&[5, 3]]);
    assert_grad("scale", &xs, 1e-6, |t, v| t.scale(v[0], -2.5).unwrap());
    assert_grad("gather", &xs, 1e-6, |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap());
    assert_grad("scatter", &xs, 1e-6, |t, v| t.scatter_add_rows(v[0], &[1, 1, 0, 3, 1], 4).unwrap());
    assert_grad("sum", &xs, 1e-6, |t, v| t.sum(v[0]).unwrap());
}

#[test]
fn biaffine_gradients() {
    let xs = inputs(&[&[3, 4], &[4, 3, 5], &[2, 5]]);
    assert_grad("biaffine", &xs, 1e-6, |t, v| t.biaffine(v[0], v[1], v[2]).unwrap());
}

#[test]
fn pointwise_nonlinearities() {
    let xs = vec![off_kink(inputs(&[&[4, 3]]).remove(0))];
    assert_grad("relu", &xs, 1e-6, |t, v| t.relu(v[0]).unwrap());
    let xs = inputs(&[&[4, 3]]);
    assert_grad("sigmoid", &xs, 1e-6, |t, v| t.sigmoid(v[0]).unwrap());
    assert_grad("tanh", &xs, 1e-6, |t, v| t.tanh(v[0]).unwrap());
}

#[test]
fn logsumexp_every_axis() {
    let xs = inputs(&[&[4, 3]]);
    assert_grad("lse axis 0", &xs, 1e-6, |t, v| t.logsumexp(v[0], 0).unwrap());
    assert_grad("lse axis 1", &xs, 1e-6, |t, v| t.logsumexp(v[0], 1).unwrap());
    let xs = inputs(&[&[6]]);
    assert_grad("lse vector", &xs, 1e-6, |t, v| t.logsumexp(v[0], 0).unwrap());
}

#[test]
fn cross_entropy_every_gold() {
    let xs = inputs(&[&[4]]);
    for gold in 0..4 {
        assert_grad("cross entropy", &xs, 1e-6, |t, v| t.softmax_cross_entropy(v[0], gold).unwrap());
    }
}

#[test]
fn dropout_with_fixed_mask() {
    let xs = inputs(&[&[6, 4]]);
    assert_grad("dropout", &xs, 1e-6, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.dropout(v[0], 0.4, true, &mut rng).unwrap()
    });
}

#[test]
fn projection_on_four_rows() {
    let dg = 6;
    let mut xs = inputs(&[&[4, dg], &[dg, 5], &[5, 5]]);
    // hidden pre-activations must stay off the ReLU kink
    xs[0] = off_kink(xs[0].clone());
    assert_grad("projection", &xs, 1e-5, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        project_side(t, v[0], v[1], v[2], 0.0, false, &mut rng).unwrap()
    });
}

#[test]
fn mean_pool_gradients() {
    let xs = inputs(&[&[5, 3]]);
    assert_grad("mean_pool", &xs, 1e-6, |t, v| mean_pool(t, v[0], &[vec![0, 2], vec![4], vec![1, 3, 2]]).unwrap());
}

#[test]
fn composite_chain() {
    let xs = inputs(&[&[3, 4], &[4, 4], &[4]]);
    assert_grad("chain", &xs, 1e-5, |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let g = t.sigmoid(h).unwrap();
        let h = t.tanh(h).unwrap();
        let h = t.mul(h, g).unwrap();
        t.logsumexp(h, 1).unwrap()
    });
}

#[test]
fn full_model_with_dropout() {
    let cfg = TrainConfig {
        dropout_input: 0.2,
        dropout_gcnn: 0.2,
        dropout_mil: 0.2,
        ..tiny_config()
    };
    let (err, n) = model_gradient_check(&cfg, &six_token_doc(), true, 1e-4);
    assert!(n > 1000);
    assert!(err <= 1e-3, "rel err {err:.3e}");
}

#[test]
fn full_model_variants() {
    let variants = [
        TrainConfig {
            mention_pooling: MentionPooling::Mention,
            ..tiny_config()
        },
        TrainConfig {
            task: PairTask::Undirected,
            top_n: 0,
            ..tiny_config()
        },
        TrainConfig {
            edge_gating: false,
            residual: false,
            word_dimension: 2,
            gcnn_dimension: 6,
            ..tiny_config()
        },
    ];
    for cfg in &variants {
        let (err, _) = model_gradient_check(cfg, &six_token_doc(), false, 1e-4);
        assert!(err <= 1e-3, "{}: rel err {err:.3e}", cfg.fingerprint());
    }
}
