//! Analytic gradients against central finite differences.

mod common;

use common::{check, model_gradient_error, rel_err, toy_model, Graph, GRAD_TOL, H};
use ltdqg_core::model::ModelParams;
use ltdqg_core::training::{example_gradients, Example};
use ltdqg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn op(name: &str, inputs: Vec<Tensor>, f: &Graph) {
    let worst = check(inputs, f);
    assert!(worst < GRAD_TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize]| common::random(&mut rng, shape);

    op("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|t, v| t.matmul(v[0], v[1]));
    op("transpose", vec![r(&[3, 4])], &|t, v| t.transpose(v[0]));
    op("add", vec![r(&[2, 3]), r(&[2, 3])], &|t, v| t.add(v[0], v[1]));
    op("mul", vec![r(&[2, 3]), r(&[2, 3])], &|t, v| t.mul(v[0], v[1]));
    op("add_row", vec![r(&[3, 4]), r(&[4])], &|t, v| t.add_row(v[0], v[1]));
    op("scale", vec![r(&[2, 3])], &|t, v| Ok(t.scale(v[0], -1.7)));
    op("add_const", vec![r(&[2, 2])], &|t, v| t.add_const(v[0], &[0.5, -1.0, 2.0, 0.0]));
    op("gelu", vec![r(&[3, 5])], &|t, v| Ok(t.gelu(v[0])));
    op("softmax rows", vec![r(&[3, 4])], &|t, v| t.softmax(v[0], 1));
    op("softmax cols", vec![r(&[3, 4])], &|t, v| t.softmax(v[0], 0));
    op("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
    op("gather_rows", vec![r(&[5, 3])], &|t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    op("slice_cols", vec![r(&[3, 6])], &|t, v| t.slice_cols(v[0], 2, 3));
    op("concat_cols", vec![r(&[3, 2]), r(&[3, 3])], &|t, v| t.concat_cols(&[v[0], v[1]]));
    op("mean_pool", vec![r(&[4, 3])], &|t, v| t.mean_pool(v[0], &[true, false, true, true]));
    op("cosine", vec![r(&[6]), r(&[6])], &|t, v| t.cosine(v[0], v[1]));
    op("cross_entropy", vec![r(&[4, 5])], &|t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], 0));
    op("sum", vec![r(&[2, 3])], &|t, v| Ok(t.sum(v[0])));
    op("reused input", vec![r(&[3, 3])], &|t, v| {
        let sq = t.matmul(v[0], v[0])?;
        t.add(sq, v[0])
    });
}

#[test]
fn full_ltd_loss_matches_finite_differences() {
    let params = toy_model();
    let context = [5, 6, 7, 8, 9, 10, 11];
    let q1 = [12, 13, 14];
    let q2 = [15, 16, 17, 18];
    let example = Example::Pair {
        context: &context,
        q1: &q1,
        q2: &q2,
    };
    let (checked, worst) = model_gradient_error(&params, &example, 0.1);
    println!("checked {checked} parameters, max relative error {worst:e}");
    assert_eq!(checked, params.num_parameters());
    assert!(worst < GRAD_TOL, "max relative error {worst:e}");
}

#[test]
fn div_term_gradient_alone_matches_finite_differences() {
    let params = toy_model();
    let context = [4, 5, 6];
    let (q1, q2) = ([7, 8], [9, 10, 11]);
    let ex = Example::Pair {
        context: &context,
        q1: &q1,
        q2: &q2,
    };
    let (_, g0) = example_gradients(&params, &ex, 0.0).unwrap();
    let (_, g1) = example_gradients(&params, &ex, 1.0).unwrap();
    let div = |p: &ModelParams| example_gradients(p, &ex, 1.0).unwrap().0.div;
    let mut worst: f64 = 0.0;
    for (k, t) in params.tensors().iter().enumerate() {
        for i in (0..t.numel()).step_by(7) {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[i] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[i] -= H;
            let numeric = (div(&plus) - div(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g1[k][i] - g0[k][i], numeric));
        }
    }
    assert!(worst < GRAD_TOL, "max relative error {worst:e}");
}
