//! Every differentiable kernel on the tape, checked in isolation against
//! central differences. Each op output is contracted with a fixed random
//! matrix so that every output element carries a distinct weight; scalar
//! outputs are differentiated directly.

use std::rc::Rc;

use proxyvid_core::autograd::{Graph, NodeId};
use proxyvid_core::gradcheck::grad_check;
use proxyvid_core::vision::build_vip_mask;
use proxyvid_core::{BoolMask, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check_op(seed: u64, inputs: &[&[usize]], build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = inputs.iter().map(|s| random(&mut rng, s)).collect();
    let mut projection = None;
    let report = grad_check(
        |ps: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
            let y = build(&mut g, &ids)?;
            if g.value(y).numel() == 1 {
                let grads = g.backward(y);
                return Ok((g.value(y).data()[0], ids.iter().map(|&i| grads.node(i).unwrap().clone()).collect()));
            }
            let cols = g.value(y).cols();
            let w = projection
                .get_or_insert_with(|| random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xff), &[cols, 3]))
                .clone();
            let w = g.input(w);
            let out = g.matmul(y, w)?;
            let loss = g.value(out).data().iter().sum();
            let grads = g.backward(out);
            Ok((loss, ids.iter().map(|&i| grads.node(i).unwrap().clone()).collect()))
        },
        &params,
        1e-5,
    )
    .unwrap();
    report.max_rel_error()
}

#[test]
fn matmul_gradient() {
    assert!(check_op(1, &[&[3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])) < TOL);
}

#[test]
fn linear_gradient_with_and_without_bias() {
    assert!(check_op(2, &[&[3, 4], &[4, 5], &[5]], |g, x| g.linear(x[0], x[1], Some(x[2]))) < TOL);
    assert!(check_op(3, &[&[3, 4], &[4, 5]], |g, x| g.linear(x[0], x[1], None)) < TOL);
}

#[test]
fn layer_norm_gradient() {
    assert!(check_op(4, &[&[4, 6], &[6], &[6]], |g, x| g.layer_norm(x[0], x[1], x[2])) < TOL);
}

#[test]
fn gelu_gradient() {
    assert!(check_op(5, &[&[4, 5]], |g, x| Ok(g.gelu(x[0]))) < TOL);
}

#[test]
fn l2_normalize_gradient() {
    assert!(check_op(6, &[&[4, 5]], |g, x| g.l2_normalize(x[0])) < TOL);
}

#[test]
fn row_mix_add_and_concat_gradients() {
    let err = check_op(7, &[&[3, 4], &[2, 4]], |g, x| {
        let mixed = g.row_mix(x[0], vec![vec![(0, 0.5), (2, -1.5)], vec![(1, 2.0)]])?;
        let sum = g.add(mixed, x[1])?;
        g.concat_rows(&[sum, x[0], sum])
    });
    assert!(err < TOL);
}

#[test]
fn full_attention_gradient() {
    let mask = Rc::new(BoolMask::all_true(5, 5));
    let err = check_op(8, &[&[10, 4], &[10, 4], &[10, 4]], |g, x| g.attention(x[0], x[1], x[2], &mask, 2, 2));
    assert!(err < TOL);
}

#[test]
fn proxy_guided_attention_gradient() {
    let mask = Rc::new(build_vip_mask(3, 2, 2).unwrap().mask);
    let err = check_op(9, &[&[8, 6], &[8, 6], &[8, 6]], |g, x| g.attention(x[0], x[1], x[2], &mask, 1, 3));
    assert!(err < TOL);
}

#[test]
fn contrastive_gradient_including_temperature() {
    let err = check_op(10, &[&[4, 5], &[4, 5], &[4, 5], &[1]], |g, x| {
        let q = g.l2_normalize(x[0])?;
        let p = g.l2_normalize(x[1])?;
        let e = g.l2_normalize(x[2])?;
        let plain = g.contrastive(q, p, None, x[3])?;
        let extra = g.contrastive(p, q, Some(e), x[3])?;
        let total = g.weighted_sum(&[(0.5, plain), (0.5, extra)]);
        Ok(total)
    });
    assert!(err < TOL);
}
