//! Every tape op against central finite differences.

use std::sync::Arc;

use afformer_autograd::check::check_params;
use afformer_autograd::{Ctx, ParamId, ParamStore, Tensor, Var, GATHER_ZERO};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

/// Reduce an arbitrary output to a scalar with fixed random weights so every
/// output element contributes a distinct sensitivity.
fn reduce(ctx: &mut Ctx, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(ctx.shape(out), &mut rng);
    ctx.dot_const(out, w)
}

fn run_check(params: ParamStore, build: impl Fn(&mut Ctx, &[ParamId]) -> Var) {
    let ids: Vec<ParamId> = params.ids().collect();
    let f = |p: &ParamStore| {
        let mut ctx = Ctx::new(p);
        let out = build(&mut ctx, &ids);
        let s = reduce(&mut ctx, out, 99);
        ctx.value(s).item()
    };
    let mut ctx = Ctx::new(&params);
    let out = build(&mut ctx, &ids);
    let s = reduce(&mut ctx, out, 99);
    let mut grads = ctx.backward(s);
    let analytic = ctx.param_grads(&mut grads);
    let mut params = params.clone();
    let report = check_params(&f, &mut params, &analytic, STEP, 1e-3, None);
    assert!(
        report.max_rel_error < TOL,
        "max rel error {} at {}[{}]",
        report.max_rel_error,
        report.worst_param,
        report.worst_index
    );
}

fn store(shapes: &[&[usize]], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        p.register(format!("p{i}"), random(s, &mut rng));
    }
    p
}

#[test]
fn add_mul_scale() {
    run_check(store(&[&[3, 4], &[3, 4]], 1), |c, ids| {
        let (a, b) = (c.param(ids[0]), c.param(ids[1]));
        let s = c.add(a, b);
        let m = c.mul(s, a);
        c.scale(m, -1.7)
    });
}

#[test]
fn add_row_and_matmuls() {
    run_check(store(&[&[3, 4], &[4, 5], &[5], &[2, 5]], 2), |c, ids| {
        let (a, b, bias, d) = (c.param(ids[0]), c.param(ids[1]), c.param(ids[2]), c.param(ids[3]));
        let ab = c.matmul(a, b);
        let ab = c.add_row(ab, bias);
        c.matmul_t(ab, d)
    });
}

#[test]
fn softmax_rows_and_log_softmax() {
    run_check(store(&[&[4, 6]], 3), |c, ids| {
        let x = c.param(ids[0]);
        let s = c.softmax_rows(x);
        let l = c.log_softmax(x);
        let m = c.mul(s, l);
        c.add(m, s)
    });
}

#[test]
fn layer_norm_and_gelu() {
    run_check(store(&[&[5, 6], &[6], &[6]], 4), |c, ids| {
        let (x, g, b) = (c.param(ids[0]), c.param(ids[1]), c.param(ids[2]));
        let y = c.layer_norm(x, g, b, 1e-5);
        c.gelu(y)
    });
}

#[test]
fn gather_with_zero_padding_and_reshape() {
    let index: Arc<[usize]> = vec![0, 3, 3, GATHER_ZERO, 5, 1, 1, 2].into();
    run_check(store(&[&[2, 3]], 5), move |c, ids| {
        let x = c.param(ids[0]);
        let g = c.gather(x, index.clone(), &[2, 4]);
        let r = c.reshape(g, &[8]);
        let sq = c.mul(r, r);
        c.sum(sq)
    });
}

#[test]
fn conv2d_strided_padded() {
    run_check(store(&[&[2, 3, 7, 6], &[4, 3, 3, 3], &[4]], 6), |c, ids| {
        let (x, w, b) = (c.param(ids[0]), c.param(ids[1]), c.param(ids[2]));
        c.conv2d(x, w, Some(b), 2, 1)
    });
}

#[test]
fn conv_transpose2d_doubles_resolution() {
    run_check(store(&[&[2, 3, 4, 5], &[3, 2, 4, 4], &[2]], 7), |c, ids| {
        let (x, w, b) = (c.param(ids[0]), c.param(ids[1]), c.param(ids[2]));
        let y = c.conv_transpose2d(x, w, Some(b), 2, 1);
        assert_eq!(c.shape(y), &[2, 2, 8, 10]);
        y
    });
}

/// Transposed convolution is the adjoint of convolution with the same kernel.
#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 3, 8, 8], &mut rng);
    let y = random(&[1, 2, 4, 4], &mut rng);
    // conv weight [Co=2, Ci=3], transposed conv weight [Ci=2, Co=3] reuse the same numbers
    let w = random(&[2, 3, 4, 4], &mut rng);
    let p = ParamStore::new();
    let mut c = Ctx::new(&p);
    let (xv, yv, wv) = (c.constant(x.clone()), c.constant(y.clone()), c.constant(w));
    let cx = c.conv2d(xv, wv, None, 2, 1);
    let ty = c.conv_transpose2d(yv, wv, None, 2, 1);
    let lhs: f64 = c.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = c.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let p = ParamStore::new();
    let mut c = Ctx::new(&p);
    let (xv, wv) = (c.constant(x.clone()), c.constant(w.clone()));
    let y = c.conv2d(xv, wv, None, 2, 1);
    let got = c.value(y);
    assert_eq!(got.shape(), &[1, 3, 3, 3]);
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                let v = got.data()[(co * 3 + oy) * 3 + ox];
                assert!((v - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shared_leaf_accumulates() {
    // x used twice: d/dx (x*x) = 2x
    run_check(store(&[&[3]], 10), |c, ids| {
        let x = c.param(ids[0]);
        let x2 = c.param(ids[0]);
        c.mul(x, x2)
    });
}

#[test]
fn inference_context_has_no_grads() {
    let p = store(&[&[2, 2]], 11);
    let id = p.ids().next().unwrap();
    let mut c = Ctx::inference(&p);
    let x = c.param(id);
    let s = c.sum(x);
    let mut g = c.backward(s);
    assert!(c.param_grads(&mut g)[0].is_none());
}
