use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| rng.random_range(-2.0..2.0))
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("in{i}"), t)).collect()
}

type Fwd = fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>;

/// One entry per primitive: input dims and a forward that reduces to a
/// scalar through a fixed nonuniform projection.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Fwd)> {
    fn proj(g: &mut Graph<f64>, x: Var) -> Result<Var, DiffError> {
        let n = g.value(x).numel();
        let w = Tensor::from_fn(g.dims(x).to_vec(), |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0 - 0.6 * (i % 2) as f64);
        assert_eq!(w.numel(), n);
        project_to_scalar(g, x, &w)
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            proj(g, y)
        }),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            proj(g, y)
        }),
        ("matmul_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            proj(g, y)
        }),
        ("matmul_rank3_by_weight", vec![vec![2, 3, 4], vec![5, 4]], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            proj(g, y)
        }),
        ("transpose", vec![vec![2, 3, 4]], |g, v| {
            let y = g.transpose(v[0])?;
            proj(g, y)
        }),
        ("add_sub_mul", vec![vec![3, 4], vec![3, 4], vec![3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[2])?;
            let c = g.mul(b, v[0])?;
            proj(g, c)
        }),
        ("add_bias_scale_add_scalar", vec![vec![2, 3, 4], vec![4]], |g, v| {
            let a = g.add_bias(v[0], v[1])?;
            let b = g.scale(a, -1.7)?;
            let c = g.add_scalar(b, 0.25)?;
            let d = g.mul(c, c)?;
            proj(g, d)
        }),
        ("concat_split", vec![vec![2, 3, 4], vec![2, 1, 4]], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let parts = g.split(c, 1, &[2, 2])?;
            let m = g.mul(parts[0], parts[1])?;
            proj(g, m)
        }),
        ("softmax_masked", vec![vec![4, 3, 3]], |g, v| {
            let mut mask = Tensor::zeros([2, 3, 3]);
            mask.data_mut()[1] = MASK_NEG;
            mask.data_mut()[11] = MASK_NEG;
            let y = g.softmax_masked(v[0], Some(&mask), 2)?;
            proj(g, y)
        }),
        ("rms_norm_gain", vec![vec![3, 5], vec![5]], |g, v| {
            let y = g.rms_norm(v[0], Some(v[1]), 1e-6)?;
            proj(g, y)
        }),
        ("gelu", vec![vec![3, 5]], |g, v| {
            let y = g.gelu(v[0])?;
            proj(g, y)
        }),
        ("embedding_gather_scatter", vec![vec![6, 3], vec![2, 3]], |g, v| {
            let e = g.embedding(v[0], &[4, 1, 4, 0])?;
            let s = g.scatter_rows(e, &[3, 1], v[1], false)?;
            let a = g.scatter_rows(s, &[0, 2], v[1], true)?;
            let r = g.gather_rows(a, &[2, 0, 1])?;
            proj(g, r)
        }),
        ("mse", vec![vec![2, 6], vec![2, 6]], |g, v| g.mse(v[0], v[1])),
        ("timestep_embedding", vec![vec![3]], |g, v| {
            let t = g.scale(v[0], 0.1)?;
            let e = g.timestep_embedding(t, 8, 10.0)?;
            proj(g, e)
        }),
        ("heads_roundtrip_rope", vec![vec![2, 3, 8]], |g, v| {
            let h = g.split_heads(v[0], 2)?;
            let cos = Rc::new((0..6).map(|i| (0.4 * i as f64).cos()).collect::<Vec<_>>());
            let sin = Rc::new((0..6).map(|i| (0.4 * i as f64).sin()).collect::<Vec<_>>());
            let r = g.rope(h, cos, sin)?;
            let m = g.merge_heads(r, 2)?;
            proj(g, m)
        }),
        ("per_batch", vec![vec![2, 3, 4], vec![2, 4], vec![2, 4]], |g, v| {
            let a = g.mul_per_batch(v[0], v[1])?;
            let b = g.add_per_batch(a, v[2])?;
            proj(g, b)
        }),
        ("mix_tokens_reshape_mean", vec![vec![2, 4, 3]], |g, v| {
            let w = Rc::new(Tensor::new([2, 4], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.25, 0.25, 0.5]).unwrap());
            let m = g.mix_tokens(v[0], w)?;
            let r = g.reshape(m, &[4, 3])?;
            let sq = g.mul(r, r)?;
            g.mean(sq)
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences_over_seeds() {
    for (name, dims, fwd) in primitive_cases() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = named(dims.iter().map(|d| rand_t(&mut rng, d)).collect());
            let report = gradcheck(name, &params, 1e-5, fwd).unwrap();
            assert!(report.max_rel_err < 1e-5, "{name} seed {seed}: {}", report.max_rel_err);
        }
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([1, 3], vec![0.0; 3]).unwrap());
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_t(&mut rng, &[3, 5]);
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let y = g.matmul(i, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn gradient_of_softmax_sum_vanishes() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let y = g.softmax(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    for &v in grads.get(x).unwrap().data() {
        assert!(v.abs() < 1e-9);
    }
}

#[test]
fn masked_column_gets_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = rand_t(&mut rng, &[4, 6]).map(|v| v * 20.0);
        let j = rng.random_range(0..6);
        let mut mask = Tensor::zeros([4, 6]);
        for r in 0..4 {
            mask.row_mut(r)[j] = MASK_NEG;
        }
        for (dtype_is_f32, rows) in [(false, softmax_rows::<f64>(&x, &mask)), (true, softmax_rows::<f32>(&x.cast(), &mask.cast()))] {
            for row in rows {
                assert!(row[j] < 1e-30, "f32={dtype_is_f32} weight {}", row[j]);
                let total: f64 = row.iter().sum();
                assert!((total - 1.0).abs() < if dtype_is_f32 { 1e-6 } else { 1e-12 });
            }
        }
    }
}

fn softmax_rows<F: Real>(x: &Tensor<F>, mask: &Tensor<F>) -> Vec<Vec<f64>> {
    let mut g = Graph::<F>::new();
    let xv = g.constant(x.clone());
    let y = g.softmax_masked(xv, Some(mask), 1).unwrap();
    (0..x.rows()).map(|r| g.value(y).row(r).iter().map(|v| v.f64()).collect()).collect()
}

#[test]
fn concat_then_split_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for axis in 0..3 {
        let mut dims_a = vec![2, 3, 4];
        let mut dims_b = dims_a.clone();
        dims_b[axis] = 5;
        dims_a[axis] = 1 + axis;
        let a = rand_t(&mut rng, &dims_a);
        let b = rand_t(&mut rng, &dims_b);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[av, bv], axis).unwrap();
        let parts = g.split(c, axis, &[dims_a[axis], 5]).unwrap();
        assert_eq!(g.value(parts[0]), &a);
        assert_eq!(g.value(parts[1]), &b);
    }
}

#[test]
fn shape_mismatch_names_op_and_dims() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn non_finite_output_fails_immediately() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full([2], 1e300));
    let err = g.mul(a, a).unwrap_err();
    assert_eq!(err, DiffError::NonFinite { op: "mul" });
}

#[test]
fn affine_layer_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![
        ("w".to_string(), rand_t(&mut rng, &[4, 4])),
        ("b".to_string(), rand_t(&mut rng, &[4])),
        ("x".to_string(), rand_t(&mut rng, &[1, 4])),
    ];
    let report = gradcheck("affine", &params, 1e-5, |g, v| {
        let y = g.matmul(v[2], v[0])?;
        let y = g.add_bias(y, v[1])?;
        let sq = g.mul(y, y)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    assert_eq!(report.scalars_checked, 24);
}

#[test]
fn masked_attention_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = named(vec![rand_t(&mut rng, &[1, 3, 4]), rand_t(&mut rng, &[1, 3, 4]), rand_t(&mut rng, &[1, 3, 4])]);
    let report = gradcheck("masked_attention", &params, 1e-5, |g, v| {
        let mut mask = Tensor::zeros([1, 3, 3]);
        mask.data_mut()[2] = MASK_NEG;
        let logits = g.matmul_nt(v[0], v[1])?;
        let logits = g.scale(logits, 0.5)?;
        let p = g.softmax_masked(logits, Some(&mask), 1)?;
        let o = g.matmul(p, v[2])?;
        let o2 = g.mul(o, o)?;
        g.sum(o2)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{}", report.max_rel_err);
}

#[test]
fn gradcheck_rejects_eps_out_of_range() {
    let params = named(vec![Tensor::zeros([1])]);
    assert!(gradcheck("x", &params, 1e-2, |g, v| g.sum(v[0])).is_err());
}

#[test]
fn gradcheck_detects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let params = named(vec![Tensor::zeros([1])]);
    let err = gradcheck("flaky", &params, 1e-4, |g, v| {
        calls.set(calls.get() + 1.0);
        let s = g.sum(v[0])?;
        g.add_scalar(s, calls.get())
    })
    .unwrap_err();
    assert!(matches!(err, DiffError::NonDeterministic { .. }));
}
