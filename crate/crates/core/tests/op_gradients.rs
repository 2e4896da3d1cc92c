//! Finite-difference checks of every differentiable graph op.

use proptest::prelude::*;
use taco::numerics::{grad_check, AttnSegment, Graph, ParamId, ParamStore, Rng, Tensor, Transpose, Var};
use taco::Result;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct upstream gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let c = g.constant(Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())?);
    let m = g.mul(out, c)?;
    Ok(g.sum(m))
}

fn check<F>(store: &ParamStore, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    let rep = grad_check(
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|id| g.param(s, *id)).collect();
            f(g, &vars)
        },
        store,
        &ids,
        EPS,
    )
    .unwrap();
    rep.max_rel_error
}

fn store_of(tensors: Vec<Tensor>) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, t) in tensors.into_iter().enumerate() {
        s.insert(format!("p{i}"), t);
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_transposed(seed in 0u64..1_000_000, r in 1usize..4, k in 1usize..4, c in 1usize..4) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, r, k), random(&mut rng, k, c), random(&mut rng, c, k)]);
        let e = check(&s, |g, v| {
            let a = g.matmul(v[0], v[1])?;
            let b = g.matmul_t(v[0], v[2], Transpose::Yes)?;
            let j = g.concat_rows(a, b)?;
            project(g, j, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn elementwise(seed in 0u64..1_000_000, r in 1usize..4, c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, r, c), random(&mut rng, r, c), random(&mut rng, 1, c)]);
        let e = check(&s, |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let m = g.mul(b, v[1])?;
            let row = g.reshape(v[2], vec![c])?;
            let ar = g.add_row(m, row)?;
            let sc = g.scale(ar, -1.7);
            let t = g.transpose(sc);
            project(g, t, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    /// Inputs stay within [-3, 3]: far in the left tail the derivative drops
    /// below what a central difference can resolve in 64-bit arithmetic.
    #[test]
    fn gelu(seed in 0u64..1_000_000, r in 1usize..4, c in 1usize..5) {
        let mut rng = Rng::new(seed);
        let x = Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let s = store_of(vec![x]);
        let e = check(&s, |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn softmax_rows(seed in 0u64..1_000_000, r in 1usize..4, c in 2usize..6) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, r, c)]);
        let e = check(&s, |g, v| {
            let p = g.softmax_rows(v[0]);
            project(g, p, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn layer_norm(seed in 0u64..1_000_000, r in 1usize..4, c in 2usize..6) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, r, c), random(&mut rng, 1, c), random(&mut rng, 1, c)]);
        let e = check(&s, |g, v| {
            let gain = g.reshape(v[1], vec![c])?;
            let bias = g.reshape(v[2], vec![c])?;
            let y = g.layer_norm(v[0], gain, bias)?;
            project(g, y, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn segmented_attention(seed in 0u64..1_000_000, heads in 1usize..3, l1 in 1usize..4, l2 in 1usize..4) {
        let mut rng = Rng::new(seed);
        let (rows, d) = (l1 + l2, 2 * heads);
        let s = store_of(vec![random(&mut rng, rows, d), random(&mut rng, rows, d), random(&mut rng, rows, d)]);
        let segs = vec![
            AttnSegment { q_start: 0, q_len: l1, k_start: 0, k_len: l1 },
            AttnSegment { q_start: l1, q_len: l2, k_start: 0, k_len: rows },
        ];
        let e = check(&s, |g, v| {
            let a = g.attention(v[0], v[1], v[2], heads, segs.clone())?;
            project(g, a, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn gather_mean_and_max(seed in 0u64..1_000_000, c in 2usize..5) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, 5, c)]);
        let e = check(&s, |g, v| {
            let gathered = g.gather_rows(v[0], vec![4, 0, 0, 2])?;
            let mean = g.segment_mean(v[0], vec![(0, 2), (2, 3)])?;
            let both = g.concat_rows(gathered, mean)?;
            let mx = g.group_max_cols(both, &[(0, 1), (0, c), (1, c - 1)])?;
            project(g, mx, seed)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn weighted_cross_entropy(seed in 0u64..1_000_000, r in 1usize..4, c in 2usize..6) {
        let mut rng = Rng::new(seed);
        let s = store_of(vec![random(&mut rng, r, c)]);
        let targets: Vec<usize> = (0..r).map(|i| (i * 7 + seed as usize) % c).collect();
        let weights: Vec<f64> = (0..r).map(|_| rng.uniform(0.1, 2.0)).collect();
        let e = check(&s, |g, v| g.cross_entropy(v[0], targets.clone(), weights.clone()));
        prop_assert!(e < TOL, "{e}");
    }
}

#[test]
fn reverse_grad_negates_only_the_gradient() {
    let mut s = ParamStore::new();
    let id = s.insert("x", Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap());
    let mut g = Graph::new();
    let x = g.param(&s, id);
    let r = g.reverse_grad(x);
    assert_eq!(g.value(r).data(), g.value(x).data());
    let sq = g.mul(r, r).unwrap();
    let out = g.sum(sq);
    let grads = g.backward(out).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[-1.0, 3.0]);
}
