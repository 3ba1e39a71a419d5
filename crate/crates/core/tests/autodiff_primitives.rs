//! Every primitive's analytic gradient against central differences, over 100
//! random shape/value draws.

use hgr_core::autodiff::{grad_check, AutodiffError, Graph, ParameterStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 100;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::new(
        vec![r, c],
        (0..r * c).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

/// Contracts the output with fixed random weights so that every output entry
/// contributes a distinct amount to the scalar.
fn contract(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let shape = g.shape(out).to_vec();
    let (r, c) = g.value(out).dims2().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.constant(rand_tensor(&mut rng, r, c, -1.0, 1.0).reshaped(shape));
    let w = if g.shape(w) == g.shape(out) {
        w
    } else {
        g.reshape(w, &[r, c])?
    };
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn check<F>(name: &str, inputs: Vec<(&str, Tensor<f64>)>, seed: u64, f: F)
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut store = ParameterStore::new(seed);
    for (n, t) in &inputs {
        store.insert(*n, t.clone()).unwrap();
    }
    let names: Vec<&str> = inputs.iter().map(|(n, _)| *n).collect();
    let report = grad_check(
        |g| {
            let vars: Vec<Var> = names.iter().map(|n| g.param(n)).collect::<Result<_, _>>()?;
            let out = f(g, &vars)?;
            contract(g, out, seed)
        },
        &store,
        1e-6,
    )
    .unwrap();
    assert!(
        report.max_relative_error <= TOL,
        "{name} seed {seed}: {report:?}"
    );
}

#[test]
fn primitives_match_finite_differences() {
    for seed in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(1..5);
        let a = rand_tensor(&mut rng, m, k, -2.0, 2.0);
        let b = rand_tensor(&mut rng, k, n, -2.0, 2.0);
        let a2 = rand_tensor(&mut rng, m, k, -2.0, 2.0);
        let pos = rand_tensor(&mut rng, m, k, 0.5, 2.0);
        let row = rand_tensor(&mut rng, 1, k, -2.0, 2.0);
        let col = rand_tensor(&mut rng, m, 1, -2.0, 2.0);

        check(
            "matmul",
            vec![("a", a.clone()), ("b", b.clone())],
            seed,
            |g, v| g.matmul(v[0], v[1]),
        );
        check("transpose", vec![("a", a.clone())], seed, |g, v| {
            g.transpose(v[0])
        });
        check(
            "add",
            vec![("a", a.clone()), ("b", a2.clone())],
            seed,
            |g, v| g.add(v[0], v[1]),
        );
        check(
            "sub",
            vec![("a", a.clone()), ("b", a2.clone())],
            seed,
            |g, v| g.sub(v[0], v[1]),
        );
        check(
            "mul",
            vec![("a", a.clone()), ("b", a2.clone())],
            seed,
            |g, v| g.mul(v[0], v[1]),
        );
        check(
            "div",
            vec![("a", a.clone()), ("b", pos.clone())],
            seed,
            |g, v| g.div(v[0], v[1]),
        );
        check(
            "add_row",
            vec![("a", a.clone()), ("r", row.clone())],
            seed,
            |g, v| g.add_row(v[0], v[1]),
        );
        check(
            "mul_row",
            vec![("a", a.clone()), ("r", row.clone())],
            seed,
            |g, v| g.mul_row(v[0], v[1]),
        );
        check(
            "mul_col",
            vec![("a", a.clone()), ("c", col.clone())],
            seed,
            |g, v| g.mul_col(v[0], v[1]),
        );
        check("scale", vec![("a", a.clone())], seed, |g, v| {
            g.scale(v[0], -1.7)
        });
        check("add_scalar", vec![("a", a.clone())], seed, |g, v| {
            g.add_scalar(v[0], 0.3)
        });
        check("tanh", vec![("a", a.clone())], seed, |g, v| g.tanh(v[0]));
        check("sigmoid", vec![("a", a.clone())], seed, |g, v| {
            g.sigmoid(v[0])
        });
        check("relu", vec![("a", a.clone())], seed, |g, v| g.relu(v[0]));
        check("sqrt", vec![("a", pos.clone())], seed, |g, v| g.sqrt(v[0]));
        check("recip", vec![("a", pos.clone())], seed, |g, v| {
            g.recip(v[0])
        });
        check("square", vec![("a", a.clone())], seed, |g, v| {
            g.square(v[0])
        });
        check("exp", vec![("a", a.clone())], seed, |g, v| {
            g.unary(v[0], hgr_core::autodiff::Unary::Exp)
        });
        for axis in 0..2 {
            check("softmax", vec![("a", a.clone())], seed, |g, v| {
                g.softmax(v[0], axis)
            });
            check("max", vec![("a", a.clone())], seed, |g, v| {
                g.max(v[0], axis)
            });
            check("sum", vec![("a", a.clone())], seed, |g, v| {
                g.sum(v[0], axis)
            });
            check("mean", vec![("a", a.clone())], seed, |g, v| {
                g.mean(v[0], axis)
            });
            check("l2_norm", vec![("a", a.clone())], seed, |g, v| {
                g.l2_norm(v[0], axis, 1e-8)
            });
            check(
                "concat",
                vec![("a", a.clone()), ("b", a2.clone())],
                seed,
                |g, v| g.concat(&[v[0], v[1]], axis),
            );
        }
        let mask: Vec<bool> = (0..m * k).map(|_| rng.gen_bool(0.6)).collect();
        check("masked_softmax", vec![("a", a.clone())], seed, |g, v| {
            g.masked_softmax(v[0], &mask)
        });
        check("sum_all", vec![("a", a.clone())], seed, |g, v| {
            g.sum_all(v[0])
        });
        let start = rng.gen_range(0..m);
        let len = rng.gen_range(1..=m - start);
        check("slice_rows", vec![("a", a.clone())], seed, |g, v| {
            g.slice_rows(v[0], start, len)
        });
        let cstart = rng.gen_range(0..k);
        let clen = rng.gen_range(1..=k - cstart);
        check("slice_cols", vec![("a", a.clone())], seed, |g, v| {
            g.slice_cols(v[0], cstart, clen)
        });
        let idx: Vec<usize> = (0..rng.gen_range(1..6))
            .map(|_| rng.gen_range(0..m))
            .collect();
        check("gather_rows", vec![("a", a.clone())], seed, |g, v| {
            g.gather_rows(v[0], &idx)
        });
        let ranges: Vec<(usize, usize)> = (0..rng.gen_range(1..4))
            .map(|_| {
                let s = rng.gen_range(0..m);
                (s, rng.gen_range(s + 1..=m))
            })
            .collect();
        check("segment_max_rows", vec![("a", a.clone())], seed, |g, v| {
            g.segment_max_rows(v[0], &ranges)
        });
        check("reshape", vec![("a", a.clone())], seed, |g, v| {
            g.reshape(v[0], &[k, m])
        });
        let other = rand_tensor(&mut rng, n, k, -2.0, 2.0);
        // With one column every cosine is ±1 and the true gradient is zero.
        if k > 1 {
            check(
                "cosine_matrix",
                vec![("a", a.clone()), ("b", other)],
                seed,
                |g, v| g.cosine_matrix(v[0], v[1], 1e-8),
            );
        }
        let h = k;
        let pre = rand_tensor(&mut rng, m, 4 * h, -2.0, 2.0);
        let c0 = rand_tensor(&mut rng, m, h, -1.0, 1.0);
        check("lstm_gates", vec![("p", pre), ("c", c0)], seed, |g, v| {
            g.lstm_gates(v[0], v[1])
        });
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let m = rng.gen_range(1..6);
        let n = rng.gen_range(1..6);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut rng, m, n, -20.0, 20.0));
        let y = g.softmax(x, 1).unwrap();
        for r in g.value(y).to_rows() {
            assert!(r.iter().all(|&v| v >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::<f32>::new();
        let a = g.constant(rand_tensor(&mut rng, 4, 3, -1.0, 1.0).cast());
        let b = g.constant(rand_tensor(&mut rng, 3, 5, -1.0, 1.0).cast());
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        g.value(s)
            .data()
            .iter()
            .map(|x| x.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
