//! Independent oracles for the caption encoder.

use hgr_core::autodiff::{grad_check, Graph, ParameterStore, Tensor};
use hgr_core::semantic_graph::{Edge, Level, Node, RoleLabel, SemanticRoleGraph, NUM_ROLES};
use hgr_core::text_encoder::{CaptionInput, TextEncoder, TextEncoderConfig, P_ROLE_EMB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{factorization_deviation, random_graph};

fn cfg(h: usize, d: usize, layers: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        vocab_size: 12,
        word_dim: 5,
        lstm_hidden: h,
        joint_dim: d,
        num_layers: layers,
    }
}

fn params(enc: &TextEncoder, seed: u64) -> ParameterStore<f64> {
    let mut s = ParameterStore::new(seed);
    enc.init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap();
    s
}

#[test]
fn edge_specific_form_matches_role_init_then_layer() {
    let worst = factorization_deviation(50, 6);
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}

#[test]
fn reversed_tokens_with_swapped_directions_reverse_words() {
    let enc = TextEncoder::new(cfg(4, 4, 1));
    let store = params(&enc, 3);
    let mut swapped = ParameterStore::<f64>::new(3);
    for (name, t) in store.iter() {
        let renamed = if name.contains("lstm_fwd") {
            name.replace("lstm_fwd", "lstm_bwd")
        } else {
            name.replace("lstm_bwd", "lstm_fwd")
        };
        swapped.insert(renamed, t.clone()).unwrap();
    }
    let ids = [2usize, 5, 7, 3, 9];
    let rev: Vec<usize> = ids.iter().rev().copied().collect();
    let mut g = Graph::with_params(&store);
    let w = enc.contextual_words(&mut g, &[&ids]).unwrap();
    let w = g.value(w).to_rows();
    let mut g2 = Graph::with_params(&swapped);
    let wr = enc.contextual_words(&mut g2, &[&rev]).unwrap();
    let wr = g2.value(wr).to_rows();
    for (i, row) in w.iter().enumerate() {
        for (a, b) in row.iter().zip(&wr[ids.len() - 1 - i]) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn single_token_and_zero_dynamics() {
    let enc = TextEncoder::new(cfg(3, 3, 1));
    let store = params(&enc, 4);
    let mut g = Graph::with_params(&store);
    let w = enc.contextual_words(&mut g, &[&[6]]).unwrap();
    assert_eq!(g.shape(w), &[1, 3]);

    let mut zero = ParameterStore::<f64>::new(0);
    for (name, t) in store.iter() {
        let v = if name.contains("lstm") {
            Tensor::zeros(t.shape().to_vec())
        } else {
            t.clone()
        };
        zero.insert(name.clone(), v).unwrap();
    }
    let mut g = Graph::with_params(&zero);
    let w = enc.contextual_words(&mut g, &[&[2, 3, 4]]).unwrap();
    assert!(g.value(w).data().iter().all(|&x| x == 0.0));
}

fn batch_rows(g: &Graph<'_, f64>, v: hgr_core::autodiff::Var) -> Vec<Vec<f64>> {
    g.value(v).to_rows()
}

#[test]
fn batching_matches_single_caption_encoding() {
    let enc = TextEncoder::new(cfg(5, 4, 2));
    let store = params(&enc, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let graphs: Vec<SemanticRoleGraph> = (0..7).map(|_| random_graph(&mut rng)).collect();
    let ids: Vec<Vec<usize>> = graphs
        .iter()
        .map(|gr| (0..gr.tokens.len()).map(|_| rng.gen_range(0..12)).collect())
        .collect();
    let inputs: Vec<CaptionInput> = graphs
        .iter()
        .zip(&ids)
        .map(|(graph, ids)| CaptionInput { graph, ids })
        .collect();
    let mut g = Graph::with_params(&store);
    let batch = enc.encode(&mut g, &inputs).unwrap();
    let ev = batch_rows(&g, batch.event);
    let ac = batch_rows(&g, batch.actions);
    let en = batch
        .entities
        .map(|e| batch_rows(&g, e))
        .unwrap_or_default();
    for (c, inp) in inputs.iter().enumerate() {
        let mut g1 = Graph::with_params(&store);
        let one = enc.encode(&mut g1, &[*inp]).unwrap();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&ev[c], &batch_rows(&g1, one.event)[0]));
        let a1 = batch_rows(&g1, one.actions);
        for (k, r) in (batch.action_offsets[c]..batch.action_offsets[c + 1]).enumerate() {
            assert!(close(&ac[r], &a1[k]), "caption {c} action {k}");
        }
        if let Some(e) = one.entities {
            let e1 = batch_rows(&g1, e);
            for (k, r) in (batch.entity_offsets[c]..batch.entity_offsets[c + 1]).enumerate() {
                assert!(close(&en[r], &e1[k]), "caption {c} entity {k}");
            }
        }
    }
}

fn permute(gr: &SemanticRoleGraph, perm: &[usize]) -> SemanticRoleGraph {
    // perm[old] = new
    let mut nodes = vec![None; gr.nodes.len()];
    for n in &gr.nodes {
        nodes[perm[n.id]] = Some(Node {
            id: perm[n.id],
            ..n.clone()
        });
    }
    let edges = gr
        .edges
        .iter()
        .map(|e| Edge {
            child: perm[e.child],
            parent: perm[e.parent],
            role: e.role,
        })
        .collect();
    SemanticRoleGraph {
        tokens: gr.tokens.clone(),
        nodes: nodes.into_iter().map(Option::unwrap).collect(),
        edges,
    }
}

#[test]
fn node_permutation_permutes_outputs() {
    let enc = TextEncoder::new(cfg(4, 4, 2));
    let store = params(&enc, 6);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let gr = random_graph(&mut rng);
        let n = gr.nodes.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pg = permute(&gr, &perm);
        pg.validate().unwrap();
        let ids: Vec<usize> = (0..gr.tokens.len()).map(|_| rng.gen_range(0..12)).collect();
        let run = |graph: &SemanticRoleGraph| {
            let mut g = Graph::with_params(&store);
            let b = enc
                .encode(&mut g, &[CaptionInput { graph, ids: &ids }])
                .unwrap();
            let rows = |v| g.value(v).to_rows();
            (
                rows(b.event),
                rows(b.actions),
                b.entities.map(rows).unwrap_or_default(),
            )
        };
        let (e0, a0, o0) = run(&gr);
        let (e1, a1, o1) = run(&pg);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&e0[0], &e1[0]));
        for (level, before, after) in [(Level::Action, &a0, &a1), (Level::Entity, &o0, &o1)] {
            let old: Vec<usize> = gr
                .nodes
                .iter()
                .filter(|x| x.level == level)
                .map(|x| x.id)
                .collect();
            let new: Vec<usize> = pg
                .nodes
                .iter()
                .filter(|x| x.level == level)
                .map(|x| x.id)
                .collect();
            for (k, &o) in old.iter().enumerate() {
                let pos = new.iter().position(|&x| x == perm[o]).unwrap();
                assert!(close(&before[k], &after[pos]), "seed {seed} {level:?} {k}");
            }
        }
    }
}

#[test]
fn attention_weights_are_distributions() {
    let enc = TextEncoder::new(cfg(4, 4, 2));
    let store = params(&enc, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let graphs: Vec<SemanticRoleGraph> = (0..5).map(|_| random_graph(&mut rng)).collect();
    let ids: Vec<Vec<usize>> = graphs.iter().map(|gr| vec![3; gr.tokens.len()]).collect();
    let inputs: Vec<CaptionInput> = graphs
        .iter()
        .zip(&ids)
        .map(|(graph, ids)| CaptionInput { graph, ids })
        .collect();
    let mut g = Graph::with_params(&store);
    let b = enc.encode(&mut g, &inputs).unwrap();
    for row in g.value(b.alpha).to_rows() {
        assert!(row.iter().all(|&a| a >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for layer in &b.betas {
        for &beta in layer {
            for row in g.value(beta).to_rows() {
                let s: f64 = row.iter().sum();
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn role_scaling_examples() {
    let enc = TextEncoder::new(cfg(2, 2, 1));
    let mut rows = vec![vec![1.0, 1.0]; NUM_ROLES];
    rows[RoleLabel::Arg1.index()] = vec![0.0, 0.0];
    rows[RoleLabel::Arg2.index()] = vec![2.0, -1.0];
    let mut store = ParameterStore::<f64>::new(0);
    store.insert(P_ROLE_EMB, Tensor::from_rows(&rows)).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::from_rows(&[
        vec![0.5, -2.0],
        vec![0.5, -2.0],
        vec![0.5, -2.0],
    ]));
    let roles = [
        RoleLabel::Arg0.index(),
        RoleLabel::Arg1.index(),
        RoleLabel::Arg2.index(),
    ];
    let y = enc.role_init(&mut g, x, &roles).unwrap();
    let y = g.value(y).to_rows();
    assert_eq!(y, vec![vec![0.5, -2.0], vec![0.0, -0.0], vec![1.0, 2.0]]);
}

#[test]
fn uniform_ablation_changes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let gr = loop {
        let g = random_graph(&mut rng);
        if g.nodes.len() >= 4 {
            break g;
        }
    };
    let ids: Vec<usize> = (0..gr.tokens.len()).map(|_| rng.gen_range(0..12)).collect();
    let enc = TextEncoder::new(cfg(4, 4, 2));
    let store = params(&enc, 9);
    let run = |enc: &TextEncoder| {
        let mut g = Graph::with_params(&store);
        let b = enc
            .encode(
                &mut g,
                &[CaptionInput {
                    graph: &gr,
                    ids: &ids,
                }],
            )
            .unwrap();
        g.value(b.event).data().to_vec()
    };
    let uniform = TextEncoder {
        graph_attention: false,
        ..enc.clone()
    };
    assert_ne!(run(&enc), run(&uniform));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let enc = TextEncoder::new(cfg(3, 4, 2));
    let store = params(&enc, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let graphs: Vec<SemanticRoleGraph> = (0..2).map(|_| random_graph(&mut rng)).collect();
    let ids: Vec<Vec<usize>> = graphs
        .iter()
        .map(|gr| (0..gr.tokens.len()).map(|_| rng.gen_range(0..12)).collect())
        .collect();
    let weights: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let report = grad_check(
        |g| {
            let inputs: Vec<CaptionInput> = graphs
                .iter()
                .zip(&ids)
                .map(|(graph, ids)| CaptionInput { graph, ids })
                .collect();
            let b = enc.encode(g, &inputs)?;
            let mut parts = vec![b.event, b.actions];
            parts.extend(b.entities);
            let mut total = None;
            for (k, v) in parts.into_iter().enumerate() {
                let n = g.value(v).len();
                let shape = g.shape(v).to_vec();
                let w = g.constant(Tensor::new(
                    shape,
                    weights[k * 40..k * 40 + n.min(40)]
                        .iter()
                        .cycle()
                        .take(n)
                        .copied()
                        .collect(),
                ));
                let p = g.mul(v, w)?;
                let s = g.sum_all(p)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}
