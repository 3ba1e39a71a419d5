//! Oracles shared by several test targets.
#![allow(dead_code)]

use hgr_core::autodiff::{Graph, ParameterStore, Tensor};
use hgr_core::semantic_graph::{build_graph, SemanticRoleGraph, SrlFrame, NUM_ROLES};
use hgr_core::text_encoder::{block_mask, gcn_name, TextEncoder, TextEncoderConfig, P_ROLE_EMB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROLES: [&str; 8] = [
    "ARG0", "ARG1", "ARG2", "ARGM-LOC", "ARGM-TMP", "ARGM-DIR", "ARGM-MNR", "ARGM-ADV",
];

pub fn random_graph(rng: &mut ChaCha8Rng) -> SemanticRoleGraph {
    let n = rng.gen_range(2..10);
    let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
    let mut frames = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        let verb = rng.gen_range(0..n);
        let mut args = Vec::new();
        let mut pos = 0;
        while pos < n && args.len() < 3 {
            let s = rng.gen_range(pos..n);
            let e = rng.gen_range(s + 1..=n.min(s + 3));
            if rng.gen_bool(0.7) {
                args.push(((s, e), ROLES[rng.gen_range(0..ROLES.len())]));
            }
            pos = e;
        }
        frames.push(SrlFrame::new(verb, args));
    }
    build_graph(tokens, &frames).unwrap()
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn vecmat(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    let cols = w[0].len();
    (0..cols)
        .map(|j| x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Layer 1 in the edge-specific form: each neighbour j contributes through
/// `W_t` with its input dimensions scaled by `W_r·r_j`, applied to the raw
/// node embedding. Attention logits use the role-scaled states.
pub fn edge_specific_layer(
    gr: &SemanticRoleGraph,
    g: &[Vec<f64>],
    w_r: &[Vec<f64>],
    w_q: &[Vec<f64>],
    w_k: &[Vec<f64>],
    w_t: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let n = g.len();
    let d = g[0].len();
    let role = |i: usize| gr.nodes[i].role.index();
    let g0: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|k| g[i][k] * w_r[role(i)][k]).collect())
        .collect();
    let mut nbrs = vec![Vec::new(); n];
    for e in &gr.edges {
        nbrs[e.child].push(e.parent);
        nbrs[e.parent].push(e.child);
    }
    let mut out = g0.clone();
    for i in 0..n {
        if nbrs[i].is_empty() {
            continue;
        }
        let qi = vecmat(&g0[i], w_q);
        let logits: Vec<f64> = nbrs[i]
            .iter()
            .map(|&j| dot(&qi, &vecmat(&g0[j], w_k)) / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for (&j, l) in nbrs[i].iter().zip(&logits) {
            let beta = (l - mx).exp() / z;
            // Edge-specific matrix: rows of W_t (input dims) scaled by role j.
            let m: Vec<Vec<f64>> = (0..d)
                .map(|a| (0..d).map(|b| w_t[a][b] * w_r[role(j)][a]).collect())
                .collect();
            let contrib = vecmat(&g[j], &m);
            for k in 0..d {
                out[i][k] += beta * contrib[k];
            }
        }
    }
    out
}

/// Largest absolute deviation between the encoder's role initialization
/// followed by one attention layer and [`edge_specific_layer`], over
/// `graphs` random graphs at width `d`.
pub fn factorization_deviation(graphs: u64, d: usize) -> f64 {
    let enc = TextEncoder::new(TextEncoderConfig {
        vocab_size: 12,
        word_dim: 5,
        lstm_hidden: d,
        joint_dim: d,
        num_layers: 1,
    });
    let mut worst = 0f64;
    for seed in 0..graphs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gr = random_graph(&mut rng);
        let n = gr.nodes.len();
        let g_raw = rand_matrix(&mut rng, n, d);
        let w_r = rand_matrix(&mut rng, NUM_ROLES, d);
        let (w_q, w_k, w_t) = (
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
            rand_matrix(&mut rng, d, d),
        );
        let mut store = ParameterStore::<f64>::new(seed);
        store.insert(P_ROLE_EMB, Tensor::from_rows(&w_r)).unwrap();
        store
            .insert(gcn_name(0, "w_q"), Tensor::from_rows(&w_q))
            .unwrap();
        store
            .insert(gcn_name(0, "w_k"), Tensor::from_rows(&w_k))
            .unwrap();
        store
            .insert(gcn_name(0, "w_t"), Tensor::from_rows(&w_t))
            .unwrap();

        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::from_rows(&g_raw));
        let roles: Vec<usize> = gr.nodes.iter().map(|n| n.role.index()).collect();
        let g0 = enc.role_init(&mut g, x, &roles).unwrap();
        let (g1, _) = enc
            .graph_attention_layer(&mut g, g0, &block_mask(&[&gr]), 0)
            .unwrap();
        let got = g.value(g1).to_rows();
        let want = edge_specific_layer(&gr, &g_raw, &w_r, &w_q, &w_k, &w_t);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Mean over the batch of both hardest-negative hinges, by double loop.
pub fn loss_oracle(sim: &[Vec<f64>], margin: f64) -> f64 {
    let b = sim.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut worst_caption = f64::NEG_INFINITY;
        let mut worst_video = f64::NEG_INFINITY;
        for j in 0..b {
            if j != i {
                worst_caption = worst_caption.max(sim[i][j]);
                worst_video = worst_video.max(sim[j][i]);
            }
        }
        if b > 1 {
            total += (margin + worst_caption - sim[i][i]).max(0.0)
                + (margin + worst_video - sim[i][i]).max(0.0);
        }
    }
    total / b as f64
}

/// Fully sorts the gallery (score descending, index ascending) and returns
/// the 1-based position of the first ground-truth item.
pub fn sorted_rank(row: &[f64], gt: &[usize]) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    1 + order.iter().position(|i| gt.contains(i)).unwrap()
}

pub fn oracle_median(ranks: &[usize]) -> f64 {
    let mut s: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
