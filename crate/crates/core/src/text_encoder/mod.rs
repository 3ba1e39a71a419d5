//! Hierarchical caption encoder: Bi-LSTM word context, attention pooling for
//! the event node, max pooling for action and entity nodes, role-aware
//! scaling and stacked graph attention over the semantic-role graph.
//!
//! All captions of a batch are encoded together. Tokens are concatenated
//! caption by caption, and node states are stacked caption by caption in each
//! graph's own node order.

mod vocab;

pub use vocab::{
    import_embeddings, ImportReport, Vocab, VocabError, OOV, OOV_TOKEN, PAD, PAD_TOKEN,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_init, AutodiffError, Graph, ParameterStore, Real, Tensor, Var};
use crate::semantic_graph::{Level, SemanticRoleGraph, NUM_ROLES};

type Result<T> = std::result::Result<T, AutodiffError>;

pub const P_WORD_EMB: &str = "text.word_emb";
pub const P_EVENT_ATTN: &str = "text.event_attn.w_e";
pub const P_LIFT: &str = "text.lift";
pub const P_ROLE_EMB: &str = "text.role_emb";

/// Upper bound on nodes per graph-attention block; captions are grouped
/// into blocks so that attention stays block-diagonal and cheap.
const BLOCK_NODES: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    /// Hidden width of each LSTM direction.
    pub lstm_hidden: usize,
    pub joint_dim: usize,
    pub num_layers: usize,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.vocab_size < 2 || self.word_dim == 0 || self.lstm_hidden == 0 || self.joint_dim == 0
        {
            return Err("text encoder widths must be positive and the vocabulary must hold the reserved ids".into());
        }
        if self.num_layers == 0 {
            return Err("at least one graph attention layer is required".into());
        }
        Ok(())
    }
}

/// `L·D·D + K·D`: shared per-layer transforms plus the role embedding.
pub fn relational_param_count(layers: usize, dim: usize, roles: usize) -> usize {
    layers * dim * dim + roles * dim
}

/// `L·K·D·D`: one transform per role and layer.
pub fn naive_relational_param_count(layers: usize, dim: usize, roles: usize) -> usize {
    layers * roles * dim * dim
}

fn lstm_name(dir: &str, part: &str) -> String {
    format!("text.lstm_{dir}.{part}")
}

/// Whether `name` belongs to the word embedding or the Bi-LSTM, the only
/// parameters `contextual_words` reads.
pub fn is_sequence_param(name: &str) -> bool {
    name == P_WORD_EMB || name.starts_with("text.lstm_")
}

pub fn gcn_name(layer: usize, part: &str) -> String {
    format!("text.gcn.{layer}.{part}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    /// Softmax attention over neighbours; uniform averaging when false.
    pub graph_attention: bool,
    /// Role-embedding scaling of initial node states; identity when false.
    pub role_awareness: bool,
}

/// One caption ready for encoding.
#[derive(Clone, Copy, Debug)]
pub struct CaptionInput<'a> {
    pub graph: &'a SemanticRoleGraph,
    pub ids: &'a [usize],
}

/// Encoded batch. Row blocks of `actions` and `entities` belong to captions
/// according to the offset vectors (length `B + 1`).
#[derive(Clone, Debug)]
pub struct TextBatch {
    /// `[B × D]`.
    pub event: Var,
    pub actions: Var,
    pub action_offsets: Vec<usize>,
    /// `None` when no caption in the batch has entity nodes.
    pub entities: Option<Var>,
    pub entity_offsets: Vec<usize>,
    /// Contextual words `[ΣN × H]`.
    pub words: Var,
    pub token_offsets: Vec<usize>,
    /// Event attention `[B × ΣN]`, zero outside each caption's tokens.
    pub alpha: Var,
    /// Node states `g^0 … g^L`, each `[Σnodes × D]`.
    pub states: Vec<Var>,
    pub node_offsets: Vec<usize>,
    /// Attention per layer and block, with each block's first node and size.
    pub betas: Vec<Vec<Var>>,
    pub blocks: Vec<(usize, usize)>,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig) -> Self {
        TextEncoder {
            cfg,
            graph_attention: true,
            role_awareness: true,
        }
    }

    /// Adds every text parameter to `store`.
    pub fn init_params<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let c = &self.cfg;
        let (wd, h, d) = (c.word_dim, c.lstm_hidden, c.joint_dim);
        store.insert(P_WORD_EMB, uniform_init(rng, vec![c.vocab_size, wd], wd))?;
        for dir in ["fwd", "bwd"] {
            store.insert(
                lstm_name(dir, "w_ih"),
                uniform_init(rng, vec![wd, 4 * h], wd),
            )?;
            store.insert(lstm_name(dir, "w_hh"), uniform_init(rng, vec![h, 4 * h], h))?;
            let bias = (0..4 * h)
                .map(|k| {
                    if (h..2 * h).contains(&k) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            store.insert(lstm_name(dir, "bias"), Tensor::new(vec![1, 4 * h], bias))?;
        }
        store.insert(P_EVENT_ATTN, uniform_init(rng, vec![h, 1], h))?;
        if h != d {
            store.insert(P_LIFT, uniform_init(rng, vec![h, d], h))?;
        }
        // Stored as `[K × D]`: row k is the scaling vector of role k.
        // Parameters an ablation never reads are not created.
        if self.role_awareness {
            store.insert(P_ROLE_EMB, uniform_init(rng, vec![NUM_ROLES, d], NUM_ROLES))?;
        }
        for l in 0..c.num_layers {
            for part in ["w_q", "w_k", "w_t"] {
                if part == "w_t" || self.graph_attention {
                    store.insert(gcn_name(l, part), uniform_init(rng, vec![d, d], d))?;
                }
            }
        }
        Ok(())
    }

    /// Bi-LSTM over every caption at once; returns `[ΣN × H]` with
    /// `w_i = (fwd_i + bwd_i) / 2`.
    pub fn contextual_words<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[&[usize]],
    ) -> Result<Var> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(AutodiffError::InvalidArgument {
                op: "contextual_words",
                msg: "empty token sequence".into(),
            });
        }
        let vocab = self.cfg.vocab_size;
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t >= vocab) {
            return Err(AutodiffError::InvalidArgument {
                op: "contextual_words",
                msg: format!("token id {bad} outside vocabulary of {vocab}"),
            });
        }
        let all: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let emb = g.param(P_WORD_EMB)?;
        let x = g.gather_rows(emb, &all)?;
        let fwd = self.lstm_direction(g, x, seqs, "fwd", false)?;
        let bwd = self.lstm_direction(g, x, seqs, "bwd", true)?;
        let sum = g.add(fwd, bwd)?;
        g.scale(sum, 0.5)
    }

    fn lstm_direction<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        seqs: &[&[usize]],
        dir: &str,
        reverse: bool,
    ) -> Result<Var> {
        let h = self.cfg.lstm_hidden;
        let w_ih = g.param(&lstm_name(dir, "w_ih"))?;
        let w_hh = g.param(&lstm_name(dir, "w_hh"))?;
        let bias = g.param(&lstm_name(dir, "bias"))?;
        let xp = g.matmul(x, w_ih)?;
        let pre_all = g.add_row(xp, bias)?;

        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let offsets = prefix(&lens);
        // Longest first, so the captions still running at step t are a prefix.
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&c| std::cmp::Reverse(lens[c]));
        let max_len = lens[order[0]];

        let mut steps = Vec::with_capacity(max_len);
        let mut out_row = vec![0usize; offsets[seqs.len()]];
        let mut row = 0;
        let (mut h_prev, mut c_prev): (Option<Var>, Option<Var>) = (None, None);
        for t in 0..max_len {
            let active = order.iter().take_while(|&&c| lens[c] > t).count();
            let pos = |c: usize| if reverse { lens[c] - 1 - t } else { t };
            let rows: Vec<usize> = order[..active]
                .iter()
                .map(|&c| offsets[c] + pos(c))
                .collect();
            for (k, &r) in rows.iter().enumerate() {
                out_row[r] = row + k;
            }
            row += active;
            let mut pre = g.gather_rows(pre_all, &rows)?;
            let c_in = match (h_prev, c_prev) {
                (Some(hp), Some(cp)) => {
                    let (hp, cp) = if g.shape(hp)[0] == active {
                        (hp, cp)
                    } else {
                        (g.slice_rows(hp, 0, active)?, g.slice_rows(cp, 0, active)?)
                    };
                    let rec = g.matmul(hp, w_hh)?;
                    pre = g.add(pre, rec)?;
                    cp
                }
                _ => g.constant(Tensor::zeros(vec![active, h])),
            };
            let hc = g.lstm_gates(pre, c_in)?;
            let hn = g.slice_cols(hc, 0, h)?;
            let cn = g.slice_cols(hc, h, h)?;
            steps.push(hn);
            h_prev = Some(hn);
            c_prev = Some(cn);
        }
        let stacked = if steps.len() == 1 {
            steps[0]
        } else {
            g.concat(&steps, 0)?
        };
        g.gather_rows(stacked, &out_row)
    }

    /// Event attention within each caption: `α = softmax(W_e·w)`, `g_e = Σ α w`.
    /// Returns `(g_e [B × H], α [B × ΣN])`.
    pub fn event_pool<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        words: Var,
        token_offsets: &[usize],
    ) -> Result<(Var, Var)> {
        let b = token_offsets.len() - 1;
        let total = token_offsets[b];
        let w_e = g.param(P_EVENT_ATTN)?;
        let scores = g.matmul(words, w_e)?;
        let row = g.transpose(scores)?;
        let ones = g.constant(Tensor::filled(vec![b, 1], T::one()));
        let tiled = g.matmul(ones, row)?;
        let mut mask = vec![false; b * total];
        for c in 0..b {
            for t in token_offsets[c]..token_offsets[c + 1] {
                mask[c * total + t] = true;
            }
        }
        let alpha = g.masked_softmax(tiled, &mask)?;
        let pooled = g.matmul(alpha, words)?;
        Ok((pooled, alpha))
    }

    /// Elementwise max over each node span, for every non-event node of every
    /// caption in node order.
    pub fn node_pool<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        words: Var,
        graphs: &[&SemanticRoleGraph],
        token_offsets: &[usize],
    ) -> Result<Var> {
        let ranges: Vec<(usize, usize)> = graphs
            .iter()
            .enumerate()
            .flat_map(|(c, gr)| {
                let off = token_offsets[c];
                gr.nodes
                    .iter()
                    .filter(|n| n.level != Level::Event)
                    .map(move |n| (off + n.span.0, off + n.span.1))
            })
            .collect();
        g.segment_max_rows(words, &ranges)
    }

    /// `g^0 = g ⊙ (W_r · onehot(role))` row by row.
    pub fn role_init<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        nodes: Var,
        roles: &[usize],
    ) -> Result<Var> {
        if !self.role_awareness {
            return Ok(nodes);
        }
        let w_r = g.param(P_ROLE_EMB)?;
        let scale = g.gather_rows(w_r, roles)?;
        g.mul(nodes, scale)
    }

    /// One residual graph-attention layer over a block of nodes with the given
    /// symmetric neighbour mask (no self entries). Returns `(g^{l+1}, β)`.
    pub fn graph_attention_layer<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        states: Var,
        neighbours: &[bool],
        layer: usize,
    ) -> Result<(Var, Var)> {
        let n = g.shape(states)[0];
        let beta = if self.graph_attention {
            let w_q = g.param(&gcn_name(layer, "w_q"))?;
            let w_k = g.param(&gcn_name(layer, "w_k"))?;
            let q = g.matmul(states, w_q)?;
            let k = g.matmul(states, w_k)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, 1.0 / (self.cfg.joint_dim as f64).sqrt())?;
            g.masked_softmax(s, neighbours)?
        } else {
            g.constant(uniform_neighbours(n, neighbours))
        };
        let ctx = g.matmul(beta, states)?;
        let w_t = g.param(&gcn_name(layer, "w_t"))?;
        let upd = g.matmul(ctx, w_t)?;
        Ok((g.add(states, upd)?, beta))
    }

    /// Full pipeline for a batch of captions.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        captions: &[CaptionInput<'_>],
    ) -> Result<TextBatch> {
        check_inputs(captions)?;
        let seqs: Vec<&[usize]> = captions.iter().map(|c| c.ids).collect();
        let words = self.contextual_words(g, &seqs)?;
        self.encode_from_words(g, words, captions)
    }

    /// Everything after the sequence encoder: pooling, role initialization
    /// and graph reasoning over `words` (`[ΣN × H]` in caption order).
    pub fn encode_from_words<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        words: Var,
        captions: &[CaptionInput<'_>],
    ) -> Result<TextBatch> {
        check_inputs(captions)?;
        let seqs: Vec<&[usize]> = captions.iter().map(|c| c.ids).collect();
        let graphs: Vec<&SemanticRoleGraph> = captions.iter().map(|c| c.graph).collect();
        let b = captions.len();
        let token_offsets = prefix(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>());
        let rows = g.shape(words).first().copied().unwrap_or(0);
        if rows != token_offsets[b] {
            return Err(AutodiffError::InvalidArgument {
                op: "encode_text",
                msg: format!("{rows} word rows for {} tokens", token_offsets[b]),
            });
        }
        let (g_e, alpha) = self.event_pool(g, words, &token_offsets)?;
        let pooled = self.node_pool(g, words, &graphs, &token_offsets)?;

        // Stack [events; pooled] and reorder into per-caption node order.
        let mut order = Vec::new();
        let mut roles = Vec::new();
        let mut next_pooled = b;
        for (c, gr) in graphs.iter().enumerate() {
            for n in &gr.nodes {
                if n.level == Level::Event {
                    order.push(c);
                } else {
                    order.push(next_pooled);
                    next_pooled += 1;
                }
                roles.push(n.role.index());
            }
        }
        let both = g.concat(&[g_e, pooled], 0)?;
        let mut nodes = g.gather_rows(both, &order)?;
        if self.cfg.lstm_hidden != self.cfg.joint_dim {
            let lift = g.param(P_LIFT)?;
            nodes = g.matmul(nodes, lift)?;
        }
        let g0 = self.role_init(g, nodes, &roles)?;

        let node_offsets = prefix(&graphs.iter().map(|gr| gr.nodes.len()).collect::<Vec<_>>());
        let blocks = make_blocks(&node_offsets);
        let masks: Vec<Vec<bool>> = blocks
            .iter()
            .map(|&(c0, c1)| block_mask(&graphs[c0..c1]))
            .collect();
        let mut states = vec![g0];
        let mut betas = Vec::new();
        for l in 0..self.cfg.num_layers {
            let cur = *states.last().expect("nonempty");
            let mut outs = Vec::with_capacity(blocks.len());
            let mut layer_betas = Vec::with_capacity(blocks.len());
            for (bi, &(c0, c1)) in blocks.iter().enumerate() {
                let (s, len) = (node_offsets[c0], node_offsets[c1] - node_offsets[c0]);
                let part = if blocks.len() == 1 {
                    cur
                } else {
                    g.slice_rows(cur, s, len)?
                };
                let (o, beta) = self.graph_attention_layer(g, part, &masks[bi], l)?;
                outs.push(o);
                layer_betas.push(beta);
            }
            let next = if outs.len() == 1 {
                outs[0]
            } else {
                g.concat(&outs, 0)?
            };
            states.push(next);
            betas.push(layer_betas);
        }
        let last = *states.last().expect("nonempty");

        let pick = |level: Level| -> (Vec<usize>, Vec<usize>) {
            let mut rows = Vec::new();
            let mut offs = vec![0];
            for (c, gr) in graphs.iter().enumerate() {
                rows.extend(
                    gr.nodes
                        .iter()
                        .filter(|n| n.level == level)
                        .map(|n| node_offsets[c] + n.id),
                );
                offs.push(rows.len());
            }
            (rows, offs)
        };
        let (ev_rows, _) = pick(Level::Event);
        let (ac_rows, action_offsets) = pick(Level::Action);
        let (en_rows, entity_offsets) = pick(Level::Entity);
        let event = g.gather_rows(last, &ev_rows)?;
        let actions = g.gather_rows(last, &ac_rows)?;
        let entities = if en_rows.is_empty() {
            None
        } else {
            Some(g.gather_rows(last, &en_rows)?)
        };
        let blocks = blocks
            .iter()
            .map(|&(c0, c1)| (node_offsets[c0], node_offsets[c1] - node_offsets[c0]))
            .collect();
        Ok(TextBatch {
            event,
            actions,
            action_offsets,
            entities,
            entity_offsets,
            words,
            token_offsets,
            alpha,
            states,
            node_offsets,
            betas,
            blocks,
        })
    }
}

pub(crate) fn prefix(lens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lens.len() + 1);
    out.push(0);
    for &l in lens {
        out.push(out.last().unwrap() + l);
    }
    out
}

/// Groups consecutive captions into `(first, one_past_last)` blocks.
fn make_blocks(node_offsets: &[usize]) -> Vec<(usize, usize)> {
    let b = node_offsets.len() - 1;
    let mut blocks = Vec::new();
    let mut start = 0;
    for c in 1..=b {
        if c == b || node_offsets[c + 1] - node_offsets[start] > BLOCK_NODES {
            blocks.push((start, c));
            start = c;
        }
    }
    blocks
}

/// Block-diagonal neighbour mask: edges in both directions, no self entries.
pub fn block_mask(graphs: &[&SemanticRoleGraph]) -> Vec<bool> {
    let n: usize = graphs.iter().map(|g| g.nodes.len()).sum();
    let mut mask = vec![false; n * n];
    let mut off = 0;
    for gr in graphs {
        for e in &gr.edges {
            let (i, j) = (off + e.child, off + e.parent);
            if i != j {
                mask[i * n + j] = true;
                mask[j * n + i] = true;
            }
        }
        off += gr.nodes.len();
    }
    mask
}

/// Row-normalized neighbour indicator; isolated rows stay zero.
fn uniform_neighbours<T: Real>(n: usize, mask: &[bool]) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        let deg = mask[i * n..(i + 1) * n].iter().filter(|&&m| m).count();
        if deg > 0 {
            let w = T::one() / T::from_usize(deg).unwrap();
            for j in 0..n {
                if mask[i * n + j] {
                    data[i * n + j] = w;
                }
            }
        }
    }
    Tensor::new(vec![n, n], data)
}

fn check_inputs(captions: &[CaptionInput<'_>]) -> Result<()> {
    for (i, c) in captions.iter().enumerate() {
        if c.ids.len() != c.graph.tokens.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "encode_text",
                msg: format!(
                    "caption {i}: {} ids for {} tokens",
                    c.ids.len(),
                    c.graph.tokens.len()
                ),
            });
        }
    }
    Ok(())
}
