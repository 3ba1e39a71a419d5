//! The full retrieval model: caption encoder, video encoder and matching,
//! with ablation switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, ParameterStore, Real, Tensor, Var};
use crate::matching::{
    batch_similarity, contrastive_loss, MatchConfig, Similarities, TextEmbeddings, TextSide,
    VideoEmbeddings, VideoSide,
};
use crate::text_encoder::{CaptionInput, TextBatch, TextEncoder, TextEncoderConfig};
use crate::video_encoder::{VideoBatch, VideoEncoder, VideoEncoderConfig, VideoError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Uniform averaging over neighbours instead of learned attention.
    pub no_graph_attention: bool,
    /// Identity in place of the per-role scaling.
    pub no_role_awareness: bool,
    /// One projection shared by the three video levels.
    pub no_hier_video: bool,
}

impl Ablations {
    /// Applies a CLI-style name (`no-graph-attention`, `no-role-awareness`,
    /// `no-hier-video`).
    pub fn enable(&mut self, name: &str) -> Result<(), String> {
        match name.replace('_', "-").as_str() {
            "no-graph-attention" => self.no_graph_attention = true,
            "no-role-awareness" => self.no_role_awareness = true,
            "no-hier-video" | "no-hierarchical-video" => self.no_hier_video = true,
            _ => return Err(format!("unknown ablation `{name}`")),
        }
        Ok(())
    }
}

/// Architecture hyperparameters. Its canonical JSON is hashed into
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub lstm_hidden: usize,
    pub joint_dim: usize,
    pub num_layers: usize,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub matching: MatchConfig,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            word_dim: 32,
            lstm_hidden: 64,
            joint_dim: 64,
            num_layers: 2,
            feature_dim: 128,
            max_frames: 32,
            matching: MatchConfig::default(),
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn text(&self) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size: self.vocab_size,
            word_dim: self.word_dim,
            lstm_hidden: self.lstm_hidden,
            joint_dim: self.joint_dim,
            num_layers: self.num_layers,
        }
    }

    pub fn video(&self) -> VideoEncoderConfig {
        VideoEncoderConfig {
            feature_dim: self.feature_dim,
            joint_dim: self.joint_dim,
            max_frames: self.max_frames,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.text().validate()?;
        self.matching.validate()?;
        if self.feature_dim == 0 || self.max_frames == 0 {
            return Err("feature_dim and max_frames must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HgrModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub video: VideoEncoder,
}

/// Graph outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub text: TextBatch,
    pub video: VideoBatch,
    pub sims: Similarities,
}

impl HgrModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, String> {
        cfg.validate()?;
        let mut text = TextEncoder::new(cfg.text());
        text.graph_attention = !cfg.ablations.no_graph_attention;
        text.role_awareness = !cfg.ablations.no_role_awareness;
        let mut video = VideoEncoder::new(cfg.video());
        video.hierarchical = !cfg.ablations.no_hier_video;
        Ok(HgrModel { cfg, text, video })
    }

    /// Fresh parameters; text weights are drawn before video weights from a
    /// single seeded stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>, VideoError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(seed);
        self.text.init_params(&mut store, &mut rng)?;
        self.video.init_params(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Width check and subsampling for each `(video_id, frames)` pair.
    pub fn prepare_videos<T: Real>(
        &self,
        videos: &[(&str, &Tensor<f32>)],
    ) -> Result<Vec<Tensor<T>>, VideoError> {
        videos
            .iter()
            .map(|(id, f)| self.video.prepare(id, f))
            .collect()
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        videos: Vec<Tensor<T>>,
        captions: &[CaptionInput<'_>],
    ) -> Result<Forward, VideoError> {
        let text = self.text.encode(g, captions)?;
        let video = self.video.encode(g, videos)?;
        let sims = batch_similarity(
            g,
            &VideoSide::from(&video),
            &TextSide::from(&text),
            &self.cfg.matching,
        )?;
        Ok(Forward { text, video, sims })
    }

    /// Ranking loss over a batch of aligned pairs (video `i` with caption `i`).
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        videos: Vec<Tensor<T>>,
        captions: &[CaptionInput<'_>],
        margin: f64,
    ) -> Result<(Var, Forward), VideoError> {
        let fwd = self.forward(g, videos, captions)?;
        let loss = contrastive_loss(g, fwd.sims.fused, margin)?;
        Ok((loss, fwd))
    }

    /// Encodes captions in chunks of `chunk`, in parallel, into plain tensors.
    pub fn encode_texts<T: Real>(
        &self,
        params: &ParameterStore<T>,
        captions: &[CaptionInput<'_>],
        chunk: usize,
    ) -> Result<TextEmbeddings, AutodiffError> {
        use rayon::prelude::*;
        let parts: Vec<Result<TextEmbeddings, AutodiffError>> = captions
            .par_chunks(chunk.max(1))
            .map(|part| {
                let mut g = Graph::with_params(params);
                let b = self.text.encode(&mut g, part)?;
                Ok(TextEmbeddings::from_batch(&g, &b))
            })
            .collect();
        let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(TextEmbeddings::concat(&parts))
    }

    /// Encodes videos in chunks of `chunk`, in parallel, into plain tensors.
    pub fn encode_videos<T: Real>(
        &self,
        params: &ParameterStore<T>,
        videos: &[(&str, &Tensor<f32>)],
        chunk: usize,
    ) -> Result<VideoEmbeddings, VideoError> {
        use rayon::prelude::*;
        let parts: Vec<Result<VideoEmbeddings, VideoError>> = videos
            .par_chunks(chunk.max(1))
            .map(|part| {
                let prepared = self.prepare_videos::<T>(part)?;
                let mut g = Graph::with_params(params);
                let b = self.video.encode(&mut g, prepared)?;
                Ok(VideoEmbeddings::from_batch(&g, &b))
            })
            .collect();
        let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(VideoEmbeddings::concat(&parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic_graph::{build_graph, SrlFrame};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            word_dim: 4,
            lstm_hidden: 5,
            joint_dim: 6,
            feature_dim: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn ablations_drop_unused_parameters() {
        let full = HgrModel::new(small())
            .unwrap()
            .init_params::<f32>(0)
            .unwrap();
        let mut cfg = small();
        for a in ["no-graph-attention", "no-role-awareness", "no-hier-video"] {
            cfg.ablations.enable(a).unwrap();
        }
        let abl = HgrModel::new(cfg).unwrap().init_params::<f32>(0).unwrap();
        assert!(full.contains("text.role_emb") && !abl.contains("text.role_emb"));
        assert!(!abl.contains("text.gcn.0.w_q") && abl.contains("text.gcn.0.w_t"));
        assert!(abl.contains("video.w_shared") && !abl.contains("video.w_action"));
        assert!(Ablations::default().enable("bogus").is_err());
    }

    #[test]
    fn chunked_encoding_matches_one_batch() {
        let m = HgrModel::new(small()).unwrap();
        let p = m.init_params::<f64>(1).unwrap();
        let toks = |n: usize| (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>();
        let graphs = [
            build_graph(
                toks(4),
                &[SrlFrame::new(1, vec![((0, 1), "ARG0"), ((2, 4), "ARG1")])],
            )
            .unwrap(),
            build_graph(toks(3), &[]).unwrap(),
            build_graph(
                toks(5),
                &[
                    SrlFrame::new(2, vec![((0, 2), "ARG0")]),
                    SrlFrame::new(4, vec![]),
                ],
            )
            .unwrap(),
        ];
        let ids: Vec<Vec<usize>> = graphs
            .iter()
            .map(|g| (0..g.tokens.len()).map(|i| 2 + i).collect())
            .collect();
        let caps: Vec<CaptionInput> = graphs
            .iter()
            .zip(&ids)
            .map(|(graph, ids)| CaptionInput { graph, ids })
            .collect();
        let whole = m.encode_texts(&p, &caps, 8).unwrap();
        let split = m.encode_texts(&p, &caps, 1).unwrap();
        assert_eq!(whole.action_offsets, split.action_offsets);
        assert_eq!(whole.entity_offsets, split.entity_offsets);
        for (a, b) in whole.actions.data().iter().zip(split.actions.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let f: Vec<Tensor<f32>> = (0..3)
            .map(|k| Tensor::filled(vec![2 + k, 8], 0.1 * k as f32 + 0.05))
            .collect();
        let vids: Vec<(&str, &Tensor<f32>)> = f.iter().map(|t| ("v", t)).collect();
        let whole = m.encode_videos(&p, &vids, 8).unwrap();
        let split = m.encode_videos(&p, &vids, 2).unwrap();
        assert_eq!(whole.frame_offsets, vec![0, 2, 5, 9]);
        assert_eq!(whole.frame_offsets, split.frame_offsets);
        for (a, b) in whole.event.data().iter().zip(split.event.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
