//! Video encoder: three linear projections of the frame features, one per
//! level, and attention pooling of the event-level frames.
//!
//! Videos of a batch are stacked frame by frame; `frame_offsets[v]..[v+1]`
//! indexes the rows of video `v`.

mod features;

pub use features::{
    decode_hgrf, decode_hgrf_header, encode_hgrf, read_hgrf, read_manifest, write_hgrf,
    write_manifest, FeatureError, ManifestEntry, HGRF_MAGIC, HGRF_VERSION,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform_init, AutodiffError, Graph, ParameterStore, Real, Tensor, Var};

pub const P_EVENT: &str = "video.w_event";
pub const P_ACTION: &str = "video.w_action";
pub const P_ENTITY: &str = "video.w_entity";
pub const P_SHARED: &str = "video.w_shared";
pub const P_EVENT_ATTN: &str = "video.event_attn.w";

#[derive(Debug, thiserror::Error)]
pub enum VideoError {
    #[error("video `{video}`: expected feature width D_f={expected}, found {actual}")]
    Width {
        video: String,
        expected: usize,
        actual: usize,
    },
    #[error("video `{video}` has no frames")]
    NoFrames { video: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Frame features of one video. `frames` is `[M × D_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub frames: Tensor<f32>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEncoderConfig {
    pub feature_dim: usize,
    pub joint_dim: usize,
    pub max_frames: usize,
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: VideoEncoderConfig,
    /// When false one projection is shared by all three levels.
    pub hierarchical: bool,
}

#[derive(Clone, Debug)]
pub struct VideoBatch {
    /// `[B × D]`.
    pub event: Var,
    /// `[ΣM × D]` action-level frame embeddings.
    pub actions: Var,
    /// `[ΣM × D]` entity-level frame embeddings.
    pub entities: Var,
    pub frame_offsets: Vec<usize>,
    /// `[B × ΣM]`, zero outside each video's own frames.
    pub alpha: Var,
}

/// `max_frames` uniformly spaced frame indices (segment centres) when `m`
/// exceeds it; otherwise every frame.
pub fn subsample_indices(m: usize, max_frames: usize) -> Vec<usize> {
    if m <= max_frames || max_frames == 0 {
        return (0..m).collect();
    }
    (0..max_frames)
        .map(|k| (2 * k + 1) * m / (2 * max_frames))
        .collect()
}

impl VideoEncoder {
    pub fn new(cfg: VideoEncoderConfig) -> Self {
        VideoEncoder {
            cfg,
            hierarchical: true,
        }
    }

    fn projection_names(&self) -> [&'static str; 3] {
        if self.hierarchical {
            [P_EVENT, P_ACTION, P_ENTITY]
        } else {
            [P_SHARED; 3]
        }
    }

    pub fn init_params<T: Real>(
        &self,
        store: &mut ParameterStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), VideoError> {
        let (f, d) = (self.cfg.feature_dim, self.cfg.joint_dim);
        let names = self.projection_names();
        for name in if self.hierarchical {
            &names[..]
        } else {
            &names[..1]
        } {
            store.insert(*name, uniform_init(rng, vec![f, d], f))?;
        }
        store.insert(P_EVENT_ATTN, uniform_init(rng, vec![d, 1], d))?;
        Ok(())
    }

    /// Checks the width and applies frame subsampling.
    pub fn prepare<T: Real>(
        &self,
        video: &str,
        frames: &Tensor<f32>,
    ) -> Result<Tensor<T>, VideoError> {
        let (m, width) = frames.dims2().unwrap_or((0, 0));
        if width != self.cfg.feature_dim {
            return Err(VideoError::Width {
                video: video.into(),
                expected: self.cfg.feature_dim,
                actual: width,
            });
        }
        if m == 0 {
            return Err(VideoError::NoFrames {
                video: video.into(),
            });
        }
        let idx = subsample_indices(m, self.cfg.max_frames);
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in &idx {
            data.extend(
                frames
                    .row_slice(i)
                    .iter()
                    .map(|&x| T::from_f64_lossy(x as f64)),
            );
        }
        Ok(Tensor::new(vec![idx.len(), width], data))
    }

    /// `v_x = f·W^v_x` for the event, action and entity levels.
    pub fn project_levels<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        frames: Var,
    ) -> Result<[Var; 3], VideoError> {
        let [ne, na, no] = self.projection_names();
        let we = g.param(ne)?;
        let e = g.matmul(frames, we)?;
        if !self.hierarchical {
            return Ok([e, e, e]);
        }
        let wa = g.param(na)?;
        let wo = g.param(no)?;
        Ok([e, g.matmul(frames, wa)?, g.matmul(frames, wo)?])
    }

    /// Softmax attention over each video's event-level frames. Returns
    /// `(v_e [B × D], α [B × ΣM])`.
    pub fn event_pool<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        event_frames: Var,
        offsets: &[usize],
    ) -> Result<(Var, Var), VideoError> {
        let b = offsets.len() - 1;
        let total = offsets[b];
        let w = g.param(P_EVENT_ATTN)?;
        let scores = g.matmul(event_frames, w)?;
        let row = g.transpose(scores)?;
        let ones = g.constant(Tensor::filled(vec![b, 1], T::one()));
        let tiled = g.matmul(ones, row)?;
        let mut mask = vec![false; b * total];
        for v in 0..b {
            mask[v * total + offsets[v]..v * total + offsets[v + 1]].fill(true);
        }
        let alpha = g.masked_softmax(tiled, &mask)?;
        Ok((g.matmul(alpha, event_frames)?, alpha))
    }

    /// Encodes prepared frame matrices (see [`VideoEncoder::prepare`]).
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        videos: Vec<Tensor<T>>,
    ) -> Result<VideoBatch, VideoError> {
        if videos.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "video encode",
                msg: "empty batch".into(),
            }
            .into());
        }
        let width = self.cfg.feature_dim;
        let mut frame_offsets = vec![0];
        let mut data = Vec::new();
        for v in videos {
            frame_offsets.push(frame_offsets.last().unwrap() + v.rows());
            data.extend(v.into_data());
        }
        let total = *frame_offsets.last().unwrap();
        let frames = g.constant(Tensor::new(vec![total, width], data));
        let [e, a, o] = self.project_levels(g, frames)?;
        let (event, alpha) = self.event_pool(g, e, &frame_offsets)?;
        Ok(VideoBatch {
            event,
            actions: a,
            entities: o,
            frame_offsets,
            alpha,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn enc(hier: bool) -> (VideoEncoder, ParameterStore<f64>) {
        let mut e = VideoEncoder::new(VideoEncoderConfig {
            feature_dim: 4,
            joint_dim: 3,
            max_frames: 32,
        });
        e.hierarchical = hier;
        let mut s = ParameterStore::new(0);
        e.init_params(&mut s, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        (e, s)
    }

    #[test]
    fn subsampling_is_uniform() {
        assert_eq!(subsample_indices(5, 32), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample_indices(8, 4), vec![1, 3, 5, 7]);
        assert_eq!(subsample_indices(100, 32).len(), 32);
    }

    #[test]
    fn width_mismatch_names_both_widths() {
        let (e, _) = enc(true);
        let err = e
            .prepare::<f64>("v7", &Tensor::zeros(vec![2, 5]))
            .unwrap_err();
        assert_eq!(
            err.to_string(),
            "video `v7`: expected feature width D_f=4, found 5"
        );
    }

    #[test]
    fn zero_frame_and_single_frame() {
        let (e, s) = enc(true);
        let mut g = Graph::with_params(&s);
        let b = e.encode(&mut g, vec![Tensor::zeros(vec![1, 4])]).unwrap();
        for v in [b.event, b.actions, b.entities] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
        let f = Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]);
        let mut g = Graph::with_params(&s);
        let b = e.encode(&mut g, vec![f]).unwrap();
        let ev = g.value(b.event).data().to_vec();
        let fr = g.value(b.actions).data().to_vec();
        let we = g.value(b.event);
        assert_eq!(we.shape(), &[1, 3]);
        assert_eq!(g.value(b.alpha).data(), &[1.0]);
        assert_ne!(ev, fr);
    }

    #[test]
    fn shared_projection_ablation() {
        let (e, s) = enc(false);
        assert!(s.contains(P_SHARED) && !s.contains(P_ACTION));
        let mut g = Graph::with_params(&s);
        let b = e
            .encode(
                &mut g,
                vec![Tensor::from_f64(
                    vec![2, 4],
                    &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5],
                )],
            )
            .unwrap();
        assert_eq!(g.value(b.actions), g.value(b.entities));
    }

    #[test]
    fn attention_example_weights() {
        let (e, mut s) = enc(true);
        // Event projection maps frame k to a row whose score is its first coordinate.
        let mut w = vec![0.0; 12];
        w[0] = 1.0;
        s.set(P_EVENT, Tensor::new(vec![4, 3], w)).unwrap();
        s.set(P_EVENT_ATTN, Tensor::new(vec![3, 1], vec![1.0, 0.0, 0.0]))
            .unwrap();
        let f = Tensor::from_f64(vec![2, 4], &[0.0, 0.0, 0.0, 0.0, 3f64.ln(), 0.0, 0.0, 0.0]);
        let mut g = Graph::with_params(&s);
        let b = e.encode(&mut g, vec![f]).unwrap();
        let a = g.value(b.alpha).data();
        assert!((a[0] - 0.25).abs() < 1e-15 && (a[1] - 0.75).abs() < 1e-15);
    }
}
