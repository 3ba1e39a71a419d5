//! Binary selection benchmark: for each test video, one ground-truth caption
//! and one perturbed negative per applicable perturbation kind.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::perturb::{perturb_plan, PerturbKind, PerturbOutcome};
use super::world::SyntheticDataset;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub video_id: String,
    pub kind: PerturbKind,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryBenchmark {
    pub seed: u64,
    pub triplets: Vec<Triplet>,
    /// Triplets per kind; kinds with no applicable caption appear with 0.
    pub counts: BTreeMap<PerturbKind, usize>,
}

pub fn build_binary_benchmark(dataset: &SyntheticDataset, seed: u64) -> BinaryBenchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<PerturbKind, usize> =
        PerturbKind::ALL.iter().map(|&k| (k, 0)).collect();
    let mut triplets = Vec::new();
    for vid in &dataset.splits.test {
        let caps: Vec<_> = dataset.captions_of(vid).collect();
        let Some(pos) = caps.choose(&mut rng) else {
            continue;
        };
        for kind in PerturbKind::ALL {
            if let PerturbOutcome::Applied(p) =
                perturb_plan(&pos.plan, &dataset.grammar, kind, &mut rng)
            {
                debug_assert_ne!(p.sentence, pos.sentence);
                *counts.get_mut(&kind).expect("all kinds present") += 1;
                triplets.push(Triplet {
                    video_id: vid.clone(),
                    kind,
                    positive: pos.sentence.clone(),
                    negative: p.sentence,
                });
            }
        }
    }
    BinaryBenchmark {
        seed,
        triplets,
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::world::{generate_world, WorldConfig};

    #[test]
    fn benchmark_is_seed_stable_and_negatives_differ() {
        let d = generate_world(&WorldConfig {
            n_videos: 48,
            n_val: 4,
            n_test: 24,
            ..Default::default()
        })
        .unwrap();
        let a = build_binary_benchmark(&d, 7);
        assert_eq!(a, build_binary_benchmark(&d, 7));
        assert!(a.triplets.iter().all(|t| t.positive != t.negative));
        assert_eq!(a.counts.values().sum::<usize>(), a.triplets.len());
        assert!(a.counts[&PerturbKind::ReplaceActions] == 24);
    }
}
