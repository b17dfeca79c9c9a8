//! Embedding-score filtering of synthetic pools: an alpha-weighted blend of
//! text-alignment and group-centroid similarity, keeping the top fraction of
//! each group.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroupKey, GroupedDataset};
use crate::embed::{cosine_similarity, group_centroid, Embedding, EmbeddingBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Weight of the text-alignment term; 1 - alpha goes to the centroid term.
    pub alpha: f64,
    /// Fraction of each group kept (rounded down, floor of 1).
    pub keep_fraction: f64,
    /// Severe-bias mode: real minority groups are too small to trust their
    /// centroids, so alpha is forced to 1.
    pub severe: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            alpha: 1.0,
            keep_fraction: 0.75,
            severe: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction {} not in (0, 1]",
                self.keep_fraction
            )));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.severe {
            1.0
        } else {
            self.alpha
        }
    }
}

/// Text prompt the label-alignment term scores against.
pub fn label_prompt(class_label: &str) -> String {
    format!("Photo of a {class_label}")
}

/// Similarity between an image embedding and the class-label text embedding.
pub fn label_score(
    embedder: &dyn EmbeddingBackend,
    image: &Embedding,
    class_label: &str,
) -> Result<f64> {
    let text = embedder.embed_text(&label_prompt(class_label))?;
    cosine_similarity(image, &text)
}

/// Similarity between an image embedding and its group's real-data centroid.
pub fn centroid_score(image: &Embedding, centroid: &Embedding) -> Result<f64> {
    cosine_similarity(image, centroid)
}

/// alpha * label + (1 - alpha) * centroid. The centroid term is only optional
/// when its weight is zero.
pub fn combined_score(alpha: f64, label: f64, centroid: Option<f64>) -> Result<f64> {
    if alpha >= 1.0 {
        return Ok(label);
    }
    let centroid = centroid.ok_or_else(|| {
        Error::Config(format!(
            "alpha {alpha} < 1 requires a group centroid; none available"
        ))
    })?;
    Ok(alpha * label + (1.0 - alpha) * centroid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredItem {
    pub id: String,
    pub score: f64,
}

/// Number of items kept from a group of `n`: floor of the fraction, at least 1.
pub fn keep_count(n: usize, keep_fraction: f64) -> usize {
    ((n as f64 * keep_fraction).floor() as usize).clamp(1, n)
}

/// Ids of the `keep` highest-scoring items; ties broken by ascending id so the
/// selection is deterministic.
pub fn select_top(scores: &[ScoredItem], keep: usize) -> Vec<String> {
    let mut sorted: Vec<&ScoredItem> = scores.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    sorted.iter().take(keep).map(|s| s.id.clone()).collect()
}

/// Per-group centroids of real-image embeddings.
pub fn real_group_centroids(
    real: &GroupedDataset,
    embeddings: &BTreeMap<String, Embedding>,
) -> Result<BTreeMap<GroupKey, Embedding>> {
    let mut out = BTreeMap::new();
    for group in real.group_sizes().keys() {
        let members: Vec<Embedding> = real
            .group_items(group)
            .map(|item| {
                embeddings
                    .get(&item.id)
                    .cloned()
                    .ok_or_else(|| Error::Dependency {
                        stage: "filter".into(),
                        detail: format!("missing embedding for {}", item.id),
                    })
            })
            .collect::<Result<_>>()?;
        out.insert(group.clone(), group_centroid(&members, group)?.centroid);
    }
    Ok(out)
}

/// Score every synthetic item and keep the top fraction of each group.
pub fn filter_dataset(
    cfg: &FilterConfig,
    synth: &GroupedDataset,
    embeddings: &BTreeMap<String, Embedding>,
    embedder: &dyn EmbeddingBackend,
    centroids: Option<&BTreeMap<GroupKey, Embedding>>,
) -> Result<GroupedDataset> {
    cfg.validate()?;
    let alpha = cfg.effective_alpha();
    let mut kept_ids: Vec<String> = Vec::new();
    for group in synth.group_sizes().keys() {
        let centroid = centroids.and_then(|c| c.get(group));
        let mut scores = Vec::new();
        for item in synth.group_items(group) {
            let emb = embeddings
                .get(&item.id)
                .ok_or_else(|| Error::Dependency {
                    stage: "filter".into(),
                    detail: format!("missing embedding for {}", item.id),
                })?;
            let label = label_score(embedder, emb, &item.class_label)?;
            let cent = centroid
                .map(|c| centroid_score(emb, c))
                .transpose()?;
            scores.push(ScoredItem {
                id: item.id.clone(),
                score: combined_score(alpha, label, cent)?,
            });
        }
        let keep = keep_count(scores.len(), cfg.keep_fraction);
        kept_ids.extend(select_top(&scores, keep));
    }
    subset_by_ids(synth, &kept_ids)
}

/// Baseline: keep a uniformly random subset of each group at the same rate as
/// the scored filter.
pub fn random_filter(
    synth: &GroupedDataset,
    keep_fraction: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction {keep_fraction} not in (0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x72616e64);
    let mut kept_ids = Vec::new();
    for group in synth.group_sizes().keys() {
        let ids: Vec<&str> = synth.group_items(group).map(|i| i.id.as_str()).collect();
        let keep = keep_count(ids.len(), keep_fraction);
        let mut chosen: Vec<&str> = index_sample(&mut rng, ids.len(), keep)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        chosen.sort_unstable();
        kept_ids.extend(chosen.into_iter().map(String::from));
    }
    subset_by_ids(synth, &kept_ids)
}

fn subset_by_ids(ds: &GroupedDataset, ids: &[String]) -> Result<GroupedDataset> {
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let items = ds
        .items()
        .iter()
        .filter(|i| wanted.contains(i.id.as_str()))
        .cloned()
        .collect();
    GroupedDataset::new(items, ds.alignment_map().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::synthetic_pool;
    use crate::data::{Alignment, Split};
    use crate::embed::ToyEmbedder;
    use crate::gen::{build_plan, run_generation, Fidelity, OracleBackend, SamplerParams};
    use crate::prompt::{DatasetId, Strategy};
    use crate::toy::{default_vocabulary, generate_shapeworld, ShapeWorldConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn scored(pairs: &[(&str, f64)]) -> Vec<ScoredItem> {
        pairs
            .iter()
            .map(|(id, s)| ScoredItem {
                id: id.to_string(),
                score: *s,
            })
            .collect()
    }

    #[test]
    fn keep_counts_floor_with_minimum_one() {
        assert_eq!(keep_count(100, 0.75), 75);
        assert_eq!(keep_count(10, 0.75), 7);
        assert_eq!(keep_count(1, 0.75), 1);
        assert_eq!(keep_count(3, 0.1), 1);
        assert_eq!(keep_count(4, 1.0), 4);
    }

    #[test]
    fn select_top_matches_brute_force_on_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..200 {
            let n = rng.gen_range(1..40);
            let scores: Vec<ScoredItem> = (0..n)
                .map(|i| ScoredItem {
                    // Duplicate scores are common: quantize to force ties.
                    id: format!("item-{trial}-{i:03}"),
                    score: (rng.gen_range(0..10) as f64) / 10.0,
                })
                .collect();
            let keep = rng.gen_range(1..=n);
            let got = select_top(&scores, keep);
            let mut expect: Vec<&ScoredItem> = scores.iter().collect();
            expect.sort_by(|a, b| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap()
                    .then_with(|| a.id.cmp(&b.id))
            });
            let expect: Vec<String> = expect.iter().take(keep).map(|s| s.id.clone()).collect();
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let scores = scored(&[("b", 0.5), ("a", 0.5), ("c", 0.9)]);
        assert_eq!(select_top(&scores, 2), vec!["c", "a"]);
    }

    #[test]
    fn severe_mode_forces_alpha_one() {
        let cfg = FilterConfig {
            alpha: 0.3,
            severe: true,
            ..Default::default()
        };
        assert_eq!(cfg.effective_alpha(), 1.0);
        // With alpha forced to 1 the missing centroid is not an error.
        assert_eq!(combined_score(cfg.effective_alpha(), 0.8, None).unwrap(), 0.8);
    }

    #[test]
    fn partial_alpha_without_centroid_is_config_error() {
        assert!(matches!(
            combined_score(0.5, 0.8, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn filter_keeps_exact_per_group_counts() {
        let ds = generate_shapeworld(&ShapeWorldConfig {
            n_train: 200,
            n_val: 0,
            n_test: 0,
            bias_ratio: 0.5,
            ..Default::default()
        })
        .unwrap()
        .filter_split(Split::Train)
        .unwrap();
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::DreamboothPerGroup,
            false,
            20,
            None,
            SamplerParams::default(),
        )
        .unwrap();
        let mut backend = OracleBackend::new(Fidelity::Fitted, 16);
        let synth = run_generation(&plan, &mut backend, &ds, None).unwrap();
        let embedder = ToyEmbedder::new(0, 16, 16 * 16 * 3).with_vocabulary(default_vocabulary(16));
        let embs: BTreeMap<String, Embedding> = synth
            .items()
            .iter()
            .chain(ds.items())
            .map(|i| {
                (
                    i.id.clone(),
                    crate::embed::EmbeddingBackend::embed_image(&embedder, &i.image().unwrap())
                        .unwrap(),
                )
            })
            .collect();
        let centroids = real_group_centroids(&ds, &embs).unwrap();
        let cfg = FilterConfig {
            alpha: 0.5,
            ..Default::default()
        };
        let filtered = filter_dataset(&cfg, &synth, &embs, &embedder, Some(&centroids)).unwrap();
        assert!(filtered.group_sizes().values().all(|&n| n == 15));
        // Every kept item scores at least as high as every dropped one.
        let alpha = cfg.effective_alpha();
        for group in synth.group_sizes().keys() {
            let score_of = |id: &str| {
                let item = synth.items().iter().find(|i| i.id == id).unwrap();
                let l = label_score(&embedder, &embs[id], &item.class_label).unwrap();
                let c = centroid_score(&embs[id], &centroids[group]).unwrap();
                combined_score(alpha, l, Some(c)).unwrap()
            };
            let kept: Vec<f64> = filtered.group_items(group).map(|i| score_of(&i.id)).collect();
            let kept_ids: std::collections::BTreeSet<&str> =
                filtered.group_items(group).map(|i| i.id.as_str()).collect();
            let dropped: Vec<f64> = synth
                .group_items(group)
                .filter(|i| !kept_ids.contains(i.id.as_str()))
                .map(|i| score_of(&i.id))
                .collect();
            let min_kept = kept.iter().cloned().fold(f64::INFINITY, f64::min);
            let max_dropped = dropped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(min_kept >= max_dropped - 1e-12);
        }
    }

    #[test]
    fn random_filter_is_deterministic_and_seed_sensitive() {
        let pool = synthetic_pool(&[
            ("square", "warm", Alignment::Aligned, 40),
            ("cross", "cool", Alignment::Aligned, 40),
        ]);
        let a = random_filter(&pool, 0.75, 1).unwrap();
        let b = random_filter(&pool, 0.75, 1).unwrap();
        let c = random_filter(&pool, 0.75, 2).unwrap();
        assert_eq!(a.items(), b.items());
        assert_ne!(a.items(), c.items());
        assert!(a.group_sizes().values().all(|&n| n == 30));
    }

    proptest! {
        #[test]
        fn combined_score_is_monotone_in_both_terms(
            alpha in 0.0f64..=1.0,
            l1 in -1.0f64..=1.0,
            l2 in -1.0f64..=1.0,
            c1 in -1.0f64..=1.0,
            c2 in -1.0f64..=1.0,
        ) {
            let (lo_l, hi_l) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let (lo_c, hi_c) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            let lo = combined_score(alpha, lo_l, Some(lo_c)).unwrap();
            let hi = combined_score(alpha, hi_l, Some(hi_c)).unwrap();
            prop_assert!(hi >= lo - 1e-12);
        }

        #[test]
        fn selection_within_a_group_ignores_other_groups(
            keep in 1usize..5,
            extra in 0usize..20,
        ) {
            // Adding items to one stratum must not change another stratum's
            // selection; strata are scored and cut independently.
            let base = scored(&[("a", 0.9), ("b", 0.1), ("c", 0.5), ("d", 0.7), ("e", 0.3)]);
            let chosen = select_top(&base, keep);
            let mut padded = base.clone();
            for i in 0..extra {
                padded.push(ScoredItem { id: format!("zz-{i}"), score: 2.0 });
            }
            // Same stratum, padded with higher scores: top-k changes, but the
            // relative order of the original ids is stable.
            let padded_choice = select_top(&padded, keep + extra);
            let originals: Vec<String> = padded_choice
                .into_iter()
                .filter(|id| !id.starts_with("zz-"))
                .collect();
            prop_assert_eq!(chosen, originals);
        }
    }
}
