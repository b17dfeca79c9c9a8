//! Generator abstraction, the four generation strategies as plan
//! configurations, the severe-bias transfer protocol, and a parametric oracle
//! generator serving as the desk-scale reference backend.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterAssignment;
use crate::data::{
    Alignment, DatasetItem, GroupKey, GroupedDataset, Origin, Provenance, Split,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::prompt::{render_prompts, DatasetId, PromptMode, RenderedPrompt, Strategy};
use crate::toy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub guidance_scale: f64,
    pub steps: u32,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            guidance_scale: 7.5,
            steps: 50,
            seed: 0,
        }
    }
}

/// Per-group (or per-cluster) generation budgets and the transfer map for
/// severe-bias mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub dataset: DatasetId,
    pub strategy: Strategy,
    /// M: images generated per group.
    pub per_group_budget: usize,
    /// M_cl = M / k_D, clustered strategy only.
    pub per_cluster_budget: Option<usize>,
    /// l (LoRA) or 100 (Dreambooth); None for vanilla.
    pub finetune_sample_budget: Option<usize>,
    /// k_D, clustered strategy only.
    pub cluster_counts: Option<usize>,
    /// conflicting target group -> aligned source group, severe mode only.
    pub transfer_map: BTreeMap<GroupKey, GroupKey>,
    pub sampler_params: SamplerParams,
}

impl GenerationPlan {
    pub fn severe(&self) -> bool {
        !self.transfer_map.is_empty()
    }
}

/// Backend capable of (optionally) fitting on group images and sampling from
/// a rendered prompt. `sample` must be deterministic under the params seed.
pub trait GeneratorBackend {
    /// Fit on a set of images described by a prompt; returns a handle usable
    /// in later `sample` calls.
    fn fit(&mut self, images: &[Image], prompt: &RenderedPrompt) -> Result<usize>;
    fn sample(
        &mut self,
        handle: Option<usize>,
        prompt: &str,
        negative: Option<&str>,
        n: usize,
        params: &SamplerParams,
    ) -> Result<Vec<Image>>;
    /// Non-fatal warnings accumulated so far (e.g. no-op fits).
    fn warnings(&self) -> &[String];
}

/// Build a generation plan from a (possibly biased) real training dataset.
///
/// `k_d` is required for the clustered strategy (normally from
/// [`crate::cluster::cluster_count_rule`] on the smallest group size).
pub fn build_plan(
    dataset: DatasetId,
    ds: &GroupedDataset,
    strategy: Strategy,
    severe: bool,
    m: usize,
    k_d: Option<usize>,
    sampler_params: SamplerParams,
) -> Result<GenerationPlan> {
    if m == 0 {
        return Err(Error::Config("per-group budget M must be positive".into()));
    }
    let sizes = ds.group_sizes();
    let (cluster_counts, per_cluster_budget) = if strategy == Strategy::ClusteredDreambooth {
        let k = k_d
            .ok_or_else(|| Error::Config("clustered strategy requires k_D".into()))?;
        if m % k != 0 {
            let lower = (m / k) * k;
            let upper = lower + k;
            let suggested = if m - lower <= upper - m && lower > 0 { lower } else { upper };
            return Err(Error::Divisibility { m, k, suggested });
        }
        (Some(k), Some(m / k))
    } else {
        (None, None)
    };
    let finetune_sample_budget = match strategy {
        Strategy::Vanilla => None,
        Strategy::LoraPerGroup => Some(
            sizes
                .values()
                .copied()
                .min()
                .ok_or_else(|| Error::Capacity("empty dataset".into()))?,
        ),
        Strategy::DreamboothPerGroup | Strategy::ClusteredDreambooth => Some(100),
    };
    let mut transfer_map = BTreeMap::new();
    if severe && strategy.is_finetuned() {
        for (group, alignment) in ds.alignment_map() {
            if *alignment != Alignment::Conflicting || !sizes.contains_key(group) {
                continue;
            }
            let sources: Vec<GroupKey> = ds
                .alignment_map()
                .iter()
                .filter(|(g, a)| {
                    **a == Alignment::Aligned
                        && g.class_label == group.class_label
                        && g.bias_label != group.bias_label
                        && sizes.contains_key(*g)
                })
                .map(|(g, _)| g.clone())
                .collect();
            match sources.as_slice() {
                [source] => {
                    transfer_map.insert(group.clone(), source.clone());
                }
                [] => {
                    return Err(Error::Config(format!(
                        "severe mode: no aligned source group for {group}"
                    )))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "severe mode: multiple aligned source groups for {group}"
                    )))
                }
            }
        }
    }
    Ok(GenerationPlan {
        dataset,
        strategy,
        per_group_budget: m,
        per_cluster_budget,
        finetune_sample_budget,
        cluster_counts,
        transfer_map,
        sampler_params,
    })
}

/// Execute a plan: exactly M synthetic items per group (M_cl per cluster),
/// tagged with full provenance.
pub fn run_generation(
    plan: &GenerationPlan,
    backend: &mut dyn GeneratorBackend,
    ds: &GroupedDataset,
    clusters: Option<&BTreeMap<GroupKey, ClusterAssignment>>,
) -> Result<GroupedDataset> {
    if plan.strategy == Strategy::ClusteredDreambooth && clusters.is_none() {
        return Err(Error::Config(
            "clustered strategy requires cluster assignments".into(),
        ));
    }
    let mut items: Vec<DatasetItem> = Vec::new();
    let mut completed: Vec<String> = Vec::new();
    let mut seed_counter = plan.sampler_params.seed;
    let groups: Vec<GroupKey> = ds.group_sizes().keys().cloned().collect();

    for group in &groups {
        let result = generate_group(plan, backend, ds, clusters, group, &mut seed_counter);
        match result {
            Ok(mut group_items) => {
                items.append(&mut group_items);
                completed.push(group.to_string());
            }
            Err(e) => {
                return Err(Error::PartialGeneration {
                    completed,
                    failed: group.to_string(),
                    detail: e.to_string(),
                })
            }
        }
    }
    GroupedDataset::new(items, ds.alignment_map().clone())
}

fn generate_group(
    plan: &GenerationPlan,
    backend: &mut dyn GeneratorBackend,
    ds: &GroupedDataset,
    clusters: Option<&BTreeMap<GroupKey, ClusterAssignment>>,
    group: &GroupKey,
    seed_counter: &mut u64,
) -> Result<Vec<DatasetItem>> {
    let transfer_source = plan.transfer_map.get(group);
    let mode = if transfer_source.is_some() {
        PromptMode::Transfer
    } else {
        PromptMode::Standard
    };
    let prompt = render_prompts(plan.dataset, plan.strategy, group, mode)?;
    // Images the generator learns from: the aligned source group in transfer
    // mode, the group itself otherwise.
    let fit_group = transfer_source.unwrap_or(group);

    let mut out = Vec::new();
    let emit = |images: Vec<Image>,
                    cluster_index: Option<usize>,
                    start_seed: u64,
                    out: &mut Vec<DatasetItem>| {
        for (i, img) in images.into_iter().enumerate() {
            let idx = out.len();
            out.push(DatasetItem {
                id: format!("syn-{}-{}-{}-{idx:05}", plan.strategy, group.class_label, group.bias_label),
                image_ref: img.to_inline_ref(),
                class_label: group.class_label.clone(),
                bias_label: group.bias_label.clone(),
                split: Split::Train,
                origin: Origin::Synthetic,
                provenance: Some(Provenance {
                    strategy: plan.strategy.to_string(),
                    source_group: Some(fit_group.clone()),
                    cluster_index,
                    prompt: prompt.positive.clone(),
                    negative_prompt: prompt.negative.clone(),
                    seed: start_seed + i as u64,
                }),
            });
        }
    };

    match plan.strategy {
        Strategy::Vanilla => {
            let start = *seed_counter;
            *seed_counter += plan.per_group_budget as u64;
            let params = SamplerParams {
                seed: start,
                ..plan.sampler_params
            };
            let images = backend.sample(
                None,
                &prompt.positive,
                prompt.negative.as_deref(),
                plan.per_group_budget,
                &params,
            )?;
            emit(images, None, start, &mut out);
        }
        Strategy::LoraPerGroup | Strategy::DreamboothPerGroup => {
            let budget = plan.finetune_sample_budget.unwrap_or(usize::MAX);
            let fit_images = finetune_subset(ds, fit_group, budget, plan.sampler_params.seed)?;
            let fit_prompt =
                render_prompts(plan.dataset, plan.strategy, fit_group, PromptMode::Standard)?;
            let handle = backend.fit(&fit_images, &fit_prompt)?;
            let start = *seed_counter;
            *seed_counter += plan.per_group_budget as u64;
            let params = SamplerParams {
                seed: start,
                ..plan.sampler_params
            };
            let images = backend.sample(
                Some(handle),
                &prompt.positive,
                prompt.negative.as_deref(),
                plan.per_group_budget,
                &params,
            )?;
            emit(images, None, start, &mut out);
        }
        Strategy::ClusteredDreambooth => {
            let assignment = clusters
                .and_then(|c| c.get(fit_group))
                .ok_or_else(|| Error::Config(format!("no clusters for group {fit_group}")))?;
            let m_cl_nominal = plan.per_cluster_budget.unwrap();
            // If a small group clustered below k_D, spread M over the actual
            // cluster count as evenly as possible.
            let k = assignment.k;
            let base = plan.per_group_budget / k;
            let remainder = plan.per_group_budget % k;
            for cluster in 0..k {
                let n = if k == plan.cluster_counts.unwrap() {
                    m_cl_nominal
                } else {
                    base + usize::from(cluster < remainder)
                };
                let fit_images: Vec<Image> = ds
                    .group_items(fit_group)
                    .filter(|item| assignment.labels.get(&item.id) == Some(&cluster))
                    .map(|item| item.image())
                    .collect::<Result<_>>()?;
                let fit_prompt =
                    render_prompts(plan.dataset, plan.strategy, fit_group, PromptMode::Standard)?;
                let handle = backend.fit(&fit_images, &fit_prompt)?;
                let start = *seed_counter;
                *seed_counter += n as u64;
                let params = SamplerParams {
                    seed: start,
                    ..plan.sampler_params
                };
                let images = backend.sample(
                    Some(handle),
                    &prompt.positive,
                    prompt.negative.as_deref(),
                    n,
                    &params,
                )?;
                emit(images, Some(cluster), start, &mut out);
            }
        }
    }
    Ok(out)
}

fn finetune_subset(
    ds: &GroupedDataset,
    group: &GroupKey,
    budget: usize,
    seed: u64,
) -> Result<Vec<Image>> {
    let indices = ds.group_indices(group);
    if indices.is_empty() {
        return Err(Error::Capacity(format!("group {group} has no images to fit on")));
    }
    let take = budget.min(indices.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x666974737562);
    let mut chosen: Vec<usize> = index_sample(&mut rng, indices.len(), take)
        .into_iter()
        .map(|i| indices[i])
        .collect();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| ds.items()[i].image())
        .collect()
}

// ---------------------------------------------------------------------------
// Oracle backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Ignores fit data; samples from a fixed prior that honors the prompt's
    /// class/bias words but with shifted style parameters (plays the role of
    /// vanilla diffusion's distribution mismatch).
    GlobalPrior,
    /// Estimates per-group Gaussian pixel parameters from the fit images
    /// (plays the role of the finetuned models).
    Fitted,
}

struct FittedParams {
    width: usize,
    height: usize,
    channels: usize,
    /// Per-pixel Gaussian parameters after aligning the fit images on their
    /// foreground centroid, so subject placement does not smear the template.
    mean: Vec<f32>,
    std: Vec<f32>,
    /// Channel-wise background estimate of the fitted images.
    background: Vec<f32>,
    /// Observed foreground displacement (from image center) of each fit
    /// image; sampling re-draws placements from this empirical set.
    shifts: Vec<(i32, i32)>,
}

/// Parametric pixel-model generator for the toy benchmark.
pub struct OracleBackend {
    mode: Fidelity,
    image_size: usize,
    fits: Vec<FittedParams>,
    warnings: Vec<String>,
}

impl OracleBackend {
    pub fn new(mode: Fidelity, image_size: usize) -> Self {
        OracleBackend {
            mode,
            image_size,
            fits: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn fitted_mean(&self, handle: usize) -> Option<&[f32]> {
        self.fits.get(handle).map(|f| f.mean.as_slice())
    }

    fn find_word<'a>(prompt: &str, words: &[&'a str]) -> Option<&'a str> {
        let lower = prompt.to_lowercase();
        words.iter().copied().find(|w| lower.contains(w))
    }

    fn sample_gaussian_image(
        width: usize,
        height: usize,
        channels: usize,
        mean: &[f32],
        std: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Image {
        let mut img = Image::new(width, height, channels);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            *p = (mean[i] + std[i] * z as f32).clamp(0.0, 1.0);
        }
        img
    }
}

impl GeneratorBackend for OracleBackend {
    fn fit(&mut self, images: &[Image], prompt: &RenderedPrompt) -> Result<usize> {
        if self.mode == Fidelity::GlobalPrior {
            self.warnings.push(format!(
                "fit ignored in global_prior mode (prompt `{}`)",
                prompt.positive
            ));
            self.fits.push(FittedParams {
                width: self.image_size,
                height: self.image_size,
                channels: 3,
                mean: vec![],
                std: vec![],
                background: vec![],
                shifts: vec![],
            });
            return Ok(self.fits.len() - 1);
        }
        let first = images
            .first()
            .ok_or_else(|| Error::Backend("fit called with no images".into()))?;
        let len = first.len();
        let (width, height, channels) = (first.width, first.height, first.channels);
        let n = images.len() as f32;
        let mut raw_mean = vec![0.0f32; len];
        for img in images {
            if img.len() != len {
                return Err(Error::Backend("inconsistent image shapes in fit".into()));
            }
            for (m, p) in raw_mean.iter_mut().zip(&img.pixels) {
                *m += p;
            }
        }
        for m in &mut raw_mean {
            *m /= n;
        }
        // Channel-wise median of the mean image; the background dominates the
        // area so this estimates the palette.
        let mut background = Vec::with_capacity(channels);
        for c in 0..channels {
            let mut vals: Vec<f32> = raw_mean.iter().skip(c).step_by(channels).copied().collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            background.push(vals[vals.len() / 2]);
        }
        // Locate each image's foreground as the centroid of pixels clearly
        // brighter than the background, then align everything on the image
        // center before estimating per-pixel statistics. Without this the
        // subject's placement jitter washes the template out.
        let cx0 = (width as f32 - 1.0) / 2.0;
        let cy0 = (height as f32 - 1.0) / 2.0;
        let shifts: Vec<(i32, i32)> = images
            .iter()
            .map(|img| {
                let (mut wx, mut wy, mut w) = (0.0f32, 0.0f32, 0.0f32);
                for y in 0..height {
                    for x in 0..width {
                        let r: f32 = (0..channels)
                            .map(|c| img.get(x, y, c) - background[c])
                            .sum::<f32>()
                            / channels as f32;
                        if r > 0.12 {
                            wx += r * x as f32;
                            wy += r * y as f32;
                            w += r;
                        }
                    }
                }
                if w > 0.0 {
                    ((wx / w - cx0).round() as i32, (wy / w - cy0).round() as i32)
                } else {
                    (0, 0)
                }
            })
            .collect();
        let clamp = |v: i32, hi: usize| (v.max(0) as usize).min(hi - 1);
        let mut mean = vec![0.0f32; len];
        for (img, (dx, dy)) in images.iter().zip(&shifts) {
            for y in 0..height {
                for x in 0..width {
                    let sx = clamp(x as i32 + dx, width);
                    let sy = clamp(y as i32 + dy, height);
                    for c in 0..channels {
                        mean[(y * width + x) * channels + c] += img.get(sx, sy, c);
                    }
                }
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f32; len];
        for (img, (dx, dy)) in images.iter().zip(&shifts) {
            for y in 0..height {
                for x in 0..width {
                    let sx = clamp(x as i32 + dx, width);
                    let sy = clamp(y as i32 + dy, height);
                    for c in 0..channels {
                        let i = (y * width + x) * channels + c;
                        let d = img.get(sx, sy, c) - mean[i];
                        var[i] += d * d;
                    }
                }
            }
        }
        let std: Vec<f32> = var.iter().map(|v| (v / n).sqrt()).collect();
        self.fits.push(FittedParams {
            width,
            height,
            channels,
            mean,
            std,
            background,
            shifts,
        });
        Ok(self.fits.len() - 1)
    }

    fn sample(
        &mut self,
        handle: Option<usize>,
        prompt: &str,
        _negative: Option<&str>,
        n: usize,
        params: &SamplerParams,
    ) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(i as u64));
            let img = match self.mode {
                Fidelity::Fitted => {
                    let handle = handle.ok_or_else(|| {
                        Error::Backend("fitted oracle requires a fit handle".into())
                    })?;
                    let fit = self
                        .fits
                        .get(handle)
                        .ok_or_else(|| Error::Backend(format!("unknown fit handle {handle}")))?;
                    if fit.mean.is_empty() {
                        return Err(Error::Backend("handle was fitted in global_prior mode".into()));
                    }
                    // Place the aligned template at a displacement drawn from
                    // the empirical placements seen during fit.
                    let (dx, dy) = fit.shifts[rng.gen_range(0..fit.shifts.len())];
                    let (w, h, ch) = (fit.width, fit.height, fit.channels);
                    let clamp = |v: i32, hi: usize| (v.max(0) as usize).min(hi - 1);
                    let mut mean = vec![0.0f32; fit.mean.len()];
                    let mut std = vec![0.0f32; fit.std.len()];
                    for y in 0..h {
                        for x in 0..w {
                            let sx = clamp(x as i32 - dx, w);
                            let sy = clamp(y as i32 - dy, h);
                            for c in 0..ch {
                                mean[(y * w + x) * ch + c] = fit.mean[(sy * w + sx) * ch + c];
                                std[(y * w + x) * ch + c] = fit.std[(sy * w + sx) * ch + c];
                            }
                        }
                    }
                    // Transfer: if the prompt names a different palette than
                    // the fitted background, shift toward it.
                    if let Some(bias) = Self::find_word(prompt, &toy::BIASES) {
                        let target = toy::palette(bias)?;
                        let drift: Vec<f32> = (0..ch)
                            .map(|c| target[c] - fit.background[c])
                            .collect();
                        if drift.iter().any(|d| d.abs() > 0.05) {
                            for (j, m) in mean.iter_mut().enumerate() {
                                *m += drift[j % ch];
                            }
                        }
                    }
                    Self::sample_gaussian_image(w, h, ch, &mean, &std, &mut rng)
                }
                Fidelity::GlobalPrior => {
                    let class = Self::find_word(prompt, &toy::CLASSES).ok_or_else(|| {
                        Error::Backend(format!("prompt `{prompt}` names no known class"))
                    })?;
                    // A prompt that pins no palette (e.g. the token-only
                    // finetune template) samples one at random: the prior
                    // has no group knowledge to fall back on.
                    let bias = Self::find_word(prompt, &toy::BIASES).unwrap_or_else(|| {
                        toy::BIASES[rng.gen_range(0..toy::BIASES.len())]
                    });
                    let size = self.image_size;
                    let bg = toy::palette(bias)?;
                    let off = (size - 8) / 2;
                    let mask = toy::shape_mask(class, size, off, off)?;
                    let mut mean = vec![0.0f32; size * size * 3];
                    for y in 0..size {
                        for x in 0..size {
                            let on_shape = mask[y * size + x];
                            let raw: Vec<f32> = (0..3)
                                .map(|c| bg[c] + if on_shape { 0.22 } else { 0.0 })
                                .collect();
                            let gray: f32 = raw.iter().sum::<f32>() / 3.0;
                            for c in 0..3 {
                                // Style shift: brightened and desaturated
                                // relative to the training distribution.
                                let v = 0.65 * raw[c] + 0.35 * gray + 0.12;
                                mean[(y * size + x) * 3 + c] = v;
                            }
                        }
                    }
                    let std = vec![0.15f32; mean.len()];
                    Self::sample_gaussian_image(size, size, 3, &mean, &std, &mut rng)
                }
            };
            out.push(img);
        }
        Ok(out)
    }

    fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

// ---------------------------------------------------------------------------
// Recorded diffusion adapter
// ---------------------------------------------------------------------------

/// Configuration of a real diffusion backend, recorded but never executed.
/// Kept so experiment configs round-trip even though diffusion weights are
/// out of scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionAdapterConfig {
    pub model: String,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub train_steps: u32,
    pub guidance_scale: f64,
    pub timesteps: u32,
}

impl DiffusionAdapterConfig {
    pub fn for_strategy(dataset: DatasetId, strategy: Strategy) -> Self {
        let timesteps = if dataset == DatasetId::Utkface && strategy == Strategy::ClusteredDreambooth
        {
            25
        } else {
            50
        };
        DiffusionAdapterConfig {
            model: "stable-diffusion-v1-4".into(),
            lora_rank: 16,
            lora_alpha: 16,
            train_steps: 200,
            guidance_scale: 7.5,
            timesteps,
        }
    }
}

/// No-op adapter around a recorded diffusion config.
pub struct RecordedBackend {
    pub config: DiffusionAdapterConfig,
    fits: Vec<RenderedPrompt>,
    warnings: Vec<String>,
}

impl RecordedBackend {
    pub fn new(config: DiffusionAdapterConfig) -> Self {
        RecordedBackend {
            config,
            fits: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn recorded_fits(&self) -> &[RenderedPrompt] {
        &self.fits
    }
}

impl GeneratorBackend for RecordedBackend {
    fn fit(&mut self, _images: &[Image], prompt: &RenderedPrompt) -> Result<usize> {
        self.fits.push(prompt.clone());
        Ok(self.fits.len() - 1)
    }

    fn sample(
        &mut self,
        _handle: Option<usize>,
        prompt: &str,
        _negative: Option<&str>,
        _n: usize,
        _params: &SamplerParams,
    ) -> Result<Vec<Image>> {
        Err(Error::Backend(format!(
            "recorded diffusion adapter cannot execute (prompt `{prompt}`); \
             use an oracle backend for desk-scale runs"
        )))
    }

    fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::kmeans_per_group;
    use crate::embed::{EmbeddingBackend, ToyEmbedder};
    use crate::toy::{generate_shapeworld, ShapeWorldConfig};

    fn toy_train(bias_ratio: f64) -> GroupedDataset {
        let cfg = ShapeWorldConfig {
            bias_ratio,
            n_train: 400,
            n_val: 0,
            n_test: 0,
            ..Default::default()
        };
        generate_shapeworld(&cfg)
            .unwrap()
            .filter_split(Split::Train)
            .unwrap()
    }

    #[test]
    fn clustered_budget_arithmetic() {
        let ds = toy_train(0.5);
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::ClusteredDreambooth,
            false,
            5000,
            Some(5),
            SamplerParams::default(),
        )
        .unwrap();
        assert_eq!(plan.per_cluster_budget, Some(1000));
        let err = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::ClusteredDreambooth,
            false,
            5001,
            Some(5),
            SamplerParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divisibility { suggested: 5000, .. }));
    }

    #[test]
    fn lora_budget_is_min_group_size() {
        let ds = toy_train(0.9);
        // 400 train items, 2 classes, ratio 0.9 -> groups {180, 20} per class.
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::LoraPerGroup,
            false,
            100,
            None,
            SamplerParams::default(),
        )
        .unwrap();
        assert_eq!(plan.finetune_sample_budget, Some(20));
    }

    #[test]
    fn severe_transfer_map_pairs_conflicting_with_aligned() {
        let ds = toy_train(0.9);
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::DreamboothPerGroup,
            true,
            50,
            None,
            SamplerParams::default(),
        )
        .unwrap();
        assert_eq!(
            plan.transfer_map[&GroupKey::new("square", "cool")],
            GroupKey::new("square", "warm")
        );
        assert_eq!(
            plan.transfer_map[&GroupKey::new("cross", "warm")],
            GroupKey::new("cross", "cool")
        );
        assert_eq!(plan.transfer_map.len(), 2);
    }

    #[test]
    fn run_generation_honors_budgets_and_provenance() {
        let ds = toy_train(0.5);
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::DreamboothPerGroup,
            false,
            40,
            None,
            SamplerParams::default(),
        )
        .unwrap();
        let mut backend = OracleBackend::new(Fidelity::Fitted, 16);
        let synth = run_generation(&plan, &mut backend, &ds, None).unwrap();
        assert_eq!(synth.len(), 160);
        assert!(synth.group_sizes().values().all(|&n| n == 40));
        for item in synth.items() {
            assert_eq!(item.origin, Origin::Synthetic);
            let prov = item.provenance.as_ref().unwrap();
            assert_eq!(prov.strategy, "dreambooth_per_group");
            assert!(prov.source_group.is_some());
        }
    }

    #[test]
    fn clustered_generation_records_cluster_indices() {
        let ds = toy_train(0.5);
        let embedder = ToyEmbedder::new(0, 16, 16 * 16 * 3)
            .with_vocabulary(crate::toy::default_vocabulary(16));
        let embs: BTreeMap<String, crate::embed::Embedding> = ds
            .items()
            .iter()
            .map(|i| (i.id.clone(), embedder.embed_image(&i.image().unwrap()).unwrap()))
            .collect();
        let clusters = kmeans_per_group(&ds, &embs, 2, 0, 50).unwrap();
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::ClusteredDreambooth,
            false,
            40,
            Some(2),
            SamplerParams::default(),
        )
        .unwrap();
        let mut backend = OracleBackend::new(Fidelity::Fitted, 16);
        let synth = run_generation(&plan, &mut backend, &ds, Some(&clusters)).unwrap();
        assert!(synth.group_sizes().values().all(|&n| n == 40));
        for group in synth.group_sizes().keys() {
            let mut per_cluster: BTreeMap<usize, usize> = BTreeMap::new();
            for item in synth.group_items(group) {
                let c = item.provenance.as_ref().unwrap().cluster_index.unwrap();
                *per_cluster.entry(c).or_insert(0) += 1;
            }
            assert_eq!(per_cluster.len(), 2);
            assert!(per_cluster.values().all(|&n| n == 20));
        }
    }

    #[test]
    fn fitted_sample_mean_matches_fitted_parameters() {
        let ds = toy_train(0.5);
        let group = GroupKey::new("square", "warm");
        let images: Vec<Image> = ds.group_items(&group).map(|i| i.image().unwrap()).collect();
        let mut backend = OracleBackend::new(Fidelity::Fitted, 16);
        let prompt = render_prompts(
            DatasetId::Shapes,
            Strategy::DreamboothPerGroup,
            &group,
            PromptMode::Standard,
        )
        .unwrap();
        let handle = backend.fit(&images, &prompt).unwrap();
        let n = 500;
        let samples = backend
            .sample(Some(handle), &prompt.positive, None, n, &SamplerParams::default())
            .unwrap();
        let fitted_mean: Vec<f32> = backend.fitted_mean(handle).unwrap().to_vec();
        let len = fitted_mean.len();
        let mut sample_mean = vec![0.0f64; len];
        for img in &samples {
            for (s, p) in sample_mean.iter_mut().zip(&img.pixels) {
                *s += *p as f64;
            }
        }
        for s in &mut sample_mean {
            *s /= n as f64;
        }
        // Aggregate over pixels: overall means must agree within 3 sigma/sqrt(n)
        // of the average pixel noise (clamping biases individual pixels a bit).
        let fit_avg: f64 = fitted_mean.iter().map(|v| *v as f64).sum::<f64>() / len as f64;
        let sample_avg: f64 = sample_mean.iter().sum::<f64>() / len as f64;
        assert!(
            (fit_avg - sample_avg).abs() < 3.0 * 0.1 / (n as f64).sqrt() + 0.01,
            "fit {fit_avg} vs sample {sample_avg}"
        );
    }

    #[test]
    fn same_seed_gives_identical_batches() {
        let mut backend = OracleBackend::new(Fidelity::GlobalPrior, 16);
        let params = SamplerParams {
            seed: 42,
            ..Default::default()
        };
        let a = backend
            .sample(None, "photo of a square on a warm background.", None, 5, &params)
            .unwrap();
        let b = backend
            .sample(None, "photo of a square on a warm background.", None, 5, &params)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn global_prior_honors_prompt_class() {
        let mut backend = OracleBackend::new(Fidelity::GlobalPrior, 16);
        let images = backend
            .sample(
                None,
                "photo of a square on a warm background.",
                None,
                20,
                &SamplerParams::default(),
            )
            .unwrap();
        let mask = toy::shape_mask("square", 16, 4, 4).unwrap();
        for img in &images {
            let mut on = 0.0f64;
            let mut on_n = 0usize;
            let mut off = 0.0f64;
            let mut off_n = 0usize;
            for y in 0..16 {
                for x in 0..16 {
                    let v = (0..3).map(|c| img.get(x, y, c) as f64).sum::<f64>() / 3.0;
                    if mask[y * 16 + x] {
                        on += v;
                        on_n += 1;
                    } else {
                        off += v;
                        off_n += 1;
                    }
                }
            }
            assert!(
                on / on_n as f64 > off / off_n as f64 + 0.05,
                "square pattern not visible"
            );
        }
    }

    #[test]
    fn global_prior_fit_is_noop_with_warning() {
        let mut backend = OracleBackend::new(Fidelity::GlobalPrior, 16);
        let prompt = RenderedPrompt {
            positive: "photo of a square on a warm background.".into(),
            negative: None,
        };
        backend.fit(&[], &prompt).unwrap();
        assert_eq!(backend.warnings().len(), 1);
    }

    #[test]
    fn recorded_backend_round_trips_config_and_refuses_to_sample() {
        let config =
            DiffusionAdapterConfig::for_strategy(DatasetId::Utkface, Strategy::ClusteredDreambooth);
        assert_eq!(config.timesteps, 25);
        let json = serde_json::to_string(&config).unwrap();
        let back: DiffusionAdapterConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(config, back);
        let mut backend = RecordedBackend::new(config);
        assert!(matches!(
            backend.sample(None, "p", None, 1, &SamplerParams::default()),
            Err(Error::Backend(_))
        ));
    }

    #[test]
    fn backend_failure_reports_partial_progress() {
        let ds = toy_train(0.5);
        let plan = build_plan(
            DatasetId::Shapes,
            &ds,
            Strategy::Vanilla,
            false,
            10,
            None,
            SamplerParams::default(),
        )
        .unwrap();
        let mut backend = RecordedBackend::new(DiffusionAdapterConfig::for_strategy(
            DatasetId::Shapes,
            Strategy::Vanilla,
        ));
        let err = run_generation(&plan, &mut backend, &ds, None).unwrap_err();
        match err {
            Error::PartialGeneration { completed, .. } => assert!(completed.is_empty()),
            other => panic!("expected partial-generation error, got {other}"),
        }
    }
}
