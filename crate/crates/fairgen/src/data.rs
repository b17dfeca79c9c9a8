//! Group-structured dataset model: manifest I/O, bias-ratio split
//! construction, and balanced batch samplers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split tag `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl FromStr for Origin {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(Error::Parse(format!("unknown origin tag `{other}`"))),
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Real => write!(f, "real"),
            Origin::Synthetic => write!(f, "synthetic"),
        }
    }
}

/// The joint cell g = (y, a) of a class label and a bias label.
/// Serializes as the `class/bias` string so it can key JSON maps.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub class_label: String,
    pub bias_label: String,
}

impl Serialize for GroupKey {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for GroupKey {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let (class, bias) = s
            .split_once('/')
            .ok_or_else(|| serde::de::Error::custom(format!("group `{s}` is not class/bias")))?;
        Ok(GroupKey::new(class, bias))
    }
}

impl GroupKey {
    pub fn new(class_label: impl Into<String>, bias_label: impl Into<String>) -> Self {
        GroupKey {
            class_label: class_label.into(),
            bias_label: bias_label.into(),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.class_label, self.bias_label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Aligned,
    Conflicting,
}

/// Generation provenance carried by synthetic items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: String,
    pub source_group: Option<GroupKey>,
    pub cluster_index: Option<usize>,
    pub prompt: String,
    pub negative_prompt: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: String,
    /// File path or inline payload (see [`Image::to_inline_ref`]).
    pub image_ref: String,
    pub class_label: String,
    pub bias_label: String,
    pub split: Split,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl DatasetItem {
    pub fn group(&self) -> GroupKey {
        GroupKey::new(self.class_label.clone(), self.bias_label.clone())
    }

    /// Decode the item's image. Only inline payloads are supported; the toy
    /// benchmark never references external files.
    pub fn image(&self) -> Result<Image> {
        if self.image_ref.starts_with("inline:") {
            Image::from_inline_ref(&self.image_ref)
        } else {
            Err(Error::Parse(format!(
                "item `{}` references external image `{}`; only inline payloads are loadable",
                self.id, self.image_ref
            )))
        }
    }
}

/// A dataset indexed by group g = (y, a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    items: Vec<DatasetItem>,
    classes: BTreeSet<String>,
    biases: BTreeSet<String>,
    alignment_map: BTreeMap<GroupKey, Alignment>,
    #[serde(skip)]
    index: BTreeMap<GroupKey, Vec<usize>>,
}

impl GroupedDataset {
    /// Build a dataset, validating id uniqueness and alignment coverage.
    pub fn new(
        items: Vec<DatasetItem>,
        alignment_map: BTreeMap<GroupKey, Alignment>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for item in &items {
            if !seen.insert(item.id.clone()) {
                return Err(Error::Integrity(format!("duplicate item id `{}`", item.id)));
            }
        }
        let classes: BTreeSet<String> = items.iter().map(|i| i.class_label.clone()).collect();
        let biases: BTreeSet<String> = items.iter().map(|i| i.bias_label.clone()).collect();
        let mut ds = GroupedDataset {
            items,
            classes,
            biases,
            alignment_map,
            index: BTreeMap::new(),
        };
        ds.rebuild_index();
        for group in ds.index.keys() {
            if !ds.alignment_map.contains_key(group) {
                return Err(Error::Integrity(format!(
                    "alignment map does not cover present group {group}"
                )));
            }
        }
        Ok(ds)
    }

    /// Build a dataset deriving alignment per class by majority group size on
    /// the train split (ties broken toward the lexicographically first bias).
    pub fn with_majority_alignment(items: Vec<DatasetItem>) -> Result<Self> {
        let alignment = derive_majority_alignment(&items);
        GroupedDataset::new(items, alignment)
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        for (i, item) in self.items.iter().enumerate() {
            self.index.entry(item.group()).or_default().push(i);
        }
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> &BTreeSet<String> {
        &self.classes
    }

    pub fn biases(&self) -> &BTreeSet<String> {
        &self.biases
    }

    pub fn alignment_map(&self) -> &BTreeMap<GroupKey, Alignment> {
        &self.alignment_map
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupKey> {
        self.index.keys()
    }

    pub fn group_sizes(&self) -> BTreeMap<GroupKey, usize> {
        self.index
            .iter()
            .map(|(g, idx)| (g.clone(), idx.len()))
            .collect()
    }

    pub fn smallest_group_size(&self) -> Option<usize> {
        self.index.values().map(Vec::len).min()
    }

    /// Item indices belonging to a group.
    pub fn group_indices(&self, group: &GroupKey) -> &[usize] {
        self.index.get(group).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn group_items(&self, group: &GroupKey) -> impl Iterator<Item = &DatasetItem> {
        self.group_indices(group).iter().map(|&i| &self.items[i])
    }

    /// Restrict to one split, keeping the alignment map entries for present groups.
    pub fn filter_split(&self, split: Split) -> Result<GroupedDataset> {
        let items: Vec<DatasetItem> = self
            .items
            .iter()
            .filter(|i| i.split == split)
            .cloned()
            .collect();
        let groups: BTreeSet<GroupKey> = items.iter().map(|i| i.group()).collect();
        let alignment = self
            .alignment_map
            .iter()
            .filter(|(g, _)| groups.contains(*g))
            .map(|(g, a)| (g.clone(), *a))
            .collect();
        GroupedDataset::new(items, alignment)
    }

    /// Replace the alignment map (must still cover present groups).
    pub fn set_alignment(&mut self, alignment: BTreeMap<GroupKey, Alignment>) -> Result<()> {
        for group in self.index.keys() {
            if !alignment.contains_key(group) {
                return Err(Error::Integrity(format!(
                    "alignment map does not cover present group {group}"
                )));
            }
        }
        self.alignment_map = alignment;
        Ok(())
    }

    /// Group-balanced subsample sized to the smallest group, used by the
    /// LLR_b / FT_b finetuning variants.
    pub fn balanced_subsample(&self, seed: u64) -> Result<GroupedDataset> {
        let smallest = self
            .smallest_group_size()
            .ok_or_else(|| Error::Capacity("cannot balance an empty dataset".into()))?;
        if smallest == 0 {
            return Err(Error::Capacity("empty group in balanced subsample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for indices in self.index.values() {
            let chosen = index_sample(&mut rng, indices.len(), smallest);
            let mut chosen: Vec<usize> = chosen.into_iter().map(|i| indices[i]).collect();
            chosen.sort_unstable();
            keep.extend(chosen);
        }
        keep.sort_unstable();
        let items = keep.into_iter().map(|i| self.items[i].clone()).collect();
        GroupedDataset::new(items, self.alignment_map.clone())
    }
}

/// Per-class majority alignment: the largest group of each class is aligned.
pub fn derive_majority_alignment(items: &[DatasetItem]) -> BTreeMap<GroupKey, Alignment> {
    let mut sizes: BTreeMap<GroupKey, usize> = BTreeMap::new();
    let reference: Vec<&DatasetItem> = {
        let train: Vec<&DatasetItem> = items.iter().filter(|i| i.split == Split::Train).collect();
        if train.is_empty() {
            items.iter().collect()
        } else {
            train
        }
    };
    for item in &reference {
        *sizes.entry(item.group()).or_insert(0) += 1;
    }
    let mut by_class: BTreeMap<String, Vec<(GroupKey, usize)>> = BTreeMap::new();
    for (g, n) in &sizes {
        by_class
            .entry(g.class_label.clone())
            .or_default()
            .push((g.clone(), *n));
    }
    let mut alignment = BTreeMap::new();
    for groups in by_class.values() {
        let aligned = groups
            .iter()
            .max_by_key(|(g, n)| (*n, std::cmp::Reverse(g.bias_label.clone())))
            .map(|(g, _)| g.clone());
        for (g, _) in groups {
            let a = if Some(g) == aligned.as_ref() {
                Alignment::Aligned
            } else {
                Alignment::Conflicting
            };
            alignment.insert(g.clone(), a);
        }
    }
    // Cover groups present outside the reference split too.
    for item in items {
        alignment.entry(item.group()).or_insert(Alignment::Conflicting);
    }
    alignment
}

// ---------------------------------------------------------------------------
// Manifest I/O
// ---------------------------------------------------------------------------

/// Column mapping for delimited manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSchema {
    pub id: String,
    pub image_ref: String,
    pub class_label: String,
    pub bias_label: String,
    pub split: String,
    pub origin: String,
}

impl Default for ManifestSchema {
    fn default() -> Self {
        ManifestSchema {
            id: "id".into(),
            image_ref: "image_ref".into(),
            class_label: "class_label".into(),
            bias_label: "bias_label".into(),
            split: "split".into(),
            origin: "origin".into(),
        }
    }
}

const PROVENANCE_COLUMNS: [&str; 6] = [
    "strategy",
    "source_group",
    "cluster_index",
    "prompt",
    "negative_prompt",
    "seed",
];

/// Load a CSV or JSON-lines manifest (`.jsonl` / `.ndjson` use JSON-lines).
/// Row order is preserved; alignment is derived by per-class majority.
pub fn load_manifest(path: &Path, schema: &ManifestSchema) -> Result<GroupedDataset> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let items = if ext == "jsonl" || ext == "ndjson" {
        load_jsonl(path)?
    } else {
        load_csv(path, schema)?
    };
    GroupedDataset::with_majority_alignment(items)
}

fn load_jsonl(path: &Path) -> Result<Vec<DatasetItem>> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str::<DatasetItem>(line)?);
    }
    Ok(items)
}

fn load_csv(path: &Path, schema: &ManifestSchema) -> Result<Vec<DatasetItem>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let id_c = col(&schema.id)?;
    let img_c = col(&schema.image_ref)?;
    let cls_c = col(&schema.class_label)?;
    let bias_c = col(&schema.bias_label)?;
    let split_c = col(&schema.split)?;
    let origin_c = col(&schema.origin)?;
    let prov_cols: Option<[usize; 6]> = PROVENANCE_COLUMNS
        .iter()
        .map(|name| headers.iter().position(|h| h == *name))
        .collect::<Option<Vec<usize>>>()
        .map(|v| v.try_into().unwrap());

    let mut items = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").to_string();
        let provenance = match &prov_cols {
            Some(cols) if !field(cols[0]).is_empty() => Some(Provenance {
                strategy: field(cols[0]),
                source_group: parse_group_opt(&field(cols[1]))?,
                cluster_index: parse_opt_usize(&field(cols[2]))?,
                prompt: field(cols[3]),
                negative_prompt: {
                    let s = field(cols[4]);
                    if s.is_empty() {
                        None
                    } else {
                        Some(s)
                    }
                },
                seed: field(cols[5])
                    .parse()
                    .map_err(|e| Error::Parse(format!("bad provenance seed: {e}")))?,
            }),
            _ => None,
        };
        items.push(DatasetItem {
            id: field(id_c),
            image_ref: field(img_c),
            class_label: field(cls_c),
            bias_label: field(bias_c),
            split: field(split_c).parse()?,
            origin: field(origin_c).parse()?,
            provenance,
        });
    }
    Ok(items)
}

fn parse_group_opt(s: &str) -> Result<Option<GroupKey>> {
    if s.is_empty() {
        return Ok(None);
    }
    let (class, bias) = s
        .split_once('/')
        .ok_or_else(|| Error::Parse(format!("bad group key `{s}`")))?;
    Ok(Some(GroupKey::new(class, bias)))
}

fn parse_opt_usize(s: &str) -> Result<Option<usize>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|e| Error::Parse(format!("bad cluster index `{s}`: {e}")))
}

/// Save a dataset as a CSV manifest with canonical columns. Provenance
/// columns are emitted when any item carries provenance.
pub fn save_manifest(ds: &GroupedDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let with_provenance = ds.items().iter().any(|i| i.provenance.is_some());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec![
        "id",
        "image_ref",
        "class_label",
        "bias_label",
        "split",
        "origin",
    ];
    if with_provenance {
        header.extend(PROVENANCE_COLUMNS);
    }
    writer.write_record(&header)?;
    for item in ds.items() {
        let mut row = vec![
            item.id.clone(),
            item.image_ref.clone(),
            item.class_label.clone(),
            item.bias_label.clone(),
            item.split.to_string(),
            item.origin.to_string(),
        ];
        if with_provenance {
            match &item.provenance {
                Some(p) => row.extend([
                    p.strategy.clone(),
                    p.source_group
                        .as_ref()
                        .map(|g| g.to_string())
                        .unwrap_or_default(),
                    p.cluster_index.map(|c| c.to_string()).unwrap_or_default(),
                    p.prompt.clone(),
                    p.negative_prompt.clone().unwrap_or_default(),
                    p.seed.to_string(),
                ]),
                None => row.extend(std::iter::repeat(String::new()).take(6)),
            }
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Biased split construction
// ---------------------------------------------------------------------------

/// How to subsample a pool into a biased training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Exact per-group target counts. Groups not listed are kept whole.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_counts: Option<BTreeMap<GroupKey, usize>>,
    /// Per-class aligned fraction in (0, 1]. Mutually exclusive with
    /// `target_counts`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_ratio: Option<f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn from_ratio(bias_ratio: f64, seed: u64) -> Self {
        SplitSpec {
            target_counts: None,
            bias_ratio: Some(bias_ratio),
            seed,
        }
    }

    pub fn from_counts(target_counts: BTreeMap<GroupKey, usize>, seed: u64) -> Self {
        SplitSpec {
            target_counts: Some(target_counts),
            bias_ratio: None,
            seed,
        }
    }
}

/// Subsample `pool` so that each class's aligned fraction matches the spec.
///
/// Aligned groups are kept intact; conflicting groups shrink. The retained
/// conflicting count is the largest k with aligned/(aligned+k) >= ratio,
/// floored at 1 item unless the ratio is exactly 1.0. Deterministic under the
/// spec seed.
pub fn construct_biased_split(pool: &GroupedDataset, spec: &SplitSpec) -> Result<GroupedDataset> {
    let sizes = pool.group_sizes();
    let mut targets: BTreeMap<GroupKey, usize> = BTreeMap::new();

    match (&spec.target_counts, spec.bias_ratio) {
        (Some(counts), None) => {
            for (group, &want) in counts {
                let have = sizes.get(group).copied().unwrap_or(0);
                if have < want {
                    return Err(Error::Capacity(format!(
                        "group {group} has {have} items, {want} requested"
                    )));
                }
                targets.insert(group.clone(), want);
            }
            for (group, &n) in &sizes {
                targets.entry(group.clone()).or_insert(n);
            }
        }
        (None, Some(ratio)) => {
            if !(0.0 < ratio && ratio <= 1.0) {
                return Err(Error::Config(format!("bias_ratio {ratio} not in (0, 1]")));
            }
            for class in pool.classes().clone() {
                let mut aligned_total = 0usize;
                let mut conflicting: Vec<(GroupKey, usize)> = Vec::new();
                for (group, &n) in &sizes {
                    if group.class_label != class {
                        continue;
                    }
                    match pool.alignment_map().get(group) {
                        Some(Alignment::Aligned) => {
                            aligned_total += n;
                            targets.insert(group.clone(), n);
                        }
                        Some(Alignment::Conflicting) => conflicting.push((group.clone(), n)),
                        None => unreachable!("alignment coverage checked at construction"),
                    }
                }
                if conflicting.is_empty() {
                    continue;
                }
                // Largest k with aligned/(aligned+k) >= ratio.
                let mut keep = ((aligned_total as f64) * (1.0 - ratio) / ratio).floor() as usize;
                if keep == 0 && ratio < 1.0 {
                    keep = 1;
                }
                let available: usize = conflicting.iter().map(|(_, n)| n).sum();
                if available < keep {
                    let worst = conflicting
                        .iter()
                        .min_by_key(|(_, n)| *n)
                        .map(|(g, _)| g.clone())
                        .unwrap();
                    return Err(Error::Capacity(format!(
                        "class `{class}` needs {keep} conflicting items but only {available} \
                         are available (deficient group {worst})"
                    )));
                }
                // Distribute across conflicting groups proportionally to size,
                // remainder to the largest groups first.
                let mut assigned = 0usize;
                let mut shares: Vec<(GroupKey, usize, usize)> = conflicting
                    .iter()
                    .map(|(g, n)| {
                        let share = keep * n / available;
                        (g.clone(), *n, share)
                    })
                    .collect();
                for (_, _, s) in &shares {
                    assigned += s;
                }
                shares.sort_by_key(|(g, n, _)| (std::cmp::Reverse(*n), g.clone()));
                let mut remainder = keep - assigned;
                for (_, n, s) in shares.iter_mut() {
                    while remainder > 0 && *s < *n {
                        *s += 1;
                        remainder -= 1;
                    }
                }
                for (g, _, s) in shares {
                    targets.insert(g, s);
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "split spec must give exactly one of target_counts or bias_ratio".into(),
            ))
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut keep = Vec::new();
    // Iterate groups in index order so RNG consumption is stable.
    for (group, indices) in sizes.keys().map(|g| (g, pool.group_indices(g))) {
        let want = targets.get(group).copied().unwrap_or(indices.len());
        if want == indices.len() {
            keep.extend_from_slice(indices);
        } else {
            let chosen = index_sample(&mut rng, indices.len(), want);
            keep.extend(chosen.into_iter().map(|i| indices[i]));
        }
    }
    keep.sort_unstable();
    let items: Vec<DatasetItem> = keep.into_iter().map(|i| pool.items()[i].clone()).collect();
    let groups: BTreeSet<GroupKey> = items.iter().map(|i| i.group()).collect();
    let alignment = pool
        .alignment_map()
        .iter()
        .filter(|(g, _)| groups.contains(*g))
        .map(|(g, a)| (g.clone(), *a))
        .collect();
    GroupedDataset::new(items, alignment)
}

/// Per class, aligned count / class total.
pub fn compute_bias_ratio(ds: &GroupedDataset) -> Result<BTreeMap<String, f64>> {
    let mut aligned: BTreeMap<String, usize> = BTreeMap::new();
    let mut total: BTreeMap<String, usize> = BTreeMap::new();
    for (group, n) in ds.group_sizes() {
        *total.entry(group.class_label.clone()).or_insert(0) += n;
        if ds.alignment_map().get(&group) == Some(&Alignment::Aligned) {
            *aligned.entry(group.class_label.clone()).or_insert(0) += n;
        }
    }
    let mut ratios = BTreeMap::new();
    for class in ds.classes() {
        let t = total.get(class).copied().unwrap_or(0);
        if t == 0 {
            return Err(Error::Integrity(format!(
                "class `{class}` has zero items; bias ratio undefined"
            )));
        }
        let a = aligned.get(class).copied().unwrap_or(0);
        ratios.insert(class.clone(), a as f64 / t as f64);
    }
    Ok(ratios)
}

// ---------------------------------------------------------------------------
// Balanced batch samplers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMode {
    /// Each batch draws near-equally from every group (stage-1 pretraining).
    Group,
    /// Each batch draws near-equally from every class (LLR_all finetuning).
    Class,
}

/// Infinite stream of (near-)balanced batches of item indices, sampling with
/// replacement within each stratum. Owns its RNG; deterministic under seed.
pub struct BatchSampler {
    strata: Vec<Vec<usize>>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        ds: &GroupedDataset,
        mode: BalanceMode,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        let strata: Vec<Vec<usize>> = match mode {
            BalanceMode::Group => ds
                .group_sizes()
                .keys()
                .map(|g| ds.group_indices(g).to_vec())
                .collect(),
            BalanceMode::Class => {
                let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
                for (i, item) in ds.items().iter().enumerate() {
                    by_class.entry(item.class_label.clone()).or_default().push(i);
                }
                by_class.into_values().collect()
            }
        };
        if strata.iter().any(Vec::is_empty) || strata.is_empty() {
            return Err(Error::Sampling("empty stratum in balanced sampler".into()));
        }
        if batch_size < strata.len() {
            return Err(Error::Sampling(format!(
                "batch size {batch_size} smaller than stratum count {}",
                strata.len()
            )));
        }
        Ok(BatchSampler {
            strata,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Draw the next batch. Per-stratum counts differ by at most one; the
    /// remainder strata are chosen uniformly at random each batch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let k = self.strata.len();
        let base = self.batch_size / k;
        let remainder = self.batch_size % k;
        let extra = index_sample(&mut self.rng, k, remainder)
            .into_iter()
            .collect::<BTreeSet<usize>>();
        let mut batch = Vec::with_capacity(self.batch_size);
        for (s, stratum) in self.strata.iter().enumerate() {
            let n = base + usize::from(extra.contains(&s));
            for _ in 0..n {
                batch.push(stratum[self.rng.gen_range(0..stratum.len())]);
            }
        }
        batch
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn item(id: &str, class: &str, bias: &str, split: Split) -> DatasetItem {
        DatasetItem {
            id: id.to_string(),
            image_ref: format!("images/{id}.png"),
            class_label: class.to_string(),
            bias_label: bias.to_string(),
            split,
            origin: Origin::Real,
            provenance: None,
        }
    }

    fn celeba_style() -> GroupedDataset {
        let items = vec![
            item("a", "blond", "female", Split::Train),
            item("b", "blond", "male", Split::Train),
            item("c", "non-blond", "female", Split::Train),
            item("d", "non-blond", "male", Split::Train),
        ];
        GroupedDataset::with_majority_alignment(items).unwrap()
    }

    /// Pool with a configurable number of items per group; alignment given
    /// explicitly.
    pub(crate) fn synthetic_pool(spec: &[(&str, &str, Alignment, usize)]) -> GroupedDataset {
        let mut items = Vec::new();
        let mut alignment = BTreeMap::new();
        for (class, bias, a, n) in spec {
            alignment.insert(GroupKey::new(*class, *bias), *a);
            for i in 0..*n {
                items.push(item(&format!("{class}-{bias}-{i}"), class, bias, Split::Train));
            }
        }
        GroupedDataset::new(items, alignment).unwrap()
    }

    #[test]
    fn four_row_manifest_covers_four_groups() {
        let ds = celeba_style();
        let sizes = ds.group_sizes();
        assert_eq!(sizes.len(), 4);
        assert!(sizes.values().all(|&n| n == 1));
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let items = vec![
            item("a", "blond", "female", Split::Train),
            item("a", "blond", "male", Split::Train),
        ];
        let err = GroupedDataset::with_majority_alignment(items).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn unknown_split_tag_is_parse_error() {
        assert!(matches!("validation".parse::<Split>(), Err(Error::Parse(_))));
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let ds = celeba_style();
        save_manifest(&ds, &path).unwrap();
        let loaded = load_manifest(&path, &ManifestSchema::default()).unwrap();
        assert_eq!(ds.items(), loaded.items());
        // Re-save and compare bytes.
        let path2 = dir.path().join("manifest2.csv");
        save_manifest(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn missing_column_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,image_ref,class_label\n1,x,blond\n").unwrap();
        let err = load_manifest(&path, &ManifestSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn utkface_style_counts() {
        // Male adults 103, male children 934, female adults 5730, female
        // children 636; males biased toward children, females toward adults.
        let pool = synthetic_pool(&[
            ("male", "adult", Alignment::Conflicting, 103),
            ("male", "child", Alignment::Aligned, 934),
            ("female", "adult", Alignment::Aligned, 5730),
            ("female", "child", Alignment::Conflicting, 636),
        ]);
        assert_eq!(pool.len(), 7403);
        let ratios = compute_bias_ratio(&pool).unwrap();
        assert!((ratios["female"] - 5730.0 / 6366.0).abs() < 1e-12);
        assert!((ratios["male"] - 934.0 / 1037.0).abs() < 1e-12);
        assert!((ratios["female"] - 0.9001).abs() < 1e-4);
        assert!((ratios["male"] - 0.9007).abs() < 1e-4);
    }

    #[test]
    fn exact_target_counts() {
        let pool = synthetic_pool(&[
            ("female", "adult", Alignment::Aligned, 6000),
            ("female", "child", Alignment::Conflicting, 700),
        ]);
        let mut counts = BTreeMap::new();
        counts.insert(GroupKey::new("female", "adult"), 5730);
        counts.insert(GroupKey::new("female", "child"), 636);
        let split =
            construct_biased_split(&pool, &SplitSpec::from_counts(counts, 7)).unwrap();
        let sizes = split.group_sizes();
        assert_eq!(sizes[&GroupKey::new("female", "adult")], 5730);
        assert_eq!(sizes[&GroupKey::new("female", "child")], 636);
        let ratios = compute_bias_ratio(&split).unwrap();
        assert!((ratios["female"] - 0.90).abs() < 0.001);
    }

    #[test]
    fn ratio_mode_matches_exhaustive_check() {
        let pool = synthetic_pool(&[
            ("c", "x", Alignment::Aligned, 2000),
            ("c", "y", Alignment::Conflicting, 50),
        ]);
        let split =
            construct_biased_split(&pool, &SplitSpec::from_ratio(0.999, 3)).unwrap();
        let kept = split.group_sizes()[&GroupKey::new("c", "y")];
        // Oracle: largest k with 2000/(2000+k) >= 0.999, by exhaustive scan.
        let oracle = (0..=50)
            .filter(|&k| 2000.0 / (2000.0 + k as f64) >= 0.999)
            .max()
            .unwrap();
        assert_eq!(oracle, 2);
        assert_eq!(kept, oracle);
    }

    #[test]
    fn ratio_one_empties_conflicting_groups() {
        let pool = synthetic_pool(&[
            ("c", "x", Alignment::Aligned, 100),
            ("c", "y", Alignment::Conflicting, 10),
        ]);
        let split = construct_biased_split(&pool, &SplitSpec::from_ratio(1.0, 1)).unwrap();
        assert_eq!(split.group_sizes().get(&GroupKey::new("c", "y")), None);
        assert_eq!(split.group_sizes()[&GroupKey::new("c", "x")], 100);
    }

    #[test]
    fn infeasible_targets_report_deficient_group() {
        let pool = synthetic_pool(&[("c", "x", Alignment::Aligned, 5)]);
        let mut counts = BTreeMap::new();
        counts.insert(GroupKey::new("c", "x"), 10);
        let err =
            construct_biased_split(&pool, &SplitSpec::from_counts(counts, 1)).unwrap_err();
        match err {
            Error::Capacity(msg) => assert!(msg.contains("c/x")),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let pool = synthetic_pool(&[
            ("c", "x", Alignment::Aligned, 200),
            ("c", "y", Alignment::Conflicting, 100),
        ]);
        let spec = SplitSpec::from_ratio(0.9, 11);
        let a = construct_biased_split(&pool, &spec).unwrap();
        let b = construct_biased_split(&pool, &spec).unwrap();
        assert_eq!(a.items(), b.items());
        let c = construct_biased_split(&pool, &SplitSpec::from_ratio(0.9, 12)).unwrap();
        assert_eq!(a.group_sizes(), c.group_sizes());
        assert_ne!(a.items(), c.items());
    }

    #[test]
    fn uniform_bias_ratio_is_half() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 10),
            ("a", "y", Alignment::Conflicting, 10),
            ("b", "x", Alignment::Conflicting, 10),
            ("b", "y", Alignment::Aligned, 10),
        ]);
        let ratios = compute_bias_ratio(&pool).unwrap();
        assert_eq!(ratios["a"], 0.5);
        assert_eq!(ratios["b"], 0.5);
    }

    #[test]
    fn single_aligned_group_ratio_is_one() {
        let pool = synthetic_pool(&[("a", "x", Alignment::Aligned, 10)]);
        assert_eq!(compute_bias_ratio(&pool).unwrap()["a"], 1.0);
    }

    #[test]
    fn group_uniform_batches_divide_evenly() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 5),
            ("a", "y", Alignment::Conflicting, 5),
            ("b", "x", Alignment::Conflicting, 5),
            ("b", "y", Alignment::Aligned, 5),
        ]);
        let mut sampler = BatchSampler::new(&pool, BalanceMode::Group, 128, 0).unwrap();
        let batch = sampler.next_batch();
        assert_eq!(batch.len(), 128);
        let mut per_group: BTreeMap<GroupKey, usize> = BTreeMap::new();
        for &i in &batch {
            *per_group.entry(pool.items()[i].group()).or_insert(0) += 1;
        }
        assert!(per_group.values().all(|&n| n == 32));
    }

    #[test]
    fn class_uniform_batches_differ_by_at_most_one() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 99),
            ("b", "x", Alignment::Aligned, 1),
        ]);
        let mut sampler = BatchSampler::new(&pool, BalanceMode::Class, 7, 5).unwrap();
        for _ in 0..50 {
            let batch = sampler.next_batch();
            let a = batch
                .iter()
                .filter(|&&i| pool.items()[i].class_label == "a")
                .count();
            let b = batch.len() - a;
            assert!(a.abs_diff(b) <= 1, "counts {a}/{b}");
        }
    }

    #[test]
    fn class_uniform_frequency_converges() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 99),
            ("b", "x", Alignment::Aligned, 1),
        ]);
        let mut sampler = BatchSampler::new(&pool, BalanceMode::Class, 7, 9).unwrap();
        let mut a_count = 0usize;
        let mut total = 0usize;
        for _ in 0..10_000 {
            for i in sampler.next_batch() {
                total += 1;
                if pool.items()[i].class_label == "a" {
                    a_count += 1;
                }
            }
        }
        let freq = a_count as f64 / total as f64;
        assert!((freq - 0.5).abs() < 0.01, "empirical class frequency {freq}");
    }

    #[test]
    fn sampler_rejects_small_batches_and_empty_strata() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 5),
            ("b", "x", Alignment::Aligned, 5),
        ]);
        assert!(matches!(
            BatchSampler::new(&pool, BalanceMode::Class, 1, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn balanced_subsample_sizes_to_smallest_group() {
        let pool = synthetic_pool(&[
            ("a", "x", Alignment::Aligned, 50),
            ("a", "y", Alignment::Conflicting, 7),
            ("b", "x", Alignment::Conflicting, 30),
            ("b", "y", Alignment::Aligned, 40),
        ]);
        let balanced = pool.balanced_subsample(3).unwrap();
        assert!(balanced.group_sizes().values().all(|&n| n == 7));
    }
}
