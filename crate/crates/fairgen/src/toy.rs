//! ColoredShapes: a deterministic procedural dataset with a controllable
//! spurious correlation between shape (the class) and background palette (the
//! bias). The palette is linearly separable from raw pixels while the shape
//! requires spatial structure, so a plainly trained model latches onto the
//! background.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Alignment, DatasetItem, GroupKey, GroupedDataset, Origin, Split};
use crate::error::{Error, Result};
use crate::image::Image;

pub const CLASSES: [&str; 2] = ["square", "cross"];
pub const BIASES: [&str; 2] = ["warm", "cool"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeWorldConfig {
    pub image_size: usize,
    /// Per-class fraction of train items in the bias-aligned group.
    pub bias_ratio: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Test split is group-balanced; n_test is rounded down to a multiple of 4.
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ShapeWorldConfig {
    fn default() -> Self {
        ShapeWorldConfig {
            image_size: 16,
            bias_ratio: 0.95,
            n_train: 2000,
            n_val: 200,
            n_test: 400,
            noise_sigma: 0.08,
            seed: 0,
        }
    }
}

/// Background color per palette word (RGB in [0,1]).
pub fn palette(bias: &str) -> Result<[f32; 3]> {
    match bias {
        "warm" => Ok([0.75, 0.35, 0.20]),
        "cool" => Ok([0.20, 0.35, 0.75]),
        other => Err(Error::Config(format!("unknown palette `{other}`"))),
    }
}

/// Binary shape mask at a given top-left offset. Shapes are 8x8 patterns.
pub fn shape_mask(class: &str, size: usize, off_x: usize, off_y: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; size * size];
    let extent = 8usize.min(size);
    let mut set = |x: usize, y: usize| {
        let (x, y) = (x + off_x, y + off_y);
        if x < size && y < size {
            mask[y * size + x] = true;
        }
    };
    match class {
        "square" => {
            for y in 0..extent {
                for x in 0..extent {
                    // Hollow square: border two pixels thick.
                    if x < 2 || x >= extent - 2 || y < 2 || y >= extent - 2 {
                        set(x, y);
                    }
                }
            }
        }
        "cross" => {
            let mid = extent / 2;
            for t in 0..extent {
                set(t, mid - 1);
                set(t, mid);
                set(mid - 1, t);
                set(mid, t);
            }
        }
        other => return Err(Error::Config(format!("unknown shape `{other}`"))),
    }
    Ok(mask)
}

/// Render one image: palette background + shape luminance bump + pixel noise.
pub fn render_shape_image(
    class: &str,
    bias: &str,
    size: usize,
    off_x: usize,
    off_y: usize,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let bg = palette(bias)?;
    let mask = shape_mask(class, size, off_x, off_y)?;
    let mut img = Image::new(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let on_shape = mask[y * size + x];
            for c in 0..3 {
                let mut v = bg[c];
                if on_shape {
                    v += 0.22;
                }
                if noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += (noise_sigma * z) as f32;
                }
                img.set(x, y, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(img)
}

/// Canonical prototype used for text-embedding vocabulary and the
/// global-prior generator: shape centered on a neutral gray background, or a
/// plain palette field for bias words.
pub fn prototype_image(word: &str, size: usize) -> Result<Image> {
    if CLASSES.contains(&word) {
        let off = (size.saturating_sub(8)) / 2;
        let mask = shape_mask(word, size, off, off)?;
        let mut img = Image::new(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let v = if mask[y * size + x] { 0.72 } else { 0.5 };
                for c in 0..3 {
                    img.set(x, y, c, v);
                }
            }
        }
        Ok(img)
    } else if BIASES.contains(&word) {
        let bg = palette(word)?;
        let mut img = Image::new(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    img.set(x, y, c, bg[c]);
                }
            }
        }
        Ok(img)
    } else {
        Err(Error::Config(format!("no prototype for word `{word}`")))
    }
}

/// Vocabulary for the toy embedding backend: every class and bias word maps
/// to its prototype rendering.
pub fn default_vocabulary(size: usize) -> BTreeMap<String, Image> {
    let mut vocab = BTreeMap::new();
    for word in CLASSES.iter().chain(BIASES.iter()) {
        vocab.insert(
            word.to_string(),
            prototype_image(word, size).expect("known word"),
        );
    }
    vocab
}

fn aligned_bias(class: &str) -> &'static str {
    // square <-> warm, cross <-> cool.
    if class == "square" {
        "warm"
    } else {
        "cool"
    }
}

pub fn alignment_map() -> BTreeMap<GroupKey, Alignment> {
    let mut map = BTreeMap::new();
    for class in CLASSES {
        for bias in BIASES {
            let a = if bias == aligned_bias(class) {
                Alignment::Aligned
            } else {
                Alignment::Conflicting
            };
            map.insert(GroupKey::new(class, bias), a);
        }
    }
    map
}

/// Generate the full dataset: a biased train split (per-class aligned
/// fraction = bias_ratio), an equally biased val split, and a group-balanced
/// test split. Deterministic under seed.
pub fn generate_shapeworld(cfg: &ShapeWorldConfig) -> Result<GroupedDataset> {
    if cfg.image_size < 8 {
        return Err(Error::Config("image_size must be at least 8".into()));
    }
    if !(0.0 < cfg.bias_ratio && cfg.bias_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "bias_ratio {} not in (0, 1]",
            cfg.bias_ratio
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x73686170656c64);
    let mut items = Vec::new();
    let mut counter = 0usize;

    let mut emit = |class: &str,
                    bias: &str,
                    split: Split,
                    n: usize,
                    rng: &mut ChaCha8Rng,
                    items: &mut Vec<DatasetItem>|
     -> Result<()> {
        let max_off = cfg.image_size - 8;
        for _ in 0..n {
            let off_x = rng.gen_range(0..=max_off);
            let off_y = rng.gen_range(0..=max_off);
            let img = render_shape_image(
                class,
                bias,
                cfg.image_size,
                off_x,
                off_y,
                cfg.noise_sigma,
                rng,
            )?;
            items.push(DatasetItem {
                id: format!("toy-{counter:06}"),
                image_ref: img.to_inline_ref(),
                class_label: class.to_string(),
                bias_label: bias.to_string(),
                split,
                origin: Origin::Real,
                provenance: None,
            });
            counter += 1;
        }
        Ok(())
    };

    for (split, total) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val)] {
        let per_class = total / 2;
        for class in CLASSES {
            let aligned = (per_class as f64 * cfg.bias_ratio).round() as usize;
            let aligned = aligned.min(per_class);
            let conflicting = per_class - aligned;
            emit(class, aligned_bias(class), split, aligned, &mut rng, &mut items)?;
            let other = BIASES
                .iter()
                .find(|b| **b != aligned_bias(class))
                .unwrap();
            emit(class, other, split, conflicting, &mut rng, &mut items)?;
        }
    }
    let per_group_test = cfg.n_test / 4;
    for class in CLASSES {
        for bias in BIASES {
            emit(class, bias, Split::Test, per_group_test, &mut rng, &mut items)?;
        }
    }

    GroupedDataset::new(items, alignment_map())
}
