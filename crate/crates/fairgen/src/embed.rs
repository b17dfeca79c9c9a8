//! Embedding backend abstraction (desk-scale stand-in for CLIP), centroid
//! statistics, cosine similarity, and a Gaussian Fréchet distance between
//! embedding sets.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::GroupKey;
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Embedding { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::UndefinedSimilarity("zero vector".into()));
        }
        Ok(Embedding::new(self.vector.iter().map(|v| v / n).collect()))
    }
}

/// Per-group centroid statistics (z̄^g and M_g).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupEmbeddingStats {
    pub group: GroupKey,
    pub centroid: Embedding,
    pub count: usize,
}

/// Abstraction over an image/text embedding model.
pub trait EmbeddingBackend {
    fn embed_image(&self, image: &Image) -> Result<Embedding>;
    fn embed_text(&self, prompt: &str) -> Result<Embedding>;
    fn dimension(&self) -> usize;
}

/// Cosine similarity u·v / (‖u‖‖v‖).
pub fn cosine_similarity(u: &Embedding, v: &Embedding) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::Dimension {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = u
        .vector
        .iter()
        .zip(&v.vector)
        .map(|(a, b)| a * b)
        .sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Arithmetic mean of the member embeddings (raw, un-normalized).
pub fn group_centroid(embs: &[Embedding], group: &GroupKey) -> Result<GroupEmbeddingStats> {
    let first = embs.first().ok_or_else(|| {
        Error::UndefinedSimilarity(format!(
            "group {group} has no embeddings; fall back to alpha=1 filtering"
        ))
    })?;
    let d = first.dim();
    let mut mean = vec![0.0; d];
    for e in embs {
        if e.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: e.dim(),
            });
        }
        for (m, v) in mean.iter_mut().zip(&e.vector) {
            *m += v;
        }
    }
    let n = embs.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(GroupEmbeddingStats {
        group: group.clone(),
        centroid: Embedding::new(mean),
        count: embs.len(),
    })
}

/// Mean and covariance (denominator n-1) of an embedding set.
pub fn gaussian_stats(embs: &[Embedding]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if embs.len() < 2 {
        return Err(Error::Numerical(
            "need at least 2 samples to fit a Gaussian".into(),
        ));
    }
    let d = embs[0].dim();
    let n = embs.len();
    let mut mean = DVector::zeros(d);
    for e in embs {
        if e.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                got: e.dim(),
            });
        }
        mean += DVector::from_column_slice(&e.vector);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embs {
        let centered = DVector::from_column_slice(&e.vector) - &mean;
        cov += &centered * centered.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between two Gaussians:
/// ‖μ_A−μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2}).
pub fn frechet_between_gaussians(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::Dimension {
            expected: mu_a.len(),
            got: mu_b.len(),
        });
    }
    let diff = mu_a - mu_b;
    let mean_term = diff.dot(&diff);
    let cross = trace_sqrt_product(cov_a, cov_b).or_else(|_| {
        // Regularize with eps*I and retry once, as is common FID practice.
        let eps = 1e-6;
        let d = cov_a.nrows();
        let reg = DMatrix::identity(d, d) * eps;
        trace_sqrt_product(&(cov_a + &reg), &(cov_b + &reg))
    })?;
    Ok(mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross)
}

/// Tr((Σ_A Σ_B)^{1/2}) via the symmetric-PSD square root of
/// sqrt(Σ_A)·Σ_B·sqrt(Σ_A).
fn trace_sqrt_product(cov_a: &DMatrix<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let sqrt_a = symmetric_sqrt(cov_a)?;
    let inner = &sqrt_a * cov_b * &sqrt_a;
    // Symmetrize against round-off before the eigendecomposition.
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = inner.symmetric_eigen();
    let mut trace = 0.0;
    for &lambda in eig.eigenvalues.iter() {
        if lambda < -1e-8 {
            return Err(Error::Numerical(format!(
                "negative eigenvalue {lambda} in matrix square root"
            )));
        }
        trace += lambda.max(0.0).sqrt();
    }
    Ok(trace)
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    for &lambda in eig.eigenvalues.iter() {
        if lambda < -1e-8 {
            return Err(Error::Numerical(format!(
                "negative eigenvalue {lambda} in covariance"
            )));
        }
    }
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose())
}

/// Fréchet distance between the Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Embedding], b: &[Embedding]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_stats(a)?;
    let (mu_b, cov_b) = gaussian_stats(b)?;
    frechet_between_gaussians(&mu_a, &cov_a, &mu_b, &cov_b)
}

// ---------------------------------------------------------------------------
// Toy backend
// ---------------------------------------------------------------------------

/// Desk-scale CLIP substitute.
///
/// Images embed through a fixed seeded random linear projection of flattened
/// pixels, L2-normalized. Text embeds by rendering the prototype image of
/// every vocabulary word found in the prompt, projecting those through the
/// same map, and mixing in a small prompt-hash component; prompts that share
/// a class word therefore land near each other and near images of that class.
pub struct ToyEmbedder {
    dim: usize,
    projection: Vec<Vec<f64>>,
    input_len: usize,
    vocabulary: BTreeMap<String, Image>,
    seed: u64,
}

impl ToyEmbedder {
    pub fn new(seed: u64, dim: usize, input_len: usize) -> Self {
        assert!(dim >= 2, "embedding dimension must be >= 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f79656d626564);
        let projection = (0..dim)
            .map(|_| {
                (0..input_len)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z / (input_len as f64).sqrt()
                    })
                    .collect()
            })
            .collect();
        ToyEmbedder {
            dim,
            projection,
            input_len,
            vocabulary: BTreeMap::new(),
            seed,
        }
    }

    /// Register a word -> prototype image pair used for text embedding.
    pub fn with_vocabulary(mut self, vocabulary: BTreeMap<String, Image>) -> Self {
        self.vocabulary = vocabulary;
        self
    }

    fn project(&self, pixels: &[f32]) -> Result<Vec<f64>> {
        if pixels.len() != self.input_len {
            return Err(Error::Dimension {
                expected: self.input_len,
                got: pixels.len(),
            });
        }
        Ok(self
            .projection
            .iter()
            .map(|row| {
                row.iter()
                    .zip(pixels)
                    .map(|(w, p)| w * *p as f64)
                    .sum::<f64>()
            })
            .collect())
    }

    fn hash_vector(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
            .collect()
    }
}

impl EmbeddingBackend for ToyEmbedder {
    fn embed_image(&self, image: &Image) -> Result<Embedding> {
        Embedding::new(self.project(&image.pixels)?).normalized()
    }

    fn embed_text(&self, prompt: &str) -> Result<Embedding> {
        let lower = prompt.to_lowercase();
        let mut acc = vec![0.0; self.dim];
        let mut matched = false;
        for (word, prototype) in &self.vocabulary {
            if lower.contains(word.to_lowercase().as_str()) {
                let proj = self.project(&prototype.pixels)?;
                let emb = Embedding::new(proj).normalized()?;
                for (a, v) in acc.iter_mut().zip(&emb.vector) {
                    *a += v;
                }
                matched = true;
            }
        }
        let hash = self.hash_vector(prompt);
        let hash_weight = if matched { 0.25 } else { 1.0 };
        let hash_norm = hash.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, h) in acc.iter_mut().zip(&hash) {
            *a += hash_weight * h / hash_norm;
        }
        Embedding::new(acc).normalized()
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}

/// Persist embeddings keyed by item id next to a manifest.
pub fn save_embeddings(embs: &BTreeMap<String, Embedding>, path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let table: BTreeMap<&String, &Vec<f64>> =
        embs.iter().map(|(k, e)| (k, &e.vector)).collect();
    std::fs::write(path, serde_json::to_string(&table)?)?;
    Ok(())
}

pub fn load_embeddings(path: &std::path::Path) -> Result<BTreeMap<String, Embedding>> {
    let text = std::fs::read_to_string(path)?;
    let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
    Ok(table
        .into_iter()
        .map(|(k, v)| (k, Embedding::new(v)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn cosine_identity_orthogonal_and_hand_case() {
        let u = emb(&[1.0, 2.0, 3.0]);
        assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let x = emb(&[1.0, 0.0]);
        let y = emb(&[0.0, 2.0]);
        assert_eq!(cosine_similarity(&x, &y).unwrap(), 0.0);
        let v = emb(&[3.0, 2.0, 1.0]);
        assert!((cosine_similarity(&u, &v).unwrap() - 10.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        let zero = emb(&[0.0, 0.0]);
        let one = emb(&[1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&zero, &one),
            Err(Error::UndefinedSimilarity(_))
        ));
        let three = emb(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&one, &three),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn centroid_basics() {
        let g = GroupKey::new("c", "b");
        let single = group_centroid(&[emb(&[1.0, 2.0])], &g).unwrap();
        assert_eq!(single.centroid.vector, vec![1.0, 2.0]);
        assert_eq!(single.count, 1);
        let pair = group_centroid(&[emb(&[0.0, 0.0]), emb(&[2.0, 2.0])], &g).unwrap();
        assert_eq!(pair.centroid.vector, vec![1.0, 1.0]);
        assert!(group_centroid(&[], &g).is_err());
    }

    #[test]
    fn centroid_monte_carlo_near_population_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mu = [0.5, -1.0, 2.0];
        let embs: Vec<Embedding> = (0..1000)
            .map(|_| {
                Embedding::new(
                    mu.iter()
                        .map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect(),
                )
            })
            .collect();
        let stats = group_centroid(&embs, &GroupKey::new("c", "b")).unwrap();
        for (c, m) in stats.centroid.vector.iter().zip(&mu) {
            assert!((c - m).abs() < 0.1);
        }
    }

    #[test]
    fn frechet_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Embedding> = (0..50)
            .map(|_| {
                Embedding::new(
                    (0..4)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z
                        })
                        .collect(),
                )
            })
            .collect();
        let d = frechet_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn frechet_one_dim_shifted_unit_variance() {
        // Sample sets with exact mean/variance: {-1, 1} and {0, 2}.
        let a = vec![emb(&[-1.0]), emb(&[1.0])];
        let b = vec![emb(&[0.0]), emb(&[2.0])];
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn frechet_commuting_diagonal_closed_form() {
        let mu = DVector::from_column_slice(&[0.0, 0.0]);
        let cov_a = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, 4.0]));
        let cov_b = DMatrix::from_diagonal(&DVector::from_column_slice(&[9.0, 1.0]));
        let d = frechet_between_gaussians(&mu, &cov_a, &mu, &cov_b).unwrap();
        assert!((d - 5.0).abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sample = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<Embedding> {
            (0..40)
                .map(|_| {
                    Embedding::new(
                        (0..3)
                            .map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                            .collect(),
                    )
                })
                .collect()
        };
        let a = sample(&mut rng, 0.0);
        let b = sample(&mut rng, 0.7);
        let dab = frechet_distance(&a, &b).unwrap();
        let dba = frechet_distance(&b, &a).unwrap();
        assert!(dab >= 0.0);
        assert!((dab - dba).abs() < 1e-9);
    }

    #[test]
    fn frechet_rejects_tiny_sets() {
        let a = vec![emb(&[1.0])];
        assert!(frechet_distance(&a, &a).is_err());
    }

    fn flat_image(v: f32, len: usize) -> Image {
        Image {
            width: len,
            height: 1,
            channels: 1,
            pixels: vec![v; len],
        }
    }

    #[test]
    fn toy_backend_is_deterministic_and_unit_norm() {
        let backend = ToyEmbedder::new(9, 8, 16);
        let img = flat_image(0.3, 16);
        let a = backend.embed_image(&img).unwrap();
        let b = backend.embed_image(&img).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        let t = backend.embed_text("photo of a thing").unwrap();
        assert!((t.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prompts_sharing_class_word_are_closer() {
        let mut vocab = BTreeMap::new();
        let mut proto_a = flat_image(0.0, 16);
        proto_a.pixels[0..8].fill(1.0);
        let mut proto_b = flat_image(0.0, 16);
        proto_b.pixels[8..16].fill(1.0);
        vocab.insert("square".to_string(), proto_a);
        vocab.insert("cross".to_string(), proto_b);
        let backend = ToyEmbedder::new(4, 8, 16).with_vocabulary(vocab);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut same_wins = 0;
        for trial in 0..100 {
            let filler_a: u32 = rng.gen();
            let filler_b: u32 = rng.gen();
            let p1 = backend
                .embed_text(&format!("photo {trial} of a square {filler_a}"))
                .unwrap();
            let p2 = backend
                .embed_text(&format!("picture {trial} of a square {filler_b}"))
                .unwrap();
            let p3 = backend
                .embed_text(&format!("picture {trial} of a cross {filler_b}"))
                .unwrap();
            let same = cosine_similarity(&p1, &p2).unwrap();
            let diff = cosine_similarity(&p1, &p3).unwrap();
            if same > diff {
                same_wins += 1;
            }
        }
        assert!(same_wins >= 95, "same-class prompts closer in {same_wins}/100");
    }

    #[test]
    fn embeddings_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embs.json");
        let mut table = BTreeMap::new();
        table.insert("a".to_string(), emb(&[1.0, 2.5]));
        table.insert("b".to_string(), emb(&[-0.5, 0.0]));
        save_embeddings(&table, &path).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), table);
    }
}
