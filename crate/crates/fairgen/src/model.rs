//! A small MLP classifier with an explicit encoder/head split, hand-written
//! backprop in f64, and a versioned checkpoint format. The encoder maps
//! flattened pixels to a feature vector; the head is a single linear layer so
//! it can be retrained in isolation.

use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"FGMC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
}

/// Encoder (input -> hidden -> feature) plus linear head (feature -> logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub cfg: MlpConfig,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

/// Cached activations from a forward pass, consumed by `backward`.
pub struct Forward {
    pub x: DMatrix<f64>,
    pub h_pre: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub features: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

pub struct Gradients {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

fn he_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let scale = (2.0 / cols as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    for r in rows {
        if r.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

impl Mlp {
    pub fn new(cfg: MlpConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c70);
        Mlp {
            w1: he_init(cfg.hidden_dim, cfg.input_dim, &mut rng),
            b1: DVector::zeros(cfg.hidden_dim),
            w2: he_init(cfg.feature_dim, cfg.hidden_dim, &mut rng),
            b2: DVector::zeros(cfg.feature_dim),
            w3: he_init(cfg.n_classes, cfg.feature_dim, &mut rng),
            b3: DVector::zeros(cfg.n_classes),
            cfg,
        }
    }

    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Forward> {
        let x = rows_to_matrix(inputs, self.cfg.input_dim)?;
        let mut h_pre = &x * self.w1.transpose();
        for mut row in h_pre.row_iter_mut() {
            row += self.b1.transpose();
        }
        let h = h_pre.map(|v| v.max(0.0));
        let mut features = &h * self.w2.transpose();
        for mut row in features.row_iter_mut() {
            row += self.b2.transpose();
        }
        let mut logits = &features * self.w3.transpose();
        for mut row in logits.row_iter_mut() {
            row += self.b3.transpose();
        }
        Ok(Forward {
            x,
            h_pre,
            h,
            features,
            logits,
        })
    }

    pub fn features(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(matrix_to_rows(&self.forward(inputs)?.features))
    }

    pub fn logits(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(matrix_to_rows(&self.forward(inputs)?.logits))
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self
            .logits(inputs)?
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Backprop from logit gradients plus an extra gradient injected directly
    /// at the feature layer (the contrastive term).
    pub fn backward(
        &self,
        fwd: &Forward,
        d_logits: &[Vec<f64>],
        d_features_extra: Option<&[Vec<f64>]>,
    ) -> Result<Gradients> {
        let dl = rows_to_matrix(d_logits, self.cfg.n_classes)?;
        let w3_grad = dl.transpose() * &fwd.features;
        let b3_grad = col_sums(&dl);
        let mut df = &dl * &self.w3;
        if let Some(extra) = d_features_extra {
            df += rows_to_matrix(extra, self.cfg.feature_dim)?;
        }
        let w2_grad = df.transpose() * &fwd.h;
        let b2_grad = col_sums(&df);
        let mut dh = &df * &self.w2;
        dh.zip_apply(&fwd.h_pre, |g, pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        let w1_grad = dh.transpose() * &fwd.x;
        let b1_grad = col_sums(&dh);
        Ok(Gradients {
            w1: w1_grad,
            b1: b1_grad,
            w2: w2_grad,
            b2: b2_grad,
            w3: w3_grad,
            b3: b3_grad,
        })
    }

    /// Plain SGD with decoupled weight decay on the weight matrices
    /// (biases are not decayed). `freeze_encoder` limits the update to the
    /// head layer.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64, freeze_encoder: bool) {
        if !freeze_encoder {
            self.w1 -= lr * (&grads.w1 + weight_decay * &self.w1);
            self.b1 -= lr * &grads.b1;
            self.w2 -= lr * (&grads.w2 + weight_decay * &self.w2);
            self.b2 -= lr * &grads.b2;
        }
        self.w3 -= lr * (&grads.w3 + weight_decay * &self.w3);
        self.b3 -= lr * &grads.b3;
    }

    fn param_blocks(&self) -> [(&DMatrix<f64>, &DVector<f64>); 3] {
        [
            (&self.w1, &self.b1),
            (&self.w2, &self.b2),
            (&self.w3, &self.b3),
        ]
    }

    /// Hex digest of the encoder parameters; stable iff the encoder is
    /// untouched.
    pub fn encoder_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for block in [&self.w1, &self.w2] {
            for v in block.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for block in [&self.b1, &self.b2] {
            for v in block.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn has_finite_params(&self) -> bool {
        self.param_blocks()
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }

    /// Binary checkpoint (magic + version + dims + f64 LE params) with a JSON
    /// metadata sidecar.
    pub fn save(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [
            self.cfg.input_dim,
            self.cfg.hidden_dim,
            self.cfg.feature_dim,
            self.cfg.n_classes,
        ] {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for (w, b) in self.param_blocks() {
            for v in w.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::File::create(path)?.write_all(&buf)?;
        let meta = serde_json::json!({
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg,
            "encoder_hash": self.encoder_hash(),
            "extra": metadata,
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&meta)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        if buf.len() < 24 || &buf[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let dim_at = |i: usize| {
            u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize
        };
        let cfg = MlpConfig {
            input_dim: dim_at(0),
            hidden_dim: dim_at(1),
            feature_dim: dim_at(2),
            n_classes: dim_at(3),
        };
        let n_params = cfg.hidden_dim * cfg.input_dim
            + cfg.hidden_dim
            + cfg.feature_dim * cfg.hidden_dim
            + cfg.feature_dim
            + cfg.n_classes * cfg.feature_dim
            + cfg.n_classes;
        let body = &buf[24..];
        if body.len() != n_params * 8 {
            return Err(Error::Parse(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                n_params * 8
            )));
        }
        let mut offset = 0usize;
        let mut take = |n: usize| {
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    f64::from_le_bytes(body[offset + 8 * i..offset + 8 * i + 8].try_into().unwrap())
                })
                .collect();
            offset += n * 8;
            vals
        };
        // Matrices round-trip in nalgebra's native column-major order.
        let w1 = DMatrix::from_column_slice(
            cfg.hidden_dim,
            cfg.input_dim,
            &take(cfg.hidden_dim * cfg.input_dim),
        );
        let b1 = DVector::from_vec(take(cfg.hidden_dim));
        let w2 = DMatrix::from_column_slice(
            cfg.feature_dim,
            cfg.hidden_dim,
            &take(cfg.feature_dim * cfg.hidden_dim),
        );
        let b2 = DVector::from_vec(take(cfg.feature_dim));
        let w3 = DMatrix::from_column_slice(
            cfg.n_classes,
            cfg.feature_dim,
            &take(cfg.n_classes * cfg.feature_dim),
        );
        let b3 = DVector::from_vec(take(cfg.n_classes));
        Ok(Mlp {
            cfg,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }
}
