//! Training losses: cross-entropy, a supervised contrastive term whose
//! denominator runs over negatives only (the form this pipeline trains with;
//! the conventional all-pairs denominator is available behind a flag), their
//! beta-weighted combination, and a group-reweighted robust loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PROB_EPS: f64 = 1e-12;

/// Numerically stable softmax over one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean negative log-likelihood over a batch of probability rows.
/// Probabilities are clamped away from zero before the log.
pub fn ce_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension {
            expected: probs.len(),
            got: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::Numerical("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        let p = *row
            .get(y)
            .ok_or_else(|| Error::Config(format!("label {y} out of range")))?;
        total -= p.max(PROB_EPS).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Loss and gradient of the mean cross-entropy with respect to logits:
/// (softmax - onehot) / n per row.
pub fn ce_grad_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|row| softmax(row)).collect();
    let loss = ce_loss(&probs, labels)?;
    let n = logits.len() as f64;
    let grads = probs
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(k, p)| (p - f64::from(u8::from(k == y))) / n)
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupConForm {
    /// Denominator over negatives only (the default here).
    NegativesOnly,
    /// Conventional denominator over all other samples.
    AllPairs,
}

fn l2_normalize_rows(features: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut norms = Vec::with_capacity(features.len());
    let rows = features
        .iter()
        .map(|f| {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < PROB_EPS {
                return Err(Error::Numerical(
                    "zero-norm feature in contrastive loss".into(),
                ));
            }
            norms.push(norm);
            Ok(f.iter().map(|v| v / norm).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok((rows, norms))
}

/// Supervised contrastive loss, summed over anchors. Features are
/// L2-normalized internally. Anchors lacking positives — or, in the
/// negatives-only form, lacking negatives — are skipped.
pub fn supcon_loss(
    features: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    form: SupConForm,
) -> Result<f64> {
    Ok(supcon_with_grad(features, labels, tau, form)?.0)
}

/// Loss plus its gradient with respect to the raw (un-normalized) features.
pub fn supcon_with_grad(
    features: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    form: SupConForm,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if features.len() != labels.len() {
        return Err(Error::Dimension {
            expected: features.len(),
            got: labels.len(),
        });
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    let (z, norms) = l2_normalize_rows(features)?;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut loss = 0.0;
    // Gradient with respect to the normalized rows; mapped back through the
    // normalization at the end.
    let mut gz = vec![vec![0.0f64; d]; n];
    for j in 0..n {
        let positives: Vec<usize> =
            (0..n).filter(|&k| k != j && labels[k] == labels[j]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom_set: Vec<usize> = match form {
            SupConForm::NegativesOnly => (0..n).filter(|&k| labels[k] != labels[j]).collect(),
            SupConForm::AllPairs => (0..n).filter(|&k| k != j).collect(),
        };
        if denom_set.is_empty() {
            continue;
        }

        let sims: Vec<f64> = denom_set.iter().map(|&k| dot(&z[j], &z[k]) / tau).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let log_denom = max + sum.ln();
        let weights: Vec<f64> = exps.iter().map(|e| e / sum).collect();

        let inv_p = 1.0 / positives.len() as f64;
        // L_j = -(1/(tau |P|)) sum_p z_j.z_p + log sum_k exp(z_j.z_k / tau)
        let mut pos_sim = 0.0;
        for &p in &positives {
            pos_sim += dot(&z[j], &z[p]);
        }
        loss += -inv_p * pos_sim / tau + log_denom;

        for i in 0..d {
            let mut g = 0.0;
            for &p in &positives {
                g -= inv_p * z[p][i] / tau;
            }
            for (w, &k) in weights.iter().zip(&denom_set) {
                g += w * z[k][i] / tau;
            }
            gz[j][i] += g;
        }
        for &p in &positives {
            for i in 0..d {
                gz[p][i] -= inv_p * z[j][i] / tau;
            }
        }
        for (w, &k) in weights.iter().zip(&denom_set) {
            for i in 0..d {
                gz[k][i] += w * z[j][i] / tau;
            }
        }
    }

    // Chain through z = f / ‖f‖: df = (gz - (gz.z) z) / ‖f‖.
    let mut gf = vec![vec![0.0f64; d]; n];
    for j in 0..n {
        let proj = dot(&gz[j], &z[j]);
        for i in 0..d {
            gf[j][i] = (gz[j][i] - proj * z[j][i]) / norms[j];
        }
    }
    Ok((loss, gf))
}

/// beta * ce + (1 - beta) * contrastive.
pub fn combined_loss(ce: f64, supcon: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} not in [0, 1]")));
    }
    Ok(beta * ce + (1.0 - beta) * supcon)
}

/// Group-reweighted robust loss state: one adversarial weight per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupWeights {
    pub q: Vec<f64>,
    pub eta: f64,
}

impl GroupWeights {
    pub fn uniform(n_groups: usize, eta: f64) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::Config("no groups for robust weighting".into()));
        }
        if eta <= 0.0 {
            return Err(Error::Config(format!("step size {eta} must be positive")));
        }
        Ok(GroupWeights {
            q: vec![1.0 / n_groups as f64; n_groups],
            eta,
        })
    }

    /// Exponentiated-gradient step on the per-group losses, then the
    /// q-weighted loss. Groups absent from the batch keep their weight.
    pub fn step(&mut self, group_losses: &[Option<f64>]) -> Result<f64> {
        if group_losses.len() != self.q.len() {
            return Err(Error::Dimension {
                expected: self.q.len(),
                got: group_losses.len(),
            });
        }
        for (q, l) in self.q.iter_mut().zip(group_losses) {
            if let Some(l) = l {
                *q *= (self.eta * l).exp();
            }
        }
        let sum: f64 = self.q.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::Numerical("robust weights diverged".into()));
        }
        for q in &mut self.q {
            *q /= sum;
        }
        Ok(self
            .q
            .iter()
            .zip(group_losses)
            .map(|(q, l)| q * l.unwrap_or(0.0))
            .sum())
    }
}
