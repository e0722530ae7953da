//! L2-penalized logistic regression trained by gradient ascent, and the
//! rank-based (Mann-Whitney) AUC used to score it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Linear classifier over feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub l2: f64,
}

impl LogisticModel {
    pub fn zeros(dim: usize, l2: f64) -> Self {
        LogisticModel {
            weights: DVector::zeros(dim),
            bias: 0.0,
            l2,
        }
    }

    /// Linear scores `X·w + b`, one per row.
    pub fn scores(&self, features: &DMatrix<f64>) -> Vec<f64> {
        (features * &self.weights)
            .iter()
            .map(|s| s + self.bias)
            .collect()
    }

    pub fn predict_proba(&self, features: &DMatrix<f64>) -> Vec<f64> {
        self.scores(features)
            .into_iter()
            .map(|s| 1.0 / (1.0 + (-s).exp()))
            .collect()
    }
}

/// Fit result: the model and the objective gradient norm at exit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub exit_grad_norm: f64,
}

/// Mean penalized log-likelihood of the labels under the model.
#[cfg(test)]
fn objective(model: &LogisticModel, features: &DMatrix<f64>, labels: &[u8]) -> f64 {
    let n = labels.len() as f64;
    let mut ll = 0.0;
    for (s, &y) in model.scores(features).iter().zip(labels) {
        // log σ(s) = −ln(1+e^{−s}), log(1−σ(s)) = −ln(1+e^{s})
        ll -= if y == 1 { (-s).exp().ln_1p() } else { s.exp().ln_1p() };
    }
    ll / n - 0.5 * model.l2 * model.weights.iter().map(|w| w * w).sum::<f64>()
}

fn gradient(model: &LogisticModel, features: &DMatrix<f64>, labels: &[u8]) -> (DVector<f64>, f64) {
    let n = labels.len() as f64;
    let probs = model.predict_proba(features);
    let residual = DVector::from_iterator(
        labels.len(),
        labels.iter().zip(&probs).map(|(&y, p)| f64::from(y) - p),
    );
    let grad_w = features.transpose() * &residual / n - &model.weights * model.l2;
    let grad_b = residual.sum() / n;
    (grad_w, grad_b)
}

/// Gradient ascent on the L2-penalized log-likelihood from a zero-initialized
/// model. The step size is derived from a Lipschitz bound on the gradient
/// (mean squared row norm / 4 plus the penalty), which keeps ascent stable
/// for any feature scale.
pub fn fit_logistic(
    features: &DMatrix<f64>,
    labels: &[u8],
    l2: f64,
    iterations: usize,
) -> Result<LogisticFit> {
    if features.nrows() != labels.len() {
        return Err(Error::Data(format!(
            "feature rows ({}) and labels ({}) disagree",
            features.nrows(),
            labels.len()
        )));
    }
    if l2 < 0.0 {
        return Err(Error::Config(format!("l2 must be >= 0, got {l2}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Data(
            "logistic regression needs both classes present".to_string(),
        ));
    }

    let n = features.nrows() as f64;
    let mean_row_norm_sq = features.iter().map(|v| v * v).sum::<f64>() / n;
    let step = 1.0 / (mean_row_norm_sq / 4.0 + l2).max(1e-3);

    let mut model = LogisticModel::zeros(features.ncols(), l2);
    let mut grad_norm = {
        let (gw, gb) = gradient(&model, features, labels);
        (gw.norm_squared() + gb * gb).sqrt()
    };
    for _ in 0..iterations {
        let (gw, gb) = gradient(&model, features, labels);
        model.weights += &gw * step;
        model.bias += gb * step;
        grad_norm = (gw.norm_squared() + gb * gb).sqrt();
    }
    log::debug!("logistic fit: exit gradient norm {grad_norm:.3e}");
    Ok(LogisticFit {
        model,
        exit_grad_norm: grad_norm,
    })
}

/// Rank-based AUC of raw scores: probability a random positive outranks a
/// random negative, ties counting one half (midranks).
pub fn auc_from_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels disagree in length".to_string()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both classes present".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based midrank for the tie group [i, j)
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// AUC of the model's scores on a feature matrix.
pub fn auc(model: &LogisticModel, features: &DMatrix<f64>, labels: &[u8]) -> Result<f64> {
    auc_from_scores(&model.scores(features), labels)
}

/// Collapse per-patch scores to one mean score per admission; the label of
/// each admission comes with it. Used for the optional per-admission AUC
/// reporting mode.
pub fn aggregate_scores_by_admission(
    hadm_ids: &[u64],
    scores: &[f64],
    labels: &[u8],
) -> (Vec<f64>, Vec<u8>) {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<u64, (f64, usize, u8)> = BTreeMap::new();
    for ((&h, &s), &y) in hadm_ids.iter().zip(scores).zip(labels) {
        let entry = acc.entry(h).or_insert((0.0, 0, y));
        entry.0 += s;
        entry.1 += 1;
    }
    let mut out_scores = Vec::with_capacity(acc.len());
    let mut out_labels = Vec::with_capacity(acc.len());
    for (_, (sum, count, label)) in acc {
        out_scores.push(sum / count as f64);
        out_labels.push(label);
    }
    (out_scores, out_labels)
}
