//! Exact O(n²) t-SNE: per-point Gaussian bandwidths found by binary search
//! to match the target perplexity, symmetrized affinities, Student-t
//! low-dimensional kernel, and momentum gradient descent on KL(P‖Q) with
//! early exaggeration.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TsneParams {
    /// Effective neighbor count; must satisfy `perplexity < (n−1)/3`.
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplier applied to P during the first `exaggeration_iters`.
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

/// 2-D embedding together with the KL divergence it reached.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    pub perplexity: f64,
    pub seed: u64,
    pub kl_divergence: f64,
    /// KL(P‖Q) against the un-exaggerated P, one entry per iteration.
    pub kl_trace: Vec<f64>,
}

const P_FLOOR: f64 = 1e-12;

fn pairwise_sq_distances(features: &DMatrix<f64>) -> Vec<f64> {
    let n = features.nrows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for k in 0..features.ncols() {
                let diff = features[(i, k)] - features[(j, k)];
                acc += diff * diff;
            }
            d[i * n + j] = acc;
            d[j * n + i] = acc;
        }
    }
    d
}

/// Conditional affinities P(j|i): Gaussian with a per-point precision found
/// by bisection so the conditional entropy hits ln(perplexity).
fn conditional_affinities(distances: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target_entropy = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..50 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if i == j {
                    0.0
                } else {
                    (-beta * distances[i * n + j]).exp()
                };
                sum += row[j];
            }
            let mut entropy = 0.0;
            if sum > 0.0 {
                for value in row.iter_mut() {
                    *value /= sum;
                    if *value > 1e-300 {
                        entropy -= *value * value.ln();
                    }
                }
            }
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() {
                    (beta + beta_max) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() {
                    (beta + beta_min) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    p
}

fn symmetrize(p_cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((p_cond[i * n + j] + p_cond[j * n + i]) / norm).max(P_FLOOR);
            }
        }
    }
    p
}

/// Embed feature rows into 2-D, deterministically for a given seed.
pub fn tsne(features: &DMatrix<f64>, params: &TsneParams) -> Result<Embedding> {
    let n = features.nrows();
    if n < 5 {
        return Err(Error::Config(format!(
            "t-SNE needs at least 5 rows, got {n}"
        )));
    }
    if !(params.perplexity > 0.0 && params.perplexity < (n as f64 - 1.0) / 3.0) {
        return Err(Error::Config(format!(
            "perplexity {} infeasible for n={n}: need 0 < perplexity < (n-1)/3",
            params.perplexity
        )));
    }
    if params.iterations == 0 {
        return Err(Error::Config("t-SNE needs at least one iteration".to_string()));
    }

    let distances = pairwise_sq_distances(features);
    let p_cond = conditional_affinities(&distances, n, params.perplexity);
    let p = symmetrize(&p_cond, n);

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a * 1e-4, b * 1e-4]
        })
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut q_num = vec![0.0; n * n];
    let mut kl_trace = Vec::with_capacity(params.iterations);

    for iter in 0..params.iterations {
        // Student-t numerators and their sum
        let mut q_sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let num = 1.0 / (1.0 + dx * dx + dy * dy);
                q_num[i * n + j] = num;
                q_num[j * n + i] = num;
                q_sum += 2.0 * num;
            }
        }

        let exaggeration = if iter < params.exaggeration_iters {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < params.exaggeration_iters { 0.5 } else { 0.8 };

        let mut kl = 0.0;
        for i in 0..n {
            let mut grad = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pij = p[i * n + j];
                let num = q_num[i * n + j];
                let qij = (num / q_sum).max(P_FLOOR);
                let force = 4.0 * (exaggeration * pij - qij) * num;
                grad[0] += force * (y[i][0] - y[j][0]);
                grad[1] += force * (y[i][1] - y[j][1]);
                kl += pij * (pij / qij).ln();
            }
            // per-parameter gains: grow when the gradient keeps pushing
            // against the velocity, shrink when it agrees
            for k in 0..2 {
                gains[i][k] = if grad[k].signum() != velocity[i][k].signum() {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                velocity[i][k] =
                    momentum * velocity[i][k] - params.learning_rate * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += velocity[i][0];
            y[i][1] += velocity[i][1];
        }
        if !y.iter().all(|c| c[0].is_finite() && c[1].is_finite()) {
            return Err(Error::Numerical(format!(
                "t-SNE diverged at iteration {iter}"
            )));
        }
        kl_trace.push(kl);
    }

    let kl_divergence = kl_trace.last().copied().unwrap_or(f64::NAN);
    Ok(Embedding {
        coords: y,
        perplexity: params.perplexity,
        seed: params.seed,
        kl_divergence,
        kl_trace,
    })
}
