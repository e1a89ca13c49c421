//! Exact t-SNE: perplexity-calibrated Gaussian affinities in feature space,
//! Student-t affinities in the plane, KL minimized by momentum descent.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ENTROPY_TOLERANCE: f64 = 1e-8;
pub const MAX_SEARCH_STEPS: usize = 200;
pub const MIN_PERPLEXITY: f64 = 2.0;

/// Symmetric joint affinities with zero diagonal summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::Contract(format!(
                "{} entries for a {n}×{n} affinity matrix",
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Contract("affinities must be finite and non-negative".into()));
        }
        for i in 0..n {
            if p[i * n + i] != 0.0 {
                return Err(Error::Contract(format!("diagonal entry {i} is non-zero")));
            }
            for j in 0..i {
                if (p[i * n + j] - p[j * n + i]).abs() > 1e-12 {
                    return Err(Error::Contract(format!("affinities ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Contract(format!("affinities sum to {total}")));
        }
        Ok(AffinityMatrix { n, p })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }
}

fn squared_distances(features: &Tensor<f64>) -> Result<(usize, Vec<f64>)> {
    let [n, d] = features.shape()[..] else {
        return Err(Error::shape("tsne", &[features.shape()], "features must be n×d"));
    };
    if !features.all_finite() {
        return Err(Error::Numerical("features contain non-finite values".into()));
    }
    let x = features.data();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let s: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i * n + j] = s;
            dist[j * n + i] = s;
        }
    }
    Ok((n, dist))
}

/// Gaussian row `exp(−β·(d − d_min))` normalized, and its entropy in bits.
fn gaussian_row(dist: &[f64], skip: usize, beta: f64, row: &mut [f64]) -> f64 {
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (r, &d)) in row.iter_mut().zip(dist).enumerate() {
        *r = if j == skip { 0.0 } else { (-beta * (d - d_min)).exp() };
        z += *r;
    }
    let mut h = 0.0;
    for r in row.iter_mut() {
        *r /= z;
        if *r > 0.0 {
            h -= *r * r.log2();
        }
    }
    h
}

/// Row-conditional affinities `p_{j|i}` whose entropies equal
/// `log2(perplexity)`, found by bisection on the Gaussian precision.
pub fn conditional_affinities(features: &Tensor<f64>, perplexity: f64) -> Result<Tensor<f64>> {
    if !(perplexity >= 1.0 && perplexity.is_finite()) {
        return Err(Error::Config(format!(
            "perplexity must be at least 1, got {perplexity}"
        )));
    }
    let (n, dist) = squared_distances(features)?;
    if n < 2 {
        return Err(Error::Config("t-SNE needs at least two points".into()));
    }
    let target = perplexity.log2();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let row = &mut cond[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut converged = false;
        for _ in 0..MAX_SEARCH_STEPS {
            let h = gaussian_row(d, i, beta, row);
            let diff = h - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                converged = true;
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + hi) / 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        if !converged {
            return Err(Error::Numerical(format!(
                "bandwidth search for row {i} did not reach entropy {target:.6} bits in {MAX_SEARCH_STEPS} steps"
            )));
        }
    }
    Tensor::new(vec![n, n], cond)
}

/// Joint affinities `(P + Pᵀ) / 2n` of `n × d` features.
pub fn perplexity_affinities(features: &Tensor<f64>, perplexity: f64) -> Result<AffinityMatrix> {
    let n = features.shape().first().copied().unwrap_or(0);
    if n < 4 {
        return Err(Error::Config(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let max = (n - 1) as f64 / 3.0;
    if !(MIN_PERPLEXITY..=max).contains(&perplexity) {
        return Err(Error::Config(format!(
            "perplexity {perplexity} infeasible for {n} points (allowed {MIN_PERPLEXITY} to {max:.3})"
        )));
    }
    let cond = conditional_affinities(features, perplexity)?;
    let c = cond.data();
    let scale = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / scale;
        }
    }
    AffinityMatrix::new(n, p)
}

/// `Σ p·ln(p/q)` over the entries with `p > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("{} vs {} entries", p.len(), q.len())));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::domain("kl_divergence", "q vanishes where p is positive"));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRun {
    /// `n × 2` coordinates.
    pub y: Tensor<f64>,
    /// KL divergence against the un-exaggerated affinities at the start of
    /// every iteration.
    pub kl_trace: Vec<f64>,
    pub config: TsneConfig,
}

/// Momentum gradient descent on the KL divergence, starting from a seeded
/// Gaussian cloud.
pub fn tsne_optimize(p: &AffinityMatrix, cfg: &TsneConfig) -> Result<EmbeddingRun> {
    if cfg.iterations == 0 {
        return Err(Error::Config("t-SNE needs at least one iteration".into()));
    }
    let n = p.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(format!("init std: {e}")))?;
    let mut y: Vec<f64> = (0..2 * n).map(|_| normal.sample(&mut rng)).collect();
    let mut velocity = vec![0.0; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        // Student-t kernel
        let mut z = 0.0;
        for i in 0..n {
            for j in 0..i {
                let dy0 = y[2 * i] - y[2 * j];
                let dy1 = y[2 * i + 1] - y[2 * j + 1];
                let k = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[i * n + j] = k;
                num[j * n + i] = k;
                z += 2.0 * k;
            }
        }
        let mut kl = 0.0;
        for (i, row) in p.p.chunks_exact(n).enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                if pij > 0.0 {
                    kl += pij * (pij * z / num[i * n + j]).ln();
                }
            }
        }
        kl_trace.push(kl);

        let exaggeration = if it < cfg.exaggeration_iters {
            cfg.exaggeration
        } else {
            1.0
        };
        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let k = num[i * n + j];
                let w = (exaggeration * p.p[i * n + j] - k / z) * k;
                g0 += w * (y[2 * i] - y[2 * j]);
                g1 += w * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * g0;
            grad[2 * i + 1] = 4.0 * g1;
        }
        if grad.iter().any(|g| !g.is_finite()) || !kl.is_finite() {
            return Err(Error::Numerical(format!("non-finite t-SNE gradient at iteration {it}")));
        }
        let momentum = if it < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        for ((v, yv), g) in velocity.iter_mut().zip(y.iter_mut()).zip(&grad) {
            *v = momentum * *v - cfg.learning_rate * g;
            *yv += *v;
        }
    }
    Ok(EmbeddingRun {
        y: Tensor::new(vec![n, 2], y)?,
        kl_trace,
        config: *cfg,
    })
}

/// `id,label,y1,y2` rows.
pub fn write_embedding_csv(out: impl Write, y: &Tensor<f64>, labels: &[usize]) -> Result<()> {
    if y.shape() != [labels.len(), 2] {
        return Err(Error::shape(
            "embedding csv",
            &[y.shape(), &[labels.len()]],
            "need one 2-D point per label",
        ));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "label", "y1", "y2"])?;
    for (i, &l) in labels.iter().enumerate() {
        let r = y.row(i);
        w.write_record([i.to_string(), l.to_string(), r[0].to_string(), r[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<embedding csv>", e))?;
    Ok(())
}

/// Mean silhouette coefficient of the rows of `points` under `labels`,
/// with Euclidean distance. Points alone in their class score 0.
pub fn silhouette(points: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let (n, dist) = squared_distances(points)?;
    if labels.len() != n {
        return Err(Error::Contract(format!("{n} points for {} labels", labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Contract(
            "silhouette needs at least two populated classes".into(),
        ));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist[i * n + j].sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_features(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_fn(vec![n, d], |_| normal.sample(&mut rng))
    }

    #[test]
    fn equidistant_triple() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.5, 3f64.sqrt() / 2.0]]).unwrap();
        let c = conditional_affinities(&x, 2.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 0.5 };
                assert!((c.get(&[i, j]).unwrap() - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicates_bind_tightly() {
        let x = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![10.5, 0.1],
            vec![11.2, -0.4],
            vec![9.7, 0.9],
            vec![10.9, 1.6],
        ])
        .unwrap();
        let c = conditional_affinities(&x, 1.05).unwrap();
        assert!(c.get(&[0, 1]).unwrap() > 0.95);
        let p = perplexity_affinities(&x, 2.0).unwrap();
        let best = (1..7).max_by(|&a, &b| p.get(0, a).total_cmp(&p.get(0, b))).unwrap();
        assert_eq!(best, 1);
    }

    #[test]
    fn row_entropies_hit_target() {
        let x = random_features(10, 4, 3);
        let c = conditional_affinities(&x, 3.0).unwrap();
        for i in 0..10 {
            let h: f64 = c.row(i).iter().filter(|&&v| v > 0.0).map(|v| -v * v.log2()).sum();
            assert!((h - 3f64.log2()).abs() < 1e-5, "row {i}: {h}");
        }
    }

    #[test]
    fn feasibility_checks() {
        let x = random_features(10, 3, 1);
        assert!(matches!(perplexity_affinities(&x, 3.5), Err(Error::Config(_))));
        assert!(matches!(perplexity_affinities(&x, 1.5), Err(Error::Config(_))));
        assert!(matches!(
            perplexity_affinities(&random_features(3, 2, 1), 2.0),
            Err(Error::Config(_))
        ));
        assert!(perplexity_affinities(&x, 3.0).is_ok());
    }

    #[test]
    fn silhouette_hand_case() {
        // classes {0, 1} and {10}: a = 1, b = 10 and 9 for the pair, lone point scores 0
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        let s = silhouette(&x, &[0, 0, 1]).unwrap();
        let want = ((10.0 - 1.0) / 10.0 + (9.0 - 1.0) / 9.0) / 3.0;
        assert!((s - want).abs() < 1e-15);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = perplexity_affinities(&random_features(12, 3, 4), 3.0).unwrap();
        assert!(kl_divergence(p.as_slice(), p.as_slice()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let jitter = Normal::new(0.0, 0.05).unwrap();
        let x = Tensor::from_fn(vec![100, 5], |k| {
            let offset = if k / 5 < 50 { 0.0 } else { 10.0 };
            offset + jitter.sample(&mut rng)
        });
        let p = perplexity_affinities(&x, 30.0).unwrap();
        let cfg = TsneConfig {
            seed: 2,
            learning_rate: 100.0,
            ..TsneConfig::default()
        };
        let run = tsne_optimize(&p, &cfg).unwrap();
        let centroid = |r: std::ops::Range<usize>| {
            let k = r.len() as f64;
            let (mut a, mut b) = (0.0, 0.0);
            for i in r {
                a += run.y.row(i)[0];
                b += run.y.row(i)[1];
            }
            (a / k, b / k)
        };
        let radius = |r: std::ops::Range<usize>, c: (f64, f64)| {
            r.map(|i| ((run.y.row(i)[0] - c.0).powi(2) + (run.y.row(i)[1] - c.1).powi(2)).sqrt())
                .fold(0.0, f64::max)
        };
        let (c0, c1) = (centroid(0..50), centroid(50..100));
        let between = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
        let within = radius(0..50, c0).max(radius(50..100, c1));
        assert!(between > 5.0 * within, "{between} vs {within}");
        let end_of_exaggeration = run.kl_trace[cfg.exaggeration_iters];
        assert!(run.kl_trace.last().unwrap() < &end_of_exaggeration);
        assert!(run.kl_trace.iter().all(|k| k.is_finite() && *k >= 0.0));
        let again = tsne_optimize(&p, &cfg).unwrap();
        assert_eq!(again.y, run.y);
    }
}
