//! Activation clustering: per class, project penultimate-layer activations
//! to a low dimension and force a 2-way split. A class whose samples are a
//! mix of genuine members and relabeled poisoned ones splits cleanly and
//! scores a conspicuously high silhouette.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::datasets::LabeledImageSet;
use crate::defenses::DefenseReport;
use crate::nn::{capture_activations, LayerId, Model, NnError};

/// Center the rows and project onto the top `dims` principal components.
pub fn pca_project(data: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let n = data.len();
    let d = data[0].len();
    let dims = dims.min(d);
    let mut mean = vec![0.0; d];
    for row in data {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::zeros(d, d);
    for row in data {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += xi * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n as f64 - 1.0).max(1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig: SymmetricEigen<f64, nalgebra::Dyn> = SymmetricEigen::new(cov);
    // eigenpairs sorted by descending eigenvalue
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    data.iter()
        .map(|row| {
            order[..dims]
                .iter()
                .map(|&k| {
                    let col = eig.eigenvectors.column(k);
                    row.iter().zip(&mean).zip(col.iter()).map(|((&x, &m), &e)| (x - m) * e).sum()
                })
                .collect()
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k = 2: best of `restarts` seeded random-point
/// initializations by inertia. Returns cluster assignments.
pub fn kmeans2(points: &[Vec<f64>], seed: u64, restarts: usize) -> Vec<usize> {
    let n = points.len();
    assert!(n >= 2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut centers = vec![points[idx[0]].clone(), points[idx[1]].clone()];
        let mut assign = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let a = if dist2(p, &centers[0]) <= dist2(p, &centers[1]) { 0 } else { 1 };
                if assign[i] != a {
                    assign[i] = a;
                    changed = true;
                }
            }
            for c in 0..2 {
                let members: Vec<&Vec<f64>> =
                    points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                let d = points[0].len();
                let mut m = vec![0.0; d];
                for p in &members {
                    for (mi, &v) in m.iter_mut().zip(p.iter()) {
                        *mi += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= members.len() as f64);
                centers[c] = m;
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&assign).map(|(p, &a)| dist2(p, &centers[a])).sum();
        if best.as_ref().is_none_or(|(bi, _)| inertia < *bi) {
            best = Some((inertia, assign));
        }
    }
    best.unwrap().1
}

/// Mean silhouette score (Euclidean). Samples in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let same: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == own).collect();
        let other: Vec<usize> = (0..n).filter(|&j| labels[j] != own).collect();
        if same.is_empty() || other.is_empty() {
            continue; // s(i) = 0
        }
        let a = same.iter().map(|&j| dist2(&points[i], &points[j]).sqrt()).sum::<f64>() / same.len() as f64;
        let b = other.iter().map(|&j| dist2(&points[i], &points[j]).sqrt()).sum::<f64>() / other.len() as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassClusterScore {
    pub class: usize,
    pub sample_count: usize,
    /// None when the class had fewer than 2 samples.
    pub silhouette: Option<f64>,
    /// Size of the smaller of the two clusters.
    pub minority_size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ActivationClusteringReport {
    pub scores: Vec<ClassClusterScore>,
    pub pca_dims: usize,
    pub seed: u64,
}

impl ActivationClusteringReport {
    /// Class with the highest silhouette — the defense's suspect.
    pub fn top_class(&self) -> Option<usize> {
        self.scores
            .iter()
            .filter_map(|s| s.silhouette.map(|v| (s.class, v)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, _)| c)
    }

    pub fn to_report(&self) -> DefenseReport {
        DefenseReport {
            defense: "activation-clustering".into(),
            threshold: f64::NAN,
            scores: serde_json::to_value(&self.scores).unwrap(),
            verdict: match self.top_class() {
                Some(c) => format!("highest silhouette at class {c}"),
                None => "no class had enough samples".into(),
            },
        }
    }

    pub fn csv_rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["class", "samples", "silhouette", "minority_size"];
        let rows = self
            .scores
            .iter()
            .map(|s| {
                vec![
                    format!("{}", s.class),
                    format!("{}", s.sample_count),
                    s.silhouette.map_or(String::new(), |v| format!("{v}")),
                    format!("{}", s.minority_size),
                ]
            })
            .collect();
        (header, rows)
    }
}

/// Run the defense over a labeled (possibly poisoned) training set.
pub fn activation_clustering(
    model: &Model,
    set: &LabeledImageSet,
    seed: u64,
) -> Result<ActivationClusteringReport, NnError> {
    const PCA_DIMS: usize = 10;
    const RESTARTS: usize = 10;
    let acts = capture_activations(model, set, LayerId::Hidden)?;
    let mut scores = Vec::with_capacity(set.class_count);
    for class in 0..set.class_count {
        let rows: Vec<Vec<f64>> = set
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| acts[i].clone())
            .collect();
        if rows.len() < 2 {
            scores.push(ClassClusterScore {
                class,
                sample_count: rows.len(),
                silhouette: None,
                minority_size: 0,
            });
            continue;
        }
        let projected = pca_project(&rows, PCA_DIMS);
        let labels = kmeans2(&projected, seed ^ class as u64, RESTARTS);
        let ones = labels.iter().filter(|&&l| l == 1).count();
        scores.push(ClassClusterScore {
            class,
            sample_count: rows.len(),
            silhouette: Some(silhouette(&projected, &labels)),
            minority_size: ones.min(labels.len() - ones),
        });
    }
    Ok(ActivationClusteringReport { scores, pca_dims: PCA_DIMS, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_blob(center: &[f64], spread: f64, n: usize, rng: &mut ChaCha20Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| {
                        // Box–Muller
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        c + spread * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn separated_blobs_score_high() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut pts = gaussian_blob(&vec![0.0; 10], 0.1, 30, &mut rng);
        pts.extend(gaussian_blob(&vec![50.0; 10], 0.1, 30, &mut rng));
        let labels = kmeans2(&pts, 0, 10);
        // k-means must recover the blobs exactly
        let first = labels[0];
        assert!(labels[..30].iter().all(|&l| l == first));
        assert!(labels[30..].iter().all(|&l| l != first));
        assert!(silhouette(&pts, &labels) > 0.9);
    }

    #[test]
    fn single_isotropic_blob_scores_low() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let pts = gaussian_blob(&vec![0.0; 10], 1.0, 60, &mut rng);
        let labels = kmeans2(&pts, 0, 10);
        let s = silhouette(&pts, &labels);
        assert!(s < 0.3, "forced split of one blob scored {s}");
        assert!(s > -0.1);
    }

    #[test]
    fn pca_recovers_dominant_direction() {
        // points on a line in 5-D plus tiny noise: 1 component carries
        // nearly all variance, so pairwise distances survive projection
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let dir = [1.0, 2.0, -1.0, 0.5, 3.0];
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| dir.iter().map(|&d| i as f64 * d + rng.gen_range(-0.01..0.01)).collect())
            .collect();
        let proj = pca_project(&pts, 1);
        let norm = |a: &[f64], b: &[f64]| dist2(a, b).sqrt();
        for i in 1..20 {
            let orig = norm(&pts[i], &pts[0]);
            let low = norm(&proj[i], &proj[0]);
            assert!((orig - low).abs() / orig < 0.01, "distance distorted: {orig} vs {low}");
        }
    }

    #[test]
    fn clustering_is_deterministic_and_skips_tiny_classes() {
        use crate::nn::ModelConfig;
        let mut set = crate::synth::generate(41, 4); // class 0 gets 5, others 4
        // reduce class 9 to a single sample
        let drop: Vec<usize> = set
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 9)
            .map(|(i, _)| i)
            .skip(1)
            .collect();
        let keep: Vec<usize> = (0..set.len()).filter(|i| !drop.contains(i)).collect();
        set = set.subset(&keep);

        let model = Model::init(ModelConfig::desk((28, 28, 1), 10, 5));
        let a = activation_clustering(&model, &set, 7).unwrap();
        let b = activation_clustering(&model, &set, 7).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let nine = &a.scores[9];
        assert_eq!(nine.sample_count, 1);
        assert!(nine.silhouette.is_none());
        for s in &a.scores[..9] {
            let v = s.silhouette.unwrap();
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
