//! K-means codebook training and nearest-centroid quantization.

use std::collections::HashSet;

use rand::Rng;

use super::SslError;
use crate::numerics::tape::nearest_centroids;
use crate::numerics::{Scalar, Tensor};

/// Learned codebook of centroid vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    centroids: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(centroids: Tensor<T>) -> Codebook<T> {
        assert_eq!(centroids.shape().len(), 2);
        assert!(centroids.all_finite());
        Codebook { centroids }
    }

    pub fn len(&self) -> usize {
        self.centroids.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    pub fn centroids(&self) -> &Tensor<T> {
        &self.centroids
    }

    pub fn centroid(&self, v: usize) -> &[T] {
        self.centroids.row(v)
    }
}

/// Result of a k-means run: the codebook plus the per-iteration distortion
/// (mean squared distance to the assigned centroid).
pub struct KmeansOutcome<T> {
    pub codebook: Codebook<T>,
    pub distortion: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
/// the point farthest from its assigned centroid.
pub fn kmeans_train<T: Scalar, R: Rng>(
    vectors: &Tensor<T>,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<KmeansOutcome<T>, SslError> {
    let n = vectors.shape()[0];
    let d = vectors.shape()[1];
    let data: Vec<f64> = vectors.data().iter().map(|v| v.to_f64()).collect();

    let distinct: HashSet<Vec<u64>> = (0..n)
        .map(|i| data[i * d..(i + 1) * d].iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(SslError::TooFewDistinctVectors {
            k,
            distinct: distinct.len(),
        });
    }

    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };

    // k-means++ seeding.
    let mut centroids = vec![0.0f64; k * d];
    let first = rng.gen_range(0..n);
    centroids[..d].copy_from_slice(&data[first * d..(first + 1) * d]);
    let mut min_d2 = vec![f64::INFINITY; n];
    for c in 1..k {
        for i in 0..n {
            let d2 = dist2(
                &data[i * d..(i + 1) * d],
                &centroids[(c - 1) * d..c * d],
            );
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
        let total: f64 = min_d2.iter().sum();
        let mut pick = first; // placeholder; always overwritten below
        if total > 0.0 {
            let threshold = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if acc >= threshold {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.gen_range(0..n);
        }
        centroids[c * d..(c + 1) * d].copy_from_slice(&data[pick * d..(pick + 1) * d]);
    }

    let mut distortion_log = Vec::with_capacity(iters);
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        // Assign.
        let mut distortion = 0.0;
        let mut point_d2 = vec![0.0f64; n];
        for i in 0..n {
            let row = &data[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for c in 0..k {
                let d2 = dist2(row, &centroids[c * d..(c + 1) * d]);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = c;
                }
            }
            assignment[i] = best;
            point_d2[i] = best_d2;
            distortion += best_d2;
        }
        distortion_log.push(distortion / n as f64);

        // Update; re-seed empty clusters to the globally farthest point.
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c * d + j] += data[i * d + j];
            }
        }
        let mut claimed: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|i| !claimed.contains(i))
                    .max_by(|&a, &b| point_d2[a].partial_cmp(&point_d2[b]).unwrap())
                    .unwrap();
                claimed.insert(far);
                centroids[c * d..(c + 1) * d]
                    .copy_from_slice(&data[far * d..(far + 1) * d]);
            }
        }
    }

    let centroid_values: Vec<T> = centroids.iter().map(|&v| T::from_f64(v)).collect();
    Ok(KmeansOutcome {
        codebook: Codebook::new(Tensor::from_vec(vec![k, d], centroid_values)),
        distortion: distortion_log,
    })
}

/// Nearest-centroid assignment (ties to the lowest index) plus the quantized
/// embeddings. The differentiable straight-through path lives on the tape
/// (`Tape::quantize`); this is the pure inference form.
pub fn quantize<T: Scalar>(
    latents: &Tensor<T>,
    codebook: &Codebook<T>,
) -> Result<(Vec<usize>, Tensor<T>), SslError> {
    let d = latents.shape()[latents.shape().len() - 1];
    if d != codebook.dim() {
        return Err(SslError::DimensionMismatch {
            dim: d,
            codebook_dim: codebook.dim(),
        });
    }
    let rows = latents.numel() / d;
    let tokens = nearest_centroids(latents.data(), codebook.centroids().data(), rows, d);
    let mut data = Vec::with_capacity(rows * d);
    for &t in &tokens {
        data.extend_from_slice(codebook.centroid(t));
    }
    Ok((tokens, Tensor::from_vec(vec![rows, d], data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_centroid_is_the_mean() {
        let v = Tensor::from_vec(vec![4, 2], vec![0.0f64, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = kmeans_train(&v, 1, 5, &mut rng).unwrap();
        assert_eq!(out.codebook.centroid(0), &[1.0, 1.0]);
    }

    #[test]
    fn two_far_points_become_the_centroids() {
        let v = Tensor::from_vec(vec![2, 2], vec![0.0f64, 0.0, 10.0, 10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = kmeans_train(&v, 2, 5, &mut rng).unwrap();
        let mut rows: Vec<Vec<f64>> =
            (0..2).map(|i| out.codebook.centroid(i).to_vec()).collect();
        rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(rows[0], vec![0.0, 0.0]);
        assert_eq!(rows[1], vec![10.0, 10.0]);
    }

    #[test]
    fn four_separated_clusters_assign_purely() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (li, c) in centers.iter().enumerate() {
            for _ in 0..100 {
                data.push(c[0] + 0.01 * rng.gen_range(-1.0..1.0));
                data.push(c[1] + 0.01 * rng.gen_range(-1.0..1.0));
                labels.push(li);
            }
        }
        let v = Tensor::from_vec(vec![400, 2], data);
        let out = kmeans_train(&v, 4, 20, &mut rng).unwrap();
        let (tokens, _) = quantize(&v, &out.codebook).unwrap();
        // Purity: most common token per generator label must dominate.
        let mut correct = 0usize;
        for li in 0..4 {
            let mut counts = [0usize; 4];
            for (t, &l) in tokens.iter().zip(&labels) {
                if l == li {
                    counts[*t] += 1;
                }
            }
            correct += counts.iter().max().unwrap();
        }
        assert!(correct as f64 / 400.0 >= 0.99);
    }

    #[test]
    fn distortion_is_monotone_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = Tensor::from_vec(vec![200, 3], data);
        let out = kmeans_train(&v, 8, 15, &mut rng).unwrap();
        for pair in out.distortion.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-12,
                "distortion increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn too_few_distinct_vectors_rejected() {
        let v = Tensor::from_vec(vec![3, 2], vec![1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            kmeans_train(&v, 2, 5, &mut rng),
            Err(SslError::TooFewDistinctVectors { distinct: 1, .. })
        ));
    }

    #[test]
    fn quantize_ties_pick_lowest_index_and_idempotent() {
        let cb = Codebook::new(Tensor::from_vec(vec![2, 1], vec![1.0f64, 3.0]));
        // 2.0 is equidistant: token 0 wins.
        let z = Tensor::from_vec(vec![1, 1], vec![2.0f64]);
        let (tokens, zq) = quantize(&z, &cb).unwrap();
        assert_eq!(tokens, vec![0]);
        let (tokens2, zq2) = quantize(&zq, &cb).unwrap();
        assert_eq!(tokens, tokens2);
        assert_eq!(zq, zq2);
    }

    #[test]
    fn distance_example_from_two_centroids() {
        let cb = Codebook::new(Tensor::from_vec(vec![2, 2], vec![0.0f64, 0.0, 1.0, 1.0]));
        let z = Tensor::from_vec(vec![1, 2], vec![0.9f64, 0.8]);
        let (tokens, _) = quantize(&z, &cb).unwrap();
        assert_eq!(tokens, vec![1]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cb = Codebook::new(Tensor::from_vec(vec![2, 3], vec![0.0f64; 6]));
        let z = Tensor::from_vec(vec![1, 2], vec![0.0f64; 2]);
        assert!(matches!(
            quantize(&z, &cb),
            Err(SslError::DimensionMismatch { .. })
        ));
    }
}
