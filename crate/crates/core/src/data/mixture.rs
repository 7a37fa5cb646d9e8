use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Rng};

/// Isotropic Gaussian clusters with standard-normal centers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
}

pub(crate) fn gaussian_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl Mixture {
    pub fn random(clusters: usize, dim: usize, spread: f64, rng: &mut Rng) -> Self {
        Mixture {
            centers: (0..clusters).map(|_| gaussian_vector(dim, rng)).collect(),
            spread,
        }
    }

    /// Draws `count` new centers, each at least `min_gap` away from every
    /// center of `self` (rejection sampling).
    pub fn disjoint_centers(&self, count: usize, min_gap: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let c = gaussian_vector(dim, rng);
            if self.centers.iter().all(|t| distance(t, &c) >= min_gap) {
                out.push(c);
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn sample(&self, cluster: usize, rng: &mut Rng) -> Vec<f64> {
        sample_around(&self.centers[cluster], self.spread, rng)
    }

    /// Minimum distance between two distinct centers.
    pub fn min_center_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.centers.len() {
            for j in i + 1..self.centers.len() {
                best = best.min(distance(&self.centers[i], &self.centers[j]));
            }
        }
        best
    }
}

pub(crate) fn sample_around(center: &[f64], spread: f64, rng: &mut Rng) -> Vec<f64> {
    center
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            c + spread * z
        })
        .collect()
}

/// Class labels `0..p` repeated to length `n` and shuffled, so class counts
/// differ by at most one.
pub(crate) fn balanced_labels(p: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % p).collect();
    labels.shuffle(rng);
    labels
}

/// `n` samples from `p` isotropic clusters with seeded centers.
pub fn gen_gaussian_mixture(p: usize, input_dim: usize, n: usize, seed: u64, spread: f64) -> Result<(Matrix, Vec<usize>)> {
    if p < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if n < p {
        return Err(Error::invalid(format!("n = {n} is smaller than the class count {p}")));
    }
    if input_dim == 0 {
        return Err(Error::invalid("input_dim must be positive"));
    }
    let mut rng = rng::seeded(rng::derive_seed(seed, "mixture"));
    let mixture = Mixture::random(p, input_dim, spread, &mut rng);
    let labels = balanced_labels(p, n, &mut rng);
    let mut x = Matrix::zeros(0, input_dim);
    for &label in &labels {
        x.push_row(&mixture.sample(label, &mut rng))?;
    }
    Ok((x, labels))
}
