use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel<S> {
    /// `[K, D]`.
    pub centroids: Tensor<S>,
}

/// A fitted model together with the within-cluster sum of squares after each
/// assignment step.
#[derive(Clone, Debug)]
pub struct KMeansFit<S> {
    pub model: KMeansModel<S>,
    pub objective: Vec<S>,
}

impl<S: Scalar> KMeansModel<S> {
    pub fn new(centroids: Tensor<S>) -> Result<Self> {
        if centroids.shape().len() != 2 || centroids.rows() < 2 {
            return Err(Error::Validation("k-means needs a [K, D] centroid matrix with K >= 2".into()));
        }
        centroids.check_finite("k-means centroids")?;
        Ok(Self { centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn assign_one(&self, x: &[S]) -> usize {
        nearest(&self.centroids, x).0
    }

    pub fn assign(&self, vectors: &Tensor<S>) -> Result<Vec<usize>> {
        if vectors.cols() != self.dim() {
            return Err(Error::Validation(format!(
                "k-means expects {}-dim vectors, got {}",
                self.dim(),
                vectors.cols()
            )));
        }
        Ok((0..vectors.rows()).map(|i| self.assign_one(vectors.row(i))).collect())
    }
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest<S: Scalar>(c: &Tensor<S>, x: &[S]) -> (usize, S) {
    let mut best = (0, S::infinity());
    for k in 0..c.rows() {
        let d = sq_dist(c.row(k), x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing (at most [`MAX_LLOYD_ITERS`]). Empty clusters are moved onto the
/// point currently farthest from its centroid.
pub fn kmeans_fit<S: Scalar>(vectors: &Tensor<S>, k: usize, seed: u64) -> Result<KMeansFit<S>> {
    let (n, d) = (vectors.rows(), vectors.cols());
    if k < 2 {
        return Err(Error::Config("k-means needs K >= 2".into()));
    }
    if n < k {
        return Err(Error::Validation(format!("k-means with K = {k} needs at least {k} vectors, got {n}")));
    }
    vectors.check_finite("k-means input")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Tensor::zeros(&[k, d]);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(vectors.row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(vectors.row(i), vectors.row(first)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(vectors.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(vectors.row(i), vectors.row(pick)).as_f64());
        }
    }

    let mut assign = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut obj = S::zero();
        let mut dists = vec![S::zero(); n];
        for i in 0..n {
            let (a, dd) = nearest(&centroids, vectors.row(i));
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
            dists[i] = dd;
            obj += dd;
        }
        objective.push(obj);
        if !changed {
            break;
        }
        let mut sums = Tensor::<S>::zeros(&[k, d]);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &v) in sums.row_mut(assign[i]).iter_mut().zip(vectors.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = S::one() / S::lit(counts[c] as f64);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centroids.row_mut(c).copy_from_slice(vectors.row(far));
                dists[far] = S::zero();
            }
        }
    }
    Ok(KMeansFit { model: KMeansModel::new(centroids)?, objective })
}
