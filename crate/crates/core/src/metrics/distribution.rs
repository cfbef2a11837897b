use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed::derive_seed;

fn check_dims(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    ensure!(
        a.ncols() == b.ncols(),
        "feature dimensions differ: {} vs {}",
        a.ncols(),
        b.ncols()
    );
    ensure!(a.ncols() > 0, "features must have at least one dimension");
    Ok(())
}

fn mean_and_cov(x: &ArrayView2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mu = x.mean_axis(Axis(0)).unwrap().to_vec();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in x.rows() {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)` of the Gaussians fitted to the
/// rows of `a` and `b`.
pub fn frechet_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(&a, &b)?;
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "Fréchet distance needs at least 2 samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let (mu_a, ca) = mean_and_cov(&a);
    let (mu_b, cb) = mean_and_cov(&b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    // Tr (Σa Σb)^½ = Tr (√Σa Σb √Σa)^½, the inner matrix being symmetric PSD.
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let ev = SymmetricEigen::new(inner).eigenvalues;
    let tr_sqrt: f64 = ev
        .iter()
        .map(|&l| if l > -1e-6 { l.max(0.0).sqrt() } else { 0.0 })
        .sum();
    let d = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

fn poly_kernel(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    let d = x.len() as f64;
    (x.dot(&y) / d + 1.0).powi(3)
}

/// Unbiased `MMD²` of two equally sized samples with the cubic polynomial
/// kernel: the mean over ordered pairs `i ≠ j` of
/// `k(xᵢ,xⱼ) + k(yᵢ,yⱼ) − k(xᵢ,yⱼ) − k(xⱼ,yᵢ)`.
pub fn mmd_unbiased(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_dims(&x, &y)?;
    let m = x.nrows();
    ensure!(m == y.nrows(), "unbiased MMD needs equal sample sizes");
    if m < 2 {
        return Err(Error::InsufficientSamples(
            "unbiased MMD needs at least 2 samples".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += poly_kernel(x.row(i), x.row(j)) + poly_kernel(y.row(i), y.row(j))
                    - poly_kernel(x.row(i), y.row(j))
                    - poly_kernel(x.row(j), y.row(i));
            }
        }
    }
    Ok(total / (m * (m - 1)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    /// Sample standard deviation over subsets; 0 for a single subset.
    pub std: f64,
    pub subset_size: usize,
    pub n_subsets: usize,
    pub seed: u64,
}

/// Averages [`mmd_unbiased`] over `n_subsets` seeded subsamples of size
/// `subset_size` from each set. Sets of equal size are subsampled at the
/// same positions.
pub fn kid(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<KidResult> {
    check_dims(&a, &b)?;
    ensure!(n_subsets >= 1, "n_subsets must be positive");
    if subset_size < 2 || a.nrows() < subset_size || b.nrows() < subset_size {
        return Err(Error::InsufficientSamples(format!(
            "KID subsets of {subset_size} need at least that many samples per set, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut vals = Vec::with_capacity(n_subsets);
    for s in 0..n_subsets {
        let sub_seed = derive_seed(seed, "kid-subset", s as u64);
        let ia = sample(
            &mut ChaCha8Rng::seed_from_u64(sub_seed),
            a.nrows(),
            subset_size,
        )
        .into_vec();
        let ib = sample(
            &mut ChaCha8Rng::seed_from_u64(sub_seed),
            b.nrows(),
            subset_size,
        )
        .into_vec();
        let xa = a.select(Axis(0), &ia);
        let xb = b.select(Axis(0), &ib);
        vals.push(mmd_unbiased(xa.view(), xb.view())?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(KidResult {
        mean,
        std,
        subset_size,
        n_subsets,
        seed,
    })
}

fn sq_dist(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Median pairwise Euclidean distance over the pooled samples; 1 when that
/// median is zero.
pub fn median_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_dims(&a, &b)?;
    let rows: Vec<ArrayView1<f64>> = a.rows().into_iter().chain(b.rows()).collect();
    ensure!(
        rows.len() >= 2,
        "bandwidth heuristic needs at least two samples"
    );
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
    pub bandwidth_from_median: bool,
}

/// Biased `MMD²` with the kernel `exp(−‖x−y‖²/(2σ²))`. Without a bandwidth
/// the median heuristic is used. Kernel sums are accumulated in sorted
/// order so that swapping the arguments gives the identical value.
pub fn gaussian_mmd(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    bandwidth: Option<f64>,
) -> Result<MmdResult> {
    check_dims(&a, &b)?;
    ensure!(a.nrows() > 0 && b.nrows() > 0, "MMD needs nonempty sets");
    let (sigma, from_median) = match bandwidth {
        Some(s) => {
            ensure!(
                s > 0.0 && s.is_finite(),
                "bandwidth must be positive, got {s}"
            );
            (s, false)
        }
        None => (median_bandwidth(a, b)?, true),
    };
    let k = |x: ArrayView1<f64>, y: ArrayView1<f64>| (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp();
    let block = |x: &ArrayView2<f64>, y: &ArrayView2<f64>| {
        let mut v = Vec::with_capacity(x.nrows() * y.nrows());
        for xi in x.rows() {
            for yj in y.rows() {
                v.push(k(xi, yj));
            }
        }
        sorted_sum(v) / (x.nrows() * y.nrows()) as f64
    };
    let (kaa, kbb, kab) = (block(&a, &a), block(&b, &b), block(&a, &b));
    Ok(MmdResult {
        value: (kaa + kbb) - 2.0 * kab,
        bandwidth: sigma,
        bandwidth_from_median: from_median,
    })
}
