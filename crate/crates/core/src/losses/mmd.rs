use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, TensorError};
use crate::error::{Error, Result};

/// How [`KernelSpec::bandwidths`] is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthSelection {
    /// The values are the kernel widths σ_m.
    Fixed,
    /// The values multiply the median pairwise squared distance of the
    /// pooled batch to give σ_m².
    MedianHeuristic,
}

/// A sum of Gaussian kernels `Σ_m exp(-||a - b||² / (2 σ_m²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub selection: BandwidthSelection,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            bandwidths: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            selection: BandwidthSelection::MedianHeuristic,
        }
    }
}

impl KernelSpec {
    pub fn fixed(sigmas: Vec<f64>) -> KernelSpec {
        KernelSpec {
            bandwidths: sigmas,
            selection: BandwidthSelection::Fixed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() {
            return Err(Error::config("kernel.bandwidths", "at least one bandwidth is required"));
        }
        if let Some(b) = self.bandwidths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::config(
                "kernel.bandwidths",
                format!("bandwidths must be positive and finite, got {b}"),
            ));
        }
        Ok(())
    }

    /// Kernel widths σ_m for a pair of feature batches. Treated as constants
    /// by the gradient.
    pub fn resolve(&self, r: &Tensor, r_prime: &Tensor) -> Result<Vec<f64>> {
        self.validate()?;
        match self.selection {
            BandwidthSelection::Fixed => Ok(self.bandwidths.clone()),
            BandwidthSelection::MedianHeuristic => {
                let med = median_sq_distance(r, r_prime);
                let med = if med > 0.0 { med } else { 1.0 };
                Ok(self.bandwidths.iter().map(|m| (m * med).sqrt()).collect())
            }
        }
    }
}

/// Median of `||x_i - x_j||²` over unordered pairs of the stacked rows.
fn median_sq_distance(r: &Tensor, r_prime: &Tensor) -> f64 {
    let d = r.shape()[1];
    let rows: Vec<&[f64]> = r.data().chunks(d).chain(r_prime.data().chunks(d)).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// `exp(-||a - b||² / (2σ²))`.
pub fn gaussian_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TensorError::Domain {
            op: "gaussian_kernel",
            index: 0,
            value: sigma,
        }
        .into());
    }
    if a.len() != b.len() {
        return Err(TensorError::Shape {
            op: "gaussian_kernel",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        }
        .into());
    }
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// Sum of [`gaussian_kernel`] over several widths.
pub fn kernel_sum(a: &[f64], b: &[f64], sigmas: &[f64]) -> Result<f64> {
    sigmas.iter().map(|&s| gaussian_kernel(a, b, s)).sum()
}

fn summed_kernel(sq_dists: &Tensor, sigmas: &[f64]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &s in sigmas {
        let k = sq_dists.scale(-1.0 / (2.0 * s * s)).exp();
        total = Some(match total {
            None => k,
            Some(t) => t.add(&k)?,
        });
    }
    Ok(total.expect("at least one bandwidth").sum())
}

/// MMD between two equally sized feature batches:
/// `(1/N) [ΣΣ k(R_i,R_j) - 2 ΣΣ k(R_i,R'_j) + ΣΣ k(R'_i,R'_j)]^½`,
/// all `i = j` terms included. The bracket is clamped at zero before the
/// root, so identical batches give exactly zero with zero gradient.
pub fn mmd_loss(r: &Tensor, r_prime: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    let (n, d) = match (r.shape(), r_prime.shape()) {
        ([n, d], [n2, d2]) if d == d2 => {
            if n != n2 {
                return Err(Error::Contract(format!(
                    "mmd_loss needs equal batch sizes, got {n} and {n2}"
                )));
            }
            (*n, *d)
        }
        _ => {
            return Err(TensorError::Shape {
                op: "mmd_loss",
                lhs: r.shape().to_vec(),
                rhs: r_prime.shape().to_vec(),
            }
            .into())
        }
    };
    debug_assert!(d > 0);
    let sigmas = spec.resolve(r, r_prime)?;
    let kxx = summed_kernel(&r.pairwise_sq_dist(r)?, &sigmas)?;
    let kxy = summed_kernel(&r.pairwise_sq_dist(r_prime)?, &sigmas)?;
    let kyy = summed_kernel(&r_prime.pairwise_sq_dist(r_prime)?, &sigmas)?;
    let bracket = kxx.sub(&kxy.scale(2.0))?.add(&kyy)?;
    Ok(bracket.max_with_scalar(0.0).sqrt()?.scale(1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    /// Naive pairwise sums with explicit kernel evaluations.
    fn oracle(r: &[Vec<f64>], rp: &[Vec<f64>], sigmas: &[f64]) -> f64 {
        let k = |a: &[f64], b: &[f64]| -> f64 {
            sigmas
                .iter()
                .map(|s| {
                    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
                    (-sq / (2.0 * s * s)).exp()
                })
                .sum()
        };
        let n = r.len();
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                xx += k(&r[i], &r[j]);
                xy += k(&r[i], &rp[j]);
                yy += k(&rp[i], &rp[j]);
            }
        }
        (xx - 2.0 * xy + yy).max(0.0).sqrt() / n as f64
    }

    fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0) + shift).collect())
            .collect()
    }

    #[test]
    fn kernel_examples() {
        let a = [0.3, -1.2];
        assert_eq!(gaussian_kernel(&a, &a, 0.7).unwrap(), 1.0);
        let k = gaussian_kernel(&[0.0], &[1.0], 1.0).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.6065).abs() < 1e-4);
        assert_eq!(kernel_sum(&a, &a, &[0.5, 1.0, 2.0]).unwrap(), 3.0);
        assert!(gaussian_kernel(&a, &a, 0.0).is_err());
        assert!(gaussian_kernel(&a, &a, -1.0).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::default().validate().is_ok());
        assert!(KernelSpec::fixed(vec![]).validate().is_err());
        assert!(KernelSpec::fixed(vec![1.0, 0.0]).validate().is_err());
    }

    #[test]
    fn two_point_hand_case() {
        let r = Tensor::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let rp = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let got = mmd_loss(&r, &rp, &KernelSpec::fixed(vec![1.0])).unwrap().item();
        let bracket = 4.0 - 2.0 * 4.0 * (-0.5f64).exp() + 4.0;
        assert!((got - bracket.sqrt() / 2.0).abs() < 1e-12);
        let want = oracle(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![1.0]], &[1.0]);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn identical_batches_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::from_rows(&rows(&mut rng, 6, 3, 0.0)).unwrap();
        let m = mmd_loss(&r, &r.clone(), &KernelSpec::default()).unwrap();
        assert_eq!(m.item(), 0.0);
    }

    #[test]
    fn matches_oracle_with_symmetry_and_nonnegativity() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=8);
            let d = rng.random_range(1..=4);
            let a = rows(&mut rng, n, d, 0.0);
            let shift = rng.random_range(0.0..1.0);
            let b = rows(&mut rng, n, d, shift);
            let count = rng.random_range(1..4);
            let sigmas: Vec<f64> = (0..count).map(|_| rng.random_range(0.3..2.0)).collect();
            let spec = KernelSpec::fixed(sigmas.clone());
            let ta = Tensor::from_rows(&a).unwrap();
            let tb = Tensor::from_rows(&b).unwrap();
            let ab = mmd_loss(&ta, &tb, &spec).unwrap().item();
            let ba = mmd_loss(&tb, &ta, &spec).unwrap().item();
            assert!((ab - oracle(&a, &b, &sigmas)).abs() < 1e-12, "seed {seed}");
            assert!((ab - ba).abs() < 1e-12);
            assert!(ab >= 0.0);
            assert_eq!(mmd_loss(&ta, &ta, &spec).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn equals_the_biased_two_sample_statistic() {
        // Mean-embedding form: MMD_b² = mean k(x,x') + mean k(y,y') - 2 mean k(x,y).
        // The unbiased U-statistic drops the diagonal and differs.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = rows(&mut rng, 5, 2, 0.0);
        let b = rows(&mut rng, 5, 2, 0.5);
        let s = [0.8];
        let mean_k = |x: &[Vec<f64>], y: &[Vec<f64>], skip_diag: bool| {
            let mut total = 0.0;
            let mut count = 0.0;
            for (i, xi) in x.iter().enumerate() {
                for (j, yj) in y.iter().enumerate() {
                    if skip_diag && i == j {
                        continue;
                    }
                    total += kernel_sum(xi, yj, &s).unwrap();
                    count += 1.0;
                }
            }
            total / count
        };
        let biased = mean_k(&a, &a, false) + mean_k(&b, &b, false) - 2.0 * mean_k(&a, &b, false);
        let unbiased = mean_k(&a, &a, true) + mean_k(&b, &b, true) - 2.0 * mean_k(&a, &b, false);
        let got = mmd_loss(
            &Tensor::from_rows(&a).unwrap(),
            &Tensor::from_rows(&b).unwrap(),
            &KernelSpec::fixed(s.to_vec()),
        )
        .unwrap()
        .item();
        assert!((got - biased.sqrt()).abs() < 1e-12);
        assert!((got * got - unbiased).abs() > 1e-6);
    }

    #[test]
    fn median_heuristic_scales_with_the_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rows(&mut rng, 4, 2, 0.0);
        let b = rows(&mut rng, 4, 2, 0.3);
        let (ta, tb) = (Tensor::from_rows(&a).unwrap(), Tensor::from_rows(&b).unwrap());
        let mut all: Vec<f64> = Vec::new();
        let pooled: Vec<&Vec<f64>> = a.iter().chain(&b).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                all.push(pooled[i].iter().zip(pooled[j]).map(|(x, y)| (x - y).powi(2)).sum());
            }
        }
        all.sort_by(f64::total_cmp);
        let med = 0.5 * (all[13] + all[14]);
        let sig = KernelSpec::default().resolve(&ta, &tb).unwrap();
        for (s, m) in sig.iter().zip([0.25, 0.5, 1.0, 2.0, 4.0]) {
            assert!((s * s - m * med).abs() < 1e-12);
        }
        let got = mmd_loss(&ta, &tb, &KernelSpec::default()).unwrap().item();
        assert!((got - oracle(&a, &b, &sig)).abs() < 1e-12);
    }

    #[test]
    fn batch_size_mismatch_is_a_contract_error() {
        let a = Tensor::zeros(&[3, 2]).unwrap();
        let b = Tensor::zeros(&[4, 2]).unwrap();
        assert!(matches!(
            mmd_loss(&a, &b, &KernelSpec::default()),
            Err(Error::Contract(_))
        ));
        let c = Tensor::zeros(&[3, 3]).unwrap();
        assert!(matches!(
            mmd_loss(&a, &c, &KernelSpec::default()),
            Err(Error::Tensor(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frozen = Tensor::from_rows(&rows(&mut rng, 5, 3, 0.0)).unwrap();
            let student: Vec<f64> = rows(&mut rng, 5, 3, 0.4).concat();
            let spec = KernelSpec::fixed(vec![0.5, 1.0, 2.0]);
            let check = check_gradients(&[(vec![5, 3], student)], 1e-5, |p| mmd_loss(&frozen, &p[0], &spec)).unwrap();
            assert!(check.max_rel_error < 1e-4, "seed {seed}: {check:?}");
            assert!(!frozen.requires_grad());
        }
    }
}
