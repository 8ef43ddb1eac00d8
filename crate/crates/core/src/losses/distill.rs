use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn check_pair(frozen: &Tensor, adaptive: &Tensor) -> Result<usize> {
    match (frozen.shape(), adaptive.shape()) {
        ([n, a], [n2, b]) if n == n2 && a == b => Ok(*n),
        _ => Err(crate::autodiff::TensorError::Shape {
            op: "distillation",
            lhs: frozen.shape().to_vec(),
            rhs: adaptive.shape().to_vec(),
        }
        .into()),
    }
}

/// Cross-entropy between temperature-softened teacher and student outputs
/// over the old classes: `-(1/N) Σ_x Σ_k p_k(x) log p'_k(x)`.
///
/// The teacher side is detached. No `T²` rescaling is applied.
pub fn distillation(frozen_logits: &Tensor, adaptive_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let n = check_pair(frozen_logits, adaptive_logits)?;
    let targets = frozen_logits.detach().softmax_rows(temperature)?;
    let log_student = adaptive_logits.log_softmax_rows(temperature)?;
    Ok(targets.mul(&log_student)?.sum().scale(-1.0 / n as f64))
}

/// Mean entropy of the softened teacher distribution: the minimum of
/// [`distillation`] over student logits.
pub fn soft_target_entropy(frozen_logits: &Tensor, temperature: f64) -> Result<f64> {
    let [n, _] = *frozen_logits.shape() else {
        return Err(Error::Contract("soft_target_entropy expects N×n logits".into()));
    };
    let p = frozen_logits.detach().softmax_rows(temperature)?;
    let logp = frozen_logits.detach().log_softmax_rows(temperature)?;
    Ok(-p.mul(&logp)?.sum().item() / n as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::losses::DEFAULT_TEMPERATURE;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn default_temperature_is_two() {
        assert_eq!(DEFAULT_TEMPERATURE, 2.0);
    }

    #[test]
    fn identical_logits_give_the_entropy() {
        let l = Tensor::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.0, 0.3, 0.1]]).unwrap();
        let d = distillation(&l, &l, 2.0).unwrap().item();
        let h = soft_target_entropy(&l, 2.0).unwrap();
        assert!((d - h).abs() < 1e-15);
    }

    #[test]
    fn hand_case_two_logits() {
        let frozen = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let adaptive = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let got = distillation(&frozen, &adaptive, 2.0).unwrap().item();
        let p = [sigmoid(1.0), sigmoid(-1.0)];
        let q = [sigmoid(-1.0), sigmoid(1.0)];
        let want = -(p[0] * q[0].ln() + p[1] * q[1].ln());
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn never_below_the_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..3)
                    .map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect())
                    .collect()
            };
            let f = Tensor::from_rows(&rows(&mut rng)).unwrap();
            let a = Tensor::from_rows(&rows(&mut rng)).unwrap();
            let d = distillation(&f, &a, 2.0).unwrap().item();
            assert!(d >= soft_target_entropy(&f, 2.0).unwrap() - 1e-12);
        }
    }

    #[test]
    fn mismatched_widths_are_rejected() {
        let f = Tensor::zeros(&[2, 3]).unwrap();
        let a = Tensor::zeros(&[2, 4]).unwrap();
        assert!(matches!(
            distillation(&f, &a, 2.0),
            Err(Error::Tensor(crate::autodiff::TensorError::Shape { .. }))
        ));
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let f = Tensor::param(&[1, 2], vec![0.3, 0.1]).unwrap();
        let a = Tensor::param(&[1, 2], vec![0.0, 1.0]).unwrap();
        distillation(&f, &a, 2.0).unwrap().backward().unwrap();
        assert!(f.grad().is_none());
        assert!(a.grad().is_some());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frozen: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let student: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let teacher = Tensor::new(&[4, 3], frozen).unwrap();
            let check =
                check_gradients(&[(vec![4, 3], student)], 1e-5, |p| distillation(&teacher, &p[0], 2.0)).unwrap();
            assert!(check.max_rel_error < 1e-4, "seed {seed}: {check:?}");
        }
    }
}
