//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-7;

/// `|a - b| / max(|a|, |b|, GRAD_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` at coordinate `index`.
pub fn central_difference(f: impl Fn(&Tensor) -> f64, point: &Tensor, index: usize, step: f64) -> f64 {
    let mut probe = point.clone();
    probe.data_mut()[index] = point.data()[index] + step;
    let plus = f(&probe);
    probe.data_mut()[index] = point.data()[index] - step;
    let minus = f(&probe);
    (plus - minus) / (2.0 * step)
}

/// Compares `analytic` against central differences of `f` at `point`.
///
/// When the tensor has more than `max_coords` entries a seeded random subset of
/// that size is checked.
pub fn check_gradient(
    f: impl Fn(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> GradCheckReport {
    assert_eq!(point.shape(), analytic.shape());
    let coords: Vec<usize> = if point.len() <= max_coords {
        (0..point.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, point.len(), max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in coords {
        let numeric = central_difference(&f, point, i, step);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let analytic = p.map(|x| 2.0 * x);
        let r = check_gradient(|t| t.sq_norm(), &p, &analytic, 1e-4, 10, 0);
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let analytic = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let r = check_gradient(|t| t.sq_norm(), &p, &analytic, 1e-4, 10, 0);
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn subset_is_seeded() {
        let p = Tensor::zeros(&[100]);
        let a = Tensor::zeros(&[100]);
        let r = check_gradient(|t| t.sum(), &p, &a, 1e-4, 7, 3);
        assert_eq!(r.checked, 7);
    }
}
