//! Training objectives: the adversarial value, the variational terms, and the
//! alpha-budget penalty.
//!
//! Plain functions evaluate on values; [`graph`] records the same quantities
//! on a tape. Log-likelihood terms drop their additive constants.

use serde::{Deserialize, Serialize};

use crate::compositor::LayerImage;
use crate::error::{CganError, Result};
use crate::tensor::Tensor;

/// Lower clamp on probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

fn clamped_ln(p: f64) -> f64 {
    crate::autograd::clamp_below(p, PROB_EPS).ln()
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(CganError::Dimension(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// `Σ_i ln D(x_i) + ln(1 - D(G(z_i)))`; the discriminator ascends it, the generators descend it.
pub fn gan_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    same_len(d_real.len(), d_fake.len(), "real and fake batch sizes")?;
    for &p in d_real.iter().chain(d_fake) {
        if !(0.0..=1.0).contains(&p) {
            return Err(CganError::Domain(format!("probability {p} outside [0, 1]")));
        }
    }
    Ok(d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| clamped_ln(r) + clamped_ln(1.0 - f))
        .sum())
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`
pub fn kl_term(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    same_len(mu.len(), logvar.len(), "mu and logvar lengths")?;
    Ok(0.5
        * mu
            .iter()
            .zip(logvar)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>())
}

/// Unit-variance Gaussian log-likelihood of `x` around `xhat`: `-0.5 Σ (x - xhat)²`.
pub fn recon_pixel(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(CganError::Dimension(format!(
            "image {:?} vs reconstruction {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    Ok(-0.5 * sq_dist(x.data(), xhat.data()))
}

/// `ln N(feat_x | feat_xhat, I)` up to its constant: `-0.5 Σ (feat_x - feat_xhat)²`.
pub fn recon_feature(feat_x: &[f64], feat_xhat: &[f64]) -> Result<f64> {
    same_len(feat_x.len(), feat_xhat.len(), "feature lengths")?;
    Ok(-0.5 * sq_dist(feat_x, feat_xhat))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-item components of the variational loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeTerms {
    pub kl: f64,
    pub recon_pixel: f64,
    pub recon_feature: f64,
}

/// `Σ_i kl_i - recon_pixel_i - recon_feature_i`, minimized.
pub fn vae_loss(items: &[VaeTerms]) -> f64 {
    items
        .iter()
        .map(|t| t.kl - t.recon_pixel - t.recon_feature)
        .sum()
}

/// Alpha budget `u` (in pixel-sum units) and the multiplier on the penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaLossConfig {
    pub u: f64,
    pub weight: f64,
}

impl AlphaLossConfig {
    /// Default budget: 40% of the layer's pixels.
    pub const DEFAULT_BUDGET_FRACTION: f64 = 0.4;

    pub fn new(u: f64, weight: f64, pixels: usize) -> Result<Self> {
        if !(0.0..=pixels as f64).contains(&u) {
            return Err(CganError::Config(format!(
                "alpha budget u = {u} must lie in [0, {pixels}]"
            )));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(CganError::Config(format!("alpha weight {weight} must be >= 0")));
        }
        Ok(AlphaLossConfig { u, weight })
    }

    pub fn with_default_budget(weight: f64, pixels: usize) -> Result<Self> {
        Self::new(Self::DEFAULT_BUDGET_FRACTION * pixels as f64, weight, pixels)
    }
}

/// `|u - Σ α| + Σ -(α - 0.5)²` for one alpha map.
pub fn alpha_loss(alpha: &[f64], u: f64) -> f64 {
    let total: f64 = alpha.iter().sum();
    (u - total).abs() - alpha.iter().map(|a| (a - 0.5) * (a - 0.5)).sum::<f64>()
}

/// Weighted sum of [`alpha_loss`] over every generator's layer and batch item.
pub fn alpha_loss_layers(layers: &[LayerImage], cfg: &AlphaLossConfig) -> f64 {
    cfg.weight
        * layers
            .iter()
            .flat_map(|l| {
                let a = l.alpha();
                (0..a.batch()).map(move |i| alpha_loss(a.item(i), cfg.u))
            })
            .sum::<f64>()
}

/// Mean over batch items of `|Σ α - u|` for one layer.
pub fn alpha_budget_deviation(alpha: &Tensor, u: f64) -> f64 {
    let b = alpha.batch();
    (0..b).map(|i| (alpha.item(i).iter().sum::<f64>() - u).abs()).sum::<f64>() / b as f64
}

/// Per-generator diagnostics for one iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    /// Unweighted alpha loss of this generator's layers, summed over the batch.
    pub alpha: f64,
    /// Mean `|Σ α - u|` across the batch.
    pub alpha_deviation: f64,
    /// Mean alpha value of the layer.
    pub coverage: f64,
}

/// Loss diagnostics of one training iteration, written as one JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    /// Adversarial value on the discriminator step.
    pub gan: f64,
    /// Objective the generators descended on their last sub-step.
    pub gan_generator: f64,
    pub vae_kl: f64,
    pub vae_pixel: f64,
    pub vae_feature: f64,
    /// Weighted alpha loss summed over generators.
    pub alpha: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub clipped_updates: u32,
    pub generators: Vec<GeneratorReport>,
}

impl LossReport {
    /// The first non-finite scalar field, if any.
    pub fn non_finite_term(&self) -> Option<String> {
        let fields = [
            ("gan", self.gan),
            ("gan_generator", self.gan_generator),
            ("vae_kl", self.vae_kl),
            ("vae_pixel", self.vae_pixel),
            ("vae_feature", self.vae_feature),
            ("alpha", self.alpha),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Some(name.to_string());
        }
        self.generators.iter().enumerate().find_map(|(i, g)| {
            (!g.alpha.is_finite() || !g.alpha_deviation.is_finite())
                .then(|| format!("generators[{i}].alpha"))
        })
    }

    pub fn mean_alpha_deviation(&self) -> f64 {
        if self.generators.is_empty() {
            return 0.0;
        }
        self.generators.iter().map(|g| g.alpha_deviation).sum::<f64>() / self.generators.len() as f64
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub mod graph {
    //! Loss terms recorded on a tape; every function returns a scalar node.

    use super::PROB_EPS;
    use crate::autograd::{Tape, Var};
    use crate::nets::EncoderVars;

    /// `Σ ln D(x) + ln(1 - D(G(z)))` over the batch.
    pub fn gan_value(tape: &mut Tape, d_real: Var, d_fake: Var) -> Var {
        let real = gan_real(tape, d_real);
        let fake = gan_fake(tape, d_fake);
        tape.add(real, fake)
    }

    /// `Σ ln D(x)`
    pub fn gan_real(tape: &mut Tape, d_real: Var) -> Var {
        let l = tape.log_clamped(d_real, PROB_EPS);
        tape.sum(l)
    }

    /// `Σ ln(1 - D(G(z)))`
    pub fn gan_fake(tape: &mut Tape, d_fake: Var) -> Var {
        let q = tape.one_minus(d_fake);
        let l = tape.log_clamped(q, PROB_EPS);
        tape.sum(l)
    }

    /// What the generators minimize: `Σ ln(1 - D(G(z)))`, or `-Σ ln D(G(z))`
    /// with the non-saturating objective.
    pub fn generator_objective(tape: &mut Tape, d_fake: Var, non_saturating: bool) -> Var {
        if non_saturating {
            let l = tape.log_clamped(d_fake, PROB_EPS);
            let s = tape.sum(l);
            tape.scale(s, -1.0)
        } else {
            gan_fake(tape, d_fake)
        }
    }

    pub fn kl(tape: &mut Tape, enc: EncoderVars) -> Var {
        let mu2 = tape.square(enc.mu);
        let var = tape.exp(enc.logvar);
        let a = tape.add(mu2, var);
        let b = tape.sub(a, enc.logvar);
        let c = tape.affine(b, 0.5, -0.5);
        tape.sum(c)
    }

    /// `-0.5 Σ (a - b)²`
    pub fn gaussian_log_likelihood(tape: &mut Tape, a: Var, b: Var) -> Var {
        let d = tape.sub(a, b);
        let sq = tape.square(d);
        let s = tape.sum(sq);
        tape.scale(s, -0.5)
    }

    /// `kl - recon_pixel - recon_feature`
    pub fn vae(tape: &mut Tape, kl: Var, recon_pixel: Var, recon_feature: Var) -> Var {
        let a = tape.sub(kl, recon_pixel);
        tape.sub(a, recon_feature)
    }

    /// `Σ_b |u - Σ α_b| + Σ -(α - 0.5)²` for an alpha batch `[B, 1, H, W]`.
    pub fn alpha(tape: &mut Tape, alpha: Var, u: f64) -> Var {
        let totals = tape.sum_per_item(alpha);
        let gap = tape.affine(totals, -1.0, u);
        let gap = tape.abs(gap);
        let gap = tape.sum(gap);
        let centered = tape.affine(alpha, 1.0, -0.5);
        let sq = tape.square(centered);
        let spread = tape.sum(sq);
        tape.sub(gap, spread)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::check_gradient;
    use crate::nets::EncoderVars;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(lo..hi))
    }

    #[test]
    fn gan_loss_cases() {
        let perfect = gan_loss(&[1.0 - 1e-12], &[1e-12]).unwrap();
        assert!(perfect.abs() < 1e-9);
        let even = gan_loss(&[0.5], &[0.5]).unwrap();
        assert!((even - (-1.386_294_361_119_890_6)).abs() < 1e-12);
        let pair = gan_loss(&[0.3, 0.8], &[0.6, 0.1]).unwrap();
        let split = gan_loss(&[0.3], &[0.6]).unwrap() + gan_loss(&[0.8], &[0.1]).unwrap();
        assert!((pair - split).abs() < 1e-15);
        assert!(gan_loss(&[1.0], &[0.0]).unwrap().is_finite());
        assert!(gan_loss(&[0.0], &[1.0]).unwrap().is_finite());
        assert!(matches!(gan_loss(&[0.5], &[]), Err(CganError::Dimension(_))));
        assert!(matches!(gan_loss(&[1.5], &[0.5]), Err(CganError::Domain(_))));
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_term(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert!((kl_term(&[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_term(&[1.0], &[]).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let x = uniform(&[1, 3, 2, 2], 0.0, 1.0, 1);
        assert_eq!(recon_pixel(&x, &x).unwrap(), 0.0);
        let mut y = x.clone();
        y.data_mut()[5] += 0.1;
        assert!((recon_pixel(&x, &y).unwrap() + 0.005).abs() < 1e-12);
        assert_eq!(recon_pixel(&x, &y).unwrap(), recon_pixel(&y, &x).unwrap());
        assert!(matches!(
            recon_pixel(&x, &Tensor::zeros(&[1, 3, 2, 3])),
            Err(CganError::Dimension(_))
        ));

        assert_eq!(recon_feature(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(recon_feature(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), -12.5);
        let a = [0.3, -1.0, 2.0];
        let b = [1.0, 0.5, -0.5];
        let (pa, pb) = ([2.0, 0.3, -1.0], [-0.5, 1.0, 0.5]);
        assert_eq!(recon_feature(&a, &b).unwrap(), recon_feature(&pa, &pb).unwrap());
        assert!(recon_feature(&a, &b[..2]).is_err());
    }

    #[test]
    fn vae_loss_cases() {
        let perfect = VaeTerms::default();
        assert_eq!(vae_loss(&[perfect, perfect]), 0.0);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let items: Vec<VaeTerms> = (0..5)
            .map(|_| VaeTerms {
                kl: r.random_range(0.0..3.0),
                recon_pixel: r.random_range(-2.0..0.0),
                recon_feature: r.random_range(-2.0..0.0),
            })
            .collect();
        let mut by_hand = 0.0;
        for t in &items {
            by_hand += t.kl;
            by_hand -= t.recon_pixel;
            by_hand -= t.recon_feature;
        }
        assert!((vae_loss(&items) - by_hand).abs() < 1e-12);
        assert!((vae_loss(&items) - vae_loss(&items[..2]) - vae_loss(&items[2..])).abs() < 1e-12);
    }

    #[test]
    fn alpha_loss_cases() {
        let p = 16;
        assert_eq!(alpha_loss(&vec![0.5; p], 0.5 * p as f64), 0.0);
        assert_eq!(alpha_loss(&vec![1.0; p], p as f64), -0.25 * p as f64);
        assert_eq!(alpha_loss(&vec![0.0; p], 0.0), -0.25 * p as f64);
        assert!(AlphaLossConfig::new(17.0, 1.0, 16).is_err());
        assert!(AlphaLossConfig::new(-1.0, 1.0, 16).is_err());
        assert!(AlphaLossConfig::new(4.0, -1.0, 16).is_err());
        assert_eq!(AlphaLossConfig::with_default_budget(1.0, 100).unwrap().u, 40.0);
    }

    #[test]
    fn alpha_loss_over_layers_is_weighted_sum() {
        let a = uniform(&[2, 1, 3, 3], 0.0, 1.0, 4);
        let rgb = uniform(&[2, 3, 3, 3], 0.0, 1.0, 5);
        let layer = LayerImage::new(rgb, a.clone()).unwrap();
        let cfg = AlphaLossConfig::new(3.0, 0.5, 9).unwrap();
        let expect = 0.5 * 2.0 * (alpha_loss(a.item(0), 3.0) + alpha_loss(a.item(1), 3.0));
        let got = alpha_loss_layers(&[layer.clone(), layer], &cfg);
        assert!((got - expect).abs() < 1e-12);
    }

    fn grad_check_scalar(
        inputs: &[Tensor],
        value: impl Fn(&[Tensor]) -> f64,
        graph: impl Fn(&mut Tape, &[crate::autograd::Var]) -> crate::autograd::Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = graph(&mut tape, &vars);
        assert!((tape.value(out).data()[0] - value(inputs)).abs() < 1e-10);
        let grads = tape.backward(out);
        for (k, t) in inputs.iter().enumerate() {
            let f = |probe: &Tensor| {
                let mut v = inputs.to_vec();
                v[k] = probe.clone();
                value(&v)
            };
            let r = check_gradient(f, t, grads.get(vars[k]).unwrap(), 1e-6, usize::MAX, 0);
            assert!(r.max_rel_error < 1e-4, "input {k}: {r:?}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let d_real = uniform(&[6], 0.05, 0.95, 10);
        let d_fake = uniform(&[6], 0.05, 0.95, 11);
        grad_check_scalar(
            &[d_real.clone(), d_fake.clone()],
            |v| gan_loss(v[0].data(), v[1].data()).unwrap(),
            |t, v| graph::gan_value(t, v[0], v[1]),
        );
        grad_check_scalar(
            &[d_fake],
            |v| -v[0].data().iter().map(|p| p.ln()).sum::<f64>(),
            |t, v| graph::generator_objective(t, v[0], true),
        );

        let mu = uniform(&[3, 4], -1.0, 1.0, 12);
        let logvar = uniform(&[3, 4], -1.0, 1.0, 13);
        grad_check_scalar(
            &[mu, logvar],
            |v| kl_term(v[0].data(), v[1].data()).unwrap(),
            |t, v| graph::kl(t, EncoderVars { mu: v[0], logvar: v[1] }),
        );

        let x = uniform(&[2, 3, 2, 2], 0.0, 1.0, 14);
        let xhat = uniform(&[2, 3, 2, 2], 0.0, 1.0, 15);
        grad_check_scalar(
            &[x, xhat],
            |v| recon_pixel(&v[0], &v[1]).unwrap(),
            |t, v| graph::gaussian_log_likelihood(t, v[0], v[1]),
        );

        let parts = [
            uniform(&[1], 0.0, 2.0, 16),
            uniform(&[1], -2.0, 0.0, 17),
            uniform(&[1], -2.0, 0.0, 18),
        ];
        grad_check_scalar(
            &parts,
            |v| {
                vae_loss(&[VaeTerms {
                    kl: v[0].data()[0],
                    recon_pixel: v[1].data()[0],
                    recon_feature: v[2].data()[0],
                }])
            },
            |t, v| graph::vae(t, v[0], v[1], v[2]),
        );

        let alpha = uniform(&[2, 1, 3, 3], 0.0, 1.0, 19);
        grad_check_scalar(
            &[alpha],
            |v| (0..2).map(|i| alpha_loss(v[0].item(i), 3.7)).sum(),
            |t, v| graph::alpha(t, v[0], 3.7),
        );
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..8),
            lv_seed in 0u64..1000,
        ) {
            let logvar = uniform(&[mu.len()], -3.0, 3.0, lv_seed);
            prop_assert!(kl_term(&mu, logvar.data()).unwrap() >= 0.0);
        }

        #[test]
        fn gan_gradient_signs(r in 0.001f64..0.999, f in 0.001f64..0.999) {
            let mut tape = Tape::new();
            let dr = tape.variable(Tensor::scalar(r));
            let df = tape.variable(Tensor::scalar(f));
            let v = graph::gan_value(&mut tape, dr, df);
            let g = tape.backward(v);
            prop_assert!(g.get(dr).unwrap().data()[0] > 0.0);
            prop_assert!(g.get(df).unwrap().data()[0] < 0.0);
        }
    }
}
