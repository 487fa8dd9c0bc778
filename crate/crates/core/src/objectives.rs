//! Loss terms: voxel-mean l1 reconstruction, diagonal-Gaussian KL, and the
//! l1 age gap in years, combined as `l_rec + beta * l_kl + gamma * l_age`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{ForwardOutput, OutputGrads, Vae, Variant};

/// Mean absolute voxel difference of one sample.
pub fn recon_loss(x: &[f64], x_tilde: &[f64]) -> Result<f64> {
    if x.len() != x_tilde.len() {
        return Err(shape_err(format!("{} voxels", x.len()), format!("{} voxels", x_tilde.len())));
    }
    if x.is_empty() {
        return Err(Error::Validation("empty volume".into()));
    }
    Ok(x.iter().zip(x_tilde).map(|(a, b)| libm::fabs(a - b)).sum::<f64>() / x.len() as f64)
}

/// `0.5 * sum(mu^2 + exp(lv) - lv - 1)` for one sample.
pub fn kl_loss(z_mu: &[f64], z_log_var: &[f64]) -> Result<f64> {
    if z_mu.len() != z_log_var.len() {
        return Err(shape_err(format!("length {}", z_mu.len()), format!("length {}", z_log_var.len())));
    }
    Ok(0.5
        * z_mu
            .iter()
            .zip(z_log_var)
            .map(|(m, lv)| m * m + libm::expm1(*lv) - lv)
            .sum::<f64>())
}

/// Absolute age gap in years.
pub fn age_loss(a_p: f64, a_c: f64) -> f64 {
    libm::fabs(a_p - a_c)
}

/// Mean over the batch; 0 for an empty batch.
pub fn batch_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} = {v} must be a nonnegative real")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_age: f64,
    pub total: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn combine(l_rec: f64, l_kl: f64, l_age: f64, w: LossWeights) -> Result<Self> {
        w.validate()?;
        Ok(Self {
            l_rec,
            l_kl,
            l_age,
            total: l_rec + w.beta * l_kl + w.gamma * l_age,
            beta: w.beta,
            gamma: w.gamma,
        })
    }

    /// Termwise batch mean.
    pub fn mean(items: &[LossBreakdown], w: LossWeights) -> Result<Self> {
        let col = |f: fn(&LossBreakdown) -> f64| batch_mean(&items.iter().map(f).collect::<Vec<_>>());
        Self::combine(col(|b| b.l_rec), col(|b| b.l_kl), col(|b| b.l_age), w)
    }
}

/// Per-sample objective. The age term applies to `vae_ap` only.
pub fn total_loss(
    x: &[f64],
    fwd: &ForwardOutput,
    a_c: Option<f64>,
    variant: Variant,
    w: LossWeights,
) -> Result<LossBreakdown> {
    let l_rec = recon_loss(x, &fwd.x_tilde)?;
    let l_kl = kl_loss(&fwd.latent.z_mu, &fwd.latent.z_log_var)?;
    let l_age = match variant {
        Variant::VaeAp => {
            let a_p = fwd
                .a_p
                .ok_or_else(|| Error::Validation("vae_ap forward output lacks a_p".into()))?;
            let a_c = a_c.ok_or_else(|| Error::Validation("vae_ap loss requires the chronological age".into()))?;
            age_loss(a_p, a_c)
        }
        _ => 0.0,
    };
    LossBreakdown::combine(l_rec, l_kl, l_age, w)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`total_loss`] with respect to the network outputs.
pub fn output_grads(x: &[f64], fwd: &ForwardOutput, a_c: Option<f64>, variant: Variant, w: LossWeights) -> OutputGrads {
    let n = x.len() as f64;
    OutputGrads {
        x_tilde: fwd.x_tilde.iter().zip(x).map(|(xt, xi)| sign(xt - xi) / n).collect(),
        z_mu: fwd.latent.z_mu.iter().map(|m| w.beta * m).collect(),
        z_log_var: fwd
            .latent
            .z_log_var
            .iter()
            .map(|lv| w.beta * 0.5 * libm::expm1(*lv))
            .collect(),
        a_p: match (variant, fwd.a_p, a_c) {
            (Variant::VaeAp, Some(p), Some(c)) => w.gamma * sign(p - c),
            _ => 0.0,
        },
    }
}

/// Forward, loss and backward for one sample; adds `scale *` the parameter
/// gradient into `grad`.
pub fn sample_loss_and_grad(
    model: &Vae,
    x: &[f64],
    a_c: Option<f64>,
    noise: &[f64],
    w: LossWeights,
    scale: f64,
    grad: &mut [f64],
) -> Result<LossBreakdown> {
    let variant = model.config().variant;
    let (fwd, trace) = model.forward_traced(x, a_c, noise)?;
    let loss = total_loss(x, &fwd, a_c, variant, w)?;
    let g = output_grads(x, &fwd, a_c, variant, w);
    model.backward(&trace, &g, scale, grad)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::volume::Shape;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn recon_cases() {
        assert_eq!(recon_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(recon_loss(&[0.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert!(matches!(recon_loss(&[0.0], &[0.0, 1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_loss(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(kl_loss(&[1.0], &[0.0]).unwrap(), 0.5);
        let v = kl_loss(&[0.0], &[4.0f64.ln()]).unwrap();
        assert!((v - 0.5 * (4.0 - 4.0f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.806_852_819_440_054_7).abs() < 1e-12);
        assert!(matches!(kl_loss(&[0.0], &[]), Err(Error::Shape { .. })));
    }

    #[test]
    fn age_cases() {
        assert_eq!(age_loss(50.0, 50.0), 0.0);
        assert_eq!(age_loss(40.0, 55.0), 15.0);
    }

    #[test]
    fn combine_cases() {
        let w0 = LossWeights { beta: 0.0, gamma: 0.0 };
        assert_eq!(LossBreakdown::combine(0.2, 0.3, 5.0, w0).unwrap().total, 0.2);
        let b = LossBreakdown::combine(0.2, 0.3, 5.0, LossWeights::default()).unwrap();
        assert!((b.total - 5.5).abs() < 1e-15);
        let neg = LossWeights { beta: -1.0, gamma: 1.0 };
        assert!(matches!(LossBreakdown::combine(0.0, 0.0, 0.0, neg), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn kl_zero_only_at_prior(mu in prop::collection::vec(-3.0f64..3.0, 1..8), lv_seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(lv_seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v = kl_loss(&mu, &lv).unwrap();
            prop_assert!(v > 0.0);
            prop_assert_eq!(kl_loss(&vec![0.0; mu.len()], &vec![0.0; mu.len()]).unwrap(), 0.0);
        }

        #[test]
        fn age_symmetric(a in 0.0f64..120.0, b in 0.0f64..120.0) {
            prop_assert_eq!(age_loss(a, b), age_loss(b, a));
        }

        #[test]
        fn batch_mean_is_permutation_invariant(mut xs in prop::collection::vec(0.0f64..10.0, 1..20)) {
            let a = batch_mean(&xs);
            xs.reverse();
            prop_assert!((a - batch_mean(&xs)).abs() < 1e-12);
        }

        #[test]
        fn gamma_monotone(g1 in 0.0f64..5.0, dg in 0.0f64..5.0, l_age in 0.0f64..30.0) {
            let lo = LossBreakdown::combine(0.1, 0.2, l_age, LossWeights { beta: 1.0, gamma: g1 }).unwrap();
            let hi = LossBreakdown::combine(0.1, 0.2, l_age, LossWeights { beta: 1.0, gamma: g1 + dg }).unwrap();
            prop_assert!(hi.total >= lo.total);
        }
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_shape: Shape::new(8, 6, 7),
            latent_dim: 5,
            channels: vec![3, 4],
            age_normalizer: 100.0,
        }
    }

    /// Central differences on random weights, every variant. A weight whose
    /// stencil straddles a kink of the l1 loss or LeakyReLU (one-sided slopes
    /// disagree) is replaced by a fresh draw.
    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for variant in Variant::ALL {
            let mut model = Vae::new(tiny(variant), 4).unwrap();
            if variant == Variant::VaeAp {
                model.set_age_bias(50.0).unwrap();
            }
            let cfg = model.config().clone();
            let x: Vec<f64> = (0..cfg.input_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let a_c = Some(37.0);
            let w = LossWeights { beta: 1.0, gamma: 1.0 };
            let mut grad = vec![0.0; model.num_params()];
            sample_loss_and_grad(&model, &x, a_c, &noise, w, 1.0, &mut grad).unwrap();
            let loss_at = |m: &Vae| {
                let f = m.forward(&x, a_c, &noise).unwrap();
                total_loss(&x, &f, a_c, variant, w).unwrap().total
            };
            let base = loss_at(&model);
            // Every named tensor contributes its first weight, then random ones.
            let mut queue: Vec<usize> = model
                .tensor_names()
                .iter()
                .map(|n| {
                    let off = model.tensor(n).unwrap().as_ptr() as usize - model.params().as_ptr() as usize;
                    off / core::mem::size_of::<f64>()
                })
                .collect();
            let h = 1e-5;
            let (mut checked, mut kinks) = (0, 0);
            while checked < 40 {
                let i = queue.pop().unwrap_or_else(|| rng.gen_range(0..model.num_params()));
                let orig = model.params()[i];
                model.params_mut()[i] = orig + h;
                let up = loss_at(&model);
                model.params_mut()[i] = orig - h;
                let down = loss_at(&model);
                model.params_mut()[i] = orig;
                let (right, left) = ((up - base) / h, (base - down) / h);
                if (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1e-6) {
                    kinks += 1;
                    assert!(kinks < 10, "{variant}: too many kinks");
                    continue;
                }
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-3, "{variant} param {i}: fd {fd} analytic {}", grad[i]);
                checked += 1;
            }
        }
    }

    #[test]
    fn gradient_is_sum_of_terms() {
        let model = Vae::new(tiny(Variant::VaeAp), 4).unwrap();
        let cfg = model.config().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..cfg.input_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let run = |w: LossWeights| {
            let mut g = vec![0.0; model.num_params()];
            sample_loss_and_grad(&model, &x, Some(60.0), &noise, w, 1.0, &mut g).unwrap();
            g
        };
        let all = run(LossWeights { beta: 1.0, gamma: 1.0 });
        let rec = run(LossWeights { beta: 0.0, gamma: 0.0 });
        let kl = run(LossWeights { beta: 1.0, gamma: 0.0 });
        let age = run(LossWeights { beta: 0.0, gamma: 1.0 });
        for i in 0..all.len() {
            let parts = rec[i] + (kl[i] - rec[i]) + (age[i] - rec[i]);
            assert!((all[i] - parts).abs() <= 1e-10 * (1.0 + all[i].abs()));
        }
    }
}
