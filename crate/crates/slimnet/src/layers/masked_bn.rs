//! Batch normalization with a learnable prune threshold.
//!
//! Each layer owns per-channel scale/shift (gamma/beta), running statistics,
//! and a scalar threshold tau. A channel's binary mask is
//! `m_i = 1 iff |gamma_i| - tau >= 0`; masked channels get effective scale
//! and shift of exactly zero, so their output plane is exactly zero and hard
//! pruning can delete them without changing the network function.
//!
//! The mask is a step function, so gradients flow through a clipped
//! straight-through estimator: within the band `|z_i| <= epsilon_band`
//! (z_i = |gamma_i| - tau), d m_i / d gamma_i = sign(gamma_i) and
//! d m_i / d tau = -1; outside the band both are exactly zero.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{real, Real, Tape, Tensor};

/// Hyperparameters for a masked batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BnOptions {
    pub eps: f64,
    pub momentum: f64,
    pub tau_init: f64,
    pub epsilon_band: f64,
    /// When false the layer behaves as a plain BatchNorm2d (no mask, no
    /// trainable threshold).
    pub masked: bool,
}

impl Default for BnOptions {
    fn default() -> Self {
        BnOptions { eps: 1e-5, momentum: 0.1, tau_init: 0.1, epsilon_band: 1.0, masked: true }
    }
}

/// Per-layer state: learnable gamma/beta/tau plus running statistics.
pub struct MaskedBnState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// Scalar threshold, shape `[1]`. Trainable only when `masked`.
    pub tau: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub epsilon_band: f64,
    pub masked: bool,
}

impl<T: Real> MaskedBnState<T> {
    /// Build a layer with explicit initial gamma values (one per channel).
    pub fn new(gamma: Vec<T>, opts: &BnOptions) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidArg { op: "masked_bn", detail: "needs at least one channel".into() });
        }
        if opts.tau_init < 0.0 || opts.epsilon_band < 0.0 {
            return Err(Error::InvalidArg {
                op: "masked_bn",
                detail: format!("tau_init ({}) and epsilon_band ({}) must be >= 0", opts.tau_init, opts.epsilon_band),
            });
        }
        let channels = gamma.len();
        let mut tau = Tensor::scalar(real::<T>(opts.tau_init));
        if opts.masked {
            tau = tau.with_grad();
        }
        Ok(MaskedBnState {
            gamma: Tensor::from_vec(&[channels], gamma)?.with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            tau,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels])?,
            eps: opts.eps,
            momentum: opts.momentum,
            epsilon_band: opts.epsilon_band,
            masked: opts.masked,
        })
    }

    /// All-ones gamma (the conservative default when masks are not exercised).
    pub fn with_unit_gamma(channels: usize, opts: &BnOptions) -> Result<Self> {
        MaskedBnState::new(vec![T::one(); channels], opts)
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// The channel mask as a plain boolean vector: `|gamma_i| - tau >= 0`.
    /// Pure function of the current (gamma, tau); no tape involved.
    pub fn compute_mask(&self) -> Vec<bool> {
        let tau = self.tau.item();
        self.gamma.data().iter().map(|g| g.abs() - tau >= T::zero()).collect()
    }

    pub fn active_channels(&self) -> usize {
        if self.masked {
            self.compute_mask().iter().filter(|&&m| m).count()
        } else {
            self.channels()
        }
    }

    /// Clamp tau to `[0, inf)`; called after every optimizer step.
    pub fn clamp_tau(&self) {
        let t = self.tau.item();
        if t < T::zero() {
            self.tau.assign(&[T::zero()]);
        }
    }

    /// Normalize and apply the (masked) affine transform. Returns the output
    /// and, when masked, the mask tensor used — callers feed mask tensors
    /// into the sparsity loss so its gradient reaches gamma and tau.
    pub fn forward(&self, tape: &mut Tape<T>, input: &Tensor<T>, training: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        if self.masked {
            let mask = ste_mask(tape, &self.gamma, &self.tau, self.epsilon_band)?;
            let gamma_hat = ops::mul(tape, &self.gamma, &mask)?;
            let beta_hat = ops::mul(tape, &self.beta, &mask)?;
            let out = ops::batch_norm2d(
                tape, input, &gamma_hat, &beta_hat, &self.running_mean, &self.running_var,
                self.eps, self.momentum, training,
            )?;
            Ok((out, Some(mask)))
        } else {
            let out = ops::batch_norm2d(
                tape, input, &self.gamma, &self.beta, &self.running_mean, &self.running_var,
                self.eps, self.momentum, training,
            )?;
            Ok((out, None))
        }
    }
}

/// Binary channel mask from (gamma, tau) with clipped straight-through
/// gradients.
///
/// Forward: `z_i = |gamma_i| - tau`, `m_i = 1 if z_i >= 0 else 0` (boundary
/// inclusive). Backward, given upstream u: within `|z_i| <= epsilon_band`
/// gamma_i receives `u_i * sign(gamma_i)` and tau accumulates `-u_i`;
/// outside the band both receive exactly zero. `sign(0) = 0`.
pub fn ste_mask<T: Real>(tape: &mut Tape<T>, gamma: &Tensor<T>, tau: &Tensor<T>, epsilon_band: f64) -> Result<Tensor<T>> {
    if gamma.shape().len() != 1 {
        return Err(Error::InvalidArg {
            op: "ste_mask",
            detail: format!("gamma must be 1-d, got {:?}", gamma.shape()),
        });
    }
    if tau.numel() != 1 {
        return Err(Error::InvalidArg {
            op: "ste_mask",
            detail: format!("tau must be a scalar, got {:?}", tau.shape()),
        });
    }
    let c = gamma.numel();
    let tau_v = tau.item();
    let mut mask = vec![T::zero(); c];
    let mut z = vec![T::zero(); c];
    let mut sign = vec![T::zero(); c];
    {
        let g = gamma.data();
        for i in 0..c {
            z[i] = g[i].abs() - tau_v;
            if z[i] >= T::zero() {
                mask[i] = T::one();
            }
            sign[i] = if g[i] > T::zero() {
                T::one()
            } else if g[i] < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
        }
    }
    let mut out = Tensor::from_vec(&[c], mask)?;
    let track = tape.is_recording() && (gamma.requires_grad() || tau.requires_grad());
    out.set_tracked(track);
    if track {
        let gamma = gamma.clone();
        let tau = tau.clone();
        let band: T = real(epsilon_band);
        tape.record(&out, move |upstream, store| {
            let in_band: Vec<bool> = z.iter().map(|zi| zi.abs() <= band).collect();
            if gamma.requires_grad() {
                let gg = store.buffer_mut(gamma.id(), c);
                for i in 0..c {
                    if in_band[i] {
                        gg[i] += upstream[i] * sign[i];
                    }
                }
            }
            if tau.requires_grad() {
                let gt = store.buffer_mut(tau.id(), 1);
                for i in 0..c {
                    if in_band[i] {
                        gt[0] = gt[0] - upstream[i];
                    }
                }
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mse_loss, sum_all};

    fn state(gamma: Vec<f64>, tau: f64, band: f64) -> MaskedBnState<f64> {
        MaskedBnState::new(gamma, &BnOptions { tau_init: tau, epsilon_band: band, ..BnOptions::default() }).unwrap()
    }

    #[test]
    fn mask_from_gamma_and_tau() {
        let s = state(vec![0.05, 0.2, -0.15], 0.1, 1.0);
        assert_eq!(s.compute_mask(), vec![false, true, true]);
    }

    #[test]
    fn mask_boundary_is_inclusive() {
        let s = state(vec![0.25, -0.25], 0.25, 1.0);
        assert_eq!(s.compute_mask(), vec![true, true]);
    }

    #[test]
    fn zero_tau_keeps_everything() {
        let s = state(vec![0.0, 1.0, -3.0, 1e-30], 0.0, 1.0);
        assert_eq!(s.compute_mask(), vec![true; 4]);
    }

    #[test]
    fn ste_gradients_in_band() {
        // gamma 0.5, tau 0.1, eps 1.0: z = 0.4 in band -> dm/dgamma = +1, dm/dtau = -1
        let mut tape = Tape::new();
        let gamma = Tensor::from_vec(&[1], vec![0.5]).unwrap().with_grad();
        let tau = Tensor::scalar(0.1).with_grad();
        let m = ste_mask(&mut tape, &gamma, &tau, 1.0).unwrap();
        assert_eq!(m.to_vec(), vec![1.0]);
        let loss = sum_all(&mut tape, &m).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&gamma).unwrap(), &[1.0]);
        assert_eq!(grads.get(&tau).unwrap(), &[-1.0]);
    }

    #[test]
    fn ste_gradients_outside_band() {
        // gamma 2.5, tau 0.1, eps 1.0: z = 2.4 out of band -> both zero
        let mut tape = Tape::new();
        let gamma = Tensor::from_vec(&[1], vec![2.5]).unwrap().with_grad();
        let tau = Tensor::scalar(0.1).with_grad();
        let m = ste_mask(&mut tape, &gamma, &tau, 1.0).unwrap();
        let loss = sum_all(&mut tape, &m).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&gamma).unwrap(), &[0.0]);
        assert_eq!(grads.get(&tau).unwrap(), &[0.0]);
    }

    #[test]
    fn ste_gradient_carries_gamma_sign() {
        let mut tape = Tape::new();
        let gamma = Tensor::from_vec(&[1], vec![-0.5]).unwrap().with_grad();
        let tau = Tensor::scalar(0.1).with_grad();
        let m = ste_mask(&mut tape, &gamma, &tau, 1.0).unwrap();
        assert_eq!(m.to_vec(), vec![1.0]); // |-0.5| >= 0.1
        let loss = sum_all(&mut tape, &m).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&gamma).unwrap(), &[-1.0]);
    }

    #[test]
    fn masked_channel_output_is_exactly_zero() {
        // gamma below tau: scale and shift both masked to zero
        let s = state(vec![0.05], 0.1, 1.0);
        s.beta.assign(&[0.7]);
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(|v| v as f64 * 1.3 - 2.0).collect()).unwrap();
        let (y, mask) = s.forward(&mut tape, &x, true).unwrap();
        assert_eq!(mask.unwrap().to_vec(), vec![0.0]);
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_mask_matches_plain_bn_bitwise() {
        let gammas = vec![0.9, 1.4, 0.3];
        let masked = state(gammas.clone(), 0.1, 1.0);
        masked.beta.assign(&[0.2, -0.4, 0.05]);
        let plain = MaskedBnState::new(gammas, &BnOptions { masked: false, tau_init: 0.1, ..BnOptions::default() }).unwrap();
        plain.beta.assign(&[0.2, -0.4, 0.05]);
        let x = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|v| (v as f64).sin()).collect()).unwrap();
        let mut tape = Tape::no_grad();
        let (ym, mask) = masked.forward(&mut tape, &x, true).unwrap();
        let (yp, _) = plain.forward(&mut tape, &x, true).unwrap();
        assert_eq!(mask.unwrap().to_vec(), vec![1.0; 3]);
        assert_eq!(ym.to_vec(), yp.to_vec());
        assert_eq!(masked.running_mean.to_vec(), plain.running_mean.to_vec());
    }

    #[test]
    fn surviving_channel_scales_normalized_activation() {
        // gamma 0.2 >= tau 0.1, beta 0: output = 0.2 * normalized(x)
        let s = state(vec![0.2], 0.1, 1.0);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::no_grad();
        let (y, _) = s.forward(&mut tape, &x, true).unwrap();
        let plain = state(vec![1.0], 0.1, 1.0);
        let (a, _) = plain.forward(&mut tape, &x, true).unwrap();
        for (got, base) in y.to_vec().iter().zip(a.to_vec()) {
            assert!((got - 0.2 * base).abs() < 1e-12);
        }
    }

    #[test]
    fn task_gradient_routes_through_product_rule() {
        // Single channel, in-band. gamma_hat = gamma * m with m = 1:
        // dL/dgamma = u_gamma_hat * (m + gamma * sign(gamma)) via the STE path.
        let s = state(vec![0.5], 0.1, 1.0);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let target = Tensor::zeros(&[1, 1, 2, 2]);
        let mut tape = Tape::new();
        let (y, _) = s.forward(&mut tape, &x, true).unwrap();
        let loss = mse_loss(&mut tape, &y, &target).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // u = dL/dgamma_hat = sum(g * xhat); in-band STE adds gamma*sign(gamma)*u
        // so dL/dgamma = u * (1 + 0.5) and dL/dtau = -u * 0.5.
        let g_gamma = grads.get(&s.gamma).unwrap()[0];
        let g_tau = grads.get(&s.tau).unwrap()[0];
        assert!((g_tau / g_gamma + 0.5 / 1.5).abs() < 1e-10, "g_gamma {g_gamma} g_tau {g_tau}");
    }

    #[test]
    fn clamp_tau_floors_at_zero() {
        let s = state(vec![1.0], 0.1, 1.0);
        s.tau.assign(&[-0.3]);
        s.clamp_tau();
        assert_eq!(s.tau.item(), 0.0);
        s.tau.assign(&[0.2]);
        s.clamp_tau();
        assert_eq!(s.tau.item(), 0.2);
    }
}
