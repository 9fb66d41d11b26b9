//! Diffusion numerics: schedule construction, forward noising, the
//! clean-sample/noise duality, and the deterministic sampler step.
//!
//! Index convention: step 0 is the clean state with cumulative alpha
//! exactly 1, steps 1..=T are noised. All schedule math runs in double
//! precision regardless of batch element type.

use rand::Rng;

use crate::error::{Error, Result};
use crate::registry::{LatentShapeContract, ModalityId};
use crate::tensor::{Scalar, Tensor};

/// Noising schedule tables. `beta[i]` covers step `i + 1`;
/// `alpha_bar[t]` is the cumulative product for step `t`, with
/// `alpha_bar[0] == 1` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl NoiseSchedule {
    /// Linear beta interpolation inclusive of both endpoints.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0f64;
        for &b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self { steps, beta, alpha_bar })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::StepOutOfRange { t, total: self.steps })
    }

    pub fn alpha_bar_table(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn noised_step(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange { t, total: self.steps });
        }
        Ok(self.alpha_bar[t])
    }
}

/// A batch of latents in the shared manifold, tagged with the modality
/// they encode and whether the per-modality scale factor has been applied.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T: Scalar> {
    data: Tensor<T>,
    modality: ModalityId,
    scaled: bool,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn new(
        data: Tensor<T>,
        modality: ModalityId,
        scaled: bool,
        contract: LatentShapeContract,
    ) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 || shape[1] != contract.c || shape[2] != contract.h || shape[3] != contract.w {
            return Err(Error::ShapeMismatch {
                expected: format!("(batch, {}, {}, {})", contract.c, contract.h, contract.w),
                got: format!("{shape:?}"),
            });
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("latent batch".into()));
        }
        Ok(Self { data, modality, scaled })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn scaled(&self) -> bool {
        self.scaled
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    /// Elementwise multiply by the modality's scale factor.
    pub fn apply_scale(&self, s: f64) -> Result<Self> {
        if self.scaled {
            return Err(Error::AlreadyScaled);
        }
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidSpec(format!("scale factor must be positive, got {s}")));
        }
        Ok(Self {
            data: self.data.scale(T::of_f64(s)),
            modality: self.modality,
            scaled: true,
        })
    }

    /// Elementwise divide by the modality's scale factor.
    pub fn remove_scale(&self, s: f64) -> Result<Self> {
        if !self.scaled {
            return Err(Error::NotScaled);
        }
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidSpec(format!("scale factor must be positive, got {s}")));
        }
        Ok(Self {
            data: self.data.scale(T::of_f64(1.0 / s)),
            modality: self.modality,
            scaled: false,
        })
    }

    fn like(&self, data: Tensor<T>) -> Self {
        Self { data, modality: self.modality, scaled: self.scaled }
    }
}

fn mix<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Tensor<T> {
    a.zip_map(b, |x, y| T::of_f64(ca * x.as_f64() + cb * y.as_f64()))
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`. Step 0 returns the
/// clean batch unchanged.
pub fn forward_diffuse<T: Scalar>(
    z0: &LatentBatch<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    if t == 0 {
        return Ok(z0.clone());
    }
    let abar = sched.noised_step(t)?;
    if eps.shape() != z0.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z0.data.shape()),
            got: format!("{:?}", eps.shape()),
        });
    }
    let out = mix(&z0.data, abar.sqrt(), eps, (1.0 - abar).sqrt());
    Ok(z0.like(out))
}

/// `z0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`, valid for t >= 1.
pub fn x0_from_eps<T: Scalar>(
    z_t: &LatentBatch<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentBatch<T>> {
    let abar = sched.noised_step(t)?;
    if eps.shape() != z_t.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z_t.data.shape()),
            got: format!("{:?}", eps.shape()),
        });
    }
    let inv = 1.0 / abar.sqrt();
    let out = mix(&z_t.data, inv, eps, -(1.0 - abar).sqrt() * inv);
    Ok(z_t.like(out))
}

/// `eps = (z_t - sqrt(abar_t) x0) / sqrt(1 - abar_t)`, valid for t >= 1.
pub fn eps_from_x0<T: Scalar>(
    z_t: &LatentBatch<T>,
    x0: &LatentBatch<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let abar = sched.noised_step(t)?;
    if x0.data.shape() != z_t.data.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z_t.data.shape()),
            got: format!("{:?}", x0.data.shape()),
        });
    }
    let inv = 1.0 / (1.0 - abar).sqrt();
    Ok(mix(&z_t.data, inv, &x0.data, -abar.sqrt() * inv))
}

/// One deterministic-sampler update from step `t` to `t_prev < t` using a
/// predicted clean batch. With `eta = 0` the update is a pure function of
/// its inputs; `eta > 0` injects fresh noise from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar>(
    z_t: &LatentBatch<T>,
    x0_pred: &LatentBatch<T>,
    t: usize,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<LatentBatch<T>> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(Error::InvalidSampleConfig(format!("eta must be >= 0, got {eta}")));
    }
    if t_prev >= t {
        return Err(Error::InvalidSampleConfig(format!(
            "sampler must move toward the clean state, got {t} -> {t_prev}"
        )));
    }
    let abar_t = sched.noised_step(t)?;
    let abar_prev = sched.alpha_bar(t_prev)?;
    let eps_hat = eps_from_x0(z_t, x0_pred, t, sched)?;

    let sigma = eta * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt() * (1.0 - abar_t / abar_prev).sqrt();
    let eps_coeff = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = mix(&x0_pred.data, abar_prev.sqrt(), &eps_hat, eps_coeff);
    if sigma > 0.0 {
        let xi = Tensor::<T>::randn(out.shape().to_vec(), rng);
        out = mix(&out, 1.0, &xi, sigma);
    }
    Ok(z_t.like(out))
}

/// Evenly spaced inference step indices over `{0..=total}`, ascending,
/// including both endpoints. `count` is the number of sampler transitions.
pub fn inference_steps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::InvalidSampleConfig("step count must be at least 1".into()));
    }
    let count = count.min(total);
    let mut steps: Vec<usize> = (0..=count)
        .map(|k| ((k as f64 * total as f64) / count as f64).round() as usize)
        .collect();
    steps.dedup();
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::derive_rng;

    const CONTRACT: LatentShapeContract = LatentShapeContract { c: 4, h: 8, w: 8 };

    fn batch(seed: u64) -> LatentBatch<f64> {
        let mut rng = derive_rng(seed, &[]);
        LatentBatch::new(Tensor::randn(vec![2, 4, 8, 8], &mut rng), ModalityId(0), true, CONTRACT).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar_table(), &[1.0, 0.5]);
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.steps(), 1000);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-12);
        let last = s.alpha_bar(1000).unwrap();
        assert!((last - 4.0e-5).abs() / 4.0e-5 < 0.1, "alpha_bar[T] = {last}");
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_tables_are_monotone() {
        let s = NoiseSchedule::default_linear();
        for w in s.beta().windows(2) {
            assert!(w[0] < w[1]);
        }
        for w in s.alpha_bar_table().windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn invalid_schedule_bounds_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn diffusing_to_step_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let z0 = batch(1);
        let mut rng = derive_rng(2, &[]);
        let eps = Tensor::randn(vec![2, 4, 8, 8], &mut rng);
        let z = forward_diffuse(&z0, 0, &eps, &s).unwrap();
        assert_eq!(z.data(), z0.data());
    }

    #[test]
    fn zero_latent_diffuses_to_scaled_noise() {
        let s = NoiseSchedule::default_linear();
        let z0 = LatentBatch::new(Tensor::zeros(vec![1, 4, 8, 8]), ModalityId(0), true, CONTRACT).unwrap();
        let mut rng = derive_rng(3, &[]);
        let eps = Tensor::<f64>::randn(vec![1, 4, 8, 8], &mut rng);
        let t = 700;
        let z = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
        for (a, b) in z.data().data().iter().zip(eps.data()) {
            assert!((a - c * b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_affine_mix() {
        // abar = 0.25 via a one-step schedule with beta = 0.75
        let s = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let z0 = LatentBatch::new(Tensor::full(vec![1, 4, 8, 8], 1.0f64), ModalityId(0), true, CONTRACT).unwrap();
        let eps = Tensor::full(vec![1, 4, 8, 8], 1.0f64);
        let z = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        let expect = 0.5 + 0.75f64.sqrt();
        for &v in z.data().data() {
            assert!((v - expect).abs() < 1e-12);
        }
        let x0 = x0_from_eps(&z, &eps, 1, &s).unwrap();
        for &v in x0.data().data() {
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn noising_round_trips() {
        let s = NoiseSchedule::default_linear();
        let z0 = batch(4);
        let mut rng = derive_rng(5, &[]);
        for &t in &[1usize, 37, 500, 1000] {
            let eps = Tensor::randn(vec![2, 4, 8, 8], &mut rng);
            let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let back = x0_from_eps(&z_t, &eps, t, &s).unwrap();
            let rel = back.data().sub(z0.data()).data().iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(rel < 1e-6, "x0 round trip at t={t}: {rel}");
            let eps_back = eps_from_x0(&z_t, &z0, t, &s).unwrap();
            let rel = eps_back.sub(&eps).data().iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(rel < 1e-6, "eps round trip at t={t}: {rel}");
        }
    }

    #[test]
    fn sampler_final_step_returns_prediction() {
        let s = NoiseSchedule::default_linear();
        let z0 = batch(6);
        let mut rng = derive_rng(7, &[]);
        let eps = Tensor::randn(vec![2, 4, 8, 8], &mut rng);
        let z_t = forward_diffuse(&z0, 4, &eps, &s).unwrap();
        let out = ddim_step(&z_t, &z0, 4, 0, 0.0, &s, &mut rng).unwrap();
        let max = out.data().sub(z0.data()).data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max < 1e-10, "final step should reproduce the prediction: {max}");
    }

    #[test]
    fn sampler_with_true_prediction_tracks_forward_noising() {
        let s = NoiseSchedule::default_linear();
        let z0 = batch(8);
        let mut rng = derive_rng(9, &[]);
        let eps = Tensor::randn(vec![2, 4, 8, 8], &mut rng);
        for &(t, t_prev) in &[(1000usize, 750usize), (750, 300), (300, 1), (42, 17)] {
            let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let stepped = ddim_step(&z_t, &z0, t, t_prev, 0.0, &s, &mut rng).unwrap();
            let direct = forward_diffuse(&z0, t_prev, &eps, &s).unwrap();
            let max = stepped
                .data()
                .sub(direct.data())
                .data()
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(max < 1e-5, "trajectory mismatch {t}->{t_prev}: {max}");
        }
    }

    #[test]
    fn sampler_rejects_bad_arguments() {
        let s = NoiseSchedule::default_linear();
        let z = batch(10);
        let mut rng = derive_rng(11, &[]);
        assert!(ddim_step(&z, &z, 10, 10, 0.0, &s, &mut rng).is_err());
        assert!(ddim_step(&z, &z, 10, 20, 0.0, &s, &mut rng).is_err());
        assert!(ddim_step(&z, &z, 10, 5, -0.5, &s, &mut rng).is_err());
        assert!(ddim_step(&z, &z, 1001, 5, 0.0, &s, &mut rng).is_err());
    }

    #[test]
    fn deterministic_sampler_is_bitwise_repeatable() {
        let s = NoiseSchedule::default_linear();
        let z0 = batch(12);
        let mut rng = derive_rng(13, &[]);
        let eps = Tensor::randn(vec![2, 4, 8, 8], &mut rng);
        let z_t = forward_diffuse(&z0, 600, &eps, &s).unwrap();
        let a = ddim_step(&z_t, &z0, 600, 300, 0.0, &s, &mut derive_rng(1, &[])).unwrap();
        let b = ddim_step(&z_t, &z0, 600, 300, 0.0, &s, &mut derive_rng(2, &[])).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn variance_preserving_energy() {
        let s = NoiseSchedule::default_linear();
        let mut rng = derive_rng(14, &[]);
        for &t in &[1usize, 250, 999] {
            let n = 10_000usize;
            let z0 = LatentBatch::new(Tensor::<f64>::randn(vec![n, 4, 1, 1], &mut rng), ModalityId(0), true, LatentShapeContract { c: 4, h: 1, w: 1 }).unwrap();
            let eps = Tensor::randn(vec![n, 4, 1, 1], &mut rng);
            let z_t = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let energy: f64 = z_t.data().data().iter().map(|v| v * v).sum::<f64>() / (n * 4) as f64;
            assert!((energy - 1.0).abs() < 0.05, "energy at t={t}: {energy}");
        }
    }

    #[test]
    fn scale_flags_enforce_single_application() {
        let z = LatentBatch::new(Tensor::full(vec![1, 4, 8, 8], 2.0f64), ModalityId(1), false, CONTRACT).unwrap();
        let scaled = z.apply_scale(0.5).unwrap();
        assert!(scaled.scaled());
        for &v in scaled.data().data() {
            assert_eq!(v, 1.0);
        }
        assert!(matches!(scaled.apply_scale(0.5), Err(Error::AlreadyScaled)));
        let back = scaled.remove_scale(0.5).unwrap();
        assert!(!back.scaled());
        for (&a, &b) in back.data().data().iter().zip(z.data().data()) {
            assert!((a - b).abs() < 1e-7 * b.abs().max(1.0));
        }
        assert!(matches!(back.remove_scale(0.5), Err(Error::NotScaled)));
    }

    #[test]
    fn latent_batch_validates_contract_and_finiteness() {
        assert!(LatentBatch::new(Tensor::<f64>::zeros(vec![1, 3, 8, 8]), ModalityId(0), false, CONTRACT).is_err());
        assert!(LatentBatch::new(Tensor::<f64>::zeros(vec![4, 8, 8]), ModalityId(0), false, CONTRACT).is_err());
        let mut bad = Tensor::<f64>::zeros(vec![1, 4, 8, 8]);
        bad.data_mut()[0] = f64::NAN;
        assert!(LatentBatch::new(bad, ModalityId(0), false, CONTRACT).is_err());
    }

    #[test]
    fn inference_grid_covers_endpoints() {
        let steps = inference_steps(1000, 250).unwrap();
        assert_eq!(steps.len(), 251);
        assert_eq!(steps[0], 0);
        assert_eq!(*steps.last().unwrap(), 1000);
        for w in steps.windows(2) {
            assert!(w[0] < w[1]);
        }
        let all = inference_steps(10, 10).unwrap();
        assert_eq!(all, (0..=10).collect::<Vec<_>>());
        let capped = inference_steps(10, 50).unwrap();
        assert_eq!(capped, (0..=10).collect::<Vec<_>>());
        assert!(inference_steps(10, 0).is_err());
    }
}
