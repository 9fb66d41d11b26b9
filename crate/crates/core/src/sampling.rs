//! Translation pipeline: encode the source, run the DDIM sampler in the
//! shared latent space conditioned on (t, src, tgt), calibrate the final
//! latent once, and decode with the target codec.

use crate::backbone::{construct_input, predict_x0};
use crate::checkpoint::ModelState;
use crate::diffusion::{ddim_step, inference_steps, LatentBatch};
use crate::error::{Error, Result};
use crate::nn::derive_rng;
use crate::registry::ModalityId;
use crate::tensor::{Scalar, Tensor};

/// Sampler settings. `steps` counts denoising transitions, so the sampler
/// visits `steps + 1` evenly spaced schedule indices including both
/// endpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 250, eta: 0.0, seed: 0 }
    }
}

impl SampleConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > total_steps {
            return Err(Error::InvalidSampleConfig(format!(
                "steps must lie in 1..={total_steps}, got {}",
                self.steps
            )));
        }
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidSampleConfig(format!(
                "eta must be a finite value >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Call counts observed while translating one batch. The pipeline order is
/// part of the contract: one denoiser call per transition, then exactly one
/// adapter application and one decode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineTrace {
    pub denoiser_calls: usize,
    pub adapter_calls: usize,
    pub decoder_calls: usize,
}

const SAMPLER_NOISE_TAG: u64 = 0x5A3B;

/// Translates a batch of source images `[b, c_src, n_src, n_src]` into the
/// target modality, returning images in `[-1, 1]` at the target's native
/// resolution. Unseen (src, tgt) pairs are sampled like any other; training
/// coverage only affects quality, never availability.
pub fn translate<T: Scalar>(
    model: &ModelState<T>,
    src_image: &Tensor<T>,
    src: ModalityId,
    tgt: ModalityId,
    config: &SampleConfig,
) -> Result<Tensor<T>> {
    translate_traced(model, src_image, src, tgt, config).map(|(img, _)| img)
}

/// Like [`translate`] but also reports the observed call counts.
pub fn translate_traced<T: Scalar>(
    model: &ModelState<T>,
    src_image: &Tensor<T>,
    src: ModalityId,
    tgt: ModalityId,
    config: &SampleConfig,
) -> Result<(Tensor<T>, PipelineTrace)> {
    let total = model.schedule.steps();
    translate_with_predictor(model, src_image, src, tgt, config, |i_t, t| {
        predict_x0(&model.backbone, &model.conditioner, i_t, t, total, src, tgt)
    })
}

/// Runs the full pipeline with a caller-supplied x0 predictor in place of
/// the denoiser. Exists so the surrounding stages (encode, scale, sampler
/// recursion, calibration, decode) can be exercised and pinned down without
/// a trained backbone.
pub fn translate_with_predictor<T, F>(
    model: &ModelState<T>,
    src_image: &Tensor<T>,
    src: ModalityId,
    tgt: ModalityId,
    config: &SampleConfig,
    mut predictor: F,
) -> Result<(Tensor<T>, PipelineTrace)>
where
    T: Scalar,
    F: FnMut(&Tensor<T>, usize) -> Result<LatentBatch<T>>,
{
    let total = model.schedule.steps();
    config.validate(total)?;
    let n = model.registry.len();
    for id in [src, tgt] {
        if id.0 >= n {
            return Err(Error::ModalityIdOutOfRange(id.0, n));
        }
    }
    if src == tgt {
        return Err(Error::IdenticalEndpoints(model.registry.name(src)?.to_string()));
    }
    let s_src = model.registry.scale_factor(src)?;
    let s_tgt = model.registry.scale_factor(tgt)?;

    let mut rng = derive_rng(config.seed, &[SAMPLER_NOISE_TAG]);
    let (z_raw, _) = model.codecs[src.0].encode(src_image, false, &mut rng)?;
    let z_i = z_raw.apply_scale(s_src)?;

    let contract = model.backbone.contract();
    let batch = z_i.batch_size();
    let noise = Tensor::<T>::randn([batch, contract.c, contract.h, contract.w], &mut rng);
    let mut z_t = LatentBatch::new(noise, tgt, true, contract)?;

    let mut trace = PipelineTrace::default();
    let taus = inference_steps(total, config.steps)?;
    for k in (1..taus.len()).rev() {
        let (t, t_prev) = (taus[k], taus[k - 1]);
        let i_t = construct_input(&z_t, &z_i)?;
        let x0 = predictor(&i_t, t)?;
        trace.denoiser_calls += 1;
        if !x0.scaled() || x0.modality() != tgt {
            return Err(Error::InvalidSpec(
                "predictor must return scaled latents tagged with the target modality".into(),
            ));
        }
        z_t = ddim_step(&z_t, &x0, t, t_prev, config.eta, &model.schedule, &mut rng)?;
    }

    let calibrated = model.adapters.calibrate(tgt, &z_t)?;
    trace.adapter_calls += 1;
    let unscaled = calibrated.remove_scale(s_tgt)?;
    let image = model.codecs[tgt.0].decode(&unscaled)?;
    trace.decoder_calls += 1;
    Ok((image, trace))
}
