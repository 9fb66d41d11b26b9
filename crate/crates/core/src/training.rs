//! Two-phase optimization: per-modality codec pretraining, then the shared
//! denoiser and adapter bank over frozen codecs, plus incremental extension
//! of the trained direction set. Every step emits a JSON-serializable
//! report whose loss terms satisfy `total = primary + weight * auxiliary`.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::construct_input;
use crate::checkpoint::ModelState;
use crate::dataset::PairedDataset;
use crate::diffusion::{forward_diffuse, LatentBatch};
use crate::error::{Error, Result};
use crate::nn::{derive_rng, Adam, AdamGroup};
use crate::registry::ModalityId;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Per-modality codec reconstruction training.
    Codec,
    /// Shared-denoiser and adapter training over frozen codecs.
    Diffusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lambda: f64,
    pub directions: Vec<(ModalityId, ModalityId)>,
    pub seed: u64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn stage1(total_steps: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Codec,
            lr: 1e-4,
            batch_size: 8,
            total_steps,
            lambda: 1.0,
            directions: Vec::new(),
            seed,
            precision: Precision::F32,
        }
    }

    pub fn stage2(
        total_steps: usize,
        directions: Vec<(ModalityId, ModalityId)>,
        seed: u64,
    ) -> Self {
        Self {
            stage: Stage::Diffusion,
            lr: 1e-4,
            batch_size: 8,
            total_steps,
            lambda: 1.0,
            directions,
            seed,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidTrainConfig("lambda must be finite and >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidTrainConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidTrainConfig("batch size must be at least 1".into()));
        }
        if self.stage == Stage::Diffusion && self.directions.is_empty() {
            return Err(Error::InvalidTrainConfig(
                "diffusion stage needs a non-empty direction set".into(),
            ));
        }
        for &(s, t) in &self.directions {
            if s == t {
                return Err(Error::InvalidTrainConfig(format!(
                    "direction {}:{} has identical endpoints",
                    s.0, t.0
                )));
            }
        }
        Ok(())
    }
}

/// One optimization step, summarized. `total` must equal
/// `primary + weight * auxiliary` to 1e-6 relative; in the codec stage the
/// primary slot holds reconstruction (plus any perceptual term) and the
/// auxiliary slot holds the KL penalty with its own weight.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_z0: f64,
    pub l_calib: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepReport {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("step report serializes")
    }

    pub fn check(&self) -> Result<()> {
        let vals = [self.l_z0, self.l_calib, self.l_total, self.lambda, self.grad_norm];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("step {} report", self.step)));
        }
        let expect = self.l_z0 + self.lambda * self.l_calib;
        let tol = 1e-6 * expect.abs().max(1.0);
        if (self.l_total - expect).abs() > tol {
            return Err(Error::InvalidTrainConfig(format!(
                "step {}: total {} != {} + {} * {}",
                self.step, self.l_total, self.l_z0, self.lambda, self.l_calib
            )));
        }
        Ok(())
    }
}

/// Uniform draw from {1, .., total} per example.
pub fn sample_timesteps(rng: &mut impl Rng, n: usize, total: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=total)).collect()
}

/// Stacks equally shaped images into one `[batch, ..]` tensor.
pub fn stack<T: Scalar>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidTrainConfig("empty batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", first.shape()),
                got: format!("{:?}", img.shape()),
            });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::new(shape, data))
}

/// Stacks stored single-precision images into a `[batch, ..]` tensor of the
/// model's scalar type.
pub fn stack_cast<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidTrainConfig("empty batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", first.shape()),
                got: format!("{:?}", img.shape()),
            });
        }
        data.extend(img.data().iter().map(|&v| T::of_f64(v as f64)));
    }
    Ok(Tensor::new(shape, data))
}

/// Slices example `n` out of a batch, keeping a leading batch axis of 1.
pub fn nth_example<T: Scalar>(batch: &Tensor<T>, n: usize) -> Tensor<T> {
    let shape = batch.shape();
    let stride: usize = shape[1..].iter().product();
    let mut ex_shape = vec![1];
    ex_shape.extend_from_slice(&shape[1..]);
    Tensor::new(ex_shape, batch.data()[n * stride..(n + 1) * stride].to_vec())
}

/// Optimizes one codec on its own images. The model's other components are
/// untouched; reports stream through `sink`.
pub fn train_vae<T: Scalar>(
    model: &mut ModelState<T>,
    modality: ModalityId,
    images: &[Tensor<T>],
    config: &TrainConfig,
    mut sink: impl FnMut(&StepReport),
) -> Result<()> {
    config.validate()?;
    if config.stage != Stage::Codec {
        return Err(Error::InvalidTrainConfig(
            "codec training called with a diffusion-stage config".into(),
        ));
    }
    if images.is_empty() {
        return Err(Error::InvalidTrainConfig("no training images".into()));
    }
    let codec_config = model
        .codec_configs
        .get(modality.0)
        .cloned()
        .ok_or(Error::ModalityIdOutOfRange(modality.0, model.codec_configs.len()))?;
    let contract = model.registry.contract();
    let mut adam = Adam::new(config.lr);
    for step in 0..config.total_steps as u64 {
        let start = Instant::now();
        let mut rng = derive_rng(config.seed, &[0x56AE, modality.0 as u64, step]);
        let picks: Vec<&Tensor<T>> = (0..config.batch_size)
            .map(|_| &images[rng.random_range(0..images.len())])
            .collect();
        let batch = stack(&picks)?;
        let noise: Tensor<T> = Tensor::randn(
            vec![config.batch_size, contract.c, contract.h, contract.w],
            &mut rng,
        );
        let vae = &mut model.codecs[modality.0];
        let mut tape = crate::autodiff::Tape::new();
        let bound = vae.store().bind(&mut tape, true);
        let vars = vae.loss_on_tape(&mut tape, &bound, &batch, &noise, &codec_config)?;
        let total = tape.value(vars.total).data()[0].as_f64();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("codec loss at step {step}")));
        }
        let rec = tape.value(vars.rec).data()[0].as_f64();
        let perc = tape.value(vars.perceptual).data()[0].as_f64();
        let kl = tape.value(vars.kl).data()[0].as_f64();
        let mut grads = tape.backward(vars.total);
        let collected = vae.store().collect_grads(&bound, &mut grads);
        let mut groups = [AdamGroup { store: vae.store_mut(), grads: collected }];
        let grad_norm = adam.step(&mut groups, Some(1.0));
        let report = StepReport {
            step,
            l_z0: rec + codec_config.gamma * perc,
            l_calib: kl,
            l_total: total,
            lambda: codec_config.beta_kl,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        report.check()?;
        sink(&report);
    }
    Ok(())
}

/// One optimization step of the shared denoiser, conditioning tables, and
/// adapter bank on a homogeneous batch of one direction. Codecs only
/// encode; their parameters receive no gradient.
pub fn train_stage2_step<T: Scalar>(
    model: &mut ModelState<T>,
    adam: &mut Adam,
    src_batch: &Tensor<T>,
    tgt_batch: &Tensor<T>,
    direction: (ModalityId, ModalityId),
    seed: u64,
    lambda: f64,
) -> Result<StepReport> {
    let start = Instant::now();
    let (src, tgt) = direction;
    if !model.trained_directions.contains(&direction) {
        return Err(Error::DirectionNotTrained(format!(
            "{}:{}",
            model.registry.name(src)?,
            model.registry.name(tgt)?
        )));
    }
    let step = model.global_step;
    let mut rng = derive_rng(seed, &[0x57A2, step]);

    let (z_src_raw, _) = model.codecs[src.0].encode(src_batch, false, &mut rng)?;
    let (z_tgt_raw, _) = model.codecs[tgt.0].encode(tgt_batch, false, &mut rng)?;
    let s_src = model.registry.scale_factor(src)?;
    let s_tgt = model.registry.scale_factor(tgt)?;
    let z_src = z_src_raw.apply_scale(s_src)?;
    let z_j = z_tgt_raw.apply_scale(s_tgt)?;

    let batch = z_j.batch_size();
    let total_steps = model.schedule.steps();
    let ts = sample_timesteps(&mut rng, batch, total_steps);
    let eps: Tensor<T> = Tensor::randn(z_j.data().shape().to_vec(), &mut rng);

    let contract = model.registry.contract();
    let plane = contract.c * contract.h * contract.w;
    let mut z_t_data = Vec::with_capacity(batch * plane);
    for n in 0..batch {
        let z0_n = LatentBatch::new(nth_example(z_j.data(), n), tgt, true, contract)?;
        let eps_n = nth_example(&eps, n);
        let z_t_n = forward_diffuse(&z0_n, ts[n], &eps_n, &model.schedule)?;
        z_t_data.extend_from_slice(z_t_n.data().data());
    }
    let z_t = LatentBatch::new(
        Tensor::new(
            vec![batch, contract.c, contract.h, contract.w],
            z_t_data,
        ),
        tgt,
        true,
        contract,
    )?;
    let i_t = construct_input(&z_t, &z_src)?;

    let mut tape = crate::autodiff::Tape::new();
    let bb = model.backbone.store().bind(&mut tape, true);
    let cb = model.conditioner.store().bind(&mut tape, true);
    let ab = model.adapters.store().bind(&mut tape, true);
    let cond = model
        .conditioner
        .build_on_tape(&mut tape, &cb, &ts, total_steps, src, tgt)?;
    let x = tape.constant(i_t);
    let pred = model.backbone.forward_on_tape(&mut tape, &bb, x, cond);
    if !tape.value(pred).is_finite() {
        return Err(Error::NonFinite(format!("denoiser output at step {step}")));
    }
    let zj_const = tape.constant(z_j.data().clone());
    let diff = tape.sub(pred, zj_const);
    let sq = tape.mul(diff, diff);
    let l_z0 = tape.mean_all(sq);
    let l_calib = model
        .adapters
        .calibration_loss_on_tape(&mut tape, &ab, tgt, pred, zj_const)?;
    let weighted = tape.scale(l_calib, lambda);
    let l_total = tape.add(l_z0, weighted);

    let l_z0_v = tape.value(l_z0).data()[0].as_f64();
    let l_calib_v = tape.value(l_calib).data()[0].as_f64();
    let l_total_v = tape.value(l_total).data()[0].as_f64();
    if !l_total_v.is_finite() {
        return Err(Error::NonFinite(format!("composite loss at step {step}")));
    }

    let mut grads = tape.backward(l_total);
    let bg = model.backbone.store().collect_grads(&bb, &mut grads);
    let cg = model.conditioner.store().collect_grads(&cb, &mut grads);
    let ag = model.adapters.store().collect_grads(&ab, &mut grads);
    let mut groups = [
        AdamGroup { store: model.backbone.store_mut(), grads: bg },
        AdamGroup { store: model.conditioner.store_mut(), grads: cg },
        AdamGroup { store: model.adapters.store_mut(), grads: ag },
    ];
    let grad_norm = adam.step(&mut groups, Some(1.0));
    model.global_step += 1;

    let report = StepReport {
        step,
        l_z0: l_z0_v,
        l_calib: l_calib_v,
        l_total: l_total_v,
        lambda,
        grad_norm,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    report.check()?;
    Ok(report)
}

/// Runs the diffusion stage for `config.total_steps` steps, drawing one
/// direction uniformly per step and a homogeneous batch of its pairs.
pub fn train_stage2<T: Scalar>(
    model: &mut ModelState<T>,
    dataset: &PairedDataset,
    config: &TrainConfig,
    mut sink: impl FnMut(&StepReport),
) -> Result<()> {
    config.validate()?;
    if config.stage != Stage::Diffusion {
        return Err(Error::InvalidTrainConfig(
            "diffusion training called with a codec-stage config".into(),
        ));
    }
    for &(s, t) in &config.directions {
        model.add_direction(s, t)?;
    }
    let mut pair_cache: Vec<Vec<(usize, usize)>> = Vec::with_capacity(config.directions.len());
    for &(s, t) in &config.directions {
        let pairs = dataset.direction_pairs(s, t);
        if pairs.is_empty() {
            return Err(Error::InvalidTrainConfig(format!(
                "dataset has no pairs for direction {}:{}",
                model.registry.name(s)?,
                model.registry.name(t)?
            )));
        }
        pair_cache.push(pairs);
    }
    let mut adam = Adam::new(config.lr);
    for _ in 0..config.total_steps {
        let step = model.global_step;
        let mut rng = derive_rng(config.seed, &[0x57A2D, step]);
        let pick = rng.random_range(0..config.directions.len());
        let direction = config.directions[pick];
        let pairs = &pair_cache[pick];
        let chosen: Vec<(usize, usize)> = (0..config.batch_size)
            .map(|_| pairs[rng.random_range(0..pairs.len())])
            .collect();
        let src_imgs: Vec<&Tensor<f32>> = chosen.iter().map(|&(a, _)| dataset.image(a)).collect();
        let tgt_imgs: Vec<&Tensor<f32>> = chosen.iter().map(|&(_, b)| dataset.image(b)).collect();
        let src_batch: Tensor<T> = stack_cast(&src_imgs)?;
        let tgt_batch: Tensor<T> = stack_cast(&tgt_imgs)?;
        let report = train_stage2_step(
            model,
            &mut adam,
            &src_batch,
            &tgt_batch,
            direction,
            config.seed,
            config.lambda,
        )?;
        sink(&report);
    }
    Ok(())
}

/// Widens the trained direction set by union; weights and step counter are
/// untouched, so training resumes where the checkpoint left off.
pub fn extend_directions<T: Scalar>(
    model: &mut ModelState<T>,
    new_directions: &[(ModalityId, ModalityId)],
) -> Result<()> {
    for &(s, t) in new_directions {
        model.add_direction(s, t)?;
    }
    Ok(())
}
