//! Per-modality variational codecs: convolutional encoder/decoder pairs
//! mapping native images into the shared latent contract and back, the
//! Stage-I composite loss, and latent scale estimation.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::diffusion::LatentBatch;
use crate::error::{Error, Result};
use crate::nn::{derive_rng, Bindings, Conv2dLayer, ParamStore};
use crate::registry::{LatentShapeContract, ModalityId, Registry};
use crate::tensor::{Scalar, Tensor};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// How the optional perceptual term is computed. The slot is pluggable;
/// the built-in choice compares multi-scale image gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Perceptual {
    #[default]
    GradientL1,
}

#[derive(Clone, Debug)]
pub struct CodecConfig {
    pub base_width: usize,
    pub gamma: f64,
    pub beta_kl: f64,
    pub perceptual: Perceptual,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            gamma: 0.0,
            beta_kl: 1e-5,
            perceptual: Perceptual::GradientL1,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::InvalidSpec("codec base width must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "beta_kl must be >= 0, got {}",
                self.beta_kl
            )));
        }
        Ok(())
    }
}

/// Batched diagonal-Gaussian posterior over latents; `logvar` is already
/// clamped to `[-30, 20]`.
#[derive(Clone, Debug)]
pub struct LatentPosterior<T: Scalar> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub total: f64,
}

/// Composite codec loss from precomputed pieces:
/// `rec + gamma * perceptual + beta_kl * kl` with `rec` the per-element
/// MSE and `kl` the closed-form divergence from a standard normal.
pub fn vae_loss<T: Scalar>(
    image: &Tensor<T>,
    recon: &Tensor<T>,
    posterior: &LatentPosterior<T>,
    gamma: f64,
    beta_kl: f64,
    perceptual: f64,
) -> Result<LossBreakdown> {
    if image.shape() != recon.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", image.shape()),
            got: format!("{:?}", recon.shape()),
        });
    }
    let rec = image.mse_f64(recon);
    let kl = kl_standard_normal(posterior);
    let total = rec + gamma * perceptual + beta_kl * kl;
    Ok(LossBreakdown { rec, perceptual, kl, total })
}

/// Mean over all elements of `0.5 (mu^2 + e^logvar - 1 - logvar)`.
pub fn kl_standard_normal<T: Scalar>(posterior: &LatentPosterior<T>) -> f64 {
    let n = posterior.mean.numel() as f64;
    posterior
        .mean
        .data()
        .iter()
        .zip(posterior.logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64().clamp(LOGVAR_MIN, LOGVAR_MAX));
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        / n
}

struct EncBlock {
    down: Conv2dLayer,
    refine: Conv2dLayer,
}

struct DecBlock {
    refine: Conv2dLayer,
}

/// One modality's VAE. Parameters live in a named store so training,
/// checkpointing and gradient tests all see the same flat view.
pub struct Vae<T: Scalar> {
    modality: ModalityId,
    channels: usize,
    native: usize,
    contract: LatentShapeContract,
    store: ParamStore<T>,
    enc_stem: Conv2dLayer,
    enc_blocks: Vec<EncBlock>,
    enc_head: Conv2dLayer,
    dec_stem: Conv2dLayer,
    dec_blocks: Vec<DecBlock>,
    dec_head: Conv2dLayer,
}

impl<T: Scalar> Vae<T> {
    /// Width ladder from the stem down to the latent grid: doubles per
    /// downsampling stage, capped at 4x the base.
    fn ladder(base: usize, depth: usize) -> Vec<usize> {
        (0..=depth).map(|i| (base << i.min(2)).min(base * 4)).collect()
    }

    pub fn init(registry: &Registry, modality: ModalityId, config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = registry.spec(modality)?;
        let contract = registry.contract();
        let depth = (spec.native_size / contract.h).trailing_zeros() as usize;
        let widths = Self::ladder(config.base_width, depth);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, &[0xC0DEC, modality.0 as u64]);

        let enc_stem = Conv2dLayer::init(&mut store, "enc.stem", spec.channels, widths[0], 3, 1, 1, &mut rng);
        let mut enc_blocks = Vec::new();
        for d in 0..depth {
            let down = Conv2dLayer::init(
                &mut store,
                &format!("enc.down{d}"),
                widths[d],
                widths[d + 1],
                3,
                2,
                1,
                &mut rng,
            );
            let refine = Conv2dLayer::init(
                &mut store,
                &format!("enc.refine{d}"),
                widths[d + 1],
                widths[d + 1],
                3,
                1,
                1,
                &mut rng,
            );
            enc_blocks.push(EncBlock { down, refine });
        }
        let enc_head = Conv2dLayer::init(
            &mut store,
            "enc.head",
            widths[depth],
            2 * contract.c,
            3,
            1,
            1,
            &mut rng,
        );

        let dec_stem = Conv2dLayer::init(&mut store, "dec.stem", contract.c, widths[depth], 3, 1, 1, &mut rng);
        let mut dec_blocks = Vec::new();
        for d in (0..depth).rev() {
            let refine = Conv2dLayer::init(
                &mut store,
                &format!("dec.up{d}"),
                widths[d + 1],
                widths[d],
                3,
                1,
                1,
                &mut rng,
            );
            dec_blocks.push(DecBlock { refine });
        }
        let dec_head = Conv2dLayer::init(&mut store, "dec.head", widths[0], spec.channels, 3, 1, 1, &mut rng);

        Ok(Self {
            modality,
            channels: spec.channels,
            native: spec.native_size,
            contract,
            store,
            enc_stem,
            enc_blocks,
            enc_head,
            dec_stem,
            dec_blocks,
            dec_head,
        })
    }

    pub fn modality(&self) -> ModalityId {
        self.modality
    }

    pub fn contract(&self) -> LatentShapeContract {
        self.contract
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn check_image(&self, img: &Tensor<T>) -> Result<()> {
        let shape = img.shape();
        let ok = shape.len() == 4
            && shape[1] == self.channels
            && shape[2] == self.native
            && shape[3] == self.native;
        if !ok {
            return Err(Error::ShapeMismatch {
                expected: format!("(batch, {}, {}, {})", self.channels, self.native, self.native),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Encoder half on an existing tape: returns `(mean, logvar)`, the
    /// logvar already clamped.
    pub fn encode_on_tape(&self, tape: &mut Tape<T>, bound: &Bindings, x: Var) -> (Var, Var) {
        let mut h = self.enc_stem.forward(tape, bound, x);
        h = tape.silu(h);
        for block in &self.enc_blocks {
            h = block.down.forward(tape, bound, h);
            h = tape.silu(h);
            h = block.refine.forward(tape, bound, h);
            h = tape.silu(h);
        }
        let stats = self.enc_head.forward(tape, bound, h);
        let mean = tape.slice_axis1(stats, 0, self.contract.c);
        let logvar_raw = tape.slice_axis1(stats, self.contract.c, self.contract.c);
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    /// Decoder half on an existing tape; output is tanh-bounded.
    pub fn decode_on_tape(&self, tape: &mut Tape<T>, bound: &Bindings, z: Var) -> Var {
        let mut h = self.dec_stem.forward(tape, bound, z);
        h = tape.silu(h);
        for block in &self.dec_blocks {
            h = tape.upsample2x(h);
            h = block.refine.forward(tape, bound, h);
            h = tape.silu(h);
        }
        let out = self.dec_head.forward(tape, bound, h);
        tape.tanh(out)
    }

    /// Maps a native image batch into the latent contract. With
    /// `sample=true` draws `z = mean + exp(logvar/2) * xi` using `rng`;
    /// otherwise returns the posterior mean. Output is flagged unscaled.
    pub fn encode<R: Rng>(
        &self,
        img: &Tensor<T>,
        sample: bool,
        rng: &mut R,
    ) -> Result<(LatentBatch<T>, LatentPosterior<T>)> {
        self.check_image(img)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let (mean_v, logvar_v) = self.encode_on_tape(&mut tape, &bound, x);
        let mean = tape.value(mean_v).clone();
        let logvar = tape.value(logvar_v).clone();
        let z = if sample {
            let xi: Tensor<T> = Tensor::randn(mean.shape().to_vec(), rng);
            let std = logvar.map(|lv| (lv * T::of_f64(0.5)).exp());
            mean.add(&xi.mul(&std))
        } else {
            mean.clone()
        };
        let latent = LatentBatch::new(z, self.modality, false, self.contract)?;
        Ok((latent, LatentPosterior { mean, logvar }))
    }

    /// Decodes unscaled latents back to native images in `[-1, 1]`.
    pub fn decode(&self, latent: &LatentBatch<T>) -> Result<Tensor<T>> {
        if latent.scaled() {
            return Err(Error::ScaledLatentAtDecode);
        }
        if latent.modality() != self.modality {
            return Err(Error::InvalidSpec(format!(
                "latent belongs to modality {} but codec serves {}",
                latent.modality().0,
                self.modality.0
            )));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let z = tape.constant(latent.data().clone());
        let out = self.decode_on_tape(&mut tape, &bound, z);
        Ok(tape.value(out).clone())
    }

    /// Full training loss on a tape: encode, reparameterize with the given
    /// noise, decode, and combine reconstruction, perceptual and KL terms.
    /// Returns the loss variable plus the term variables for reporting.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bindings,
        img: &Tensor<T>,
        noise: &Tensor<T>,
        config: &CodecConfig,
    ) -> Result<VaeLossVars> {
        self.check_image(img)?;
        let x = tape.constant(img.clone());
        let (mean, logvar) = self.encode_on_tape(tape, bound, x);
        let half_logvar = tape.scale(logvar, 0.5);
        let std = tape.exp(half_logvar);
        let xi = tape.constant(noise.clone());
        let spread = tape.mul(std, xi);
        let z = tape.add(mean, spread);
        let recon = self.decode_on_tape(tape, bound, z);

        let diff = tape.sub(recon, x);
        let sq = tape.mul(diff, diff);
        let rec = tape.mean_all(sq);

        let perceptual = match config.perceptual {
            Perceptual::GradientL1 => gradient_l1(tape, recon, x),
        };

        // 0.5 * (mu^2 + e^lv - 1 - lv), averaged per element
        let mu_sq = tape.mul(mean, mean);
        let e_lv = tape.exp(logvar);
        let sum1 = tape.add(mu_sq, e_lv);
        let neg_lv = tape.scale(logvar, -1.0);
        let sum2 = tape.add(sum1, neg_lv);
        let shifted = tape.add_scalar(sum2, -1.0);
        let half = tape.scale(shifted, 0.5);
        let kl = tape.mean_all(half);

        let g_perc = tape.scale(perceptual, config.gamma);
        let b_kl = tape.scale(kl, config.beta_kl);
        let partial = tape.add(rec, g_perc);
        let total = tape.add(partial, b_kl);
        Ok(VaeLossVars { total, rec, perceptual, kl })
    }

    /// Loss evaluation without gradients, using seeded reparameterization
    /// noise; the breakdown satisfies the composite-total identity.
    pub fn evaluate_loss(
        &self,
        img: &Tensor<T>,
        config: &CodecConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let noise: Tensor<T> = Tensor::randn(
            vec![img.shape()[0], self.contract.c, self.contract.h, self.contract.w],
            rng,
        );
        let vars = self.loss_on_tape(&mut tape, &bound, img, &noise, config)?;
        Ok(LossBreakdown {
            rec: tape.value(vars.rec).data()[0].as_f64(),
            perceptual: tape.value(vars.perceptual).data()[0].as_f64(),
            kl: tape.value(vars.kl).data()[0].as_f64(),
            total: tape.value(vars.total).data()[0].as_f64(),
        })
    }
}

pub struct VaeLossVars {
    pub total: Var,
    pub rec: Var,
    pub perceptual: Var,
    pub kl: Var,
}

/// L1 difference of horizontal/vertical image gradients at full and half
/// resolution: a dependency-free stand-in for learned perceptual distance.
fn gradient_l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let mut terms = Vec::new();
    let (mut xa, mut xb) = (a, b);
    for level in 0..2 {
        if level > 0 {
            xa = tape.avg_pool2x(xa);
            xb = tape.avg_pool2x(xb);
        }
        for horizontal in [true, false] {
            let (ga, gb) = if horizontal {
                (tape.diff_h(xa), tape.diff_h(xb))
            } else {
                (tape.diff_w(xa), tape.diff_w(xb))
            };
            let d = tape.sub(ga, gb);
            let ad = tape.abs(d);
            terms.push(tape.mean_all(ad));
        }
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    tape.scale(acc, 0.25)
}

/// Pools every entry of the given mean latents and returns `1 / std`.
/// Requires at least 256 latent samples from a trained encoder.
pub fn estimate_scale<T: Scalar>(latents: &[LatentBatch<T>]) -> Result<f64> {
    let total: usize = latents.iter().map(|l| l.batch_size()).sum();
    if total < 256 {
        return Err(Error::InvalidSpec(format!(
            "scale estimation needs at least 256 latents, got {total}"
        )));
    }
    let mut n = 0.0f64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for batch in latents {
        if batch.scaled() {
            return Err(Error::AlreadyScaled);
        }
        for &v in batch.data().data() {
            let v = v.as_f64();
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
    }
    let var = m2 / n;
    if !var.is_finite() || var < 1e-12 {
        return Err(Error::DegenerateLatents(format!(
            "pooled latent variance {var} is unusable for scaling"
        )));
    }
    Ok(1.0 / var.sqrt())
}
