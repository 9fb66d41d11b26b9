//! The shared denoiser: a patch transformer over channel-concatenated
//! latents, modulated block-wise by a conditioning vector fusing the
//! diffusion step with source/target modality identities, regressing the
//! clean target latent directly.

use crate::autodiff::{Tape, Var};
use crate::diffusion::LatentBatch;
use crate::error::{Error, Result};
use crate::nn::{derive_rng, pos_embed_2d, timestep_features, Bindings, Linear, ParamStore};
use crate::registry::{LatentShapeContract, ModalityId, Registry};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// When false, the source/target identity rows are frozen at their
    /// seeded initialization instead of being trained.
    pub trainable_modality_embeddings: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            width: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            trainable_modality_embeddings: true,
        }
    }
}

impl BackboneConfig {
    /// A tiny-but-real configuration for fast double-precision gradient
    /// oracles and quick tests.
    pub fn micro() -> Self {
        Self {
            patch: 4,
            width: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            trainable_modality_embeddings: true,
        }
    }

    pub fn validate(&self, contract: LatentShapeContract) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidSpec("backbone config fields must be positive".into()));
        }
        if contract.h % self.patch != 0 || contract.w % self.patch != 0 {
            return Err(Error::InvalidSpec(format!(
                "latent grid {}x{} not divisible by patch {}",
                contract.h, contract.w, self.patch
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.width % 4 != 0 {
            return Err(Error::InvalidSpec("width must be a multiple of 4".into()));
        }
        Ok(())
    }
}

/// Joins a noisy target latent and a clean source latent along channels,
/// noisy-target block first. Both must carry the scaled flag.
pub fn construct_input<T: Scalar>(
    z_t: &LatentBatch<T>,
    z_src: &LatentBatch<T>,
) -> Result<Tensor<T>> {
    if !z_t.scaled() || !z_src.scaled() {
        return Err(Error::UnscaledBackboneInput);
    }
    let (a, b) = (z_t.data(), z_src.data());
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::ShapeMismatch {
            expected: format!("{sa:?}"),
            got: format!("{sb:?}"),
        });
    }
    let (batch, c1, c2, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(batch * (c1 + c2) * plane);
    for n in 0..batch {
        out.extend_from_slice(&a.data()[n * c1 * plane..(n + 1) * c1 * plane]);
        out.extend_from_slice(&b.data()[n * c2 * plane..(n + 1) * c2 * plane]);
    }
    Ok(Tensor::new(vec![batch, c1 + c2, h, w], out))
}

/// Timestep/modality conditioning: sinusoidal step features through a
/// two-layer map, summed with per-role identity rows, then a second
/// two-layer map. Parameters live in their own store so checkpoints can
/// address them as one component.
pub struct Conditioner<T: Scalar> {
    store: ParamStore<T>,
    width: usize,
    n_modalities: usize,
    t_fc1: Linear,
    t_fc2: Linear,
    src_table: crate::nn::ParamId,
    tgt_table: crate::nn::ParamId,
    c_fc1: Linear,
    c_fc2: Linear,
}

impl<T: Scalar> Conditioner<T> {
    pub fn init(registry: &Registry, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(registry.contract())?;
        let d = config.width;
        let n = registry.len();
        if n == 0 {
            return Err(Error::InvalidSpec("registry has no modalities".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, &[0xE0BED]);
        let t_fc1 = Linear::init(&mut store, "t_mlp.fc1", d, d, 0.02, &mut rng);
        let t_fc2 = Linear::init(&mut store, "t_mlp.fc2", d, d, 0.02, &mut rng);
        let src_table = store.add("src_table", crate::nn::normal_init([n, d], 0.02, &mut rng));
        let tgt_table = store.add("tgt_table", crate::nn::normal_init([n, d], 0.02, &mut rng));
        if !config.trainable_modality_embeddings {
            store.set_trainable(src_table, false);
            store.set_trainable(tgt_table, false);
        }
        let c_fc1 = Linear::init(&mut store, "cond_mlp.fc1", d, d, 0.02, &mut rng);
        let c_fc2 = Linear::init(&mut store, "cond_mlp.fc2", d, d, 0.02, &mut rng);
        Ok(Self {
            store,
            width: d,
            n_modalities: n,
            t_fc1,
            t_fc2,
            src_table,
            tgt_table,
            c_fc1,
            c_fc2,
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Per-example conditioning vectors, shape `[batch, width]`.
    pub fn build_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bindings,
        ts: &[usize],
        total_steps: usize,
        src: ModalityId,
        tgt: ModalityId,
    ) -> Result<Var> {
        for &t in ts {
            if t > total_steps {
                return Err(Error::StepOutOfRange { t, total: total_steps });
            }
        }
        if src.0 >= self.n_modalities || tgt.0 >= self.n_modalities {
            return Err(Error::ModalityIdOutOfRange(
                src.0.max(tgt.0),
                self.n_modalities,
            ));
        }
        let steps: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let feats = tape.constant(timestep_features(&steps, self.width));
        let h = self.t_fc1.forward(tape, bound, feats);
        let h = tape.silu(h);
        let e_t = self.t_fc2.forward(tape, bound, h);

        let idx_src = vec![src.0; ts.len()];
        let idx_tgt = vec![tgt.0; ts.len()];
        let e_src = tape.embed_rows(bound.var(self.src_table), &idx_src);
        let e_tgt = tape.embed_rows(bound.var(self.tgt_table), &idx_tgt);

        let sum = tape.add(e_t, e_src);
        let sum = tape.add(sum, e_tgt);
        let h = self.c_fc1.forward(tape, bound, sum);
        let h = tape.silu(h);
        Ok(self.c_fc2.forward(tape, bound, h))
    }

    /// Analytic trainable-parameter count for this component.
    pub fn expected_param_count(&self) -> usize {
        let d = self.width;
        let mlp = 2 * (d * d + d);
        2 * mlp + 2 * self.n_modalities * d
    }
}

struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// The patch transformer. Zero-initialized block modulation and output
/// head make the whole map identically zero at initialization.
pub struct Backbone<T: Scalar> {
    config: BackboneConfig,
    contract: LatentShapeContract,
    store: ParamStore<T>,
    patch_embed: Linear,
    blocks: Vec<Block>,
    final_modulation: Linear,
    head: Linear,
    pos: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init(contract: LatentShapeContract, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate(contract)?;
        let d = config.width;
        let p = config.patch;
        let in_features = 2 * contract.c * p * p;
        let out_features = contract.c * p * p;
        let (gh, gw) = (contract.h / p, contract.w / p);
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, &[0xBAC0]);
        let patch_embed = Linear::init(&mut store, "patch_embed", in_features, d, 0.02, &mut rng);
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            let modulation = Linear::init_zero(&mut store, &format!("block{i}.mod"), d, 6 * d);
            let qkv = Linear::init(&mut store, &format!("block{i}.attn.qkv"), d, 3 * d, 0.02, &mut rng);
            let proj = Linear::init(&mut store, &format!("block{i}.attn.proj"), d, d, 0.02, &mut rng);
            let fc1 = Linear::init(&mut store, &format!("block{i}.mlp.fc1"), d, config.mlp_ratio * d, 0.02, &mut rng);
            let fc2 = Linear::init(&mut store, &format!("block{i}.mlp.fc2"), config.mlp_ratio * d, d, 0.02, &mut rng);
            blocks.push(Block { modulation, qkv, proj, fc1, fc2 });
        }
        let final_modulation = Linear::init_zero(&mut store, "final.mod", d, 2 * d);
        let head = Linear::init_zero(&mut store, "final.head", d, out_features);
        let pos = pos_embed_2d(gh, gw, d);
        Ok(Self {
            config: *config,
            contract,
            store,
            patch_embed,
            blocks,
            final_modulation,
            head,
            pos,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
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

    /// Rebuilds the fixed position features; call after loading weights
    /// into a store created from a different construction path.
    pub fn tokens(&self) -> usize {
        (self.contract.h / self.config.patch) * (self.contract.w / self.config.patch)
    }

    /// Splits a modulation projection `[b, 6d]` into six `[b, d]` pieces.
    fn chunk6(tape: &mut Tape<T>, m: Var, d: usize) -> [Var; 6] {
        [
            tape.slice_axis1(m, 0, d),
            tape.slice_axis1(m, d, d),
            tape.slice_axis1(m, 2 * d, d),
            tape.slice_axis1(m, 3 * d, d),
            tape.slice_axis1(m, 4 * d, d),
            tape.slice_axis1(m, 5 * d, d),
        ]
    }

    fn modulate(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Var {
        let one_plus = tape.add_scalar(scale, 1.0);
        let scaled = tape.mul_bcast_tokens(x, one_plus);
        tape.add_bcast_tokens(scaled, shift)
    }

    fn attention(&self, tape: &mut Tape<T>, bound: &Bindings, block: &Block, x: Var) -> Var {
        let d = self.config.width;
        let heads = self.config.heads;
        let head_dim = d / heads;
        let qkv = block.qkv.forward(tape, bound, x);
        let (b, t) = {
            let s = tape.value(qkv).shape();
            (s[0], s[1])
        };
        let flat = tape.reshape(qkv, vec![b * t, 3 * d]);
        let q = tape.slice_axis1(flat, 0, d);
        let k = tape.slice_axis1(flat, d, d);
        let v = tape.slice_axis1(flat, 2 * d, d);
        let q = tape.reshape(q, vec![b, t, d]);
        let k = tape.reshape(k, vec![b, t, d]);
        let v = tape.reshape(v, vec![b, t, d]);
        let q = tape.split_heads(q, heads);
        let k = tape.split_heads(k, heads);
        let v = tape.split_heads(v, heads);
        let scores = tape.bmm(q, k, true);
        let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let ctx = tape.bmm(attn, v, false);
        let merged = tape.merge_heads(ctx, heads);
        block.proj.forward(tape, bound, merged)
    }

    /// Forward pass on a tape: input `[b, 2c, h, w]`, conditioning
    /// `[b, width]`, output `[b, c, h, w]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bindings,
        i_t: Var,
        cond: Var,
    ) -> Var {
        let d = self.config.width;
        let p = self.config.patch;
        let tokens = tape.patchify(i_t, p);
        let mut x = self.patch_embed.forward(tape, bound, tokens);
        let pos = tape.constant(self.pos.clone());
        x = tape.add_bcast_rows(x, pos);
        let act = tape.silu(cond);
        for block in &self.blocks {
            let m = block.modulation.forward(tape, bound, act);
            let [shift_a, scale_a, gate_a, shift_m, scale_m, gate_m] = Self::chunk6(tape, m, d);
            let normed = tape.layer_norm(x, 1e-6);
            let modded = Self::modulate(tape, normed, shift_a, scale_a);
            let attn_out = self.attention(tape, bound, block, modded);
            let gated = tape.mul_bcast_tokens(attn_out, gate_a);
            x = tape.add(x, gated);

            let normed = tape.layer_norm(x, 1e-6);
            let modded = Self::modulate(tape, normed, shift_m, scale_m);
            let h = block.fc1.forward(tape, bound, modded);
            let h = tape.silu(h);
            let mlp_out = block.fc2.forward(tape, bound, h);
            let gated = tape.mul_bcast_tokens(mlp_out, gate_m);
            x = tape.add(x, gated);
        }
        let m = self.final_modulation.forward(tape, bound, act);
        let shift = tape.slice_axis1(m, 0, d);
        let scale = tape.slice_axis1(m, d, d);
        let normed = tape.layer_norm(x, 1e-6);
        let modded = Self::modulate(tape, normed, shift, scale);
        let out = self.head.forward(tape, bound, modded);
        tape.unpatchify(out, p, self.contract.c, self.contract.h, self.contract.w)
    }

    /// Analytic trainable-parameter count for this component.
    pub fn expected_param_count(&self) -> usize {
        let d = self.config.width;
        let p = self.config.patch;
        let c = self.contract.c;
        let r = self.config.mlp_ratio;
        let patch = 2 * c * p * p * d + d;
        let block = (d * 6 * d + 6 * d)
            + (d * 3 * d + 3 * d)
            + (d * d + d)
            + (d * r * d + r * d)
            + (r * d * d + d);
        let final_ = (d * 2 * d + 2 * d) + (d * c * p * p + c * p * p);
        patch + self.config.depth * block + final_
    }
}

/// One-shot clean-latent prediction for a sampling step: every example in
/// the batch shares `t`, `src` and `tgt`. The output carries the target
/// modality and the scaled flag.
pub fn predict_x0<T: Scalar>(
    backbone: &Backbone<T>,
    conditioner: &Conditioner<T>,
    i_t: &Tensor<T>,
    t: usize,
    total_steps: usize,
    src: ModalityId,
    tgt: ModalityId,
) -> Result<LatentBatch<T>> {
    let shape = i_t.shape();
    let contract = backbone.contract();
    if shape.len() != 4 || shape[1] != 2 * contract.c || shape[2] != contract.h || shape[3] != contract.w {
        return Err(Error::ShapeMismatch {
            expected: format!("(batch, {}, {}, {})", 2 * contract.c, contract.h, contract.w),
            got: format!("{shape:?}"),
        });
    }
    let mut tape = Tape::new();
    let bb = backbone.store().bind(&mut tape, false);
    let cb = conditioner.store().bind(&mut tape, false);
    let x = tape.constant(i_t.clone());
    let ts = vec![t; shape[0]];
    let cond = conditioner.build_on_tape(&mut tape, &cb, &ts, total_steps, src, tgt)?;
    let out = backbone.forward_on_tape(&mut tape, &bb, x, cond);
    let value = tape.value(out).clone();
    if !value.is_finite() {
        return Err(Error::NonFinite("backbone output".into()));
    }
    LatentBatch::new(value, tgt, true, contract)
}
