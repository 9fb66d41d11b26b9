//! Per-target residual correction applied once after sampling. Each
//! registered modality owns a small convolutional branch that starts as an
//! exact no-op and learns to absorb systematic decode bias without touching
//! the shared denoiser.

use std::cell::Cell;

use crate::autodiff::{Tape, Var};
use crate::diffusion::LatentBatch;
use crate::error::{Error, Result};
use crate::nn::{derive_rng, Bindings, Conv2dLayer, ParamStore};
use crate::registry::{LatentShapeContract, ModalityId, Registry};
use crate::tensor::Scalar;

struct Branch {
    expand: Conv2dLayer,
    project: Conv2dLayer,
}

/// One residual branch per modality, indexed by target id. Branches are
/// zero maps at initialization, so a fresh bank passes latents through
/// bit-exactly.
pub struct AdapterBank<T: Scalar> {
    store: ParamStore<T>,
    branches: Vec<Branch>,
    contract: LatentShapeContract,
    invocations: Cell<usize>,
}

impl<T: Scalar> AdapterBank<T> {
    pub fn init(registry: &Registry, seed: u64) -> Result<Self> {
        if !registry.is_frozen() {
            return Err(Error::InvalidSpec(
                "adapter bank requires a frozen registry".into(),
            ));
        }
        let contract = registry.contract();
        let c = contract.c;
        let hidden = 2 * c;
        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, &[0xADA7]);
        let mut branches = Vec::with_capacity(registry.len());
        for id in 0..registry.len() {
            let expand = Conv2dLayer::init(
                &mut store,
                &format!("{id}.expand"),
                c,
                hidden,
                3,
                1,
                1,
                &mut rng,
            );
            let project = Conv2dLayer::init_zero(
                &mut store,
                &format!("{id}.project"),
                hidden,
                c,
                3,
                1,
                1,
            );
            branches.push(Branch { expand, project });
        }
        Ok(Self {
            store,
            branches,
            contract,
            invocations: Cell::new(0),
        })
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn contract(&self) -> LatentShapeContract {
        self.contract
    }

    /// How many times `calibrate` has run on this bank.
    pub fn invocations(&self) -> usize {
        self.invocations.get()
    }

    /// Grows the bank with zero-initialized branches for newly registered
    /// modalities; existing branches keep their weights.
    pub fn extend_to(&mut self, registry: &Registry, seed: u64) -> Result<()> {
        if !registry.is_frozen() {
            return Err(Error::InvalidSpec(
                "adapter bank requires a frozen registry".into(),
            ));
        }
        if registry.contract() != self.contract {
            return Err(Error::InvalidSpec(
                "registry latent contract changed under adapter bank".into(),
            ));
        }
        let c = self.contract.c;
        let hidden = 2 * c;
        let mut rng = derive_rng(seed, &[0xADA7, self.branches.len() as u64]);
        for id in self.branches.len()..registry.len() {
            let expand = Conv2dLayer::init(
                &mut self.store,
                &format!("{id}.expand"),
                c,
                hidden,
                3,
                1,
                1,
                &mut rng,
            );
            let project = Conv2dLayer::init_zero(
                &mut self.store,
                &format!("{id}.project"),
                hidden,
                c,
                3,
                1,
                1,
            );
            self.branches.push(Branch { expand, project });
        }
        Ok(())
    }

    fn branch(&self, tgt: ModalityId) -> Result<&Branch> {
        self.branches
            .get(tgt.0)
            .ok_or(Error::ModalityIdOutOfRange(tgt.0, self.branches.len()))
    }

    /// Residual branch for one target on a tape: `[b,c,h,w] -> [b,c,h,w]`.
    pub fn branch_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bindings,
        tgt: ModalityId,
        x: Var,
    ) -> Result<Var> {
        let branch = self.branch(tgt)?;
        let h = branch.expand.forward(tape, bound, x);
        let h = tape.silu(h);
        Ok(branch.project.forward(tape, bound, h))
    }

    /// Adds the target branch's correction to a sampled latent. Exactly one
    /// branch is evaluated; a freshly initialized bank returns the input
    /// unchanged, bit for bit.
    pub fn calibrate(&self, tgt: ModalityId, z_hat: &LatentBatch<T>) -> Result<LatentBatch<T>> {
        if !z_hat.scaled() {
            return Err(Error::NotScaled);
        }
        if z_hat.modality() != tgt {
            return Err(Error::InvalidSpec(format!(
                "latent tagged modality {} but calibrating target {}",
                z_hat.modality().0,
                tgt.0
            )));
        }
        self.branch(tgt)?;
        self.invocations.set(self.invocations.get() + 1);
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(z_hat.data().clone());
        let res = self.branch_on_tape(&mut tape, &bound, tgt, x)?;
        let sum = tape.add(x, res);
        LatentBatch::new(tape.value(sum).clone(), tgt, true, self.contract)
    }

    /// Squared-error loss of the corrected prediction against the clean
    /// latent. The prediction enters as a constant on both sides of the
    /// residual sum, so the gradient reaches only this bank's target branch.
    pub fn calibration_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bindings,
        tgt: ModalityId,
        z_hat: Var,
        z_j: Var,
    ) -> Result<Var> {
        let frozen = tape.detach(z_hat);
        let res = self.branch_on_tape(tape, bound, tgt, frozen)?;
        let corrected = tape.add(frozen, res);
        let diff = tape.sub(corrected, z_j);
        let sq = tape.mul(diff, diff);
        Ok(tape.mean_all(sq))
    }

    /// Analytic trainable-parameter count for this component.
    pub fn expected_param_count(&self) -> usize {
        let c = self.contract.c;
        let hidden = 2 * c;
        let per = (hidden * c * 9 + hidden) + (c * hidden * 9 + c);
        per * self.branches.len()
    }
}
