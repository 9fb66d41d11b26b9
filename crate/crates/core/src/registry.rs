//! Modality registry: the set of image modalities, the shared latent-shape
//! contract every codec must satisfy, and the directed translation graph
//! splitting trained directions from zero-shot ones.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Stable integer handle for a registered modality. Ids follow registration
/// order and are persisted in checkpoints, where they index embedding rows
/// and adapter branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityId(pub usize);

/// Shared latent geometry all codecs encode into.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentShapeContract {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LatentShapeContract {
    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// One registered modality.
#[derive(Clone, Debug)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: usize,
    pub native_size: usize,
    /// Reciprocal-std latent normalizer, unset until estimated or loaded.
    pub scale_factor: Option<f64>,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, channels: usize, native_size: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            native_size,
            scale_factor: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionStatus {
    Trained,
    ZeroShot,
}

/// A directed translation task between two distinct modalities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranslationDirection {
    pub src: ModalityId,
    pub tgt: ModalityId,
    pub status: DirectionStatus,
}

/// Ordered set of trained (src, tgt) pairs.
pub type DirectionSet = BTreeSet<(ModalityId, ModalityId)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionFilter {
    All,
    Trained,
    ZeroShot,
}

/// Canonical desk-scale modality table: name, channels, native size.
pub const DESK_MODALITIES: [(&str, usize, usize); 5] = [
    ("SAR", 1, 32),
    ("RGB", 3, 32),
    ("MS", 6, 16),
    ("NIR", 1, 32),
    ("PAN", 1, 64),
];

/// Default training protocol: seven unordered pairs, trained in both
/// directions (14 directed tasks out of the 20 possible over 5 modalities).
pub const DEFAULT_TRAINING_PAIRS: [(&str, &str); 7] = [
    ("SAR", "RGB"),
    ("NIR", "RGB"),
    ("NIR", "MS"),
    ("MS", "RGB"),
    ("SAR", "MS"),
    ("SAR", "NIR"),
    ("PAN", "RGB"),
];

/// Immutable-after-freeze collection of modalities sharing one latent
/// contract.
#[derive(Clone, Debug)]
pub struct Registry {
    contract: LatentShapeContract,
    specs: Vec<ModalitySpec>,
    by_name: HashMap<String, usize>,
    frozen: bool,
}

impl Registry {
    pub fn new(contract: LatentShapeContract) -> Self {
        Self {
            contract,
            specs: Vec::new(),
            by_name: HashMap::new(),
            frozen: false,
        }
    }

    /// Five-modality registry over the (4, 8, 8) desk contract, frozen.
    pub fn desk_default() -> Self {
        let mut r = Self::new(LatentShapeContract { c: 4, h: 8, w: 8 });
        for (name, channels, native) in DESK_MODALITIES {
            r.register(ModalitySpec::new(name, channels, native))
                .expect("desk defaults are valid");
        }
        r.freeze();
        r
    }

    pub fn contract(&self) -> LatentShapeContract {
        self.contract
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn register(&mut self, spec: ModalitySpec) -> Result<ModalityId> {
        if self.frozen {
            return Err(Error::RegistryFrozen);
        }
        if self.by_name.contains_key(&spec.name) {
            return Err(Error::DuplicateModality(spec.name));
        }
        if spec.channels == 0 {
            return Err(Error::InvalidSpec(format!(
                "{}: channel count must be positive",
                spec.name
            )));
        }
        if spec.native_size < self.contract.h
            || spec.native_size % self.contract.h != 0
            || !(spec.native_size / self.contract.h).is_power_of_two()
        {
            return Err(Error::InvalidSpec(format!(
                "{}: native size {} is not a power-of-two multiple of latent size {}",
                spec.name, spec.native_size, self.contract.h
            )));
        }
        if let Some(s) = spec.scale_factor {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "{}: scale factor must be positive and finite",
                    spec.name
                )));
            }
        }
        let id = self.specs.len();
        self.by_name.insert(spec.name.clone(), id);
        self.specs.push(spec);
        Ok(ModalityId(id))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn id(&self, name: &str) -> Result<ModalityId> {
        self.by_name
            .get(name)
            .copied()
            .map(ModalityId)
            .ok_or_else(|| Error::UnknownModality(name.to_string()))
    }

    pub fn spec(&self, id: ModalityId) -> Result<&ModalitySpec> {
        self.specs
            .get(id.0)
            .ok_or(Error::ModalityIdOutOfRange(id.0, self.specs.len()))
    }

    pub fn name(&self, id: ModalityId) -> Result<&str> {
        Ok(self.spec(id)?.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModalityId, &ModalitySpec)> {
        self.specs.iter().enumerate().map(|(i, s)| (ModalityId(i), s))
    }

    /// Scale factors may be set after freezing; they are estimation
    /// results, not structure.
    pub fn set_scale_factor(&mut self, id: ModalityId, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "scale factor must be positive and finite, got {s}"
            )));
        }
        let len = self.specs.len();
        let spec = self
            .specs
            .get_mut(id.0)
            .ok_or(Error::ModalityIdOutOfRange(id.0, len))?;
        spec.scale_factor = Some(s);
        Ok(())
    }

    pub fn scale_factor(&self, id: ModalityId) -> Result<f64> {
        self.spec(id)?
            .scale_factor
            .ok_or_else(|| Error::ScaleUnset(self.specs[id.0].name.clone()))
    }

    /// Classifies a (src, tgt) pair against the trained set. Unseen pairs
    /// are never refused; they come back as zero-shot.
    pub fn resolve_direction(
        &self,
        src: &str,
        tgt: &str,
        trained: &DirectionSet,
    ) -> Result<TranslationDirection> {
        let src = self.id(src)?;
        let tgt = self.id(tgt)?;
        if src == tgt {
            return Err(Error::IdenticalEndpoints(self.specs[src.0].name.clone()));
        }
        let status = if trained.contains(&(src, tgt)) {
            DirectionStatus::Trained
        } else {
            DirectionStatus::ZeroShot
        };
        Ok(TranslationDirection { src, tgt, status })
    }

    /// All N·(N−1) directed pairs in (src id, tgt id) lexicographic order,
    /// optionally filtered by status.
    pub fn list_directions(
        &self,
        trained: &DirectionSet,
        filter: DirectionFilter,
    ) -> Vec<TranslationDirection> {
        let n = self.specs.len();
        let mut out = Vec::new();
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                let key = (ModalityId(s), ModalityId(t));
                let status = if trained.contains(&key) {
                    DirectionStatus::Trained
                } else {
                    DirectionStatus::ZeroShot
                };
                let keep = match filter {
                    DirectionFilter::All => true,
                    DirectionFilter::Trained => status == DirectionStatus::Trained,
                    DirectionFilter::ZeroShot => status == DirectionStatus::ZeroShot,
                };
                if keep {
                    out.push(TranslationDirection { src: key.0, tgt: key.1, status });
                }
            }
        }
        out
    }

    /// Parses `SRC:TGT` (case-sensitive modality names).
    pub fn parse_direction(&self, s: &str) -> Result<(ModalityId, ModalityId)> {
        let (src, tgt) = s
            .split_once(':')
            .ok_or_else(|| Error::BadDirectionSyntax(s.to_string()))?;
        if src.is_empty() || tgt.is_empty() || tgt.contains(':') {
            return Err(Error::BadDirectionSyntax(s.to_string()));
        }
        let src = self.id(src)?;
        let tgt = self.id(tgt)?;
        if src == tgt {
            return Err(Error::IdenticalEndpoints(self.specs[src.0].name.clone()));
        }
        Ok((src, tgt))
    }

    /// Expands unordered name pairs into a directed set containing both
    /// orientations of each pair.
    pub fn directions_from_pairs(&self, pairs: &[(&str, &str)]) -> Result<DirectionSet> {
        let mut set = DirectionSet::new();
        for (a, b) in pairs {
            let ia = self.id(a)?;
            let ib = self.id(b)?;
            if ia == ib {
                return Err(Error::IdenticalEndpoints(a.to_string()));
            }
            set.insert((ia, ib));
            set.insert((ib, ia));
        }
        Ok(set)
    }

    /// The default 14-direction trained set.
    pub fn default_trained_set(&self) -> Result<DirectionSet> {
        self.directions_from_pairs(&DEFAULT_TRAINING_PAIRS)
    }
}
