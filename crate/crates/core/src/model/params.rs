use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named parameter groups; every trainable tensor belongs to exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TextEncoder,
    DurationPredictor,
    PitchEnergyPredictor,
    SpeakerEmbedding,
    SpeechEncoder,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::TextEncoder,
        ParamGroup::DurationPredictor,
        ParamGroup::PitchEnergyPredictor,
        ParamGroup::SpeakerEmbedding,
        ParamGroup::SpeechEncoder,
        ParamGroup::Decoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::DurationPredictor => "duration_predictor",
            ParamGroup::PitchEnergyPredictor => "pitch_energy_predictor",
            ParamGroup::SpeakerEmbedding => "speaker_embedding",
            ParamGroup::SpeechEncoder => "speech_encoder",
            ParamGroup::Decoder => "decoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub type GroupSet = BTreeSet<ParamGroup>;

pub fn all_groups() -> GroupSet {
    ParamGroup::ALL.into_iter().collect()
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Owner of every trainable tensor, keyed by group then dotted name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    groups: BTreeMap<ParamGroup, BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn empty(dtype: DType, device: Device) -> Self {
        Self {
            groups: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, group: ParamGroup, name: &str, var: Var) -> Result<()> {
        let slot = self.groups.entry(group).or_default();
        if slot.insert(name.to_owned(), var).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {group}.{name}")));
        }
        Ok(())
    }

    pub fn get(&self, group: ParamGroup, name: &str) -> Option<&Var> {
        self.groups.get(&group).and_then(|g| g.get(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, &str, &Var)> {
        self.groups
            .iter()
            .flat_map(|(g, vars)| vars.iter().map(move |(n, v)| (*g, n.as_str(), v)))
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Var)> {
        self.groups
            .get(&group)
            .into_iter()
            .flat_map(|vars| vars.iter().map(|(n, v)| (n.as_str(), v)))
    }

    pub fn vars_in(&self, groups: &GroupSet) -> Vec<Var> {
        self.iter()
            .filter(|(g, _, _)| groups.contains(g))
            .map(|(_, _, v)| v.clone())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|(_, _, v)| v.elem_count()).sum()
    }

    pub fn num_params_in(&self, group: ParamGroup) -> usize {
        self.group(group).map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy with fresh storage.
    pub fn duplicate(&self) -> Result<Self> {
        let mut out = Self::empty(self.dtype, self.device.clone());
        for (g, n, v) in self.iter() {
            out.insert(g, n, Var::from_tensor(&v.as_tensor().copy()?)?)?;
        }
        Ok(out)
    }

    /// Overwrites every parameter present in `other` (same group and name).
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (g, n, v) in self.iter() {
            let src = other
                .get(g, n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {g}.{n}")))?;
            if src.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {g}.{n}: {:?} vs {:?}",
                    src.dims(),
                    v.dims()
                )));
            }
            v.set(&src.as_tensor().to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// Where layer constructors get their tensors from.
pub trait ParamSource {
    fn fetch(&mut self, group: ParamGroup, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
}

/// Creates fresh variables with a seeded generator.
pub struct InitSource {
    store: ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl InitSource {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            store: ParamStore::empty(dtype, device),
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

impl ParamSource for InitSource {
    fn fetch(&mut self, group: ParamGroup, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.insert(group, name, var)?;
        Ok(out)
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Hands out existing variables: tensors of trainable groups stay attached to
/// their `Var`, everything else is detached so no gradient can reach it.
pub struct ViewSource<'a> {
    store: &'a ParamStore,
    trainable: &'a GroupSet,
}

impl<'a> ViewSource<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a GroupSet) -> Self {
        Self { store, trainable }
    }
}

impl ParamSource for ViewSource<'_> {
    fn fetch(&mut self, group: ParamGroup, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let var = self
            .store
            .get(group, name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {group}.{name}")))?;
        if var.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {group}.{name} has shape {:?}, model expects {shape:?}",
                var.dims()
            )));
        }
        Ok(if self.trainable.contains(&group) {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Name prefix and group context threaded through layer constructors.
pub struct Scope<'s> {
    src: &'s mut dyn ParamSource,
    group: ParamGroup,
    prefix: String,
}

impl<'s> Scope<'s> {
    pub fn new(src: &'s mut dyn ParamSource, group: ParamGroup) -> Self {
        Self {
            src,
            group,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            src: &mut *self.src,
            group: self.group,
            prefix,
        }
    }

    pub fn group(&mut self, group: ParamGroup) -> Scope<'_> {
        Scope {
            src: &mut *self.src,
            group,
            prefix: String::new(),
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_owned()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.src.fetch(self.group, &full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.src.dtype()
    }

    pub fn device(&self) -> &Device {
        self.src.device()
    }
}
