//! Checkpoints are tar archives holding `config.json` (model shape),
//! `meta.json` (stage tag, lineage, feature kind, speakers) and one ACFT file
//! per parameter under `tensors/<group>/<name>.acft`.

use std::io::Read;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::stage::Stage;
use crate::error::{Error, Result};
use crate::features::SourceKind;
use crate::model::{ModelConfig, ParamGroup, ParamStore};
use crate::tensor_file;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    /// Optimizer steps taken in the stage that wrote this checkpoint.
    pub step: usize,
    /// Stages this parameter set went through, oldest first.
    pub lineage: Vec<Stage>,
    /// Input kind the speech encoder was trained on, once it has been.
    pub feature_kind: Option<SourceKind>,
    /// Speaker names by table row.
    pub speakers: Vec<String>,
    /// Validation total at the time of writing, if validation ran.
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut builder = tar::Builder::new(Vec::new());
        let mut add = |name: &str, data: &[u8]| -> Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, name, data)?;
            Ok(())
        };
        add("config.json", &serde_json::to_vec_pretty(&self.model)?)?;
        add("meta.json", &serde_json::to_vec_pretty(&self.meta)?)?;
        for (g, name, var) in self.params.iter() {
            let t = var.as_tensor().to_dtype(DType::F32)?.to_device(&Device::Cpu)?;
            let data: Vec<f32> = t.flatten_all()?.to_vec1()?;
            let arr = ArrayD::from_shape_vec(IxDyn(t.dims()), data).map_err(|e| Error::Shape(e.to_string()))?;
            add(&format!("tensors/{g}/{name}.acft"), &tensor_file::encode(&arr))?;
        }
        Ok(builder.into_inner()?)
    }

    pub fn from_bytes(bytes: &[u8], dtype: DType, device: &Device) -> Result<Self> {
        let mut model = None;
        let mut meta = None;
        let mut params = ParamStore::empty(dtype, device.clone());
        let mut archive = tar::Archive::new(bytes);
        for entry in archive.entries()? {
            let mut entry = entry?;
            let path = entry.path()?.to_string_lossy().into_owned();
            let mut data = Vec::new();
            entry.read_to_end(&mut data)?;
            match path.as_str() {
                "config.json" => model = Some(serde_json::from_slice::<ModelConfig>(&data)?),
                "meta.json" => meta = Some(serde_json::from_slice::<CheckpointMeta>(&data)?),
                p => {
                    let rest = p
                        .strip_prefix("tensors/")
                        .and_then(|r| r.strip_suffix(".acft"))
                        .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {p}")))?;
                    let (group, name) = rest
                        .split_once('/')
                        .ok_or_else(|| Error::Checkpoint(format!("bad tensor entry {p}")))?;
                    let group = ParamGroup::from_name(group)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter group {group}")))?;
                    let arr = tensor_file::decode(&data).map_err(|e| Error::Checkpoint(format!("{p}: {e}")))?;
                    let shape = arr.shape().to_vec();
                    let t = Tensor::from_vec(arr.into_raw_vec_and_offset().0, shape, device)?.to_dtype(dtype)?;
                    params.insert(group, name, Var::from_tensor(&t)?)?;
                }
            }
        }
        let model = model.ok_or_else(|| Error::Checkpoint("missing config.json".into()))?;
        let meta = meta.ok_or_else(|| Error::Checkpoint("missing meta.json".into()))?;
        model.validate()?;
        Ok(Self { model, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("ckpt.partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_as(path, DType::F32, &Device::Cpu)
    }

    pub fn load_as(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, dtype, device).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AccentModel;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::micro();
        let (_, params) = AccentModel::init(&cfg, 9, DType::F32, &Device::Cpu).unwrap();
        let ckpt = Checkpoint {
            model: cfg.clone(),
            meta: CheckpointMeta {
                stage: Stage::Alignment,
                step: 12,
                lineage: vec![Stage::Tts, Stage::Alignment],
                feature_kind: Some(SourceKind::Pretrained),
                speakers: vec!["a".into(), "b".into()],
                val_total: Some(0.5),
            },
            params,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, cfg);
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.params.num_params(), ckpt.params.num_params());
        for (g, n, v) in ckpt.params.iter() {
            let w = back.params.get(g, n).unwrap();
            let a: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = w.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "{g}.{n}");
        }
        // archives are byte-stable
        assert_eq!(ckpt.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(Checkpoint::from_bytes(b"not a tar", DType::F32, &Device::Cpu).is_err());
    }
}
