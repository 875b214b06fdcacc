//! Checkpoint container.
//!
//! Layout: the line `STNOCR <version> <manifest bytes>\n`, a JSON manifest
//! (format version, model config, alphabet, optimizer scalars, training
//! progress, tensor directory of name, shape and byte offset), then the raw
//! little-endian `f32` payload of every tensor in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, StnOcr};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "STNOCR";

/// Position in a curriculum; the stored model has completed `epoch` epochs
/// of stage `stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub epoch: usize,
    pub global_step: u64,
    /// The stage already used its divergence retry.
    pub retried: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: StnOcr<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub progress: Option<Progress>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    config: OptimizerConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    alphabet: String,
    optimizer: Option<OptimizerEntry>,
    progress: Option<Progress>,
    tensors: Vec<TensorEntry>,
}

const MEAN: &str = "running_mean";
const VAR: &str = "running_var";
const FIRST: &str = "opt.first.";
const SECOND: &str = "opt.second.";

/// Parameters, then optimizer buffers.
fn named_tensors(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let m = &ck.model;
    let mut out: Vec<(String, &Tensor<f32>)> = m.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = &ck.optimizer {
        for ((name, _), t) in m.params.iter().zip(&opt.first) {
            out.push((format!("{FIRST}{name}"), t));
        }
        for ((name, _), t) in m.params.iter().zip(&opt.second) {
            out.push((format!("{SECOND}{name}"), t));
        }
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let m = &ck.model;
    let stat_tensors: Vec<(String, Tensor<f32>)> = m
        .stats
        .iter()
        .flat_map(|(name, s)| {
            [
                (format!("{name}.{MEAN}"), Tensor::new(&[s.mean.len()], s.mean.clone()).expect("stats shape")),
                (format!("{name}.{VAR}"), Tensor::new(&[s.var.len()], s.var.clone()).expect("stats shape")),
            ]
        })
        .collect();
    let mut all = named_tensors(ck);
    all.extend(stat_tensors.iter().map(|(n, t)| (n.clone(), t)));

    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(all.len());
    for (name, t) in &all {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        config: m.config.clone(),
        alphabet: m.config.alphabet.to_string(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerEntry { config: o.config, step: o.step }),
        progress: ck.progress.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename keeps an existing checkpoint intact on failure
    let tmp = path.with_extension("partial");
    fs::write(&tmp, to_bytes(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Parsed<'a> {
    manifest: Manifest,
    payload: &'a [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>, CheckpointError> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(CheckpointError::BadMagic)?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| CheckpointError::BadMagic)?;
    let mut parts = header.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or(CheckpointError::BadMagic)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CheckpointError::Manifest("missing manifest length".into()))?;
    let body = &bytes[nl + 1..];
    if body.len() < len {
        return Err(CheckpointError::Manifest(format!("manifest needs {len} bytes, file has {}", body.len())));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.version != version {
        return Err(CheckpointError::VersionMismatch { found: manifest.version, expected: FORMAT_VERSION });
    }
    if manifest.alphabet != manifest.config.alphabet.to_string() {
        return Err(CheckpointError::Manifest("alphabet disagrees with model config".into()));
    }
    Ok(Parsed { manifest, payload: &body[len..] })
}

impl Parsed<'_> {
    fn tensor(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>, CheckpointError> {
        let e = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if e.shape != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: e.shape.clone(),
                expected: expected.to_vec(),
            });
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > self.payload.len() {
            return Err(CheckpointError::Truncated { name: name.to_string(), needed: end, available: self.payload.len() });
        }
        Ok(self.payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    /// Fills every tensor of `model` from the payload.
    fn fill_model(&self, model: &mut StnOcr<f32>) -> Result<(), CheckpointError> {
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let shape = model.params.get(id).shape().to_vec();
            let data = self.tensor(&name, &shape)?;
            *model.params.get_mut(id) = Tensor::new(&shape, data).expect("shape checked");
        }
        for (name, s) in model.stats.iter_mut() {
            let c = s.mean.len();
            *s = RunningStats {
                mean: self.tensor(&format!("{name}.{MEAN}"), &[c])?,
                var: self.tensor(&format!("{name}.{VAR}"), &[c])?,
            };
        }
        Ok(())
    }
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let p = parse(bytes)?;
    let mut model = StnOcr::<f32>::new(p.manifest.config.clone(), 0)?;
    p.fill_model(&mut model)?;
    let optimizer = match &p.manifest.optimizer {
        None => None,
        Some(entry) => {
            let mut opt = OptimizerState::new(entry.config, &model.params)?;
            opt.step = entry.step;
            for (i, (name, t)) in model.params.iter().enumerate() {
                let shape = t.shape().to_vec();
                opt.first[i] = Tensor::new(&shape, p.tensor(&format!("{FIRST}{name}"), &shape)?)?;
                if let Some(slot) = opt.second.get_mut(i) {
                    *slot = Tensor::new(&shape, p.tensor(&format!("{SECOND}{name}"), &shape)?)?;
                }
            }
            Some(opt)
        }
    };
    Ok(Checkpoint { model, optimizer, progress: p.manifest.progress.clone() })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads only the weights and statistics into an existing model, checking
/// every tensor shape against it.
pub fn load_weights_into(path: &Path, model: &mut StnOcr<f32>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse(&bytes)?;
    p.fill_model(model)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, SceneSpec};
    use crate::eval::stack_images;

    fn small() -> ModelConfig {
        ModelConfig {
            localization_filters: [4, 4, 4],
            recognition_filters: [4, 4, 4],
            blstm_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn checkpoint() -> Checkpoint {
        let model = StnOcr::new(small(), 3).unwrap();
        let mut optimizer = OptimizerState::new(OptimizerConfig::adam(1e-3), &model.params).unwrap();
        optimizer.step = 7;
        optimizer.first[0].data_mut()[0] = 0.25;
        let progress = Some(Progress { stage: 1, epoch: 2, global_step: 40, retried: true });
        Checkpoint { model, optimizer: Some(optimizer), progress }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stnocr");
        let ck = checkpoint();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);

        let scene = generate_scene(&SceneSpec::default(), 0).unwrap();
        let images = stack_images(&[&scene.image]).unwrap();
        let a = ck.model.predict(&images).unwrap();
        let b = back.model.predict(&images).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let mut bytes = to_bytes(&checkpoint());
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        bytes[nl + 1] = b'#';
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(CheckpointError::Manifest(_)))));
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(from_bytes(b"PNG\n"), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        let mut bytes = to_bytes(&checkpoint());
        bytes[7] = b'9';
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 9, .. }))
        ));
    }

    #[test]
    fn truncated_payload_names_a_tensor() {
        let bytes = to_bytes(&checkpoint());
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(from_bytes(cut), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stnocr");
        save_checkpoint(&checkpoint(), &path).unwrap();
        let other = ModelConfig { blstm_hidden: 6, ..small() };
        let mut model = StnOcr::new(other, 0).unwrap();
        match load_weights_into(&path, &mut model) {
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { name, .. })) => assert!(name.starts_with("loc.head")),
            other => panic!("{other:?}"),
        }
    }
}
