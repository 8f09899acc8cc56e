//! Self-describing binary checkpoints.
//!
//! Layout: 4-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header describing the payload (kind tag, free-form
//! metadata, and the tensor table), then every tensor's `f64` values
//! little-endian in header order. Writes go through a temp file plus rename
//! so a crash never leaves a half-written checkpoint behind.

use crate::denoiser::DenoiserConfig;
use crate::estimator::EstimatorConfig;
use crate::metrics::LabelRange;
use crate::nn::ParamStore;
use crate::schedule::BaseSchedule;
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"UWDF";
pub const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Serializes a parameter store plus caller metadata under a kind tag.
pub fn save_params(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        tensors: params
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let payload_len: usize = params.num_elements() * 8;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, v) in params.iter() {
        for &x in v.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

/// Reads back what [`save_params`] wrote. The kind tag lets callers reject a
/// checkpoint from the wrong model family with a clear message.
pub fn load_params(path: &Path) -> Result<(String, serde_json::Value, ParamStore)> {
    let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut fixed = [0u8; 16];
    file.read_exact(&mut fixed).map_err(|e| io_err(path, e))?;
    if fixed[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(fixed[8..16].try_into().unwrap()) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: header decode: {e}", path.display())))?;

    let mut params = ParamStore::new();
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    let mut offset = 0usize;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > buf.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated payload at tensor {}",
                path.display(),
                entry.name
            )));
        }
        let vals: Vec<f64> = buf[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(
            &entry.name,
            ArrayD::from_shape_vec(IxDyn(&entry.shape), vals).unwrap(),
        );
        offset = end;
    }
    if offset != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing payload bytes",
            path.display(),
            buf.len() - offset
        )));
    }
    Ok((header.kind, header.meta, params))
}

fn decode_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    key: &str,
    path: &Path,
) -> Result<T> {
    let v = meta
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("{}: header missing {key:?}", path.display())))?;
    serde_json::from_value(v)
        .map_err(|e| Error::Checkpoint(format!("{}: bad {key}: {e}", path.display())))
}

/// Everything needed to run the sampler: denoiser weights plus the noise
/// schedule they were trained against.
pub struct DiffusionCheckpoint {
    pub denoiser: DenoiserConfig,
    pub base: BaseSchedule,
    pub alpha_coeff: f64,
    pub params: ParamStore,
}

const DIFFUSION_KIND: &str = "diffusion";
const ESTIMATOR_KIND: &str = "estimator";

impl DiffusionCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "denoiser": self.denoiser,
            "schedule": self.base,
            "alpha_coeff": self.alpha_coeff,
        });
        save_params(path, DIFFUSION_KIND, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, meta, params) = load_params(path)?;
        if kind != DIFFUSION_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected a {DIFFUSION_KIND} checkpoint, found {kind:?}",
                path.display()
            )));
        }
        Ok(Self {
            denoiser: decode_field(&meta, "denoiser", path)?,
            base: decode_field(&meta, "schedule", path)?,
            alpha_coeff: decode_field(&meta, "alpha_coeff", path)?,
            params,
        })
    }
}

/// Trained degradation regressor plus the label normalization it was fit
/// under (scores are only comparable inside one range).
pub struct EstimatorCheckpoint {
    pub config: EstimatorConfig,
    pub label_range: LabelRange,
    pub params: ParamStore,
}

impl EstimatorCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "label_range": self.label_range,
        });
        save_params(path, ESTIMATOR_KIND, meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, meta, params) = load_params(path)?;
        if kind != ESTIMATOR_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected an {ESTIMATOR_KIND} checkpoint, found {kind:?}",
                path.display()
            )));
        }
        Ok(Self {
            config: decode_field(&meta, "config", path)?,
            label_range: decode_field(&meta, "label_range", path)?,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use crate::schedule::make_base;
    use tempfile::tempdir;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = init::seeded_rng(seed);
        let mut store = ParamStore::new();
        store.insert("a.w", init::uniform(&mut rng, &[3, 2, 2], -1.0, 1.0));
        store.insert("a.b", init::uniform(&mut rng, &[3], -1.0, 1.0));
        store.insert("b.w", init::uniform(&mut rng, &[4, 3], -1.0, 1.0));
        store
    }

    #[test]
    fn params_round_trip_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("params.uwdf");
        let store = random_store(7);
        save_params(&path, "test", serde_json::json!({"note": 1}), &store).unwrap();
        let (kind, meta, loaded) = load_params(&path).unwrap();
        assert_eq!(kind, "test");
        assert_eq!(meta["note"], 1);
        assert_eq!(loaded.len(), store.len());
        for (name, v) in store.iter() {
            let l = loaded.get(name);
            assert_eq!(v.shape(), l.shape());
            for (a, b) in v.iter().zip(l.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} not bitwise equal");
            }
        }
        // insertion order preserved
        let names: Vec<_> = loaded.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, ["a.w", "a.b", "b.w"]);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.uwdf");
        atomic_write(&path, b"NOPExxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_params(&path), Err(Error::Checkpoint(_))));

        let good = dir.path().join("good.uwdf");
        save_params(&good, "t", serde_json::Value::Null, &random_store(1)).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.uwdf");
        atomic_write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_params(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn diffusion_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("diff.uwdf");
        let ckpt = DiffusionCheckpoint {
            denoiser: DenoiserConfig::tiny(),
            base: make_base(20, 1e-4, 0.02).unwrap(),
            alpha_coeff: 0.35,
            params: random_store(3),
        };
        ckpt.save(&path).unwrap();
        let back = DiffusionCheckpoint::load(&path).unwrap();
        assert_eq!(back.denoiser.input_side, ckpt.denoiser.input_side);
        assert_eq!(back.base.beta, ckpt.base.beta);
        assert_eq!(back.alpha_coeff, ckpt.alpha_coeff);
        assert_eq!(back.params.get("a.w"), ckpt.params.get("a.w"));
        // wrong-kind load fails loudly
        assert!(EstimatorCheckpoint::load(&path).is_err());
    }

    #[test]
    fn estimator_checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("est.uwdf");
        let ckpt = EstimatorCheckpoint {
            config: EstimatorConfig::tiny(),
            label_range: LabelRange {
                psnr_min: 12.0,
                psnr_max: 38.5,
            },
            params: random_store(5),
        };
        ckpt.save(&path).unwrap();
        let back = EstimatorCheckpoint::load(&path).unwrap();
        assert_eq!(back.config.base_channels, ckpt.config.base_channels);
        assert_eq!(back.label_range.psnr_max, 38.5);
        assert!(DiffusionCheckpoint::load(&path).is_err());
    }
}
