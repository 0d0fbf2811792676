//! Checkpoint file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  b"LKFU"
//! u8     format version (currently 1)
//! u32    header length in bytes
//! bytes  header JSON
//! bytes  f64 blobs, back to back, in header order
//! ```
//!
//! The header records both configs in canonical key=value form, their joint
//! fingerprint, one entry per parameter blob (stable layer names) and the
//! optimizer moments. Writes are atomic (temp file + rename).

use super::adam::AdamState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{fnv1a, FusionNet, ModelConfig};
use crate::tensor::{Shape, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LKFU";
const VERSION: u8 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobMeta {
    name: String,
    shape: [usize; 4],
    trainable: bool,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MomentMeta {
    name: String,
    shape: [usize; 4],
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    model_config: String,
    train_config: String,
    fingerprint: String,
    params: Vec<BlobMeta>,
    optimizer_step: Option<usize>,
    optimizer_moments: Vec<MomentMeta>,
}

/// Joint fingerprint over both canonical config forms.
pub fn joint_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let text = format!("{}{}", model.to_kv_string(), train.to_kv_string());
    format!("{:016x}", fnv1a(text.as_bytes()))
}

/// In-memory checkpoint contents.
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub fingerprint: String,
    pub params: Vec<(String, Tensor, bool)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Error with named field diffs unless `expected` matches the stored
    /// model config exactly.
    pub fn require_model_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model_config == expected {
            return Ok(());
        }
        Err(Error::FingerprintMismatch {
            diffs: self.model_config.diff(expected),
        })
    }

    /// Rebuild the network with the stored parameters.
    pub fn build_net(&self) -> Result<FusionNet> {
        let mut net = FusionNet::new(&self.model_config, 0)?;
        if net.params().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter blobs, config expects {}",
                self.params.len(),
                net.params().len()
            )));
        }
        for (name, value, _) in &self.params {
            let id = net.params().id_of(name).ok_or_else(|| {
                Error::Format(format!("checkpoint parameter {name} not present in model"))
            })?;
            if net.params().get(id).shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    net.params().get(id).shape()
                )));
            }
            net.params_mut().set(id, value.clone());
        }
        Ok(net)
    }
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize and atomically write a checkpoint.
pub fn save_checkpoint(
    path: &Path,
    net: &FusionNet,
    train_cfg: &TrainConfig,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let mut params = Vec::new();
    let mut blobs: Vec<u8> = Vec::new();
    for (_, entry) in net.params().iter() {
        params.push(BlobMeta {
            name: entry.name.clone(),
            shape: entry.value.shape(),
            trainable: entry.trainable,
        });
        write_tensor(&mut blobs, &entry.value);
    }
    let mut optimizer_moments = Vec::new();
    if let Some(state) = optimizer {
        for (name, m, v) in &state.moments {
            optimizer_moments.push(MomentMeta {
                name: format!("m:{name}"),
                shape: m.shape(),
            });
            write_tensor(&mut blobs, m);
            optimizer_moments.push(MomentMeta {
                name: format!("v:{name}"),
                shape: v.shape(),
            });
            write_tensor(&mut blobs, v);
        }
    }
    let header = Header {
        model_config: net.config().to_kv_string(),
        train_config: train_cfg.to_kv_string(),
        fingerprint: joint_fingerprint(net.config(), train_cfg),
        params,
        optimizer_step: optimizer.map(|s| s.step),
        optimizer_moments,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(9 + header_json.len() + blobs.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blobs);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_tensor(data: &[u8], cursor: &mut usize, shape: Shape) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let bytes = n * 8;
    if *cursor + bytes > data.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let off = *cursor + i * 8;
        vals.push(f64::from_le_bytes(data[off..off + 8].try_into().unwrap()));
    }
    *cursor += bytes;
    Ok(Tensor::new(shape, vals))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 9 || &data[0..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    if data[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            data[4]
        )));
    }
    let header_len = u32::from_le_bytes(data[5..9].try_into().unwrap()) as usize;
    if data.len() < 9 + header_len {
        return Err(Error::Format("checkpoint truncated (header)".into()));
    }
    let header: Header = serde_json::from_slice(&data[9..9 + header_len])
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let model_config = ModelConfig::from_kv_str(&header.model_config)?;
    let train_config = TrainConfig::from_kv_str(&header.train_config)?;
    let expect_fp = joint_fingerprint(&model_config, &train_config);
    if expect_fp != header.fingerprint {
        return Err(Error::FingerprintMismatch {
            diffs: vec![format!(
                "stored fingerprint {} does not match configs ({})",
                header.fingerprint, expect_fp
            )],
        });
    }

    let blob_section = &data[9 + header_len..];
    let mut cursor = 0usize;
    let mut params = Vec::with_capacity(header.params.len());
    for meta in &header.params {
        let t = read_tensor(blob_section, &mut cursor, meta.shape)?;
        params.push((meta.name.clone(), t, meta.trainable));
    }
    let optimizer = if let Some(step) = header.optimizer_step {
        let mut moments: Vec<(String, Tensor, Tensor)> = Vec::new();
        let mut iter = header.optimizer_moments.iter();
        while let (Some(m_meta), Some(v_meta)) = (iter.next(), iter.next()) {
            let m = read_tensor(blob_section, &mut cursor, m_meta.shape)?;
            let v = read_tensor(blob_section, &mut cursor, v_meta.shape)?;
            let name = m_meta
                .name
                .strip_prefix("m:")
                .ok_or_else(|| Error::Format("bad optimizer moment name".into()))?;
            if v_meta.name.strip_prefix("v:") != Some(name) {
                return Err(Error::Format("optimizer moment pairing broken".into()));
            }
            moments.push((name.to_string(), m, v));
        }
        Some(AdamState { step, moments })
    } else {
        None
    };
    if cursor != blob_section.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            blob_section.len() - cursor
        )));
    }
    Ok(Checkpoint {
        model_config,
        train_config,
        fingerprint: header.fingerprint,
        params,
        optimizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ImageTensor;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    fn rand_pair(seed: u64) -> ImageTensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn([1, 2, 64, 64], |_| rng.random::<f64>())).unwrap()
    }

    fn desk_net(seed: u64) -> FusionNet {
        FusionNet::new(&ModelConfig::default().with_desk_widths(), seed).unwrap()
    }

    #[test]
    fn save_load_forward_bit_equality() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.lkc");
        let net = desk_net(3);
        let pair = rand_pair(4);
        let before = net.forward(&pair).unwrap();
        save_checkpoint(&path, &net, &TrainConfig::default(), None).unwrap();
        let loaded = load_checkpoint(&path).unwrap().build_net().unwrap();
        let after = loaded.forward(&pair).unwrap();
        assert_eq!(before.tensor(), after.tensor(), "forward must be bit-identical");
    }

    #[test]
    fn fingerprint_mismatch_names_fields() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.lkc");
        let net = desk_net(5);
        save_checkpoint(&path, &net, &TrainConfig::default(), None).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let mut no_mpafm = net.config().clone();
        no_mpafm.use_mpafm = false;
        match ckpt.require_model_config(&no_mpafm) {
            Err(Error::FingerprintMismatch { diffs }) => {
                assert!(diffs.iter().any(|d| d.contains("use_mpafm")), "{diffs:?}");
            }
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }

        let default_widths = ModelConfig::default();
        match ckpt.require_model_config(&default_widths) {
            Err(Error::FingerprintMismatch { diffs }) => {
                assert!(diffs.iter().any(|d| d.contains("channel_widths")), "{diffs:?}");
            }
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }

        assert!(ckpt.require_model_config(net.config()).is_ok());
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.lkc");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));

        let net = desk_net(6);
        save_checkpoint(&path, &net, &TrainConfig::default(), None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 16);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn optimizer_state_round_trips() {
        use super::super::adam::Adam;
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.lkc");
        let mut net = desk_net(7);
        let mut adam = Adam::new(1e-4);
        let id = net.params().id_of("head.conv.weight").unwrap();
        let g = Tensor::full(net.params().get(id).shape(), 1e-3);
        let grads = vec![(id, g)];
        adam.step(net.params_mut(), &grads);
        let state = adam.state(net.params());
        save_checkpoint(&path, &net, &TrainConfig::default(), Some(&state)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let restored = ckpt.optimizer.expect("optimizer present");
        assert_eq!(restored.step, 1);
        assert_eq!(restored.moments.len(), 1);
        assert_eq!(restored.moments[0].0, "head.conv.weight");
    }
}
