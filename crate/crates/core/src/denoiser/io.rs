//! Model file format: magic, version, config JSON, named f64 tensors,
//! and a trailing SHA-256 over everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::motion::NormalizationStats;
use crate::numerics::Tensor;

use super::{denoiser_param_schema, DenoiserConfig, DenoiserModel};
use super::net::Params;

const MAGIC: &[u8; 4] = b"FMOT";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

pub fn save_model(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config_json = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    let stats = model.stats();
    let mean = Tensor::new(vec![stats.dim()], stats.mean().to_vec())?;
    let std = Tensor::new(vec![stats.dim()], stats.std().to_vec())?;
    let count = model.params().len() + 2;
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    write_tensor(&mut buf, "stats.mean", &mean);
    write_tensor(&mut buf, "stats.std", &std);
    for (name, tensor) in model.params().iter() {
        write_tensor(&mut buf, name, tensor);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DenoiserModel> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + CHECKSUM_LEN {
        return Err(Error::Format("model file too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::Integrity("model checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}, expected {VERSION}"
        )));
    }
    let config_len = r.u32()? as usize;
    let config: DenoiserConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid stored config: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let (name, tensor) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Integrity(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format("trailing bytes after tensor section".into()));
    }
    let mean = tensors
        .remove("stats.mean")
        .ok_or_else(|| Error::Integrity("missing stats.mean".into()))?;
    let std = tensors
        .remove("stats.std")
        .ok_or_else(|| Error::Integrity("missing stats.std".into()))?;
    let stats = NormalizationStats::from_parts(mean.data().to_vec(), std.data().to_vec())
        .map_err(|e| Error::Integrity(format!("bad stats: {e}")))?;
    if stats.dim() != config.motion_dim() {
        return Err(Error::Integrity(format!(
            "stats dim {} does not match motion dim {}",
            stats.dim(),
            config.motion_dim()
        )));
    }
    let schema = denoiser_param_schema(&config);
    if tensors.len() != schema.len() {
        return Err(Error::Integrity(format!(
            "tensor count {} does not match config ({} expected)",
            tensors.len(),
            schema.len()
        )));
    }
    let mut params = Params::new();
    for spec in &schema {
        let tensor = tensors
            .remove(&spec.name)
            .ok_or_else(|| Error::Integrity(format!("missing tensor {}", spec.name)))?;
        if tensor.shape() != &spec.shape[..] {
            return Err(Error::Integrity(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                spec.name,
                tensor.shape(),
                spec.shape
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::Integrity(format!(
                "tensor {} has non-finite values",
                spec.name
            )));
        }
        params.insert(spec.name.clone(), tensor);
    }
    Ok(DenoiserModel::from_parts(config, stats, params))
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(tensor.shape().len() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
        .to_string();
    let rank = r.u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * 8)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("model file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::ModelKind;
    use crate::numerics::tests_rng;

    fn small_model(seed: u64) -> DenoiserModel {
        let mut rng = tests_rng(seed);
        let mut config = DenoiserConfig::desk(ModelKind::Pose);
        config.hidden = 16;
        config.layers = 1;
        config.encoder_blocks = 1;
        let stats = NormalizationStats::from_parts(
            vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6],
            vec![1.0, 2.0, 0.5, 1.5, 3.0, 0.25],
        )
        .unwrap();
        let mut model = DenoiserModel::init(config, stats, &mut rng).unwrap();
        model.randomize(&mut rng);
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmot");
        let model = small_model(1);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.stats(), model.stats());
        assert_eq!(loaded.params().len(), model.params().len());
        for ((na, ta), (nb, tb)) in loaded.params().iter().zip(model.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(ta), bits(tb), "tensor {na} changed");
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmot");
        save_model(&small_model(2), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        // keep the checksum valid so the magic check itself is exercised
        let body_len = bytes.len() - CHECKSUM_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_payload_fails_the_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmot");
        save_model(&small_model(3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn config_tensor_mismatch_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmot");
        save_model(&small_model(4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // bump "layers":1 to "layers":2 inside the config JSON, then re-sign
        let json_start = 12;
        let needle = b"\"layers\":1";
        let pos = bytes[json_start..]
            .windows(needle.len())
            .position(|w| w == needle)
            .expect("layers field")
            + json_start;
        bytes[pos + needle.len() - 1] = b'2';
        let body_len = bytes.len() - CHECKSUM_LEN;
        let digest = Sha256::digest(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&digest);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmot");
        save_model(&small_model(5), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(load_model(&path).is_err());
        assert!(matches!(
            load_model(&dir.path().join("missing.fmot")),
            Err(Error::NotFound(_))
        ));
    }
}
