//! Checkpoint directories: `spec.json` (portable description of the
//! networks) plus `params.bin` (named flat parameter buffers).
//!
//! `params.bin` layout, all integers little-endian:
//! `b"X2EMPRM1"`, `u32` section count, then per section `u32` name length,
//! UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u64` element count, values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"X2EMPRM1";
pub const PARAMS_FILE: &str = "params.bin";
pub const SPEC_FILE: &str = "spec.json";

pub fn encode_params<T: Scalar>(sections: &[(&str, &dyn Module<T>)]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, module) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let values = module.flat_params();
        let wide = T::DTYPE == "f64";
        out.push(u8::from(wide));
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            if wide {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            } else {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    out
}

fn corrupt(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Decode `params.bin` into `(name, values)` sections.
pub fn decode_params<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Vec<T>)>> {
    let mut cur = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt(path, "truncated parameter file"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt(path, "bad section name"))?;
        let wide = match take(1)?[0] {
            0 => false,
            1 => true,
            d => return Err(corrupt(path, format!("unknown dtype tag {d}"))),
        };
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let width = if wide { 8 } else { 4 };
        let raw = take(n * width)?;
        let values = raw
            .chunks_exact(width)
            .map(|c| {
                if wide {
                    T::of(f64::from_le_bytes(c.try_into().unwrap()))
                } else {
                    T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                }
            })
            .collect();
        sections.push((name, values));
    }
    Ok(sections)
}

/// Write a checkpoint directory atomically: everything goes into a sibling
/// temporary directory that is renamed into place.
pub fn save_checkpoint<T: Scalar, S: Serialize>(
    dir: &Path,
    spec: &S,
    sections: &[(&str, &dyn Module<T>)],
) -> Result<()> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut tmp_name = dir.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = parent.join(tmp_name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let spec_path = tmp.join(SPEC_FILE);
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    let params_path = tmp.join(PARAMS_FILE);
    fs::write(&params_path, encode_params(sections)).map_err(|e| Error::io(&params_path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn load_spec<S: DeserializeOwned>(dir: &Path) -> Result<S> {
    let path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))
}

/// Fill each named module from the checkpoint's `params.bin`.
pub fn load_params<T: Scalar>(dir: &Path, targets: &mut [(&str, &mut dyn Module<T>)]) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let sections = decode_params::<T>(&path, &bytes)?;
    for (name, module) in targets.iter_mut() {
        let (_, values) = sections
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| corrupt(&path, format!("missing section {name}")))?;
        if !module.load_flat_params(values) {
            return Err(corrupt(
                &path,
                format!("section {name} has {} values, network needs {}", values.len(), module.num_params()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SegNet, SegNetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = SegNetSpec { base_channels: 2, depth: 2 };
        let a = SegNet::<f32>::new(spec, &mut rng);
        let mut b = SegNet::<f32>::new(spec, &mut rng);
        assert_ne!(a.param_hash(), b.param_hash());
        let ck = dir.path().join("seg");
        save_checkpoint(&ck, &spec, &[("segnet", &a)]).unwrap();
        assert_eq!(load_spec::<SegNetSpec>(&ck).unwrap(), spec);
        load_params(&ck, &mut [("segnet", &mut b)]).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        // Overwriting an existing checkpoint leaves no temporary behind.
        save_checkpoint(&ck, &spec, &[("segnet", &a)]).unwrap();
        assert!(!dir.path().join("seg.tmp").exists());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = SegNet::<f64>::new(SegNetSpec { base_channels: 2, depth: 1 }, &mut rng);
        let bytes = encode_params::<f64>(&[("segnet", &net)]);
        let p = Path::new("params.bin");
        assert_eq!(decode_params::<f64>(p, &bytes).unwrap()[0].1, net.flat_params());
        assert!(decode_params::<f64>(p, &bytes[..bytes.len() - 3]).is_err());
        assert!(decode_params::<f64>(p, b"garbage!").is_err());
    }
}
