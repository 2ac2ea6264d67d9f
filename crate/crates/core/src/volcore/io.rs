//! The `v3d` format: `<name>.json` header plus `<name>.raw` little-endian
//! row-major `[Z, Y, X]` payload with no header bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dtype, Modality, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: [usize; 3],
    pub dtype: Dtype,
    pub voxel_size_nm: [f64; 3],
    pub modality: Modality,
    pub intensity_range: [f64; 2],
}

impl VolumeHeader {
    pub fn payload_len(&self) -> u64 {
        self.shape.iter().map(|&s| s as u64).product::<u64>() * self.dtype.size() as u64
    }
}

/// Header and payload paths for a logical volume name. Any of `name`,
/// `name.v3d`, `name.json` or `name.raw` resolves to the same pair.
pub fn v3d_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("v3d" | "json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

fn read_header(json_path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(json_path).map_err(|e| Error::Format {
        path: json_path.to_path_buf(),
        msg: format!("cannot read header: {e}"),
    })?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if header.shape.iter().any(|&s| s == 0) {
        return Err(Error::Format {
            path: json_path.to_path_buf(),
            msg: format!("zero-sized dimension in {:?}", header.shape),
        });
    }
    Ok(header)
}

/// An opened volume whose payload has been length-checked but not read.
#[derive(Debug)]
pub struct LazyVolume {
    pub header: VolumeHeader,
    raw_path: PathBuf,
}

/// Open a `v3d` volume without reading its payload.
pub fn open_volume(path: impl AsRef<Path>) -> Result<LazyVolume> {
    let (json_path, raw_path) = v3d_paths(path.as_ref());
    let header = read_header(&json_path)?;
    let actual = fs::metadata(&raw_path)
        .map_err(|e| Error::io(&raw_path, e))?
        .len();
    let expected = header.payload_len();
    if actual != expected {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(LazyVolume { header, raw_path })
}

fn decode<T: Scalar>(dtype: Dtype, bytes: &[u8], out: &mut Vec<T>) {
    match dtype {
        Dtype::U8 => out.extend(bytes.iter().map(|&b| T::of(b as f64))),
        Dtype::F32 => out.extend(
            bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)),
        ),
    }
}

impl LazyVolume {
    pub fn shape(&self) -> [usize; 3] {
        self.header.shape
    }

    /// Read the sub-block at `offset` with extent `size` using seeks, one
    /// X-row at a time.
    pub fn read_region<T: Scalar>(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Volume<T>> {
        let shape = self.header.shape;
        for a in 0..3 {
            if offset[a] + size[a] > shape[a] {
                return Err(Error::CropTooLarge { crop: size, shape });
            }
        }
        let esize = self.header.dtype.size();
        let mut file = File::open(&self.raw_path).map_err(|e| Error::io(&self.raw_path, e))?;
        let mut row = vec![0u8; size[2] * esize];
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let idx = ((offset[0] + z) * shape[1] + offset[1] + y) * shape[2] + offset[2];
                file.seek(SeekFrom::Start((idx * esize) as u64))
                    .and_then(|_| file.read_exact(&mut row))
                    .map_err(|e| Error::io(&self.raw_path, e))?;
                decode(self.header.dtype, &row, &mut data);
            }
        }
        self.build(size, data)
    }

    pub fn read_all<T: Scalar>(&self) -> Result<Volume<T>> {
        let bytes = fs::read(&self.raw_path).map_err(|e| Error::io(&self.raw_path, e))?;
        let expected = self.header.payload_len();
        if bytes.len() as u64 != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut data = Vec::with_capacity(bytes.len() / self.header.dtype.size());
        decode(self.header.dtype, &bytes, &mut data);
        self.build(self.header.shape, data)
    }

    fn build<T: Scalar>(&self, shape: [usize; 3], data: Vec<T>) -> Result<Volume<T>> {
        let [lo, hi] = self.header.intensity_range;
        Volume::new(
            shape,
            data,
            self.header.voxel_size_nm,
            self.header.modality,
            (lo, hi),
            self.header.dtype,
        )
    }
}

/// Load a full `v3d` volume into memory.
pub fn load_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    open_volume(path)?.read_all()
}

/// Write `v` as a `v3d` pair. `u8` volumes must hold integers in `0..=255`.
pub fn save_volume<T: Scalar>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, raw_path) = v3d_paths(path.as_ref());
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(v.len() * v.dtype.size());
    match v.dtype {
        Dtype::U8 => {
            for &x in v.data() {
                let f = x.as_f64();
                if !(0.0..=255.0).contains(&f) || f.fract() != 0.0 {
                    return Err(Error::InvalidVolume(format!("value {f} is not representable as u8")));
                }
                bytes.push(f as u8);
            }
        }
        Dtype::F32 => {
            for &x in v.data() {
                bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let header = VolumeHeader {
        shape: v.shape(),
        dtype: v.dtype,
        voxel_size_nm: v.voxel_size_nm,
        modality: v.modality,
        intensity_range: [v.intensity_range.0, v.intensity_range.1],
    };
    let mut raw = BufWriter::new(File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?);
    raw.write_all(&bytes)
        .and_then(|_| raw.flush())
        .map_err(|e| Error::io(&raw_path, e))?;
    fs::write(&json_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_random_f32_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let v = Volume::new([4, 4, 4], data, [45.0, 64.0, 64.0], Modality::Em, (-5.0, 5.0), Dtype::F32).unwrap();
        let p = dir.path().join("vol.v3d");
        save_volume(&v, &p).unwrap();
        assert!(dir.path().join("vol.json").exists());
        assert!(dir.path().join("vol.raw").exists());
        let back: Volume<f32> = load_volume(&p).unwrap();
        assert_eq!(back.shape(), v.shape());
        assert_eq!(back.dtype, v.dtype);
        assert_eq!(back.voxel_size_nm, v.voxel_size_nm);
        assert_eq!(back.modality, v.modality);
        let bits = |x: &Volume<f32>| x.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn round_trip_u8() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..64).map(|i| (i * 4) as f32).collect();
        let v = Volume::new([4, 4, 4], data, [1.0; 3], Modality::Xray, (0.0, 255.0), Dtype::U8).unwrap();
        save_volume(&v, dir.path().join("u")).unwrap();
        assert_eq!(fs::metadata(dir.path().join("u.raw")).unwrap().len(), 64);
        assert_eq!(load_volume::<f32>(dir.path().join("u.raw")).unwrap(), v);
    }

    #[test]
    fn length_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"shape":[2,2,2],"dtype":"u8","voxel_size_nm":[1,1,1],"modality":"em","intensity_range":[0,255]}"#;
        fs::write(dir.path().join("bad.json"), header).unwrap();
        fs::write(dir.path().join("bad.raw"), [0u8; 7]).unwrap();
        match load_volume::<f32>(dir.path().join("bad.v3d")) {
            Err(Error::LengthMismatch { expected: 8, actual: 7 }) => {}
            other => panic!("expected length mismatch, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_or_missing_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume::<f32>(dir.path().join("nothing")),
            Err(Error::Format { .. })
        ));
        fs::write(dir.path().join("c.json"), "{\"shape\": [2,2").unwrap();
        fs::write(dir.path().join("c.raw"), [0u8; 8]).unwrap();
        assert!(matches!(load_volume::<f32>(dir.path().join("c")), Err(Error::Format { .. })));
    }

    #[test]
    fn large_declared_volume_opens_lazily() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"shape":[243,2700,2700],"dtype":"u8","voxel_size_nm":[45,64,64],"modality":"em","intensity_range":[0,255]}"#;
        fs::write(dir.path().join("big.json"), header).unwrap();
        // Sparse file: correct length, never materialized.
        let f = File::create(dir.path().join("big.raw")).unwrap();
        f.set_len(243 * 2700 * 2700).unwrap();
        let lazy = open_volume(dir.path().join("big.v3d")).unwrap();
        assert_eq!(lazy.shape(), [243, 2700, 2700]);
        assert_eq!(lazy.header.voxel_size_nm, [45.0, 64.0, 64.0]);
        let block: Volume<f32> = lazy.read_region([100, 1000, 2690], [2, 3, 10]).unwrap();
        assert_eq!(block.shape(), [2, 3, 10]);
        assert!(block.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn region_read_matches_in_memory_crop() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..5 * 6 * 7).map(|i| i as f32 * 0.5).collect();
        let v = Volume::new([5, 6, 7], data, [1.0; 3], Modality::Em, (0.0, 105.0), Dtype::F32).unwrap();
        save_volume(&v, dir.path().join("r")).unwrap();
        let lazy = open_volume(dir.path().join("r")).unwrap();
        let a: Volume<f32> = lazy.read_region([1, 2, 3], [3, 2, 4]).unwrap();
        assert_eq!(a, v.crop([1, 2, 3], [3, 2, 4]).unwrap());
    }
}
