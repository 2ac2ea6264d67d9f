//! Volume data model shared by every stage of the pipeline.
//!
//! Voxels are indexed `[Z, Y, X]` row-major. Section planes map onto the
//! tensor axes as follows:
//!
//! | [`Axis`] | varying index | section shape |
//! |----------|---------------|---------------|
//! | `XY`     | Z             | `(Y, X)`      |
//! | `XZ`     | Y             | `(Z, X)`      |
//! | `YZ`     | X             | `(Z, Y)`      |

mod io;
mod ops;

pub use io::{load_volume, open_volume, save_volume, v3d_paths, LazyVolume, VolumeHeader};
pub use ops::{
    extract_slice, insert_slice, normalize, random_crop_pair, stack_sections, IntensityMap, NormalizeMode,
};
pub(crate) use ops::section_of;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Xray,
    Em,
    Label,
    Probability,
    Variance,
}

/// On-disk element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "XY")]
    XY,
    #[serde(rename = "XZ")]
    XZ,
    #[serde(rename = "YZ")]
    YZ,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::XY, Axis::XZ, Axis::YZ];

    /// The `[Z, Y, X]` tensor axis whose index selects a section.
    pub fn normal(self) -> usize {
        match self {
            Axis::XY => 0,
            Axis::XZ => 1,
            Axis::YZ => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::XY => "XY",
            Axis::XZ => "XZ",
            Axis::YZ => "YZ",
        }
    }

    /// Shape of a section of a volume with shape `[Z, Y, X]`.
    pub fn section_shape(self, shape: [usize; 3]) -> [usize; 2] {
        let [z, y, x] = shape;
        match self {
            Axis::XY => [y, x],
            Axis::XZ => [z, x],
            Axis::YZ => [z, y],
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A 2-D section, row-major `(rows, cols)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Section<T> {
    pub shape: [usize; 2],
    pub data: Vec<T>,
}

impl<T: Scalar> Section<T> {
    pub fn new(shape: [usize; 2], data: Vec<T>) -> Result<Self> {
        if shape[0] * shape[1] != data.len() {
            return Err(Error::Shape(format!(
                "section shape {shape:?} needs {} elements, got {}",
                shape[0] * shape[1],
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec([1, 1, 1, self.shape[0], self.shape[1]], self.data.clone())
            .expect("section data length matches its shape")
    }
}

/// A 3-D scalar volume with its acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    shape: [usize; 3],
    data: Vec<T>,
    pub voxel_size_nm: [f64; 3],
    pub modality: Modality,
    pub intensity_range: (f64, f64),
    pub dtype: Dtype,
}

impl<T: Scalar> Volume<T> {
    /// Build a volume, checking every invariant of the data model.
    pub fn new(
        shape: [usize; 3],
        data: Vec<T>,
        voxel_size_nm: [f64; 3],
        modality: Modality,
        intensity_range: (f64, f64),
        dtype: Dtype,
    ) -> Result<Self> {
        let v = Self {
            shape,
            data,
            voxel_size_nm,
            modality,
            intensity_range,
            dtype,
        };
        v.validate()?;
        Ok(v)
    }

    /// Float volume with range `(0, 1)`, the working form after normalization.
    pub fn unit(shape: [usize; 3], data: Vec<T>, voxel_size_nm: [f64; 3], modality: Modality) -> Result<Self> {
        Self::new(shape, data, voxel_size_nm, modality, (0.0, 1.0), Dtype::F32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dimension in {:?}", self.shape)));
        }
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {n} voxels, got {}",
                self.shape,
                self.data.len()
            )));
        }
        if self.voxel_size_nm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "voxel size must be positive, got {:?}",
                self.voxel_size_nm
            )));
        }
        let (lo, hi) = self.intensity_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::DegenerateRange { lo, hi });
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("voxel {i} is not finite")));
        }
        match self.modality {
            Modality::Label => {
                if self.data.iter().any(|&x| x != T::zero() && x != T::one()) {
                    return Err(Error::Label("label volume must be binary".into()));
                }
            }
            Modality::Probability => {
                if self.data.iter().any(|&x| x < T::zero() || x > T::one()) {
                    return Err(Error::InvalidVolume("probabilities must lie in [0, 1]".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    /// Same metadata, new data; invariants are re-checked.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(
            self.shape,
            data,
            self.voxel_size_nm,
            self.modality,
            self.intensity_range,
            self.dtype,
        )
    }

    /// Sub-block starting at `offset` with extent `size`.
    pub fn crop(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if offset[a] + size[a] > self.shape[a] {
                return Err(Error::CropTooLarge {
                    crop: size,
                    shape: self.shape,
                });
            }
        }
        let mut data = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(offset[0] + z, offset[1] + y, offset[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Self {
            shape: size,
            data,
            voxel_size_nm: self.voxel_size_nm,
            modality: self.modality,
            intensity_range: self.intensity_range,
            dtype: self.dtype,
        })
    }

    /// View as a single-sample, single-channel network input.
    pub fn to_tensor(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        Tensor::from_vec([1, 1, d, h, w], self.data.clone()).expect("volume data length matches its shape")
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|x| U::of(x.as_f64())).collect(),
            voxel_size_nm: self.voxel_size_nm,
            modality: self.modality,
            intensity_range: self.intensity_range,
            dtype: self.dtype,
        }
    }
}

/// Aligned X-ray / EM pair on a shared grid, optionally with membrane labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair<T> {
    pub xray: Volume<T>,
    pub em: Volume<T>,
    pub labels: Option<Volume<T>>,
}

impl<T: Scalar> VolumePair<T> {
    pub fn new(xray: Volume<T>, em: Volume<T>, labels: Option<Volume<T>>) -> Result<Self> {
        let pair = Self { xray, em, labels };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        let members = std::iter::once(&self.em).chain(self.labels.as_ref());
        for v in members {
            if v.shape() != self.xray.shape() {
                return Err(Error::Shape(format!(
                    "pair members differ in shape: {:?} vs {:?}",
                    self.xray.shape(),
                    v.shape()
                )));
            }
            if v.voxel_size_nm != self.xray.voxel_size_nm {
                return Err(Error::InvalidVolume(format!(
                    "pair members differ in voxel size: {:?} vs {:?}",
                    self.xray.voxel_size_nm, v.voxel_size_nm
                )));
            }
        }
        if let Some(l) = &self.labels {
            if l.modality != Modality::Label {
                return Err(Error::Label(format!("labels have modality {:?}", l.modality)));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.xray.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_volumes() {
        let vs = [1.0; 3];
        assert!(Volume::<f32>::new([0, 1, 1], vec![], vs, Modality::Em, (0.0, 1.0), Dtype::F32).is_err());
        assert!(matches!(
            Volume::<f32>::new([1, 1, 1], vec![0.5], vs, Modality::Label, (0.0, 1.0), Dtype::F32),
            Err(Error::Label(_))
        ));
        assert!(Volume::<f32>::new([1, 1, 1], vec![1.5], vs, Modality::Probability, (0.0, 1.0), Dtype::F32).is_err());
        assert!(matches!(
            Volume::<f32>::new([1, 1, 1], vec![f32::NAN], vs, Modality::Em, (0.0, 1.0), Dtype::F32),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Volume::<f32>::new([1, 1, 1], vec![0.0], vs, Modality::Em, (1.0, 1.0), Dtype::F32),
            Err(Error::DegenerateRange { .. })
        ));
    }

    #[test]
    fn pair_requires_matching_grids() {
        let a = Volume::<f32>::unit([2, 2, 2], vec![0.0; 8], [1.0; 3], Modality::Xray).unwrap();
        let b = Volume::<f32>::unit([2, 2, 1], vec![0.0; 4], [1.0; 3], Modality::Em).unwrap();
        assert!(VolumePair::new(a.clone(), b, None).is_err());
        let c = Volume::<f32>::unit([2, 2, 2], vec![0.0; 8], [2.0, 1.0, 1.0], Modality::Em).unwrap();
        assert!(VolumePair::new(a, c, None).is_err());
    }

    #[test]
    fn axis_section_shapes() {
        assert_eq!(Axis::XY.section_shape([3, 4, 5]), [4, 5]);
        assert_eq!(Axis::XZ.section_shape([3, 4, 5]), [3, 5]);
        assert_eq!(Axis::YZ.section_shape([3, 4, 5]), [3, 4]);
    }
}
