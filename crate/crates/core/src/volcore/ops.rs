use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Axis, Dtype, Section, Volume, VolumePair};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    /// `[lo, hi] -> [0, 1]`
    Unit,
    /// `[lo, hi] -> [-1, 1]`
    Symmetric,
}

impl NormalizeMode {
    pub fn target(self) -> (f64, f64) {
        match self {
            NormalizeMode::Unit => (0.0, 1.0),
            NormalizeMode::Symmetric => (-1.0, 1.0),
        }
    }
}

/// Affine intensity remap between two ranges; invertible by construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityMap {
    pub source: (f64, f64),
    pub target: (f64, f64),
}

impl IntensityMap {
    pub fn apply(&self, x: f64) -> f64 {
        let (a, b) = self.source;
        let (c, d) = self.target;
        c + (x - a) * (d - c) / (b - a)
    }

    pub fn inverse(&self) -> IntensityMap {
        IntensityMap {
            source: self.target,
            target: self.source,
        }
    }
}

/// Affinely remap `v` from its declared intensity range onto `[0, 1]` or
/// `[-1, 1]`. The returned map inverts the transform.
pub fn normalize<T: Scalar>(v: &Volume<T>, mode: NormalizeMode) -> Result<(Volume<T>, IntensityMap)> {
    let (lo, hi) = v.intensity_range;
    if !(lo < hi) {
        return Err(Error::DegenerateRange { lo, hi });
    }
    let map = IntensityMap {
        source: (lo, hi),
        target: mode.target(),
    };
    let (c, d) = map.target;
    // x * scale + shift, evaluated in the working precision.
    let scale = T::of((d - c) / (hi - lo));
    let shift = T::of(c) - T::of(lo) * scale;
    let data = v.data().iter().map(|&x| x * scale + shift).collect();
    let out = Volume::new(v.shape(), data, v.voxel_size_nm, v.modality, map.target, Dtype::F32)?;
    Ok((out, map))
}

/// Crop the same random window out of every member of `pair`. Offsets are
/// uniform over all valid positions and are returned alongside the crop.
pub fn random_crop_pair<T: Scalar, R: Rng + ?Sized>(
    pair: &VolumePair<T>,
    size: [usize; 3],
    rng: &mut R,
) -> Result<(VolumePair<T>, [usize; 3])> {
    let shape = pair.shape();
    if (0..3).any(|a| size[a] > shape[a] || size[a] == 0) {
        return Err(Error::CropTooLarge { crop: size, shape });
    }
    let offset = [
        rng.gen_range(0..=shape[0] - size[0]),
        rng.gen_range(0..=shape[1] - size[1]),
        rng.gen_range(0..=shape[2] - size[2]),
    ];
    let cropped = VolumePair {
        xray: pair.xray.crop(offset, size)?,
        em: pair.em.crop(offset, size)?,
        labels: pair.labels.as_ref().map(|l| l.crop(offset, size)).transpose()?,
    };
    Ok((cropped, offset))
}

/// The 2-D section of `v` at `index` along the normal of `axis`.
pub fn extract_slice<T: Scalar>(v: &Volume<T>, axis: Axis, index: usize) -> Result<Section<T>> {
    section_of(v.data(), v.shape(), axis, index)
}

pub(crate) fn section_of<T: Scalar>(data: &[T], shape: [usize; 3], axis: Axis, index: usize) -> Result<Section<T>> {
    let extent = shape[axis.normal()];
    if index >= extent {
        return Err(Error::OutOfBounds { index, extent });
    }
    let [nz, ny, nx] = shape;
    let out = match axis {
        Axis::XY => data[index * ny * nx..(index + 1) * ny * nx].to_vec(),
        Axis::XZ => {
            let mut out = Vec::with_capacity(nz * nx);
            for z in 0..nz {
                let row = (z * ny + index) * nx;
                out.extend_from_slice(&data[row..row + nx]);
            }
            out
        }
        Axis::YZ => {
            let mut out = Vec::with_capacity(nz * ny);
            for z in 0..nz {
                for y in 0..ny {
                    out.push(data[(z * ny + y) * nx + index]);
                }
            }
            out
        }
    };
    Ok(Section {
        shape: axis.section_shape(shape),
        data: out,
    })
}

/// Write `section` back into `data` (shape `[Z, Y, X]`) at `index` along `axis`.
pub fn insert_slice<T: Scalar>(
    data: &mut [T],
    shape: [usize; 3],
    axis: Axis,
    index: usize,
    section: &Section<T>,
) -> Result<()> {
    let extent = shape[axis.normal()];
    if index >= extent {
        return Err(Error::OutOfBounds { index, extent });
    }
    if section.shape != axis.section_shape(shape) {
        return Err(Error::Shape(format!(
            "section {:?} does not fit a {axis} plane of {shape:?}",
            section.shape
        )));
    }
    let [nz, ny, nx] = shape;
    match axis {
        Axis::XY => data[index * ny * nx..(index + 1) * ny * nx].copy_from_slice(&section.data),
        Axis::XZ => {
            for z in 0..nz {
                let row = (z * ny + index) * nx;
                data[row..row + nx].copy_from_slice(&section.data[z * nx..(z + 1) * nx]);
            }
        }
        Axis::YZ => {
            for z in 0..nz {
                for y in 0..ny {
                    data[(z * ny + y) * nx + index] = section.data[z * ny + y];
                }
            }
        }
    }
    Ok(())
}

/// Reassemble a `[Z, Y, X]` buffer from every section along `axis`, in order.
pub fn stack_sections<T: Scalar>(axis: Axis, sections: &[Section<T>]) -> Result<([usize; 3], Vec<T>)> {
    let first = sections
        .first()
        .ok_or_else(|| Error::EmptyInput("no sections to stack".into()))?;
    let [r, c] = first.shape;
    let n = sections.len();
    let shape = match axis {
        Axis::XY => [n, r, c],
        Axis::XZ => [r, n, c],
        Axis::YZ => [r, c, n],
    };
    let mut data = vec![T::zero(); n * r * c];
    for (i, s) in sections.iter().enumerate() {
        insert_slice(&mut data, shape, axis, i, s)?;
    }
    Ok((shape, data))
}
