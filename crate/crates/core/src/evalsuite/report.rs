use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::metrics::{overlap_from_counts, psnr_slices, ssim, SsimParams};
use crate::error::{Error, Result};
use crate::models::SegNet;
use crate::scalar::Scalar;
use crate::volcore::{extract_slice, Axis, Section, Volume};

pub const KEY_3D: &str = "3D";

/// Settings that determine every number in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub data_range: f64,
    pub ssim: SsimParams,
    pub threshold: f64,
    /// How the 3-D overlap scores are assembled from 2-D predictions.
    pub volume_masks: String,
}

impl EvalSettings {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("settings serialize");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-direction reconstruction and segmentation scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Infinite values (identical inputs) are written as the string `"inf"`.
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub psnr: BTreeMap<String, f64>,
    pub ssim: BTreeMap<String, f64>,
    pub jaccard: BTreeMap<String, f64>,
    pub dice: BTreeMap<String, f64>,
    pub n_slices: BTreeMap<String, usize>,
    pub config_hash: String,
    pub settings: EvalSettings,
}

fn ser_inf<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
    let out: BTreeMap<&String, serde_json::Value> = m
        .iter()
        .map(|(k, &v)| {
            let v = if v.is_finite() {
                serde_json::Value::from(v)
            } else {
                serde_json::Value::from(if v > 0.0 { "inf" } else { "-inf" })
            };
            (k, v)
        })
        .collect();
    out.serialize(s)
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
    let raw = BTreeMap::<String, serde_json::Value>::deserialize(d)?;
    raw.into_iter()
        .map(|(k, v)| {
            let x = match &v {
                serde_json::Value::String(s) if s == "inf" => f64::INFINITY,
                serde_json::Value::String(s) if s == "-inf" => f64::NEG_INFINITY,
                _ => v.as_f64().ok_or_else(|| serde::de::Error::custom(format!("bad psnr value {v}")))?,
            };
            Ok((k, x))
        })
        .collect()
}

fn threshold_mask<T: Scalar>(p: &[T], threshold: f64) -> Vec<bool> {
    p.iter().map(|v| v.as_f64() >= threshold).collect()
}

fn overlap_bool(pred: &[bool], gt: &[bool]) -> (f64, f64) {
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        np += usize::from(p);
        ng += usize::from(g);
    }
    overlap_from_counts(inter, np, ng)
}

/// Score `pred` against `target` section by section along each direction.
///
/// With a segmentation network and ground-truth labels, membrane masks
/// (probability `>= threshold`) of every section of `pred` are scored
/// against the label sections; the 3-D entry scores the volume assembled
/// from the XY predictions. Pass the raw X-ray volume as `pred` to score the
/// baseline.
pub fn evaluate_volume<T: Scalar>(
    pred: &Volume<T>,
    target: &Volume<T>,
    seg: Option<&SegNet<T>>,
    gt_labels: Option<&Volume<T>>,
    threshold: f64,
) -> Result<MetricsReport> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let labels = match (seg, gt_labels) {
        (Some(_), None) => {
            return Err(Error::Config("segmentation metrics need ground-truth labels".into()));
        }
        (_, Some(l)) if l.shape() != target.shape() => {
            return Err(Error::Shape(format!("labels {:?} vs target {:?}", l.shape(), target.shape())));
        }
        (_, l) => l,
    };
    if let Some(l) = labels {
        l.validate()?;
        if l.data().iter().any(|&x| x != T::zero() && x != T::one()) {
            return Err(Error::Label("ground-truth labels must be binary".into()));
        }
    }
    let (lo, hi) = target.intensity_range;
    let settings = EvalSettings {
        data_range: hi - lo,
        ssim: SsimParams::default(),
        threshold,
        volume_masks: "stacked XY-section predictions".into(),
    };
    let mut report = MetricsReport {
        psnr: BTreeMap::new(),
        ssim: BTreeMap::new(),
        jaccard: BTreeMap::new(),
        dice: BTreeMap::new(),
        n_slices: BTreeMap::new(),
        config_hash: settings.hash(),
        settings: settings.clone(),
    };
    let mut xy_masks: Vec<bool> = Vec::new();
    for axis in Axis::ALL {
        let n = pred.shape()[axis.normal()];
        let (mut p_sum, mut s_sum, mut j_sum, mut d_sum) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let a = extract_slice(pred, axis, i)?;
            let b = extract_slice(target, axis, i)?;
            p_sum += psnr_slices(&a.data, &b.data, settings.data_range)?;
            s_sum += ssim(&a, &b, &settings.ssim, settings.data_range)?;
            if let (Some(net), Some(l)) = (seg, labels) {
                let probs: Section<T> = net.segment(&a)?;
                let mask = threshold_mask(&probs.data, threshold);
                let gt: Vec<bool> = extract_slice(l, axis, i)?.data.iter().map(|&v| v == T::one()).collect();
                let (j, d) = overlap_bool(&mask, &gt);
                j_sum += j;
                d_sum += d;
                if axis == Axis::XY {
                    xy_masks.extend_from_slice(&mask);
                }
            }
        }
        let key = axis.label().to_string();
        let nf = n as f64;
        report.psnr.insert(key.clone(), p_sum / nf);
        report.ssim.insert(key.clone(), s_sum / nf);
        report.n_slices.insert(key.clone(), n);
        if seg.is_some() {
            report.jaccard.insert(key.clone(), j_sum / nf);
            report.dice.insert(key, d_sum / nf);
        }
    }
    if let Some(l) = labels.filter(|_| seg.is_some()) {
        let gt: Vec<bool> = l.data().iter().map(|&v| v == T::one()).collect();
        let (j, d) = overlap_bool(&xy_masks, &gt);
        report.jaccard.insert(KEY_3D.into(), j);
        report.dice.insert(KEY_3D.into(), d);
    }
    Ok(report)
}

impl MetricsReport {
    /// Human-readable tables in the layout of the metrics above.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Evaluation report\n\n## Reconstruction\n\n| Dir. | PSNR (dB) | SSIM | slices |\n|---|---|---|---|\n");
        for axis in Axis::ALL {
            let k = axis.label();
            let _ = writeln!(
                s,
                "| {k} | {:.4} | {:.4} | {} |",
                self.psnr.get(k).copied().unwrap_or(f64::NAN),
                self.ssim.get(k).copied().unwrap_or(f64::NAN),
                self.n_slices.get(k).copied().unwrap_or(0)
            );
        }
        if !self.jaccard.is_empty() {
            s.push_str("\n## Membrane segmentation\n\n| Dir. | JS | Dice |\n|---|---|---|\n");
            for k in Axis::ALL.iter().map(|a| a.label()).chain([KEY_3D]) {
                let _ = writeln!(
                    s,
                    "| {k} | {:.4} | {:.4} |",
                    self.jaccard.get(k).copied().unwrap_or(f64::NAN),
                    self.dice.get(k).copied().unwrap_or(f64::NAN)
                );
            }
        }
        let _ = write!(
            s,
            "\ndata range {}, SSIM window {} (k1 {}, k2 {}), threshold {}, 3D masks from {}; config hash `{}`\n",
            self.settings.data_range,
            self.settings.ssim.window,
            self.settings.ssim.k1,
            self.settings.ssim.k2,
            self.settings.threshold,
            self.settings.volume_masks,
            self.config_hash
        );
        s
    }

    /// Write `report.json` and `report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join("report.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Mean SSIM over the two planes containing Z.
    pub fn z_plane_ssim(&self) -> f64 {
        (self.ssim[Axis::XZ.label()] + self.ssim[Axis::YZ.label()]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SegNetSpec;
    use crate::phantom::{degrade_to_xray, generate_phantom, PhantomConfig};
    use crate::volcore::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom() -> crate::volcore::VolumePair<f64> {
        generate_phantom(&PhantomConfig {
            size: [16, 16, 16],
            n_cells: 6,
            seed: 3,
            ..PhantomConfig::default()
        })
        .unwrap()
    }

    fn segnet() -> SegNet<f64> {
        SegNet::new(SegNetSpec { base_channels: 2, depth: 2 }, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn identity_report() {
        let p = phantom();
        let net = segnet();
        let r = evaluate_volume(&p.em, &p.em, Some(&net), p.labels.as_ref(), 0.5).unwrap();
        let keys: Vec<&str> = r.psnr.keys().map(String::as_str).collect();
        assert_eq!(keys, ["XY", "XZ", "YZ"]);
        let seg_keys: Vec<&str> = r.dice.keys().map(String::as_str).collect();
        assert_eq!(seg_keys, ["3D", "XY", "XZ", "YZ"]);
        assert!(r.psnr.values().all(|v| *v == f64::INFINITY));
        assert!(r.ssim.values().all(|v| (*v - 1.0).abs() < 1e-12));
        assert!(r.jaccard.values().chain(r.dice.values()).all(|v| (0.0..=1.0).contains(v)));
        // The 3-D entry comes from a single mask pair.
        let j = r.jaccard[KEY_3D];
        assert!((r.dice[KEY_3D] - 2.0 * j / (1.0 + j)).abs() < 1e-9);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn z_blur_hurts_z_planes() {
        let p = phantom();
        let cfg = PhantomConfig {
            xray_blur_sigma_vx: [2.0, 0.0, 0.0],
            xray_downsample: 1,
            xray_noise_sigma: 0.0,
            intensity_jitter: 0.0,
            ..PhantomConfig::default()
        };
        let blurred = degrade_to_xray(&p.em, &cfg).unwrap();
        let r = evaluate_volume(&blurred, &p.em, None, None, 0.5).unwrap();
        assert!(r.ssim["XZ"] < r.ssim["XY"] && r.ssim["YZ"] < r.ssim["XY"]);
        assert!(r.jaccard.is_empty());
    }

    #[test]
    fn seg_without_labels_is_config_error() {
        let p = phantom();
        let net = segnet();
        assert!(matches!(evaluate_volume(&p.em, &p.em, Some(&net), None, 0.5), Err(Error::Config(_))));
    }

    /// Transposing Y and X swaps the XZ and YZ directions and nothing else.
    #[test]
    fn traversal_order_invariance() {
        let p = phantom();
        let t = |v: &Volume<f64>| {
            let [d, h, w] = v.shape();
            let mut out = vec![0.0; v.len()];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        out[(z * w + x) * h + y] = v.get(z, y, x);
                    }
                }
            }
            Volume::new([d, w, h], out, v.voxel_size_nm, v.modality, v.intensity_range, v.dtype).unwrap()
        };
        let a = evaluate_volume(&p.xray, &p.em, None, None, 0.5).unwrap();
        let b = evaluate_volume(&t(&p.xray), &t(&p.em), None, None, 0.5).unwrap();
        assert!((a.ssim["XZ"] - b.ssim["YZ"]).abs() < 1e-12);
        assert!((a.psnr["XY"] - b.psnr["XY"]).abs() < 1e-12);
        let back = evaluate_volume(&t(&t(&p.xray)), &t(&t(&p.em)), None, None, 0.5).unwrap();
        assert_eq!(a, back);
        assert_eq!(p.xray.modality, Modality::Xray);
    }
}
