use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::unet::Dims;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Full2d,
    Hybrid3d,
    Full3d,
    Full3dL1,
    Full3dSeg,
}

impl VariantName {
    pub const ALL: [VariantName; 5] = [
        VariantName::Full2d,
        VariantName::Hybrid3d,
        VariantName::Full3d,
        VariantName::Full3dL1,
        VariantName::Full3dSeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantName::Full2d => "full2d",
            VariantName::Hybrid3d => "hybrid3d",
            VariantName::Full3d => "full3d",
            VariantName::Full3dL1 => "full3d_l1",
            VariantName::Full3dSeg => "full3d_seg",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    Nll,
    L1,
}

/// Which networks and objectives a model variant uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: VariantName,
    pub generator_dims: Dims,
    pub discriminator_dims: Dims,
    pub recon_loss: ReconLoss,
    pub use_seg_loss: bool,
}

impl VariantSpec {
    pub fn from_name(name: VariantName) -> Self {
        use Dims::{D2, D3};
        let (generator_dims, discriminator_dims, recon_loss, use_seg_loss) = match name {
            VariantName::Full2d => (D2, D2, ReconLoss::Nll, false),
            VariantName::Hybrid3d => (D3, D2, ReconLoss::Nll, false),
            VariantName::Full3d => (D3, D3, ReconLoss::Nll, false),
            VariantName::Full3dL1 => (D3, D3, ReconLoss::L1, false),
            VariantName::Full3dSeg => (D3, D3, ReconLoss::Nll, true),
        };
        Self {
            name,
            generator_dims,
            discriminator_dims,
            recon_loss,
            use_seg_loss,
        }
    }

    /// A deserialized spec must agree with its name.
    pub fn validate(&self) -> Result<()> {
        if *self != Self::from_name(self.name) {
            return Err(Error::Config(format!("variant fields disagree with its name {}", self.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_table() {
        use Dims::{D2, D3};
        let rows = [
            ("full2d", D2, D2, ReconLoss::Nll, false),
            ("hybrid3d", D3, D2, ReconLoss::Nll, false),
            ("full3d", D3, D3, ReconLoss::Nll, false),
            ("full3d_l1", D3, D3, ReconLoss::L1, false),
            ("full3d_seg", D3, D3, ReconLoss::Nll, true),
        ];
        for (name, g, d, r, s) in rows {
            let v = VariantSpec::from_name(name.parse().unwrap());
            assert_eq!((v.generator_dims, v.discriminator_dims, v.recon_loss, v.use_seg_loss), (g, d, r, s), "{name}");
            assert_eq!(v.name.to_string(), name);
        }
        assert!("full4d".parse::<VariantName>().is_err());
    }

    #[test]
    fn serde_names_match_cli_names() {
        let v = VariantSpec::from_name(VariantName::Full3dSeg);
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"full3d_seg\""), "{json}");
        let mut bad: VariantSpec = serde_json::from_str(&json).unwrap();
        bad.use_seg_loss = false;
        assert!(bad.validate().is_err());
    }
}
