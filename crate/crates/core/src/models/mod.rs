//! The three networks of the reconstruction framework: a generator with
//! mean and log-variance heads, a patch discriminator, and the frozen 2-D
//! membrane segmentation network.

pub mod checkpoint;
mod discriminator;
mod generator;
mod segnet;
mod unet;
mod variant;

pub use discriminator::{Discriminator, DiscriminatorSpec};
pub use generator::{Generator, GeneratorSpec, ReconOutput, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN};
pub use segnet::{SegNet, SegNetSpec};
pub use unet::{Dims, UNet, UNetConfig};
pub use variant::{ReconLoss, VariantName, VariantSpec};

pub(crate) use segnet::sigmoid;
