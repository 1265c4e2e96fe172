//! Template decoder, registration UNet and the unconditional template.
//!
//! Parameters are kept by name in a [`ParamStore`]:
//!
//! - `dec.*`: attribute decoder (dense layer, conv/upsample blocks, heads),
//! - `template.b0`: frozen intensity bias volume carrying the initialization,
//! - `template.img`, `template.seg`: direct voxel parameters (unconditional),
//! - `unet.*`: registration network,
//! - `posthoc.seg`: frozen label probabilities for variants trained without
//!   segmentation (filled after training).

mod attributes;
mod init;
mod network;

pub use attributes::{AttributeEncoder, AttributeRecord, Sex};
pub use init::{init_image, InitSpec};
pub use network::{Model, ModelConfig, TemplateVars, Variant, POSTHOC_SEG};

#[cfg(test)]
mod tests;
