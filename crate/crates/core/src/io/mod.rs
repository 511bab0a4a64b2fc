//! Persistence: tensor containers, Gaussian PLY scenes, capture bundles,
//! and the synthetic oracle generator.

pub mod bundle;
pub mod ply;
pub mod synthetic;
pub mod tensor;

pub use bundle::{load_bundle, load_png, save_bundle, save_png, CaptureBundle, ViewRecord};
pub use ply::{load_gaussians_ply, save_gaussians_ply};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tensor::{read_tensor, read_tensor_expect, write_tensor, TensorHeader};
