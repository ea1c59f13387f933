//! Private split inference by distributed feature sharing.
//!
//! The client runs a small encoder, turns its output into `N` shares with a
//! keyed, staged transform, and sends each share to a different server. Each
//! server runs its own branch network on the one share it sees and returns a
//! short embedding; the client fuses the embeddings into a prediction.
//!
//! ```
//! use privdfs::data::{synth_generate, SynthSpec};
//! use privdfs::dfs::DfsConfig;
//! use privdfs::model::{ArchConfig, ModelBundle};
//!
//! let bundle = ModelBundle::new(ArchConfig::default(), DfsConfig::default(), vec![0x5eed], 0)?;
//! let family = bundle.family()?;
//! let x = &synth_generate(&SynthSpec::default(), 1)[0].image;
//!
//! let shares = bundle.client_shares(x, family.policy(0), 7)?;
//! assert_eq!(shares.len(), 3);
//! assert_eq!(shares[0].features.shape(), (2, 8, 8));
//!
//! let probs = bundle.predict(x, family.policy(0), 7)?;
//! assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
//! # Ok::<(), privdfs::Error>(())
//! ```
//!
//! Modules:
//!
//! - [`dfs`]: the share transform and its policy.
//! - [`keyed`]: key families and key files.
//! - [`model`]: encoder, branches, fusion, training, weight files.
//! - [`attack`]: inversion attackers and their reports.
//! - [`at`]: adversarial hardening.
//! - [`metrics`]: PSNR, SSIM, FLOP accounting.
//! - [`transport`]: wire protocol, branch servers, client, simulator.
//! - [`data`]: synthetic and CIFAR-10 data, threat-level splits.

pub mod at;
pub mod attack;
pub mod config;
pub mod conv;
pub mod data;
pub mod dfs;
pub mod error;
pub mod keyed;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::FeatureMap;

// The guide's listings run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/shares.md")]
    mod shares {}
    #[doc = include_str!("../../../book/src/keys.md")]
    mod keys {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/cluster.md")]
    mod cluster {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
