//! Split runtime: one branch per server process, a client that fans shares
//! out and fuses the replies, and an in-process simulator that pushes the
//! same frames through a recorded ledger instead of sockets.

pub mod client;
pub mod server;
pub mod sim;
pub mod wire;

pub use client::{client_infer, client_infer_traced, ClusterConfig};
pub use server::{handle_request, serve_branch, BranchServer, ServerOptions};
pub use sim::{Endpoint, LedgerEntry, Simulator};
pub use wire::{decode_message, encode_message, Message, WireError};

use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::rng::{derive_seed, tag};
use crate::tensor::FeatureMap;

/// Client half before transmission: one INFER_REQ per branch, in branch order.
pub fn build_requests(bundle: &ModelBundle, x: &FeatureMap, policy: &DfsPolicy, nonce: u64) -> Result<Vec<Message>> {
    let shares = bundle.client_shares(x, policy, nonce)?;
    Ok(shares
        .into_iter()
        .map(|s| Message::InferReq {
            request_id: derive_seed(nonce, tag::NONCE, s.branch_id as u32),
            policy_id: s.policy_id,
            branch_id: s.branch_id as u8,
            tensor: s.features,
        })
        .collect())
}

/// Client half after the replies arrive: all N embeddings are required.
pub fn fuse_responses(bundle: &ModelBundle, embeddings: &[Vec<f32>]) -> Result<Vec<f64>> {
    if embeddings.len() != bundle.num_branches() {
        return Err(Error::InvalidArgument(format!(
            "fusion needs all {} embeddings, got {}",
            bundle.num_branches(),
            embeddings.len()
        )));
    }
    let embs: Vec<Vec<f64>> = embeddings.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
    bundle.fuse(&embs)
}
