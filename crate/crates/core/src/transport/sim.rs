//! In-process cluster. Frames are encoded and decoded exactly as on the
//! network, and every hop is written to a ledger for isolation audits.

use std::sync::Mutex;

use super::server::handle_request;
use super::wire::{decode_message, encode_message, Message, DEFAULT_MAX_VALUES};
use super::{build_requests, fuse_responses};
use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Client,
    Server(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub from: Endpoint,
    pub to: Endpoint,
    pub msg_type: u8,
    /// Channels of the tensor carried, 0 for frames without one.
    pub channels: usize,
    pub bytes: usize,
}

pub struct Simulator<'a> {
    bundle: &'a ModelBundle,
    ledger: Mutex<Vec<LedgerEntry>>,
}

impl<'a> Simulator<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        Self { bundle, ledger: Mutex::new(Vec::new()) }
    }

    fn send(&self, from: Endpoint, to: Endpoint, msg: &Message) -> Result<Message> {
        let bytes = encode_message(msg);
        let channels = match msg {
            Message::InferReq { tensor, .. } => tensor.channels(),
            _ => 0,
        };
        self.ledger.lock().unwrap().push(LedgerEntry { from, to, msg_type: msg.msg_type(), channels, bytes: bytes.len() });
        Ok(decode_message(&bytes, DEFAULT_MAX_VALUES)?)
    }

    pub fn infer(&self, x: &FeatureMap, policy: &DfsPolicy, nonce: u64) -> Result<Vec<f64>> {
        let requests = build_requests(self.bundle, x, policy, nonce)?;
        let mut embeddings = Vec::with_capacity(requests.len());
        for (b, req) in requests.iter().enumerate() {
            let at_server = self.send(Endpoint::Client, Endpoint::Server(b), req)?;
            let reply = handle_request(self.bundle.branch(b), b as u8, at_server);
            match self.send(Endpoint::Server(b), Endpoint::Client, &reply)? {
                Message::InferResp { embedding, .. } => embeddings.push(embedding),
                Message::Err { code, message } => {
                    return Err(Error::BranchFailed { branch: b, reason: format!("server error {code}: {message}") })
                }
                other => return Err(Error::BranchFailed { branch: b, reason: format!("unexpected type 0x{:02x}", other.msg_type()) }),
            }
        }
        fuse_responses(self.bundle, &embeddings)
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().unwrap().clone()
    }

    /// Frames sent from one server to another. The runtime never does this.
    pub fn server_to_server(&self) -> usize {
        self.ledger
            .lock()
            .unwrap()
            .iter()
            .filter(|e| matches!((e.from, e.to), (Endpoint::Server(_), Endpoint::Server(_))))
            .count()
    }
}
