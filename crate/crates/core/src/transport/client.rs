//! Client orchestrator: encoder and DFS locally, one request per server in
//! parallel under a shared deadline, fusion locally. Any branch failure fails
//! the whole inference.

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::wire::{encode_message, read_message, Message, ReadError, DEFAULT_MAX_VALUES};
use super::{build_requests, fuse_responses};
use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// `host:port` of the server for branch `i` at index `i`.
    pub servers: Vec<String>,
    pub timeout_ms: u64,
    /// Extra connection attempts per branch while the deadline allows.
    pub retries: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { servers: Vec::new(), timeout_ms: 5000, retries: 1 }
    }
}

impl ClusterConfig {
    pub fn validate(&self, num_branches: usize) -> Result<()> {
        if self.servers.len() != num_branches {
            return Err(Error::Config(format!("{} servers for {num_branches} branches", self.servers.len())));
        }
        for (i, a) in self.servers.iter().enumerate() {
            if self.servers[..i].contains(a) {
                return Err(Error::Config(format!("server {a} listed twice; every branch needs its own server")));
            }
        }
        if self.timeout_ms == 0 {
            return Err(Error::Config("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

enum Failure {
    /// Connection-level trouble; another attempt may help.
    Retry(String),
    Fatal(String),
}

fn remaining(deadline: Instant) -> Option<Duration> {
    deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero())
}

fn io_failure(e: io::Error) -> Failure {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Failure::Fatal("timed out".into()),
        _ => Failure::Retry(e.to_string()),
    }
}

fn attempt(addr: &str, branch: usize, frame: &[u8], request_id: u64, deadline: Instant) -> std::result::Result<Vec<f32>, Failure> {
    let left = remaining(deadline).ok_or(Failure::Fatal("timed out".into()))?;
    let sock = addr
        .to_socket_addrs()
        .map_err(|e| Failure::Fatal(format!("cannot resolve {addr}: {e}")))?
        .next()
        .ok_or_else(|| Failure::Fatal(format!("cannot resolve {addr}")))?;
    let mut stream = TcpStream::connect_timeout(&sock, left).map_err(io_failure)?;
    let left = remaining(deadline).ok_or(Failure::Fatal("timed out".into()))?;
    stream.set_read_timeout(Some(left)).map_err(io_failure)?;
    stream.set_write_timeout(Some(left)).map_err(io_failure)?;
    let _ = stream.set_nodelay(true);
    let read = |s: &mut TcpStream| match read_message(s, DEFAULT_MAX_VALUES) {
        Ok(m) => Ok(m),
        Err(ReadError::Closed) => Err(Failure::Retry("connection closed".into())),
        Err(ReadError::Io(e)) => Err(io_failure(e)),
        Err(ReadError::Wire(e)) => Err(Failure::Fatal(format!("bad reply: {e}"))),
    };
    match read(&mut stream)? {
        Message::Hello { branch_id, .. } if branch_id as usize == branch => {}
        Message::Hello { branch_id, .. } => {
            return Err(Failure::Fatal(format!("{addr} serves branch {branch_id}")));
        }
        other => return Err(Failure::Fatal(format!("expected HELLO, got type 0x{:02x}", other.msg_type()))),
    }
    io::Write::write_all(&mut stream, frame).map_err(io_failure)?;
    match read(&mut stream)? {
        Message::InferResp { request_id: r, embedding } if r == request_id => Ok(embedding),
        Message::InferResp { .. } => Err(Failure::Fatal("response for another request".into())),
        Message::Err { code, message } => Err(Failure::Fatal(format!("server error {code}: {message}"))),
        other => Err(Failure::Fatal(format!("unexpected reply type 0x{:02x}", other.msg_type()))),
    }
}

fn call_branch(addr: &str, branch: usize, frame: &[u8], request_id: u64, deadline: Instant, retries: u32) -> std::result::Result<Vec<f32>, String> {
    let mut last = String::new();
    for _ in 0..=retries {
        match attempt(addr, branch, frame, request_id, deadline) {
            Ok(e) => return Ok(e),
            Err(Failure::Fatal(m)) => return Err(m),
            Err(Failure::Retry(m)) => last = m,
        }
        if remaining(deadline).is_none() {
            return Err("timed out".into());
        }
    }
    Err(last)
}

/// Distributed inference; see [`client_infer_traced`].
pub fn client_infer(bundle: &ModelBundle, policy: &DfsPolicy, x: &FeatureMap, cluster: &ClusterConfig, nonce: u64) -> Result<Vec<f64>> {
    Ok(client_infer_traced(bundle, policy, x, cluster, nonce)?.0)
}

/// Distributed inference. Returns the fused class probabilities and the
/// request frames as sent, branch by branch.
pub fn client_infer_traced(
    bundle: &ModelBundle,
    policy: &DfsPolicy,
    x: &FeatureMap,
    cluster: &ClusterConfig,
    nonce: u64,
) -> Result<(Vec<f64>, Vec<Vec<u8>>)> {
    cluster.validate(bundle.num_branches())?;
    let deadline = Instant::now() + Duration::from_millis(cluster.timeout_ms);
    let requests = build_requests(bundle, x, policy, nonce)?;
    let frames: Vec<Vec<u8>> = requests.iter().map(encode_message).collect();
    let ids: Vec<u64> = requests
        .iter()
        .map(|m| match m {
            Message::InferReq { request_id, .. } => *request_id,
            _ => unreachable!(),
        })
        .collect();
    let results: Vec<std::result::Result<Vec<f32>, String>> = thread::scope(|s| {
        let handles: Vec<_> = (0..frames.len())
            .map(|b| {
                let (addr, frame, id) = (&cluster.servers[b], &frames[b], ids[b]);
                s.spawn(move || call_branch(addr, b, frame, id, deadline, cluster.retries))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into()))).collect()
    });
    let mut embeddings = Vec::with_capacity(results.len());
    for (branch, r) in results.into_iter().enumerate() {
        match r {
            Ok(e) if e.len() == bundle.arch.embed_dim => embeddings.push(e),
            Ok(e) => return Err(Error::BranchFailed { branch, reason: format!("embedding of length {}", e.len()) }),
            Err(reason) => return Err(Error::BranchFailed { branch, reason: format!("{}: {reason}", cluster.servers[branch]) }),
        }
    }
    Ok((fuse_responses(bundle, &embeddings)?, frames))
}
