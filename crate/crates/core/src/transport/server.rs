//! Branch daemon. Runs one branch network, answers INFER_REQ frames, keeps
//! no state between requests and never opens outbound connections.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{read_message, write_message, Message, ReadError, WireError, DEFAULT_MAX_VALUES};
use crate::model::Branch;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    pub server_id: u64,
    /// Largest share tensor accepted, in values.
    pub max_values: usize,
    /// Idle connections are dropped after this long.
    pub idle_timeout: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self { server_id: 0, max_values: DEFAULT_MAX_VALUES, idle_timeout: Duration::from_secs(30) }
    }
}

/// Reply for one decoded request frame.
pub fn handle_request(branch: &Branch, branch_id: u8, msg: Message) -> Message {
    match msg {
        Message::InferReq { request_id, branch_id: requested, tensor, .. } => {
            if requested != branch_id {
                return Message::error(&WireError::WrongBranch { requested, served: branch_id });
            }
            match branch.embed(&tensor) {
                Ok(e) => Message::InferResp { request_id, embedding: e.iter().map(|&v| v as f32).collect() },
                Err(e) => Message::error(&WireError::Internal(e.to_string())),
            }
        }
        other => Message::error(&WireError::Unexpected(other.msg_type())),
    }
}

fn handle_connection(mut stream: TcpStream, branch: &Branch, branch_id: u8, opts: &ServerOptions) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(opts.idle_timeout))?;
    write_message(&mut stream, &Message::Hello { server_id: opts.server_id, branch_id })?;
    loop {
        match read_message(&mut stream, opts.max_values) {
            Ok(msg) => {
                let reply = handle_request(branch, branch_id, msg);
                write_message(&mut stream, &reply)?;
                if matches!(reply, Message::Err { .. }) {
                    return Ok(());
                }
            }
            Err(ReadError::Closed) => return Ok(()),
            Err(ReadError::Io(e)) => return Err(e),
            Err(ReadError::Wire(e)) => {
                // Best effort: the peer may already be gone.
                let _ = write_message(&mut stream, &Message::error(&e));
                return Ok(());
            }
        }
    }
}

/// A running branch server. Dropping the handle does not stop it; call
/// [`BranchServer::shutdown`].
pub struct BranchServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BranchServer {
    /// Serves on an already-bound listener in a background thread, one
    /// thread per connection.
    pub fn spawn(listener: TcpListener, branch: Branch, branch_id: u8, opts: ServerOptions) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let branch = Arc::new(branch);
        let thread = thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let (branch, opts) = (branch.clone(), opts.clone());
                thread::spawn(move || {
                    let _ = handle_connection(stream, &branch, branch_id, &opts);
                });
            }
        });
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn bind(addr: &str, branch: Branch, branch_id: u8, opts: ServerOptions) -> io::Result<Self> {
        Self::spawn(TcpListener::bind(addr)?, branch, branch_id, opts)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. In-flight connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Blocking daemon used by `privdfs serve`.
pub fn serve_branch(branch: Branch, branch_id: u8, listen: &str, opts: ServerOptions) -> io::Result<()> {
    let server = BranchServer::bind(listen, branch, branch_id, opts)?;
    if let Some(t) = server.thread {
        let _ = t.join();
    }
    Ok(())
}
