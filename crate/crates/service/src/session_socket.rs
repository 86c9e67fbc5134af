//! Session-style key delivery over a line-oriented TCP socket.
//!
//! ```text
//! OPEN_CONNECT <source> <destination> [chunk=<bytes>] [max_bps=<bps>] [ttl=<s>]
//!   -> OK <ksid>
//! GET_KEY <ksid> <caller> [<index>]
//!   -> OK <index> <key_id> <base64 key>
//! CLOSE <ksid>
//!   -> OK
//! ```
//! Failures answer `ERR <CODE> <message>` and keep the connection open.

use base64::Engine;
use qkdnet_core::ids::{Ksid, SaeId};
use qkdnet_core::kms::{KmsError, Qos};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::state::AppState;

const MAX_LINE: usize = 4096;

pub async fn serve(listener: TcpListener, state: AppState) {
    loop {
        match listener.accept().await {
            Ok((sock, peer)) => {
                tracing::debug!(%peer, "session client connected");
                tokio::spawn(client(sock, state.clone()));
            }
            Err(e) => tracing::warn!(error = %e, "session accept failed"),
        }
    }
}

async fn client(sock: TcpStream, state: AppState) {
    let (rd, mut wr) = sock.into_split();
    let mut lines = BufReader::new(rd).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        let reply = if line.len() > MAX_LINE { "ERR BAD_REQUEST line too long".to_owned() } else { handle(&state, &line) };
        if wr.write_all(format!("{reply}\n").as_bytes()).await.is_err() {
            break;
        }
    }
}

fn code(e: &KmsError) -> &'static str {
    match e {
        KmsError::UnknownKsid => "UNKNOWN_KSID",
        KmsError::KeyExhausted | KmsError::InsufficientKey { .. } => "KEY_EXHAUSTED",
        KmsError::RateLimited => "RATE_LIMITED",
        KmsError::SessionClosed => "SESSION_CLOSED",
        KmsError::NotSessionParty => "NOT_PARTY",
        KmsError::QosUnsatisfiable { .. } | KmsError::InvalidQos(_) => "QOS",
        KmsError::Unreachable(_) => "UNREACHABLE",
        KmsError::IndexUnavailable(_) => "INDEX",
        _ => "BAD_REQUEST",
    }
}

fn err(e: KmsError) -> String {
    format!("ERR {} {e}", code(&e))
}

fn bad(msg: &str) -> String {
    format!("ERR BAD_REQUEST {msg}")
}

/// Answers one request line.
pub fn handle(state: &AppState, line: &str) -> String {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["OPEN_CONNECT", src, dst, opts @ ..] => {
            let mut qos = Qos::default();
            for o in opts {
                let Some((k, v)) = o.split_once('=') else { return bad(&format!("option {o:?} is not key=value")) };
                let ok = match k {
                    "chunk" => v.parse().map(|x| qos.key_chunk_size_bytes = x).is_ok(),
                    "max_bps" => v.parse().map(|x| qos.max_bps = x).is_ok(),
                    "ttl" => v.parse().map(|x| qos.ttl_s = x).is_ok(),
                    _ => return bad(&format!("unknown option {k}")),
                };
                if !ok {
                    return bad(&format!("bad value for {k}"));
                }
            }
            let mut g = state.inner.lock();
            match g.net.open_session(&SaeId::from(*src), &SaeId::from(*dst), qos) {
                Ok(ksid) => format!("OK {ksid}"),
                Err(e) => err(e),
            }
        }
        ["GET_KEY", ksid, caller, rest @ ..] if rest.len() <= 1 => {
            let Some(ksid) = Ksid::parse(ksid) else { return err(KmsError::UnknownKsid) };
            let index = match rest.first().map(|s| s.parse::<u64>()) {
                None => None,
                Some(Ok(i)) => Some(i),
                Some(Err(_)) => return bad("index must be an integer"),
            };
            let mut g = state.inner.lock();
            match g.net.get_key(&ksid, &SaeId::from(*caller), index) {
                Ok(c) => {
                    format!("OK {} {} {}", c.index, c.key_id, base64::engine::general_purpose::STANDARD.encode(&c.bits))
                }
                Err(e) => err(e),
            }
        }
        ["CLOSE", ksid] => {
            let Some(ksid) = Ksid::parse(ksid) else { return err(KmsError::UnknownKsid) };
            match state.inner.lock().net.close_session(&ksid) {
                Ok(()) => "OK".into(),
                Err(e) => err(e),
            }
        }
        [] => bad("empty request"),
        [verb, ..] => bad(&format!("unknown or malformed {verb}")),
    }
}
