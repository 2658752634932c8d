//! Line-delimited JSON serving over TCP.
//!
//! Each connection sends one request object per line and receives one
//! response object per line. A request that cannot be parsed or answered
//! gets `{"error": "..."}` on its line; the connection stays open so one
//! bad request never tears down a client's session.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::click_model::ModelParams;
use crate::corpus::UserProfile;
use crate::{Error, Result};

use super::{search_mips, AdIndex, ScoredAd};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServeRequest {
    pub user_id: u64,
    pub query_tokens: Vec<u32>,
    pub k: usize,
    pub nprobe: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServeResponse {
    pub results: Vec<ScoredAd>,
    /// Wall time of embed + search for this request, microseconds.
    pub latency_us: u64,
}

/// Everything a request needs, shared read-only across connections.
pub struct ServeContext<'a> {
    pub params: &'a ModelParams,
    pub index: &'a AdIndex,
    pub users: &'a [UserProfile],
    pub rerank_depth: usize,
}

impl ServeContext<'_> {
    /// Answer one request: embed the (user, query) pair with the query
    /// tower, then run the weighted MIPS search. Public so the one-shot
    /// CLI path and the TCP loop share it.
    pub fn answer(&self, req: &ServeRequest) -> Result<ServeResponse> {
        let user = self
            .users
            .get(req.user_id as usize)
            .ok_or_else(|| Error::Index(format!("unknown user id {}", req.user_id)))?;
        let start = Instant::now();
        let x = self
            .params
            .embed_query_tokens(&user.feature_tokens, &req.query_tokens);
        let found = search_mips(self.index, &x, req.k, req.nprobe, self.rerank_depth)?;
        let latency_us = start.elapsed().as_micros() as u64;
        Ok(ServeResponse {
            results: found.entries,
            latency_us,
        })
    }
}

fn handle_connection(stream: TcpStream, ctx: &ServeContext) -> Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ServeRequest>(&line) {
            Ok(req) => match ctx.answer(&req) {
                Ok(resp) => serde_json::to_string(&resp)?,
                Err(e) => serde_json::to_string(&serde_json::json!({ "error": e.to_string() }))?,
            },
            Err(e) => {
                serde_json::to_string(&serde_json::json!({ "error": format!("bad request: {e}") }))?
            }
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

/// Accept connections on `listener` and answer their requests in turn.
/// Connection-level I/O failures are reported to stderr and do not stop
/// the accept loop. With `max_connections` = Some(n) the loop returns
/// after n connections have closed (tests drive it this way); with None
/// it serves until the process exits.
pub fn serve(
    listener: &TcpListener,
    ctx: &ServeContext,
    max_connections: Option<usize>,
) -> Result<()> {
    let mut served = 0usize;
    for stream in listener.incoming() {
        match stream {
            Ok(s) => {
                if let Err(e) = handle_connection(s, ctx) {
                    eprintln!("connection error: {e}");
                }
            }
            Err(e) => eprintln!("accept error: {e}"),
        }
        served += 1;
        if let Some(cap) = max_connections {
            if served >= cap {
                break;
            }
        }
    }
    Ok(())
}
