//! TCP bridge to a noise-prediction model running in another process.
//!
//! One request per connection, all integers little-endian:
//!
//! ```text
//! request:  "PSDQ" u32 version  u32 h  u32 w  u32 c  u32 t  i32 label (-1 = none)  f32[h·w·c] z_t
//! response: "PSDR" u32 version  u32 h  u32 w  u32 c  f32[h·w·c] ε̂
//! ```
//!
//! The server closes the connection after writing the response.

use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::{Denoiser, LatentGrid};
use crate::error::{Error, Result};
use crate::scene::DensityLabel;

pub const PROTOCOL_VERSION: u32 = 1;
const REQUEST_MAGIC: &[u8; 4] = b"PSDQ";
const RESPONSE_MAGIC: &[u8; 4] = b"PSDR";
const REQUEST_HEADER: usize = 28;
const RESPONSE_HEADER: usize = 20;

/// Client side; each prediction opens a fresh connection.
#[derive(Debug, Clone)]
pub struct ExternalDenoiser {
    pub endpoint: String,
    pub timeout: Duration,
}

impl ExternalDenoiser {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Error::DenoiserUnavailable(format!("{}: {e}", self.endpoint)))?;
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::DenoiserUnavailable(match last {
            Some(e) => format!("{}: {e}", self.endpoint),
            None => format!("{}: no addresses", self.endpoint),
        }))
    }
}

fn unavailable(endpoint: &str, e: std::io::Error) -> Error {
    let what = match e.kind() {
        ErrorKind::TimedOut | ErrorKind::WouldBlock => "timed out",
        _ => "connection failed",
    };
    Error::DenoiserUnavailable(format!("{endpoint}: {what} ({e})"))
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn encode_request(z: &LatentGrid, t: usize, label: Option<DensityLabel>) -> Result<Vec<u8>> {
    let dims: Vec<u32> = [z.h, z.w, z.c, t]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::config(format!("{d} does not fit the wire format"))))
        .collect::<Result<_>>()?;
    let mut buf = Vec::with_capacity(REQUEST_HEADER + 4 * z.data.len());
    buf.extend_from_slice(REQUEST_MAGIC);
    buf.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    let y = label.map_or(-1i32, |l| l.index() as i32);
    buf.extend_from_slice(&y.to_le_bytes());
    for v in &z.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}

fn decode_response(bytes: &[u8], expect: (usize, usize, usize)) -> Result<LatentGrid> {
    if bytes.len() < RESPONSE_HEADER {
        return Err(Error::Protocol(format!(
            "response of {} bytes has no header",
            bytes.len()
        )));
    }
    if &bytes[..4] != RESPONSE_MAGIC {
        return Err(Error::Protocol("bad response magic".into()));
    }
    let version = le_u32(bytes, 4);
    if version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!(
            "response version {version}, expected {PROTOCOL_VERSION}"
        )));
    }
    let shape = (
        le_u32(bytes, 8) as usize,
        le_u32(bytes, 12) as usize,
        le_u32(bytes, 16) as usize,
    );
    if shape != expect {
        return Err(Error::Protocol(format!(
            "response shape {shape:?}, expected {expect:?}"
        )));
    }
    let n = expect.0 * expect.1 * expect.2;
    let payload = &bytes[RESPONSE_HEADER..];
    if payload.len() != 4 * n {
        return Err(Error::Protocol(format!(
            "payload of {} bytes, expected {}",
            payload.len(),
            4 * n
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Protocol("non-finite prediction".into()));
    }
    Ok(LatentGrid {
        h: expect.0,
        w: expect.1,
        c: expect.2,
        split: expect.2 / 2,
        data,
    })
}

impl Denoiser for ExternalDenoiser {
    fn predict_noise(&self, z_t: &LatentGrid, t: usize, label: Option<DensityLabel>) -> Result<LatentGrid> {
        let request = encode_request(z_t, t, label)?;
        let mut stream = self.connect()?;
        let io = |e| unavailable(&self.endpoint, e);
        stream.set_read_timeout(Some(self.timeout)).map_err(io)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(io)?;
        stream.write_all(&request).map_err(io)?;
        stream.flush().map_err(io)?;
        let mut response = Vec::new();
        stream.read_to_end(&mut response).map_err(io)?;
        let mut eps = decode_response(&response, z_t.shape())?;
        eps.split = z_t.split;
        Ok(eps)
    }
}

fn handle(mut stream: TcpStream, denoiser: &dyn Denoiser) -> Result<()> {
    let io = |e| Error::Protocol(format!("server i/o: {e}"));
    let mut header = [0u8; REQUEST_HEADER];
    stream.read_exact(&mut header).map_err(io)?;
    if &header[..4] != REQUEST_MAGIC || le_u32(&header, 4) != PROTOCOL_VERSION {
        return Err(Error::Protocol("bad request header".into()));
    }
    let (h, w, c, t) = (
        le_u32(&header, 8) as usize,
        le_u32(&header, 12) as usize,
        le_u32(&header, 16) as usize,
        le_u32(&header, 20) as usize,
    );
    let label = match i32::from_le_bytes(header[24..28].try_into().expect("4 bytes")) {
        -1 => None,
        y => Some(DensityLabel::from_index(y as u32).ok_or_else(|| Error::Protocol(format!("unknown label {y}")))?),
    };
    let mut payload = vec![0u8; 4 * h * w * c];
    stream.read_exact(&mut payload).map_err(io)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    let z = LatentGrid::from_data(h, w, c, data)?;
    let eps = denoiser.predict_noise(&z, t, label)?;
    let mut out = Vec::with_capacity(RESPONSE_HEADER + 4 * eps.data.len());
    out.extend_from_slice(RESPONSE_MAGIC);
    for v in [PROTOCOL_VERSION, h as u32, w as u32, c as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &eps.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    stream.write_all(&out).map_err(io)?;
    stream.shutdown(Shutdown::Both).ok();
    Ok(())
}

/// Answers requests on `listener` with `denoiser`, one connection at a time,
/// stopping after `limit` connections if given. Failed requests are logged
/// and their connection dropped.
pub fn serve(listener: &TcpListener, denoiser: &dyn Denoiser, limit: Option<usize>) -> Result<()> {
    for (handled, conn) in listener.incoming().enumerate() {
        match conn {
            Ok(stream) => {
                if let Err(e) = handle(stream, denoiser) {
                    log::warn!("denoiser request failed: {e}");
                }
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
        if limit.is_some_and(|l| handled + 1 >= l) {
            break;
        }
    }
    Ok(())
}
