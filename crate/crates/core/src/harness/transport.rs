//! Length-prefixed feature frames over TCP, with an interception tap.
//!
//! Frame layout (big-endian): `"SFZ1"`, dtype `u8` (1 = f32, 2 = f16), shape
//! `4 × u32`, payload length `u64`, payload. Replies carry logits in the same
//! format as `(n, K, 1, 1)` f32; failures are answered with `"SFER"`, a `u16`
//! code, a `u32` reason length and the UTF-8 reason, and the connection closes.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use half::f16;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sf_nn::Tensor;

use crate::error::{Error, Result};
use crate::splitmodels::{tap, FeatureMap, SplitModel, TapPoint};

pub const MAGIC: &[u8; 4] = b"SFZ1";
pub const ERROR_MAGIC: &[u8; 4] = b"SFER";
pub const HEADER_LEN: usize = 4 + 1 + 16 + 8;
/// Frames above this payload size are refused.
pub const MAX_PAYLOAD: u64 = 1 << 31;
pub const CAPTURE_EXT: &str = "sfz";

pub mod code {
    pub const BAD_MAGIC: u16 = 1;
    pub const BAD_DTYPE: u16 = 2;
    pub const BAD_LENGTH: u16 = 3;
    pub const TRUNCATED: u16 = 4;
    pub const TOO_LARGE: u16 = 5;
    pub const HANDLER: u16 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32 = 1,
    F16 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F16),
            _ => None,
        }
    }
}

fn protocol(code: u16, reason: impl Into<String>) -> Error {
    Error::Protocol { code, reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureFrame {
    pub dtype: Dtype,
    pub shape: [u32; 4],
    pub payload: Vec<u8>,
}

impl FeatureFrame {
    pub fn encode(z: &FeatureMap, dtype: Dtype) -> Result<Self> {
        Self::from_tensor(z.values(), dtype)
    }

    pub fn from_tensor(t: &Tensor, dtype: Dtype) -> Result<Self> {
        if t.ndim() != 4 {
            return Err(protocol(code::BAD_LENGTH, format!("frames carry 4-D tensors, got {:?}", t.shape())));
        }
        let mut shape = [0u32; 4];
        for (s, &d) in shape.iter_mut().zip(t.shape()) {
            *s = u32::try_from(d).map_err(|_| protocol(code::TOO_LARGE, "dimension exceeds u32"))?;
        }
        let mut payload = Vec::with_capacity(t.numel() * dtype.size());
        for &v in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_be_bytes()),
                Dtype::F16 => payload.extend_from_slice(&f16::from_f64(v).to_be_bytes()),
            }
        }
        Ok(Self { dtype, shape, payload })
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let vals: Vec<f64> = match self.dtype {
            Dtype::F32 => self.payload.chunks_exact(4).map(|b| f32::from_be_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F16 => self.payload.chunks_exact(2).map(|b| f16::from_be_bytes(b.try_into().unwrap()).to_f64()).collect(),
        };
        Ok(Tensor::new(self.shape.iter().map(|&d| d as usize).collect::<Vec<_>>(), vals)?)
    }

    pub fn decode(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.to_tensor()?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype as u8);
        for d in self.shape {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let frame = Self::read_from(&mut r)?.ok_or_else(|| protocol(code::TRUNCATED, "empty frame"))?;
        if !r.is_empty() {
            return Err(protocol(code::BAD_LENGTH, format!("{} trailing bytes after frame", r.len())));
        }
        Ok(frame)
    }

    /// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
    pub fn read_from(r: &mut dyn Read) -> Result<Option<Self>> {
        let mut header = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match r.read(&mut header[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(protocol(code::TRUNCATED, format!("stream ended after {got} header bytes"))),
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
            if got >= 4 && &header[..4] != MAGIC {
                return Err(protocol(code::BAD_MAGIC, format!("bad magic {:?}", &header[..4])));
            }
        }
        let dtype = Dtype::from_code(header[4]).ok_or_else(|| protocol(code::BAD_DTYPE, format!("unknown dtype code {}", header[4])))?;
        let mut shape = [0u32; 4];
        for (i, s) in shape.iter_mut().enumerate() {
            *s = u32::from_be_bytes(header[5 + 4 * i..9 + 4 * i].try_into().unwrap());
        }
        let len = u64::from_be_bytes(header[21..29].try_into().unwrap());
        let expect = shape.iter().map(|&d| d as u64).product::<u64>() * dtype.size() as u64;
        if len != expect {
            return Err(protocol(code::BAD_LENGTH, format!("payload length {len} but shape {shape:?} needs {expect}")));
        }
        if len > MAX_PAYLOAD {
            return Err(protocol(code::TOO_LARGE, format!("payload of {len} bytes exceeds the limit")));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => protocol(code::TRUNCATED, "stream ended inside the payload"),
            _ => e.into(),
        })?;
        Ok(Some(Self { dtype, shape, payload }))
    }
}

fn error_reply(code: u16, reason: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + reason.len());
    out.extend_from_slice(ERROR_MAGIC);
    out.extend_from_slice(&code.to_be_bytes());
    out.extend_from_slice(&(reason.len() as u32).to_be_bytes());
    out.extend_from_slice(reason.as_bytes());
    out
}

/// Cloud-side work for one received frame.
pub trait FrameHandler {
    fn handle(&mut self, z: FeatureMap) -> Result<Tensor>;
}

/// Runs the cloud half of a split model on received features.
pub struct CloudHandler {
    pub model: SplitModel,
}

impl FrameHandler for CloudHandler {
    fn handle(&mut self, z: FeatureMap) -> Result<Tensor> {
        let logits = self.model.cloud_logits(&z);
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        Ok(logits.reshape(vec![n, k, 1, 1])?)
    }
}

/// Returns the received features unchanged.
pub struct EchoHandler;

impl FrameHandler for EchoHandler {
    fn handle(&mut self, z: FeatureMap) -> Result<Tensor> {
        Ok(z.into_tensor())
    }
}

#[derive(Clone, Debug, Default)]
pub struct ServerConfig {
    /// Directory where every received frame is written verbatim.
    pub tap_dir: Option<PathBuf>,
    /// Stop after this many connections.
    pub max_connections: Option<usize>,
    pub read_timeout: Option<Duration>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub connections: usize,
    pub frames: usize,
    pub protocol_errors: Vec<u16>,
    pub captured: Vec<PathBuf>,
}

fn serve_connection(stream: &mut TcpStream, handler: &mut dyn FrameHandler, cfg: &ServerConfig, stats: &mut ServerStats) -> Result<()> {
    stream.set_read_timeout(cfg.read_timeout)?;
    loop {
        let frame = match FeatureFrame::read_from(stream) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(Error::Protocol { code, reason }) => {
                warn!("protocol error {code}: {reason}");
                stats.protocol_errors.push(code);
                let _ = stream.write_all(&error_reply(code, &reason));
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        if let Some(dir) = &cfg.tap_dir {
            let path = dir.join(format!("frame_{:06}.{CAPTURE_EXT}", stats.frames));
            std::fs::write(&path, frame.to_bytes())?;
            stats.captured.push(path);
        }
        stats.frames += 1;
        let reply = frame.decode().and_then(|z| handler.handle(z)).and_then(|t| FeatureFrame::from_tensor(&t, Dtype::F32));
        match reply {
            Ok(f) => stream.write_all(&f.to_bytes())?,
            Err(e) => {
                stats.protocol_errors.push(code::HANDLER);
                let _ = stream.write_all(&error_reply(code::HANDLER, &e.to_string()));
                return Ok(());
            }
        }
    }
}

/// Serial accept loop: one connection at a time, until `max_connections`.
pub fn serve(listener: TcpListener, handler: &mut dyn FrameHandler, cfg: &ServerConfig) -> Result<ServerStats> {
    if let Some(dir) = &cfg.tap_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut stats = ServerStats::default();
    for conn in listener.incoming() {
        let mut stream = conn?;
        stats.connections += 1;
        if let Err(e) = serve_connection(&mut stream, handler, cfg, &mut stats) {
            warn!("connection {} ended with {e}", stats.connections);
        }
        if cfg.max_connections.is_some_and(|m| stats.connections >= m) {
            break;
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub index: usize,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub rtt_ms: f64,
}

/// Edge-side connection.
pub struct EdgeClient {
    stream: TcpStream,
    sent: usize,
}

impl EdgeClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self { stream, sent: 0 })
    }

    /// Sends raw bytes, for exercising the server's error handling.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        self.stream.write_all(bytes)?;
        Ok(())
    }

    pub fn finish_writes(&mut self) -> Result<()> {
        self.stream.shutdown(std::net::Shutdown::Write)?;
        Ok(())
    }

    /// Reads one reply frame, turning an error reply into [`Error::Protocol`].
    pub fn receive(&mut self) -> Result<FeatureFrame> {
        let mut head = [0u8; 4];
        self.stream.read_exact(&mut head)?;
        if &head == ERROR_MAGIC {
            let mut rest = [0u8; 6];
            self.stream.read_exact(&mut rest)?;
            let code = u16::from_be_bytes([rest[0], rest[1]]);
            let len = u32::from_be_bytes(rest[2..6].try_into().unwrap()) as usize;
            let mut reason = vec![0u8; len];
            self.stream.read_exact(&mut reason)?;
            return Err(protocol(code, String::from_utf8_lossy(&reason)));
        }
        let mut chained = (&head[..]).chain(&mut self.stream);
        FeatureFrame::read_from(&mut chained)?.ok_or_else(|| protocol(code::TRUNCATED, "no reply"))
    }

    /// Sends one feature map and waits for the reply.
    pub fn send(&mut self, z: &FeatureMap, dtype: Dtype) -> Result<(Tensor, FrameLog)> {
        let frame = FeatureFrame::encode(z, dtype)?;
        let start = Instant::now();
        self.stream.write_all(&frame.to_bytes())?;
        let reply = self.receive()?;
        let rtt_ms = start.elapsed().as_secs_f64() * 1e3;
        let log = FrameLog { index: self.sent, header_bytes: HEADER_LEN, payload_bytes: frame.payload.len(), rtt_ms };
        self.sent += 1;
        info!("frame {}: {} payload bytes, rtt {rtt_ms:.2} ms", log.index, log.payload_bytes);
        Ok((reply.to_tensor()?, log))
    }
}

/// Loads every captured frame in `dir`, in file-name order.
pub fn read_captures(dir: &Path) -> Result<Vec<FeatureMap>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == CAPTURE_EXT))
        .collect();
    paths.sort();
    paths.iter().map(|p| FeatureFrame::from_bytes(&std::fs::read(p)?)?.decode()).collect()
}

#[derive(Clone, Debug)]
pub struct SessionLog {
    pub addr: SocketAddr,
    pub frames: Vec<FrameLog>,
    pub logits: Tensor,
    pub server: ServerStats,
}

/// Runs the edge locally and the cloud behind a loopback server on `port`
/// (0 picks a free port), sending `images` in batches and tapping the link.
pub fn transport_demo(model: &SplitModel, port: u16, images: &Tensor, batch: usize, tap_dir: Option<&Path>) -> Result<SessionLog> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let addr = listener.local_addr()?;
    let cfg =
        ServerConfig { tap_dir: tap_dir.map(Path::to_path_buf), max_connections: Some(1), read_timeout: Some(Duration::from_secs(30)) };
    let cloud = model.clone();
    let server = std::thread::spawn(move || serve(listener, &mut CloudHandler { model: cloud }, &cfg));
    let run = || -> Result<(Vec<FrameLog>, Tensor)> {
        let mut client = EdgeClient::connect(addr)?;
        let n = images.shape()[0];
        let (mut logs, mut outs) = (Vec::new(), Vec::new());
        for s in (0..n).step_by(batch.max(1)) {
            let z = tap(model, &images.slice_batch(s, (s + batch.max(1)).min(n)), TapPoint::EdgeOutput)?;
            let (logits, log) = client.send(&z, Dtype::F32)?;
            let (b, k) = (logits.shape()[0], logits.shape()[1]);
            outs.push(logits.reshape(vec![b, k])?);
            logs.push(log);
        }
        client.finish_writes()?;
        Ok((logs, Tensor::cat_batch(&outs)?))
    };
    let result = run();
    let stats = server.join().map_err(|_| protocol(code::HANDLER, "server thread panicked"))??;
    let (frames, logits) = result?;
    Ok(SessionLog { addr, frames, logits, server: stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame_of(vals: Vec<f32>, shape: [usize; 4]) -> FeatureMap {
        FeatureMap::new(Tensor::new(shape.to_vec(), vals.into_iter().map(f64::from).collect()).unwrap()).unwrap()
    }

    #[test]
    fn header_and_payload_sizes() {
        let z = FeatureMap::new(Tensor::zeros(vec![4, 256, 16, 16])).unwrap();
        let f = FeatureFrame::encode(&z, Dtype::F32).unwrap();
        assert_eq!(f.payload.len(), 1_048_576);
        assert_eq!(f.to_bytes().len(), 1_048_576 + HEADER_LEN);
        assert_eq!(HEADER_LEN, 29);
        assert_eq!(FeatureFrame::encode(&z, Dtype::F16).unwrap().payload.len(), 524_288);
    }

    proptest! {
        #[test]
        fn f32_codec_is_bit_exact(vals in proptest::collection::vec(-1e30f32..1e30, 12)) {
            let z = frame_of(vals.clone(), [1, 3, 2, 2]);
            let back = FeatureFrame::from_bytes(&FeatureFrame::encode(&z, Dtype::F32).unwrap().to_bytes()).unwrap().decode().unwrap();
            let bits: Vec<u32> = back.values().data().iter().map(|&v| (v as f32).to_bits()).collect();
            prop_assert_eq!(bits, vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn malformed_frames_are_classified() {
        let z = frame_of(vec![1.0; 8], [1, 2, 2, 2]);
        let good = FeatureFrame::encode(&z, Dtype::F32).unwrap().to_bytes();
        let code_of = |b: &[u8]| match FeatureFrame::from_bytes(b) {
            Err(Error::Protocol { code, .. }) => code,
            other => panic!("expected protocol error, got {other:?}"),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(code_of(&bad), code::BAD_MAGIC);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(code_of(&bad), code::BAD_DTYPE);
        let mut bad = good.clone();
        bad[28] += 1;
        assert_eq!(code_of(&bad), code::BAD_LENGTH);
        assert_eq!(code_of(&good[..good.len() - 1]), code::TRUNCATED);
        assert_eq!(code_of(&good[..10]), code::TRUNCATED);
    }

    #[test]
    fn server_survives_bad_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ServerConfig { tap_dir: Some(dir.path().to_path_buf()), max_connections: Some(2), read_timeout: Some(Duration::from_secs(10)) };
        let server = std::thread::spawn(move || serve(listener, &mut EchoHandler, &cfg).unwrap());
        let z = frame_of((0..8).map(|i| i as f32 * 0.5).collect(), [1, 2, 2, 2]);
        let bytes = FeatureFrame::encode(&z, Dtype::F32).unwrap().to_bytes();

        let mut bad = EdgeClient::connect(addr).unwrap();
        bad.send_raw(&bytes[..bytes.len() - 4]).unwrap();
        bad.finish_writes().unwrap();
        assert!(matches!(bad.receive(), Err(Error::Protocol { code: code::TRUNCATED, .. })));

        let mut good = EdgeClient::connect(addr).unwrap();
        let (echo, log) = good.send(&z, Dtype::F32).unwrap();
        assert_eq!(&echo, z.values());
        assert_eq!(log.payload_bytes, 32);
        good.finish_writes().unwrap();
        let stats = server.join().unwrap();
        assert_eq!(stats.protocol_errors, vec![code::TRUNCATED]);
        assert_eq!(read_captures(dir.path()).unwrap(), vec![z]);
    }
}
