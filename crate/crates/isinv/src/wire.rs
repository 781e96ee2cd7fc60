//! The split-inference boundary: internal states serialized into checksummed
//! frames, persisted to disk, and shipped over TCP from the device holding
//! the shallow layers to the server holding the rest.
//!
//! A frame is `ISF1`, version, layer, row/column counts, a dtype tag, the
//! row-major payload, and a trailing CRC32 of the payload. Frames carry no
//! model provenance; whoever imports them asserts which model produced them
//! (see [`stamp_fingerprint`]). The default wire dtype is f32 while attacks
//! work in f64, so one send rounds the states exactly once, the same policy
//! checkpoints use; f64 frames exist for lossless offline archiving.
//!
//! The server answers each accepted frame with the next-token id and, when
//! given a transcript path, persists accepted frames byte-for-byte: the
//! "honest-but-curious" role that later re-attacks what it logged.

use crate::lm::{InternalStates, MicroLM};
use crate::tensor::Tensor;
use crate::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const WIRE_MAGIC: [u8; 4] = *b"ISF1";
pub const WIRE_VERSION: u16 = 1;
const HELLO_MAGIC: [u8; 4] = *b"ISH1";
const ACK: u8 = 0x06;
const NACK: u8 = 0x15;
const IO_TIMEOUT: Duration = Duration::from_secs(20);
// 2 GiB payload cap; a corrupt length field must not look like an allocation.
const MAX_PAYLOAD: usize = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireDtype {
    F32,
    F64,
}

impl WireDtype {
    fn tag(self) -> u8 {
        match self {
            WireDtype::F32 => 0,
            WireDtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(WireDtype::F32),
            1 => Ok(WireDtype::F64),
            t => Err(Error::Format(format!("unknown dtype tag {}", t))),
        }
    }

    fn size(self) -> usize {
        match self {
            WireDtype::F32 => 4,
            WireDtype::F64 => 8,
        }
    }
}

// ---------------------------------------------------------------------------
// frame codec

/// Serialize one state matrix as a frame. f32 conversion errors out on values
/// that overflow single precision rather than quietly shipping infinities.
pub fn write_frame(w: &mut impl Write, h: &InternalStates, dtype: WireDtype) -> Result<()> {
    if h.layer > u16::MAX as usize {
        return Err(Error::Format(format!("layer {} does not fit the frame header", h.layer)));
    }
    let (n, d) = h.states.dims();
    if n == 0 || d == 0 {
        return Err(Error::Format("refusing to write an empty frame".into()));
    }
    if !h.states.is_finite() {
        return Err(Error::NonFinite("frame payload"));
    }
    let mut payload = Vec::with_capacity(n * d * dtype.size());
    for &v in h.states.data() {
        match dtype {
            WireDtype::F32 => {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::NonFinite("f32 wire conversion"));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
            WireDtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&payload);

    w.write_all(&WIRE_MAGIC)?;
    w.write_all(&WIRE_VERSION.to_le_bytes())?;
    w.write_all(&(h.layer as u16).to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    w.write_all(&[dtype.tag()])?;
    w.write_all(&payload)?;
    w.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// The same frame as the exact bytes [`write_frame`] would emit.
pub fn frame_bytes(h: &InternalStates, dtype: WireDtype) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_frame(&mut buf, h, dtype)?;
    Ok(buf)
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], index: usize, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated { index, detail: what.into() }
        } else {
            Error::Io(e)
        }
    })
}

/// Read one frame, returning the decoded states plus the raw bytes consumed
/// (for byte-exact persistence). `Ok(None)` is a clean end of stream: the
/// source ended exactly on a frame boundary.
pub fn read_frame_raw(
    r: &mut impl Read,
    index: usize,
) -> Result<Option<(InternalStates, Vec<u8>)>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let k = r.read(&mut magic[filled..])?;
        if k == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Truncated { index, detail: "magic cut short".into() });
        }
        filled += k;
    }
    if magic != WIRE_MAGIC {
        return Err(Error::Format(format!("frame {}: bad magic {:?}", index, magic)));
    }

    let mut head = [0u8; 13];
    read_exact_at(r, &mut head, index, "header cut short")?;
    let version = u16::from_le_bytes([head[0], head[1]]);
    if version > WIRE_VERSION {
        return Err(Error::Format(format!("frame {}: unsupported version {}", index, version)));
    }
    let layer = u16::from_le_bytes([head[2], head[3]]) as usize;
    let n = u32::from_le_bytes([head[4], head[5], head[6], head[7]]) as usize;
    let d = u32::from_le_bytes([head[8], head[9], head[10], head[11]]) as usize;
    let dtype = WireDtype::from_tag(head[12])?;
    if n == 0 || d == 0 {
        return Err(Error::Format(format!("frame {}: empty dimensions {}x{}", index, n, d)));
    }
    let payload_len = n
        .checked_mul(d)
        .and_then(|e| e.checked_mul(dtype.size()))
        .filter(|&len| len <= MAX_PAYLOAD)
        .ok_or_else(|| Error::Format(format!("frame {}: payload too large", index)))?;

    let mut payload = vec![0u8; payload_len];
    read_exact_at(r, &mut payload, index, "payload cut short")?;
    let mut crc_buf = [0u8; 4];
    read_exact_at(r, &mut crc_buf, index, "checksum cut short")?;
    let stored = u32::from_le_bytes(crc_buf);
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(Error::Checksum { index, stored, computed });
    }

    let data: Vec<f64> = match dtype {
        WireDtype::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect(),
        WireDtype::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect(),
    };
    let states = Tensor::new(vec![n, d], data)?;

    let mut raw = Vec::with_capacity(4 + 13 + payload_len + 4);
    raw.extend_from_slice(&magic);
    raw.extend_from_slice(&head);
    raw.extend_from_slice(&payload);
    raw.extend_from_slice(&crc_buf);
    // Provenance is not on the wire; importers stamp it themselves.
    Ok(Some((InternalStates { layer, states, model_fingerprint: 0, truncated: false }, raw)))
}

// ---------------------------------------------------------------------------
// offline containers

/// Write frames back to back into one file.
pub fn export_is(path: impl AsRef<Path>, states: &[InternalStates], dtype: WireDtype) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for h in states {
        write_frame(&mut f, h, dtype)?;
    }
    f.flush()?;
    Ok(())
}

/// Read every frame of a container. Checksum and truncation errors name the
/// offending frame index. Imported states carry fingerprint 0.
pub fn import_is(path: impl AsRef<Path>) -> Result<Vec<InternalStates>> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    while let Some((h, _)) = read_frame_raw(&mut f, out.len())? {
        out.push(h);
    }
    Ok(out)
}

/// Assert which model produced imported states. The wire format carries no
/// provenance, so the holder vouches for it; fingerprint-checked attacks then
/// work against the right model.
pub fn stamp_fingerprint(states: &mut [InternalStates], model: &MicroLM) {
    let fp = model.fingerprint();
    for h in states {
        h.model_fingerprint = fp;
    }
}

// ---------------------------------------------------------------------------
// split-inference sessions

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub l_split: usize,
    /// Persist accepted frames byte-for-byte here (the curious server).
    pub transcript: Option<PathBuf>,
    /// Number of connections to serve before returning.
    pub sessions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ServeSummary {
    pub sessions: usize,
    pub failed_handshakes: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Bind an address and serve split-inference sessions.
pub fn split_serve(addr: &str, model: &MicroLM, cfg: &ServeConfig) -> Result<ServeSummary> {
    split_serve_on(TcpListener::bind(addr)?, model, cfg)
}

/// Serve sessions on an already-bound listener (lets callers learn the port
/// before the server starts accepting).
pub fn split_serve_on(
    listener: TcpListener,
    model: &MicroLM,
    cfg: &ServeConfig,
) -> Result<ServeSummary> {
    if cfg.l_split == 0 || cfg.l_split > model.cfg.n_layers {
        return Err(Error::Config(format!(
            "split layer {} outside 1..={}",
            cfg.l_split, model.cfg.n_layers
        )));
    }
    if cfg.sessions == 0 {
        return Err(Error::Config("serving zero sessions is a no-op".into()));
    }
    let mut transcript = cfg
        .transcript
        .as_ref()
        .map(|p| std::fs::File::create(p).map(BufWriter::new))
        .transpose()?;
    let mut summary = ServeSummary { sessions: 0, failed_handshakes: 0, accepted: 0, rejected: 0 };
    for _ in 0..cfg.sessions {
        let (stream, _) = listener.accept()?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_write_timeout(Some(IO_TIMEOUT))?;
        handle_session(stream, model, cfg.l_split, transcript.as_mut(), &mut summary)?;
        summary.sessions += 1;
    }
    if let Some(t) = transcript.as_mut() {
        t.flush()?;
    }
    Ok(summary)
}

fn handle_session(
    stream: TcpStream,
    model: &MicroLM,
    l_split: usize,
    mut transcript: Option<&mut BufWriter<std::fs::File>>,
    summary: &mut ServeSummary,
) -> Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);

    // Handshake: magic, version, split layer, width, dtype. A mismatch ends
    // this session only; the server keeps accepting.
    let mut hello = [0u8; 13];
    if reader.read_exact(&mut hello).is_err() {
        summary.failed_handshakes += 1;
        return Ok(());
    }
    let magic_ok = hello[..4] == HELLO_MAGIC;
    let version = u16::from_le_bytes([hello[4], hello[5]]);
    let their_split = u16::from_le_bytes([hello[6], hello[7]]) as usize;
    let their_d = u32::from_le_bytes([hello[8], hello[9], hello[10], hello[11]]) as usize;
    let dtype_ok = WireDtype::from_tag(hello[12]).is_ok();
    if !magic_ok
        || version != WIRE_VERSION
        || their_split != l_split
        || their_d != model.cfg.d_in
        || !dtype_ok
    {
        let _ = writer.write_all(&[NACK]);
        summary.failed_handshakes += 1;
        return Ok(());
    }
    writer.write_all(&[ACK])?;

    let mut index = 0usize;
    loop {
        match read_frame_raw(&mut reader, index) {
            Ok(None) => break, // client closed cleanly
            Ok(Some((h, raw))) => {
                index += 1;
                if h.layer != l_split
                    || h.states.cols() != model.cfg.d_in
                    || h.states.rows() > model.cfg.max_seq_len
                {
                    writer.write_all(&[NACK])?;
                    summary.rejected += 1;
                    continue;
                }
                writer.write_all(&[ACK])?;
                if let Some(t) = transcript.as_deref_mut() {
                    t.write_all(&raw)?;
                }
                let next = model.next_token_from_states(&h)?;
                writer.write_all(&next.to_le_bytes())?;
                summary.accepted += 1;
            }
            Err(Error::Checksum { .. }) => {
                // Frame fully consumed, framing intact: reject and carry on.
                index += 1;
                writer.write_all(&[NACK])?;
                summary.rejected += 1;
            }
            Err(Error::Truncated { .. }) => break, // connection died mid-frame
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

/// Run the device half of split inference: capture states at the split layer
/// for each text, ship them, and collect the server's next-token predictions.
pub fn split_client(
    addr: &str,
    texts: &[String],
    model: &MicroLM,
    l_split: usize,
    dtype: WireDtype,
) -> Result<Vec<u32>> {
    if l_split == 0 || l_split > model.cfg.n_layers {
        return Err(Error::Config(format!(
            "split layer {} outside 1..={}",
            l_split, model.cfg.n_layers
        )));
    }
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;

    let mut hello = Vec::with_capacity(13);
    hello.extend_from_slice(&HELLO_MAGIC);
    hello.extend_from_slice(&WIRE_VERSION.to_le_bytes());
    hello.extend_from_slice(&(l_split as u16).to_le_bytes());
    hello.extend_from_slice(&(model.cfg.d_in as u32).to_le_bytes());
    hello.push(dtype.tag());
    stream.write_all(&hello)?;

    let mut status = [0u8; 1];
    stream
        .read_exact(&mut status)
        .map_err(|_| Error::Handshake("server closed during handshake".into()))?;
    if status[0] != ACK {
        return Err(Error::Handshake("server refused version, split layer, or width".into()));
    }

    let mut out = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let h = model.capture_is(text, l_split)?;
        write_frame(&mut stream, &h, dtype)?;
        stream.read_exact(&mut status)?;
        if status[0] != ACK {
            return Err(Error::Protocol(format!("server rejected frame {}", i)));
        }
        let mut id = [0u8; 4];
        stream.read_exact(&mut id)?;
        out.push(u32::from_le_bytes(id));
    }
    stream.shutdown(std::net::Shutdown::Write)?;
    Ok(out)
}
