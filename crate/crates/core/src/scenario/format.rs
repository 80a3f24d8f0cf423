//! Dataset file layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "TTMDATA\0"
//! version   u32      1
//! split     u8       0 train, 1 val, 2 test
//! frames    u32      T
//! fps       u32
//! rate      u32      audio sample rate
//! head_dim  u32
//! lip_h     u32
//! lip_w     u32
//! lip_c     u32
//! count     u32      number of sequences
//! count × sequence:
//!   id       u32
//!   persons  u8
//!   six sections, each a u32 byte length followed by the bytes:
//!     head    f32 × T·head_dim
//!     lip     u8 × T·lip_h·lip_w·lip_c
//!     audio   u32 sample rate, then f32 samples
//!     mask    ⌈T/8⌉ bytes, bit t (LSB first) set when frame t is present
//!     labels  ⌈T/8⌉ bytes, same bit order
//!     truth   ⌈T/8⌉ speaking bits, u8 × T active speaker counts, f32 × T yaw
//! ```

use std::io::Write;
use std::path::Path;

use super::{GroundTruth, ScenarioDataset, Sequence, Split};
use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 8] = b"TTMDATA\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CoreError::Format(format!("{what} {v} does not fit in 32 bits")))
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn section(out: &mut Vec<u8>, body: &[u8]) -> Result<()> {
    put_u32(out, to_u32(body.len(), "section length")?);
    out.extend_from_slice(body);
    Ok(())
}

pub fn encode(ds: &ScenarioDataset) -> Result<Vec<u8>> {
    let t = ds.frames;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(ds.split.code());
    for (v, what) in [
        (t, "frames"),
        (ds.fps as usize, "fps"),
        (ds.sample_rate as usize, "sample rate"),
        (ds.head_dim, "head dim"),
        (ds.lip_height, "lip height"),
        (ds.lip_width, "lip width"),
        (ds.lip_channels, "lip channels"),
        (ds.len(), "sequence count"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    for s in &ds.sequences {
        if s.frames() != t || s.mask.len() != t || s.truth.yaw.len() != t {
            return Err(CoreError::Format(format!("sequence {} does not have {t} frames", s.id)));
        }
        put_u32(&mut out, s.id);
        out.push(s.persons);
        let head: Vec<u8> = s.head.iter().flat_map(|v| v.to_le_bytes()).collect();
        section(&mut out, &head)?;
        section(&mut out, &s.lip)?;
        let mut audio = s.sample_rate.to_le_bytes().to_vec();
        audio.extend(s.audio.iter().flat_map(|v| v.to_le_bytes()));
        section(&mut out, &audio)?;
        section(&mut out, &pack_bits(&s.mask))?;
        section(&mut out, &pack_bits(&s.labels))?;
        let mut truth = pack_bits(&s.truth.speaking);
        truth.extend_from_slice(&s.truth.active);
        truth.extend(s.truth.yaw.iter().flat_map(|v| v.to_le_bytes()));
        section(&mut out, &truth)?;
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CoreError::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self, what: &str, expect: Option<usize>) -> Result<&'a [u8]> {
        let len = self.u32(what)? as usize;
        if let Some(e) = expect {
            if len != e {
                return Err(CoreError::Format(format!("{what} section has {len} bytes, expected {e}")));
            }
        }
        self.take(len, what)
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<ScenarioDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CoreError::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported dataset version {version}")));
    }
    let split = Split::from_code(r.u8("split")?)?;
    let t = r.u32("frames")? as usize;
    let fps = r.u32("fps")?;
    let sample_rate = r.u32("sample rate")?;
    let head_dim = r.u32("head dim")? as usize;
    let lip_height = r.u32("lip height")? as usize;
    let lip_width = r.u32("lip width")? as usize;
    let lip_channels = r.u32("lip channels")? as usize;
    let count = r.u32("count")? as usize;
    let bits = t.div_ceil(8);
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.u32("sequence id")?;
        let persons = r.u8("persons")?;
        let head = f32s(r.section("head", Some(t * head_dim * 4))?);
        let lip = r.section("lip", Some(t * lip_height * lip_width * lip_channels))?.to_vec();
        let audio = r.section("audio", None)?;
        if audio.len() < 4 || audio.len() % 4 != 0 {
            return Err(CoreError::Format(format!("audio section of {} bytes", audio.len())));
        }
        let rate = u32::from_le_bytes(audio[..4].try_into().expect("4 bytes"));
        let samples = f32s(&audio[4..]);
        let mask = unpack_bits(r.section("mask", Some(bits))?, t);
        let labels = unpack_bits(r.section("labels", Some(bits))?, t);
        let truth = r.section("truth", Some(bits + t + 4 * t))?;
        sequences.push(Sequence {
            id,
            persons,
            head,
            lip,
            audio: samples,
            sample_rate: rate,
            mask,
            labels,
            truth: GroundTruth {
                speaking: unpack_bits(&truth[..bits], t),
                active: truth[bits..bits + t].to_vec(),
                yaw: f32s(&truth[bits + t..]),
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ScenarioDataset {
        split,
        frames: t,
        fps,
        sample_rate,
        head_dim,
        lip_height,
        lip_width,
        lip_channels,
        sequences,
    })
}

pub fn write_dataset(ds: &ScenarioDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<ScenarioDataset> {
    decode(&std::fs::read(path)?)
}
