//! The .fcgs container: header, section table, and assembly/parsing.

use crate::error::{Error, Result};
use crate::model_io::SceneBBox;
use crate::neural::{ModelWeights, StreamKind};

pub const CONTAINER_MAGIC: &[u8; 6] = b"FCGS01";
pub const CONTAINER_VERSION: u32 = 1;
pub const DEFAULT_CHUNK_SIZE: u64 = 1 << 20;
pub const PROFILE_DEFAULT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionKind {
    Positions,
    Masks,
    /// Hyper-latent (z-hat) symbols of one stream.
    Hyper,
    /// Latent (y-hat) symbols of one stream, one batch, one channel chunk.
    Latent,
}

impl SectionKind {
    fn to_byte(self) -> u8 {
        match self {
            SectionKind::Positions => 0,
            SectionKind::Masks => 1,
            SectionKind::Hyper => 2,
            SectionKind::Latent => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => SectionKind::Positions,
            1 => SectionKind::Masks,
            2 => SectionKind::Hyper,
            3 => SectionKind::Latent,
            _ => return Err(Error::Format(format!("unknown section kind {b}"))),
        })
    }
}

fn stream_byte(s: Option<StreamKind>) -> u8 {
    match s {
        None => 0xff,
        Some(StreamKind::Geo) => 0,
        Some(StreamKind::Col0) => 1,
        Some(StreamKind::Col1) => 2,
    }
}

fn stream_from_byte(b: u8) -> Result<Option<StreamKind>> {
    Ok(match b {
        0xff => None,
        0 => Some(StreamKind::Geo),
        1 => Some(StreamKind::Col0),
        2 => Some(StreamKind::Col1),
        _ => return Err(Error::Format(format!("unknown stream tag {b}"))),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionId {
    pub kind: SectionKind,
    /// Scene-chunk index.
    pub chunk: u32,
    pub stream: Option<StreamKind>,
    pub batch: u8,
    /// Channel-chunk index within the stream.
    pub part: u8,
}

impl SectionId {
    pub fn positions(chunk: u32) -> Self {
        SectionId { kind: SectionKind::Positions, chunk, stream: None, batch: 0, part: 0 }
    }

    pub fn masks(chunk: u32) -> Self {
        SectionId { kind: SectionKind::Masks, chunk, stream: None, batch: 0, part: 0 }
    }

    pub fn hyper(chunk: u32, stream: StreamKind) -> Self {
        SectionId { kind: SectionKind::Hyper, chunk, stream: Some(stream), batch: 0, part: 0 }
    }

    pub fn latent(chunk: u32, stream: StreamKind, batch: u8, part: u8) -> Self {
        SectionId { kind: SectionKind::Latent, chunk, stream: Some(stream), batch, part }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerHeader {
    pub version: u32,
    pub n: u64,
    pub chunk_size: u64,
    pub seed: u64,
    pub bbox: SceneBBox,
    pub fingerprint: [u8; 16],
    pub profile: u32,
    pub clamp_events: u64,
}

impl ContainerHeader {
    pub fn n_chunks(&self) -> u32 {
        self.n.div_ceil(self.chunk_size) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub sections: Vec<(SectionId, Vec<u8>)>,
    /// Unrecognized bytes after the last declared section (tolerated for
    /// forward compatibility; reported so callers can warn).
    pub trailing: usize,
}

impl Container {
    pub fn section(&self, id: SectionId) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(sid, _)| *sid == id)
            .map(|(_, body)| body.as_slice())
            .ok_or_else(|| Error::Format(format!("missing section {id:?}")))
    }
}

pub fn fingerprint_hex(fp: &[u8; 16]) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hard error when the stream was produced under different weights.
pub fn check_fingerprint(header: &ContainerHeader, weights: &ModelWeights) -> Result<()> {
    let actual = weights.fingerprint();
    if header.fingerprint != actual {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint_hex(&header.fingerprint),
            actual: fingerprint_hex(&actual),
        });
    }
    Ok(())
}

pub fn write_container(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&c.header.version.to_le_bytes());
    out.extend_from_slice(&c.header.n.to_le_bytes());
    out.extend_from_slice(&c.header.chunk_size.to_le_bytes());
    out.extend_from_slice(&c.header.seed.to_le_bytes());
    for v in c.header.bbox.min.iter().chain(&c.header.bbox.max) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.header.fingerprint);
    out.extend_from_slice(&c.header.profile.to_le_bytes());
    out.extend_from_slice(&c.header.clamp_events.to_le_bytes());
    out.extend_from_slice(&(c.sections.len() as u32).to_le_bytes());
    for (id, body) in &c.sections {
        out.push(id.kind.to_byte());
        out.extend_from_slice(&id.chunk.to_le_bytes());
        out.push(stream_byte(id.stream));
        out.push(id.batch);
        out.push(id.part);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    }
    for (_, body) in &c.sections {
        out.extend_from_slice(body);
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated(format!("file ends inside {what}")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 6, "magic")? != CONTAINER_MAGIC {
        return Err(Error::Format("bad magic (expected FCGS01)".into()));
    }
    let u32f = |pos: &mut usize, what: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4, what)?.try_into().unwrap()))
    };
    let u64f = |pos: &mut usize, what: &str| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8, what)?.try_into().unwrap()))
    };
    let version = u32f(&mut pos, "version")?;
    if version > CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "container version {version} is newer than supported {CONTAINER_VERSION}"
        )));
    }
    let n = u64f(&mut pos, "count")?;
    if n == 0 {
        return Err(Error::Format("container declares zero Gaussians".into()));
    }
    let chunk_size = u64f(&mut pos, "chunk size")?;
    if chunk_size == 0 {
        return Err(Error::Format("container declares zero chunk size".into()));
    }
    let seed = u64f(&mut pos, "seed")?;
    let mut bb = [0.0f64; 6];
    for v in &mut bb {
        *v = f64::from_bits(u64f(&mut pos, "bbox")?);
        if !v.is_finite() {
            return Err(Error::Format("non-finite bbox in header".into()));
        }
    }
    let bbox = SceneBBox { min: [bb[0], bb[1], bb[2]], max: [bb[3], bb[4], bb[5]] };
    let mut fingerprint = [0u8; 16];
    fingerprint.copy_from_slice(take(&mut pos, 16, "fingerprint")?);
    let profile = u32f(&mut pos, "profile")?;
    let clamp_events = u64f(&mut pos, "clamp counter")?;

    let n_sections = u32f(&mut pos, "section count")? as usize;
    let mut ids = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let kind = SectionKind::from_byte(take(&mut pos, 1, "section kind")?[0])?;
        let chunk = u32f(&mut pos, "section chunk")?;
        let stream = stream_from_byte(take(&mut pos, 1, "section stream")?[0])?;
        let batch = take(&mut pos, 1, "section batch")?[0];
        let part = take(&mut pos, 1, "section part")?[0];
        let length = u64f(&mut pos, "section length")? as usize;
        ids.push((SectionId { kind, chunk, stream, batch, part }, length));
    }
    let mut sections = Vec::with_capacity(n_sections);
    for (id, length) in ids {
        let body = take(&mut pos, length, "section body")?.to_vec();
        sections.push((id, body));
    }
    let trailing = bytes.len() - pos;

    Ok(Container {
        header: ContainerHeader { version, n, chunk_size, seed, bbox, fingerprint, profile, clamp_events },
        sections,
        trailing,
    })
}
