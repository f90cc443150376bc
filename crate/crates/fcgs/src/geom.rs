//! Lossless coding of 16-bit-quantized coordinates: Morton ordering, a
//! breadth-first octree with per-level occupancy tables, and a raw-packing
//! fallback that bounds the section at 48 bits per point.

use crate::coder::{quantize_pmf, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::model_io::SceneBBox;

pub const POSITION_BITS: u32 = 16;
const LEVELS: usize = POSITION_BITS as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPositions {
    /// N x 3 indices in [0, 2^16).
    pub indices: Vec<u16>,
    pub bbox: SceneBBox,
}

impl QuantizedPositions {
    pub fn count(&self) -> usize {
        self.indices.len() / 3
    }

    /// Dequantized coordinates: cell centers bbox.min + (k + 0.5) * extent / 2^16.
    pub fn dequantize(&self) -> Vec<f64> {
        let extent = self.bbox.extent();
        self.indices
            .chunks_exact(3)
            .flat_map(|ix| {
                (0..3).map(move |a| {
                    self.bbox.min[a] + (ix[a] as f64 + 0.5) * extent[a] / 65536.0
                })
            })
            .collect()
    }

    /// Grid-normalized coordinates (k + 0.5) / 2^16 in (0, 1); identical on
    /// encoder and decoder since both start from the indices.
    pub fn normalized(&self) -> Vec<f64> {
        self.indices.iter().map(|&k| (k as f64 + 0.5) / 65536.0).collect()
    }
}

pub fn quantize_positions(positions: &[f64], bbox: &SceneBBox) -> QuantizedPositions {
    let extent = bbox.extent();
    let indices = positions
        .chunks_exact(3)
        .flat_map(|p| {
            (0..3).map(move |a| {
                let t = (p[a] - bbox.min[a]) / extent[a];
                ((t * 65536.0).floor() as i64).clamp(0, 65535) as u16
            })
        })
        .collect();
    QuantizedPositions { indices, bbox: bbox.clone() }
}

/// 48-bit Morton key: bit b of x/y/z lands at 3b+2 / 3b+1 / 3b.
pub fn morton_key(ix: u16, iy: u16, iz: u16) -> u64 {
    fn spread(v: u16) -> u64 {
        let mut x = v as u64;
        x = (x | (x << 32)) & 0x0000_1f00_0000_ffff;
        x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
        x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
        x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
        x = (x | (x << 2)) & 0x1249_2492_4924_9249;
        x
    }
    (spread(ix) << 2) | (spread(iy) << 1) | spread(iz)
}

/// Stable permutation sorting rows into Morton order; duplicates keep their
/// original relative order.
pub fn morton_order(indices: &[u16]) -> Vec<u32> {
    let mut perm: Vec<u32> = (0..(indices.len() / 3) as u32).collect();
    perm.sort_by_key(|&g| {
        let i = g as usize * 3;
        (morton_key(indices[i], indices[i + 1], indices[i + 2]), g)
    });
    perm
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            break;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    let mut shift = 0;
    loop {
        let byte = *buf
            .get(*pos)
            .ok_or_else(|| Error::Truncated("position section ends inside a varint".into()))?;
        *pos += 1;
        if shift >= 64 {
            return Err(Error::Corruption("overlong varint in position section".into()));
        }
        v |= ((byte & 0x7f) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
        shift += 7;
    }
}

const MODE_OCTREE: u8 = 0;
const MODE_RAW: u8 = 1;

/// Occupancy byte of a point at a given level: one bit per child octant,
/// octant index (x_bit << 2) | (y_bit << 1) | z_bit from the level's bit.
fn octant(ix: u16, iy: u16, iz: u16, level: usize) -> u8 {
    let shift = LEVELS - 1 - level;
    ((((ix >> shift) & 1) << 2) | (((iy >> shift) & 1) << 1) | ((iz >> shift) & 1)) as u8
}

/// BFS occupancy bytes per level plus unique leaves (Morton order) with
/// duplicate counts. Input rows must be Morton-sorted.
fn octree_symbols(sorted: &[u16]) -> (Vec<Vec<u8>>, Vec<[u16; 3]>, Vec<u64>) {
    let n = sorted.len() / 3;
    let mut leaves: Vec<[u16; 3]> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    for r in 0..n {
        let row = [sorted[r * 3], sorted[r * 3 + 1], sorted[r * 3 + 2]];
        if leaves.last() == Some(&row) {
            *counts.last_mut().unwrap() += 1;
        } else {
            leaves.push(row);
            counts.push(1);
        }
    }
    // Each level's nodes, in Morton order, map to runs of leaves sharing a
    // key prefix; the occupancy byte is the OR of child octants in the run.
    let mut levels: Vec<Vec<u8>> = Vec::with_capacity(LEVELS);
    for level in 0..LEVELS {
        let mut bytes = Vec::new();
        let mut prev_prefix: Option<u64> = None;
        for leaf in &leaves {
            let key = morton_key(leaf[0], leaf[1], leaf[2]);
            let prefix = key >> (3 * (LEVELS - level));
            let bit = 1u8 << octant(leaf[0], leaf[1], leaf[2], level);
            if prev_prefix == Some(prefix) {
                *bytes.last_mut().unwrap() |= bit;
            } else {
                bytes.push(bit);
                prev_prefix = Some(prefix);
            }
        }
        levels.push(bytes);
    }
    (levels, leaves, counts)
}

fn encode_octree(sorted: &[u16]) -> Vec<u8> {
    let (levels, leaves, counts) = octree_symbols(sorted);
    let n_unique = leaves.len();
    let has_dups = counts.iter().any(|&c| c > 1);

    let mut out = Vec::new();
    out.push(u8::from(has_dups));
    out.extend_from_slice(&(n_unique as u32).to_le_bytes());

    // Per-level alphabet + quantized frequency table, then one range-coded
    // blob over all levels' occupancy bytes.
    let mut enc = RangeEncoder::new();
    let mut tables = Vec::new();
    for bytes in &levels {
        let mut hist = [0u64; 256];
        for &b in bytes {
            hist[b as usize] += 1;
        }
        let alphabet: Vec<u8> = (0..256).filter(|&s| hist[s] > 0).map(|s| s as u8).collect();
        tables.extend_from_slice(&(alphabet.len() as u16).to_le_bytes());
        tables.extend_from_slice(&alphabet);
        if alphabet.len() >= 2 {
            let total = bytes.len() as f64;
            let pmf: Vec<f64> = alphabet.iter().map(|&s| hist[s as usize] as f64 / total).collect();
            let cdf = quantize_pmf(&pmf, 0).expect("level pmf quantizes");
            for s in 0..alphabet.len() as i32 {
                let f = cdf.cum[s as usize + 1] - cdf.cum[s as usize];
                tables.extend_from_slice(&(f as u16).to_le_bytes());
            }
            let to_sym: Vec<i32> = {
                let mut m = vec![0i32; 256];
                for (k, &s) in alphabet.iter().enumerate() {
                    m[s as usize] = k as i32;
                }
                m
            };
            for &b in bytes {
                enc.encode_symbol(&cdf, to_sym[b as usize]).expect("in-window occupancy");
            }
        }
        // Single-symbol levels need no coded bits: the decoder replicates.
    }
    out.extend_from_slice(&tables);
    let body = enc.finish();
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    if has_dups {
        for &c in &counts {
            write_varint(&mut out, c - 1);
        }
    }
    out
}

fn decode_octree(buf: &[u8], bbox: &SceneBBox, expected: usize) -> Result<QuantizedPositions> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Truncated("position section is short".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let has_dups = take(&mut pos, 1)?[0] != 0;
    let n_unique = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if n_unique == 0 || n_unique > expected {
        return Err(Error::Corruption(format!("octree leaf count {n_unique} is invalid")));
    }

    struct LevelTable {
        alphabet: Vec<u8>,
        cdf: Option<crate::coder::QuantizedCdf>,
    }
    let mut tables = Vec::with_capacity(LEVELS);
    for _ in 0..LEVELS {
        let len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        if len == 0 || len > 256 {
            return Err(Error::Corruption(format!("occupancy alphabet size {len}")));
        }
        let alphabet = take(&mut pos, len)?.to_vec();
        if alphabet.contains(&0) {
            return Err(Error::Corruption("occupancy byte 0 at internal node".into()));
        }
        let cdf = if len >= 2 {
            let mut cum = vec![0u32];
            for raw in take(&mut pos, len * 2)?.chunks_exact(2) {
                let f = u16::from_le_bytes(raw.try_into().unwrap()) as u32;
                if f == 0 {
                    return Err(Error::Corruption("zero frequency in occupancy table".into()));
                }
                cum.push(cum.last().unwrap() + f);
            }
            if *cum.last().unwrap() != crate::coder::PMF_TOTAL {
                return Err(Error::Corruption("occupancy table does not sum to 2^16".into()));
            }
            Some(crate::coder::QuantizedCdf { lo: 0, cum })
        } else {
            None
        };
        tables.push(LevelTable { alphabet, cdf });
    }
    let body_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let body = take(&mut pos, body_len)?;
    let mut dec = RangeDecoder::new(body);

    // Reconstruct keys level by level: each node expands into its set
    // children, keeping Morton order.
    let mut prefixes: Vec<u64> = vec![0];
    for table in &tables {
        let mut next = Vec::with_capacity(prefixes.len() * 2);
        for &p in &prefixes {
            let occ = match &table.cdf {
                Some(cdf) => {
                    let sym = dec.decode_symbol(cdf)? as usize;
                    table.alphabet[sym]
                }
                None => table.alphabet[0],
            };
            for child in 0..8u64 {
                if occ >> child & 1 == 1 {
                    next.push((p << 3) | child);
                }
            }
            if next.len() > n_unique {
                return Err(Error::Corruption("octree expands past its leaf count".into()));
            }
        }
        prefixes = next;
    }
    if prefixes.len() != n_unique {
        return Err(Error::Corruption(format!(
            "octree decoded {} leaves, header says {n_unique}",
            prefixes.len()
        )));
    }

    let mut indices = Vec::with_capacity(expected * 3);
    let mut total = 0usize;
    for &key in &prefixes {
        let count = if has_dups { read_varint(buf, &mut pos)? as usize + 1 } else { 1 };
        total += count;
        if total > expected {
            return Err(Error::Corruption("duplicate counts exceed point count".into()));
        }
        let mut ix = 0u16;
        let mut iy = 0u16;
        let mut iz = 0u16;
        for b in 0..LEVELS {
            ix |= (((key >> (3 * b + 2)) & 1) as u16) << b;
            iy |= (((key >> (3 * b + 1)) & 1) as u16) << b;
            iz |= (((key >> (3 * b)) & 1) as u16) << b;
        }
        for _ in 0..count {
            indices.extend_from_slice(&[ix, iy, iz]);
        }
    }
    if total != expected {
        return Err(Error::Corruption(format!(
            "position section decodes {total} points, header says {expected}"
        )));
    }
    if pos != buf.len() {
        return Err(Error::Corruption("trailing bytes in position section".into()));
    }
    Ok(QuantizedPositions { indices, bbox: bbox.clone() })
}

/// Encode Morton-sorted quantized positions. Picks the octree body unless
/// raw 48-bit packing is smaller, so the section never exceeds 48 bits per
/// point plus the mode byte.
pub fn encode_positions(qp: &QuantizedPositions) -> Vec<u8> {
    debug_assert!(
        qp.indices
            .chunks_exact(3)
            .map(|r| morton_key(r[0], r[1], r[2]))
            .zip(qp.indices.chunks_exact(3).skip(1).map(|r| morton_key(r[0], r[1], r[2])))
            .all(|(a, b)| a <= b),
        "positions must be Morton-sorted before encoding"
    );
    let octree = encode_octree(&qp.indices);
    let raw_len = qp.indices.len() * 2;
    let mut out = Vec::with_capacity(octree.len().min(raw_len) + 1);
    if octree.len() <= raw_len {
        out.push(MODE_OCTREE);
        out.extend_from_slice(&octree);
    } else {
        out.push(MODE_RAW);
        for &v in &qp.indices {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_positions(buf: &[u8], bbox: &SceneBBox, expected: usize) -> Result<QuantizedPositions> {
    let (&mode, body) = buf
        .split_first()
        .ok_or_else(|| Error::Truncated("empty position section".into()))?;
    match mode {
        MODE_OCTREE => decode_octree(body, bbox, expected),
        MODE_RAW => {
            if body.len() != expected * 6 {
                return Err(Error::Truncated(format!(
                    "raw position section holds {} bytes, expected {}",
                    body.len(),
                    expected * 6
                )));
            }
            let indices = body
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(QuantizedPositions { indices, bbox: bbox.clone() })
        }
        _ => Err(Error::Corruption(format!("unknown position mode byte {mode}"))),
    }
}
