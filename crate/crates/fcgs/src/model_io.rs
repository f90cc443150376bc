//! Parsing, validation and re-serialization of 3DGS scenes in the de-facto
//! binary PLY layout, plus the canonical attribute partition.
//!
//! The on-disk layout is the one emitted by the reference 3DGS exporter:
//! `x,y,z, nx,ny,nz, f_dc_0..2, f_rest_0..44, opacity, scale_0..2, rot_0..3`
//! (62 little-endian `float` scalars per vertex). See `docs/ply-layout.md`.

use crate::error::{Error, Result};

/// Geometry attributes per Gaussian: opacity (raw), 3 scale (raw), 4 rotation.
pub const GEO_DIM: usize = 8;
/// Color attributes per Gaussian: 48 SH coefficients (degree 3, 16 per channel).
pub const COL_DIM: usize = 48;
/// Concatenated attribute width.
pub const GAU_DIM: usize = GEO_DIM + COL_DIM;

const DISK_STRIDE: usize = 62; // with normals
const DISK_STRIDE_NO_NORMALS: usize = 59;

/// A 3DGS scene held in memory. Attributes are stored pre-activation, exactly
/// as they appear on disk (widened from f32 to f64). Row-major flat storage.
///
/// `f_geo` column order: opacity, scale_0..2, rot_0..3.
/// `f_col` column order is component-major: for color component `i` in 0..3
/// the 16 coefficients are `[f_dc_i, f_rest_{15i} .. f_rest_{15i+14}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub count: usize,
    pub positions: Vec<f64>, // count * 3
    pub f_geo: Vec<f64>,     // count * 8
    pub f_col: Vec<f64>,     // count * 48
}

impl GaussianCloud {
    pub fn new(positions: Vec<f64>, f_geo: Vec<f64>, f_col: Vec<f64>) -> Result<Self> {
        let count = positions.len() / 3;
        if count == 0 {
            return Err(Error::Format("cloud must contain at least one Gaussian".into()));
        }
        if positions.len() != count * 3 || f_geo.len() != count * GEO_DIM || f_col.len() != count * COL_DIM {
            return Err(Error::Shape(format!(
                "inconsistent cloud arrays: positions {}, f_geo {}, f_col {}",
                positions.len(),
                f_geo.len(),
                f_col.len()
            )));
        }
        let cloud = GaussianCloud { count, positions, f_geo, f_col };
        cloud.validate_finite()?;
        Ok(cloud)
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        [self.positions[3 * i], self.positions[3 * i + 1], self.positions[3 * i + 2]]
    }

    pub fn geo_row(&self, i: usize) -> &[f64] {
        &self.f_geo[i * GEO_DIM..(i + 1) * GEO_DIM]
    }

    pub fn col_row(&self, i: usize) -> &[f64] {
        &self.f_col[i * COL_DIM..(i + 1) * COL_DIM]
    }

    /// Concatenated `[f_geo | f_col]` row, the MEM mask network input.
    pub fn gau_row(&self, i: usize) -> [f64; GAU_DIM] {
        let mut out = [0.0; GAU_DIM];
        out[..GEO_DIM].copy_from_slice(self.geo_row(i));
        out[GEO_DIM..].copy_from_slice(self.col_row(i));
        out
    }

    fn validate_finite(&self) -> Result<()> {
        for i in 0..self.count {
            let ok = self.position(i).iter().all(|v| v.is_finite())
                && self.geo_row(i).iter().all(|v| v.is_finite())
                && self.col_row(i).iter().all(|v| v.is_finite());
            if !ok {
                return Err(Error::Format(format!("non-finite value in Gaussian {i}")));
            }
        }
        Ok(())
    }
}

/// Axis-aligned scene bounds used for 16-bit coordinate quantization and
/// grid normalization. Degenerate extents are padded so every axis has
/// strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Padding applied to collapsed bbox axes.
pub const BBOX_EPSILON: f64 = 1e-6;

impl SceneBBox {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }
}

/// Componentwise min/max over positions, with degenerate axes padded to
/// `BBOX_EPSILON` extent.
pub fn compute_bbox(cloud: &GaussianCloud) -> SceneBBox {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for i in 0..cloud.count {
        let p = cloud.position(i);
        for d in 0..3 {
            min[d] = min[d].min(p[d]);
            max[d] = max[d].max(p[d]);
        }
    }
    for d in 0..3 {
        if max[d] - min[d] < BBOX_EPSILON {
            max[d] = min[d] + BBOX_EPSILON;
        }
    }
    SceneBBox { min, max }
}

fn property_names() -> Vec<String> {
    let mut names = vec!["x".into(), "y".into(), "z".into()];
    names.extend(["nx".into(), "ny".into(), "nz".into()]);
    for i in 0..3 {
        names.push(format!("f_dc_{i}"));
    }
    for i in 0..45 {
        names.push(format!("f_rest_{i}"));
    }
    names.push("opacity".into());
    for i in 0..3 {
        names.push(format!("scale_{i}"));
    }
    for i in 0..4 {
        names.push(format!("rot_{i}"));
    }
    names
}

/// Parse a binary little-endian PLY in the reference 3DGS layout.
/// The normal fields, if present, are discarded.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let (count, has_normals, body_offset) = parse_header(bytes)?;
    if count == 0 {
        return Err(Error::Format("element vertex count is 0".into()));
    }
    let stride = if has_normals { DISK_STRIDE } else { DISK_STRIDE_NO_NORMALS };
    let need = count * stride * 4;
    let body = &bytes[body_offset..];
    if body.len() < need {
        return Err(Error::Truncated(format!(
            "body holds {} bytes, {} vertices of {} floats need {}",
            body.len(),
            count,
            stride,
            need
        )));
    }

    let mut positions = Vec::with_capacity(count * 3);
    let mut f_geo = Vec::with_capacity(count * GEO_DIM);
    let mut f_col = Vec::with_capacity(count * COL_DIM);
    let mut row = vec![0.0f64; stride];
    for i in 0..count {
        let base = i * stride * 4;
        for (j, slot) in row.iter_mut().enumerate() {
            let off = base + j * 4;
            let v = f32::from_le_bytes([body[off], body[off + 1], body[off + 2], body[off + 3]]);
            *slot = v as f64;
        }
        let attrs = &row[..];
        // Column indices relative to the start of the row.
        let (dc0, rest0, op, sc0, rot0) = if has_normals {
            (6, 9, 54, 55, 58)
        } else {
            (3, 6, 51, 52, 55)
        };
        positions.extend_from_slice(&attrs[0..3]);
        f_geo.push(attrs[op]);
        f_geo.extend_from_slice(&attrs[sc0..sc0 + 3]);
        f_geo.extend_from_slice(&attrs[rot0..rot0 + 4]);
        for c in 0..3 {
            f_col.push(attrs[dc0 + c]);
            for t in 0..15 {
                f_col.push(attrs[rest0 + 15 * c + t]);
            }
        }
        let all_finite = attrs.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Format(format!("non-finite value in vertex {i}")));
        }
    }
    GaussianCloud::new(positions, f_geo, f_col)
}

fn parse_header(bytes: &[u8]) -> Result<(usize, bool, usize)> {
    let mut offset = 0usize;
    let mut lines: Vec<(String, usize)> = Vec::new();
    loop {
        let rest = &bytes[offset..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("header not terminated by end_header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Format("header contains non-UTF-8 bytes".into()))?
            .trim_end_matches('\r')
            .to_string();
        offset += nl + 1;
        let done = line == "end_header";
        lines.push((line, offset));
        if done {
            break;
        }
        if offset >= bytes.len() {
            return Err(Error::Format("header not terminated by end_header".into()));
        }
    }
    let body_offset = offset;

    let mut iter = lines.iter().map(|(l, _)| l.as_str()).peekable();
    if iter.next() != Some("ply") {
        return Err(Error::Format("first header line must be 'ply'".into()));
    }
    let fmt = iter
        .next()
        .ok_or_else(|| Error::Format("missing format line".into()))?;
    if fmt != "format binary_little_endian 1.0" {
        return Err(Error::Format(format!("unsupported format line: '{fmt}'")));
    }

    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in iter {
        if line.starts_with("comment ") || line == "end_header" {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().unwrap_or("");
            if name != "vertex" || count.is_some() {
                return Err(Error::Format(format!("unsupported element line: '{line}'")));
            }
            let n: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad element count in line: '{line}'")))?;
            count = Some(n);
        } else if let Some(rest) = line.strip_prefix("property ") {
            let mut parts = rest.split_whitespace();
            let ty = parts.next().unwrap_or("");
            let name = parts.next().unwrap_or("");
            if ty != "float" {
                return Err(Error::Format(format!("unsupported property type in line: '{line}'")));
            }
            props.push(name.to_string());
        } else {
            return Err(Error::Format(format!("unrecognized header line: '{line}'")));
        }
    }
    let count = count.ok_or_else(|| Error::Format("missing 'element vertex' line".into()))?;

    let with_normals = property_names();
    let without_normals: Vec<String> = with_normals
        .iter()
        .filter(|n| !matches!(n.as_str(), "nx" | "ny" | "nz"))
        .cloned()
        .collect();
    if props == with_normals {
        Ok((count, true, body_offset))
    } else if props == without_normals {
        Ok((count, false, body_offset))
    } else {
        // Report the missing names if it is a pure omission, otherwise a
        // layout mismatch.
        let missing: Vec<String> = without_normals
            .iter()
            .filter(|n| !props.iter().any(|p| p == *n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            Err(Error::MissingProperties(missing))
        } else {
            Err(Error::Format(format!(
                "property layout does not match the reference 3DGS exporter (got {} properties)",
                props.len()
            )))
        }
    }
}

/// Serialize a cloud back to the canonical binary PLY layout. Normals are
/// emitted as zeros. Attribute scalars are narrowed to f32.
pub fn write_ply(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(256 + cloud.count * DISK_STRIDE * 4);
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", cloud.count).as_bytes());
    for name in property_names() {
        out.extend_from_slice(format!("property float {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");

    let mut row = [0.0f64; DISK_STRIDE];
    for i in 0..cloud.count {
        let p = cloud.position(i);
        row[0..3].copy_from_slice(&p);
        row[3..6].copy_from_slice(&[0.0, 0.0, 0.0]);
        let geo = cloud.geo_row(i);
        let col = cloud.col_row(i);
        for c in 0..3 {
            row[6 + c] = col[16 * c];
            for t in 0..15 {
                row[9 + 15 * c + t] = col[16 * c + 1 + t];
            }
        }
        row[54] = geo[0];
        row[55..58].copy_from_slice(&geo[1..4]);
        row[58..62].copy_from_slice(&geo[4..8]);
        for v in row.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i });
            }
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cloud(n: usize, seed: u64) -> GaussianCloud {
        // Cheap deterministic values, f32-exact so PLY round trips bitwise.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            ((state >> 11) as f32 / (1u64 << 53) as f32 * 4.0 - 2.0) as f64
        };
        let positions = (0..n * 3).map(|_| next()).collect();
        let f_geo = (0..n * GEO_DIM).map(|_| next()).collect();
        let f_col = (0..n * COL_DIM).map(|_| next()).collect();
        GaussianCloud::new(positions, f_geo, f_col).unwrap()
    }

    #[test]
    fn two_gaussian_round_trip() {
        let cloud = toy_cloud(2, 7);
        let bytes = write_ply(&cloud).unwrap();
        let back = parse_ply(&bytes).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn write_parse_write_is_byte_identical() {
        let cloud = toy_cloud(50, 3);
        let bytes = write_ply(&cloud).unwrap();
        let bytes2 = write_ply(&parse_ply(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn reference_style_file_without_normals_parses() {
        let cloud = toy_cloud(4, 11);
        let with = write_ply(&cloud).unwrap();
        // Strip the normal properties from header and body.
        let header_end = with.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let header = String::from_utf8(with[..header_end].to_vec()).unwrap();
        let header: String = header
            .lines()
            .filter(|l| !matches!(*l, "property float nx" | "property float ny" | "property float nz"))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut bytes = header.into_bytes();
        for i in 0..4 {
            let row = &with[header_end + i * 62 * 4..header_end + (i + 1) * 62 * 4];
            bytes.extend_from_slice(&row[..12]); // x,y,z
            bytes.extend_from_slice(&row[24..]); // skip normals
        }
        let parsed = parse_ply(&bytes).unwrap();
        assert_eq!(parsed, cloud);
    }

    #[test]
    fn missing_property_lists_name() {
        let cloud = toy_cloud(1, 1);
        let bytes = write_ply(&cloud).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let text = String::from_utf8(bytes[..header_end].to_vec()).unwrap();
        let patched = text.replace("property float f_rest_44\n", "");
        let mut out = patched.into_bytes();
        out.extend_from_slice(&bytes[header_end..]);
        match parse_ply(&out) {
            Err(Error::MissingProperties(names)) => assert_eq!(names, vec!["f_rest_44".to_string()]),
            other => panic!("expected MissingProperties, got {other:?}"),
        }
    }

    #[test]
    fn truncated_body_is_reported() {
        let cloud = toy_cloud(3, 2);
        let mut bytes = write_ply(&cloud).unwrap();
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(parse_ply(&bytes), Err(Error::Truncated(_))));
    }

    #[test]
    fn malformed_header_names_line() {
        let err = parse_ply(b"ply\nformat ascii 1.0\nend_header\n").unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("format ascii 1.0")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn single_zero_cloud_has_documented_length() {
        let cloud = GaussianCloud::new(vec![0.0; 3], vec![0.0; 8], vec![0.0; 48]).unwrap();
        let bytes = write_ply(&cloud).unwrap();
        let header_len = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(bytes.len(), header_len + 62 * 4);
    }

    #[test]
    fn bbox_matches_scan_and_pads_degenerate_axes() {
        let single = GaussianCloud::new(vec![1.0, 2.0, 3.0], vec![0.0; 8], vec![0.0; 48]).unwrap();
        let bb = compute_bbox(&single);
        assert_eq!(bb.min, [1.0, 2.0, 3.0]);
        for d in 0..3 {
            assert!((bb.extent()[d] - BBOX_EPSILON).abs() < 1e-12);
        }

        let cloud = toy_cloud(10_000, 5);
        let bb = compute_bbox(&cloud);
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for i in 0..cloud.count {
            for d in 0..3 {
                min[d] = min[d].min(cloud.position(i)[d]);
                max[d] = max[d].max(cloud.position(i)[d]);
            }
        }
        assert_eq!(bb.min, min);
        assert_eq!(bb.max, max);
    }

    #[test]
    fn two_point_bbox() {
        let cloud = GaussianCloud::new(
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            vec![0.0; 16],
            vec![0.0; 96],
        )
        .unwrap();
        let bb = compute_bbox(&cloud);
        assert_eq!(bb.min, [0.0; 3]);
        assert_eq!(bb.max, [1.0; 3]);
    }
}
