//! End-to-end drivers: chunked encode / decode / rate estimation / stream
//! inspection, plus the single-precision inference engine they share.
//!
//! The engine recomputes every distribution parameter identically on the
//! encoder and decoder side (same block sizes, same accumulation order), so
//! coded symbols stay in sync by construction.

use std::time::Instant;

use ndarray::{linalg::general_mat_mul, s, Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;

use crate::coder::{
    decode_mask_bits, encode_mask_bits, quantize_pmf_into, PmfScratch, QuantizedCdf, RangeDecoder,
    RangeEncoder, PMF_TOTAL,
};
use crate::container::{
    check_fingerprint, read_container, write_container, Container, ContainerHeader, SectionId,
    SectionKind, CONTAINER_VERSION, DEFAULT_CHUNK_SIZE, PROFILE_DEFAULT,
};
use crate::context::{activate_sigma, split_batches, PLANE_AXES};
use crate::entropy::{mix_pmf_into, MixComponent, Z_BOUND};
use crate::error::{Error, Result};
use crate::geom::{
    decode_positions, encode_positions, morton_order, quantize_positions, QuantizedPositions,
};
use crate::model_io::{compute_bbox, GaussianCloud, SceneBBox, COL_DIM, GAU_DIM, GEO_DIM};
use crate::neural::{
    compute_masks, Activation, ModelWeights, StreamKind, StreamSpec, SYMBOL_BOUND,
};

/// Rows processed per inner block; fixed so encoder and decoder share the
/// exact same floating-point evaluation order.
const BLOCK_ROWS: usize = 8192;

/// Coding-window half width in units of the largest source sigma.
const WINDOW_SIGMAS: f64 = 16.0;

/// Clamp-event fraction above which the CLI warns.
pub const WARN_CLAMP_FRACTION: f64 = 1e-4;

/// Byte overhead assumed per estimated latent section (coder flush slack).
const EST_SECTION_OVERHEAD: u64 = 5;

#[derive(Debug, Clone)]
pub struct CodecOptions {
    pub seed: u64,
    pub chunk_size: u64,
    /// Worker threads for chunk-level parallelism; 0 = automatic.
    pub workers: usize,
}

impl Default for CodecOptions {
    fn default() -> Self {
        CodecOptions { seed: 0, chunk_size: DEFAULT_CHUNK_SIZE, workers: 0 }
    }
}

pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-chunk batch-split seed, derived so chunks draw independent streams.
pub fn chunk_seed(seed: u64, chunk_index: u64) -> u64 {
    splitmix64(seed.wrapping_add(chunk_index))
}

/// Coded symbols captured during a pass, in Morton order; `yhat`/`zhat` hold
/// one flattened row per participating Gaussian of each stream.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub masks: Vec<bool>,
    pub yhat: [Vec<i16>; 3],
    pub zhat: [Vec<i16>; 3],
}

/// Everything a re-encode needs to reproduce the original file byte for
/// byte: masks and transform-side latents are not recoverable from the
/// reconstructed attributes alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ReencodeHints {
    pub bbox: SceneBBox,
    pub clamp_events: u64,
    pub trace: Trace,
}

#[derive(Debug)]
pub struct EncodeOutput {
    pub bytes: Vec<u8>,
    pub report: RateReport,
    pub hints: ReencodeHints,
}

#[derive(Debug)]
pub struct DecodeOutput {
    pub cloud: GaussianCloud,
    pub hints: ReencodeHints,
    /// Unrecognized trailing bytes tolerated in the container.
    pub trailing: usize,
}

/// Component byte sizes in the shape of the usual storage breakdown:
/// coordinates, masks, geometry attributes, both color paths, and framing.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub n: u64,
    pub positions_bytes: u64,
    pub masks_bytes: u64,
    pub geo_bytes: u64,
    pub col_m0_bytes: u64,
    pub col_m1_bytes: u64,
    pub header_bytes: u64,
    pub total_bytes: u64,
    pub mask_rate: f64,
    pub positions_bits_per_point: f64,
    pub coded_symbols: u64,
    pub clamp_events: u64,
    pub timings_secs: Vec<(String, f64)>,
}

impl RateReport {
    pub fn component_sum(&self) -> u64 {
        self.positions_bytes
            + self.masks_bytes
            + self.geo_bytes
            + self.col_m0_bytes
            + self.col_m1_bytes
            + self.header_bytes
    }

    pub fn clamp_fraction(&self) -> f64 {
        if self.coded_symbols == 0 {
            0.0
        } else {
            self.clamp_events as f64 / self.coded_symbols as f64
        }
    }

    /// Sizes of the attribute payload only (everything but positions, masks
    /// and framing).
    pub fn attribute_bytes(&self) -> u64 {
        self.geo_bytes + self.col_m0_bytes + self.col_m1_bytes
    }
}

#[inline]
fn act_f32(a: Activation, x: f32) -> f32 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
        _ => a.apply(x as f64) as f32,
    }
}

/// One MLP materialized in f32 for block inference.
struct MlpF32 {
    layers: Vec<(Array2<f32>, Array1<f32>, Activation)>,
}

impl MlpF32 {
    /// Layers `[from..]` of the named network.
    fn from_weights(w: &ModelWeights, name: &str, from: usize) -> Result<Self> {
        let net = w
            .meta
            .nets
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Weights(format!("unknown network {name}")))?;
        let mut layers = Vec::new();
        for (li, layer) in net.layers.iter().enumerate().skip(from) {
            let wt = w.tensor(&format!("{name}.w{li}"))?;
            let bt = w.tensor(&format!("{name}.b{li}"))?;
            let wm = Array2::from_shape_vec((layer.out_dim, layer.in_dim), wt.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            layers.push((wm, Array1::from_vec(bt.data.clone()), layer.activation));
        }
        Ok(MlpF32 { layers })
    }

    fn forward(&self, input: Array2<f32>) -> Array2<f32> {
        let mut cur = input;
        for (wm, b, act) in &self.layers {
            let mut next = cur.dot(&wm.t());
            next += b;
            if *act != Activation::Identity {
                next.mapv_inplace(|v| act_f32(*act, v));
            }
            cur = next;
        }
        cur
    }
}

/// Inference state for one stream: transforms, the split first layer of the
/// inter head (grid part per channel group + embedding part), the intra
/// head, and coder-ready prior tables.
struct StreamEngine {
    spec: StreamSpec,
    step: Vec<f64>,
    step32: Vec<f32>,
    g_a: Option<MlpF32>,
    g_s: Option<MlpF32>,
    h_a: MlpF32,
    h_s: MlpF32,
    /// Per channel group g: first-layer columns for grid slots of channels
    /// `[g*gw, (g+1)*gw)` across all 12 grids, shape `[h1, 12*gw]`.
    s1_grid: Vec<Array2<f32>>,
    s1_emb: Array2<f32>,
    s1_bias: Array1<f32>,
    s1_act: Activation,
    s_tail: MlpF32,
    c_w1: Option<Array2<f32>>,
    c_b1: Option<Array1<f32>>,
    c_act1: Activation,
    c_tail: Option<MlpF32>,
    c0: Option<(Vec<f32>, Vec<f32>, Vec<f32>)>,
    prior: Vec<QuantizedCdf>,
    gw: usize,
    n_groups: usize,
}

/// Largest channel-group width: bounds grid memory for wide streams.
const MAX_GROUP_WIDTH: usize = 64;

fn group_width(y_dim: usize) -> usize {
    (1..=MAX_GROUP_WIDTH.min(y_dim)).rev().find(|g| y_dim % g == 0).unwrap_or(1)
}

impl StreamEngine {
    fn new(w: &ModelWeights, kind: StreamKind, embed_freqs: usize) -> Result<Self> {
        let spec = w.stream(kind).clone();
        let step = w.steps(&spec)?;
        let step32: Vec<f32> = step.iter().map(|&q| q as f32).collect();
        let y = spec.y_dim;
        let gw = group_width(y);
        let n_groups = y / gw;
        let embw = 6 * embed_freqs;

        let s_name = spec.net("mlp_s");
        let net = w
            .meta
            .nets
            .iter()
            .find(|n| n.name == s_name)
            .ok_or_else(|| Error::Weights(format!("unknown network {s_name}")))?;
        let l0 = &net.layers[0];
        if l0.in_dim != 12 * y + embw {
            return Err(Error::Shape(format!(
                "{s_name} input width {} != {}",
                l0.in_dim,
                12 * y + embw
            )));
        }
        let w0 = w.tensor(&format!("{s_name}.w0"))?;
        let h1 = l0.out_dim;
        let mut s1_grid = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let mut m = Array2::<f32>::zeros((h1, 12 * gw));
            for o in 0..h1 {
                for grid in 0..12 {
                    for k in 0..gw {
                        m[[o, grid * gw + k]] = w0.data[o * l0.in_dim + grid * y + g * gw + k];
                    }
                }
            }
            s1_grid.push(m);
        }
        let mut s1_emb = Array2::<f32>::zeros((h1, embw));
        for o in 0..h1 {
            for k in 0..embw {
                s1_emb[[o, k]] = w0.data[o * l0.in_dim + 12 * y + k];
            }
        }
        let s1_bias = Array1::from_vec(w.tensor(&format!("{s_name}.b0"))?.data.clone());

        let color = kind != StreamKind::Geo;
        let (c_w1, c_b1, c_act1, c_tail, c0) = if color {
            let c_name = spec.net("mlp_c");
            let cnet = w
                .meta
                .nets
                .iter()
                .find(|n| n.name == c_name)
                .ok_or_else(|| Error::Weights(format!("unknown network {c_name}")))?;
            let cl0 = &cnet.layers[0];
            let cw0 = w.tensor(&format!("{c_name}.w0"))?;
            let c_w1 = Array2::from_shape_vec((cl0.out_dim, cl0.in_dim), cw0.data.clone())
                .map_err(|e| Error::Shape(e.to_string()))?;
            let c_b1 = Array1::from_vec(w.tensor(&format!("{c_name}.b0"))?.data.clone());
            let (mu, sr, pi) = w.chunk0_fallback(&spec)?;
            let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
            (
                Some(c_w1),
                Some(c_b1),
                cl0.activation,
                Some(MlpF32::from_weights(w, &c_name, 1)?),
                Some((cast(mu), cast(sr), cast(pi))),
            )
        } else {
            (None, None, Activation::Identity, None, None)
        };

        let prior = (0..spec.z_dim).map(|ch| w.prior(kind).cdf(ch)).collect();

        Ok(StreamEngine {
            g_a: if spec.uses_transform { Some(MlpF32::from_weights(w, &spec.net("g_a"), 0)?) } else { None },
            g_s: if spec.uses_transform { Some(MlpF32::from_weights(w, &spec.net("g_s"), 0)?) } else { None },
            h_a: MlpF32::from_weights(w, &spec.net("h_a"), 0)?,
            h_s: MlpF32::from_weights(w, &spec.net("h_s"), 0)?,
            s_tail: MlpF32::from_weights(w, &s_name, 1)?,
            s1_act: l0.activation,
            spec,
            step,
            step32,
            s1_grid,
            s1_emb,
            s1_bias,
            c_w1,
            c_b1,
            c_act1,
            c_tail,
            c0,
            prior,
            gw,
            n_groups,
        })
    }
}

/// Dense voxel layout of the 12 context grids: 3D grids in resolution
/// order, then the xy/xz/yz planes each in resolution order.
#[derive(Debug, Clone, Copy)]
struct GridGeom {
    res: usize,
    axes: [usize; 3],
    ndim: usize,
    offset: usize,
}

fn grid_geoms(res_3d: &[usize; 3], res_2d: &[usize; 3]) -> (Vec<GridGeom>, usize) {
    let mut geoms = Vec::with_capacity(12);
    let mut offset = 0;
    for &r in res_3d {
        geoms.push(GridGeom { res: r, axes: [0, 1, 2], ndim: 3, offset });
        offset += r * r * r;
    }
    for axes in PLANE_AXES {
        for &r in res_2d {
            geoms.push(GridGeom { res: r, axes: [axes[0], axes[1], 0], ndim: 2, offset });
            offset += r * r;
        }
    }
    (geoms, offset)
}

/// Corner voxels and trilinear weights of one position in one grid; same
/// arithmetic as the reference grid implementation.
#[inline]
fn grid_corners(g: &GridGeom, pos: &[f64; 3], out: &mut [(usize, f64); 8]) -> usize {
    let d = g.ndim;
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for k in 0..d {
        let gp = pos[g.axes[k]] * (g.res - 1) as f64;
        let i0 = (gp.floor() as usize).min(g.res.saturating_sub(2));
        base[k] = i0;
        frac[k] = gp - i0 as f64;
    }
    let mut cnt = 0;
    for corner in 0..1usize << d {
        let mut w = 1.0;
        let mut idx = 0usize;
        for k in 0..d {
            let hi = (corner >> k) & 1;
            w *= if hi == 1 { frac[k] } else { 1.0 - frac[k] };
            idx = idx * g.res + base[k] + hi as usize;
        }
        if w > 0.0 {
            out[cnt] = (idx, w);
            cnt += 1;
        }
    }
    cnt
}

struct Engines {
    streams: [StreamEngine; 3],
    geoms: Vec<GridGeom>,
    total_voxels: usize,
    embed_freqs: usize,
}

impl Engines {
    fn new(w: &ModelWeights) -> Result<Self> {
        let (geoms, total_voxels) = grid_geoms(&w.meta.grid_res_3d, &w.meta.grid_res_2d);
        Ok(Engines {
            streams: [
                StreamEngine::new(w, StreamKind::Geo, w.meta.embed_freqs)?,
                StreamEngine::new(w, StreamKind::Col0, w.meta.embed_freqs)?,
                StreamEngine::new(w, StreamKind::Col1, w.meta.embed_freqs)?,
            ],
            geoms,
            total_voxels,
            embed_freqs: w.meta.embed_freqs,
        })
    }
}

#[derive(Default)]
struct PassScratch {
    feat: Vec<f32>,
    wsum: Vec<f32>,
    pmf: Vec<f64>,
    q: PmfScratch,
}

enum LatentIo<'e, 'b> {
    Encode(&'e mut [RangeEncoder]),
    Estimate(&'e mut [f64]),
    Decode(&'e mut [RangeDecoder<'b>]),
}

/// Intra-source parameters for one (block, part): either the stored chunk-0
/// fallback constants or a computed head output block.
enum CPar<'a> {
    None,
    Const(&'a (Vec<f32>, Vec<f32>, Vec<f32>)),
    Block(Array2<f32>),
}

#[inline]
fn pos3(positions_norm: &[f64], row: u32) -> [f64; 3] {
    let o = row as usize * 3;
    [positions_norm[o], positions_norm[o + 1], positions_norm[o + 2]]
}

fn fill_embedding(row: &mut [f32], pos: &[f64; 3], freqs: usize) {
    let mut o = 0;
    for &p in pos {
        for k in 0..freqs {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * p;
            row[o] = arg.sin() as f32;
            row[o + 1] = arg.cos() as f32;
            o += 2;
        }
    }
}

struct StreamPassCtx<'a> {
    se: &'a StreamEngine,
    geoms: &'a [GridGeom],
    total_voxels: usize,
    embed_freqs: usize,
    positions_norm: &'a [f64],
    rows: &'a [u32],
    batch_of: &'a [u8],
}

/// One (stream, batch) coding pass: build grids from earlier batches'
/// canonical latents, run the three parameter heads block by block, and
/// transfer symbols part by part through `io`.
fn stream_batch_pass(
    ctx: &StreamPassCtx<'_>,
    b: usize,
    yhat: &mut [i16],
    zhat: &[i16],
    io: &mut LatentIo<'_, '_>,
    clamp: &mut u64,
    scratch: &mut PassScratch,
) -> Result<()> {
    let se = ctx.se;
    let y = se.spec.y_dim;
    let z = se.spec.z_dim;
    let nc = se.spec.n_chunks;
    let cw = se.spec.chunk_width();
    let gw = se.gw;
    let geo = se.spec.kind == StreamKind::Geo;

    let ords: Vec<u32> = (0..ctx.rows.len() as u32)
        .filter(|&i| ctx.batch_of[ctx.rows[i as usize] as usize] == b as u8)
        .collect();
    if ords.is_empty() {
        return Ok(());
    }
    let include: Vec<u32> = (0..ctx.rows.len() as u32)
        .filter(|&i| ctx.batch_of[ctx.rows[i as usize] as usize] < b as u8)
        .collect();
    let nb = ords.len();
    let h1 = se.s1_bias.len();
    let embw = 6 * ctx.embed_freqs;

    let mut out1 = Array2::<f32>::zeros((nb, h1));
    let mut corner_buf = [(0usize, 0.0f64); 8];

    // Positional-embedding contribution to the first inter-head layer.
    let mut r0 = 0;
    while r0 < nb {
        let r1 = (r0 + BLOCK_ROWS).min(nb);
        let mut emb = Array2::<f32>::zeros((r1 - r0, embw));
        for (bi, &ord) in ords[r0..r1].iter().enumerate() {
            let pos = pos3(ctx.positions_norm, ctx.rows[ord as usize]);
            fill_embedding(emb.row_mut(bi).as_slice_mut().unwrap(), &pos, ctx.embed_freqs);
        }
        general_mat_mul(1.0, &emb.view(), &se.s1_emb.t(), 1.0, &mut out1.slice_mut(s![r0..r1, ..]));
        r0 = r1;
    }

    // Grid contribution, one channel group at a time so wide streams never
    // hold full-width grids.
    if !include.is_empty() {
        scratch.wsum.clear();
        scratch.wsum.resize(ctx.total_voxels, 0.0);
        for &i in &include {
            let pos = pos3(ctx.positions_norm, ctx.rows[i as usize]);
            for g in ctx.geoms {
                let cnt = grid_corners(g, &pos, &mut corner_buf);
                for &(v, w) in &corner_buf[..cnt] {
                    scratch.wsum[g.offset + v] += w as f32;
                }
            }
        }
        for group in 0..se.n_groups {
            scratch.feat.clear();
            scratch.feat.resize(ctx.total_voxels * gw, 0.0);
            let mut val = [0.0f32; MAX_GROUP_WIDTH];
            for &i in &include {
                let pos = pos3(ctx.positions_norm, ctx.rows[i as usize]);
                let base = i as usize * y + group * gw;
                for k in 0..gw {
                    val[k] = yhat[base + k] as f32 * se.step32[group * gw + k];
                }
                for g in ctx.geoms {
                    let cnt = grid_corners(g, &pos, &mut corner_buf);
                    for &(v, w) in &corner_buf[..cnt] {
                        let wf = w as f32;
                        let fo = (g.offset + v) * gw;
                        for k in 0..gw {
                            scratch.feat[fo + k] += wf * val[k];
                        }
                    }
                }
            }
            for v in 0..ctx.total_voxels {
                let ws = scratch.wsum[v];
                if ws > 0.0 {
                    let inv = 1.0 / ws;
                    for k in 0..gw {
                        scratch.feat[v * gw + k] *= inv;
                    }
                }
            }
            let mut r0 = 0;
            while r0 < nb {
                let r1 = (r0 + BLOCK_ROWS).min(nb);
                let mut interp = Array2::<f32>::zeros((r1 - r0, 12 * gw));
                for (bi, &ord) in ords[r0..r1].iter().enumerate() {
                    let pos = pos3(ctx.positions_norm, ctx.rows[ord as usize]);
                    let row = interp.row_mut(bi).into_slice().unwrap();
                    for (gi, g) in ctx.geoms.iter().enumerate() {
                        let seg = &mut row[gi * gw..(gi + 1) * gw];
                        let cnt = grid_corners(g, &pos, &mut corner_buf);
                        for &(v, w) in &corner_buf[..cnt] {
                            let wf = w as f32;
                            let fo = (g.offset + v) * gw;
                            for k in 0..gw {
                                seg[k] += wf * scratch.feat[fo + k];
                            }
                        }
                    }
                }
                general_mat_mul(
                    1.0,
                    &interp.view(),
                    &se.s1_grid[group].t(),
                    1.0,
                    &mut out1.slice_mut(s![r0..r1, ..]),
                );
                r0 = r1;
            }
        }
    }
    out1 += &se.s1_bias;

    // Parameter heads + symbol transfer, block by block, parts in order so
    // intra prefixes are canonical before they are consumed.
    let mut r0 = 0;
    while r0 < nb {
        let r1 = (r0 + BLOCK_ROWS).min(nb);
        let bk = r1 - r0;
        let mut a1 = out1.slice(s![r0..r1, ..]).to_owned();
        a1.mapv_inplace(|v| act_f32(se.s1_act, v));
        let s_out = se.s_tail.forward(a1);

        let mut zin = Array2::<f32>::zeros((bk, z));
        for (bi, &ord) in ords[r0..r1].iter().enumerate() {
            let base = ord as usize * z;
            for ch in 0..z {
                zin[[bi, ch]] = zhat[base + ch] as f32;
            }
        }
        let h_out = se.h_s.forward(zin);

        for p in 0..nc {
            let cpar = if geo {
                CPar::None
            } else if p == 0 {
                CPar::Const(se.c0.as_ref().unwrap())
            } else {
                let pw = p * cw;
                let mut prefix = Array2::<f32>::zeros((bk, pw));
                for (bi, &ord) in ords[r0..r1].iter().enumerate() {
                    let base = ord as usize * y;
                    for ch in 0..pw {
                        prefix[[bi, ch]] = yhat[base + ch] as f32 * se.step32[ch];
                    }
                }
                let c_w1 = se.c_w1.as_ref().unwrap();
                let mut first = prefix.dot(&c_w1.slice(s![.., ..pw]).t());
                let bias_eff = se.c_b1.as_ref().unwrap() + &c_w1.column(y + p);
                first += &bias_eff;
                if se.c_act1 != Activation::Identity {
                    first.mapv_inplace(|v| act_f32(se.c_act1, v));
                }
                CPar::Block(se.c_tail.as_ref().unwrap().forward(first))
            };

            for bi in 0..bk {
                let ord = ords[r0 + bi] as usize;
                for ch in 0..cw {
                    let c = p * cw + ch;
                    let q = se.step[c];
                    let mut comps = [MixComponent { mu: 0.0, sigma: 1.0, theta: 0.0 }; 3];
                    let mut pis = [0.0f64; 3];
                    let mut kn = 0;
                    let mut push = |mu: f32, sr: f32, pi: f32| {
                        comps[kn] = MixComponent {
                            mu: mu as f64,
                            sigma: activate_sigma(sr as f64),
                            theta: 0.0,
                        };
                        pis[kn] = pi as f64;
                        kn += 1;
                    };
                    push(h_out[[bi, c]], h_out[[bi, y + c]], h_out[[bi, 2 * y + c]]);
                    push(s_out[[bi, c]], s_out[[bi, y + c]], s_out[[bi, 2 * y + c]]);
                    match &cpar {
                        CPar::None => {}
                        CPar::Const((mu, sr, pi)) => push(mu[ch], sr[ch], pi[ch]),
                        CPar::Block(m) => push(m[[bi, ch]], m[[bi, cw + ch]], m[[bi, 2 * cw + ch]]),
                    }

                    let mx = pis[..kn].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut tot = 0.0;
                    for l in 0..kn {
                        let e = (pis[l] - mx).exp();
                        comps[l].theta = e;
                        tot += e;
                    }
                    for comp in &mut comps[..kn] {
                        comp.theta /= tot;
                    }

                    let mut mu_min = f64::INFINITY;
                    let mut mu_max = f64::NEG_INFINITY;
                    let mut smax = 0.0f64;
                    for comp in &comps[..kn] {
                        mu_min = mu_min.min(comp.mu);
                        mu_max = mu_max.max(comp.mu);
                        smax = smax.max(comp.sigma);
                    }
                    let bound = SYMBOL_BOUND as f64;
                    let lo = (((mu_min - WINDOW_SIGMAS * smax) / q).floor()).clamp(-bound, bound)
                        as i32;
                    let hi = (((mu_max + WINDOW_SIGMAS * smax) / q).ceil()).clamp(-bound, bound)
                        as i32;
                    let hi = hi.max(lo);
                    mix_pmf_into(&comps[..kn], lo, hi, q, &mut scratch.pmf);
                    quantize_pmf_into(&scratch.pmf, &mut scratch.q)?;

                    let slot = &mut yhat[ord * y + c];
                    match io {
                        LatentIo::Encode(encs) => {
                            let sym = *slot as i32;
                            let cl = sym.clamp(lo, hi);
                            if cl != sym {
                                *clamp += 1;
                                *slot = cl as i16;
                            }
                            encs[p].encode_with(lo, &scratch.q.cum, cl)?;
                        }
                        LatentIo::Estimate(bits) => {
                            let sym = *slot as i32;
                            let cl = sym.clamp(lo, hi);
                            if cl != sym {
                                *clamp += 1;
                                *slot = cl as i16;
                            }
                            let k = (cl - lo) as usize;
                            let pr = (scratch.q.cum[k + 1] - scratch.q.cum[k]) as f64
                                / PMF_TOTAL as f64;
                            bits[p] -= pr.log2();
                        }
                        LatentIo::Decode(decs) => {
                            *slot = decs[p].decode_with(lo, &scratch.q.cum)? as i16;
                        }
                    }
                }
            }
        }
        r0 = r1;
    }
    Ok(())
}

fn encode_hyper(se: &StreamEngine, zhat: &[i16]) -> Result<Vec<u8>> {
    let z = se.spec.z_dim;
    let mut enc = RangeEncoder::new();
    for (i, &sym) in zhat.iter().enumerate() {
        enc.encode_symbol(&se.prior[i % z], sym as i32)?;
    }
    Ok(enc.finish())
}

fn decode_hyper(se: &StreamEngine, bytes: &[u8], n_rows: usize) -> Result<Vec<i16>> {
    let z = se.spec.z_dim;
    let mut dec = RangeDecoder::new(bytes);
    let mut zhat = Vec::with_capacity(n_rows * z);
    for i in 0..n_rows * z {
        zhat.push(dec.decode_symbol(&se.prior[i % z])? as i16);
    }
    Ok(zhat)
}

/// Chunk-local slices of a re-encode hint trace.
struct HintSlices<'a> {
    masks: &'a [bool],
    yhat: [&'a [i16]; 3],
    zhat: [&'a [i16]; 3],
}

struct ChunkOutput {
    sections: Vec<(SectionId, Vec<u8>)>,
    /// Estimated latent section sizes (estimate mode only).
    latent_sizes: Vec<(SectionId, u64)>,
    masks: Vec<bool>,
    yhat: [Vec<i16>; 3],
    zhat: [Vec<i16>; 3],
    clamp_events: u64,
    coded_symbols: u64,
    timings: [f64; 4],
}

fn stream_rows(masks: &[bool], kind: StreamKind) -> Vec<u32> {
    match kind {
        StreamKind::Geo => (0..masks.len() as u32).collect(),
        StreamKind::Col0 => {
            (0..masks.len() as u32).filter(|&i| !masks[i as usize]).collect()
        }
        StreamKind::Col1 => (0..masks.len() as u32).filter(|&i| masks[i as usize]).collect(),
    }
}

/// Gather one block of a stream's input attributes as f32 rows.
fn gather_attr_f32(cloud: &GaussianCloud, order: &[u32], rows: &[u32], kind: StreamKind) -> Array2<f32> {
    let width = if kind == StreamKind::Geo { GEO_DIM } else { COL_DIM };
    let mut x = Array2::<f32>::zeros((rows.len(), width));
    for (bi, &r) in rows.iter().enumerate() {
        let orig = order[r as usize] as usize;
        let src = if kind == StreamKind::Geo { cloud.geo_row(orig) } else { cloud.col_row(orig) };
        for (k, &v) in src.iter().enumerate() {
            x[[bi, k]] = v as f32;
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn encode_chunk(
    w: &ModelWeights,
    eng: &Engines,
    cloud: &GaussianCloud,
    order: &[u32],
    indices: Vec<u16>,
    bbox: &SceneBBox,
    chunk_index: u32,
    seed: u64,
    hints: Option<&HintSlices<'_>>,
    estimate: bool,
) -> Result<ChunkOutput> {
    let n = order.len();
    let qp = QuantizedPositions { indices, bbox: *bbox };
    let mut clamp = 0u64;

    let t = Instant::now();
    let pos_bytes = encode_positions(&qp);
    let t_positions = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let masks: Vec<bool> = match hints {
        Some(h) => h.masks.to_vec(),
        None => {
            let mut bits = Vec::with_capacity(n);
            let mut r0 = 0;
            while r0 < n {
                let r1 = (r0 + BLOCK_ROWS).min(n);
                let mut f_gau = Array2::<f64>::zeros((r1 - r0, GAU_DIM));
                for (bi, r) in (r0..r1).enumerate() {
                    let orig = order[r] as usize;
                    let row = cloud.gau_row(orig);
                    for (k, &v) in row.iter().enumerate() {
                        f_gau[[bi, k]] = v;
                    }
                }
                bits.extend(compute_masks(w, f_gau.view())?.0);
                r0 = r1;
            }
            bits
        }
    };
    let mask_bytes = encode_mask_bits(&masks);
    let t_masks = t.elapsed().as_secs_f64();

    // Per-stream latent preparation: y (bypass or analysis transform),
    // quantization, and the hyper branch from unquantized y.
    let t = Instant::now();
    let positions_norm = qp.normalized();
    let mut yhat: [Vec<i16>; 3] = Default::default();
    let mut zhat: [Vec<i16>; 3] = Default::default();
    let mut rows_per: [Vec<u32>; 3] = Default::default();
    let mut hyper_sections: Vec<(SectionId, Vec<u8>)> = Vec::with_capacity(3);
    let mut coded_symbols = 0u64;
    for (si, kind) in StreamKind::ALL.into_iter().enumerate() {
        let se = &eng.streams[si];
        let rows = stream_rows(&masks, kind);
        let y = se.spec.y_dim;
        let z = se.spec.z_dim;
        coded_symbols += rows.len() as u64 * (y + z) as u64;
        let (yh, zh) = match hints {
            Some(h) => (h.yhat[si].to_vec(), h.zhat[si].to_vec()),
            None => {
                let mut yh = Vec::with_capacity(rows.len() * y);
                let mut zh = Vec::with_capacity(rows.len() * z);
                let mut r0 = 0;
                while r0 < rows.len() {
                    let r1 = (r0 + BLOCK_ROWS).min(rows.len());
                    let block = &rows[r0..r1];
                    let x = gather_attr_f32(cloud, order, block, kind);
                    let yb = match &se.g_a {
                        Some(g_a) => g_a.forward(x),
                        None => x,
                    };
                    if se.g_a.is_some() {
                        // Transform path: quantize the f32 analysis output.
                        for bi in 0..yb.nrows() {
                            for c in 0..y {
                                let r = (yb[[bi, c]] as f64 / se.step[c]).round();
                                let bound = SYMBOL_BOUND as f64;
                                if r > bound || r < -bound {
                                    clamp += 1;
                                }
                                yh.push(r.clamp(-bound, bound) as i16);
                            }
                        }
                    } else {
                        // Bypass path: quantize the original f64 attributes.
                        for &r in block {
                            let orig = order[r as usize] as usize;
                            let src = if kind == StreamKind::Geo {
                                cloud.geo_row(orig)
                            } else {
                                cloud.col_row(orig)
                            };
                            for (c, &v) in src.iter().enumerate() {
                                if !v.is_finite() {
                                    return Err(Error::NonFinite { row: orig });
                                }
                                let r = (v / se.step[c]).round();
                                let bound = SYMBOL_BOUND as f64;
                                if r > bound || r < -bound {
                                    clamp += 1;
                                }
                                yh.push(r.clamp(-bound, bound) as i16);
                            }
                        }
                    }
                    let zb = se.h_a.forward(yb);
                    for bi in 0..zb.nrows() {
                        for c in 0..z {
                            let r = (zb[[bi, c]] as f64).round();
                            let zb_ = Z_BOUND as f64;
                            if r > zb_ || r < -zb_ {
                                clamp += 1;
                            }
                            zh.push(r.clamp(-zb_, zb_) as i16);
                        }
                    }
                    r0 = r1;
                }
                (yh, zh)
            }
        };
        hyper_sections.push((SectionId::hyper(chunk_index, kind), encode_hyper(se, &zh)?));
        yhat[si] = yh;
        zhat[si] = zh;
        rows_per[si] = rows;
    }
    let t_hyper = t.elapsed().as_secs_f64();

    // Batch passes.
    let t = Instant::now();
    let assign = split_batches(n, chunk_seed(seed, chunk_index as u64));
    let mut latent_sections: Vec<(SectionId, Vec<u8>)> = Vec::new();
    let mut latent_sizes: Vec<(SectionId, u64)> = Vec::new();
    let mut scratch = PassScratch::default();
    for b in 0..crate::context::N_BATCHES {
        for (si, kind) in StreamKind::ALL.into_iter().enumerate() {
            let se = &eng.streams[si];
            let nc = se.spec.n_chunks;
            let ctx = StreamPassCtx {
                se,
                geoms: &eng.geoms,
                total_voxels: eng.total_voxels,
                embed_freqs: eng.embed_freqs,
                positions_norm: &positions_norm,
                rows: &rows_per[si],
                batch_of: &assign.batch_of,
            };
            if estimate {
                let mut bits = vec![0.0f64; nc];
                let mut io = LatentIo::Estimate(&mut bits);
                stream_batch_pass(&ctx, b, &mut yhat[si], &zhat[si], &mut io, &mut clamp, &mut scratch)?;
                for (p, &bi) in bits.iter().enumerate() {
                    let body = if bi > 0.0 { (bi / 8.0).ceil() as u64 + EST_SECTION_OVERHEAD } else { 0 };
                    latent_sizes.push((SectionId::latent(chunk_index, kind, b as u8, p as u8), body));
                }
            } else {
                let mut encs: Vec<RangeEncoder> = (0..nc).map(|_| RangeEncoder::new()).collect();
                let mut io = LatentIo::Encode(&mut encs);
                stream_batch_pass(&ctx, b, &mut yhat[si], &zhat[si], &mut io, &mut clamp, &mut scratch)?;
                for (p, enc) in encs.into_iter().enumerate() {
                    latent_sections
                        .push((SectionId::latent(chunk_index, kind, b as u8, p as u8), enc.finish()));
                }
            }
        }
    }
    let t_latents = t.elapsed().as_secs_f64();

    let mut sections = vec![
        (SectionId::positions(chunk_index), pos_bytes),
        (SectionId::masks(chunk_index), mask_bytes),
    ];
    sections.extend(hyper_sections);
    sections.extend(latent_sections);

    Ok(ChunkOutput {
        sections,
        latent_sizes,
        masks,
        yhat,
        zhat,
        clamp_events: clamp,
        coded_symbols,
        timings: [t_positions, t_masks, t_hyper, t_latents],
    })
}

struct DecChunk {
    positions: Vec<f64>,
    f_geo: Vec<f64>,
    f_col: Vec<f64>,
    masks: Vec<bool>,
    yhat: [Vec<i16>; 3],
    zhat: [Vec<i16>; 3],
}

fn decode_chunk(
    eng: &Engines,
    container: &Container,
    chunk_index: u32,
    n: usize,
    seed: u64,
) -> Result<DecChunk> {
    let qp = decode_positions(
        container.section(SectionId::positions(chunk_index))?,
        &container.header.bbox,
        n,
    )?;
    let masks = decode_mask_bits(container.section(SectionId::masks(chunk_index))?, n)?;
    let positions_norm = qp.normalized();

    let mut yhat: [Vec<i16>; 3] = Default::default();
    let mut zhat: [Vec<i16>; 3] = Default::default();
    let mut rows_per: [Vec<u32>; 3] = Default::default();
    for (si, kind) in StreamKind::ALL.into_iter().enumerate() {
        let se = &eng.streams[si];
        let rows = stream_rows(&masks, kind);
        zhat[si] = decode_hyper(se, container.section(SectionId::hyper(chunk_index, kind))?, rows.len())?;
        yhat[si] = vec![0i16; rows.len() * se.spec.y_dim];
        rows_per[si] = rows;
    }

    let assign = split_batches(n, chunk_seed(seed, chunk_index as u64));
    let mut scratch = PassScratch::default();
    let mut clamp = 0u64;
    for b in 0..crate::context::N_BATCHES {
        for (si, kind) in StreamKind::ALL.into_iter().enumerate() {
            let se = &eng.streams[si];
            let nc = se.spec.n_chunks;
            let mut decs = Vec::with_capacity(nc);
            for p in 0..nc {
                let body = container.section(SectionId::latent(chunk_index, kind, b as u8, p as u8))?;
                decs.push(RangeDecoder::new(body));
            }
            let ctx = StreamPassCtx {
                se,
                geoms: &eng.geoms,
                total_voxels: eng.total_voxels,
                embed_freqs: eng.embed_freqs,
                positions_norm: &positions_norm,
                rows: &rows_per[si],
                batch_of: &assign.batch_of,
            };
            let mut io = LatentIo::Decode(&mut decs);
            stream_batch_pass(&ctx, b, &mut yhat[si], &zhat[si], &mut io, &mut clamp, &mut scratch)?;
        }
    }

    // Attribute reconstruction.
    let mut f_geo = vec![0.0f64; n * GEO_DIM];
    let mut f_col = vec![0.0f64; n * COL_DIM];
    {
        let se = &eng.streams[0];
        for (ord, &r) in rows_per[0].iter().enumerate() {
            for c in 0..GEO_DIM {
                f_geo[r as usize * GEO_DIM + c] =
                    yhat[0][ord * GEO_DIM + c] as f64 * se.step[c];
            }
        }
    }
    {
        let se = &eng.streams[1];
        for (ord, &r) in rows_per[1].iter().enumerate() {
            for c in 0..COL_DIM {
                f_col[r as usize * COL_DIM + c] =
                    yhat[1][ord * COL_DIM + c] as f64 * se.step[c];
            }
        }
    }
    {
        let se = &eng.streams[2];
        let y = se.spec.y_dim;
        let g_s = se
            .g_s
            .as_ref()
            .ok_or_else(|| Error::Weights("COL1 stream is missing its synthesis transform".into()))?;
        let rows = &rows_per[2];
        let mut r0 = 0;
        while r0 < rows.len() {
            let r1 = (r0 + BLOCK_ROWS).min(rows.len());
            let mut yin = Array2::<f32>::zeros((r1 - r0, y));
            for (bi, ord) in (r0..r1).enumerate() {
                for c in 0..y {
                    yin[[bi, c]] = yhat[2][ord * y + c] as f32 * se.step32[c];
                }
            }
            let x = g_s.forward(yin);
            for (bi, ord) in (r0..r1).enumerate() {
                let r = rows[ord] as usize;
                for c in 0..COL_DIM {
                    f_col[r * COL_DIM + c] = x[[bi, c]] as f64;
                }
            }
            r0 = r1;
        }
    }

    Ok(DecChunk { positions: qp.dequantize(), f_geo, f_col, masks, yhat, zhat })
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(format!("worker pool: {e}"))))
}

fn chunk_ranges(n: usize, chunk_size: u64) -> Vec<(usize, usize)> {
    let cs = chunk_size.max(1) as usize;
    (0..n.div_ceil(cs)).map(|c| (c * cs, ((c + 1) * cs).min(n))).collect()
}

fn component_totals(report: &mut RateReport, id: &SectionId, len: u64) {
    match id.kind {
        SectionKind::Positions => report.positions_bytes += len,
        SectionKind::Masks => report.masks_bytes += len,
        SectionKind::Hyper | SectionKind::Latent => match id.stream {
            Some(StreamKind::Geo) => report.geo_bytes += len,
            Some(StreamKind::Col0) => report.col_m0_bytes += len,
            Some(StreamKind::Col1) => report.col_m1_bytes += len,
            None => report.header_bytes += len,
        },
    }
}

fn blank_report(n: u64) -> RateReport {
    RateReport {
        n,
        positions_bytes: 0,
        masks_bytes: 0,
        geo_bytes: 0,
        col_m0_bytes: 0,
        col_m1_bytes: 0,
        header_bytes: 0,
        total_bytes: 0,
        mask_rate: 0.0,
        positions_bits_per_point: 0.0,
        coded_symbols: 0,
        clamp_events: 0,
        timings_secs: Vec::new(),
    }
}

fn finalize_report(report: &mut RateReport) {
    report.total_bytes = report.component_sum();
    if report.n > 0 {
        report.positions_bits_per_point = report.positions_bytes as f64 * 8.0 / report.n as f64;
    }
}

/// Container header size plus one 16-byte table entry per section.
fn header_overhead(n_sections: usize) -> u64 {
    104 + 16 * n_sections as u64
}

fn hint_slices<'a>(
    hints: &'a ReencodeHints,
    ranges: &[(usize, usize)],
    specs: [&StreamSpec; 3],
) -> Vec<HintSlices<'a>> {
    let mut offs = [0usize; 3];
    let mut out = Vec::with_capacity(ranges.len());
    for &(start, end) in ranges {
        let masks = &hints.trace.masks[start..end];
        let counts = [
            masks.len(),
            masks.iter().filter(|&&m| !m).count(),
            masks.iter().filter(|&&m| m).count(),
        ];
        let mut yh: [&[i16]; 3] = [&[], &[], &[]];
        let mut zh: [&[i16]; 3] = [&[], &[], &[]];
        for s in 0..3 {
            let (y, z) = (specs[s].y_dim, specs[s].z_dim);
            yh[s] = &hints.trace.yhat[s][offs[s] * y..(offs[s] + counts[s]) * y];
            zh[s] = &hints.trace.zhat[s][offs[s] * z..(offs[s] + counts[s]) * z];
            offs[s] += counts[s];
        }
        out.push(HintSlices { masks, yhat: yh, zhat: zh });
    }
    out
}

fn run_forward(
    cloud: &GaussianCloud,
    w: &ModelWeights,
    opts: &CodecOptions,
    hints: Option<&ReencodeHints>,
    estimate: bool,
) -> Result<(Vec<ChunkOutput>, SceneBBox, QuantizedPositions, Vec<u32>, f64)> {
    if cloud.count == 0 {
        return Err(Error::Format("cannot encode an empty scene".into()));
    }
    w.validate()?;
    let eng = Engines::new(w)?;
    let wall = Instant::now();
    let bbox = match hints {
        Some(h) => h.bbox,
        None => compute_bbox(cloud),
    };
    let qp = quantize_positions(&cloud.positions, &bbox);
    let order = morton_order(&qp.indices);
    let ranges = chunk_ranges(cloud.count, opts.chunk_size);

    if let Some(h) = hints {
        if h.trace.masks.len() != cloud.count {
            return Err(Error::Format(format!(
                "re-encode hints cover {} Gaussians, scene has {}",
                h.trace.masks.len(),
                cloud.count
            )));
        }
    }
    let specs = [&eng.streams[0].spec, &eng.streams[1].spec, &eng.streams[2].spec];
    let slices = hints.map(|h| hint_slices(h, &ranges, specs));

    let pool = build_pool(opts.workers)?;
    let results: Vec<ChunkOutput> = pool.install(|| {
        ranges
            .par_iter()
            .enumerate()
            .map(|(c, &(start, end))| {
                let chunk_order = &order[start..end];
                let mut indices = Vec::with_capacity((end - start) * 3);
                for &r in chunk_order {
                    let o = r as usize * 3;
                    indices.extend_from_slice(&qp.indices[o..o + 3]);
                }
                encode_chunk(
                    w,
                    &eng,
                    cloud,
                    chunk_order,
                    indices,
                    &bbox,
                    c as u32,
                    opts.seed,
                    slices.as_ref().map(|s| &s[c]),
                    estimate,
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((results, bbox, qp, order, wall.elapsed().as_secs_f64()))
}

pub fn encode_scene(
    cloud: &GaussianCloud,
    w: &ModelWeights,
    opts: &CodecOptions,
    hints: Option<&ReencodeHints>,
) -> Result<EncodeOutput> {
    let (results, bbox, _qp, _order, wall) = run_forward(cloud, w, opts, hints, false)?;

    let mut clamp_events: u64 = results.iter().map(|r| r.clamp_events).sum();
    if let Some(h) = hints {
        // Hinted symbols are already canonical, so the original file's count
        // is the meaningful one to carry forward.
        clamp_events = h.clamp_events;
    }
    let header = ContainerHeader {
        version: CONTAINER_VERSION,
        n: cloud.count as u64,
        chunk_size: opts.chunk_size.max(1),
        seed: opts.seed,
        bbox,
        fingerprint: w.fingerprint(),
        profile: PROFILE_DEFAULT,
        clamp_events,
    };
    let mut sections = Vec::new();
    let mut trace = Trace::default();
    let mut report = blank_report(header.n);
    let mut ones = 0u64;
    for mut r in results {
        ones += r.masks.iter().filter(|&&m| m).count() as u64;
        trace.masks.append(&mut r.masks);
        for s in 0..3 {
            trace.yhat[s].append(&mut r.yhat[s]);
            trace.zhat[s].append(&mut r.zhat[s]);
        }
        report.clamp_events += r.clamp_events;
        report.coded_symbols += r.coded_symbols;
        accumulate_sections_timing(&mut report, &r.timings);
        sections.append(&mut r.sections);
    }
    report.clamp_events = clamp_events;
    for (id, body) in &sections {
        component_totals(&mut report, id, body.len() as u64);
    }
    let container = Container { header, sections, trailing: 0 };
    let bytes = write_container(&container);
    report.header_bytes =
        bytes.len() as u64 - container.sections.iter().map(|(_, b)| b.len() as u64).sum::<u64>();
    report.mask_rate = ones as f64 / cloud.count as f64;
    finalize_report(&mut report);
    report.timings_secs.push(("wall".into(), wall));
    debug_assert_eq!(report.total_bytes, bytes.len() as u64);
    Ok(EncodeOutput {
        bytes,
        report,
        hints: ReencodeHints { bbox, clamp_events, trace },
    })
}

// Timing phases accumulate per chunk; the wall entry is appended once.
fn accumulate_sections_timing(report: &mut RateReport, timings: &[f64; 4]) {
    if report.timings_secs.is_empty() {
        report.timings_secs = vec![
            ("positions".into(), 0.0),
            ("masks".into(), 0.0),
            ("transforms+hyper".into(), 0.0),
            ("latents".into(), 0.0),
        ];
    }
    for (slot, t) in report.timings_secs.iter_mut().zip(timings) {
        slot.1 += t;
    }
}

pub fn scene_rate_estimate(
    cloud: &GaussianCloud,
    w: &ModelWeights,
    opts: &CodecOptions,
) -> Result<RateReport> {
    let (results, _bbox, _qp, _order, wall) = run_forward(cloud, w, opts, None, true)?;
    let mut report = blank_report(cloud.count as u64);
    let mut ones = 0u64;
    let mut n_sections = 0usize;
    for r in &results {
        ones += r.masks.iter().filter(|&&m| m).count() as u64;
        report.clamp_events += r.clamp_events;
        report.coded_symbols += r.coded_symbols;
        accumulate_sections_timing(&mut report, &r.timings);
        for (id, body) in &r.sections {
            component_totals(&mut report, id, body.len() as u64);
            n_sections += 1;
        }
        for &(ref id, len) in &r.latent_sizes {
            component_totals(&mut report, id, len);
            n_sections += 1;
        }
    }
    report.header_bytes = header_overhead(n_sections);
    report.mask_rate = ones as f64 / cloud.count as f64;
    finalize_report(&mut report);
    report.timings_secs.push(("wall".into(), wall));
    Ok(report)
}

pub fn decode_scene(bytes: &[u8], w: &ModelWeights, workers: usize) -> Result<DecodeOutput> {
    let container = read_container(bytes)?;
    check_fingerprint(&container.header, w)?;
    w.validate()?;
    let eng = Engines::new(w)?;
    let n = container.header.n as usize;
    let ranges = chunk_ranges(n, container.header.chunk_size);

    let pool = build_pool(workers)?;
    let chunks: Vec<DecChunk> = pool.install(|| {
        ranges
            .par_iter()
            .enumerate()
            .map(|(c, &(start, end))| {
                decode_chunk(&eng, &container, c as u32, end - start, container.header.seed)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut positions = Vec::with_capacity(n * 3);
    let mut f_geo = Vec::with_capacity(n * GEO_DIM);
    let mut f_col = Vec::with_capacity(n * COL_DIM);
    let mut trace = Trace::default();
    for mut c in chunks {
        positions.append(&mut c.positions);
        f_geo.append(&mut c.f_geo);
        f_col.append(&mut c.f_col);
        trace.masks.append(&mut c.masks);
        for s in 0..3 {
            trace.yhat[s].append(&mut c.yhat[s]);
            trace.zhat[s].append(&mut c.zhat[s]);
        }
    }
    let cloud = GaussianCloud::new(positions, f_geo, f_col)?;
    Ok(DecodeOutput {
        cloud,
        hints: ReencodeHints {
            bbox: container.header.bbox,
            clamp_events: container.header.clamp_events,
            trace,
        },
        trailing: container.trailing,
    })
}

/// Component breakdown straight from a file, no weights required.
pub fn inspect(bytes: &[u8]) -> Result<RateReport> {
    let container = read_container(bytes)?;
    let n = container.header.n as usize;
    let ranges = chunk_ranges(n, container.header.chunk_size);
    let mut report = blank_report(container.header.n);
    for (id, body) in &container.sections {
        component_totals(&mut report, id, body.len() as u64);
    }
    let mut ones = 0u64;
    for (c, &(start, end)) in ranges.iter().enumerate() {
        let body = container.section(SectionId::masks(c as u32))?;
        let bits = decode_mask_bits(body, end - start)?;
        ones += bits.iter().filter(|&&m| m).count() as u64;
    }
    report.mask_rate = ones as f64 / n as f64;
    report.clamp_events = container.header.clamp_events;
    report.header_bytes = bytes.len() as u64
        - container.sections.iter().map(|(_, b)| b.len() as u64).sum::<u64>();
    finalize_report(&mut report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gen_test_weights;
    use crate::synth::{noise_scene, smooth_scene};

    fn opts(seed: u64, chunk: u64, workers: usize) -> CodecOptions {
        CodecOptions { seed, chunk_size: chunk, workers }
    }

    #[test]
    fn tiny_round_trip_exact() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(40, 3);
        let enc = encode_scene(&cloud, &w, &opts(1, 1 << 20, 1), None).unwrap();
        let dec = decode_scene(&enc.bytes, &w, 1).unwrap();
        assert_eq!(dec.cloud.count, 40);

        // Positions: exactly the dequantized 16-bit grid, in Morton order.
        let bbox = compute_bbox(&cloud);
        let qp = quantize_positions(&cloud.positions, &bbox);
        let order = morton_order(&qp.indices);
        let mut expect = Vec::new();
        for &r in &order {
            let o = r as usize * 3;
            let e = bbox.extent();
            for d in 0..3 {
                expect.push((qp.indices[o + d] as f64 + 0.5) * e[d] / 65536.0 + bbox.min[d]);
            }
        }
        assert_eq!(dec.cloud.positions, expect);

        // Coded symbols round-trip bitwise.
        assert_eq!(enc.hints.trace, dec.hints.trace);

        // Bypass attributes within q/2.
        let geo_step = &w.steps(w.stream(StreamKind::Geo)).unwrap();
        for (pos, &r) in order.iter().enumerate() {
            for c in 0..GEO_DIM {
                let orig = cloud.f_geo[r as usize * GEO_DIM + c];
                let got = dec.cloud.f_geo[pos * GEO_DIM + c];
                assert!((orig - got).abs() <= geo_step[c] / 2.0 + 1e-12);
            }
        }

        // Re-encode from hints is byte-identical.
        let re = encode_scene(&dec.cloud, &w, &opts(1, 1 << 20, 1), Some(&dec.hints)).unwrap();
        assert_eq!(enc.bytes, re.bytes);
    }

    #[test]
    fn deterministic_and_worker_independent() {
        let w = gen_test_weights(7);
        let cloud = noise_scene(300, 5);
        let a = encode_scene(&cloud, &w, &opts(9, 128, 1), None).unwrap();
        let b = encode_scene(&cloud, &w, &opts(9, 128, 1), None).unwrap();
        let c = encode_scene(&cloud, &w, &opts(9, 128, 4), None).unwrap();
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(a.bytes, c.bytes);
        // Different seed shuffles batches: different bytes.
        let d = encode_scene(&cloud, &w, &opts(10, 128, 1), None).unwrap();
        assert_ne!(a.bytes, d.bytes);
    }

    #[test]
    fn multi_chunk_round_trip() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(70, 11);
        let enc = encode_scene(&cloud, &w, &opts(2, 32, 2), None).unwrap();
        let dec = decode_scene(&enc.bytes, &w, 2).unwrap();
        assert_eq!(enc.hints.trace, dec.hints.trace);
        let re = encode_scene(&dec.cloud, &w, &opts(2, 32, 2), Some(&dec.hints)).unwrap();
        assert_eq!(enc.bytes, re.bytes);
    }

    #[test]
    fn single_gaussian_scene() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(1, 1);
        let enc = encode_scene(&cloud, &w, &CodecOptions::default(), None).unwrap();
        let dec = decode_scene(&enc.bytes, &w, 1).unwrap();
        assert_eq!(dec.cloud.count, 1);
        assert_eq!(enc.hints.trace, dec.hints.trace);
    }

    #[test]
    fn estimate_tracks_actual() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(2000, 17);
        let o = opts(0, 1 << 20, 1);
        let enc = encode_scene(&cloud, &w, &o, None).unwrap();
        let est = scene_rate_estimate(&cloud, &w, &o).unwrap();
        let actual = enc.report.total_bytes as f64;
        let diff = (est.total_bytes as f64 - actual).abs();
        assert!(
            diff <= 0.02 * actual + 128.0,
            "estimate {} vs actual {}",
            est.total_bytes,
            actual
        );
        assert_eq!(est.mask_rate, enc.report.mask_rate);
    }

    #[test]
    fn inspect_matches_encode_report() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(500, 23);
        let enc = encode_scene(&cloud, &w, &opts(0, 200, 1), None).unwrap();
        let ins = inspect(&enc.bytes).unwrap();
        assert_eq!(ins.total_bytes, enc.bytes.len() as u64);
        assert_eq!(ins.component_sum(), ins.total_bytes);
        assert_eq!(ins.positions_bytes, enc.report.positions_bytes);
        assert_eq!(ins.geo_bytes, enc.report.geo_bytes);
        assert_eq!(ins.col_m0_bytes, enc.report.col_m0_bytes);
        assert_eq!(ins.col_m1_bytes, enc.report.col_m1_bytes);
        assert_eq!(ins.mask_rate, enc.report.mask_rate);
    }

    #[test]
    fn wrong_weights_rejected() {
        let w = gen_test_weights(7);
        let other = gen_test_weights(8);
        let cloud = smooth_scene(20, 2);
        let enc = encode_scene(&cloud, &w, &CodecOptions::default(), None).unwrap();
        let err = decode_scene(&enc.bytes, &other, 1).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn corruption_is_contained() {
        let w = gen_test_weights(7);
        let cloud = smooth_scene(60, 9);
        let enc = encode_scene(&cloud, &w, &CodecOptions::default(), None).unwrap();
        // Flip bytes across the file: decoding must never panic.
        for at in [enc.bytes.len() / 3, enc.bytes.len() / 2, enc.bytes.len() - 5] {
            let mut bad = enc.bytes.clone();
            bad[at] ^= 0x55;
            let _ = decode_scene(&bad, &w, 1);
        }
        let _ = decode_scene(&enc.bytes[..enc.bytes.len() / 2], &w, 1);
    }

    #[test]
    fn splitmix_chunk_seeds_differ() {
        assert_ne!(chunk_seed(0, 0), chunk_seed(0, 1));
        assert_ne!(chunk_seed(1, 0), chunk_seed(2, 0));
        assert_eq!(chunk_seed(5, 3), chunk_seed(5, 3));
    }
}
