//! Weights container (FCGSW01), generic MLP inference, the mask network,
//! the analysis/synthesis and hyper transforms, and quantization.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coder::quantize_pmf;
use crate::entropy::{FactorizedPrior, Z_BOUND};
use crate::error::{Error, Result};
use crate::model_io::GAU_DIM;

pub const WEIGHTS_MAGIC: &[u8; 7] = b"FCGSW01";
pub const WEIGHTS_VERSION: u32 = 1;

/// Largest coded symbol magnitude; values outside are clamped at encode and
/// the clamp count is reported.
pub const SYMBOL_BOUND: i32 = (1 << 15) - 1;

pub const MASK_NET: &str = "mask.mlp_m";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamKind {
    #[serde(rename = "GEO")]
    Geo,
    #[serde(rename = "COL0")]
    Col0,
    #[serde(rename = "COL1")]
    Col1,
}

impl StreamKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Geo => "geo",
            StreamKind::Col0 => "col0",
            StreamKind::Col1 => "col1",
        }
    }

    pub const ALL: [StreamKind; 3] = [StreamKind::Geo, StreamKind::Col0, StreamKind::Col1];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub kind: StreamKind,
    pub x_dim: usize,
    pub y_dim: usize,
    pub z_dim: usize,
    pub n_chunks: usize,
    pub uses_transform: bool,
}

impl StreamSpec {
    /// Number of GMM sources: {h, s} for GEO, {h, s, c} for color streams.
    pub fn gmm_sources(&self) -> usize {
        if self.kind == StreamKind::Geo {
            2
        } else {
            3
        }
    }

    pub fn chunk_width(&self) -> usize {
        self.y_dim / self.n_chunks
    }

    pub fn net(&self, suffix: &str) -> String {
        format!("{}.{}", self.kind.prefix(), suffix)
    }

    /// Name of the per-channel quantization step tensor, if the stream codes
    /// raw attributes (latent streams use the constant step 1).
    pub fn step_tensor(&self) -> Option<String> {
        if self.uses_transform {
            None
        } else {
            Some(format!("{}.q", self.kind.prefix()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "leaky_relu0.2")]
    LeakyRelu02,
    #[serde(rename = "gelu-tanh-approx")]
    GeluTanh,
    #[serde(rename = "identity")]
    Identity,
    #[serde(rename = "sigmoid")]
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu02 => {
                if x >= 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
            Activation::GeluTanh => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetMeta {
    pub name: String,
    pub layers: Vec<LayerMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsMeta {
    pub format_version: u32,
    pub epsilon_m: f64,
    /// Frequency count L of the sin-cos positional embedding (width 6L).
    pub embed_freqs: usize,
    pub grid_res_3d: [usize; 3],
    pub grid_res_2d: [usize; 3],
    /// How the 12 grid interpolations feed MLP_s: "concat" is the only
    /// supported mode.
    pub grid_combine: String,
    pub streams: Vec<StreamSpec>,
    pub nets: Vec<NetMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub meta: WeightsMeta,
    pub tensors: BTreeMap<String, Tensor>,
    /// Factorized priors for the hyper-latent streams, in stream order
    /// (GEO, COL0, COL1).
    pub priors: Vec<FactorizedPrior>,
}

/// One MLP materialized in f64 for inference. `w` is stored `[out, in]`
/// row-major, matching the container layout.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<(Array2<f64>, Array1<f64>, Activation)>,
}

impl Mlp {
    pub fn from_weights(weights: &ModelWeights, name: &str) -> Result<Self> {
        let net = weights
            .meta
            .nets
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Weights(format!("unknown network {name}")))?;
        let mut layers = Vec::with_capacity(net.layers.len());
        for (li, layer) in net.layers.iter().enumerate() {
            let w = weights.tensor(&format!("{name}.w{li}"))?;
            let b = weights.tensor(&format!("{name}.b{li}"))?;
            if w.shape != [layer.out_dim, layer.in_dim] || b.shape != [layer.out_dim] {
                return Err(Error::Shape(format!(
                    "{name} layer {li}: tensor shapes {:?}/{:?} do not match spec {}x{}",
                    w.shape, b.shape, layer.out_dim, layer.in_dim
                )));
            }
            let wm = Array2::from_shape_vec(
                (layer.out_dim, layer.in_dim),
                w.data.iter().map(|&v| v as f64).collect(),
            )
            .map_err(|e| Error::Shape(e.to_string()))?;
            let bv = Array1::from_vec(b.data.iter().map(|&v| v as f64).collect());
            layers.push((wm, bv, layer.activation));
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].0.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().0.nrows()
    }

    /// Row-wise forward pass over a batch of inputs.
    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match network input width {}",
                input.ncols(),
                self.input_width()
            )));
        }
        let mut cur = input.to_owned();
        for (w, b, act) in &self.layers {
            let mut next = cur.dot(&w.t());
            next += b;
            if *act != Activation::Identity {
                next.mapv_inplace(|v| act.apply(v));
            }
            cur = next;
        }
        Ok(cur)
    }
}

/// Forward a batch of rows through the named network.
pub fn mlp_forward(weights: &ModelWeights, name: &str, input: ArrayView2<f64>) -> Result<Array2<f64>> {
    Mlp::from_weights(weights, name)?.forward(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Analysis,
    Synthesis,
    HyperAnalysis,
    HyperSynthesis,
}

/// Run one of the four transform networks of a stream.
pub fn apply_transform(
    weights: &ModelWeights,
    kind: TransformKind,
    stream: &StreamSpec,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let suffix = match kind {
        TransformKind::Analysis | TransformKind::Synthesis if !stream.uses_transform => {
            return Err(Error::Shape(format!(
                "{} stream has no analysis/synthesis transform (identity path)",
                stream.kind.prefix()
            )));
        }
        TransformKind::Analysis => "g_a",
        TransformKind::Synthesis => "g_s",
        TransformKind::HyperAnalysis => "h_a",
        TransformKind::HyperSynthesis => "h_s",
    };
    mlp_forward(weights, &stream.net(suffix), x)
}

/// Mask scores and bits per Gaussian (Eq. 3 path selection).
pub fn compute_masks(weights: &ModelWeights, f_gau: ArrayView2<f64>) -> Result<(Vec<bool>, Vec<f64>)> {
    if f_gau.ncols() != GAU_DIM {
        return Err(Error::Shape(format!(
            "mask input width {} != {GAU_DIM}",
            f_gau.ncols()
        )));
    }
    let logits = mlp_forward(weights, MASK_NET, f_gau)?;
    if logits.ncols() != 1 {
        return Err(Error::Weights("mask network must emit one logit".into()));
    }
    let scores: Vec<f64> = logits.column(0).iter().map(|&v| Activation::Sigmoid.apply(v)).collect();
    let bits = scores.iter().map(|&s| s > weights.meta.epsilon_m).collect();
    Ok((bits, scores))
}

/// Quantized symbols with their per-channel steps; value = symbol * step.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolArray {
    pub symbols: Vec<i32>,
    pub step: Vec<f64>,
    /// Symbols clamped to the +-SYMBOL_BOUND range during quantization.
    pub clamp_events: u64,
}

impl SymbolArray {
    pub fn width(&self) -> usize {
        self.step.len()
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let w = self.width();
        self.symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| s as f64 * self.step[i % w])
            .collect()
    }
}

/// Round half away from zero, then clamp to the symbol bound.
pub fn quantize(values: &[f64], step: &[f64]) -> Result<SymbolArray> {
    if step.is_empty() || values.len() % step.len() != 0 {
        return Err(Error::Shape(format!(
            "value count {} is not a multiple of channel count {}",
            values.len(),
            step.len()
        )));
    }
    if step.iter().any(|&q| !(q > 0.0) || !q.is_finite()) {
        return Err(Error::Weights("quantization steps must be positive and finite".into()));
    }
    let w = step.len();
    let mut symbols = Vec::with_capacity(values.len());
    let mut clamp_events = 0u64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: i / w });
        }
        // f64::round rounds half away from zero, the documented rule.
        let r = (v / step[i % w]).round();
        let s = if r > SYMBOL_BOUND as f64 || r < -SYMBOL_BOUND as f64 {
            clamp_events += 1;
            r.clamp(-(SYMBOL_BOUND as f64), SYMBOL_BOUND as f64) as i32
        } else {
            r as i32
        };
        symbols.push(s);
    }
    Ok(SymbolArray { symbols, step: step.to_vec(), clamp_events })
}

impl ModelWeights {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))
    }

    pub fn stream(&self, kind: StreamKind) -> &StreamSpec {
        self.meta
            .streams
            .iter()
            .find(|s| s.kind == kind)
            .expect("validated weights carry all three streams")
    }

    /// Per-channel quantization step vector for a stream (constant 1 for
    /// latent streams).
    pub fn steps(&self, stream: &StreamSpec) -> Result<Vec<f64>> {
        match stream.step_tensor() {
            None => Ok(vec![1.0; stream.y_dim]),
            Some(name) => Ok(self.tensor(&name)?.data.iter().map(|&v| v as f64).collect()),
        }
    }

    /// Chunk-0 fallback (mu, sigma-raw, pi) constants for a color stream.
    pub fn chunk0_fallback(&self, stream: &StreamSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let p = stream.kind.prefix();
        let grab = |suffix: &str| -> Result<Vec<f64>> {
            Ok(self
                .tensor(&format!("{p}.c0.{suffix}"))?
                .data
                .iter()
                .map(|&v| v as f64)
                .collect())
        };
        Ok((grab("mu")?, grab("sigma_raw")?, grab("pi")?))
    }

    pub fn prior(&self, kind: StreamKind) -> &FactorizedPrior {
        let idx = StreamKind::ALL.iter().position(|&k| k == kind).unwrap();
        &self.priors[idx]
    }

    /// First 16 bytes of the SHA-256 of the serialized container.
    pub fn fingerprint(&self) -> [u8; 16] {
        let digest = Sha256::digest(self.serialize());
        let mut fp = [0u8; 16];
        fp.copy_from_slice(&digest[..16]);
        fp
    }

    pub fn serialize(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(tensor.shape.len() as u8);
            for &d in &tensor.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.priors.len() as u32).to_le_bytes());
        for prior in &self.priors {
            out.extend_from_slice(&(prior.channels.len() as u32).to_le_bytes());
            for cum in &prior.channels {
                for pair in cum.windows(2) {
                    out.extend_from_slice(&((pair[1] - pair[0]) as u16).to_le_bytes());
                }
            }
        }
        out
    }

    /// Validate all container invariants, collecting every violation.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let meta = &self.meta;
        if meta.format_version != WEIGHTS_VERSION {
            return Err(Error::Weights(format!(
                "unsupported weights format version {}",
                meta.format_version
            )));
        }
        if !(meta.epsilon_m > 0.0 && meta.epsilon_m < 1.0) {
            problems.push(format!("epsilon_m {} outside (0, 1)", meta.epsilon_m));
        }
        if meta.embed_freqs == 0 {
            problems.push("embed_freqs must be >= 1".into());
        }
        if meta.grid_combine != "concat" {
            problems.push(format!("unsupported grid_combine mode {:?}", meta.grid_combine));
        }

        for (net_idx, net) in meta.nets.iter().enumerate() {
            if net.layers.is_empty() {
                problems.push(format!("{} has no layers", net.name));
                continue;
            }
            for pair in net.layers.windows(2) {
                if pair[0].out_dim != pair[1].in_dim {
                    problems.push(format!(
                        "{}: layer widths {} -> {} are inconsistent",
                        net.name, pair[0].out_dim, pair[1].in_dim
                    ));
                }
            }
            if meta.nets.iter().take(net_idx).any(|n| n.name == net.name) {
                problems.push(format!("duplicate network name {}", net.name));
            }
            for (li, layer) in net.layers.iter().enumerate() {
                for (suffix, want) in [
                    (format!("{}.w{li}", net.name), vec![layer.out_dim, layer.in_dim]),
                    (format!("{}.b{li}", net.name), vec![layer.out_dim]),
                ] {
                    match self.tensors.get(&suffix) {
                        None => problems.push(format!("missing tensor {suffix}")),
                        Some(t) if t.shape != want => problems.push(format!(
                            "tensor {suffix} has shape {:?}, expected {:?}",
                            t.shape, want
                        )),
                        Some(t) if t.data.iter().any(|v| !v.is_finite()) => {
                            problems.push(format!("tensor {suffix} contains non-finite values"))
                        }
                        _ => {}
                    }
                }
            }
        }

        let embed_width = 6 * meta.embed_freqs;
        let mut seen = [false; 3];
        for stream in &meta.streams {
            let idx = StreamKind::ALL.iter().position(|&k| k == stream.kind).unwrap();
            if seen[idx] {
                problems.push(format!("duplicate stream {}", stream.kind.prefix()));
            }
            seen[idx] = true;
            if stream.n_chunks == 0 || stream.y_dim % stream.n_chunks != 0 {
                problems.push(format!(
                    "{}: y_dim {} not divisible by n_chunks {}",
                    stream.kind.prefix(),
                    stream.y_dim,
                    stream.n_chunks
                ));
            }
            let find = |name: &str| meta.nets.iter().find(|n| n.name == name);
            let mut expect = |suffix: &str, layers: Option<usize>, in_dim: usize, out_dim: usize| {
                let name = stream.net(suffix);
                match find(&name) {
                    None => problems.push(format!("missing network {name}")),
                    Some(net) => {
                        if let Some(want) = layers {
                            if net.layers.len() != want {
                                problems.push(format!(
                                    "{name} has {} layers, expected {want}",
                                    net.layers.len()
                                ));
                            }
                        }
                        if net.layers[0].in_dim != in_dim {
                            problems.push(format!(
                                "{name} input width {} != {in_dim}",
                                net.layers[0].in_dim
                            ));
                        }
                        if net.layers.last().unwrap().out_dim != out_dim {
                            problems.push(format!(
                                "{name} output width {} != {out_dim}",
                                net.layers.last().unwrap().out_dim
                            ));
                        }
                    }
                }
            };
            if stream.uses_transform {
                expect("g_a", Some(4), stream.x_dim, stream.y_dim);
                expect("g_s", Some(4), stream.y_dim, stream.x_dim);
            }
            expect("h_a", Some(3), stream.y_dim, stream.z_dim);
            expect("h_s", Some(3), stream.z_dim, 3 * stream.y_dim);
            expect("mlp_s", None, 12 * stream.y_dim + embed_width, 3 * stream.y_dim);
            if stream.kind != StreamKind::Geo {
                expect(
                    "mlp_c",
                    None,
                    stream.y_dim + stream.n_chunks,
                    3 * stream.chunk_width(),
                );
                for suffix in ["mu", "sigma_raw", "pi"] {
                    let name = format!("{}.c0.{suffix}", stream.kind.prefix());
                    match self.tensors.get(&name) {
                        None => problems.push(format!("missing tensor {name}")),
                        Some(t) if t.shape != [stream.chunk_width()] => problems.push(format!(
                            "tensor {name} has shape {:?}, expected [{}]",
                            t.shape,
                            stream.chunk_width()
                        )),
                        _ => {}
                    }
                }
            }
            if let Some(qname) = stream.step_tensor() {
                match self.tensors.get(&qname) {
                    None => problems.push(format!("missing tensor {qname}")),
                    Some(t) if t.shape != [stream.y_dim] => problems.push(format!(
                        "tensor {qname} has shape {:?}, expected [{}]",
                        t.shape, stream.y_dim
                    )),
                    Some(t) if t.data.iter().any(|&q| !(q > 0.0) || !q.is_finite()) => {
                        problems.push(format!("tensor {qname} has non-positive steps"))
                    }
                    _ => {}
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            problems.push("weights must describe GEO, COL0 and COL1 streams".into());
        }

        if let Some(net) = meta.nets.iter().find(|n| n.name == MASK_NET) {
            if net.layers[0].in_dim != GAU_DIM {
                problems.push(format!("{MASK_NET} input width {} != {GAU_DIM}", net.layers[0].in_dim));
            }
            if net.layers.last().unwrap().out_dim != 1 {
                problems.push(format!("{MASK_NET} must emit one logit"));
            }
        } else {
            problems.push(format!("missing network {MASK_NET}"));
        }

        if self.priors.len() != meta.streams.len() {
            problems.push(format!(
                "{} factorized priors for {} streams",
                self.priors.len(),
                meta.streams.len()
            ));
        } else {
            for (prior, kind) in self.priors.iter().zip(StreamKind::ALL) {
                let z_dim = meta.streams.iter().find(|s| s.kind == kind).map_or(0, |s| s.z_dim);
                if prior.channels.len() != z_dim {
                    problems.push(format!(
                        "factorized prior for {} has {} channels, expected {}",
                        kind.prefix(),
                        prior.channels.len(),
                        z_dim
                    ));
                }
                if let Err(e) = prior.validate() {
                    problems.push(e.to_string());
                }
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Weights(problems.join("; ")))
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("weights container ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_weights(bytes: &[u8]) -> Result<ModelWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(WEIGHTS_MAGIC.len(), "magic")? != WEIGHTS_MAGIC {
        return Err(Error::Weights("bad weights magic (expected FCGSW01)".into()));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: WeightsMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Weights(format!("metadata: {e}")))?;

    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Weights("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8(&format!("tensor {name} rank"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("tensor {name} shape"))? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("tensor {name} data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Weights(format!("duplicate tensor {name}")));
        }
    }

    let n_priors = r.u32("prior count")? as usize;
    let bins = FactorizedPrior::bins();
    let mut priors = Vec::with_capacity(n_priors);
    for _ in 0..n_priors {
        let n_channels = r.u32("prior channel count")? as usize;
        let mut channels = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let raw = r.take(bins * 2, "factorized prior table")?;
            let mut cum = Vec::with_capacity(bins + 1);
            cum.push(0u32);
            for c in raw.chunks_exact(2) {
                let f = u16::from_le_bytes(c.try_into().unwrap()) as u32;
                cum.push(cum.last().unwrap() + f);
            }
            channels.push(cum);
        }
        priors.push(FactorizedPrior { channels });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after weights container",
            bytes.len() - r.pos
        )));
    }

    let weights = ModelWeights { meta, tensors, priors };
    weights.validate()?;
    Ok(weights)
}

const HIDDEN_SMALL: usize = 128;
const HIDDEN_LARGE: usize = 256;
pub const DEFAULT_EMBED_FREQS: usize = 8;
pub const DEFAULT_EPSILON_M: f64 = 0.01;
pub const GRID_RES_3D: [usize; 3] = [70, 80, 90];
pub const GRID_RES_2D: [usize; 3] = [300, 400, 500];

fn default_streams() -> Vec<StreamSpec> {
    vec![
        StreamSpec { kind: StreamKind::Geo, x_dim: 8, y_dim: 8, z_dim: 16, n_chunks: 1, uses_transform: false },
        StreamSpec { kind: StreamKind::Col0, x_dim: 48, y_dim: 48, z_dim: 24, n_chunks: 3, uses_transform: false },
        StreamSpec { kind: StreamKind::Col1, x_dim: 48, y_dim: 256, z_dim: 64, n_chunks: 4, uses_transform: true },
    ]
}

fn mlp_layers(widths: &[usize]) -> Vec<LayerMeta> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| LayerMeta {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i + 2 == widths.len() { Activation::Identity } else { Activation::Relu },
        })
        .collect()
}

/// The default network roster. Order here fixes the test-weight draw order.
fn default_nets() -> Vec<NetMeta> {
    let embed = 6 * DEFAULT_EMBED_FREQS;
    let mut nets = vec![NetMeta {
        name: MASK_NET.into(),
        layers: mlp_layers(&[GAU_DIM, HIDDEN_SMALL, HIDDEN_SMALL, 1]),
    }];
    for stream in default_streams() {
        let h = if stream.kind == StreamKind::Col1 { HIDDEN_LARGE } else { HIDDEN_SMALL };
        let (x, y, z) = (stream.x_dim, stream.y_dim, stream.z_dim);
        if stream.uses_transform {
            nets.push(NetMeta { name: stream.net("g_a"), layers: mlp_layers(&[x, h, h, h, y]) });
            nets.push(NetMeta { name: stream.net("g_s"), layers: mlp_layers(&[y, h, h, h, x]) });
        }
        nets.push(NetMeta { name: stream.net("h_a"), layers: mlp_layers(&[y, h, h, z]) });
        nets.push(NetMeta { name: stream.net("h_s"), layers: mlp_layers(&[z, h, h, 3 * y]) });
        nets.push(NetMeta {
            name: stream.net("mlp_s"),
            layers: mlp_layers(&[12 * y + embed, h, h, 3 * y]),
        });
        if stream.kind != StreamKind::Geo {
            nets.push(NetMeta {
                name: stream.net("mlp_c"),
                layers: mlp_layers(&[y + stream.n_chunks, h, h, 3 * stream.chunk_width()]),
            });
        }
    }
    nets
}

pub fn default_meta() -> WeightsMeta {
    WeightsMeta {
        format_version: WEIGHTS_VERSION,
        epsilon_m: DEFAULT_EPSILON_M,
        embed_freqs: DEFAULT_EMBED_FREQS,
        grid_res_3d: GRID_RES_3D,
        grid_res_2d: GRID_RES_2D,
        grid_combine: "concat".into(),
        streams: default_streams(),
        nets: default_nets(),
    }
}

/// Sigma-raw bias per stream for test weights, roughly matched to the value
/// spread each stream codes so the default rate is sane.
fn sigma_bias(kind: StreamKind) -> f64 {
    match kind {
        StreamKind::Geo => -0.9,
        StreamKind::Col0 => -1.3,
        StreamKind::Col1 => -1.6,
    }
}

/// Deterministic stand-in weights: xoshiro256** stream, one uniform draw in
/// [-0.3, 0.3] per parameter in roster order (per layer: weight tensor
/// row-major, then bias), rescaled per layer as documented in the weights
/// format doc. No RNG is consumed outside network parameters.
pub fn gen_test_weights(seed: u64) -> ModelWeights {
    let meta = default_meta();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut draw = |scale: f64| {
        let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        ((2.0 * u - 1.0) * 0.3) * (scale / 0.3)
    };

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for net in &meta.nets {
        let head = net.name.ends_with(".h_s")
            || net.name.ends_with(".mlp_s")
            || net.name.ends_with(".mlp_c");
        for (li, layer) in net.layers.iter().enumerate() {
            let last = li + 1 == net.layers.len();
            let scale = if !last {
                0.3
            } else if net.name.ends_with(".g_a") || net.name.ends_with(".h_a") {
                0.015
            } else if head {
                0.002
            } else {
                0.3
            };
            let w: Vec<f32> = (0..layer.out_dim * layer.in_dim).map(|_| draw(scale) as f32).collect();
            let mut b: Vec<f32> = (0..layer.out_dim).map(|_| draw(scale) as f32).collect();
            if last && head {
                // [mu | sigma-raw | pi] head: center sigma-raw on the
                // stream's bias so coding windows have a sane default width.
                let d = layer.out_dim / 3;
                let kind = StreamKind::ALL
                    .into_iter()
                    .find(|k| net.name.starts_with(k.prefix()))
                    .unwrap();
                for slot in &mut b[d..2 * d] {
                    *slot = sigma_bias(kind) as f32;
                }
            }
            if last && net.name == MASK_NET {
                // Center the logit near the mask threshold so synthetic
                // scenes exercise both color paths.
                b[0] = -4.0;
            }
            tensors.insert(
                format!("{}.w{li}", net.name),
                Tensor { shape: vec![layer.out_dim, layer.in_dim], data: w },
            );
            tensors.insert(format!("{}.b{li}", net.name), Tensor { shape: vec![layer.out_dim], data: b });
        }
    }

    for stream in &meta.streams {
        if let Some(qname) = stream.step_tensor() {
            let base = if stream.kind == StreamKind::Geo { 0.1 } else { 0.05 };
            let data: Vec<f32> = (0..stream.y_dim)
                .map(|ch| (base * (1.0 + 0.01 * ch as f64)) as f32)
                .collect();
            tensors.insert(qname, Tensor { shape: vec![stream.y_dim], data });
        }
        if stream.kind != StreamKind::Geo {
            let w = stream.chunk_width();
            let p = stream.kind.prefix();
            tensors.insert(format!("{p}.c0.mu"), Tensor { shape: vec![w], data: vec![0.0; w] });
            tensors.insert(
                format!("{p}.c0.sigma_raw"),
                Tensor { shape: vec![w], data: vec![sigma_bias(stream.kind) as f32; w] },
            );
            tensors.insert(format!("{p}.c0.pi"), Tensor { shape: vec![w], data: vec![0.0; w] });
        }
    }

    let mut priors = Vec::new();
    for stream in &meta.streams {
        let mut channels = Vec::with_capacity(stream.z_dim);
        for ch in 0..stream.z_dim {
            let b = 0.35 + 0.02 * (ch % 8) as f64;
            let mut pmf: Vec<f64> = (-Z_BOUND..=Z_BOUND)
                .map(|s| (-(s.abs() as f64) / b).exp())
                .collect();
            let total: f64 = pmf.iter().sum();
            for p in &mut pmf {
                *p /= total;
            }
            let cdf = quantize_pmf(&pmf, -Z_BOUND).expect("laplace pmf quantizes");
            channels.push(cdf.cum);
        }
        priors.push(FactorizedPrior { channels });
    }

    let weights = ModelWeights { meta, tensors, priors };
    debug_assert!(weights.validate().is_ok());
    weights
}
