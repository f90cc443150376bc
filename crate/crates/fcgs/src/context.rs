//! Coding context: seeded batch splitting, grids built from already-coded
//! latents (Eq. 4), grid interpolation plus the inter-Gaussian parameter
//! head (Eq. 5), and the chunked intra-Gaussian head (Eq. 6).

use ndarray::Array2;
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::entropy::{SIGMA_MAX, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::neural::{Mlp, ModelWeights, StreamKind, StreamSpec};

pub const N_BATCHES: usize = 4;

/// Batch index per Gaussian, from a seeded uniform permutation sliced into
/// four runs with ratios {1/6, 1/6, 1/3, rest}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchAssignment {
    pub batch_of: Vec<u8>,
    pub sizes: [usize; N_BATCHES],
    pub seed: u64,
}

impl BatchAssignment {
    /// Indices of one batch in ascending order.
    pub fn members(&self, batch: usize) -> Vec<usize> {
        self.batch_of
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b as usize == batch)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn batch_sizes(n: usize) -> [usize; N_BATCHES] {
    let s0 = n / 6;
    let s1 = n / 6;
    let s2 = n / 3;
    [s0, s1, s2, n - s0 - s1 - s2]
}

/// Fisher-Yates permutation of [0, n) driven by xoshiro256**; index j for
/// position i drawn as `next_u64() % (i + 1)`.
pub fn split_batches(n: usize, seed: u64) -> BatchAssignment {
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }
    let sizes = batch_sizes(n);
    let mut batch_of = vec![0u8; n];
    let mut cursor = 0usize;
    for (b, &len) in sizes.iter().enumerate() {
        for &g in &perm[cursor..cursor + len] {
            batch_of[g as usize] = b as u8;
        }
        cursor += len;
    }
    BatchAssignment { batch_of, sizes, seed }
}

/// A dense grid over [0,1]^d in grid-index space: voxel corners sit at
/// normalized coordinates k/(R-1). `feat` holds the finalized per-voxel
/// average, `wsum` the accumulated interpolation weights.
#[derive(Debug, Clone)]
pub struct Grid {
    pub res: usize,
    /// Coordinate axes kept, in order (e.g. [0,1,2] for 3D, [0,2] for the
    /// xz plane).
    pub axes: Vec<usize>,
    pub dim: usize,
    pub feat: Vec<f64>,
    pub wsum: Vec<f64>,
}

impl Grid {
    fn new(res: usize, axes: Vec<usize>, dim: usize) -> Self {
        let voxels = res.pow(axes.len() as u32);
        Grid { res, axes, dim, feat: vec![0.0; voxels * dim], wsum: vec![0.0; voxels] }
    }

    fn voxel_index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.res + c)
    }

    /// Corner indices and interpolation weights for one position: 2^d
    /// (corner, weight) pairs with w = prod(1 - |p*(R-1) - v|).
    fn corners(&self, pos: &[f64; 3]) -> Vec<(usize, f64)> {
        let d = self.axes.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for (k, &axis) in self.axes.iter().enumerate() {
            let g = pos[axis] * (self.res - 1) as f64;
            let i0 = (g.floor() as usize).min(self.res.saturating_sub(2));
            base[k] = i0;
            frac[k] = g - i0 as f64;
        }
        let mut out = Vec::with_capacity(1 << d);
        for corner in 0..1usize << d {
            let mut w = 1.0;
            let mut coords = [0usize; 3];
            for k in 0..d {
                let hi = (corner >> k) & 1 == 1;
                coords[k] = base[k] + hi as usize;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
            }
            if w > 0.0 {
                out.push((self.voxel_index(&coords[..d]), w));
            }
        }
        out
    }

    /// Interpolate the finalized features at a position.
    pub fn interpolate_into(&self, pos: &[f64; 3], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        out.fill(0.0);
        for (v, w) in self.corners(pos) {
            let f = &self.feat[v * self.dim..(v + 1) * self.dim];
            for (o, &x) in out.iter_mut().zip(f) {
                *o += w * x;
            }
        }
    }
}

/// The 12-grid context for one stream: 3D grids in resolution order, then
/// the xy/xz/yz planes each in resolution order.
#[derive(Debug, Clone)]
pub struct GridSet {
    pub grids: Vec<Grid>,
    pub dim: usize,
}

impl GridSet {
    pub fn width(&self) -> usize {
        self.grids.len() * self.dim
    }
}

/// Plane axis sets in fixed order: xy, xz, yz.
pub const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

/// Accumulate included Gaussians' latents into fresh grids (Eq. 4) and
/// finalize each voxel to the weighted average (zero where nothing lands).
pub fn build_grids(
    positions_norm: &[f64],
    y_hat: &[f64],
    include: &[bool],
    res_3d: &[usize],
    res_2d: &[usize],
    dim: usize,
) -> Result<GridSet> {
    let n = include.len();
    if positions_norm.len() != n * 3 || y_hat.len() != n * dim {
        return Err(Error::Shape("grid input lengths disagree".into()));
    }
    let mut grids = Vec::with_capacity(res_3d.len() + 3 * res_2d.len());
    for &r in res_3d {
        grids.push(Grid::new(r, vec![0, 1, 2], dim));
    }
    for axes in PLANE_AXES {
        for &r in res_2d {
            grids.push(Grid::new(r, axes.to_vec(), dim));
        }
    }

    for g in 0..n {
        if !include[g] {
            continue;
        }
        let pos: [f64; 3] = positions_norm[g * 3..g * 3 + 3].try_into().unwrap();
        if pos.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Shape(format!("normalized position {pos:?} outside [0,1]^3")));
        }
        let feat = &y_hat[g * dim..(g + 1) * dim];
        for grid in &mut grids {
            for (v, w) in grid.corners(&pos) {
                grid.wsum[v] += w;
                let slot = &mut grid.feat[v * dim..(v + 1) * dim];
                for (s, &x) in slot.iter_mut().zip(feat) {
                    *s += w * x;
                }
            }
        }
    }
    for grid in &mut grids {
        for v in 0..grid.wsum.len() {
            if grid.wsum[v] > 0.0 {
                let inv = 1.0 / grid.wsum[v];
                for s in &mut grid.feat[v * dim..(v + 1) * dim] {
                    *s *= inv;
                }
            }
        }
    }
    Ok(GridSet { grids, dim })
}

/// Concatenated interpolation over all grids in their fixed order.
pub fn interpolate(grids: &GridSet, pos: &[f64; 3]) -> Vec<f64> {
    let mut out = vec![0.0; grids.width()];
    for (k, grid) in grids.grids.iter().enumerate() {
        grid.interpolate_into(pos, &mut out[k * grids.dim..(k + 1) * grids.dim]);
    }
    out
}

/// Sin-cos embedding: per coordinate, per frequency k in 0..L, the pair
/// [sin(2^k pi p), cos(2^k pi p)]; width 6L.
pub fn positional_embedding(pos: &[f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * freqs);
    for &p in pos {
        for k in 0..freqs {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * p;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Hyper,
    Inter,
    Intra,
}

/// One source's (mu, sigma, pi) triple for a row of channels; sigma is
/// already activated (exp, clamped).
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pi: Vec<f64>,
    pub source: SourceTag,
}

pub fn activate_sigma(raw: f64) -> f64 {
    raw.exp().clamp(SIGMA_MIN, SIGMA_MAX)
}

impl DistributionParams {
    /// Split a raw head output [mu | sigma-raw | pi] and activate sigma.
    pub fn from_head_row(raw: &[f64], source: SourceTag) -> Self {
        let d = raw.len() / 3;
        debug_assert_eq!(raw.len(), 3 * d);
        DistributionParams {
            mu: raw[..d].to_vec(),
            sigma: raw[d..2 * d].iter().map(|&r| activate_sigma(r)).collect(),
            pi: raw[2 * d..].to_vec(),
            source,
        }
    }

    pub fn width(&self) -> usize {
        self.mu.len()
    }
}

/// Inter-Gaussian parameters (Eq. 5) for one position against grids built
/// from strictly earlier batches.
pub fn inter_params(
    weights: &ModelWeights,
    stream: &StreamSpec,
    grids: &GridSet,
    pos: &[f64; 3],
) -> Result<DistributionParams> {
    let mut input = interpolate(grids, pos);
    input.extend(positional_embedding(pos, weights.meta.embed_freqs));
    let mlp = Mlp::from_weights(weights, &stream.net("mlp_s"))?;
    let row = Array2::from_shape_vec((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
    let out = mlp.forward(row.view())?;
    Ok(DistributionParams::from_head_row(out.row(0).as_slice().unwrap(), SourceTag::Inter))
}

/// Intra-Gaussian parameters (Eq. 6) for one chunk, given the dequantized
/// earlier chunks of the same Gaussian. Chunk 0 returns the stream's stored
/// fallback constants.
pub fn intra_params(
    weights: &ModelWeights,
    stream: &StreamSpec,
    decoded_prefix: &[f64],
    chunk_index: usize,
) -> Result<DistributionParams> {
    if stream.kind == StreamKind::Geo {
        return Err(Error::Shape("GEO stream has no intra-Gaussian context".into()));
    }
    if chunk_index >= stream.n_chunks {
        return Err(Error::Shape(format!(
            "chunk index {chunk_index} out of range for {} chunks",
            stream.n_chunks
        )));
    }
    let cw = stream.chunk_width();
    if decoded_prefix.len() != chunk_index * cw {
        return Err(Error::Shape(format!(
            "prefix holds {} values, chunk {chunk_index} needs {}",
            decoded_prefix.len(),
            chunk_index * cw
        )));
    }
    if chunk_index == 0 {
        let (mu, sigma_raw, pi) = weights.chunk0_fallback(stream)?;
        return Ok(DistributionParams {
            mu,
            sigma: sigma_raw.into_iter().map(activate_sigma).collect(),
            pi,
            source: SourceTag::Intra,
        });
    }
    let mut input = vec![0.0; stream.y_dim + stream.n_chunks];
    input[..decoded_prefix.len()].copy_from_slice(decoded_prefix);
    input[stream.y_dim + chunk_index] = 1.0;
    let mlp = Mlp::from_weights(weights, &stream.net("mlp_c"))?;
    let row = Array2::from_shape_vec((1, input.len()), input).map_err(|e| Error::Shape(e.to_string()))?;
    let out = mlp.forward(row.view())?;
    Ok(DistributionParams::from_head_row(out.row(0).as_slice().unwrap(), SourceTag::Intra))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gen_test_weights;

    fn unit(rng: &mut Xoshiro256StarStar) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn split_sizes_and_determinism() {
        let a = split_batches(6, 42);
        assert_eq!(a.sizes, [1, 1, 2, 2]);
        assert_eq!(a, split_batches(6, 42));
        assert_ne!(split_batches(6, 42).batch_of, split_batches(6, 43).batch_of);

        let n = 100_000;
        let a = split_batches(n, 7);
        let mut counts = [0usize; N_BATCHES];
        for &b in &a.batch_of {
            counts[b as usize] += 1;
        }
        assert_eq!(counts, [n / 6, n / 6, n / 3, n - 2 * (n / 6) - n / 3]);
        // Partition: members of all batches cover [0, n) exactly once.
        let total: usize = (0..N_BATCHES).map(|b| a.members(b).len()).sum();
        assert_eq!(total, n);
    }

    /// Independent Eq. 4 evaluation: for every voxel, loop over all
    /// Gaussians and apply the weight product formula directly.
    fn brute_force_grid(
        positions: &[f64],
        y_hat: &[f64],
        include: &[bool],
        res: usize,
        axes: &[usize],
        dim: usize,
    ) -> Vec<f64> {
        let d = axes.len();
        let voxels = res.pow(d as u32);
        let mut feat = vec![0.0; voxels * dim];
        for v in 0..voxels {
            let mut coords = vec![0usize; d];
            let mut rem = v;
            for k in (0..d).rev() {
                coords[k] = rem % res;
                rem /= res;
            }
            let mut wsum = 0.0;
            let mut acc = vec![0.0; dim];
            for (g, &inc) in include.iter().enumerate() {
                if !inc {
                    continue;
                }
                let mut w = 1.0;
                for (k, &axis) in axes.iter().enumerate() {
                    let gp = positions[g * 3 + axis] * (res - 1) as f64;
                    w *= (1.0 - (gp - coords[k] as f64).abs()).max(0.0);
                }
                if w > 0.0 {
                    wsum += w;
                    for (a, &x) in acc.iter_mut().zip(&y_hat[g * dim..(g + 1) * dim]) {
                        *a += w * x;
                    }
                }
            }
            if wsum > 0.0 {
                for (slot, a) in feat[v * dim..(v + 1) * dim].iter_mut().zip(&acc) {
                    *slot = a / wsum;
                }
            }
        }
        feat
    }

    #[test]
    fn grid_matches_brute_force_oracle() {
        let n = 500;
        let dim = 4;
        let mut rng = Xoshiro256StarStar::seed_from_u64(5);
        let positions: Vec<f64> = (0..n * 3).map(|_| unit(&mut rng)).collect();
        let y_hat: Vec<f64> = (0..n * dim).map(|_| unit(&mut rng) * 4.0 - 2.0).collect();
        let include: Vec<bool> = (0..n).map(|_| rng.next_u64() % 3 != 0).collect();

        let set = build_grids(&positions, &y_hat, &include, &[8], &[5], dim).unwrap();
        for grid in &set.grids {
            let oracle =
                brute_force_grid(&positions, &y_hat, &include, grid.res, &grid.axes, dim);
            for (a, b) in grid.feat.iter().zip(&oracle) {
                let scale = a.abs().max(b.abs()).max(1.0);
                assert!((a - b).abs() / scale < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn grid_corner_identity_and_empty() {
        // One Gaussian exactly on a voxel corner of an 8-grid: that voxel's
        // feature is its latent with weight 1.
        let pos = [3.0 / 7.0, 5.0 / 7.0, 0.0];
        let y = [1.5, -2.0];
        let set = build_grids(&pos, &y, &[true], &[8], &[], 2).unwrap();
        let grid = &set.grids[0];
        let v = grid.voxel_index(&[3, 5, 0]);
        assert!((grid.feat[v * 2] - 1.5).abs() < 1e-9);
        assert!((grid.feat[v * 2 + 1] + 2.0).abs() < 1e-9);
        assert!((grid.wsum[v] - 1.0).abs() < 1e-9);

        // Nothing included: all features zero.
        let empty = build_grids(&pos, &y, &[false], &[8], &[5], 2).unwrap();
        for grid in &empty.grids {
            assert!(grid.feat.iter().all(|&f| f == 0.0));
        }
    }

    #[test]
    fn grid_average_idempotence() {
        // All contributors share one latent u; every touched voxel holds u.
        let n = 40;
        let mut rng = Xoshiro256StarStar::seed_from_u64(9);
        let positions: Vec<f64> = (0..n * 3).map(|_| unit(&mut rng)).collect();
        let u = [0.7, -1.3, 2.2];
        let y_hat: Vec<f64> = (0..n).flat_map(|_| u).collect();
        let set = build_grids(&positions, &y_hat, &vec![true; n], &[6], &[7], 3).unwrap();
        for grid in &set.grids {
            for v in 0..grid.wsum.len() {
                if grid.wsum[v] > 1e-12 {
                    for (k, &want) in u.iter().enumerate() {
                        assert!((grid.feat[v * 3 + k] - want).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn interpolation_matches_corner_sum_oracle() {
        let n = 64;
        let dim = 3;
        let mut rng = Xoshiro256StarStar::seed_from_u64(21);
        let positions: Vec<f64> = (0..n * 3).map(|_| unit(&mut rng)).collect();
        let y_hat: Vec<f64> = (0..n * dim).map(|_| unit(&mut rng) * 2.0 - 1.0).collect();
        let set = build_grids(&positions, &y_hat, &vec![true; n], &[4, 6], &[9], dim).unwrap();

        // Exactly on a voxel corner: interpolation returns the corner feature.
        let corner_pos = [1.0 / 3.0, 2.0 / 3.0, 0.0];
        let grid0 = &set.grids[0];
        let v = grid0.voxel_index(&[1, 2, 0]);
        let full = interpolate(&set, &corner_pos);
        for k in 0..dim {
            assert!((full[k] - grid0.feat[v * dim + k]).abs() < 1e-12);
        }

        for _ in 0..20 {
            let pos = [unit(&mut rng), unit(&mut rng), unit(&mut rng)];
            let got = interpolate(&set, &pos);
            assert_eq!(got.len(), set.width());
            let mut offset = 0;
            for grid in &set.grids {
                // Hand-summed corner oracle.
                let mut want = vec![0.0; dim];
                for (v, w) in grid.corners(&pos) {
                    for k in 0..dim {
                        want[k] += w * grid.feat[v * dim + k];
                    }
                }
                for k in 0..dim {
                    assert!((got[offset + k] - want[k]).abs() < 1e-12);
                }
                offset += dim;
            }
        }

        // All-zero grids interpolate to zero everywhere.
        let zero = build_grids(&positions, &y_hat, &vec![false; n], &[4], &[5], dim).unwrap();
        assert!(interpolate(&zero, &[0.3, 0.9, 0.1]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_basics() {
        let e = positional_embedding(&[0.0, 0.0, 0.0], 8);
        assert_eq!(e.len(), 48);
        for pair in e.chunks(2) {
            assert_eq!(pair[0], 0.0);
            assert_eq!(pair[1], 1.0);
        }
        let mut rng = Xoshiro256StarStar::seed_from_u64(33);
        let p = [unit(&mut rng), unit(&mut rng), unit(&mut rng)];
        let e = positional_embedding(&p, 8);
        for (d, &pd) in p.iter().enumerate() {
            for k in 0..8 {
                let arg = 2f64.powi(k as i32) * std::f64::consts::PI * pd;
                assert!((e[d * 16 + 2 * k] - arg.sin()).abs() < 1e-15);
                assert!((e[d * 16 + 2 * k + 1] - arg.cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn inter_params_empty_grids_and_oracle() {
        let w = gen_test_weights(7);
        let geo = w.stream(StreamKind::Geo).clone();
        let mut rng = Xoshiro256StarStar::seed_from_u64(44);

        // Empty grids: defined output, sigma within clamp range.
        let empty = build_grids(&[], &[], &[], &w.meta.grid_res_3d, &w.meta.grid_res_2d, geo.y_dim)
            .unwrap();
        let p = inter_params(&w, &geo, &empty, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(p.width(), geo.y_dim);
        assert!(p.sigma.iter().all(|&s| (SIGMA_MIN..=SIGMA_MAX).contains(&s)));

        // Populated toy grids, scalar recomputation oracle per row.
        let n = 100;
        let positions: Vec<f64> = (0..n * 3).map(|_| unit(&mut rng)).collect();
        let y_hat: Vec<f64> = (0..n * geo.y_dim).map(|_| unit(&mut rng) * 2.0 - 1.0).collect();
        let grids = build_grids(
            &positions,
            &y_hat,
            &vec![true; n],
            &w.meta.grid_res_3d,
            &w.meta.grid_res_2d,
            geo.y_dim,
        )
        .unwrap();
        for g in 0..5 {
            let pos: [f64; 3] = positions[g * 3..g * 3 + 3].try_into().unwrap();
            let params = inter_params(&w, &geo, &grids, &pos).unwrap();

            let mut input = interpolate(&grids, &pos);
            input.extend(positional_embedding(&pos, w.meta.embed_freqs));
            let net = w.meta.nets.iter().find(|m| m.name == "geo.mlp_s").unwrap().clone();
            let mut cur = input;
            for (li, layer) in net.layers.iter().enumerate() {
                let wt = w.tensor(&format!("geo.mlp_s.w{li}")).unwrap();
                let bt = w.tensor(&format!("geo.mlp_s.b{li}")).unwrap();
                let mut next = vec![0.0; layer.out_dim];
                for (o, slot) in next.iter_mut().enumerate() {
                    let mut acc = bt.data[o] as f64;
                    for (i, &v) in cur.iter().enumerate() {
                        acc += wt.data[o * layer.in_dim + i] as f64 * v;
                    }
                    *slot = layer.activation.apply(acc);
                }
                cur = next;
            }
            let d = geo.y_dim;
            for k in 0..d {
                assert!((params.mu[k] - cur[k]).abs() < 1e-12);
                assert!((params.sigma[k] - activate_sigma(cur[d + k])).abs() < 1e-12);
                assert!((params.pi[k] - cur[2 * d + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intra_params_paths() {
        let w = gen_test_weights(7);
        let geo = w.stream(StreamKind::Geo).clone();
        let col0 = w.stream(StreamKind::Col0).clone();
        let col1 = w.stream(StreamKind::Col1).clone();

        assert!(intra_params(&w, &geo, &[], 0).is_err());

        // Chunk 0 uses the stored fallback constants.
        let p0 = intra_params(&w, &col0, &[], 0).unwrap();
        let (mu, sr, pi) = w.chunk0_fallback(&col0).unwrap();
        assert_eq!(p0.mu, mu);
        assert_eq!(p0.pi, pi);
        for (s, r) in p0.sigma.iter().zip(&sr) {
            assert!((s - activate_sigma(*r)).abs() < 1e-15);
        }

        // Chunk widths follow the profile.
        let prefix1 = vec![0.25; 64];
        assert_eq!(intra_params(&w, &col1, &prefix1, 1).unwrap().width(), 64);
        assert!(intra_params(&w, &col1, &prefix1, 2).is_err());

        // COL0 chunk 2 against a scalar oracle.
        let mut rng = Xoshiro256StarStar::seed_from_u64(88);
        let prefix: Vec<f64> = (0..32).map(|_| unit(&mut rng) * 2.0 - 1.0).collect();
        let params = intra_params(&w, &col0, &prefix, 2).unwrap();
        let mut input = vec![0.0; col0.y_dim + col0.n_chunks];
        input[..32].copy_from_slice(&prefix);
        input[col0.y_dim + 2] = 1.0;
        let net = w.meta.nets.iter().find(|m| m.name == "col0.mlp_c").unwrap().clone();
        let mut cur = input;
        for (li, layer) in net.layers.iter().enumerate() {
            let wt = w.tensor(&format!("col0.mlp_c.w{li}")).unwrap();
            let bt = w.tensor(&format!("col0.mlp_c.b{li}")).unwrap();
            let mut next = vec![0.0; layer.out_dim];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut acc = bt.data[o] as f64;
                for (i, &v) in cur.iter().enumerate() {
                    acc += wt.data[o * layer.in_dim + i] as f64 * v;
                }
                *slot = layer.activation.apply(acc);
            }
            cur = next;
        }
        for k in 0..16 {
            assert!((params.mu[k] - cur[k]).abs() < 1e-12);
            assert!((params.sigma[k] - activate_sigma(cur[16 + k])).abs() < 1e-12);
            assert!((params.pi[k] - cur[32 + k]).abs() < 1e-12);
        }

        // Intra causality: the chunk-2 parameters depend only on the prefix,
        // so any mutation confined to later chunks cannot reach them; assert
        // the equivalent API property that identical prefixes give identical
        // parameters regardless of other state.
        let again = intra_params(&w, &col0, &prefix, 2).unwrap();
        assert_eq!(params, again);
    }

    #[test]
    fn grid_causality_mutation() {
        // Mutating a non-included (future-batch) latent leaves grids and
        // interpolations bitwise unchanged.
        let n = 200;
        let mut rng = Xoshiro256StarStar::seed_from_u64(61);
        let positions: Vec<f64> = (0..n * 3).map(|_| unit(&mut rng)).collect();
        let mut y_hat: Vec<f64> = (0..n * 2).map(|_| unit(&mut rng)).collect();
        let assign = split_batches(n, 123);
        let include: Vec<bool> = assign.batch_of.iter().map(|&b| b < 2).collect();

        let before = build_grids(&positions, &y_hat, &include, &[8], &[9], 2).unwrap();
        let future = include.iter().position(|&i| !i).unwrap();
        y_hat[future * 2] += 1000.0;
        y_hat[future * 2 + 1] -= 500.0;
        let after = build_grids(&positions, &y_hat, &include, &[8], &[9], 2).unwrap();
        for (a, b) in before.grids.iter().zip(&after.grids) {
            assert_eq!(a.feat, b.feat);
            assert_eq!(a.wsum, b.wsum);
        }
        let pa = interpolate(&before, &[0.4, 0.2, 0.8]);
        let pb = interpolate(&after, &[0.4, 0.2, 0.8]);
        assert_eq!(pa, pb);
    }
}
