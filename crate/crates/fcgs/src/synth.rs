//! Deterministic synthetic scenes for tests and benchmarks.

use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::model_io::{GaussianCloud, COL_DIM, GAU_DIM, GEO_DIM};

fn unit(rng: &mut Xoshiro256StarStar) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn symmetric(rng: &mut Xoshiro256StarStar, scale: f64) -> f64 {
    (unit(rng) * 2.0 - 1.0) * scale
}

/// A clustered scene whose attributes vary smoothly with position: low
/// spatial frequencies plus a little noise, the regime context models are
/// built for.
pub fn smooth_scene(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    const CLUSTERS: usize = 32;
    let centers: Vec<[f64; 3]> = (0..CLUSTERS)
        .map(|_| [symmetric(&mut rng, 4.0), symmetric(&mut rng, 4.0), symmetric(&mut rng, 4.0)])
        .collect();
    // One low-frequency wave per attribute channel, drawn once.
    let waves: Vec<([f64; 3], f64)> = (0..GAU_DIM)
        .map(|_| {
            let a = [symmetric(&mut rng, 1.2), symmetric(&mut rng, 1.2), symmetric(&mut rng, 1.2)];
            (a, symmetric(&mut rng, std::f64::consts::PI))
        })
        .collect();

    let mut positions = Vec::with_capacity(n * 3);
    let mut f_geo = Vec::with_capacity(n * GEO_DIM);
    let mut f_col = Vec::with_capacity(n * COL_DIM);
    for _ in 0..n {
        let c = centers[(rng.next_u64() % CLUSTERS as u64) as usize];
        let mut p = [0.0f64; 3];
        for d in 0..3 {
            // Sum of uniforms: a compact, roughly bell-shaped offset.
            let off = (0..4).map(|_| symmetric(&mut rng, 1.0)).sum::<f64>() * 0.4;
            p[d] = c[d] + off;
        }
        positions.extend_from_slice(&p);
        for (ch, (a, phase)) in waves.iter().enumerate() {
            let arg = a[0] * p[0] + a[1] * p[1] + a[2] * p[2] + phase;
            if ch < GEO_DIM {
                f_geo.push(0.6 * arg.sin() + symmetric(&mut rng, 0.01));
            } else {
                f_col.push(0.4 * arg.sin() + symmetric(&mut rng, 0.005));
            }
        }
    }
    GaussianCloud::new(positions, f_geo, f_col).expect("synthetic scene is well-formed")
}

/// An unstructured scene: uniform positions and attributes, a worst case for
/// the context models.
pub fn noise_scene(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ 0x5eed_0000_0000_0001);
    let mut positions = Vec::with_capacity(n * 3);
    let mut f_geo = Vec::with_capacity(n * GEO_DIM);
    let mut f_col = Vec::with_capacity(n * COL_DIM);
    for _ in 0..n {
        for _ in 0..3 {
            positions.push(symmetric(&mut rng, 5.0));
        }
        for _ in 0..GEO_DIM {
            f_geo.push(symmetric(&mut rng, 1.0));
        }
        for _ in 0..COL_DIM {
            f_col.push(symmetric(&mut rng, 1.0));
        }
    }
    GaussianCloud::new(positions, f_geo, f_col).expect("synthetic scene is well-formed")
}
