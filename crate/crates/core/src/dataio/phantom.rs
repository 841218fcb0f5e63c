//! Synthetic short-axis slices: a mid-gray blood pool inside a bright
//! myocardial ring on a dark, noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{Grayscale2D, MaskImage, Spacing};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Center offset range as a fraction of each dimension.
    pub center_jitter: f64,
    /// Pool radius range as a fraction of `min(h, w)`.
    pub pool_radius: (f64, f64),
    /// Wall thickness range as a fraction of `min(h, w)`.
    pub wall_thickness: (f64, f64),
    /// Per-image intensity gain drawn from `1 ± gain_jitter`.
    pub gain_jitter: f64,
    pub spacing: Spacing,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            noise_sigma: 0.05,
            center_jitter: 0.15,
            pool_radius: (0.10, 0.20),
            wall_thickness: (0.04, 0.08),
            gain_jitter: 0.2,
            spacing: Spacing::default(),
        }
    }
}

/// Drawn shape parameters, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub cy: f64,
    pub cx: f64,
    pub pool_radius: f64,
    pub wall_thickness: f64,
}

impl PhantomGeometry {
    pub fn in_pool(&self, y: usize, x: usize) -> bool {
        self.dist2(y, x) <= self.pool_radius * self.pool_radius
    }

    pub fn in_wall(&self, y: usize, x: usize) -> bool {
        let outer = self.pool_radius + self.wall_thickness;
        !self.in_pool(y, x) && self.dist2(y, x) <= outer * outer
    }

    fn dist2(&self, y: usize, x: usize) -> f64 {
        (y as f64 - self.cy).powi(2) + (x as f64 - self.cx).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Grayscale2D,
    pub mask: MaskImage,
    pub geometry: PhantomGeometry,
}

/// Generates `count` phantoms of size `h × w`. Sample `i` draws from its own
/// generator seeded with [`seed::derive`]`(seed, i, 0)`, so any prefix of a
/// larger set is reproduced exactly.
pub fn gen_phantom(count: usize, h: usize, w: usize, seed: u64, params: &PhantomParams) -> Result<Vec<PhantomSample>> {
    if h < 32 || w < 32 {
        return Err(Error::config(
            "phantom",
            format!("phantoms need at least 32x32 pixels, got {h}x{w}"),
        ));
    }
    let bad_range = |(lo, hi): (f64, f64)| !(lo > 0.0 && lo <= hi);
    if bad_range(params.pool_radius) || bad_range(params.wall_thickness) {
        return Err(Error::config(
            "phantom",
            "radius and thickness ranges must be positive and ordered",
        ));
    }
    if !(params.noise_sigma >= 0.0) || !(0.0..1.0).contains(&params.gain_jitter) {
        return Err(Error::config(
            "phantom",
            "noise_sigma must be >= 0 and gain_jitter in [0, 1)",
        ));
    }
    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::config("noise_sigma", e))?;
    let side = h.min(w) as f64;
    let span = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };

    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, i as u64, 0));
            let j = params.center_jitter;
            let geometry = PhantomGeometry {
                cy: (h as f64 - 1.0) / 2.0 + span(&mut rng, (-j, j)) * h as f64,
                cx: (w as f64 - 1.0) / 2.0 + span(&mut rng, (-j, j)) * w as f64,
                pool_radius: span(&mut rng, params.pool_radius) * side,
                wall_thickness: (span(&mut rng, params.wall_thickness) * side).max(1.0),
            };
            let gain = span(&mut rng, (1.0 - params.gain_jitter, 1.0 + params.gain_jitter));
            let background = 0.10 + rng.gen_range(-0.03..=0.03);
            let pool = 0.50 + rng.gen_range(-0.05..=0.05);
            let wall = 0.85 + rng.gen_range(-0.05..=0.05);
            let image = Grayscale2D::from_fn(h, w, params.spacing, |y, x| {
                let base = if geometry.in_pool(y, x) {
                    pool
                } else if geometry.in_wall(y, x) {
                    wall
                } else {
                    background
                };
                (gain * base + noise.sample(&mut rng)).clamp(0.0, 1.0)
            })?;
            let mask = MaskImage::from_fn(h, w, |y, x| geometry.in_pool(y, x))?;
            Ok(PhantomSample { image, mask, geometry })
        })
        .collect()
}
