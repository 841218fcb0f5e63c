//! Paired image/mask augmentation: affine resampling and elastic deformation.
//!
//! Images are resampled bilinearly and masks by nearest neighbour, so masks
//! stay binary. Coordinates are pixel centers with `x` along columns and `y`
//! along rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Grayscale2D, MaskImage};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Out-of-bounds reads return 0.
fn read_zero(pixels: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        pixels[y as usize * w + x as usize]
    }
}

/// Samples `pixels` (row-major `h × w`) at fractional position `(y, x)`;
/// samples outside the grid read 0.
pub fn sample(pixels: &[f64], h: usize, w: usize, y: f64, x: f64, interp: Interpolation) -> f64 {
    match interp {
        Interpolation::Nearest => read_zero(pixels, h, w, y.round() as isize, x.round() as isize),
        Interpolation::Bilinear => {
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let p = |dy, dx| read_zero(pixels, h, w, y0 + dy, x0 + dx);
            (1.0 - fy) * ((1.0 - fx) * p(0, 0) + fx * p(0, 1)) + fy * ((1.0 - fx) * p(1, 0) + fx * p(1, 1))
        }
    }
}

fn resample_image(image: &Grayscale2D, map: impl Fn(usize, usize) -> (f64, f64)) -> Grayscale2D {
    let (h, w) = (image.height(), image.width());
    Grayscale2D::from_fn(h, w, image.spacing(), |y, x| {
        let (sy, sx) = map(y, x);
        sample(image.pixels(), h, w, sy, sx, Interpolation::Bilinear)
    })
    .expect("dims taken from a valid image")
}

fn resample_mask(mask: &MaskImage, map: impl Fn(usize, usize) -> (f64, f64)) -> MaskImage {
    let (h, w) = (mask.height(), mask.width());
    MaskImage::from_fn(h, w, |y, x| {
        let (sy, sx) = map(y, x);
        let (ny, nx) = (sy.round(), sx.round());
        ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 && mask.get(ny as usize, nx as usize)
    })
    .expect("dims taken from a valid mask")
}

fn check_pair(image: &Grayscale2D, mask: &MaskImage) -> Result<()> {
    if (image.height(), image.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.height(),
            image.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Rotation in degrees (positive turns clockwise on screen), isotropic
/// scale and translation in pixels, all about the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotate_deg: 0.0,
        scale: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn rotation(deg: f64) -> Self {
        AffineParams {
            rotate_deg: deg,
            ..Self::IDENTITY
        }
    }

    /// Output-to-input coordinate map for an `h × w` grid.
    fn inverse_map(&self, h: usize, w: usize) -> impl Fn(usize, usize) -> (f64, f64) {
        let (sin, cos) = exact_sin_cos(self.rotate_deg);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (s, tx, ty) = (self.scale, self.shift_x, self.shift_y);
        move |y, x| {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            (cy + (-sin * dx + cos * dy) / s, cx + (cos * dx + sin * dy) / s)
        }
    }
}

/// sin and cos of an angle in degrees, exact at multiples of 90°.
fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let turns = deg / 90.0;
    if turns == turns.round() {
        match (turns as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Applies `params` to an image/mask pair by inverse mapping: each output
/// pixel reads the input at the back-transformed position.
pub fn affine(image: &Grayscale2D, mask: &MaskImage, params: &AffineParams) -> Result<(Grayscale2D, MaskImage)> {
    check_pair(image, mask)?;
    if !(params.scale > 0.0) {
        return Err(Error::Contract(format!(
            "affine scale must be positive, got {}",
            params.scale
        )));
    }
    let map = params.inverse_map(image.height(), image.width());
    Ok((resample_image(image, &map), resample_mask(mask, &map)))
}

/// Affine resampling of a single image with the chosen interpolation.
pub fn affine_image(image: &Grayscale2D, params: &AffineParams, interp: Interpolation) -> Result<Grayscale2D> {
    if !(params.scale > 0.0) {
        return Err(Error::Contract(format!(
            "affine scale must be positive, got {}",
            params.scale
        )));
    }
    let (h, w) = (image.height(), image.width());
    let map = params.inverse_map(h, w);
    Grayscale2D::from_fn(h, w, image.spacing(), |y, x| {
        let (sy, sx) = map(y, x);
        sample(image.pixels(), h, w, sy, sx, interp)
    })
}

/// Truncated Gaussian of standard deviation `sigma`, radius `⌈3σ⌉`,
/// normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with edge-replicated borders.
fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * field[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &g)| g * rows[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Per-pixel displacement in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    h: usize,
    w: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    pub fn new(h: usize, w: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != h * w || dy.len() != h * w {
            return Err(Error::shape(format!(
                "{h}x{w} field needs {} offsets per axis, got {} and {}",
                h * w,
                dx.len(),
                dy.len()
            )));
        }
        Ok(DisplacementField { h, w, dx, dy })
    }

    /// Draws `dx` then `dy` (each row-major) uniformly from `[−1, 1]`,
    /// smooths both with [`gaussian_kernel`]`(sigma)` and scales by `alpha`.
    pub fn random(h: usize, w: usize, alpha: f64, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::Contract(format!(
                "elastic alpha must be non-negative, got {alpha}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::Contract(format!("elastic sigma must be positive, got {sigma}")));
        }
        let mut draw = || (0..h * w).map(|_| rng.gen_range(-1.0..=1.0)).collect::<Vec<f64>>();
        let (raw_x, raw_y) = (draw(), draw());
        let kernel = gaussian_kernel(sigma);
        let scale = |v: Vec<f64>| v.into_iter().map(|d| d * alpha).collect();
        Self::new(
            h,
            w,
            scale(smooth(&raw_x, h, w, &kernel)),
            scale(smooth(&raw_y, h, w, &kernel)),
        )
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    /// Sample position for output pixel `(y, x)`, clamped onto the grid.
    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.w + x;
        (
            (y as f64 + self.dy[i]).clamp(0.0, (self.h - 1) as f64),
            (x as f64 + self.dx[i]).clamp(0.0, (self.w - 1) as f64),
        )
    }
}

/// Resamples a pair at `(x + dx, y + dy)`. Sample positions are clamped to
/// the grid, so a constant image stays constant under any field.
pub fn warp(image: &Grayscale2D, mask: &MaskImage, field: &DisplacementField) -> Result<(Grayscale2D, MaskImage)> {
    check_pair(image, mask)?;
    if (field.h, field.w) != (image.height(), image.width()) {
        return Err(Error::shape(format!(
            "field is {}x{} but image is {}x{}",
            field.h,
            field.w,
            image.height(),
            image.width()
        )));
    }
    let map = |y, x| field.source(y, x);
    Ok((resample_image(image, map), resample_mask(mask, map)))
}

/// Elastic deformation with a freshly drawn field.
pub fn elastic(
    image: &Grayscale2D,
    mask: &MaskImage,
    alpha: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Grayscale2D, MaskImage)> {
    check_pair(image, mask)?;
    let field = DisplacementField::random(image.height(), image.width(), alpha, sigma, rng)?;
    warp(image, mask, &field)
}

/// Random augmentation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    /// Output size as a multiple of the input; 1 keeps only the originals.
    pub multiplicity: usize,
    pub affine: bool,
    /// Rotation drawn uniformly from `[−rotate_deg, rotate_deg]`.
    pub rotate_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Shifts drawn uniformly from `±shift_frac` of width / height.
    pub shift_frac: f64,
    pub elastic: bool,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            multiplicity: 2,
            affine: true,
            rotate_deg: 15.0,
            scale_min: 0.9,
            scale_max: 1.1,
            shift_frac: 0.1,
            elastic: true,
            alpha: 34.0,
            sigma: 4.0,
        }
    }
}

impl AugPolicy {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugPolicy {
            multiplicity: 1,
            affine: false,
            elastic: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(field, msg));
        if self.multiplicity < 1 {
            return bad("multiplicity", "must be at least 1".into());
        }
        if !(self.rotate_deg >= 0.0 && self.rotate_deg.is_finite()) {
            return bad(
                "rotate_deg",
                format!("must be a finite non-negative angle, got {}", self.rotate_deg),
            );
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return bad(
                "scale_min",
                format!(
                    "need 0 < scale_min <= scale_max, got [{}, {}]",
                    self.scale_min, self.scale_max
                ),
            );
        }
        if !(0.0..1.0).contains(&self.shift_frac) {
            return bad("shift_frac", format!("must lie in [0, 1), got {}", self.shift_frac));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be non-negative, got {}", self.alpha));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        Ok(())
    }

    pub fn sample_affine(&self, h: usize, w: usize, rng: &mut impl Rng) -> AffineParams {
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        AffineParams {
            rotate_deg: uniform(-self.rotate_deg, self.rotate_deg),
            scale: uniform(self.scale_min, self.scale_max),
            shift_x: uniform(-self.shift_frac, self.shift_frac) * w as f64,
            shift_y: uniform(-self.shift_frac, self.shift_frac) * h as f64,
        }
    }
}

/// One random augmentation: affine then elastic, each if enabled.
pub fn augment_pair(
    image: &Grayscale2D,
    mask: &MaskImage,
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Result<(Grayscale2D, MaskImage)> {
    check_pair(image, mask)?;
    let mut out = (image.clone(), mask.clone());
    if policy.affine {
        let params = policy.sample_affine(image.height(), image.width(), rng);
        out = affine(&out.0, &out.1, &params)?;
    }
    if policy.elastic {
        out = elastic(&out.0, &out.1, policy.alpha, policy.sigma, rng)?;
    }
    Ok(out)
}

/// Expands `pairs` to `multiplicity` times its size. The originals come
/// first, followed by copy 1 of every pair, copy 2, and so on. Copy `c` of
/// pair `i` draws from its own generator seeded with
/// [`seed::derive`]`(seed, i, c)`.
pub fn augment_batch(
    pairs: &[(Grayscale2D, MaskImage)],
    policy: &AugPolicy,
    seed: u64,
) -> Result<Vec<(Grayscale2D, MaskImage)>> {
    policy.validate()?;
    let mut out = pairs.to_vec();
    out.reserve(pairs.len() * (policy.multiplicity - 1));
    for copy in 1..policy.multiplicity {
        for (i, (image, mask)) in pairs.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, i as u64, copy as u64));
            out.push(augment_pair(image, mask, policy, &mut rng)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(4.0);
        assert_eq!(k.len(), 25);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[24]);
        assert_eq!(gaussian_kernel(0.5).len(), 5);
    }

    #[test]
    fn quarter_turns_are_exact() {
        assert_eq!(exact_sin_cos(90.0), (1.0, 0.0));
        assert_eq!(exact_sin_cos(-90.0), (-1.0, 0.0));
        assert_eq!(exact_sin_cos(360.0), (0.0, 1.0));
    }
}
