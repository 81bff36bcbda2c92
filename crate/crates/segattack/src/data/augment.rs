//! Paired image/mask augmentation: shift, scale and a smoothed random
//! displacement field (elastic deformation). Image and mask always see the
//! identical transform; the image is sampled bilinearly, the mask with
//! nearest neighbor and re-binarized. Out-of-frame regions fill with zero.

use super::DataError;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Maximum shift as a fraction of the image side.
    pub max_shift: f64,
    /// Uniform zoom range.
    pub scale_range: (f64, f64),
    /// Peak displacement-field amplitude in pixels; 0 disables deformation.
    pub deform_strength: f64,
    /// Control points per side of the coarse displacement grid.
    pub deform_grid: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 0.1,
            scale_range: (0.9, 1.1),
            deform_strength: 1.5,
            deform_grid: 4,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which `augment` is the identity.
    pub fn disabled() -> Self {
        Self { max_shift: 0.0, scale_range: (1.0, 1.0), deform_strength: 0.0, deform_grid: 4 }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.max_shift < 0.0
            || self.deform_strength < 0.0
            || self.scale_range.0 <= 0.0
            || self.scale_range.0 > self.scale_range.1
            || self.deform_grid < 2
        {
            return Err(DataError::InvalidConfig(format!("bad augment config {self:?}")));
        }
        Ok(())
    }
}

/// Smooth displacement field: a coarse grid of vectors, bilinearly
/// interpolated over the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DisplacementField {
    fn sample(&self, x: f64, y: f64, h: usize, w: usize) -> (f64, f64) {
        let g = self.grid;
        let fx = (x / (w - 1).max(1) as f64) * (g - 1) as f64;
        let fy = (y / (h - 1).max(1) as f64) * (g - 1) as f64;
        let x0 = (fx.floor() as usize).min(g - 2);
        let y0 = (fy.floor() as usize).min(g - 2);
        let wx = (fx - x0 as f64).clamp(0.0, 1.0);
        let wy = (fy - y0 as f64).clamp(0.0, 1.0);
        let lerp2 = |v: &[f64]| -> f64 {
            let top = v[y0 * g + x0] * (1.0 - wx) + v[y0 * g + x0 + 1] * wx;
            let bot = v[(y0 + 1) * g + x0] * (1.0 - wx) + v[(y0 + 1) * g + x0 + 1] * wx;
            top * (1.0 - wy) + bot * wy
        };
        (lerp2(&self.dx), lerp2(&self.dy))
    }
}

/// One concrete sampled transform. Positive `dx`/`dy` move content toward
/// +x/+y; `scale > 1` enlarges it about the frame center.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpParams {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub field: Option<DisplacementField>,
}

impl WarpParams {
    pub fn shift(dx: f64, dy: f64) -> Self {
        Self { dx, dy, scale: 1.0, field: None }
    }
}

/// Draw warp parameters from `cfg`.
pub fn sample_warp(
    cfg: &AugmentConfig,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> WarpParams {
    let sx = cfg.max_shift * width as f64;
    let sy = cfg.max_shift * height as f64;
    let dx = if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 };
    let dy = if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 };
    let scale = if cfg.scale_range.0 < cfg.scale_range.1 {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        cfg.scale_range.0
    };
    let field = if cfg.deform_strength > 0.0 {
        let g = cfg.deform_grid;
        let s = cfg.deform_strength;
        let dxs = (0..g * g).map(|_| rng.random_range(-s..=s)).collect();
        let dys = (0..g * g).map(|_| rng.random_range(-s..=s)).collect();
        Some(DisplacementField { grid: g, dx: dxs, dy: dys })
    } else {
        None
    };
    WarpParams { dx, dy, scale, field }
}

fn source_coords(params: &WarpParams, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let mut sx = (x as f64 - cx - params.dx) / params.scale + cx;
    let mut sy = (y as f64 - cy - params.dy) / params.scale + cy;
    if let Some(field) = &params.field {
        let (fx, fy) = field.sample(x as f64, y as f64, h, w);
        sx += fx;
        sy += fy;
    }
    (sx, sy)
}

fn warp_plane_bilinear(src: &[f64], h: usize, w: usize, params: &WarpParams, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_coords(params, x, y, h, w);
            out[y * w + x] = if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64
            {
                0.0
            } else {
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let wx = sx - x0 as f64;
                let wy = sy - y0 as f64;
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                top * (1.0 - wy) + bot * wy
            };
        }
    }
}

fn warp_plane_nearest(src: &[f64], h: usize, w: usize, params: &WarpParams, out: &mut [f64]) {
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_coords(params, x, y, h, w);
            let rx = sx.round();
            let ry = sy.round();
            out[y * w + x] =
                if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f64 || ry > (h - 1) as f64 {
                    0.0
                } else if src[ry as usize * w + rx as usize] >= 0.5 {
                    1.0
                } else {
                    0.0
                };
        }
    }
}

/// Apply one transform to an image/mask pair (both `[C, H, W]`).
pub fn warp_pair(
    image: &Tensor,
    mask: &Tensor,
    params: &WarpParams,
) -> Result<(Tensor, Tensor), DataError> {
    let (ic, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(DataError::InvalidConfig(format!(
                "warp expects [C, H, W] tensors, got image {other:?}"
            )))
        }
    };
    let mc = match mask.shape() {
        &[c, mh, mw] if mh == h && mw == w => c,
        other => {
            return Err(DataError::InvalidConfig(format!(
                "mask shape {other:?} does not pair with image [{ic}, {h}, {w}]"
            )))
        }
    };
    let mut img_out = vec![0.0; ic * h * w];
    for c in 0..ic {
        warp_plane_bilinear(
            &image.data()[c * h * w..(c + 1) * h * w],
            h,
            w,
            params,
            &mut img_out[c * h * w..(c + 1) * h * w],
        );
    }
    let mut mask_out = vec![0.0; mc * h * w];
    for c in 0..mc {
        warp_plane_nearest(
            &mask.data()[c * h * w..(c + 1) * h * w],
            h,
            w,
            params,
            &mut mask_out[c * h * w..(c + 1) * h * w],
        );
    }
    Ok((
        Tensor::new(vec![ic, h, w], img_out)?,
        Tensor::new(vec![mc, h, w], mask_out)?,
    ))
}

/// Draw a random transform from `cfg` and apply it to the pair.
pub fn augment(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor), DataError> {
    cfg.validate()?;
    let (h, w) = match image.shape() {
        &[_, h, w] => (h, w),
        other => {
            return Err(DataError::InvalidConfig(format!(
                "augment expects [C, H, W] tensors, got {other:?}"
            )))
        }
    };
    let params = sample_warp(cfg, h, w, rng);
    warp_pair(image, mask, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blob_pair() -> (Tensor, Tensor) {
        // Centered 4x4 blob inside a 12x12 frame, zero border.
        let (h, w) = (12, 12);
        let mut img = vec![0.0; h * w];
        let mut mask = vec![0.0; h * w];
        for y in 4..8 {
            for x in 4..8 {
                img[y * w + x] = 0.5 + 0.01 * (x + y) as f64;
                mask[y * w + x] = 1.0;
            }
        }
        (
            Tensor::new(vec![1, h, w], img).unwrap(),
            Tensor::new(vec![1, h, w], mask).unwrap(),
        )
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let (img, mask) = blob_pair();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (i2, m2) = augment(&img, &mask, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(i2.data(), img.data());
        assert_eq!(m2.data(), mask.data());
    }

    #[test]
    fn shift_round_trip_recovers_interior_content() {
        let (img, mask) = blob_pair();
        let (i1, m1) = warp_pair(&img, &mask, &WarpParams::shift(2.0, -2.0)).unwrap();
        assert_ne!(i1.data(), img.data());
        let (i2, m2) = warp_pair(&i1, &m1, &WarpParams::shift(-2.0, 2.0)).unwrap();
        assert_eq!(i2.data(), img.data());
        assert_eq!(m2.data(), mask.data());
    }

    #[test]
    fn masks_stay_binary_under_any_augmentation() {
        let (img, mask) = blob_pair();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (i2, m2) = augment(&img, &mask, &cfg, &mut rng).unwrap();
            assert!(m2.is_binary());
            assert!(i2.min() >= 0.0 && i2.max() <= 1.0);
        }
    }

    #[test]
    fn deformation_strength_zero_disables_the_field() {
        let cfg = AugmentConfig { deform_strength: 0.0, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = sample_warp(&cfg, 12, 12, &mut rng);
        assert!(params.field.is_none());
    }

    #[test]
    fn same_seed_same_augmentation() {
        let (img, mask) = blob_pair();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = augment(&img, &mask, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }
}
