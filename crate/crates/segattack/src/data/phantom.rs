//! Synthetic phantom scans: soft-edged elliptical blobs per class drifting
//! smoothly through a stack of noisy slices, standing in for gated
//! clinical data. Masks are the blob supports, so ground truth is exact
//! and every run is a pure function of the config.

use super::{DataError, Dataset, Sample, CLASS_NAMES};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// Blob geometry and intensity for one mask class.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobClassConfig {
    /// Inclusive range of blobs per scan.
    pub blob_count: (usize, usize),
    /// Semi-axis range in pixels.
    pub radius: (f64, f64),
    /// Peak added intensity range.
    pub intensity: (f64, f64),
    /// Fraction of slices on which this class is present.
    pub presence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub n_scans: usize,
    pub slices_per_scan: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel background noise.
    pub noise_level: f64,
    /// Soft-edge width as a fraction of the blob radius. The intensity
    /// ramp crosses half its peak exactly at the mask boundary.
    pub edge_softness: f64,
    /// One entry per class, in [`CLASS_NAMES`] order.
    pub classes: [BlobClassConfig; 3],
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_scans: 10,
            slices_per_scan: 12,
            image_size: 64,
            noise_level: 0.064,
            edge_softness: 0.15,
            classes: [
                // Presence mirrors the real class frequencies: large bowel
                // most common, stomach least.
                BlobClassConfig {
                    blob_count: (1, 1),
                    radius: (4.5, 7.6),
                    intensity: (0.275, 0.325),
                    presence: 0.9,
                },
                BlobClassConfig {
                    blob_count: (1, 2),
                    radius: (3.2, 5.4),
                    intensity: (0.17, 0.22),
                    presence: 0.8,
                },
                BlobClassConfig {
                    blob_count: (1, 1),
                    radius: (2.2, 4.0),
                    intensity: (0.09, 0.135),
                    presence: 0.7,
                },
            ],
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_scans == 0 || self.slices_per_scan == 0 {
            return Err(DataError::InvalidConfig(
                "n_scans and slices_per_scan must be positive".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(DataError::InvalidConfig(format!(
                "image_size {} is too small",
                self.image_size
            )));
        }
        if self.noise_level < 0.0 || self.edge_softness <= 0.0 {
            return Err(DataError::InvalidConfig(
                "noise_level must be >= 0 and edge_softness > 0".into(),
            ));
        }
        for (name, class) in CLASS_NAMES.iter().zip(&self.classes) {
            if class.blob_count.0 > class.blob_count.1 || class.blob_count.0 == 0 {
                return Err(DataError::InvalidConfig(format!(
                    "{name}: bad blob count range {:?}",
                    class.blob_count
                )));
            }
            if !(class.radius.0 > 0.0 && class.radius.0 <= class.radius.1) {
                return Err(DataError::InvalidConfig(format!(
                    "{name}: bad radius range {:?}",
                    class.radius
                )));
            }
            if !(0.0..=1.0).contains(&class.presence) {
                return Err(DataError::InvalidConfig(format!(
                    "{name}: presence {} outside [0, 1]",
                    class.presence
                )));
            }
            // Blob plus drift and soft edge must fit inside the frame.
            let reach = class.radius.1 * (1.0 + self.edge_softness) + DRIFT_SPAN + 1.0;
            if 2.0 * reach >= self.image_size as f64 {
                return Err(DataError::InvalidConfig(format!(
                    "{name}: blobs of radius up to {} do not fit a {} px image",
                    class.radius.1, self.image_size
                )));
            }
        }
        Ok(())
    }
}

/// Maximum center drift over a scan, in pixels.
const DRIFT_SPAN: f64 = 1.5;
/// Relative amplitude of the radius breathing across slices.
const PULSE: f64 = 0.12;
/// Absolute amplitude of the per-class interior texture.
const TEXTURE: f64 = 0.027;
/// Background intensity floor.
const BACKGROUND: f64 = 0.02;

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    vx: f64,
    vy: f64,
    phase: f64,
    intensity: f64,
    tx: f64,
    ty: f64,
}

struct ClassPlan {
    window: std::ops::Range<usize>,
    blobs: Vec<Blob>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable per-purpose derived seed.
pub(crate) fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_shl(32) ^ index))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Lay out every class of one scan. Blobs never overlap (organs do not),
/// so each pixel carries at most one class intensity; overlapping sums
/// would otherwise disguise darker classes as brighter ones.
fn plan_scan(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Result<Vec<ClassPlan>, DataError> {
    let slices = cfg.slices_per_scan;
    let size = cfg.image_size as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::new(); // (cx, cy, keep-out radius)
    let mut plans = Vec::with_capacity(cfg.classes.len());
    for (ci, class) in cfg.classes.iter().enumerate() {
        let window_len = ((class.presence * slices as f64).round() as usize).min(slices);
        let start = if window_len < slices {
            rng.random_range(0..=slices - window_len)
        } else {
            0
        };
        let count = rng.random_range(class.blob_count.0..=class.blob_count.1);
        let mut blobs = Vec::with_capacity(count);
        for blob_idx in 0..count {
            let mut accepted = None;
            for _attempt in 0..500 {
                let rx = rng.random_range(class.radius.0..=class.radius.1);
                let ry = rng.random_range(class.radius.0..=class.radius.1);
                // Masks (plus drift and pulse) must stay disjoint; the
                // frame margin additionally covers the soft-edge ramp.
                let keep_out = rx.max(ry) * (1.0 + PULSE) + DRIFT_SPAN + 0.5;
                let margin = keep_out + rx.max(ry) * cfg.edge_softness + 1.0;
                let cx = rng.random_range(margin..size - margin);
                let cy = rng.random_range(margin..size - margin);
                let clear = placed.iter().all(|&(px, py, pr)| {
                    ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() > pr + keep_out
                });
                if clear {
                    accepted = Some((cx, cy, rx, ry, keep_out));
                    break;
                }
            }
            let Some((cx, cy, rx, ry, keep_out)) = accepted else {
                if blob_idx == 0 {
                    return Err(DataError::InvalidConfig(format!(
                        "{}: could not place any non-overlapping blob; image too crowded",
                        CLASS_NAMES[ci]
                    )));
                }
                break; // keep fewer blobs when the frame is full
            };
            placed.push((cx, cy, keep_out));
            let per_slice = DRIFT_SPAN / slices.max(1) as f64;
            blobs.push(Blob {
                cx,
                cy,
                rx,
                ry,
                vx: rng.random_range(-per_slice..=per_slice),
                vy: rng.random_range(-per_slice..=per_slice),
                phase: rng.random_range(0.0..TAU),
                intensity: rng.random_range(class.intensity.0..=class.intensity.1),
                tx: rng.random_range(0.0..TAU),
                ty: rng.random_range(0.0..TAU),
            });
        }
        plans.push(ClassPlan { window: start..start + window_len, blobs });
    }
    Ok(plans)
}

/// Generate the full phantom dataset described by `cfg`. Bit-identical for
/// identical configs; each scan draws from its own derived seed.
pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let s = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.n_scans * cfg.slices_per_scan);
    for scan in 0..cfg.n_scans {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, scan as u64));
        let plans = plan_scan(&mut rng, cfg)?;
        let scan_id = format!("scan{scan:03}");
        for t in 0..cfg.slices_per_scan {
            let mut image = vec![0.0f64; s * s];
            for v in &mut image {
                *v = BACKGROUND + cfg.noise_level * gaussian(&mut rng);
            }
            let mut mask = vec![0.0f64; 3 * s * s];
            let slice_phase = TAU * t as f64 / cfg.slices_per_scan as f64;
            for (ci, plan) in plans.iter().enumerate() {
                if !plan.window.contains(&t) {
                    continue;
                }
                for blob in &plan.blobs {
                    let cx = blob.cx + blob.vx * t as f64;
                    let cy = blob.cy + blob.vy * t as f64;
                    let pulse = 1.0 + PULSE * (slice_phase + blob.phase).sin();
                    let rx = blob.rx * pulse;
                    let ry = blob.ry * pulse;
                    let reach_x = rx * (1.0 + 2.0 * cfg.edge_softness);
                    let reach_y = ry * (1.0 + 2.0 * cfg.edge_softness);
                    let x0 = ((cx - reach_x).floor().max(0.0)) as usize;
                    let x1 = ((cx + reach_x).ceil().min((s - 1) as f64)) as usize;
                    let y0 = ((cy - reach_y).floor().max(0.0)) as usize;
                    let y1 = ((cy + reach_y).ceil().min((s - 1) as f64)) as usize;
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let dx = (x as f64 - cx) / rx;
                            let dy = (y as f64 - cy) / ry;
                            let r = (dx * dx + dy * dy).sqrt();
                            // Half the peak lands exactly on the mask edge.
                            let weight =
                                (0.5 + (1.0 - r) / (2.0 * cfg.edge_softness)).clamp(0.0, 1.0);
                            if weight > 0.0 {
                                // Class-specific interior texture: smooth
                                // waves, checkers, or directional stripes.
                                let texture = match ci {
                                    0 => {
                                        (0.35 * x as f64 + blob.tx).sin()
                                            * (0.3 * y as f64 + blob.ty).cos()
                                    }
                                    1 => {
                                        (1.1 * x as f64 + blob.tx).sin()
                                            * (1.0 * y as f64 + blob.ty).sin()
                                    }
                                    _ => (1.7 * (x + y) as f64 / 2.0 + blob.tx).sin(),
                                };
                                image[y * s + x] +=
                                    (blob.intensity + TEXTURE * texture) * weight;
                            }
                            if r <= 1.0 {
                                mask[ci * s * s + y * s + x] = 1.0;
                            }
                        }
                    }
                }
            }
            for v in &mut image {
                *v = v.clamp(0.0, 1.0);
            }
            samples.push(Sample {
                scan_id: scan_id.clone(),
                slice_index: t,
                image: Tensor::new(vec![1, s, s], image)?,
                mask: Tensor::new(vec![3, s, s], mask)?,
            });
        }
    }
    Ok(Dataset::new(samples))
}
