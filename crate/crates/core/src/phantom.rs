//! Synthetic tubule phantoms with exact ground truth.
//!
//! A phantom is a dark background carrying bright elliptical-annulus
//! membranes with dimmer lumens. Each full tubule disk (membrane plus
//! lumen) is one labeled instance. The clean rendering is modulated by a
//! smooth mean-1 radial-quadratic bias field (brighter toward the image
//! center) and corrupted with additive Gaussian noise; the clean image
//! and the exact field are returned alongside for oracle tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imagedata::{GrayImage, InstanceMask};
use crate::inhomogeneity::BiasField;
use crate::seed::stream_rng;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("could not place {wanted} tubules after {attempts} attempts (placed {placed})")]
    PlacementFailed {
        wanted: usize,
        placed: usize,
        attempts: usize,
    },
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    /// Square image size in pixels; must divide by 16 for network use.
    pub size: usize,
    /// Inclusive range of tubule counts.
    pub n_tubules: (usize, usize),
    pub membrane_intensity: f32,
    pub lumen_intensity: f32,
    pub background_intensity: f32,
    /// Uniform jitter applied to each intensity level.
    pub intensity_jitter: f32,
    /// Membrane ring thickness range in pixels.
    pub membrane_thickness: (f32, f32),
    /// Full ellipse axis length range in pixels (semi-axes are half).
    pub axis_range: (f32, f32),
    pub noise_sigma: f32,
    /// Peak deviation of the multiplicative field before normalization.
    pub bias_amplitude: f32,
    /// Minimum gap between the bounding circles of two tubules.
    pub min_separation: f32,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 128,
            n_tubules: (3, 8),
            membrane_intensity: 0.8,
            lumen_intensity: 0.2,
            background_intensity: 0.1,
            intensity_jitter: 0.05,
            membrane_thickness: (2.0, 4.0),
            axis_range: (8.0, 24.0),
            noise_sigma: 0.03,
            bias_amplitude: 0.4,
            min_separation: 3.0,
        }
    }
}

impl PhantomConfig {
    /// Desk-scale phantoms for 64x64 training runs.
    pub fn desk() -> Self {
        Self {
            size: 64,
            n_tubules: (3, 6),
            axis_range: (8.0, 20.0),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.size < 16 {
            return Err(PhantomError::InvalidConfig("size below 16".into()));
        }
        if self.n_tubules.0 > self.n_tubules.1 {
            return Err(PhantomError::InvalidConfig("empty tubule count range".into()));
        }
        if !(self.bias_amplitude >= 0.0 && self.bias_amplitude < 1.0) {
            return Err(PhantomError::InvalidConfig(
                "bias amplitude must lie in [0, 1)".into(),
            ));
        }
        if self.axis_range.0 < 4.0 || self.axis_range.0 > self.axis_range.1 {
            return Err(PhantomError::InvalidConfig("bad axis range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ellipse {
    cy: f64,
    cx: f64,
    /// Semi-axes.
    a: f64,
    b: f64,
    angle: f64,
    thickness: f64,
    membrane: f32,
    lumen: f32,
}

impl Ellipse {
    fn bounding_radius(&self) -> f64 {
        self.a.max(self.b)
    }

    /// Normalized squared radius of a point in ellipse coordinates for
    /// the given semi-axes.
    fn rho2(&self, y: f64, x: f64, a: f64, b: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (sin, cos) = self.angle.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / a).powi(2) + (v / b).powi(2)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        self.rho2(y, x, self.a, self.b) <= 1.0
    }

    fn in_lumen(&self, y: f64, x: f64) -> bool {
        let (ia, ib) = (self.a - self.thickness, self.b - self.thickness);
        ia > 0.5 && ib > 0.5 && self.rho2(y, x, ia, ib) <= 1.0
    }
}

/// One generated phantom with every ground-truth layer.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    /// Biased, noisy rendering as a microscope would see it.
    pub observed: GrayImage,
    /// Piecewise rendering before bias and noise.
    pub clean: GrayImage,
    pub mask: InstanceMask,
    /// Exact multiplicative field applied to `clean`.
    pub field: BiasField,
}

impl PhantomSample {
    pub fn pair(&self) -> (&GrayImage, &InstanceMask) {
        (&self.observed, &self.mask)
    }
}

const PLACEMENT_ATTEMPTS: usize = 400;

fn jitter(center: f32, amount: f32, rng: &mut ChaCha8Rng) -> f32 {
    if amount == 0.0 {
        center
    } else {
        (center + rng.random_range(-amount..=amount)).clamp(0.0, 1.0)
    }
}

/// Generate one phantom from an explicit RNG.
pub fn generate_phantom(
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PhantomSample, PhantomError> {
    cfg.validate()?;
    let size = cfg.size;
    let wanted = if cfg.n_tubules.0 == cfg.n_tubules.1 {
        cfg.n_tubules.0
    } else {
        rng.random_range(cfg.n_tubules.0..=cfg.n_tubules.1)
    };
    let background = jitter(cfg.background_intensity, cfg.intensity_jitter, rng);

    // Rejection-sample non-overlapping ellipses. Acceptance keeps a
    // bounding-circle gap, so instances never touch.
    let mut tubules: Vec<Ellipse> = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while tubules.len() < wanted {
        if attempts >= PLACEMENT_ATTEMPTS {
            if tubules.len() >= cfg.n_tubules.0 {
                break;
            }
            return Err(PhantomError::PlacementFailed {
                wanted,
                placed: tubules.len(),
                attempts,
            });
        }
        attempts += 1;
        let a = f64::from(rng.random_range(cfg.axis_range.0..=cfg.axis_range.1)) / 2.0;
        let b = f64::from(rng.random_range(cfg.axis_range.0..=cfg.axis_range.1)) / 2.0;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let r = a.max(b);
        let margin = r + 1.0;
        if 2.0 * margin + 2.0 >= size as f64 {
            continue;
        }
        let cy = rng.random_range(margin..(size as f64 - margin));
        let cx = rng.random_range(margin..(size as f64 - margin));
        let t_max = f64::from(cfg.membrane_thickness.1).min(a.min(b) - 1.5);
        if t_max < f64::from(cfg.membrane_thickness.0) {
            continue;
        }
        let thickness = rng.random_range(f64::from(cfg.membrane_thickness.0)..=t_max);
        let candidate = Ellipse {
            cy,
            cx,
            a,
            b,
            angle,
            thickness,
            membrane: jitter(cfg.membrane_intensity, cfg.intensity_jitter, rng),
            lumen: jitter(cfg.lumen_intensity, cfg.intensity_jitter, rng),
        };
        let clear = tubules.iter().all(|e| {
            let d = ((e.cy - cy).powi(2) + (e.cx - cx).powi(2)).sqrt();
            d > e.bounding_radius() + candidate.bounding_radius() + f64::from(cfg.min_separation)
        });
        if clear {
            tubules.push(candidate);
        }
    }

    let mut clean = vec![background; size * size];
    let mut labels = vec![0u32; size * size];
    for (k, e) in tubules.iter().enumerate() {
        let label = (k + 1) as u32;
        let r = e.bounding_radius().ceil() as i64 + 1;
        let (cy, cx) = (e.cy.round() as i64, e.cx.round() as i64);
        for y in (cy - r).max(0)..(cy + r + 1).min(size as i64) {
            for x in (cx - r).max(0)..(cx + r + 1).min(size as i64) {
                let (fy, fx) = (y as f64, x as f64);
                if e.contains(fy, fx) {
                    let idx = y as usize * size + x as usize;
                    labels[idx] = label;
                    clean[idx] = if e.in_lumen(fy, fx) { e.lumen } else { e.membrane };
                }
            }
        }
    }

    let field = radial_bias_field(size, size, cfg.bias_amplitude);
    let noise = Normal::new(0.0f64, f64::from(cfg.noise_sigma)).map_err(|_| {
        PhantomError::InvalidConfig("noise sigma must be non-negative".into())
    })?;
    let mut observed = Vec::with_capacity(size * size);
    for (i, &c) in clean.iter().enumerate() {
        let w = f64::from(field.as_slice()[i]);
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        observed.push(((f64::from(c) * w + n) as f32).clamp(0.0, 1.0));
    }

    Ok(PhantomSample {
        observed: GrayImage::new_unchecked(size, size, observed),
        clean: GrayImage::new_unchecked(size, size, clean),
        mask: InstanceMask::new(size, size, labels).expect("sized"),
        field,
    })
}

/// Smooth radial-quadratic field, brighter at the image center, mean 1.
pub fn radial_bias_field(height: usize, width: usize, amplitude: f32) -> BiasField {
    let a = f64::from(amplitude);
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let r2 = cy * cy + cx * cx;
    let mut weights = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let rho2 = if r2 > 0.0 {
                ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / r2
            } else {
                0.0
            };
            weights.push((1.0 + a * (1.0 - 2.0 * rho2)) as f32);
        }
    }
    BiasField::from_weights(1, height, width, weights)
}

/// Deterministic dataset: phantom `i` draws from RNG stream `i` of the
/// seed, so samples are independent and order-stable.
pub fn generate_dataset(
    n: usize,
    cfg: &PhantomConfig,
    seed: u64,
) -> Result<Vec<PhantomSample>, PhantomError> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            generate_phantom(cfg, &mut rng)
        })
        .collect()
}
