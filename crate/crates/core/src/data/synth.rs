//! Synthetic datasets: Gaussian blobs for fast property tests and
//! procedurally generated image sets for full training experiments when no
//! real image corpus is on disk.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Gaussian clusters: class `c` is `N(mu_c, I)` in `dim` dimensions, with
/// `|mu_c| = separation`. `separation = 0` makes all class-conditional
/// distributions identical.
pub fn synthetic_blobs(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 || classes == 0 || dim == 0 {
        return Err(Error::Config(
            "blob generation needs positive n_per_class, classes, and dim".into(),
        ));
    }
    let mut rng = stream(seed, "blobs");

    // Class means: random directions scaled to `separation`.
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut m: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut m {
            *v *= separation / norm;
        }
        means.push(m);
    }

    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..n_per_class {
            for d in 0..dim {
                data.push(means[c][d] + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
    }

    // Shuffle example order so splits and mini-batches mix classes.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let tensor = Tensor::from_vec(&[n, dim], data)?;
    let base = Dataset::new(tensor, labels, classes, "blobs")?;
    Ok(base.subset(&order, "blobs"))
}

/// Parameters for the procedural image generator.
///
/// Images are dark-background glyphs: each class prototype is a handful of
/// bright smooth bumps on black, and an example is its prototype plus
/// per-pixel Gaussian noise, clipped to `[0, 1]` and quantized to the 8-bit
/// grid so the IDX/CIFAR codecs round-trip exactly. The sparse background
/// keeps inputs conditioned like real digit data. `contrast` scales bump
/// brightness and `noise` is the per-pixel sigma: together they set how
/// hard the task is (the noise is also what makes individual examples
/// memorable under corrupted labels).
#[derive(Debug, Clone, Copy)]
pub struct SyntheticImageSpec {
    pub n_per_class: usize,
    pub classes: usize,
    /// 0 for grayscale `[N, H, W]`; otherwise `[N, C, H, W]`.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generate a balanced, shuffled image classification dataset.
pub fn synthetic_images(spec: &SyntheticImageSpec) -> Result<Dataset> {
    if spec.n_per_class == 0 || spec.classes == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Config(
            "image generation needs positive sizes and class count".into(),
        ));
    }
    let planes = spec.channels.max(1);
    let plane_len = spec.height * spec.width;
    let mut rng = stream(spec.seed, "synthetic-images");

    // Per-class prototypes: 5 Gaussian bumps at class-specific positions.
    // Color images share bump positions across channels with per-channel
    // amplitudes, giving conv layers real spatial/spectral structure.
    let bumps = 5;
    let mut prototypes = vec![vec![0.0; planes * plane_len]; spec.classes];
    for proto in prototypes.iter_mut() {
        for _ in 0..bumps {
            let cy = rng.gen_range(0.15..0.85) * spec.height as f64;
            let cx = rng.gen_range(0.15..0.85) * spec.width as f64;
            let sigma = rng.gen_range(0.06..0.14) * spec.height.max(spec.width) as f64;
            let amps: Vec<f64> = (0..planes)
                .map(|_| spec.contrast * rng.gen_range(0.5..1.0))
                .collect();
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    for (p, &amp) in amps.iter().enumerate() {
                        proto[p * plane_len + y * spec.width + x] += amp * g;
                    }
                }
            }
        }
    }

    let n = spec.n_per_class * spec.classes;
    let mut data = Vec::with_capacity(n * planes * plane_len);
    let mut labels = Vec::with_capacity(n);
    for (c, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &p in proto {
                let eps: f64 = rng.sample(StandardNormal);
                data.push(quantize(p + spec.noise * eps));
            }
            labels.push(c);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let shape: Vec<usize> = if spec.channels == 0 {
        vec![n, spec.height, spec.width]
    } else {
        vec![n, spec.channels, spec.height, spec.width]
    };
    let base = Dataset::new(Tensor::from_vec(&shape, data)?, labels, spec.classes, "synth")?;
    Ok(base.subset(&order, "synth"))
}
