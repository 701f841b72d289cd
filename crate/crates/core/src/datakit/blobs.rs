use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabeledImageSet, Split};
use crate::error::{FedError, Result};
use crate::models::ImageShape;

/// Class centers with pairwise distance `separation`: scaled basis vectors
/// when the dimension allows, otherwise evenly spaced on a circle (or a line
/// in one dimension).
pub fn blob_centers(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let mut v = vec![0.0; dim];
            if dim >= num_classes {
                v[c] = separation / 2f64.sqrt();
            } else if dim == 1 {
                v[0] = separation * (c as f64 - (num_classes - 1) as f64 / 2.0);
            } else {
                let r = separation / (2.0 * (std::f64::consts::PI / num_classes as f64).sin());
                let a = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
                v[0] = r * a.cos();
                v[1] = r * a.sin();
            }
            v
        })
        .collect()
}

/// `per_class` unit-variance Gaussian draws around each class center, scaled
/// into [−1, 1] and laid out in `shape` (use a `1×1×d` shape for plain
/// vectors). Examples are interleaved by class.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    shape: ImageShape,
    separation: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    if !(separation > 0.0) || num_classes == 0 || shape.numel() == 0 {
        return Err(FedError::Invalid(
            "blobs need a positive separation, classes and dimensions".into(),
        ));
    }
    let dim = shape.numel();
    let centers = blob_centers(num_classes, dim, separation);
    let reach = centers.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())) + 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            images.extend(center.iter().map(|&m| {
                let x = m + rng.sample::<f64, _>(StandardNormal);
                (x / reach).clamp(-1.0, 1.0)
            }));
            labels.push(c);
        }
    }
    LabeledImageSet::new(shape, images, labels, None, Split::Train)
}
