use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClientDataset, DataError, Result};

/// Class `k` draws `SHAPE_NAMES[k]`.
pub const SHAPE_NAMES: [&str; 10] = [
    "filled_rect",
    "hollow_rect",
    "disk",
    "cross",
    "h_stripes",
    "v_stripes",
    "ring",
    "diagonal",
    "triangle",
    "checker",
];

/// Procedural single-channel images whose class decides the shape drawn.
///
/// Position, size and the foreground/background intensities are random.
/// Labels cycle through the classes, so every class gets `n / classes`
/// images (the first `n % classes` classes get one more). Output depends
/// only on the arguments.
pub fn gen_shapes_dataset(n: usize, size: usize, classes: usize, seed: u64) -> Result<ClientDataset> {
    if size < 8 {
        return Err(DataError::Invalid(format!("image size must be >= 8, got {size}")));
    }
    if !(2..=10).contains(&classes) {
        return Err(DataError::Invalid(format!("classes must be in 2..=10, got {classes}")));
    }
    if n == 0 {
        return Err(DataError::Invalid("need at least one image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        pixels.extend(render(class, size, &mut rng));
        labels.push(class);
    }
    ClientDataset::new([1, size, size], pixels, labels)
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let bg = rng.random_range(0.0..0.2);
    let fg = rng.random_range(0.6..1.0);
    let cx = rng.random_range(0.35 * s..0.65 * s);
    let cy = rng.random_range(0.35 * s..0.65 * s);
    let r = rng.random_range(0.22 * s..0.38 * s);
    let aspect = rng.random_range(0.6..1.0);
    let period = rng.random_range(2..=3) as f64;
    let phase = rng.random_range(0.0..period);
    let thick = (s / 10.0).max(1.0);

    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let (dx, dy) = (x - cx, y - cy);
            let dist = (dx * dx + dy * dy).sqrt();
            let (a, b) = (r, r * aspect);
            let inside = match class {
                0 => dx.abs() <= a && dy.abs() <= b,
                1 => dx.abs() <= a && dy.abs() <= b && (dx.abs() > a - thick || dy.abs() > b - thick),
                2 => dist <= r,
                3 => (dx.abs() <= 0.5 * thick + 0.25 && dy.abs() <= r) || (dy.abs() <= 0.5 * thick + 0.25 && dx.abs() <= r),
                4 => ((y + phase) / period).floor() as i64 % 2 == 0,
                5 => ((x + phase) / period).floor() as i64 % 2 == 0,
                6 => dist <= r && dist > r - thick - 0.2,
                7 => (dx - dy).abs() <= 0.5 * thick + 0.3 && dx.abs() <= r,
                8 => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
                _ => {
                    let cell = (period - 1.0).max(1.0);
                    (((x + phase) / cell).floor() as i64 + ((y + phase) / cell).floor() as i64) % 2 == 0
                }
            };
            out.push(if inside { fg } else { bg });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_shapes_dataset(40, 8, 10, 3).unwrap();
        let b = gen_shapes_dataset(40, 8, 10, 3).unwrap();
        let bits = |d: &ClientDataset| d.pixels().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&gen_shapes_dataset(40, 8, 10, 4).unwrap()));
    }

    #[test]
    fn classes_are_stratified() {
        let d = gen_shapes_dataset(100, 8, 4, 0).unwrap();
        for c in 0..4 {
            assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 25);
        }
    }

    #[test]
    fn every_shape_has_foreground_and_background() {
        let d = gen_shapes_dataset(200, 12, 10, 1).unwrap();
        for i in 0..d.len() {
            let img = d.image(i);
            let hi = img.iter().filter(|&&p| p >= 0.6).count();
            assert!(hi > 0 && hi < img.len(), "class {} image {i} is flat", d.labels()[i]);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(gen_shapes_dataset(10, 7, 4, 0).is_err());
        assert!(gen_shapes_dataset(10, 8, 1, 0).is_err());
        assert!(gen_shapes_dataset(10, 8, 11, 0).is_err());
        assert!(gen_shapes_dataset(0, 8, 4, 0).is_err());
    }
}
