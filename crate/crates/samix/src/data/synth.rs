//! Deterministic synthetic dataset: colored geometric shapes on textured
//! backgrounds. The class is the shape kind, so the whole training pipeline
//! can run and be tested without any external download.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

use super::Sample;

const MAX_CLASSES: usize = 16;

/// Generate `n` samples of `classes` shape kinds at `size`x`size` pixels.
/// Classes rotate round-robin, so counts are balanced to within one, and the
/// whole set is a pure function of `seed`.
pub fn synth_shapes(n: usize, classes: usize, size: usize, seed: u64) -> Vec<Sample> {
    assert!(
        (2..=MAX_CLASSES).contains(&classes),
        "synth_shapes: classes {classes} outside [2, {MAX_CLASSES}]"
    );
    assert!(size >= 16, "synth_shapes: size {size} below 16");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let class = i % classes;
            Sample {
                image: render(class, size, &mut rng),
                label: Some(class),
            }
        })
        .collect()
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = size as f64;
    // textured background: base color plus a low-amplitude diagonal wave
    let base: [f64; 3] = [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ];
    let freq = rng.gen_range(1.5..4.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();

    // shape color pushed away from the background so every class is visible
    let fg: [f64; 3] = [
        contrasting(base[0], rng),
        contrasting(base[1], rng),
        contrasting(base[2], rng),
    ];
    let cx = rng.gen_range(0.35..0.65) * s;
    let cy = rng.gen_range(0.35..0.65) * s;
    let radius = rng.gen_range(0.22..0.38) * s;

    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let wave =
                0.08 * (std::f64::consts::TAU * freq * (dx * x as f64 + dy * y as f64) / s + phase)
                    .sin();
            let u = (x as f64 - cx) / radius;
            let v = (y as f64 - cy) / radius;
            let inside = shape_contains(class, u, v);
            for c in 0..3 {
                let val = if inside { fg[c] } else { base[c] + wave };
                data[(c * size + y) * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

fn contrasting(bg: f64, rng: &mut ChaCha8Rng) -> f64 {
    let flipped = 1.0 - bg;
    (flipped + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
}

/// Membership test for shape kind `class` in normalized coordinates
/// (u, v) in [-1, 1] around the shape center.
fn shape_contains(class: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v >= -0.8 && v <= 0.8 && u.abs() <= (0.8 - v) * 0.6,
        3 => u.abs().max(v.abs()) <= 0.9 && (u.abs() <= 0.3 || v.abs() <= 0.3),
        4 => (0.55..=0.95).contains(&r),
        5 => u.abs() + v.abs() <= 1.0,
        6 => u.abs() <= 0.95 && v.abs() <= 0.35,
        7 => v.abs() <= 0.95 && u.abs() <= 0.35,
        8 => u.abs().max(v.abs()) <= 0.95 && (u.abs() - v.abs()).abs() <= 0.3,
        9 => {
            let m = u.abs().max(v.abs());
            (0.5..=0.9).contains(&m)
        }
        10 => r <= 1.0 && v >= 0.0,
        11 => u.abs().max(v.abs()) <= 0.9 && (u > 0.0) != (v > 0.0),
        12 => r <= 1.0 && (3.0 * std::f64::consts::PI * v).sin() > 0.0,
        13 => r <= 1.0 && (3.0 * std::f64::consts::PI * u).sin() > 0.0,
        14 => r <= 0.35 || (0.7..=0.95).contains(&r),
        15 => u.abs().max(v.abs()) <= 1.0 && u.abs() + v.abs() >= 1.1,
        _ => unreachable!("shape kind out of range"),
    }
}
