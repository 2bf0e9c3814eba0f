//! Two-view augmentation for contrastive training: random resized crop,
//! horizontal flip, brightness/contrast jitter, and random grayscale.
//!
//! Parameter sampling and application are split so a logged [`ViewParams`]
//! replays to a bit-identical view.

use rand::Rng;

use crate::tensor::{bilinear_resize_plane, Tensor};

use super::Sample;

/// Everything needed to reproduce one augmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    /// Crop rectangle (y0, x0, height, width) in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
    /// Brightness and contrast factors, when jitter fires.
    pub jitter: Option<(f64, f64)>,
    pub grayscale: bool,
}

impl ViewParams {
    /// The do-nothing view: full-frame crop, no flip, no color changes.
    pub fn identity(h: usize, w: usize) -> ViewParams {
        ViewParams {
            crop: (0, 0, h, w),
            flip: false,
            jitter: None,
            grayscale: false,
        }
    }
}

/// A pair of independently augmented views of one source image.
pub struct ViewPair {
    pub view_q: Tensor,
    pub view_k: Tensor,
    pub source_index: usize,
}

/// Draw augmentation parameters: random resized crop (area scale in
/// [0.2, 1.0], aspect in [3/4, 4/3]), flip p=0.5, brightness/contrast
/// jitter of strength 0.4 at p=0.8, grayscale at p=0.2.
pub fn sample_view_params(h: usize, w: usize, rng: &mut dyn rand::RngCore) -> ViewParams {
    let crop = sample_crop(h, w, rng);
    let flip = rng.gen::<f64>() < 0.5;
    let jitter = if rng.gen::<f64>() < 0.8 {
        Some((rng.gen_range(0.6..1.4), rng.gen_range(0.6..1.4)))
    } else {
        None
    };
    let grayscale = rng.gen::<f64>() < 0.2;
    ViewParams {
        crop,
        flip,
        jitter,
        grayscale,
    }
}

fn sample_crop(h: usize, w: usize, rng: &mut dyn rand::RngCore) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(0.2..1.0);
        let aspect = rng.gen_range(0.75..(4.0 / 3.0));
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let y0 = rng.gen_range(0..=h - ch);
            let x0 = rng.gen_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Apply logged parameters to an image; deterministic in `params`.
/// Pixels are clamped back to [0, 1] after each color operation.
pub fn apply_view(image: &Tensor, params: &ViewParams) -> Tensor {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "apply_view: image must be [c, h, w]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (y0, x0, ch, cw) = params.crop;
    assert!(
        y0 + ch <= h && x0 + cw <= w && ch >= 1 && cw >= 1,
        "apply_view: crop {params:?} outside {h}x{w}"
    );

    let src = image.data();
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(c);
    for ci in 0..c {
        let plane = &src[ci * h * w..][..h * w];
        let mut cropped = Vec::with_capacity(ch * cw);
        for y in y0..y0 + ch {
            cropped.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
        let mut resized = bilinear_resize_plane(&cropped, ch, cw, h, w);
        if params.flip {
            for row in resized.chunks_mut(w) {
                row.reverse();
            }
        }
        planes.push(resized);
    }

    if let Some((brightness, contrast)) = params.jitter {
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = (*v * brightness).clamp(0.0, 1.0);
            }
        }
        // contrast pivots on the mean gray level, as in standard jitter
        let mut mean = 0.0;
        for plane in &planes {
            for v in plane {
                mean += v;
            }
        }
        mean /= (c * h * w) as f64;
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
            }
        }
    }

    if params.grayscale && c == 3 {
        for i in 0..h * w {
            let luma = 0.299 * planes[0][i] + 0.587 * planes[1][i] + 0.114 * planes[2][i];
            let luma = luma.clamp(0.0, 1.0);
            planes[0][i] = luma;
            planes[1][i] = luma;
            planes[2][i] = luma;
        }
    }

    let mut data = Vec::with_capacity(c * h * w);
    for plane in planes {
        data.extend(plane);
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Two independently augmented views of the same source image.
pub fn two_view(sample: &Sample, source_index: usize, rng: &mut dyn rand::RngCore) -> ViewPair {
    let (h, w) = sample.hw();
    let pq = sample_view_params(h, w, rng);
    let pk = sample_view_params(h, w, rng);
    ViewPair {
        view_q: apply_view(&sample.image, &pq),
        view_k: apply_view(&sample.image, &pk),
        source_index,
    }
}
