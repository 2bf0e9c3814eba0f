//! Datasets and augmentation: CIFAR-format binary loading, a synthetic
//! shapes dataset, two-view augmentation for contrastive training, and
//! Beta-distributed mixing ratios.

mod augment;
mod cifar;
mod lambda;
mod synth;

pub use augment::{apply_view, sample_view_params, two_view, ViewPair, ViewParams};
pub use cifar::{load_cifar_binary, write_cifar_binary};
pub use lambda::LambdaSampler;
pub use synth::synth_shapes;

use crate::tensor::Tensor;

/// One image with an optional class label. Pixels are `[3, h, w]` in [0, 1].
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: Option<usize>,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        assert_eq!(s.len(), 3, "sample image must be [c, h, w], got {s:?}");
        (s[1], s[2])
    }
}

/// Errors for on-disk dataset formats.
#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    Format { offset: usize, message: String },
}

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {e}"),
            DataError::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

/// Stack sample images into one `[n, 3, h, w]` batch tensor.
pub fn batch_images(samples: &[&Sample]) -> Tensor {
    assert!(!samples.is_empty(), "batch_images: empty batch");
    let (h, w) = samples[0].hw();
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        assert_eq!(s.hw(), (h, w), "batch_images: mixed image sizes");
        data.extend_from_slice(&s.image.data());
    }
    Tensor::from_vec(&[samples.len(), 3, h, w], data)
}
