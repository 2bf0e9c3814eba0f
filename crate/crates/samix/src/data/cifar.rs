//! CIFAR-10 style binary records: one label byte followed by 3x32x32 pixel
//! bytes (red plane, green plane, blue plane), 3073 bytes per record.

use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, Sample};

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;

/// Load every record of a CIFAR binary file. Pixels are scaled to [0, 1]
/// by /255; record order is preserved.
pub fn load_cifar_binary(path: &Path) -> Result<Vec<Sample>, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(DataError::Format {
            offset: bytes.len() - bytes.len() % RECORD_BYTES,
            message: format!(
                "file length {} is not a multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    let mut samples = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for record in bytes.chunks_exact(RECORD_BYTES) {
        let label = record[0] as usize;
        let pixels: Vec<f64> = record[1..].iter().map(|b| *b as f64 / 255.0).collect();
        samples.push(Sample {
            image: Tensor::from_vec(&[3, 32, 32], pixels),
            label: Some(label),
        });
    }
    Ok(samples)
}

/// Write samples in the same binary record format. Images must be 32x32 and
/// labeled; pixels are quantized to bytes by rounding.
pub fn write_cifar_binary(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let mut bytes = Vec::with_capacity(samples.len() * RECORD_BYTES);
    for (i, s) in samples.iter().enumerate() {
        let label = s.label.ok_or_else(|| DataError::Format {
            offset: i * RECORD_BYTES,
            message: format!("sample {i} has no label"),
        })?;
        if label > u8::MAX as usize {
            return Err(DataError::Format {
                offset: i * RECORD_BYTES,
                message: format!("label {label} does not fit a byte"),
            });
        }
        if s.hw() != (32, 32) {
            return Err(DataError::Format {
                offset: i * RECORD_BYTES,
                message: format!("sample {i} is {:?}, records hold 32x32", s.hw()),
            });
        }
        bytes.push(label as u8);
        bytes.extend(
            s.image
                .data()
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
