//! Desk-scale backbone: four conv stages with a feature tap after the third
//! stage, plus the projector, classifier, and cluster heads.

use crate::nn::{BatchNorm, Conv3x3, Linear};
use crate::tensor::{Tape, Tensor};

/// Stage channel widths at 32x32 input; the stage-3 tap is then 64x8x8 and
/// the global-average-pooled embedding is 128-d.
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const EMBED_DIM: usize = 128;
pub const PROJECT_DIM: usize = 64;
/// Channels at the feature tap (stage 3).
pub const TAP_CHANNELS: usize = 64;

struct Stage {
    conv: Conv3x3,
    bn: BatchNorm,
}

/// Four stages of conv3x3 + batchnorm + ReLU, pooling after every stage.
/// The tap is the stage-3 activation before its pool.
pub struct Encoder {
    stages: Vec<Stage>,
}

pub struct EncoderOut {
    /// `[n, 64, h/4, w/4]` activation at the tap.
    pub features: Tensor,
    /// `[n, 128]` pooled embedding.
    pub embedding: Tensor,
}

impl Encoder {
    pub fn new(rng: &mut dyn rand::RngCore) -> Encoder {
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for c_out in STAGE_CHANNELS {
            stages.push(Stage {
                conv: Conv3x3::new(c_in, c_out, rng),
                bn: BatchNorm::new(c_out),
            });
            c_in = c_out;
        }
        Encoder { stages }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, training: bool) -> EncoderOut {
        let mut h = x.clone();
        let mut tap = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let a = tape.relu(&stage.bn.forward(tape, &stage.conv.forward(tape, &h), training));
            if i == 2 {
                tap = Some(a.clone());
            }
            h = tape.avg_pool2(&a);
        }
        EncoderOut {
            features: tap.expect("encoder has a third stage"),
            embedding: tape.global_avg_pool(&h),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = Vec::new();
        for s in &self.stages {
            p.push(s.conv.weight.clone());
            p.push(s.bn.gamma.clone());
            p.push(s.bn.beta.clone());
        }
        p
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.params() {
            p.set_requires_grad(flag);
        }
    }

    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("stage{i}.conv.weight"), s.conv.weight.shape(), s.conv.weight.to_vec()));
            out.push((format!("stage{i}.bn.gamma"), s.bn.gamma.shape(), s.bn.gamma.to_vec()));
            out.push((format!("stage{i}.bn.beta"), s.bn.beta.shape(), s.bn.beta.to_vec()));
            let stats = s.bn.stats.borrow();
            let ch = stats.running_mean.len();
            out.push((format!("stage{i}.bn.running_mean"), vec![ch], stats.running_mean.clone()));
            out.push((format!("stage{i}.bn.running_var"), vec![ch], stats.running_var.clone()));
        }
        out
    }

    pub fn import_state(
        &self,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<(), crate::mixer::StateError> {
        for (i, s) in self.stages.iter().enumerate() {
            assign(entries, &format!("stage{i}.conv.weight"), &s.conv.weight)?;
            assign(entries, &format!("stage{i}.bn.gamma"), &s.bn.gamma)?;
            assign(entries, &format!("stage{i}.bn.beta"), &s.bn.beta)?;
            let mut stats = s.bn.stats.borrow_mut();
            assign_buffer(entries, &format!("stage{i}.bn.running_mean"), &mut stats.running_mean)?;
            assign_buffer(entries, &format!("stage{i}.bn.running_var"), &mut stats.running_var)?;
        }
        Ok(())
    }
}

pub(crate) fn assign(
    entries: &[(String, Vec<usize>, Vec<f64>)],
    name: &str,
    target: &Tensor,
) -> Result<(), crate::mixer::StateError> {
    let (_, shape, data) = entries
        .iter()
        .find(|(n, _, _)| n == name)
        .ok_or_else(|| crate::mixer::StateError::Missing { name: name.into() })?;
    if *shape != target.shape() {
        return Err(crate::mixer::StateError::ShapeMismatch {
            name: name.into(),
            expected: target.shape(),
            got: shape.clone(),
        });
    }
    target.update_data(|d| d.copy_from_slice(data));
    Ok(())
}

pub(crate) fn assign_buffer(
    entries: &[(String, Vec<usize>, Vec<f64>)],
    name: &str,
    target: &mut [f64],
) -> Result<(), crate::mixer::StateError> {
    let (_, shape, data) = entries
        .iter()
        .find(|(n, _, _)| n == name)
        .ok_or_else(|| crate::mixer::StateError::Missing { name: name.into() })?;
    if *shape != [target.len()] {
        return Err(crate::mixer::StateError::ShapeMismatch {
            name: name.into(),
            expected: vec![target.len()],
            got: shape.clone(),
        });
    }
    target.copy_from_slice(data);
    Ok(())
}

/// Projection, classification, and cluster heads over the 128-d embedding.
pub struct Heads {
    pub proj1: Linear,
    pub proj2: Linear,
    pub classifier: Linear,
    pub cluster: Linear,
}

impl Heads {
    pub fn new(num_classes: usize, num_clusters: usize, rng: &mut dyn rand::RngCore) -> Heads {
        Heads {
            proj1: Linear::new(EMBED_DIM, EMBED_DIM, rng),
            proj2: Linear::new(EMBED_DIM, PROJECT_DIM, rng),
            classifier: Linear::new(EMBED_DIM, num_classes, rng),
            cluster: Linear::new(EMBED_DIM, num_clusters, rng),
        }
    }

    /// Two-layer MLP projection, rows L2-normalized onto the unit sphere.
    pub fn project(&self, tape: &Tape, embedding: &Tensor) -> Tensor {
        let h = tape.relu(&self.proj1.forward(tape, embedding));
        tape.l2_normalize(&self.proj2.forward(tape, &h))
    }

    pub fn classify(&self, tape: &Tape, embedding: &Tensor) -> Tensor {
        self.classifier.forward(tape, embedding)
    }

    pub fn cluster_logits(&self, tape: &Tape, embedding: &Tensor) -> Tensor {
        self.cluster.forward(tape, embedding)
    }

    /// Parameters of the projector and classifier (everything the encoder
    /// objective trains). The cluster head is deliberately separate: it is
    /// optimized with the generation objective only.
    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.proj1.weight.clone(),
            self.proj1.bias.clone(),
            self.proj2.weight.clone(),
            self.proj2.bias.clone(),
            self.classifier.weight.clone(),
            self.classifier.bias.clone(),
        ]
    }

    pub fn cluster_params(&self) -> Vec<Tensor> {
        vec![self.cluster.weight.clone(), self.cluster.bias.clone()]
    }

    pub fn all_params(&self) -> Vec<Tensor> {
        let mut p = self.params();
        p.extend(self.cluster_params());
        p
    }

    pub fn set_requires_grad(&self, flag: bool) {
        for p in self.all_params() {
            p.set_requires_grad(flag);
        }
    }

    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let named: [(&str, &Linear); 4] = [
            ("proj1", &self.proj1),
            ("proj2", &self.proj2),
            ("classifier", &self.classifier),
            ("cluster", &self.cluster),
        ];
        let mut out = Vec::new();
        for (name, layer) in named {
            out.push((format!("{name}.weight"), layer.weight.shape(), layer.weight.to_vec()));
            out.push((format!("{name}.bias"), layer.bias.shape(), layer.bias.to_vec()));
        }
        out
    }

    pub fn import_state(
        &self,
        entries: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<(), crate::mixer::StateError> {
        let named: [(&str, &Linear); 4] = [
            ("proj1", &self.proj1),
            ("proj2", &self.proj2),
            ("classifier", &self.classifier),
            ("cluster", &self.cluster),
        ];
        for (name, layer) in named {
            assign(entries, &format!("{name}.weight"), &layer.weight)?;
            assign(entries, &format!("{name}.bias"), &layer.bias)?;
        }
        Ok(())
    }
}

/// One sample's tap features `[c, h, w]` out of a `[n, c, h, w]` batch.
pub fn sample_features(tape: &Tape, features: &Tensor, index: usize) -> Tensor {
    let shape = features.shape();
    assert_eq!(shape.len(), 4, "sample_features: expected [n, c, h, w]");
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(index < n, "sample_features: index {index} out of {n}");
    let flat = tape.reshape(features, &[n, c * h * w]);
    tape.reshape(&tape.slice_rows(&flat, index, index + 1), &[c, h, w])
}

/// One sample's row `[d]` out of a `[n, d]` batch.
pub fn sample_row(tape: &Tape, rows: &Tensor, index: usize) -> Tensor {
    let shape = rows.shape();
    assert_eq!(shape.len(), 2, "sample_row: expected [n, d]");
    assert!(index < shape[0], "sample_row: index {index} out of {}", shape[0]);
    tape.reshape(&tape.slice_rows(rows, index, index + 1), &[shape[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::new(&mut rng);
        let heads = Heads::new(4, 8, &mut rng);
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let out = encoder.forward(&tape, &x, true);
        let logits = heads.classify(&tape, &out.embedding);
        assert!(logits.data().iter().all(|v| *v == 0.0), "bias starts at zero");
    }

    #[test]
    fn output_shapes_and_projector_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let encoder = Encoder::new(&mut rng);
        let heads = Heads::new(4, 8, &mut rng);
        let tape = Tape::new();
        let x = Tensor::from_vec(&[3, 3, 32, 32], rand_vec(&mut rng, 3 * 3 * 1024, 0.0, 1.0));
        let out = encoder.forward(&tape, &x, true);
        assert_eq!(out.features.shape(), vec![3, 64, 8, 8]);
        assert_eq!(out.embedding.shape(), vec![3, 128]);
        let logits = heads.classify(&tape, &out.embedding);
        assert_eq!(logits.shape(), vec![3, 4]);
        let projected = heads.project(&tape, &out.embedding);
        assert_eq!(projected.shape(), vec![3, 64]);
        let pd = projected.to_vec();
        for row in pd.chunks(64) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "projector row norm {norm}");
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let encoder = Encoder::new(&mut rng);
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3, 16, 16], rand_vec(&mut rng, 768, 0.0, 1.0));
        let a = encoder.forward(&tape, &x, false).embedding;
        let b = encoder.forward(&tape, &x, false).embedding;
        let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }

    #[test]
    fn gradcheck_through_full_forward() {
        let mut wrng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::from_vec(&[1, 3, 16, 16], rand_vec(&mut wrng, 768, 0.0, 1.0));
        let coeffs = Tensor::from_vec(&[1, 4], rand_vec(&mut wrng, 4, -1.0, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let encoder = Encoder::new(&mut rng);
        let heads = Heads::new(4, 8, &mut rng);
        let err = gradcheck(
            |t, x| {
                let out = encoder.forward(t, x, true);
                let logits = heads.classify(t, &out.embedding);
                t.sum_all(&t.mul(&logits, &coeffs))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "encoder gradcheck error {err}");
    }

    #[test]
    fn state_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Encoder::new(&mut rng);
        let b = Encoder::new(&mut rng);
        b.import_state(&a.export_state()).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            let ba: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = pb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb);
        }
        let ha = Heads::new(5, 6, &mut rng);
        let hb = Heads::new(5, 6, &mut rng);
        hb.import_state(&ha.export_state()).unwrap();
        for (pa, pb) in ha.all_params().iter().zip(hb.all_params().iter()) {
            assert_eq!(pa.to_vec(), pb.to_vec());
        }
    }

    #[test]
    fn sample_helpers_slice_correct_rows() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let batch = Tensor::from_vec(&[2, 3, 2, 2], data);
        let second = sample_features(&tape, &batch, 1);
        assert_eq!(second.shape(), vec![3, 2, 2]);
        assert_eq!(second.to_vec(), (12..24).map(|v| v as f64).collect::<Vec<f64>>());
        let rows = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let mid = sample_row(&tape, &rows, 1);
        assert_eq!(mid.to_vec(), vec![2.0, 3.0]);
    }
}
