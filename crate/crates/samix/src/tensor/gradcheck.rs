use super::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradcheckError {
    /// An intermediate value went non-finite; carries the producing op.
    NonFinite { op: &'static str },
}

impl std::fmt::Display for GradcheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradcheckError::NonFinite { op } => {
                write!(f, "non-finite intermediate produced by op `{op}`")
            }
        }
    }
}

impl std::error::Error for GradcheckError {}

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences at `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must be deterministic (run dropout in eval mode); it receives a fresh
/// tape per evaluation and the probe point as its tensor argument.
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64, GradcheckError>
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    gradcheck_with_fault(f, x, step, None)
}

/// [`gradcheck`] with an optional backward-rule fault injected by op name,
/// so a diagnostics driver can prove it would catch a corrupted rule.
pub fn gradcheck_with_fault<F>(
    f: F,
    x: &Tensor,
    step: f64,
    fault: Option<&str>,
) -> Result<f64, GradcheckError>
where
    F: Fn(&Tape, &Tensor) -> Tensor,
{
    assert!(step > 0.0, "gradcheck: step must be positive, got {step}");

    let tape = Tape::new();
    let probe = Tensor::param(&x.shape(), x.to_vec());
    let y = f(&tape, &probe);
    assert_eq!(
        y.numel(),
        1,
        "gradcheck: function must return a scalar, got shape {:?}",
        y.shape()
    );
    if let Some(op) = tape.first_non_finite_op() {
        return Err(GradcheckError::NonFinite { op });
    }
    if !y.all_finite() {
        return Err(GradcheckError::NonFinite { op: "output" });
    }
    tape.backward_with_fault(&y, fault);
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; probe.numel()]);

    let base = x.to_vec();
    let eval = |data: Vec<f64>| -> Result<f64, GradcheckError> {
        let t = Tape::new();
        t.set_recording(false);
        let point = Tensor::from_vec(&x.shape(), data);
        let out = f(&t, &point);
        if !out.all_finite() {
            return Err(GradcheckError::NonFinite { op: "output" });
        }
        Ok(out.value())
    };

    let mut max_err: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
