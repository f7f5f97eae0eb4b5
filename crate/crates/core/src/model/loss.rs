use ndarray::NdFloat;

/// Scores are clamped into `[CLAMP_EPS, 1 - CLAMP_EPS]` before taking logs.
pub const CLAMP_EPS: f64 = 1e-7;

pub fn sigmoid<F: NdFloat>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean binary cross-entropy of predicted probabilities against {0,1} labels.
pub fn local_loss<F: NdFloat>(scores: &[F], labels: &[bool]) -> F {
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels must have equal lengths"
    );
    if scores.is_empty() {
        return F::zero();
    }
    let eps = F::from(CLAMP_EPS).unwrap();
    let total = scores.iter().zip(labels).fold(F::zero(), |acc, (&s, &y)| {
        let p = s.max(eps).min(F::one() - eps);
        acc - if y { p.ln() } else { (F::one() - p).ln() }
    });
    total / F::from(scores.len()).unwrap()
}
