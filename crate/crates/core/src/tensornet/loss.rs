use super::model::{Prediction, OUTPUTS};
use super::tensor::Tensor;
use super::TensorError;
use crate::geometry::Pose;

/// Block sizes: three translation components, four quaternion components.
pub const M_TRANSLATION: usize = 3;
pub const M_ROTATION: usize = 4;

/// `sqrt(mean((a - b)^2))`
pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m).sqrt()
}

/// Regression target of a label: translation then sign-canonical quaternion.
pub fn target(label: &Pose) -> [f64; 7] {
    let q = label.rotation.normalize();
    let t = label.translation;
    [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
}

/// `w·RMS(t, t̂) + (1 − w)·RMS(q, q̂)` for one pair, raw predicted quaternion.
pub fn loss(pred: &Prediction, label: &Pose, w: f64) -> f64 {
    let p = pred.to_array();
    let y = target(label);
    w * rms(&y[..3], &p[..3]) + (1.0 - w) * rms(&y[3..], &p[3..])
}

/// Mean loss over a batch of raw outputs `[N, 7]` and its gradient.
pub fn batch_loss(outputs: &Tensor, labels: &[Pose], w: f64) -> Result<(f64, Tensor), TensorError> {
    if outputs.shape.len() != 2 || outputs.shape[1] != OUTPUTS || outputs.shape[0] != labels.len() || labels.is_empty() {
        return Err(TensorError::Shape {
            op: "loss",
            expected: format!("[{}, {OUTPUTS}]", labels.len()),
            actual: outputs.shape.clone(),
        });
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(&outputs.shape);
    for (i, label) in labels.iter().enumerate() {
        let p = outputs.item(i);
        let y = target(label);
        let g = &mut grad.data[i * OUTPUTS..(i + 1) * OUTPUTS];
        for (range, weight) in [(0..M_TRANSLATION, w), (M_TRANSLATION..OUTPUTS, 1.0 - w)] {
            let r = rms(&y[range.clone()], &p[range.clone()]);
            total += weight * r;
            if r > 0.0 {
                let m = range.len() as f64;
                for j in range {
                    g[j] = weight * (p[j] - y[j]) / (m * r * n);
                }
            }
        }
    }
    Ok((total / n, grad))
}
