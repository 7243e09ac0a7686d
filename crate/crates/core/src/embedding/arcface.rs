//! Additive angular margin logits and loss.
//!
//! All arithmetic runs in f64 regardless of the network's element type.

use serde::{Deserialize, Serialize};

use super::EmbedError;
use crate::nnet::{softmax_cross_entropy, NnError, Objective, Param, Network, Tensor};

/// Cosines are clamped to `[−1 + ε, 1 − ε]` before the margin is applied.
pub const COS_EPS: f64 = 1e-7;

/// Accepted deviation of `‖f‖` from 1 for inputs to the margin logits.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcMargin {
    /// Additive angular margin m (radians).
    pub margin: f64,
    /// Logit scale s.
    pub scale: f64,
}

impl Default for ArcMargin {
    fn default() -> Self {
        Self { margin: 0.5, scale: 64.0 }
    }
}

/// `g(c)` for the target class and `dg/dc`, where `c = cos θ`.
/// For θ + m ≤ π: `cos(θ + m) = c·cos m − sin θ·sin m`; beyond that the
/// unmargined cosine minus `m·sin θ`.
fn margin_cos(c: f64, m: f64) -> (f64, f64) {
    let sin = (1.0 - c * c).max(0.0).sqrt();
    if m == 0.0 {
        return (c, 1.0);
    }
    if c >= -m.cos() {
        (c * m.cos() - sin * m.sin(), m.cos() + c * m.sin() / sin)
    } else {
        (c - m * sin, 1.0 + m * c / sin)
    }
}

fn row_norms(weights: &[f64], dim: usize) -> Result<Vec<f64>, EmbedError> {
    weights
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, w)| {
            let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(EmbedError::Degenerate(format!("class weight row {j} has norm {n}")))
            }
        })
        .collect()
}

fn check_unit(f: &[f64]) -> Result<(), EmbedError> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(EmbedError::NotUnit(n));
    }
    Ok(())
}

/// Cosines of `f` against every normalized weight row: raw and clamped.
fn cosines(f: &[f64], weights: &[f64], norms: &[f64]) -> Vec<(f64, f64)> {
    let dim = f.len();
    weights
        .chunks_exact(dim)
        .zip(norms)
        .map(|(w, n)| {
            let raw = w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / n;
            (raw, raw.clamp(-1.0 + COS_EPS, 1.0 - COS_EPS))
        })
        .collect()
}

/// Margin logits for one unit-norm embedding against `weights` (C × D,
/// row-major). Without a target no margin is applied.
pub fn arcface_logits(f: &[f64], weights: &[f64], target: Option<usize>, arc: ArcMargin) -> Result<Vec<f64>, EmbedError> {
    let dim = f.len();
    if dim == 0 || weights.len() % dim != 0 {
        return Err(EmbedError::Config(format!("weights of length {} are not C × {dim}", weights.len())));
    }
    let classes = weights.len() / dim;
    if let Some(t) = target {
        if t >= classes {
            return Err(EmbedError::Label { label: t, classes });
        }
    }
    check_unit(f)?;
    let norms = row_norms(weights, dim)?;
    Ok(cosines(f, weights, &norms)
        .into_iter()
        .enumerate()
        .map(|(j, (_, c))| {
            if Some(j) == target {
                arc.scale * margin_cos(c, arc.margin).0
            } else {
                arc.scale * c
            }
        })
        .collect())
}

/// Mean loss over a batch with gradients for the embeddings and the raw
/// (unnormalized) class weights.
#[derive(Clone, Debug)]
pub struct ArcFaceGrad {
    pub loss: f64,
    /// B × D
    pub grad_features: Vec<f64>,
    /// C × D
    pub grad_weights: Vec<f64>,
}

/// Mean cross-entropy over margin logits. `features` is B × D row-major.
pub fn arcface_loss(
    features: &[f64],
    labels: &[usize],
    weights: &[f64],
    dim: usize,
    arc: ArcMargin,
) -> Result<ArcFaceGrad, EmbedError> {
    if labels.is_empty() {
        return Err(EmbedError::EmptyBatch);
    }
    if dim == 0 || features.len() != labels.len() * dim || weights.len() % dim != 0 {
        return Err(EmbedError::Config(format!(
            "features {} / weights {} do not match batch {} × {dim}",
            features.len(),
            weights.len(),
            labels.len()
        )));
    }
    let classes = weights.len() / dim;
    let norms = row_norms(weights, dim)?;
    let b = labels.len() as f64;
    let mut out = ArcFaceGrad {
        loss: 0.0,
        grad_features: vec![0.0; features.len()],
        grad_weights: vec![0.0; weights.len()],
    };
    for (i, (f, &label)) in features.chunks_exact(dim).zip(labels).enumerate() {
        if label >= classes {
            return Err(EmbedError::Label { label, classes });
        }
        check_unit(f)?;
        let cos = cosines(f, weights, &norms);
        let mut logits = Vec::with_capacity(classes);
        let mut slope = Vec::with_capacity(classes);
        for (j, &(raw, c)) in cos.iter().enumerate() {
            let clamped = raw != c;
            let (g, dg) = if j == label { margin_cos(c, arc.margin) } else { (c, 1.0) };
            logits.push(arc.scale * g);
            slope.push(if clamped { 0.0 } else { arc.scale * dg });
        }
        let (loss, dlogits) = softmax_cross_entropy(&logits, label);
        out.loss += loss / b;
        let gf = &mut out.grad_features[i * dim..(i + 1) * dim];
        for j in 0..classes {
            let dc = dlogits[j] * slope[j] / b;
            if dc == 0.0 {
                continue;
            }
            let w = &weights[j * dim..(j + 1) * dim];
            let inv = 1.0 / norms[j];
            let raw = cos[j].0;
            let gw = &mut out.grad_weights[j * dim..(j + 1) * dim];
            for k in 0..dim {
                let w_hat = w[k] * inv;
                gf[k] += dc * w_hat;
                gw[k] += dc * (f[k] - raw * w_hat) * inv;
            }
        }
    }
    if !out.loss.is_finite() {
        return Err(EmbedError::Nn(NnError::NonFinite(format!("arcface loss {}", out.loss))));
    }
    Ok(out)
}

/// Backbone + class weights + fixed labeled batch, as an f64 objective for
/// finite-difference checking of the whole training loss.
pub struct ArcFaceObjective {
    pub backbone: Network<f64>,
    pub head: Param<f64>,
    pub input: Tensor<f64>,
    pub labels: Vec<usize>,
    pub arc: ArcMargin,
}

impl ArcFaceObjective {
    fn eval(&mut self, grads: bool) -> Result<f64, NnError> {
        let dim = self.head.value.shape()[1];
        let feats = if grads {
            self.backbone.forward(&self.input)?
        } else {
            self.backbone.infer(&self.input)?
        };
        let r = arcface_loss(feats.data(), &self.labels, self.head.value.data(), dim, self.arc)
            .map_err(|e| NnError::Config(e.to_string()))?;
        if grads {
            let g = Tensor::new(feats.shape().to_vec(), r.grad_features)?;
            self.backbone.backward(&g)?;
            self.head.value.grad_mut().copy_from_slice(&r.grad_weights);
        }
        Ok(r.loss)
    }
}

impl Objective for ArcFaceObjective {
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        let mut v: Vec<&mut Param<f64>> = self.backbone.params_mut().iter_mut().collect();
        v.push(&mut self.head);
        v
    }

    fn loss(&mut self) -> Result<f64, NnError> {
        self.eval(false)
    }

    fn loss_and_grad(&mut self) -> Result<f64, NnError> {
        self.backbone.zero_grad();
        self.eval(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn zero_margin_gives_scaled_cosines() {
        let f = unit(&[0.3, -0.2, 0.9]);
        let w = [1.0, 2.0, 0.5, -1.0, 0.0, 0.25];
        let arc = ArcMargin { margin: 0.0, scale: 3.0 };
        let with = arcface_logits(&f, &w, Some(1), arc).unwrap();
        let without = arcface_logits(&f, &w, None, arc).unwrap();
        assert_eq!(with, without);
        let c0 = (f[0] * 1.0 + f[1] * 2.0 + f[2] * 0.5) / (1.0f64 + 4.0 + 0.25).sqrt();
        assert_eq!(without[0], 3.0 * c0);
    }

    #[test]
    fn aligned_target_hand_value() {
        let f = [0.0, 1.0];
        let w = [0.0, 2.0, 1.0, 0.0];
        let l = arcface_logits(&f, &w, Some(0), ArcMargin::default()).unwrap();
        let c = 1.0 - COS_EPS;
        let expected = 64.0 * (c * 0.5f64.cos() - (1.0 - c * c).sqrt() * 0.5f64.sin());
        assert!((l[0] - expected).abs() < 1e-12);
        // The clamp keeps sin θ ≈ 4.5e-4 at θ = 0, which lowers the logit
        // by ~0.014 from 64·cos(0.5) ≈ 56.165.
        assert!((l[0] - 64.0 * 0.5f64.cos()).abs() < 0.02, "{}", l[0]);
    }

    #[test]
    fn identical_weights_give_log_c() {
        let f = unit(&[1.0, 2.0, 3.0]);
        let w: Vec<f64> = [0.5, -0.1, 0.7].repeat(4);
        let arc = ArcMargin { margin: 0.0, scale: 10.0 };
        let l = arcface_logits(&f, &w, Some(2), arc).unwrap();
        assert!(l.windows(2).all(|p| p[0] == p[1]));
        let r = arcface_loss(&f, &[2], &w, 3, arc).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let w = [1.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            arcface_logits(&[2.0, 0.0], &w, None, ArcMargin::default()),
            Err(EmbedError::NotUnit(_))
        ));
        assert!(matches!(
            arcface_logits(&[1.0, 0.0], &w, Some(2), ArcMargin::default()),
            Err(EmbedError::Label { .. })
        ));
        assert!(matches!(arcface_loss(&[], &[], &w, 2, ArcMargin::default()), Err(EmbedError::EmptyBatch)));
    }

    #[test]
    fn loss_gradients_match_differences() {
        let dim = 4;
        let f: Vec<f64> = [unit(&[0.2, -0.5, 0.7, 0.1]), unit(&[-0.6, 0.3, 0.2, 0.4])].concat();
        let w = vec![0.3, 0.1, -0.2, 0.5, -0.4, 0.6, 0.2, 0.1, 0.1, -0.3, 0.8, -0.2];
        let labels = [1, 2];
        let arc = ArcMargin { margin: 0.3, scale: 4.0 };
        let r = arcface_loss(&f, &labels, &w, dim, arc).unwrap();
        let h = 1e-6;
        for k in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[k] += h;
            m[k] -= h;
            let num = (arcface_loss(&f, &labels, &p, dim, arc).unwrap().loss
                - arcface_loss(&f, &labels, &m, dim, arc).unwrap().loss)
                / (2.0 * h);
            assert!((num - r.grad_weights[k]).abs() < 1e-7, "w[{k}]: {num} vs {}", r.grad_weights[k]);
        }
    }
}
