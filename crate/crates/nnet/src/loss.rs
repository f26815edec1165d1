//! Composite objective: summed squared error, negative correlation,
//! temporal-difference error and spectral-magnitude error.
//!
//! Every term is a sum over (trial, channel) time courses. The spectrum is
//! the one-sided DFT scaled by `1/√T`, so its squared magnitudes are on the
//! same scale as the time-domain samples.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrForm {
    /// `⟨a, b⟩ / (‖a‖‖b‖ + ε)`
    #[default]
    Pearson,
    /// `⟨a, b⟩ / (‖a‖²‖b‖² + ε)`, the literal printed form.
    SquaredNorms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub corr_form: CorrForm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.1,
            epsilon: 1e-8,
            corr_form: CorrForm::Pearson,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(NnError::Invalid(format!("loss weight {name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(NnError::Invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub mse: f64,
    pub corr: f64,
    pub temp: f64,
    pub spec: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn compose(mse: f64, corr: f64, temp: f64, spec: f64, w: &LossWeights) -> Self {
        LossTerms {
            mse,
            corr,
            temp,
            spec,
            total: mse + w.alpha * corr + w.beta * temp + w.gamma * spec,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossTerms {
            mse: self.mse * k,
            corr: self.corr * k,
            temp: self.temp * k,
            spec: self.spec * k,
            total: self.total * k,
        }
    }

    pub fn add(&self, o: &LossTerms) -> Self {
        LossTerms {
            mse: self.mse + o.mse,
            corr: self.corr + o.corr,
            temp: self.temp + o.temp,
            spec: self.spec + o.spec,
            total: self.total + o.total,
        }
    }
}

/// Loss evaluator holding cached FFT plans.
pub struct Loss {
    pub weights: LossWeights,
    planner: FftPlanner<f64>,
}

impl std::fmt::Debug for Loss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Loss").field("weights", &self.weights).finish()
    }
}

struct Spectrum {
    bins: Vec<Complex64>,
    mags: Vec<f64>,
}

impl Loss {
    pub fn new(weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        Ok(Loss {
            weights,
            planner: FftPlanner::new(),
        })
    }

    fn spectrum(fft: &Arc<dyn Fft<f64>>, x: &[f64], eps: f64, buf: &mut Vec<Complex64>) -> Spectrum {
        let n = x.len();
        buf.clear();
        buf.extend(x.iter().map(|&v| Complex64::new(v, 0.0)));
        fft.process(buf);
        let scale = 1.0 / (n as f64).sqrt();
        let bins: Vec<Complex64> = buf[..n / 2 + 1].iter().map(|c| c * scale).collect();
        let mags = bins.iter().map(|c| (c.norm_sqr() + eps).sqrt()).collect();
        Spectrum { bins, mags }
    }

    pub fn terms(&mut self, pred: &Tensor3, target: &Tensor3) -> Result<LossTerms> {
        self.evaluate(pred, target, false).map(|(t, _)| t)
    }

    pub fn terms_and_grad(&mut self, pred: &Tensor3, target: &Tensor3) -> Result<(LossTerms, Tensor3)> {
        self.evaluate(pred, target, true)
            .map(|(t, g)| (t, g.expect("gradient requested")))
    }

    fn evaluate(&mut self, pred: &Tensor3, target: &Tensor3, want_grad: bool) -> Result<(LossTerms, Option<Tensor3>)> {
        pred.same_shape(target)?;
        if !pred.all_finite() || !target.all_finite() {
            return Err(NnError::NonFinite("loss input".into()));
        }
        let n = pred.len_t();
        if n < 2 {
            return Err(NnError::Invalid("loss needs at least two time samples".into()));
        }
        let w = self.weights;
        let eps = w.epsilon;
        let fwd = self.planner.plan_fft_forward(n);
        let inv = self.planner.plan_fft_inverse(n);
        let mut grad = want_grad.then(|| Tensor3::zeros(pred.shape()));
        let (mut mse, mut corr, mut temp, mut spec) = (0.0, 0.0, 0.0, 0.0);
        let mut buf = Vec::with_capacity(n);
        let mut gbuf = vec![Complex64::new(0.0, 0.0); n];

        for (row, (p, y)) in pred.data.chunks(n).zip(target.data.chunks(n)).enumerate() {
            let mut g = vec![0.0; n];

            for t in 0..n {
                let d = p[t] - y[t];
                mse += d * d;
                g[t] += 2.0 * d;
            }

            let pm = p.iter().sum::<f64>() / n as f64;
            let ym = y.iter().sum::<f64>() / n as f64;
            let a: Vec<f64> = p.iter().map(|v| v - pm).collect();
            let b: Vec<f64> = y.iter().map(|v| v - ym).collect();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = a.iter().zip(&b).map(|(u, v)| u * v).sum();
            let (denom, d_denom_d_na) = match w.corr_form {
                CorrForm::Pearson => (na * nb + eps, nb),
                CorrForm::SquaredNorms => (na * na * nb * nb + eps, 2.0 * na * nb * nb),
            };
            corr -= dot / denom;
            // d(-r)/da = -(b/denom - dot · (∂denom/∂na) · a/(na · denom²)); a is
            // centered so the centering projection leaves it unchanged
            let radial = if na > 0.0 { dot * d_denom_d_na / (na * denom * denom) } else { 0.0 };
            for t in 0..n {
                g[t] += w.alpha * -(b[t] / denom - radial * a[t]);
            }

            let mut dd = vec![0.0; n - 1];
            for t in 0..n - 1 {
                let d = (p[t + 1] - p[t]) - (y[t + 1] - y[t]);
                temp += d * d;
                dd[t] = 2.0 * d;
            }
            for t in 0..n - 1 {
                g[t + 1] += w.beta * dd[t];
                g[t] -= w.beta * dd[t];
            }

            let sp = Self::spectrum(&fwd, p, eps, &mut buf);
            let sy = Self::spectrum(&fwd, y, eps, &mut buf);
            for (mp, my) in sp.mags.iter().zip(&sy.mags) {
                spec += (mp - my) * (mp - my);
            }
            if want_grad && w.gamma != 0.0 {
                // ∂/∂x_t Σ_k (m̂_k − m_k)² = Re Σ_k g_k F_k e^{+2πikt/n} / √n
                gbuf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
                for k in 0..sp.bins.len() {
                    let gk = 2.0 * (sp.mags[k] - sy.mags[k]) / sp.mags[k];
                    gbuf[k] = sp.bins[k] * gk;
                }
                inv.process(&mut gbuf);
                let scale = 1.0 / (n as f64).sqrt();
                for t in 0..n {
                    g[t] += w.gamma * gbuf[t].re * scale;
                }
            }

            if let Some(gt) = grad.as_mut() {
                gt.data[row * n..(row + 1) * n].copy_from_slice(&g);
            }
        }
        Ok((LossTerms::compose(mse, corr, temp, spec, &w), grad))
    }
}
