use rand::Rng;

use crate::conv::Conv1d;
use crate::error::{NnError, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, caches kept for backward.
    Train,
    /// Deterministic forward, nothing cached.
    Eval,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Tensor3, keep: bool) -> Tensor3 {
        let mut y = x.clone();
        y.grad = None;
        for v in &mut y.data {
            *v = v.max(0.0);
        }
        self.mask = keep.then(|| x.data.iter().map(|&v| v > 0.0).collect());
        y
    }

    pub fn backward(&mut self, g: &Tensor3) -> Result<Tensor3> {
        let mask = self.mask.take().ok_or(NnError::GraphNotBuilt("relu"))?;
        if mask.len() != g.numel() {
            return Err(NnError::Shape("relu gradient size".into()));
        }
        let data = g.data.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Tensor3::from_vec(g.shape(), data)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 − p)` during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(Dropout { p, mask: None })
    }

    pub fn forward(&mut self, x: &Tensor3, mode: Mode, rng: &mut impl Rng) -> Tensor3 {
        if mode == Mode::Eval {
            self.mask = None;
            let mut y = x.clone();
            y.grad = None;
            return y;
        }
        let scale = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if self.p > 0.0 && rng.gen::<f64>() < self.p { 0.0 } else { scale })
            .collect();
        let y = self.apply_mask(x, &mask);
        self.mask = Some(mask);
        y
    }

    /// Re-applies the last training mask, for finite-difference checks.
    pub fn forward_fixed(&self, x: &Tensor3) -> Result<Tensor3> {
        let mask = self.mask.as_ref().ok_or(NnError::GraphNotBuilt("dropout"))?;
        Ok(self.apply_mask(x, mask))
    }

    fn apply_mask(&self, x: &Tensor3, mask: &[f64]) -> Tensor3 {
        let data = x.data.iter().zip(mask).map(|(v, m)| v * m).collect();
        Tensor3::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn backward(&mut self, g: &Tensor3) -> Result<Tensor3> {
        let mask = self.mask.take().ok_or(NnError::GraphNotBuilt("dropout"))?;
        if mask.len() != g.numel() {
            return Err(NnError::Shape("dropout gradient size".into()));
        }
        Ok(self.apply_mask(g, &mask))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv1d),
    Relu(Relu),
    Dropout(Dropout),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor3, mode: Mode, rng: &mut impl Rng) -> Result<Tensor3> {
        let keep = mode == Mode::Train;
        match self {
            Layer::Conv(c) => c.forward(x, keep),
            Layer::Relu(r) => Ok(r.forward(x, keep)),
            Layer::Dropout(d) => Ok(d.forward(x, mode, rng)),
        }
    }

    pub fn backward(&mut self, g: &Tensor3) -> Result<Tensor3> {
        match self {
            Layer::Conv(c) => c.backward(g),
            Layer::Relu(r) => r.backward(g),
            Layer::Dropout(d) => d.backward(g),
        }
    }
}
