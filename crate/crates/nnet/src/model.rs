use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Conv1d;
use crate::error::{NnError, Result};
use crate::layers::{Dropout, Layer, Mode, Relu};
use crate::tensor::Tensor3;

/// Channel widths of the encoder blocks; the decoder mirrors them back to
/// the sensor count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub dropout: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            widths: vec![64, 32],
            kernel_size: 7,
            dropout: 0.1,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(NnError::Invalid("encoder widths must be non-empty and positive".into()));
        }
        if self.kernel_size == 0 {
            return Err(NnError::Invalid("kernel_size must be positive".into()));
        }
        Dropout::new(self.dropout).map(|_| ())
    }

    /// `(in, out)` of every conv layer for `channels` sensors.
    pub fn conv_shapes(&self, channels: usize) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = channels;
        for &w in &self.widths {
            shapes.push((prev, w));
            shapes.push((w, w));
            prev = w;
        }
        for &w in self.widths.iter().rev().skip(1) {
            shapes.push((prev, w));
            shapes.push((w, w));
            prev = w;
        }
        shapes.push((prev, prev));
        shapes.push((prev, channels));
        shapes
    }
}

/// Time-preserving encoder–decoder. Each block is conv → ReLU → conv → ReLU
/// → dropout, except the last, whose second conv maps to the sensor count
/// with a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDecoder {
    pub arch: ArchSpec,
    pub channels: usize,
    pub layers: Vec<Layer>,
}

impl EncoderDecoder {
    pub fn new(channels: usize, arch: &ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        if channels == 0 {
            return Err(NnError::Invalid("model needs at least one channel".into()));
        }
        let shapes = arch.conv_shapes(channels);
        let n_blocks = shapes.len() / 2;
        let mut layers = Vec::new();
        for (b, pair) in shapes.chunks(2).enumerate() {
            layers.push(Layer::Conv(Conv1d::new(pair[0].0, pair[0].1, arch.kernel_size, rng)));
            layers.push(Layer::Relu(Relu::default()));
            layers.push(Layer::Conv(Conv1d::new(pair[1].0, pair[1].1, arch.kernel_size, rng)));
            if b + 1 < n_blocks {
                layers.push(Layer::Relu(Relu::default()));
                layers.push(Layer::Dropout(Dropout::new(arch.dropout)?));
            }
        }
        Ok(EncoderDecoder {
            arch: arch.clone(),
            channels,
            layers,
        })
    }

    pub fn forward(&mut self, x: &Tensor3, mode: Mode, rng: &mut impl Rng) -> Result<Tensor3> {
        if x.channels() != self.channels {
            return Err(NnError::Shape(format!(
                "model expects {} channels, input has {}",
                self.channels,
                x.channels()
            )));
        }
        let mut h = x.clone();
        h.grad = None;
        for layer in &mut self.layers {
            h = layer.forward(&h, mode, rng)?;
        }
        Ok(h)
    }

    /// Deterministic forward without caches.
    pub fn predict(&self, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.channels {
            return Err(NnError::Shape(format!(
                "model expects {} channels, input has {}",
                self.channels,
                x.channels()
            )));
        }
        let mut h = x.clone();
        h.grad = None;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.apply(&h)?,
                Layer::Relu(_) => {
                    h.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    h
                }
                Layer::Dropout(_) => h,
            };
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor3) -> Result<Tensor3> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor3> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c.params_mut()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor3> {
        self.convs().flat_map(|c| c.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.data.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<f64>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snap.len() || params.iter().zip(snap).any(|(p, s)| p.numel() != s.len()) {
            return Err(NnError::Shape("parameter snapshot does not match the model".into()));
        }
        for (p, s) in params.iter_mut().zip(snap) {
            p.data.copy_from_slice(s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layout() {
        let shapes = ArchSpec::default().conv_shapes(16);
        assert_eq!(
            shapes,
            vec![(16, 64), (64, 64), (64, 32), (32, 32), (32, 64), (64, 64), (64, 64), (64, 16)]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = EncoderDecoder::new(16, &ArchSpec::default(), &mut rng).unwrap();
        // last layer is a conv: linear output
        assert!(matches!(m.layers.last(), Some(Layer::Conv(_))));
        assert_eq!(m.layers.iter().filter(|l| matches!(l, Layer::Dropout(_))).count(), 3);
    }

    #[test]
    fn eval_forward_matches_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = ArchSpec {
            widths: vec![5, 3],
            ..ArchSpec::default()
        };
        let mut m = EncoderDecoder::new(4, &arch, &mut rng).unwrap();
        let x = Tensor3::from_vec([2, 4, 20], (0..160).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = m.forward(&x, Mode::Eval, &mut rng).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!(m.backward(&a).is_err());
    }

    #[test]
    fn snapshot_restore() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = ArchSpec {
            widths: vec![3],
            ..ArchSpec::default()
        };
        let mut m = EncoderDecoder::new(2, &arch, &mut rng).unwrap();
        let snap = m.snapshot();
        for p in m.params_mut() {
            p.data.fill(0.0);
        }
        m.restore(&snap).unwrap();
        assert_eq!(m.snapshot(), snap);
        assert!(m.restore(&snap[1..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn shape_is_preserved(c in 1usize..6, t in 7usize..40, w1 in 1usize..6, w2 in 1usize..6, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arch = ArchSpec { widths: vec![w1, w2], ..ArchSpec::default() };
            let m = EncoderDecoder::new(c, &arch, &mut rng).unwrap();
            let x = Tensor3::zeros([2, c, t]);
            prop_assert_eq!(m.predict(&x).unwrap().shape(), [2, c, t]);
        }
    }
}
