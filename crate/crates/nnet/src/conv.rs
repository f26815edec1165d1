//! Stride-1 "same" 1D convolution (cross-correlation) via im2col + GEMM.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `(out, in, k)`
    pub weight: Tensor3,
    /// `(1, 1, out)`
    pub bias: Tensor3,
    input: Option<Tensor3>,
}

/// `c = a · b` (+ `c` when `accumulate`), all row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index reached through the given strides stays inside the
    // slices; callers pass dimensions that match the slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv1d {
    /// Fan-in uniform initialization in `±1/√(in·k)`.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let w = (0..out_ch * in_ch * kernel).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..out_ch).map(|_| rng.gen_range(-bound..bound)).collect();
        Conv1d {
            weight: Tensor3::param([out_ch, in_ch, kernel], w).expect("shape"),
            bias: Tensor3::param([1, 1, out_ch], b).expect("shape"),
            input: None,
        }
    }

    /// Kernel-size-1 identity mixing with zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for i in 0..channels {
            w[i * channels + i] = 1.0;
        }
        Conv1d {
            weight: Tensor3::param([channels, channels, 1], w).expect("shape"),
            bias: Tensor3::param([1, 1, channels], vec![0.0; channels]).expect("shape"),
            input: None,
        }
    }

    pub fn from_parts(weight: Tensor3, bias: Tensor3) -> Result<Self> {
        let [out, _, _] = weight.shape();
        if bias.shape() != [1, 1, out] {
            return Err(NnError::Shape(format!("bias {:?} for {out} outputs", bias.shape())));
        }
        let mut conv = Conv1d {
            weight,
            bias,
            input: None,
        };
        conv.weight.zero_grad();
        conv.bias.zero_grad();
        Ok(conv)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    fn left_pad(&self) -> usize {
        (self.kernel_size() - 1) / 2
    }

    /// Fills `col` (`in·k × t`) with shifted copies of `x` (`in × t`).
    fn im2col(&self, x: &[f64], t: usize, col: &mut [f64]) {
        let k = self.kernel_size();
        let left = self.left_pad() as isize;
        for i in 0..self.in_channels() {
            let row = &x[i * t..(i + 1) * t];
            for j in 0..k {
                let dst = &mut col[(i * k + j) * t..(i * k + j + 1) * t];
                let shift = j as isize - left;
                // dst[s] = row[s + shift] when in range
                let lo = (-shift).max(0) as usize;
                let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                dst[..lo.min(t)].fill(0.0);
                if lo < hi {
                    let src_lo = (lo as isize + shift) as usize;
                    dst[lo..hi].copy_from_slice(&row[src_lo..src_lo + (hi - lo)]);
                }
                dst[hi.max(lo).min(t)..].fill(0.0);
            }
        }
    }

    /// Scatters `col` gradients back onto `dx` (accumulating).
    fn col2im(&self, dcol: &[f64], t: usize, dx: &mut [f64]) {
        let k = self.kernel_size();
        let left = self.left_pad() as isize;
        for i in 0..self.in_channels() {
            let row = &mut dx[i * t..(i + 1) * t];
            for j in 0..k {
                let src = &dcol[(i * k + j) * t..(i * k + j + 1) * t];
                let shift = j as isize - left;
                let lo = (-shift).max(0) as usize;
                let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                for s in lo..hi {
                    row[(s as isize + shift) as usize] += src[s];
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Output has the input's time length. With `keep` the input is cached
    /// for [`Conv1d::backward`].
    pub fn forward(&mut self, x: &Tensor3, keep: bool) -> Result<Tensor3> {
        let out = self.apply(x)?;
        self.input = keep.then(|| x.clone());
        Ok(out)
    }

    /// Forward pass without touching the cache.
    pub fn apply(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_input(x)?;
        let [b, _, t] = x.shape();
        let (oc, ik) = (self.out_channels(), self.in_channels() * self.kernel_size());
        let mut out = Tensor3::zeros([b, oc, t]);
        let mut col = vec![0.0; ik * t];
        for bi in 0..b {
            self.im2col(x.item(bi), t, &mut col);
            let y = out.item_mut(bi);
            for (o, row) in y.chunks_mut(t).enumerate() {
                row.fill(self.bias.data[o]);
            }
            gemm(oc, ik, t, &self.weight.data, (ik as isize, 1), &col, (t as isize, 1), y, true);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3> {
        let x = self.input.take().ok_or(NnError::GraphNotBuilt("conv1d"))?;
        let [b, _, t] = x.shape();
        let (oc, ik) = (self.out_channels(), self.in_channels() * self.kernel_size());
        if grad_out.shape() != [b, oc, t] {
            return Err(NnError::Shape(format!("conv grad {:?} vs {:?}", grad_out.shape(), [b, oc, t])));
        }
        let mut dx = Tensor3::zeros(x.shape());
        let mut col = vec![0.0; ik * t];
        let mut dcol = vec![0.0; ik * t];
        let mut dw = self.weight.grad.take().unwrap_or_else(|| vec![0.0; oc * ik]);
        let mut db = self.bias.grad.take().unwrap_or_else(|| vec![0.0; oc]);
        for bi in 0..b {
            let g = grad_out.item(bi);
            self.im2col(x.item(bi), t, &mut col);
            // dW += g · colᵀ
            gemm(oc, t, ik, g, (t as isize, 1), &col, (1, t as isize), &mut dw, true);
            for (o, row) in g.chunks(t).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
            // dcol = Wᵀ · g
            gemm(ik, oc, t, &self.weight.data, (1, ik as isize), g, (t as isize, 1), &mut dcol, false);
            self.col2im(&dcol, t, dx.item_mut(bi));
        }
        self.weight.grad = Some(dw);
        self.bias.grad = Some(db);
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor3; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Tensor3; 2] {
        [&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}
