use ndarray::Array2;

use crate::error::{NnError, Result};

/// Dense `(batch, channels, time)` array in row-major order, with an
/// optional gradient buffer of the same shape.
///
/// Parameters reuse the type: a conv kernel is `(out, in, k)` and a bias is
/// `(1, 1, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor3 {
            shape,
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(NnError::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor3 { shape, data, grad: None })
    }

    /// Parameter tensor with a zeroed gradient buffer.
    pub fn param(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let mut t = Self::from_vec(shape, data)?;
        t.grad = Some(vec![0.0; t.data.len()]);
        Ok(t)
    }

    /// Stacks equally shaped `channels × time` matrices along the batch axis.
    pub fn stack(items: &[&Array2<f64>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Invalid("cannot stack an empty batch".into()))?;
        let (c, t) = first.dim();
        let mut data = Vec::with_capacity(items.len() * c * t);
        for a in items {
            if a.dim() != (c, t) {
                return Err(NnError::Shape(format!("batch item {:?} vs {:?}", a.dim(), (c, t))));
            }
            data.extend(a.iter());
        }
        Self::from_vec([items.len(), c, t], data)
    }

    pub fn unstack(&self) -> Vec<Array2<f64>> {
        let [b, c, t] = self.shape;
        (0..b)
            .map(|i| Array2::from_shape_vec((c, t), self.item(i).to_vec()).expect("shape"))
            .collect()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn len_t(&self) -> usize {
        self.shape[2]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.shape[1] + c) * self.shape[2] + t
    }

    pub fn at(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[self.index(b, c, t)]
    }

    /// One batch item as a flat `channels × time` slice.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape[1] * self.shape[2];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.shape[1] * self.shape[2];
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.fill(0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor3) -> Result<()> {
        if self.shape != other.shape {
            return Err(NnError::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stack_round_trip_and_indexing() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let b = &a * 10.0;
        let t = Tensor3::stack(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), [2, 2, 3]);
        assert_eq!(t.at(1, 1, 2), 60.0);
        assert_eq!(t.item(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.unstack(), vec![a, b]);
    }

    #[test]
    fn shape_errors() {
        assert!(Tensor3::from_vec([1, 2, 2], vec![0.0; 3]).is_err());
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 4));
        assert!(Tensor3::stack(&[&a, &b]).is_err());
        assert!(Tensor3::stack(&[]).is_err());
    }

    #[test]
    fn param_has_gradient_buffer() {
        let mut p = Tensor3::param([1, 1, 2], vec![1.0, 2.0]).unwrap();
        p.grad.as_mut().unwrap()[0] = 5.0;
        p.zero_grad();
        assert_eq!(p.grad, Some(vec![0.0, 0.0]));
    }
}
