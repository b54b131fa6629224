use crate::{Error, Result};

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                expected: format!("{n} values for shape {shape:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Accumulate `src` into the grad buffer, allocating on first use.
    pub(crate) fn acc_grad(&mut self, src: &[f32]) {
        debug_assert_eq!(src.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (d, s) in g.iter_mut().zip(src) {
            *d += *s;
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f32] {
        self.grad
            .get_or_insert_with(|| vec![0.0; self.data.len()])
    }
}

pub fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}
