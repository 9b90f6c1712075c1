use crate::{Error, Result};

/// A dense N-D array of `f32` values (rank 1 to 4) with an optional
/// same-shape gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "tensor rank {} out of range 1..=4",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} does not match data length {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Gradient accumulator, if one has been materialized.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator, materializing it at zero
    /// on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch("gradient shape mismatch".into()));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Converts an interleaved image into planar `[C, H, W]` data.
pub fn image_to_planar(img: &crate::imagecore::Image) -> (Vec<usize>, Vec<f32>) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data = vec![0.0f32; c * h * w];
    let src = img.data();
    for p in 0..h * w {
        for ch in 0..c {
            data[ch * h * w + p] = src[p * c + ch];
        }
    }
    (vec![c, h, w], data)
}

/// Converts planar `[C, H, W]` data back into an interleaved image, clamping
/// values into `[0,1]`.
pub fn planar_to_image(shape: &[usize], data: &[f32]) -> Result<crate::imagecore::Image> {
    let (c, h, w) = match shape {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "expected [C,H,W], found {s:?}"
            )))
        }
    };
    let mut out = vec![0.0f32; h * w * c];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = data[ch * h * w + p].clamp(0.0, 1.0);
        }
    }
    crate::imagecore::Image::new(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        t.accumulate_grad(&[0.5, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
