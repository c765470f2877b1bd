//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Values live in [`Tensor`]; a forward pass records operations on a
//! [`Graph`] and [`Graph::backward`] walks the record in reverse. Trainable
//! weights live outside the graph in a [`ParamStore`] so that one storage
//! slot can feed several paths of the same graph.
//!
//! Everything is generic over [`Real`] so that training runs in `f32`
//! while gradient checks run the very same code in `f64`.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore, Parameter};

/// Floating-point element type usable by the engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = op(a) · op(b) + beta · c` for row-major `m×k` and `k×n` operands.
    ///
    /// With `a_t` set, `a` is stored as `k×m` and used transposed (same for
    /// `b_t`, stored `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        beta: Self,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the assert above bounds every index reachable through
                // the (row, column) strides computed for the stated layouts.
                unsafe {
                    $gemm(
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
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("positive extents")
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim("chw", format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Extracts the row-major `[c, h, w]` window `[y0, y0+h) × [x0, x0+w)`.
pub fn crop_chw<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, th, tw) = t.chw()?;
    if y0 + h > th || x0 + w > tw {
        return Err(Error::dim(
            "crop",
            format!("window {h}x{w} at ({y0},{x0}) exceeds {th}x{tw}"),
        ));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in y0..y0 + h {
            let row = ch * th * tw + y * tw;
            out.extend_from_slice(&t.data()[row + x0..row + x0 + w]);
        }
    }
    Tensor::new([c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert_eq!(Tensor::<f32>::new([2, 2], vec![1.0; 4]).unwrap().numel(), 4);
    }

    #[test]
    fn gemm_layouts_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [1.0; 4];
        f64::gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 1.0);
        assert_eq!(c2, [59.0, 65.0, 140.0, 155.0]);
    }

    #[test]
    fn crop_extracts_window() {
        let t = Tensor::<f32>::from_fn([1, 3, 3], |i| i as f32);
        let c = crop_chw(&t, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(crop_chw(&t, 2, 2, 2, 2).is_err());
    }
}
