use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the networks are generic over. Training runs in `f32`;
/// gradient verification runs the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A single image in channel-major layout: `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![F::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[F] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [F] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks channels of `a` followed by channels of `b`.
    pub fn concat(a: &Tensor<F>, b: &Tensor<F>) -> Self {
        assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial dims");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Self::from_vec(a.c + b.c, a.h, a.w, data)
    }

    /// Inverse of [`Tensor::concat`] for gradients.
    pub fn split(self, first_c: usize) -> (Tensor<F>, Tensor<F>) {
        let n = self.h * self.w;
        let mut data = self.data;
        let rest = data.split_off(first_c * n);
        (
            Tensor::from_vec(first_c, self.h, self.w, data),
            Tensor::from_vec(self.c - first_c, self.h, self.w, rest),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy with a zero border of `pad` pixels on every side of each plane.
    pub(crate) fn padded(&self, pad: usize) -> Tensor<F> {
        if pad == 0 {
            return self.clone();
        }
        let (hp, wp) = (self.h + 2 * pad, self.w + 2 * pad);
        let mut out = Tensor::zeros(self.c, hp, wp);
        for c in 0..self.c {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..self.h {
                let d = (y + pad) * wp + pad;
                dst[d..d + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
            }
        }
        out
    }
}
