//! Dense volumetric containers and the floating-point abstraction shared by
//! the network code.
//!
//! Fields are stored channel-major: `data[((c * H + x) * W + y) * D + z]`.
//! Spatial axis 0 is left-right (lower index = left), axis 1 is up-down and
//! axis 2 is front-back.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Spatial extent `[H, W, D]` in voxels.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Scalar type the network can be evaluated in (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Sum + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds for the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view used by [`gemm`]: `(slice, row stride, column stride)`.
pub(crate) type MatRef<'a, T> = (&'a [T], usize, usize);

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Bounds-checked wrapper around the strided matrix product.
/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(max_index(m, k, a.1, a.2) < a.0.len(), "gemm: A out of bounds");
    assert!(max_index(k, n, b.1, b.2) < b.0.len(), "gemm: B out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// A multi-channel 3D field.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Field<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Field {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * voxel_count(dims) {
            return Err(shape_err!(
                "field of {channels}x{dims:?} needs {} values, got {}",
                channels * voxel_count(dims),
                data.len()
            ));
        }
        Ok(Field {
            channels,
            dims,
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[0] + x) * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(c, x, y, z)]
    }

    /// Channel-wise concatenation `[a; b]`.
    pub fn concat(a: &Field<T>, b: &Field<T>) -> Result<Self> {
        if a.dims != b.dims {
            return Err(shape_err!("concat of {:?} and {:?}", a.dims, b.dims));
        }
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Field {
            channels: a.channels + b.channels,
            dims: a.dims,
            data,
        })
    }

    /// Splits off the first `head` channels.
    pub fn split(&self, head: usize) -> (Field<T>, Field<T>) {
        let cut = head * self.voxels();
        (
            Field {
                channels: head,
                dims: self.dims,
                data: self.data[..cut].to_vec(),
            },
            Field {
                channels: self.channels - head,
                dims: self.dims,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    pub fn add_assign(&mut self, other: &Field<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<U: Real>(&self) -> Field<U> {
        Field {
            channels: self.channels,
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A binary voxel mask with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn ones(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![1; voxel_count(dims)],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(shape_err!(
                "mask of {dims:?} needs {} values, got {}",
                voxel_count(dims),
                data.len()
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(crate::error::Error::InvalidInput(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Mask { dims, data })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.index(x, y, z);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// The mask as a single-channel field of zeros and ones.
    pub fn to_field<T: Real>(&self) -> Field<T> {
        Field {
            channels: 1,
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 { T::one() } else { T::zero() })
                .collect(),
        }
    }
}
