//! Forward and backward kernels. Every backward accumulates (`+=`) into the
//! parameter gradient slices it is given.

use crate::tensor::{gemm, voxel_count, Dims, Field, Real};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Upper bound on im2col scratch elements per chunk.
const COLS_BUDGET: usize = 1 << 22;

pub fn conv_out_dims(dims: Dims, stride: usize) -> Dims {
    [
        dims[0].div_ceil(stride),
        dims[1].div_ceil(stride),
        dims[2].div_ceil(stride),
    ]
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_dims: Dims,
    out_dims: Dims,
}

impl ConvGeom {
    fn new(cin: usize, k: usize, stride: usize, in_dims: Dims) -> Self {
        ConvGeom {
            cin,
            k,
            stride,
            pad: k / 2,
            in_dims,
            out_dims: conv_out_dims(in_dims, stride),
        }
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn rows(&self) -> usize {
        self.cin * self.taps()
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    fn planes_per_chunk(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out_dims[0])
    }

    /// Valid output range along one axis for kernel offset `t`:
    /// `o * stride + t - pad` must land in `[0, n)`.
    fn valid(&self, t: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = t as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (n_in as isize - 1 - off).div_euclid(s) + 1;
        (lo.max(0) as usize, hi.clamp(0, n_out as isize) as usize)
    }
}

/// Fills `cols` (rows x n) for output planes `x0..x1`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], x0: usize, x1: usize, cols: &mut [T]) {
    let [hi, wi, di] = g.in_dims;
    let [_, wo, dout] = g.out_dims;
    let n = (x1 - x0) * g.plane();
    let in_vox = voxel_count(g.in_dims);
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * in_vox..(ci + 1) * in_vox];
        for kx in 0..g.k {
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid(ky, wi, wo);
                for kz in 0..g.k {
                    let (zlo, zhi) = g.valid(kz, di, dout);
                    let dst = &mut cols[row * n..(row + 1) * n];
                    dst.fill(T::zero());
                    for ox in x0..x1 {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= hi as isize {
                            continue;
                        }
                        let ix = ix as usize;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let src_row = (ix * wi + iy) * di;
                            let dst_row = ((ox - x0) * wo + oy) * dout;
                            if g.stride == 1 {
                                let iz0 = zlo + kz - g.pad;
                                let len = zhi - zlo;
                                dst[dst_row + zlo..dst_row + zhi]
                                    .copy_from_slice(&xc[src_row + iz0..src_row + iz0 + len]);
                            } else {
                                for oz in zlo..zhi {
                                    dst[dst_row + oz] = xc[src_row + oz * g.stride + kz - g.pad];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x0: usize, x1: usize, gx: &mut [T]) {
    let [hi, wi, di] = g.in_dims;
    let [_, wo, dout] = g.out_dims;
    let n = (x1 - x0) * g.plane();
    let in_vox = voxel_count(g.in_dims);
    let mut row = 0;
    for ci in 0..g.cin {
        let gc = &mut gx[ci * in_vox..(ci + 1) * in_vox];
        for kx in 0..g.k {
            for ky in 0..g.k {
                let (ylo, yhi) = g.valid(ky, wi, wo);
                for kz in 0..g.k {
                    let (zlo, zhi) = g.valid(kz, di, dout);
                    let src = &cols[row * n..(row + 1) * n];
                    for ox in x0..x1 {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= hi as isize {
                            continue;
                        }
                        let ix = ix as usize;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let dst_row = (ix * wi + iy) * di;
                            let src_row = ((ox - x0) * wo + oy) * dout;
                            if g.stride == 1 {
                                let iz0 = dst_row + zlo + kz - g.pad;
                                let len = zhi - zlo;
                                for (d, &v) in gc[iz0..iz0 + len]
                                    .iter_mut()
                                    .zip(&src[src_row + zlo..src_row + zhi])
                                {
                                    *d += v;
                                }
                            } else {
                                for oz in zlo..zhi {
                                    gc[dst_row + oz * g.stride + kz - g.pad] += src[src_row + oz];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Zero-padded cubic convolution. `w` is `[cout][cin][k][k][k]`.
pub fn conv3d<T: Real>(
    x: &Field<T>,
    w: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
    stride: usize,
) -> Field<T> {
    let g = ConvGeom::new(x.channels, k, stride, x.dims);
    debug_assert_eq!(w.len(), cout * g.rows());
    let mut out = Field::zeros(cout, g.out_dims);
    let n_out = out.voxels();
    let step = g.planes_per_chunk();
    let mut cols = vec![T::zero(); g.rows() * step * g.plane()];
    let mut x0 = 0;
    while x0 < g.out_dims[0] {
        let x1 = (x0 + step).min(g.out_dims[0]);
        let n = (x1 - x0) * g.plane();
        im2col(&g, &x.data, x0, x1, &mut cols);
        gemm(
            cout,
            g.rows(),
            n,
            T::one(),
            (w, g.rows(), 1),
            (&cols[..], n, 1),
            T::zero(),
            &mut out.data[x0 * g.plane()..],
            n_out,
            1,
        );
        x0 = x1;
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in out.channel_mut(co) {
                *v += bv;
            }
        }
    }
    out
}

/// Returns the input gradient when `need_input_grad`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &Field<T>,
    w: &[T],
    gy: &Field<T>,
    k: usize,
    stride: usize,
    gw: &mut [T],
    gb: Option<&mut [T]>,
    need_input_grad: bool,
) -> Option<Field<T>> {
    let g = ConvGeom::new(x.channels, k, stride, x.dims);
    let cout = gy.channels;
    let n_out = gy.voxels();
    if let Some(gb) = gb {
        for (co, b) in gb.iter_mut().enumerate() {
            *b += gy.channel(co).iter().copied().sum::<T>();
        }
    }
    let mut gx = need_input_grad.then(|| Field::zeros(x.channels, x.dims));
    let step = g.planes_per_chunk();
    let mut cols = vec![T::zero(); g.rows() * step * g.plane()];
    let mut x0 = 0;
    while x0 < g.out_dims[0] {
        let x1 = (x0 + step).min(g.out_dims[0]);
        let n = (x1 - x0) * g.plane();
        let gy_chunk = &gy.data[x0 * g.plane()..];
        im2col(&g, &x.data, x0, x1, &mut cols);
        // gw (cout x rows) += gy (cout x n) * cols^T (n x rows)
        gemm(
            cout,
            n,
            g.rows(),
            T::one(),
            (gy_chunk, n_out, 1),
            (&cols[..], 1, n),
            T::one(),
            gw,
            g.rows(),
            1,
        );
        if let Some(gx) = gx.as_mut() {
            // cols (rows x n) = w^T (rows x cout) * gy (cout x n)
            gemm(
                g.rows(),
                cout,
                n,
                T::one(),
                (w, 1, g.rows()),
                (gy_chunk, n_out, 1),
                T::zero(),
                &mut cols,
                n,
                1,
            );
            col2im(&g, &cols, x0, x1, &mut gx.data);
        }
        x0 = x1;
    }
    gx
}

fn offset_index(dims_in: Dims, a: usize, b: usize, c: usize) -> impl Fn(usize) -> usize {
    let [_, w, d] = dims_in;
    let (wo, dout) = (2 * w, 2 * d);
    move |v: usize| {
        let i = v / (w * d);
        let j = (v / d) % w;
        let kk = v % d;
        ((2 * i + a) * wo + 2 * j + b) * dout + 2 * kk + c
    }
}

/// Stride-2, kernel-2 transposed convolution. `w` is `[8][cout][cin]` with
/// the offset index `(a * 2 + b) * 2 + c`.
pub fn tconv3d<T: Real>(x: &Field<T>, w: &[T], bias: &[T], cout: usize) -> Field<T> {
    let cin = x.channels;
    let n_in = x.voxels();
    let out_dims = [2 * x.dims[0], 2 * x.dims[1], 2 * x.dims[2]];
    let mut out = Field::zeros(cout, out_dims);
    let n_out = out.voxels();
    let mut tmp = vec![T::zero(); cout * n_in];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        let wo = &w[o * cout * cin..(o + 1) * cout * cin];
        gemm(
            cout,
            cin,
            n_in,
            T::one(),
            (wo, cin, 1),
            (&x.data[..], n_in, 1),
            T::zero(),
            &mut tmp,
            n_in,
            1,
        );
        let map = offset_index(x.dims, a, b, c);
        for co in 0..cout {
            let src = &tmp[co * n_in..(co + 1) * n_in];
            let dst = &mut out.data[co * n_out..(co + 1) * n_out];
            let bv = bias[co];
            for (v, &s) in src.iter().enumerate() {
                dst[map(v)] = s + bv;
            }
        }
    }
    out
}

pub fn tconv3d_backward<T: Real>(
    x: &Field<T>,
    w: &[T],
    gy: &Field<T>,
    gw: &mut [T],
    gb: &mut [T],
) -> Field<T> {
    let cin = x.channels;
    let cout = gy.channels;
    let n_in = x.voxels();
    let n_out = gy.voxels();
    for (co, b) in gb.iter_mut().enumerate() {
        *b += gy.channel(co).iter().copied().sum::<T>();
    }
    let mut gx = Field::zeros(cin, x.dims);
    let mut g_o = vec![T::zero(); cout * n_in];
    for o in 0..8 {
        let (a, b, c) = (o >> 2, (o >> 1) & 1, o & 1);
        let map = offset_index(x.dims, a, b, c);
        for co in 0..cout {
            let src = &gy.data[co * n_out..(co + 1) * n_out];
            for (v, d) in g_o[co * n_in..(co + 1) * n_in].iter_mut().enumerate() {
                *d = src[map(v)];
            }
        }
        let range = o * cout * cin..(o + 1) * cout * cin;
        // gw_o (cout x cin) += g_o (cout x n) * x^T (n x cin)
        gemm(
            cout,
            n_in,
            cin,
            T::one(),
            (&g_o[..], n_in, 1),
            (&x.data[..], 1, n_in),
            T::one(),
            &mut gw[range.clone()],
            cin,
            1,
        );
        // gx (cin x n) += w_o^T (cin x cout) * g_o
        gemm(
            cin,
            cout,
            n_in,
            T::one(),
            (&w[range], 1, cin),
            (&g_o[..], n_in, 1),
            T::one(),
            &mut gx.data,
            n_in,
            1,
        );
    }
    gx
}

/// Cached statistics of one normalization call.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization over the spatial axes with affine scale/shift.
pub fn instance_norm<T: Real>(x: &Field<T>, gamma: &[T], beta: &[T]) -> (Field<T>, NormCache<T>) {
    let n = x.voxels();
    let nf = T::from_usize(n).unwrap();
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut y = Field::zeros(x.channels, x.dims);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let xc = x.channel(c);
        let mean = xc.iter().copied().sum::<T>() / nf;
        let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = &mut xhat[c * n..(c + 1) * n];
        let yc = y.channel_mut(c);
        for i in 0..n {
            xh[i] = (xc[i] - mean) * inv;
            yc[i] = gamma[c] * xh[i] + beta[c];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    gy: &Field<T>,
    ggamma: &mut [T],
    gbeta: &mut [T],
) -> Field<T> {
    let n = gy.voxels();
    let nf = T::from_usize(n).unwrap();
    let mut gx = Field::zeros(gy.channels, gy.dims);
    for c in 0..gy.channels {
        let g = gy.channel(c);
        let xh = &cache.xhat[c * n..(c + 1) * n];
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..n {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
        }
        ggamma[c] += sum_gx;
        gbeta[c] += sum_g;
        let scale = gamma[c] * cache.inv_std[c] / nf;
        let out = gx.channel_mut(c);
        for i in 0..n {
            out[i] = scale * (nf * g[i] - sum_g - xh[i] * sum_gx);
        }
    }
    gx
}

pub fn leaky_relu<T: Real>(x: &mut [T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    if let Some(gates) = super::gates::gates_for(x) {
        for (v, open) in x.iter_mut().zip(gates) {
            if !open {
                *v *= slope;
            }
        }
        return;
    }
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward through a leaky ReLU given its output.
pub fn leaky_relu_backward<T: Real>(y: &[T], g: &mut [T]) {
    let slope = T::from_f64_lossy(LEAKY_SLOPE);
    for (gv, &yv) in g.iter_mut().zip(y) {
        if yv < T::zero() {
            *gv *= slope;
        }
    }
}

/// Per-voxel contraction: `extra[g, v] = sum_c t[g, c] * z[c, v]`, returned
/// as `concat(z, extra)`.
pub fn fuse_channels<T: Real>(z: &Field<T>, t: &[T], g: usize) -> Field<T> {
    let c = z.channels;
    let n = z.voxels();
    let mut data = Vec::with_capacity((c + g) * n);
    data.extend_from_slice(&z.data);
    data.resize((c + g) * n, T::zero());
    if g > 0 && c > 0 {
        gemm(
            g,
            c,
            n,
            T::one(),
            (t, c, 1),
            (&z.data[..], n, 1),
            T::zero(),
            &mut data[c * n..],
            n,
            1,
        );
    }
    Field {
        channels: c + g,
        dims: z.dims,
        data,
    }
}

/// Gradients of [`fuse_channels`]: returns the grad of `z`, accumulates into
/// `gt` (`g x c`).
pub fn fuse_channels_backward<T: Real>(z: &Field<T>, t: &[T], gy: &Field<T>, gt: &mut [T]) -> Field<T> {
    let c = z.channels;
    let n = z.voxels();
    let g = gy.channels - c;
    let mut gz = Field {
        channels: c,
        dims: z.dims,
        data: gy.data[..c * n].to_vec(),
    };
    if g > 0 && c > 0 {
        let gextra = &gy.data[c * n..];
        gemm(
            g,
            n,
            c,
            T::one(),
            (gextra, n, 1),
            (&z.data[..], 1, n),
            T::one(),
            gt,
            c,
            1,
        );
        gemm(
            c,
            g,
            n,
            T::one(),
            (t, 1, c),
            (gextra, n, 1),
            T::one(),
            &mut gz.data,
            n,
            1,
        );
    }
    gz
}

/// Row-batched affine map: `y (rows x out) = x (rows x in) * W^T + b`, with
/// `W` stored `[out][in]`.
pub fn linear<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d_out];
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(b);
    }
    gemm(
        rows,
        d_in,
        d_out,
        T::one(),
        (x, d_in, 1),
        (w, 1, d_in),
        T::one(),
        &mut y,
        d_out,
        1,
    );
    y
}

/// Returns the input gradient; accumulates `gw` and `gb`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    gy: &[T],
    d_in: usize,
    d_out: usize,
    gw: &mut [T],
    gb: &mut [T],
) -> Vec<T> {
    for r in 0..rows {
        for (b, &g) in gb.iter_mut().zip(&gy[r * d_out..(r + 1) * d_out]) {
            *b += g;
        }
    }
    // gw (out x in) += gy^T (out x rows) * x (rows x in)
    gemm(
        d_out,
        rows,
        d_in,
        T::one(),
        (gy, 1, d_out),
        (x, d_in, 1),
        T::one(),
        gw,
        d_in,
        1,
    );
    let mut gx = vec![T::zero(); rows * d_in];
    gemm(
        rows,
        d_out,
        d_in,
        T::one(),
        (gy, d_out, 1),
        (w, d_in, 1),
        T::zero(),
        &mut gx,
        d_in,
        1,
    );
    gx
}

/// Normalization of a single vector with affine scale/shift.
pub fn layer_norm<T: Real>(x: &[T], gamma: &[T], beta: &[T]) -> (Vec<T>, NormCache<T>) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let inv = T::one() / (var + T::from_f64_lossy(NORM_EPS)).sqrt();
    let xhat: Vec<T> = x.iter().map(|&v| (v - mean) * inv).collect();
    let y = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&h, (&g, &b))| g * h + b)
        .collect();
    (
        y,
        NormCache {
            xhat,
            inv_std: vec![inv],
        },
    )
}

pub fn layer_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    gy: &[T],
    ggamma: &mut [T],
    gbeta: &mut [T],
) -> Vec<T> {
    let n = T::from_usize(gy.len()).unwrap();
    let mut gxhat = Vec::with_capacity(gy.len());
    for i in 0..gy.len() {
        ggamma[i] += gy[i] * cache.xhat[i];
        gbeta[i] += gy[i];
        gxhat.push(gy[i] * gamma[i]);
    }
    let sum_g: T = gxhat.iter().copied().sum();
    let sum_gx: T = gxhat.iter().zip(&cache.xhat).map(|(&a, &b)| a * b).sum();
    let inv = cache.inv_std[0];
    gxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(&g, &h)| inv / n * (n * g - sum_g - h * sum_gx))
        .collect()
}
