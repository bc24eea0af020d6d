//! Numeric kernels behind the graph primitives.
//!
//! Every kernel is generic over the scalar so the finite-difference checker
//! can run the exact same code in 64-bit. Parallel loops only ever split
//! disjoint output chunks; per-element arithmetic order never depends on the
//! thread count.

use crate::exec;

pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + std::iter::Sum + Send + Sync + std::fmt::Debug + 'static
{
}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).unwrap()
}

/// Output spatial size of a kernel-3 pad-1 convolution.
#[inline]
pub fn conv_out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Zero-pad a `[c, d, h, w]` volume by one voxel on each spatial side.
fn pad1<S: Scalar>(x: &[S], c: usize, d: usize, h: usize, w: usize) -> Vec<S> {
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![S::zero(); c * pd * ph * pw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = ((ci * d + z) * h + y) * w;
                let dst = ((ci * pd + z + 1) * ph + y + 1) * pw + 1;
                out[dst..dst + w].copy_from_slice(&x[src..src + w]);
            }
        }
    }
    out
}

/// Forward 3x3x3 convolution, padding 1, stride 1 or 2.
/// `x`: `[ci, d, h, w]`, `weight`: `[co, ci, 3, 3, 3]`, `bias`: `[co]`.
pub fn conv3d_fwd<S: Scalar>(
    x: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    weight: &[S],
    bias: &[S],
    co: usize,
    stride: usize,
    out: &mut [S],
) {
    let (od, oh, ow) = (
        conv_out_dim(d, stride),
        conv_out_dim(h, stride),
        conv_out_dim(w, stride),
    );
    debug_assert_eq!(out.len(), co * od * oh * ow);
    let pad = pad1(x, ci, d, h, w);
    let (ph, pw) = (h + 2, w + 2);
    exec::for_each_chunk(out, oh * ow, |idx, plane| {
        let oc = idx / od;
        let z = idx % od;
        for y in 0..oh {
            let row = &mut plane[y * ow..(y + 1) * ow];
            row.fill(bias[oc]);
            for ic in 0..ci {
                for dz in 0..3 {
                    let zp = z * stride + dz;
                    for dy in 0..3 {
                        let yp = y * stride + dy;
                        let prow = &pad[((ic * (d + 2) + zp) * ph + yp) * pw..][..pw];
                        let wk = &weight[(((oc * ci + ic) * 3 + dz) * 3 + dy) * 3..][..3];
                        let (w0, w1, w2) = (wk[0], wk[1], wk[2]);
                        if stride == 1 {
                            let p0 = &prow[..ow];
                            let p1 = &prow[1..1 + ow];
                            let p2 = &prow[2..2 + ow];
                            for i in 0..ow {
                                row[i] = row[i] + p0[i] * w0 + p1[i] * w1 + p2[i] * w2;
                            }
                        } else {
                            for (i, r) in row.iter_mut().enumerate() {
                                let px = i * stride;
                                *r = *r + prow[px] * w0 + prow[px + 1] * w1 + prow[px + 2] * w2;
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input.
pub fn conv3d_bwd_input<S: Scalar>(
    gout: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    weight: &[S],
    co: usize,
    stride: usize,
    gx: &mut [S],
) {
    let (od, oh, ow) = (
        conv_out_dim(d, stride),
        conv_out_dim(h, stride),
        conv_out_dim(w, stride),
    );
    if stride == 1 {
        // full correlation with the flipped kernel and swapped channel roles
        let mut wflip = vec![S::zero(); ci * co * 27];
        for oc in 0..co {
            for ic in 0..ci {
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            wflip[(((ic * co + oc) * 3 + (2 - dz)) * 3 + (2 - dy)) * 3 + (2 - dx)] =
                                weight[(((oc * ci + ic) * 3 + dz) * 3 + dy) * 3 + dx];
                        }
                    }
                }
            }
        }
        let zero_bias = vec![S::zero(); ci];
        conv3d_fwd(gout, (co, d, h, w), &wflip, &zero_bias, ci, 1, gx);
        return;
    }
    // stride 2: gather the (at most 2 per axis) contributing outputs
    exec::for_each_chunk(gx, h * w, |idx, plane| {
        let ic = idx / d;
        let zi = idx % d;
        for yi in 0..h {
            for xi in 0..w {
                let mut acc = S::zero();
                for dz in 0..3 {
                    let zn = zi + 1;
                    if zn < dz || (zn - dz) % stride != 0 {
                        continue;
                    }
                    let zo = (zn - dz) / stride;
                    if zo >= od {
                        continue;
                    }
                    for dy in 0..3 {
                        let yn = yi + 1;
                        if yn < dy || (yn - dy) % stride != 0 {
                            continue;
                        }
                        let yo = (yn - dy) / stride;
                        if yo >= oh {
                            continue;
                        }
                        for dx in 0..3 {
                            let xn = xi + 1;
                            if xn < dx || (xn - dx) % stride != 0 {
                                continue;
                            }
                            let xo = (xn - dx) / stride;
                            if xo >= ow {
                                continue;
                            }
                            for oc in 0..co {
                                acc = acc
                                    + gout[((oc * od + zo) * oh + yo) * ow + xo]
                                        * weight[(((oc * ci + ic) * 3 + dz) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                }
                plane[yi * w + xi] = acc;
            }
        }
    });
}

/// Gradients w.r.t. convolution weights and bias.
pub fn conv3d_bwd_params<S: Scalar>(
    x: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    gout: &[S],
    co: usize,
    stride: usize,
    gw: &mut [S],
    gb: &mut [S],
) {
    let (od, oh, ow) = (
        conv_out_dim(d, stride),
        conv_out_dim(h, stride),
        conv_out_dim(w, stride),
    );
    let pad = pad1(x, ci, d, h, w);
    let (ph, pw) = (h + 2, w + 2);
    exec::for_each_chunk(gw, ci * 27, |oc, chunk| {
        for ic in 0..ci {
            for dz in 0..3 {
                for dy in 0..3 {
                    let mut acc = [S::zero(); 3];
                    for z in 0..od {
                        for y in 0..oh {
                            let grow = &gout[((oc * od + z) * oh + y) * ow..][..ow];
                            let prow =
                                &pad[((ic * (d + 2) + z * stride + dz) * ph + y * stride + dy) * pw..][..pw];
                            for (dx, a) in acc.iter_mut().enumerate() {
                                let mut s = S::zero();
                                if stride == 1 {
                                    let p = &prow[dx..dx + ow];
                                    for i in 0..ow {
                                        s = s + grow[i] * p[i];
                                    }
                                } else {
                                    for (i, g) in grow.iter().enumerate() {
                                        s = s + *g * prow[i * stride + dx];
                                    }
                                }
                                *a = *a + s;
                            }
                        }
                    }
                    let base = ((ic * 3 + dz) * 3 + dy) * 3;
                    chunk[base] = acc[0];
                    chunk[base + 1] = acc[1];
                    chunk[base + 2] = acc[2];
                }
            }
        }
    });
    for oc in 0..co {
        let mut s = S::zero();
        for v in &gout[oc * od * oh * ow..(oc + 1) * od * oh * ow] {
            s = s + *v;
        }
        gb[oc] = s;
    }
}

/// Forward transposed convolution, kernel 2 stride 2 (exact 2x upsampler).
/// `x`: `[ci, d, h, w]`, `weight`: `[ci, co, 2, 2, 2]`, out `[co, 2d, 2h, 2w]`.
pub fn convt3d_fwd<S: Scalar>(
    x: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    weight: &[S],
    bias: &[S],
    co: usize,
    out: &mut [S],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    exec::for_each_chunk(out, oh * ow, |idx, plane| {
        let oc = idx / od;
        let zo = idx % od;
        let (zi, dz) = (zo / 2, zo % 2);
        for yo in 0..oh {
            let (yi, dy) = (yo / 2, yo % 2);
            for xo in 0..ow {
                let (xi, dx) = (xo / 2, xo % 2);
                let mut acc = bias[oc];
                for ic in 0..ci {
                    acc = acc
                        + x[((ic * d + zi) * h + yi) * w + xi]
                            * weight[(((ic * co + oc) * 2 + dz) * 2 + dy) * 2 + dx];
                }
                plane[yo * ow + xo] = acc;
            }
        }
    });
}

pub fn convt3d_bwd_input<S: Scalar>(
    gout: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    weight: &[S],
    co: usize,
    gx: &mut [S],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(gx.len(), ci * d * h * w);
    let _ = od;
    exec::for_each_chunk(gx, h * w, |idx, plane| {
        let ic = idx / d;
        let zi = idx % d;
        for yi in 0..h {
            for xi in 0..w {
                let mut acc = S::zero();
                for oc in 0..co {
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc = acc
                                    + gout[((oc * 2 * d + 2 * zi + dz) * oh + 2 * yi + dy) * ow
                                        + 2 * xi
                                        + dx]
                                        * weight[(((ic * co + oc) * 2 + dz) * 2 + dy) * 2 + dx];
                            }
                        }
                    }
                }
                plane[yi * w + xi] = acc;
            }
        }
    });
}

pub fn convt3d_bwd_params<S: Scalar>(
    x: &[S],
    (ci, d, h, w): (usize, usize, usize, usize),
    gout: &[S],
    co: usize,
    gw: &mut [S],
    gb: &mut [S],
) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(gw.len(), ci * co * 8);
    exec::for_each_chunk(gw, co * 8, |ic, chunk| {
        for oc in 0..co {
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let mut acc = S::zero();
                        for zi in 0..d {
                            for yi in 0..h {
                                for xi in 0..w {
                                    acc = acc
                                        + x[((ic * d + zi) * h + yi) * w + xi]
                                            * gout[((oc * od + 2 * zi + dz) * oh + 2 * yi + dy)
                                                * ow
                                                + 2 * xi
                                                + dx];
                                }
                            }
                        }
                        chunk[((oc * 2 + dz) * 2 + dy) * 2 + dx] = acc;
                    }
                }
            }
        }
    });
    for oc in 0..co {
        let mut s = S::zero();
        for v in &gout[oc * od * oh * ow..(oc + 1) * od * oh * ow] {
            s = s + *v;
        }
        gb[oc] = s;
    }
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]`.
pub fn matmul_fwd<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), m * n);
    exec::for_each_chunk(out, n, |row, acc| {
        acc.fill(S::zero());
        for kk in 0..k {
            let av = a[row * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for i in 0..n {
                acc[i] = acc[i] + av * brow[i];
            }
        }
    });
}

/// `ga[m, k] = sum_n g[m, n] * b[k, n]` (i.e. `g * b^T`).
pub fn matmul_bwd_a<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, ga: &mut [S]) {
    let _ = m;
    exec::for_each_chunk(ga, k, |row, acc| {
        let grow = &g[row * n..(row + 1) * n];
        for (kk, a) in acc.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = S::zero();
            for i in 0..n {
                s = s + grow[i] * brow[i];
            }
            *a = s;
        }
    });
}

/// `gb[k, n] = sum_m a[m, k] * g[m, n]` (i.e. `a^T * g`).
pub fn matmul_bwd_b<S: Scalar>(g: &[S], a: &[S], m: usize, k: usize, n: usize, gb: &mut [S]) {
    exec::for_each_chunk(gb, n, |kk, acc| {
        acc.fill(S::zero());
        for mm in 0..m {
            let av = a[mm * k + kk];
            let grow = &g[mm * n..(mm + 1) * n];
            for i in 0..n {
                acc[i] = acc[i] + av * grow[i];
            }
        }
    });
}

/// `y[t, o] = dot(x[t, :], w[o, :]) + b[o]` with `w: [out, in]`.
pub fn linear_fwd<S: Scalar>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    t: usize,
    n_in: usize,
    n_out: usize,
    out: &mut [S],
) {
    let _ = t;
    exec::for_each_chunk(out, n_out, |row, acc| {
        let xrow = &x[row * n_in..(row + 1) * n_in];
        for (o, a) in acc.iter_mut().enumerate() {
            let wrow = &w[o * n_in..(o + 1) * n_in];
            let mut s = S::zero();
            for i in 0..n_in {
                s = s + xrow[i] * wrow[i];
            }
            *a = match b {
                Some(b) => s + b[o],
                None => s,
            };
        }
    });
}

pub fn linear_bwd_x<S: Scalar>(g: &[S], w: &[S], t: usize, n_in: usize, n_out: usize, gx: &mut [S]) {
    let _ = t;
    exec::for_each_chunk(gx, n_in, |row, acc| {
        acc.fill(S::zero());
        let grow = &g[row * n_out..(row + 1) * n_out];
        for o in 0..n_out {
            let gv = grow[o];
            let wrow = &w[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                acc[i] = acc[i] + gv * wrow[i];
            }
        }
    });
}

pub fn linear_bwd_w<S: Scalar>(g: &[S], x: &[S], t: usize, n_in: usize, n_out: usize, gw: &mut [S]) {
    exec::for_each_chunk(gw, n_in, |o, acc| {
        acc.fill(S::zero());
        for row in 0..t {
            let gv = g[row * n_out + o];
            let xrow = &x[row * n_in..(row + 1) * n_in];
            for i in 0..n_in {
                acc[i] = acc[i] + gv * xrow[i];
            }
        }
    });
}

pub fn linear_bwd_b<S: Scalar>(g: &[S], t: usize, n_out: usize, gb: &mut [S]) {
    for row in 0..t {
        for o in 0..n_out {
            gb[o] = gb[o] + g[row * n_out + o];
        }
    }
}

/// Iterate `(outer, inner)` lanes along `axis` of `shape`.
pub fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

pub fn softmax_fwd<S: Scalar>(x: &[S], shape: &[usize], axis: usize, out: &mut [S]) {
    let (outer, n, inner) = lane_dims(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = x[base];
            for j in 1..n {
                let v = x[base + j * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = S::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for j in 0..n {
                out[base + j * inner] = out[base + j * inner] * inv;
            }
        }
    }
}

pub fn softmax_bwd<S: Scalar>(y: &[S], g: &[S], shape: &[usize], axis: usize, gx: &mut [S]) {
    let (outer, n, inner) = lane_dims(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = S::zero();
            for j in 0..n {
                dot = dot + y[base + j * inner] * g[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                gx[idx] = gx[idx] + y[idx] * (g[idx] - dot);
            }
        }
    }
}

/// Normalize the last axis: `y = x / sqrt(mean(x^2) + eps)`.
pub fn rms_norm_fwd<S: Scalar>(x: &[S], n: usize, eps: f64, out: &mut [S]) {
    let lanes = x.len() / n;
    let inv_n = S::one() / lit::<S>(n as f64);
    for l in 0..lanes {
        let row = &x[l * n..(l + 1) * n];
        let mut ms = S::zero();
        for v in row {
            ms = ms + *v * *v;
        }
        let r = (ms * inv_n + lit::<S>(eps)).sqrt();
        let inv = S::one() / r;
        for (o, v) in out[l * n..(l + 1) * n].iter_mut().zip(row) {
            *o = *v * inv;
        }
    }
}

pub fn rms_norm_bwd<S: Scalar>(x: &[S], g: &[S], n: usize, eps: f64, gx: &mut [S]) {
    let lanes = x.len() / n;
    let inv_n = S::one() / lit::<S>(n as f64);
    for l in 0..lanes {
        let row = &x[l * n..(l + 1) * n];
        let grow = &g[l * n..(l + 1) * n];
        let mut ms = S::zero();
        let mut dot = S::zero();
        for (v, gv) in row.iter().zip(grow) {
            ms = ms + *v * *v;
            dot = dot + *v * *gv;
        }
        let r2 = ms * inv_n + lit::<S>(eps);
        let r = r2.sqrt();
        let c = dot * inv_n / (r2 * r);
        for ((o, v), gv) in gx[l * n..(l + 1) * n].iter_mut().zip(row).zip(grow) {
            *o = *o + *gv / r - *v * c;
        }
    }
}

/// Rotate interleaved pairs of each row by the position-dependent angles
/// `theta_i = row * base^(-2i/dim)` (rotary position embedding).
pub fn rotary_fwd<S: Scalar>(x: &[S], rows: usize, dim: usize, base: f64, out: &mut [S], invert: bool) {
    let half = dim / 2;
    for t in 0..rows {
        for i in 0..half {
            let theta = t as f64 * base.powf(-2.0 * i as f64 / dim as f64);
            let (sin, cos) = if invert {
                ((-theta).sin(), (-theta).cos())
            } else {
                (theta.sin(), theta.cos())
            };
            let (s, c) = (lit::<S>(sin), lit::<S>(cos));
            let a = x[t * dim + 2 * i];
            let b = x[t * dim + 2 * i + 1];
            out[t * dim + 2 * i] = a * c - b * s;
            out[t * dim + 2 * i + 1] = a * s + b * c;
        }
    }
}

/// Trilinear 2x upsampling tables: for output index `t`, the source pair and
/// the weight of the second sample under align-corners-false.
pub fn upsample_axis_table(n_out: usize, n_src: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|t| {
            let s = (t as f64 + 0.5) / (n_out as f64 / n_src as f64) - 0.5;
            let f = s.floor();
            let mut i0 = f as isize;
            let mut i1 = i0 + 1;
            let frac = s - f;
            let last = n_src as isize - 1;
            i0 = i0.clamp(0, last);
            i1 = i1.clamp(0, last);
            (i0 as usize, i1 as usize, frac)
        })
        .collect()
}

pub fn upsample2x_fwd<S: Scalar>(x: &[S], (c, d, h, w): (usize, usize, usize, usize), out: &mut [S]) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    debug_assert_eq!(out.len(), c * od * oh * ow);
    let tz = upsample_axis_table(od, d);
    let ty = upsample_axis_table(oh, h);
    let tx = upsample_axis_table(ow, w);
    exec::for_each_chunk(out, oh * ow, |idx, plane| {
        let cc = idx / od;
        let zo = idx % od;
        let (z0, z1, fz) = tz[zo];
        let (fz, gz) = (lit::<S>(fz), lit::<S>(1.0 - fz));
        for yo in 0..oh {
            let (y0, y1, fy) = ty[yo];
            let (fy, gy) = (lit::<S>(fy), lit::<S>(1.0 - fy));
            for xo in 0..ow {
                let (x0, x1, fx) = tx[xo];
                let (fx, gx) = (lit::<S>(fx), lit::<S>(1.0 - fx));
                let at = |zz: usize, yy: usize, xx: usize| x[((cc * d + zz) * h + yy) * w + xx];
                let c00 = at(z0, y0, x0) * gx + at(z0, y0, x1) * fx;
                let c10 = at(z0, y1, x0) * gx + at(z0, y1, x1) * fx;
                let c01 = at(z1, y0, x0) * gx + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * gx + at(z1, y1, x1) * fx;
                plane[yo * ow + xo] = (c00 * gy + c10 * fy) * gz + (c01 * gy + c11 * fy) * fz;
            }
        }
    });
}

pub fn upsample2x_bwd<S: Scalar>(g: &[S], (c, d, h, w): (usize, usize, usize, usize), gx: &mut [S]) {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let tz = upsample_axis_table(od, d);
    let ty = upsample_axis_table(oh, h);
    let tx = upsample_axis_table(ow, w);
    // scatter transpose; sequential to keep accumulation order fixed
    for cc in 0..c {
        for zo in 0..od {
            let (z0, z1, fz) = tz[zo];
            for yo in 0..oh {
                let (y0, y1, fy) = ty[yo];
                for xo in 0..ow {
                    let (x0, x1, fx) = tx[xo];
                    let gv = g[((cc * od + zo) * oh + yo) * ow + xo];
                    for (zz, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                        for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                            for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                let idx = ((cc * d + zz) * h + yy) * w + xx;
                                gx[idx] = gx[idx] + gv * lit::<S>(wz * wy * wx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2x2 box-mean downsampling (trilinear 1/2 resampling under the
/// align-corners-false convention reduces to exactly this).
pub fn downsample2x_fwd<S: Scalar>(x: &[S], (c, d, h, w): (usize, usize, usize, usize), out: &mut [S]) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    debug_assert_eq!(x.len(), c * d * h * w);
    let eighth = lit::<S>(0.125);
    exec::for_each_chunk(out, oh * ow, |idx, plane| {
        let cc = idx / od;
        let z = idx % od;
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = S::zero();
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc
                                + x[((cc * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                }
                plane[y * ow + xx] = acc * eighth;
            }
        }
    });
}

pub fn downsample2x_bwd<S: Scalar>(g: &[S], (c, d, h, w): (usize, usize, usize, usize), gx: &mut [S]) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    debug_assert_eq!(gx.len(), c * d * h * w);
    let eighth = lit::<S>(0.125);
    exec::for_each_chunk(gx, h * w, |idx, plane| {
        let cc = idx / d;
        let zi = idx % d;
        for yi in 0..h {
            for xi in 0..w {
                plane[yi * w + xi] =
                    g[((cc * od + zi / 2) * oh + yi / 2) * ow + xi / 2] * eighth;
            }
        }
    });
}

/// Differentiable warp gather: `out[c](p) = img[c](p + u(p))` with trilinear
/// interpolation and clamp-to-edge coordinates. `field` is channel-planar
/// `[3, d, h, w]` in `(ux, uy, uz)` order.
pub fn gather_trilinear_fwd<S: Scalar>(
    img: &[S],
    field: &[S],
    (c, d, h, w): (usize, usize, usize, usize),
    out: &mut [S],
) {
    let n = d * h * w;
    debug_assert_eq!(out.len(), c * n);
    exec::for_each_chunk(out, h * w, |idx, plane| {
        let cc = idx / d;
        let z = idx % d;
        for y in 0..h {
            for x in 0..w {
                let v = (z * h + y) * w + x;
                let px = lit::<S>(x as f64) + field[v];
                let py = lit::<S>(y as f64) + field[n + v];
                let pz = lit::<S>(z as f64) + field[2 * n + v];
                plane[y * w + x] = sample_channel(img, cc, (d, h, w), px, py, pz).0;
            }
        }
    });
}

/// Trilinear sample of channel `cc` plus the spatial derivative of the value
/// w.r.t. the (unclamped) sample point.
#[inline]
fn sample_channel<S: Scalar>(
    img: &[S],
    cc: usize,
    (d, h, w): (usize, usize, usize),
    px: S,
    py: S,
    pz: S,
) -> (S, [S; 3], [usize; 6], [S; 3]) {
    let zero = S::zero();
    let one = S::one();
    let cx = px.max(zero).min(lit::<S>((w - 1) as f64));
    let cy = py.max(zero).min(lit::<S>((h - 1) as f64));
    let cz = pz.max(zero).min(lit::<S>((d - 1) as f64));
    let x0 = cx.floor().to_usize().unwrap().min(w - 1);
    let y0 = cy.floor().to_usize().unwrap().min(h - 1);
    let z0 = cz.floor().to_usize().unwrap().min(d - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let z1 = (z0 + 1).min(d - 1);
    let fx = cx - lit::<S>(x0 as f64);
    let fy = cy - lit::<S>(y0 as f64);
    let fz = cz - lit::<S>(z0 as f64);
    let at = |zz: usize, yy: usize, xx: usize| img[((cc * d + zz) * h + yy) * w + xx];
    let (v000, v100) = (at(z0, y0, x0), at(z0, y0, x1));
    let (v010, v110) = (at(z0, y1, x0), at(z0, y1, x1));
    let (v001, v101) = (at(z1, y0, x0), at(z1, y0, x1));
    let (v011, v111) = (at(z1, y1, x0), at(z1, y1, x1));
    let c00 = v000 * (one - fx) + v100 * fx;
    let c10 = v010 * (one - fx) + v110 * fx;
    let c01 = v001 * (one - fx) + v101 * fx;
    let c11 = v011 * (one - fx) + v111 * fx;
    let c0 = c00 * (one - fy) + c10 * fy;
    let c1 = c01 * (one - fy) + c11 * fy;
    let val = c0 * (one - fz) + c1 * fz;
    // d val / d f: exact within the active cell
    let dfx = ((v100 - v000) * (one - fy) + (v110 - v010) * fy) * (one - fz)
        + ((v101 - v001) * (one - fy) + (v111 - v011) * fy) * fz;
    let dfy = (c10 - c00) * (one - fz) + (c11 - c01) * fz;
    let dfz = c1 - c0;
    (val, [dfx, dfy, dfz], [x0, x1, y0, y1, z0, z1], [fx, fy, fz])
}

/// Backward pass of the warp gather. Sequential: image-gradient scatter hits
/// overlapping corners.
#[allow(clippy::too_many_arguments)]
pub fn gather_trilinear_bwd<S: Scalar>(
    img: &[S],
    field: &[S],
    (c, d, h, w): (usize, usize, usize, usize),
    g: &[S],
    gimg: Option<&mut [S]>,
    gfield: Option<&mut [S]>,
) {
    let n = d * h * w;
    let mut gimg = gimg;
    let mut gfield = gfield;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = (z * h + y) * w + x;
                let px = lit::<S>(x as f64) + field[v];
                let py = lit::<S>(y as f64) + field[n + v];
                let pz = lit::<S>(z as f64) + field[2 * n + v];
                // pass-through indicator of the clamp, zero on clamped axes
                let open = |p: S, lim: usize| -> S {
                    if p > S::zero() && p < lit::<S>((lim - 1) as f64) {
                        S::one()
                    } else {
                        S::zero()
                    }
                };
                let (ox, oy, oz) = (open(px, w), open(py, h), open(pz, d));
                let mut du = [S::zero(); 3];
                for cc in 0..c {
                    let gv = g[cc * n + v];
                    let (_, dvals, corners, fracs) = sample_channel(img, cc, (d, h, w), px, py, pz);
                    if let Some(gi) = gimg.as_deref_mut() {
                        let [x0, x1, y0, y1, z0, z1] = corners;
                        let [fx, fy, fz] = fracs;
                        let one = S::one();
                        for (zz, wz) in [(z0, one - fz), (z1, fz)] {
                            for (yy, wy) in [(y0, one - fy), (y1, fy)] {
                                for (xx, wx) in [(x0, one - fx), (x1, fx)] {
                                    let idx = ((cc * d + zz) * h + yy) * w + xx;
                                    gi[idx] = gi[idx] + gv * wz * wy * wx;
                                }
                            }
                        }
                    }
                    du[0] = du[0] + gv * dvals[0] * ox;
                    du[1] = du[1] + gv * dvals[1] * oy;
                    du[2] = du[2] + gv * dvals[2] * oz;
                }
                if let Some(gf) = gfield.as_deref_mut() {
                    gf[v] = gf[v] + du[0];
                    gf[n + v] = gf[n + v] + du[1];
                    gf[2 * n + v] = gf[2 * n + v] + du[2];
                }
            }
        }
    }
}
