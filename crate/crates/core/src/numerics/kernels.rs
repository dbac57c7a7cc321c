//! Raw compute loops shared by the tape operations and the inference path.
//!
//! All matrices are dense row-major slices; dimensions are passed alongside.

use super::scalar::Scalar;

/// C(m x n) += A(m x k) * B(k x n)
pub fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

/// C(m x n) += A(m x k) * B(n x k)^T
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// C(k x n) += A(m x k)^T * B(m x n)
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

pub fn add_bias_rows<T: Scalar>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.iter()) {
            *v += b;
        }
    }
}

pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - mx).exp();
    }
    let lse = mx + sum.ln();
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable log(sigmoid(x)) = -ln(1 + e^-x).
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Valid output length of a padded strided window sweep.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: (usize, usize)) -> usize {
    let padded = input + pad.0 + pad.1;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// 1-D convolution over a time x channels matrix.
///
/// x: t_in x c_in, w: [c_out][kernel][c_in], b: c_out, out: t_out x c_out.
pub fn conv1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out: &mut [T],
) {
    let t_out = out.len() / c_out;
    for t in 0..t_out {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        orow.copy_from_slice(b);
        for k in 0..kernel {
            let tin = (t * stride + k) as isize - pad_left as isize;
            if tin < 0 || tin as usize >= t_in {
                continue;
            }
            let xrow = &x[tin as usize * c_in..(tin as usize + 1) * c_in];
            for (o, orv) in orow.iter_mut().enumerate() {
                let wrow = &w[(o * kernel + k) * c_in..(o * kernel + k + 1) * c_in];
                let mut acc = T::zero();
                for (&xv, &wv) in xrow.iter().zip(wrow.iter()) {
                    acc += xv * wv;
                }
                *orv += acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    t_in: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let t_out = dout.len() / c_out;
    for t in 0..t_out {
        let grow = &dout[t * c_out..(t + 1) * c_out];
        for (o, &g) in grow.iter().enumerate() {
            db[o] += g;
        }
        for k in 0..kernel {
            let tin = (t * stride + k) as isize - pad_left as isize;
            if tin < 0 || tin as usize >= t_in {
                continue;
            }
            let tin = tin as usize;
            let xrow = &x[tin * c_in..(tin + 1) * c_in];
            let dxrow = &mut dx[tin * c_in..(tin + 1) * c_in];
            for (o, &g) in grow.iter().enumerate() {
                let base = (o * kernel + k) * c_in;
                let wrow = &w[base..base + c_in];
                let dwrow = &mut dw[base..base + c_in];
                for ci in 0..c_in {
                    dxrow[ci] += g * wrow[ci];
                    dwrow[ci] += g * xrow[ci];
                }
            }
        }
    }
}

/// Shape bundle for 2-D convolution: input (batch, c_in, t, f).
#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub f_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kf: usize,
    pub stride_t: usize,
    pub stride_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

impl Conv2dDims {
    pub fn t_out(&self) -> usize {
        conv_out_len(self.t_in, self.kt, self.stride_t, (self.pad_t, self.pad_t))
    }
    pub fn f_out(&self) -> usize {
        conv_out_len(self.f_in, self.kf, self.stride_f, (self.pad_f, self.pad_f))
    }
}

/// w layout: [c_out][c_in][kt][kf], b: c_out, out: (batch, c_out, t_out, f_out).
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], d: &Conv2dDims, out: &mut [T]) {
    let (t_out, f_out) = (d.t_out(), d.f_out());
    let in_plane = d.t_in * d.f_in;
    let out_plane = t_out * f_out;
    for bi in 0..d.batch {
        let xb = &x[bi * d.c_in * in_plane..(bi + 1) * d.c_in * in_plane];
        let ob = &mut out[bi * d.c_out * out_plane..(bi + 1) * d.c_out * out_plane];
        for o in 0..d.c_out {
            let oplane = &mut ob[o * out_plane..(o + 1) * out_plane];
            for v in oplane.iter_mut() {
                *v = b[o];
            }
            for ci in 0..d.c_in {
                let xplane = &xb[ci * in_plane..(ci + 1) * in_plane];
                let wbase = (o * d.c_in + ci) * d.kt * d.kf;
                for t in 0..t_out {
                    for kt in 0..d.kt {
                        let tin = (t * d.stride_t + kt) as isize - d.pad_t as isize;
                        if tin < 0 || tin as usize >= d.t_in {
                            continue;
                        }
                        let xrow = &xplane[tin as usize * d.f_in..(tin as usize + 1) * d.f_in];
                        let orow = &mut oplane[t * f_out..(t + 1) * f_out];
                        for kf in 0..d.kf {
                            let wv = w[wbase + kt * d.kf + kf];
                            let off = kf as isize - d.pad_f as isize;
                            for (f, ov) in orow.iter_mut().enumerate() {
                                let fin = (f * d.stride_f) as isize + off;
                                if fin >= 0 && (fin as usize) < d.f_in {
                                    *ov += wv * xrow[fin as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d: &Conv2dDims,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let (t_out, f_out) = (d.t_out(), d.f_out());
    let in_plane = d.t_in * d.f_in;
    let out_plane = t_out * f_out;
    for bi in 0..d.batch {
        let xb = &x[bi * d.c_in * in_plane..(bi + 1) * d.c_in * in_plane];
        let gb = &dout[bi * d.c_out * out_plane..(bi + 1) * d.c_out * out_plane];
        let dxb = &mut dx[bi * d.c_in * in_plane..(bi + 1) * d.c_in * in_plane];
        for o in 0..d.c_out {
            let gplane = &gb[o * out_plane..(o + 1) * out_plane];
            for &g in gplane.iter() {
                db[o] += g;
            }
            for ci in 0..d.c_in {
                let xplane = &xb[ci * in_plane..(ci + 1) * in_plane];
                let dxplane = &mut dxb[ci * in_plane..(ci + 1) * in_plane];
                let wbase = (o * d.c_in + ci) * d.kt * d.kf;
                for t in 0..t_out {
                    for kt in 0..d.kt {
                        let tin = (t * d.stride_t + kt) as isize - d.pad_t as isize;
                        if tin < 0 || tin as usize >= d.t_in {
                            continue;
                        }
                        let tin = tin as usize;
                        let grow = &gplane[t * f_out..(t + 1) * f_out];
                        for kf in 0..d.kf {
                            let widx = wbase + kt * d.kf + kf;
                            let wv = w[widx];
                            let off = kf as isize - d.pad_f as isize;
                            let mut dwacc = T::zero();
                            for (f, &g) in grow.iter().enumerate() {
                                let fin = (f * d.stride_f) as isize + off;
                                if fin >= 0 && (fin as usize) < d.f_in {
                                    let fin = fin as usize;
                                    dxplane[tin * d.f_in + fin] += g * wv;
                                    dwacc += g * xplane[tin * d.f_in + fin];
                                }
                            }
                            dw[widx] += dwacc;
                        }
                    }
                }
            }
        }
    }
}

/// One LSTM cell step. Gate order in the 4H axis: input, forget, cell, output.
///
/// Returns activated gates (batch x 4h) for the backward pass and fills
/// h_new/c_new (batch x h).
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_forward<T: Scalar>(
    x: &[T],
    h: &[T],
    c: &[T],
    w_ih: &[T],
    w_hh: &[T],
    bias: &[T],
    batch: usize,
    in_dim: usize,
    hidden: usize,
    h_new: &mut [T],
    c_new: &mut [T],
) -> Vec<T> {
    let mut gates = vec![T::zero(); batch * 4 * hidden];
    matmul_nn_acc(x, w_ih, batch, in_dim, 4 * hidden, &mut gates);
    matmul_nn_acc(h, w_hh, batch, hidden, 4 * hidden, &mut gates);
    add_bias_rows(&mut gates, bias);
    for b in 0..batch {
        let g = &mut gates[b * 4 * hidden..(b + 1) * 4 * hidden];
        for j in 0..hidden {
            g[j] = sigmoid(g[j]);
            g[hidden + j] = sigmoid(g[hidden + j]);
            g[2 * hidden + j] = g[2 * hidden + j].tanh();
            g[3 * hidden + j] = sigmoid(g[3 * hidden + j]);
        }
        for j in 0..hidden {
            let cv = g[hidden + j] * c[b * hidden + j] + g[j] * g[2 * hidden + j];
            c_new[b * hidden + j] = cv;
            h_new[b * hidden + j] = g[3 * hidden + j] * cv.tanh();
        }
    }
    gates
}

/// Backward of one LSTM cell step. Accumulates into all gradient buffers.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward<T: Scalar>(
    x: &[T],
    h: &[T],
    c: &[T],
    w_ih: &[T],
    w_hh: &[T],
    gates: &[T],
    c_new: &[T],
    dh_new: &[T],
    dc_new: &[T],
    batch: usize,
    in_dim: usize,
    hidden: usize,
    dx: &mut [T],
    dh: &mut [T],
    dc: &mut [T],
    dw_ih: &mut [T],
    dw_hh: &mut [T],
    dbias: &mut [T],
) {
    let mut dgates = vec![T::zero(); batch * 4 * hidden];
    for b in 0..batch {
        let g = &gates[b * 4 * hidden..(b + 1) * 4 * hidden];
        let dg = &mut dgates[b * 4 * hidden..(b + 1) * 4 * hidden];
        for j in 0..hidden {
            let i_g = g[j];
            let f_g = g[hidden + j];
            let g_g = g[2 * hidden + j];
            let o_g = g[3 * hidden + j];
            let tc = c_new[b * hidden + j].tanh();
            let dhv = dh_new[b * hidden + j];
            let dcv = dc_new[b * hidden + j] + dhv * o_g * (T::one() - tc * tc);
            dg[3 * hidden + j] = dhv * tc * o_g * (T::one() - o_g);
            dg[hidden + j] = dcv * c[b * hidden + j] * f_g * (T::one() - f_g);
            dg[j] = dcv * g_g * i_g * (T::one() - i_g);
            dg[2 * hidden + j] = dcv * i_g * (T::one() - g_g * g_g);
            dc[b * hidden + j] += dcv * f_g;
        }
    }
    matmul_nt_acc(&dgates, w_ih, batch, 4 * hidden, in_dim, dx);
    matmul_nt_acc(&dgates, w_hh, batch, 4 * hidden, hidden, dh);
    matmul_tn_acc(x, &dgates, batch, in_dim, 4 * hidden, dw_ih);
    matmul_tn_acc(h, &dgates, batch, hidden, 4 * hidden, dw_hh);
    for b in 0..batch {
        for j in 0..4 * hidden {
            dbias[j] += dgates[b * 4 * hidden + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0f64, 6.0, 7.0, 8.0]; // 2x2
        let mut c = [0.0f64; 4];
        matmul_nn_acc(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut nn = [0.0f64; 4];
        matmul_nn_acc(&a, &b, 2, 3, 2, &mut nn);
        // b transposed into 2x3 then nt should match
        let bt = [1.0f64, -1.0, 0.0, 0.5, 2.0, 1.0];
        let mut nt = [0.0f64; 4];
        matmul_nt_acc(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nn, nt);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = [0.3f64, -1.2, 4.0, 0.0];
        softmax_row(&mut row);
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0f64) - (-(2.0f64).ln())).abs() < 1e-15);
        assert!(log_sigmoid(800.0f64) > -1e-300);
        assert!(log_sigmoid(-800.0f64).is_finite());
    }
}
