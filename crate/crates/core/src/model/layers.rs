//! Layer primitives with explicit backward passes.
//!
//! Everything operates on `[B, C, H, W]` f64 tensors in standard layout.
//! Convolutions go through im2col + GEMM (one sample at a time), which keeps
//! every reduction order fixed so training is bit-reproducible.

use ndarray::{Array2, Array4, ArrayView2};

/// Negative slope of the leaky rectifier used throughout the backbone.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    /// Kernel side (1 or 3); padding is k/2 so spatial size is preserved.
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

fn im2col(sample: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut Array2<f64>) {
    let pad = (k / 2) as isize;
    let cols_slice = cols.as_slice_mut().expect("cols contiguous");
    let hw = h * w;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_base = row * hw;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    let dst = &mut cols_slice[out_base + y * w..out_base + (y + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_base = ci * hw + iy as usize * w;
                    dst[..x_lo].fill(0.0);
                    for x in x_lo..x_hi {
                        dst[x] = sample[src_base + (x as isize + dx) as usize];
                    }
                    dst[x_hi..].fill(0.0);
                }
            }
        }
    }
}

/// Scatter-add the column gradient back onto the input gradient.
fn col2im_accumulate(
    dcols: &Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    dx_sample: &mut [f64],
) {
    let pad = (k / 2) as isize;
    let dcols_slice = dcols.as_slice().expect("dcols contiguous");
    let hw = h * w;
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_base = row * hw;
                let dx_off = kx as isize - pad;
                let x_lo = (-dx_off).max(0) as usize;
                let x_hi = ((w as isize - dx_off).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = ci * hw + iy as usize * w;
                    let src = &dcols_slice[src_base + y * w..src_base + (y + 1) * w];
                    for x in x_lo..x_hi {
                        dx_sample[dst_base + (x as isize + dx_off) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// Same-padding convolution; `weight` is `[cout, cin, k, k]` flattened,
/// `bias` is `[cout]`.
pub fn conv_forward(x: &Array4<f64>, weight: &[f64], bias: &[f64], shape: ConvShape) -> Array4<f64> {
    let (b, cin, h, w) = x.dim();
    debug_assert_eq!(cin, shape.cin);
    debug_assert_eq!(weight.len(), shape.weight_len());
    let hw = h * w;
    let kk = shape.cin * shape.k * shape.k;

    let w_mat = ArrayView2::from_shape((shape.cout, kk), weight).expect("weight shape");
    let x_slice = x.as_slice().expect("x contiguous");
    let mut out = Array4::<f64>::zeros((b, shape.cout, h, w));
    let out_slice = out.as_slice_mut().expect("out contiguous");
    let mut cols = Array2::<f64>::zeros((kk, hw));

    for bi in 0..b {
        let sample = &x_slice[bi * cin * hw..(bi + 1) * cin * hw];
        im2col(sample, cin, h, w, shape.k, &mut cols);
        let y = w_mat.dot(&cols); // [cout, hw]
        let y_slice = y.as_slice().expect("gemm output contiguous");
        let dst = &mut out_slice[bi * shape.cout * hw..(bi + 1) * shape.cout * hw];
        for co in 0..shape.cout {
            let bias_v = bias[co];
            let row = &y_slice[co * hw..(co + 1) * hw];
            let drow = &mut dst[co * hw..(co + 1) * hw];
            for i in 0..hw {
                drow[i] = row[i] + bias_v;
            }
        }
    }
    out
}

/// Backward of [`conv_forward`]. Returns dX and accumulates dW/db into the
/// provided slices (caller zero-initializes per step).
pub fn conv_backward(
    x: &Array4<f64>,
    weight: &[f64],
    shape: ConvShape,
    dy: &Array4<f64>,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Array4<f64> {
    let (b, cin, h, w) = x.dim();
    let hw = h * w;
    let kk = shape.cin * shape.k * shape.k;

    let w_mat = ArrayView2::from_shape((shape.cout, kk), weight).expect("weight shape");
    let x_slice = x.as_slice().expect("x contiguous");
    let dy_slice = dy.as_slice().expect("dy contiguous");
    let mut dx = Array4::<f64>::zeros((b, cin, h, w));
    let dx_slice = dx.as_slice_mut().expect("dx contiguous");
    let mut cols = Array2::<f64>::zeros((kk, hw));
    let mut dw_mat = Array2::<f64>::zeros((shape.cout, kk));

    for bi in 0..b {
        let sample = &x_slice[bi * cin * hw..(bi + 1) * cin * hw];
        im2col(sample, cin, h, w, shape.k, &mut cols);
        let dy_mat =
            ArrayView2::from_shape((shape.cout, hw), &dy_slice[bi * shape.cout * hw..(bi + 1) * shape.cout * hw])
                .expect("dy shape");
        dw_mat = dw_mat + dy_mat.dot(&cols.t());
        for co in 0..shape.cout {
            let mut acc = 0.0;
            for v in dy_mat.row(co) {
                acc += v;
            }
            dbias[co] += acc;
        }
        let dcols = w_mat.t().dot(&dy_mat); // [kk, hw]
        col2im_accumulate(
            &dcols,
            cin,
            h,
            w,
            shape.k,
            &mut dx_slice[bi * cin * hw..(bi + 1) * cin * hw],
        );
    }
    let dw_slice = dw_mat.as_slice().expect("dw contiguous");
    for (dst, src) in dweight.iter_mut().zip(dw_slice) {
        *dst += src;
    }
    dx
}

pub fn leaky_relu_inplace(x: &mut Array4<f64>) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Multiply `dy` by the rectifier derivative, read off the post-activation
/// output (sign-preserving, so the output sign identifies the branch).
pub fn leaky_relu_backward_inplace(y: &Array4<f64>, dy: &mut Array4<f64>) {
    for (g, out) in dy.iter_mut().zip(y.iter()) {
        if *out < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the flat input
/// index of each winner (first maximum wins ties).
pub fn maxpool2_forward(x: &Array4<f64>) -> (Array4<f64>, Vec<u32>) {
    let (b, c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let x_slice = x.as_slice().expect("x contiguous");
    let mut out = Array4::<f64>::zeros((b, c, oh, ow));
    let out_slice = out.as_slice_mut().expect("out contiguous");
    let mut argmax = vec![0u32; b * c * oh * ow];

    for bc in 0..b * c {
        let plane = &x_slice[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out_slice[bc * oh * ow..(bc + 1) * oh * ow];
        let arg = &mut argmax[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                let mut best_v = plane[best];
                for &idx in &candidates[1..] {
                    if plane[idx] > best_v {
                        best = idx;
                        best_v = plane[idx];
                    }
                }
                dst[oy * ow + ox] = best_v;
                arg[oy * ow + ox] = (bc * h * w + best) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(
    dy: &Array4<f64>,
    argmax: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(input_dim);
    let dx_slice = dx.as_slice_mut().expect("dx contiguous");
    for (g, &idx) in dy.iter().zip(argmax.iter()) {
        dx_slice[idx as usize] += *g;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    let x_slice = x.as_slice().expect("x contiguous");
    let out_slice = out.as_slice_mut().expect("out contiguous");
    for bc in 0..b * c {
        let src = &x_slice[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out_slice[bc * 4 * h * w..(bc + 1) * 4 * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let v = src[y * w + x_];
                let o = (2 * y) * (2 * w) + 2 * x_;
                dst[o] = v;
                dst[o + 1] = v;
                dst[o + 2 * w] = v;
                dst[o + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let dy_slice = dy.as_slice().expect("dy contiguous");
    let dx_slice = dx.as_slice_mut().expect("dx contiguous");
    for bc in 0..b * c {
        let src = &dy_slice[bc * h2 * w2..(bc + 1) * h2 * w2];
        let dst = &mut dx_slice[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let o = (2 * y) * w2 + 2 * x_;
                dst[y * w + x_] = src[o] + src[o + 1] + src[o + w2] + src[o + w2 + 1];
            }
        }
    }
    dx
}

/// Concatenate along the channel axis (standard layout output).
pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (ba, ca, h, w) = a.dim();
    let (bb, cb, hb, wb) = b.dim();
    debug_assert_eq!((ba, h, w), (bb, hb, wb));
    let mut out = Array4::<f64>::zeros((ba, ca + cb, h, w));
    let a_slice = a.as_slice().expect("a contiguous");
    let b_slice = b.as_slice().expect("b contiguous");
    let out_slice = out.as_slice_mut().expect("out contiguous");
    let (pa, pb) = (ca * h * w, cb * h * w);
    for bi in 0..ba {
        out_slice[bi * (pa + pb)..bi * (pa + pb) + pa]
            .copy_from_slice(&a_slice[bi * pa..(bi + 1) * pa]);
        out_slice[bi * (pa + pb) + pa..(bi + 1) * (pa + pb)]
            .copy_from_slice(&b_slice[bi * pb..(bi + 1) * pb]);
    }
    out
}

/// Split a channel-axis gradient back into the two concatenated parts.
pub fn split_channels(dy: &Array4<f64>, ca: usize) -> (Array4<f64>, Array4<f64>) {
    let (da, db) = dy.view().split_at(ndarray::Axis(1), ca);
    (da.to_owned(), db.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut t = Array4::zeros(dim);
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    /// Central finite difference of sum(dy * layer(x)) w.r.t. one entry.
    fn conv_fd_check(cin: usize, cout: usize, k: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shape = ConvShape { cin, cout, k };
        let x = random_tensor(&mut rng, (2, cin, 6, 6));
        let weight: Vec<f64> = (0..shape.weight_len())
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
        let dy = random_tensor(&mut rng, (2, cout, 6, 6));

        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; cout];
        let dx = conv_backward(&x, &weight, shape, &dy, &mut dw, &mut db);

        let loss = |x: &Array4<f64>, w: &[f64], b: &[f64]| -> f64 {
            let y = conv_forward(x, w, b, shape);
            y.iter().zip(dy.iter()).map(|(a, g)| a * g).sum()
        };

        let h = 1e-6;
        // a few weight entries
        for idx in [0, weight.len() / 2, weight.len() - 1] {
            let mut wp = weight.clone();
            wp[idx] += h;
            let mut wm = weight.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
            assert!(
                (fd - dw[idx]).abs() < 1e-6 * fd.abs().max(1.0),
                "dW mismatch at {idx}: fd={fd} an={}",
                dw[idx]
            );
        }
        // one input entry
        let xi = [1, cin - 1, 3, 2];
        let mut xp = x.clone();
        xp[xi] += h;
        let mut xm = x.clone();
        xm[xi] -= h;
        let fd = (loss(&xp, &weight, &bias) - loss(&xm, &weight, &bias)) / (2.0 * h);
        assert!((fd - dx[xi]).abs() < 1e-6 * fd.abs().max(1.0));
        // one bias entry
        let mut bp = bias.clone();
        bp[0] += h;
        let mut bm = bias.clone();
        bm[0] -= h;
        let fd = (loss(&x, &weight, &bp) - loss(&x, &weight, &bm)) / (2.0 * h);
        assert!((fd - db[0]).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn conv3_gradients_match_finite_differences() {
        conv_fd_check(3, 4, 3);
    }

    #[test]
    fn conv1_gradients_match_finite_differences() {
        conv_fd_check(5, 2, 1);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        x[[0, 0, 1, 1]] = 5.0;
        x[[0, 0, 2, 3]] = 7.0;
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 7.0);
        let mut dy = Array4::<f64>::zeros((1, 1, 2, 2));
        dy[[0, 0, 0, 0]] = 1.0;
        dy[[0, 0, 1, 1]] = 2.0;
        let dx = maxpool2_backward(&dy, &arg, (1, 1, 4, 4));
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
        assert_eq!(dx[[0, 0, 2, 3]], 2.0);
        assert_eq!(dx.sum(), 3.0);
    }

    #[test]
    fn upsample_backward_sums_quads() {
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 1]] = 3.0;
        let y = upsample2_forward(&x);
        assert_eq!(y[[0, 0, 0, 2]], 3.0);
        assert_eq!(y[[0, 0, 1, 3]], 3.0);
        let dy = Array4::<f64>::ones((1, 1, 4, 4));
        let dx = upsample2_backward(&dy);
        assert!(dx.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, (2, 3, 4, 4));
        let b = random_tensor(&mut rng, (2, 5, 4, 4));
        let y = concat_channels(&a, &b);
        assert_eq!(y.dim(), (2, 8, 4, 4));
        let (da, db) = split_channels(&y, 3);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
