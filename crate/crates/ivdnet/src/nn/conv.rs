//! Stride-1 convolution kernels (im2col + GEMM), the 2x2/stride-2 transposed
//! convolution used for up-sampling, and 2x2 max-pooling. All kernels are
//! batch-parallel via rayon.

use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};

/// Geometry of a stride-1 convolution. Padding is chosen so that odd
/// (effective) kernels preserve the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub dil_h: usize,
    pub dil_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Size-preserving spec: pad = dilation * (k - 1) / 2 per axis.
    pub fn same(kh: usize, kw: usize, dil_h: usize, dil_w: usize) -> Self {
        ConvSpec {
            kh,
            kw,
            dil_h,
            dil_w,
            pad_h: dil_h * (kh - 1) / 2,
            pad_w: dil_w * (kw - 1) / 2,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    fn patch_len(&self, in_c: usize) -> usize {
        in_c * self.kh * self.kw
    }
}

/// Lay out every receptive-field patch of `x` (one image, `(C, H, W)`) as a
/// column of `cols` (`(C*kh*kw, H*W)`). Out-of-bounds taps are zero.
fn im2col(x: &ArrayView3<f64>, spec: &ConvSpec, cols: &mut Array2<f64>) {
    let (in_c, h, w) = x.dim();
    let (oh, ow) = (h, w);
    cols.fill(0.0);
    for c in 0..in_c {
        for u in 0..spec.kh {
            for v in 0..spec.kw {
                let row = (c * spec.kh + u) * spec.kw + v;
                // ix = ox + v*dil_w - pad_w must land in 0..w
                let ox_lo = spec.pad_w.saturating_sub(v * spec.dil_w);
                let ox_hi = (w + spec.pad_w)
                    .saturating_sub(v * spec.dil_w)
                    .min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + u * spec.dil_h;
                    if iy < spec.pad_h || iy - spec.pad_h >= h {
                        continue;
                    }
                    let iy = iy - spec.pad_h;
                    let ix0 = ox_lo + v * spec.dil_w - spec.pad_w;
                    let src = x.slice(s![c, iy, ix0..ix0 + (ox_hi - ox_lo)]);
                    let mut dst = cols.slice_mut(s![row, oy * ow + ox_lo..oy * ow + ox_hi]);
                    dst.assign(&src);
                }
            }
        }
    }
}

/// Scatter-add of `cols` back into image layout; exact adjoint of [`im2col`].
fn col2im_add(cols: &ArrayView2<f64>, spec: &ConvSpec, gx: &mut ArrayViewMut3<f64>) {
    let (in_c, h, w) = gx.dim();
    let (oh, ow) = (h, w);
    for c in 0..in_c {
        for u in 0..spec.kh {
            for v in 0..spec.kw {
                let row = (c * spec.kh + u) * spec.kw + v;
                let ox_lo = spec.pad_w.saturating_sub(v * spec.dil_w);
                let ox_hi = (w + spec.pad_w)
                    .saturating_sub(v * spec.dil_w)
                    .min(ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + u * spec.dil_h;
                    if iy < spec.pad_h || iy - spec.pad_h >= h {
                        continue;
                    }
                    let iy = iy - spec.pad_h;
                    let ix0 = ox_lo + v * spec.dil_w - spec.pad_w;
                    let src = cols.slice(s![row, oy * ow + ox_lo..oy * ow + ox_hi]);
                    let mut dst = gx.slice_mut(s![c, iy, ix0..ix0 + (ox_hi - ox_lo)]);
                    dst += &src;
                }
            }
        }
    }
}

/// `y = w * x + b` with `w` of shape `(out_c, in_c, kh, kw)`.
pub fn conv2d_forward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>, // (out_c, in_c*kh*kw)
    b: &Array1<f64>,
    spec: &ConvSpec,
) -> Array4<f64> {
    let (n, in_c, h, wd) = x.dim();
    let out_c = w.dim().0;
    let mut y = Array4::zeros((n, out_c, h, wd));
    y.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut yi)| {
            let xi = x.index_axis(Axis(0), i);
            let flat = if spec.is_pointwise() {
                let x2 = xi.to_shape((in_c, h * wd)).expect("contiguous image");
                w.dot(&x2)
            } else {
                let mut cols = Array2::zeros((spec.patch_len(in_c), h * wd));
                im2col(&xi, spec, &mut cols);
                w.dot(&cols)
            };
            let mut flat = flat;
            for (mut row, &bias) in flat.outer_iter_mut().zip(b.iter()) {
                row += bias;
            }
            yi.assign(
                &flat
                    .into_shape_with_order((out_c, h, wd))
                    .expect("row-major reshape"),
            );
        });
    y
}

/// Gradients of a stride-1 convolution.
pub fn conv2d_backward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>, // (out_c, in_c*kh*kw)
    gy: &Array4<f64>,
    spec: &ConvSpec,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let (n, in_c, h, wd) = x.dim();
    let out_c = w.dim().0;
    let mut gx = Array4::zeros((n, in_c, h, wd));

    // grad wrt input, batch-parallel
    gx.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut gxi)| {
            let gyi = gy.index_axis(Axis(0), i);
            let gy2 = gyi.to_shape((out_c, h * wd)).expect("contiguous image");
            let gcols = w.t().dot(&gy2); // (in_c*kh*kw, H*W)
            if spec.is_pointwise() {
                gxi.assign(
                    &gcols
                        .into_shape_with_order((in_c, h, wd))
                        .expect("row-major reshape"),
                );
            } else {
                col2im_add(&gcols.view(), spec, &mut gxi);
            }
        });

    // grad wrt weights and bias, reduced over the batch
    let (gw, gb) = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.index_axis(Axis(0), i);
            let gyi = gy.index_axis(Axis(0), i);
            let gy2 = gyi.to_shape((out_c, h * wd)).expect("contiguous image");
            let gw_i = if spec.is_pointwise() {
                let x2 = xi.to_shape((in_c, h * wd)).expect("contiguous image");
                gy2.dot(&x2.t())
            } else {
                let mut cols = Array2::zeros((spec.patch_len(in_c), h * wd));
                im2col(&xi, spec, &mut cols);
                gy2.dot(&cols.t())
            };
            let gb_i = gy2.sum_axis(Axis(1));
            (gw_i, gb_i)
        })
        .reduce(
            || (Array2::zeros(w.raw_dim()), Array1::zeros(out_c)),
            |(aw, ab), (bw, bb)| (aw + bw, ab + bb),
        );

    (gx, gw, gb)
}

/// Learned 2x up-sampling: transposed convolution, kernel 2x2, stride 2.
/// `w` has shape `(in_c, out_c, 2, 2)`; output positions do not overlap.
pub fn conv_transpose2x2_forward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>, // (in_c, out_c*4)
    b: &Array1<f64>,
) -> Array4<f64> {
    let (n, in_c, h, wd) = x.dim();
    let out_c = w.dim().1 / 4;
    let mut y = Array4::zeros((n, out_c, 2 * h, 2 * wd));
    y.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut yi)| {
            let xi = x.index_axis(Axis(0), i);
            let x2 = xi.to_shape((in_c, h * wd)).expect("contiguous image");
            let t = w.t().dot(&x2); // (out_c*4, H*W)
            for oc in 0..out_c {
                let bias = b[oc];
                for du in 0..2 {
                    for dv in 0..2 {
                        let row = t.row((oc * 2 + du) * 2 + dv);
                        let mut plane = yi.slice_mut(s![oc, du..;2, dv..;2]);
                        let src = row
                            .to_shape((h, wd))
                            .expect("row-major reshape");
                        plane.assign(&src);
                        plane += bias;
                    }
                }
            }
        });
    y
}

/// Gradients of the 2x2/stride-2 transposed convolution.
pub fn conv_transpose2x2_backward(
    x: &Array4<f64>,
    w: &ArrayView2<f64>, // (in_c, out_c*4)
    gy: &Array4<f64>,
) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
    let (n, in_c, h, wd) = x.dim();
    let out_c = w.dim().1 / 4;
    let mut gx = Array4::zeros((n, in_c, h, wd));

    // Gather gy into the (out_c*4, H*W) layout used by the forward GEMM.
    let gather = |i: usize| -> Array2<f64> {
        let gyi = gy.index_axis(Axis(0), i);
        let mut gt = Array2::zeros((out_c * 4, h * wd));
        for oc in 0..out_c {
            for du in 0..2 {
                for dv in 0..2 {
                    let plane = gyi.slice(s![oc, du..;2, dv..;2]);
                    let mut row = gt.row_mut((oc * 2 + du) * 2 + dv);
                    let flat = plane.to_shape(h * wd).expect("strided gather");
                    row.assign(&flat);
                }
            }
        }
        gt
    };

    gx.outer_iter_mut()
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut gxi)| {
            let gt = gather(i);
            let g = w.dot(&gt); // (in_c, H*W)
            gxi.assign(
                &g.into_shape_with_order((in_c, h, wd))
                    .expect("row-major reshape"),
            );
        });

    let (gw, gb) = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.index_axis(Axis(0), i);
            let x2 = xi.to_shape((in_c, h * wd)).expect("contiguous image");
            let gt = gather(i);
            let gw_i = x2.dot(&gt.t()); // (in_c, out_c*4)
            let gyi = gy.index_axis(Axis(0), i);
            let gb_i = gyi
                .to_shape((out_c, 4 * h * wd))
                .expect("contiguous image")
                .sum_axis(Axis(1));
            (gw_i, gb_i)
        })
        .reduce(
            || (Array2::zeros(w.raw_dim()), Array1::zeros(out_c)),
            |(aw, ab), (bw, bb)| (aw + bw, ab + bb),
        );

    (gx, gw, gb)
}

/// 2x2/stride-2 max pooling. Returns the pooled map and, per output element,
/// the index (0..4, row-major within the window) of the winning input.
pub fn max_pool2_forward(x: &Array4<f64>) -> (Array4<f64>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = Array4::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4usize {
                        let (du, dv) = (k / 2, k % 2);
                        let v = x[[i, ch, 2 * oy + du, 2 * ox + dv]];
                        if v > best {
                            best = v;
                            best_k = k as u8;
                        }
                    }
                    y[[i, ch, oy, ox]] = best;
                    arg[[i, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    (y, arg)
}

/// Routes pooled gradients back to the winning positions.
pub fn max_pool2_backward(gy: &Array4<f64>, arg: &Array4<u8>, in_shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut gx = Array4::zeros(in_shape);
    let (n, c, oh, ow) = gy.dim();
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = arg[[i, ch, oy, ox]] as usize;
                    let (du, dv) = (k / 2, k % 2);
                    gx[[i, ch, 2 * oy + du, 2 * ox + dv]] += gy[[i, ch, oy, ox]];
                }
            }
        }
    }
    gx
}

/// Reference convolution: direct 6-deep loop. Only used by tests as an
/// independent oracle for the im2col path.
#[cfg(test)]
pub fn conv2d_reference(
    x: &Array4<f64>,
    w: &Array4<f64>, // (out_c, in_c, kh, kw)
    b: &Array1<f64>,
    spec: &ConvSpec,
) -> Array4<f64> {
    let (n, in_c, h, wd) = x.dim();
    let out_c = w.dim().0;
    let mut y = Array4::zeros((n, out_c, h, wd));
    for i in 0..n {
        for oc in 0..out_c {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b[oc];
                    for ic in 0..in_c {
                        for u in 0..spec.kh {
                            for v in 0..spec.kw {
                                let iy = (oy + u * spec.dil_h) as isize - spec.pad_h as isize;
                                let ix = (ox + v * spec.dil_w) as isize - spec.pad_w as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x[[i, ic, iy as usize, ix as usize]]
                                        * w[[oc, ic, u, v]];
                                }
                            }
                        }
                    }
                    y[[i, oc, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut impl Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, d) in &[(1usize, 1usize), (3, 1), (3, 2), (3, 4)] {
            let spec = ConvSpec::same(k, k, d, d);
            let x = rand4(&mut rng, (2, 3, 8, 8));
            let w = rand4(&mut rng, (4, 3, k, k));
            let b = Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
            let w2 = w.to_shape((4, 3 * k * k)).unwrap();
            let fast = conv2d_forward(&x, &w2.view(), &b, &spec);
            let slow = conv2d_reference(&x, &w, &b, &spec);
            let diff = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "kernel {k} dil {d}: max diff {diff}");
        }
    }

    #[test]
    fn asymmetric_kernels_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(kh, kw, dh, dw) in &[(1usize, 3usize, 1usize, 2usize), (3, 1, 2, 1)] {
            let spec = ConvSpec::same(kh, kw, dh, dw);
            let x = rand4(&mut rng, (1, 2, 6, 6));
            let w = rand4(&mut rng, (3, 2, kh, kw));
            let b = Array1::zeros(3);
            let w2 = w.to_shape((3, 2 * kh * kw)).unwrap();
            let fast = conv2d_forward(&x, &w2.view(), &b, &spec);
            let slow = conv2d_reference(&x, &w, &b, &spec);
            let diff = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }

    /// Central finite differences on a scalar functional of the conv output.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::same(3, 3, 2, 2);
        let x = rand4(&mut rng, (2, 2, 5, 6));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        // loss = sum(y * m) for a fixed random mask m
        let m = rand4(&mut rng, (2, 3, 5, 6));
        let w2 = w.to_shape((3, 18)).unwrap();

        let (gx, gw, gb) = conv2d_backward(&x, &w2.view(), &m, &spec);
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            let w2 = w.to_shape((3, 18)).unwrap();
            (conv2d_forward(x, &w2.view(), b, &spec) * &m).sum()
        };

        let eps = 1e-6;
        for _ in 0..20 {
            let idx = (
                rng.gen_range(0..2),
                rng.gen_range(0..2),
                rng.gen_range(0..5),
                rng.gen_range(0..6),
            );
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += eps;
            xm[idx] -= eps;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-7, "gx mismatch at {idx:?}");
        }
        for _ in 0..20 {
            let idx = (
                rng.gen_range(0..3),
                rng.gen_range(0..2),
                rng.gen_range(0..3),
                rng.gen_range(0..3),
            );
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[idx] += eps;
            wm[idx] -= eps;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            let flat = (idx.1 * 3 + idx.2) * 3 + idx.3;
            assert!((num - gw[[idx.0, flat]]).abs() < 1e-7, "gw mismatch at {idx:?}");
        }
        for oc in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[oc] += eps;
            bm[oc] -= eps;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((num - gb[oc]).abs() < 1e-7);
        }
    }

    #[test]
    fn transpose_doubles_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (1, 3, 4, 5));
        let w = rand4(&mut rng, (3, 2, 2, 2));
        let w2 = w.to_shape((3, 8)).unwrap();
        let b = Array1::zeros(2);
        let y = conv_transpose2x2_forward(&x, &w2.view(), &b);
        assert_eq!(y.dim(), (1, 2, 8, 10));
        // every output element is bias + a single product chain; check one
        let expect: f64 = (0..3).map(|ic| x[[0, ic, 1, 2]] * w[[ic, 0, 1, 0]]).sum();
        assert!((y[[0, 0, 3, 4]] - expect).abs() < 1e-12);
    }

    #[test]
    fn transpose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand4(&mut rng, (2, 2, 3, 4));
        let w = rand4(&mut rng, (2, 3, 2, 2));
        let b = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let m = rand4(&mut rng, (2, 3, 6, 8));
        let w2 = w.to_shape((2, 12)).unwrap();
        let (gx, gw, gb) = conv_transpose2x2_backward(&x, &w2.view(), &m);
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| -> f64 {
            let w2 = w.to_shape((2, 12)).unwrap();
            (conv_transpose2x2_forward(x, &w2.view(), b) * &m).sum()
        };
        let eps = 1e-6;
        for _ in 0..15 {
            let idx = (
                rng.gen_range(0..2),
                rng.gen_range(0..2),
                rng.gen_range(0..3),
                rng.gen_range(0..4),
            );
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += eps;
            xm[idx] -= eps;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((num - gx[idx]).abs() < 1e-7);
        }
        for _ in 0..15 {
            let idx = (
                rng.gen_range(0..2),
                rng.gen_range(0..3),
                rng.gen_range(0..2),
                rng.gen_range(0..2),
            );
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[idx] += eps;
            wm[idx] -= eps;
            let num = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            let flat = (idx.1 * 2 + idx.2) * 2 + idx.3;
            assert!((num - gw[[idx.0, flat]]).abs() < 1e-7);
        }
        for oc in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[oc] += eps;
            bm[oc] -= eps;
            let num = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((num - gb[oc]).abs() < 1e-7);
        }
    }

    #[test]
    fn pooling_picks_window_maxima_and_routes_gradient() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 2.0, 5.0, 4.0, 3.0, 0.0, -1.0, 6.0],
        )
        .unwrap();
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.as_slice().unwrap(), &[3.0, 6.0]);
        let gy = Array4::from_shape_vec((1, 1, 1, 2), vec![10.0, 20.0]).unwrap();
        let gx = max_pool2_backward(&gy, &arg, (1, 1, 2, 4));
        assert_eq!(
            gx.as_slice().unwrap(),
            &[0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 20.0]
        );
    }
}
