//! Raw forward/backward kernels used by the tape ops.
//!
//! Convolutions are lowered to im2col + matmul so the heavy lifting runs in
//! `matrixmultiply` via `ndarray::dot`. Backward passes recompute the patch
//! matrix instead of caching it; the gather is cheap next to the matmul.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, Axis, Ix4, IxDyn};

pub type Arr = ArrayD<f64>;

/// Output spatial size of a cubic convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    c_in: usize,
    in_dhw: [usize; 3],
    out_dhw: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(x: &ArrayViewD<f64>, kernel: usize, stride: usize, pad: usize) -> Self {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv3d input must be (C, D, H, W)");
        let in_dhw = [s[1], s[2], s[3]];
        let out_dhw = [
            conv_out_len(s[1], kernel, stride, pad),
            conv_out_len(s[2], kernel, stride, pad),
            conv_out_len(s[3], kernel, stride, pad),
        ];
        ConvGeom { c_in: s[0], in_dhw, out_dhw, kernel, stride, pad, }
    }

    fn n_pos(&self) -> usize {
        self.out_dhw.iter().product()
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel * self.kernel
    }
}

/// Gather input patches: one row per output position, columns ordered
/// (c_in, kd, kh, kw) to match the standard-layout flattening of the weight.
fn im2col(x: &ArrayViewD<f64>, g: &ConvGeom) -> Array2<f64> {
    let xs = x.as_slice().expect("conv input must be standard layout");
    let [din, hin, win] = g.in_dhw;
    let [dout, hout, wout] = g.out_dhw;
    let k = g.kernel;
    let mut patches = Array2::<f64>::zeros((g.n_pos(), g.patch_len()));
    let ps = patches.as_slice_mut().unwrap();
    let plen = g.patch_len();
    let mut row = 0usize;
    for od in 0..dout {
        for oh in 0..hout {
            for ow in 0..wout {
                let base = row * plen;
                let mut col = 0usize;
                for c in 0..g.c_in {
                    let coff = c * din * hin * win;
                    for kd in 0..k {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        for kh in 0..k {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            let in_plane = id >= 0 && id < din as isize && ih >= 0 && ih < hin as isize;
                            let rowoff = if in_plane {
                                coff + (id as usize) * hin * win + (ih as usize) * win
                            } else {
                                0
                            };
                            for kw in 0..k {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if in_plane && iw >= 0 && iw < win as isize {
                                    ps[base + col] = xs[rowoff + iw as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    patches
}

/// Scatter-add patch-space gradients back onto the input grid.
fn col2im(gpatches: &Array2<f64>, g: &ConvGeom) -> Arr {
    let [din, hin, win] = g.in_dhw;
    let [dout, hout, wout] = g.out_dhw;
    let k = g.kernel;
    let mut gx = Arr::zeros(IxDyn(&[g.c_in, din, hin, win]));
    let out = gx.as_slice_mut().unwrap();
    let gp = gpatches.as_slice().unwrap();
    let plen = g.patch_len();
    let mut row = 0usize;
    for od in 0..dout {
        for oh in 0..hout {
            for ow in 0..wout {
                let base = row * plen;
                let mut col = 0usize;
                for c in 0..g.c_in {
                    let coff = c * din * hin * win;
                    for kd in 0..k {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        for kh in 0..k {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            let in_plane = id >= 0 && id < din as isize && ih >= 0 && ih < hin as isize;
                            let rowoff = if in_plane {
                                coff + (id as usize) * hin * win + (ih as usize) * win
                            } else {
                                0
                            };
                            for kw in 0..k {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if in_plane && iw >= 0 && iw < win as isize {
                                    out[rowoff + iw as usize] += gp[base + col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    gx
}

fn weight_matrix<'a>(w: &'a ArrayViewD<'a, f64>) -> ArrayView2<'a, f64> {
    let ws = w.shape();
    w.view()
        .into_shape_with_order((ws[0], ws[1] * ws[2] * ws[3] * ws[4]))
        .expect("conv weight must be standard layout")
}

/// y = conv3d(x, w) + b with cubic kernel, symmetric zero padding.
pub fn conv3d_forward(
    x: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    b: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
) -> Arr {
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv3d weight must be (Cout, Cin, k, k, k)");
    let (c_out, kernel) = (ws[0], ws[2]);
    let g = ConvGeom::new(x, kernel, stride, pad);
    assert_eq!(ws[1], g.c_in, "conv3d weight C_in mismatch");
    let patches = im2col(x, &g);
    let wm = weight_matrix(w);
    // (n_pos, K) . (K, Cout) -> (n_pos, Cout)
    let mut out_mat = patches.dot(&wm.t());
    let bias = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    out_mat += &bias.view().insert_axis(Axis(0));
    let [dout, hout, wout] = g.out_dhw;
    let out = out_mat
        .t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[c_out, dout, hout, wout]))
        .unwrap();
    out
}

/// Gradients of conv3d w.r.t. (x, w, b).
pub fn conv3d_backward(
    x: &ArrayViewD<f64>,
    w: &ArrayViewD<f64>,
    gout: &ArrayViewD<f64>,
    stride: usize,
    pad: usize,
) -> (Arr, Arr, Arr) {
    let ws = w.shape().to_vec();
    let (c_out, kernel) = (ws[0], ws[2]);
    let g = ConvGeom::new(x, kernel, stride, pad);
    let n_pos = g.n_pos();
    let gmat = gout
        .view()
        .into_shape_with_order((c_out, n_pos))
        .expect("conv grad must be standard layout")
        .t()
        .as_standard_layout()
        .to_owned();
    let patches = im2col(x, &g);
    // (Cout, n_pos) . (n_pos, K)
    let gw = gmat.t().dot(&patches);
    let gw = gw.into_shape_with_order(IxDyn(&ws)).unwrap();
    let gb = gmat.sum_axis(Axis(0)).into_dyn();
    let wv = w.view();
    let wm = weight_matrix(&wv);
    let gpatches = gmat.dot(&wm);
    let gx = col2im(&gpatches, &g);
    (gx, gw, gb)
}

/// Nearest-neighbour 2x upsampling along all three spatial axes.
pub fn nearest_up2_forward(x: &ArrayViewD<f64>) -> Arr {
    let s = x.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Arr::zeros(IxDyn(&[c, 2 * d, 2 * h, 2 * w]));
    {
        let xv = x.view().into_dimensionality::<Ix4>().unwrap();
        let mut ov = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..c {
            for od in 0..2 * d {
                for oh in 0..2 * h {
                    for ow in 0..2 * w {
                        ov[[ci, od, oh, ow]] = xv[[ci, od / 2, oh / 2, ow / 2]];
                    }
                }
            }
        }
    }
    out
}

pub fn nearest_up2_backward(gout: &ArrayViewD<f64>, in_shape: &[usize]) -> Arr {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let mut gx = Arr::zeros(IxDyn(in_shape));
    {
        let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
        let mut xv = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..c {
            for od in 0..2 * d {
                for oh in 0..2 * h {
                    for ow in 0..2 * w {
                        xv[[ci, od / 2, oh / 2, ow / 2]] += gv[[ci, od, oh, ow]];
                    }
                }
            }
        }
    }
    gx
}

/// Axis sampling plan for trilinear interpolation: (i0, i1, t) per output index.
fn linear_axis_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Trilinear resampling of (C, D, H, W) to a target spatial shape.
pub fn trilinear_forward(x: &ArrayViewD<f64>, out_dhw: [usize; 3]) -> Arr {
    let s = x.shape();
    let c = s[0];
    let plans: Vec<_> = (0..3).map(|a| linear_axis_plan(s[a + 1], out_dhw[a])).collect();
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let mut out = Arr::zeros(IxDyn(&[c, out_dhw[0], out_dhw[1], out_dhw[2]]));
    {
        let mut ov = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..c {
            for (od, &(d0, d1, td)) in plans[0].iter().enumerate() {
                for (oh, &(h0, h1, th)) in plans[1].iter().enumerate() {
                    for (ow, &(w0, w1, tw)) in plans[2].iter().enumerate() {
                        let mut acc = 0.0;
                        for (di, wd) in [(d0, 1.0 - td), (d1, td)] {
                            for (hi, wh) in [(h0, 1.0 - th), (h1, th)] {
                                for (wi, ww) in [(w0, 1.0 - tw), (w1, tw)] {
                                    acc += wd * wh * ww * xv[[ci, di, hi, wi]];
                                }
                            }
                        }
                        ov[[ci, od, oh, ow]] = acc;
                    }
                }
            }
        }
    }
    out
}

pub fn trilinear_backward(gout: &ArrayViewD<f64>, in_shape: &[usize]) -> Arr {
    let os = gout.shape();
    let c = in_shape[0];
    let plans: Vec<_> = (0..3).map(|a| linear_axis_plan(in_shape[a + 1], os[a + 1])).collect();
    let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
    let mut gx = Arr::zeros(IxDyn(in_shape));
    {
        let mut xv = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..c {
            for (od, &(d0, d1, td)) in plans[0].iter().enumerate() {
                for (oh, &(h0, h1, th)) in plans[1].iter().enumerate() {
                    for (ow, &(w0, w1, tw)) in plans[2].iter().enumerate() {
                        let g = gv[[ci, od, oh, ow]];
                        for (di, wd) in [(d0, 1.0 - td), (d1, td)] {
                            for (hi, wh) in [(h0, 1.0 - th), (h1, th)] {
                                for (wi, ww) in [(w0, 1.0 - tw), (w1, tw)] {
                                    xv[[ci, di, hi, wi]] += wd * wh * ww * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Per-group normalisation statistics: (mean, var) for each group.
pub fn group_stats(x: &ArrayViewD<f64>, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let c = s[0];
    assert_eq!(c % groups, 0, "channels must divide into groups");
    let spatial: usize = s[1..].iter().product();
    let per = c / groups * spatial;
    let xs = x.as_slice().expect("group_norm input must be standard layout");
    let mut means = vec![0.0; groups];
    let mut vars = vec![0.0; groups];
    for g in 0..groups {
        let seg = &xs[g * per..(g + 1) * per];
        let mean = seg.iter().sum::<f64>() / per as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        means[g] = mean;
        vars[g] = var;
    }
    (means, vars)
}

/// y = gamma_c * (x - mu_g) / sqrt(var_g + eps) + beta_c over channel groups.
pub fn group_norm_forward(
    x: &ArrayViewD<f64>,
    gamma: &ArrayViewD<f64>,
    beta: &ArrayViewD<f64>,
    groups: usize,
    eps: f64,
) -> Arr {
    let s = x.shape().to_vec();
    let c = s[0];
    let spatial: usize = s[1..].iter().product();
    let (means, vars) = group_stats(x, groups);
    let xs = x.as_slice().unwrap();
    let ga = gamma.as_slice().unwrap();
    let be = beta.as_slice().unwrap();
    let mut out = vec![0.0; xs.len()];
    let cpg = c / groups;
    for ch in 0..c {
        let g = ch / cpg;
        let inv = 1.0 / (vars[g] + eps).sqrt();
        let (m, w, b) = (means[g], ga[ch], be[ch]);
        for i in 0..spatial {
            let idx = ch * spatial + i;
            out[idx] = w * (xs[idx] - m) * inv + b;
        }
    }
    Arr::from_shape_vec(IxDyn(&s), out).unwrap()
}

/// Gradients of group_norm w.r.t. (x, gamma, beta).
pub fn group_norm_backward(
    x: &ArrayViewD<f64>,
    gamma: &ArrayViewD<f64>,
    gout: &ArrayViewD<f64>,
    groups: usize,
    eps: f64,
) -> (Arr, Arr, Arr) {
    let s = x.shape().to_vec();
    let c = s[0];
    let spatial: usize = s[1..].iter().product();
    let cpg = c / groups;
    let per = cpg * spatial;
    let (means, vars) = group_stats(x, groups);
    let xs = x.as_slice().unwrap();
    let ga = gamma.as_slice().unwrap();
    let gs = gout.as_slice().unwrap();
    let mut gx = vec![0.0; xs.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];

    for g in 0..groups {
        let inv = 1.0 / (vars[g] + eps).sqrt();
        let m = means[g];
        // ghat = gout * gamma; accumulate group means of ghat and ghat*xhat.
        let mut mean_gh = 0.0;
        let mut mean_ghx = 0.0;
        for ch in g * cpg..(g + 1) * cpg {
            let w = ga[ch];
            for i in 0..spatial {
                let idx = ch * spatial + i;
                let xhat = (xs[idx] - m) * inv;
                let gh = gs[idx] * w;
                mean_gh += gh;
                mean_ghx += gh * xhat;
                ggamma[ch] += gs[idx] * xhat;
                gbeta[ch] += gs[idx];
            }
        }
        mean_gh /= per as f64;
        mean_ghx /= per as f64;
        for ch in g * cpg..(g + 1) * cpg {
            let w = ga[ch];
            for i in 0..spatial {
                let idx = ch * spatial + i;
                let xhat = (xs[idx] - m) * inv;
                gx[idx] = inv * (gs[idx] * w - mean_gh - xhat * mean_ghx);
            }
        }
    }
    (
        Arr::from_shape_vec(IxDyn(&s), gx).unwrap(),
        Array1::from_vec(ggamma).into_dyn(),
        Array1::from_vec(gbeta).into_dyn(),
    )
}

/// Row-wise layer norm for a (B, n) matrix.
pub fn layer_norm_rows_forward(
    x: &ArrayView2<f64>,
    gamma: &ArrayViewD<f64>,
    beta: &ArrayViewD<f64>,
    eps: f64,
) -> Array2<f64> {
    let (b, n) = x.dim();
    let ga = gamma.as_slice().unwrap();
    let be = beta.as_slice().unwrap();
    let mut out = Array2::<f64>::zeros((b, n));
    for r in 0..b {
        let row = x.row(r);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[[r, j]] = ga[j] * (row[j] - mean) * inv + be[j];
        }
    }
    out
}

pub fn layer_norm_rows_backward(
    x: &ArrayView2<f64>,
    gamma: &ArrayViewD<f64>,
    gout: &ArrayView2<f64>,
    eps: f64,
) -> (Array2<f64>, Arr, Arr) {
    let (b, n) = x.dim();
    let ga = gamma.as_slice().unwrap();
    let mut gx = Array2::<f64>::zeros((b, n));
    let mut ggamma = vec![0.0; n];
    let mut gbeta = vec![0.0; n];
    for r in 0..b {
        let row = x.row(r);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut mean_gh = 0.0;
        let mut mean_ghx = 0.0;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            let gh = gout[[r, j]] * ga[j];
            mean_gh += gh;
            mean_ghx += gh * xhat;
            ggamma[j] += gout[[r, j]] * xhat;
            gbeta[j] += gout[[r, j]];
        }
        mean_gh /= n as f64;
        mean_ghx /= n as f64;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            gx[[r, j]] = inv * (gout[[r, j]] * ga[j] - mean_gh - xhat * mean_ghx);
        }
    }
    (gx, Array1::from_vec(ggamma).into_dyn(), Array1::from_vec(gbeta).into_dyn())
}
