//! Forward/backward kernels for the individual layer types.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;

/// 2-D convolution with symmetric zero padding and channel groups
/// (`groups == in_channels` gives a depthwise convolution).
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels / groups, kh, kw)
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (_, _, kh, kw) = self.weight.dim();
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        let he = h + 2 * ph;
        let we = w + 2 * pw;
        if he < kh || we < kw {
            return None;
        }
        Some(((he - kh) / sh + 1, (we - kw) / sw + 1))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// (out_features, in_features)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

fn im2col(
    x: &ArrayView3<f64>,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let xs = x.as_slice().expect("contiguous input");
    let mut col = Array2::zeros((c * kh * kw, oh * ow));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as i64 - ph as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let x_base = (ci * h + iy as usize) * w;
                    let c_base = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as i64 - pw as i64;
                        if ix >= 0 && ix < w as i64 {
                            cs[c_base + ox] = xs[x_base + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (oh, ow): (usize, usize),
) -> Array3<f64> {
    let mut out = Array3::zeros((c, h, w));
    let os = out.as_slice_mut().unwrap();
    let cs = col.as_slice().unwrap();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row_base = ((ci * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * sh + ky) as i64 - ph as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let x_base = (ci * h + iy as usize) * w;
                    let c_base = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * sw + kx) as i64 - pw as i64;
                        if ix >= 0 && ix < w as i64 {
                            os[x_base + ix as usize] += cs[c_base + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn group_weight_mats(conv: &Conv2d) -> Vec<Array2<f64>> {
    let (oc, icg, kh, kw) = conv.weight.dim();
    let ocg = oc / conv.groups;
    (0..conv.groups)
        .map(|g| {
            conv.weight
                .slice(s![g * ocg..(g + 1) * ocg, .., .., ..])
                .to_owned()
                .into_shape_with_order((ocg, icg * kh * kw))
                .unwrap()
        })
        .collect()
}

pub fn conv2d_forward(x: &Array4<f64>, conv: &Conv2d) -> Array4<f64> {
    let (n, ic, h, w) = x.dim();
    let (oc, icg, kh, kw) = conv.weight.dim();
    debug_assert_eq!(ic, icg * conv.groups);
    let (oh, ow) = conv.out_hw(h, w).expect("validated at build time");
    let ocg = oc / conv.groups;
    let wmats = group_weight_mats(conv);

    let mut out = Array4::zeros((n, oc, oh, ow));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o_n, x_n)| {
            for g in 0..conv.groups {
                let xg = x_n.slice(s![g * icg..(g + 1) * icg, .., ..]);
                let col = im2col(&xg, (kh, kw), conv.stride, conv.padding, (oh, ow));
                let prod = wmats[g].dot(&col); // (ocg, oh*ow)
                for oci in 0..ocg {
                    let chan = oci + g * ocg;
                    let b = conv.bias[chan];
                    let row = prod.row(oci);
                    o_n.slice_mut(s![chan, .., ..])
                        .as_slice_mut()
                        .unwrap()
                        .iter_mut()
                        .zip(row.iter())
                        .for_each(|(dst, &v)| *dst = v + b);
                }
            }
        });
    out
}

pub struct ConvGrads {
    pub d_input: Array4<f64>,
    pub d_weight: Array4<f64>,
    pub d_bias: Array1<f64>,
}

pub fn conv2d_backward(x: &Array4<f64>, conv: &Conv2d, d_out: &Array4<f64>) -> ConvGrads {
    let (n, ic, h, w) = x.dim();
    let (oc, icg, kh, kw) = conv.weight.dim();
    let (_, _, oh, ow) = d_out.dim();
    let ocg = oc / conv.groups;
    let wmats = group_weight_mats(conv);

    // Per-sample partials, reduced sequentially in batch order so results do
    // not depend on thread scheduling.
    let partials: Vec<(Array3<f64>, Array4<f64>, Array1<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let x_n = x.index_axis(Axis(0), ni);
            let d_n = d_out.index_axis(Axis(0), ni);
            let mut dx = Array3::zeros((ic, h, w));
            let mut dw = Array4::zeros((oc, icg, kh, kw));
            let mut db = Array1::zeros(oc);
            for g in 0..conv.groups {
                let xg = x_n.slice(s![g * icg..(g + 1) * icg, .., ..]);
                let col = im2col(&xg, (kh, kw), conv.stride, conv.padding, (oh, ow));
                let dog = d_n
                    .slice(s![g * ocg..(g + 1) * ocg, .., ..])
                    .to_owned()
                    .into_shape_with_order((ocg, oh * ow))
                    .unwrap();
                let dwg = dog.dot(&col.t()); // (ocg, icg*kh*kw)
                dw.slice_mut(s![g * ocg..(g + 1) * ocg, .., .., ..])
                    .assign(&dwg.into_shape_with_order((ocg, icg, kh, kw)).unwrap());
                let dcol = wmats[g].t().dot(&dog); // (icg*kh*kw, oh*ow)
                let dxg = col2im(&dcol, (icg, h, w), (kh, kw), conv.stride, conv.padding, (oh, ow));
                dx.slice_mut(s![g * icg..(g + 1) * icg, .., ..]).assign(&dxg);
                for oci in 0..ocg {
                    db[g * ocg + oci] = dog.row(oci).sum();
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut d_input = Array4::zeros((n, ic, h, w));
    let mut d_weight = Array4::zeros((oc, icg, kh, kw));
    let mut d_bias = Array1::zeros(oc);
    for (ni, (dx, dw, db)) in partials.into_iter().enumerate() {
        d_input.index_axis_mut(Axis(0), ni).assign(&dx);
        d_weight += &dw;
        d_bias += &db;
    }
    ConvGrads { d_input, d_weight, d_bias }
}

/// Batch statistics computed during a training-mode forward pass.
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

pub fn batchnorm_forward(
    x: &Array4<f64>,
    bn: &BatchNorm2d,
    training: bool,
) -> (Array4<f64>, Option<BnBatchStats>) {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let (mean, var) = if training {
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let plane = x.slice(s![.., ci, .., ..]);
            let mu = plane.sum() / m;
            let v = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean[ci] = mu;
            var[ci] = v;
        }
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };

    let mut out = x.clone();
    for ci in 0..c {
        let invstd = 1.0 / (var[ci] + bn.eps).sqrt();
        let scale = bn.gamma[ci] * invstd;
        let shift = bn.beta[ci] - mean[ci] * scale;
        out.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * scale + shift);
    }
    let stats = training.then(|| BnBatchStats { mean, var });
    (out, stats)
}

pub struct BnGrads {
    pub d_input: Array4<f64>,
    pub d_gamma: Array1<f64>,
    pub d_beta: Array1<f64>,
}

pub fn batchnorm_backward(
    x: &Array4<f64>,
    bn: &BatchNorm2d,
    stats: Option<&BnBatchStats>,
    d_out: &Array4<f64>,
) -> BnGrads {
    let (n, c, h, w) = x.dim();
    let m = (n * h * w) as f64;
    let mut d_input = Array4::zeros(x.dim());
    let mut d_gamma = Array1::zeros(c);
    let mut d_beta = Array1::zeros(c);

    for ci in 0..c {
        let xs = x.slice(s![.., ci, .., ..]);
        let dys = d_out.slice(s![.., ci, .., ..]);
        match stats {
            Some(st) => {
                let invstd = 1.0 / (st.var[ci] + bn.eps).sqrt();
                let mu = st.mean[ci];
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for (&xv, &dy) in xs.iter().zip(dys.iter()) {
                    let xhat = (xv - mu) * invstd;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                d_beta[ci] = sum_dy;
                d_gamma[ci] = sum_dy_xhat;
                let k = bn.gamma[ci] * invstd;
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                let mut dxs = d_input.slice_mut(s![.., ci, .., ..]);
                for ((dst, &xv), &dy) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
                    let xhat = (xv - mu) * invstd;
                    *dst = k * (dy - mean_dy - xhat * mean_dy_xhat);
                }
            }
            None => {
                // Inference mode: running statistics are constants.
                let invstd = 1.0 / (bn.running_var[ci] + bn.eps).sqrt();
                let mu = bn.running_mean[ci];
                let k = bn.gamma[ci] * invstd;
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                let mut dxs = d_input.slice_mut(s![.., ci, .., ..]);
                for ((dst, &xv), &dy) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
                    sum_dy += dy;
                    sum_dy_xhat += dy * (xv - mu) * invstd;
                    *dst = k * dy;
                }
                d_beta[ci] = sum_dy;
                d_gamma[ci] = sum_dy_xhat;
            }
        }
    }
    let _ = (n, h, w);
    BnGrads { d_input, d_gamma, d_beta }
}

pub fn pool_out_hw(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> Option<(usize, usize)> {
    let he = h + 2 * ph;
    let we = w + 2 * pw;
    if he < kh || we < kw {
        return None;
    }
    Some(((he - kh) / sh + 1, (we - kw) / sw + 1))
}

/// Max pooling; returns the output and the linear input index of each
/// window maximum (for the backward pass).
pub fn maxpool_forward(
    x: &Array4<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> (Array4<f64>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = pool_out_hw((h, w), kernel, stride, padding).expect("validated at build");
    let mut out = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..kernel.0 {
                        let iy = (oy * stride.0 + ky) as i64 - padding.0 as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (ox * stride.1 + kx) as i64 - padding.1 as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let v = plane[[iy as usize, ix as usize]];
                            if v > best {
                                best = v;
                                best_idx = iy as usize * w + ix as usize;
                            }
                        }
                    }
                    out[[ni, ci, oy, ox]] = best;
                    idx[[ni, ci, oy, ox]] = best_idx;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward(
    input_dim: (usize, usize, usize, usize),
    idx: &Array4<usize>,
    d_out: &Array4<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (_, _, oh, ow) = d_out.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![ni, ci, .., ..]);
            let ps = plane.as_slice_mut().unwrap();
            for oy in 0..oh {
                for ox in 0..ow {
                    ps[idx[[ni, ci, oy, ox]]] += d_out[[ni, ci, oy, ox]];
                }
            }
        }
    }
    let _ = (h, w);
    dx
}

/// Average pooling with a fixed `kh*kw` divisor (zero padding counts).
pub fn avgpool_forward(
    x: &Array4<f64>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = pool_out_hw((h, w), kernel, stride, padding).expect("validated at build");
    let inv = 1.0 / (kernel.0 * kernel.1) as f64;
    let mut out = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kernel.0 {
                        let iy = (oy * stride.0 + ky) as i64 - padding.0 as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (ox * stride.1 + kx) as i64 - padding.1 as i64;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            acc += plane[[iy as usize, ix as usize]];
                        }
                    }
                    out[[ni, ci, oy, ox]] = acc * inv;
                }
            }
        }
    }
    out
}

pub fn avgpool_backward(
    input_dim: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    d_out: &Array4<f64>,
) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (_, _, oh, ow) = d_out.dim();
    let inv = 1.0 / (kernel.0 * kernel.1) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = d_out[[ni, ci, oy, ox]] * inv;
                    for ky in 0..kernel.0 {
                        let iy = (oy * stride.0 + ky) as i64 - padding.0 as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for kx in 0..kernel.1 {
                            let ix = (ox * stride.1 + kx) as i64 - padding.1 as i64;
                            if ix >= 0 && ix < w as i64 {
                                dx[[ni, ci, iy as usize, ix as usize]] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn dense_forward(x: &Array2<f64>, dense: &Dense) -> Array2<f64> {
    let mut out = x.dot(&dense.weight.t());
    out += &dense.bias;
    out
}

pub struct DenseGrads {
    pub d_input: Array2<f64>,
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
}

pub fn dense_backward(x: &Array2<f64>, dense: &Dense, d_out: &Array2<f64>) -> DenseGrads {
    DenseGrads {
        d_input: d_out.dot(&dense.weight),
        d_weight: d_out.t().dot(x),
        d_bias: d_out.sum_axis(Axis(0)),
    }
}
