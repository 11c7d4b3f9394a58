//! Shape inference and the forward/backward kernels of each layer kind.
//!
//! Convolution is cross-correlation with zero padding. Backward passes are
//! the exact adjoints of the forward loops: conv scatters through the same
//! taps, relu gates on the forward sign (zero subgradient at exactly zero),
//! maxpool routes to the first maximum in row-major window order, and the
//! fusion kinds split or copy the incoming gradient.

use crate::tensor::SpatiotemporalTensor;

use super::{LayerOp, LayerWeights};

/// Output shape of a layer given its input shapes, or a message describing
/// why the combination is invalid.
pub(crate) fn infer_shape(
    op: &LayerOp,
    inputs: &[(usize, usize, usize, usize)],
) -> Result<(usize, usize, usize, usize), String> {
    match op {
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let (h, w, t, c) = inputs[0];
            if *kernel_h == 0 || *kernel_w == 0 {
                return Err("kernel dimensions must be positive".to_string());
            }
            if *stride == 0 {
                return Err("stride must be >= 1".to_string());
            }
            if *out_channels == 0 {
                return Err("out_channels must be positive".to_string());
            }
            if c != *in_channels {
                return Err(format!(
                    "declared in_channels {in_channels} does not match input channels {c}"
                ));
            }
            let eff_h = h + 2 * padding;
            let eff_w = w + 2 * padding;
            if eff_h < *kernel_h || eff_w < *kernel_w {
                return Err(format!(
                    "kernel {kernel_h}x{kernel_w} larger than padded input {eff_h}x{eff_w}"
                ));
            }
            Ok((
                (eff_h - kernel_h) / stride + 1,
                (eff_w - kernel_w) / stride + 1,
                t,
                *out_channels,
            ))
        }
        LayerOp::Relu => Ok(inputs[0]),
        LayerOp::MaxPool2d { window, stride } => {
            let (h, w, t, c) = inputs[0];
            if *window == 0 || *stride == 0 {
                return Err("window and stride must be >= 1".to_string());
            }
            if h < *window || w < *window {
                return Err(format!("pool window {window} larger than input {h}x{w}"));
            }
            Ok(((h - window) / stride + 1, (w - window) / stride + 1, t, c))
        }
        LayerOp::ConcatFusion => {
            let (h, w, t, _) = inputs[0];
            let mut channels = 0;
            for &(ih, iw, it, ic) in inputs {
                if (ih, iw, it) != (h, w, t) {
                    return Err(format!(
                        "concat inputs must share spatial shape, got {h}x{w}x{t} and {ih}x{iw}x{it}"
                    ));
                }
                channels += ic;
            }
            Ok((h, w, t, channels))
        }
        LayerOp::SumFusion => {
            let first = inputs[0];
            for &shape in inputs {
                if shape != first {
                    return Err("sum fusion inputs must have identical shapes".to_string());
                }
            }
            Ok(first)
        }
        LayerOp::FullyConnected { out_features } => {
            if *out_features == 0 {
                return Err("out_features must be positive".to_string());
            }
            Ok((1, 1, 1, *out_features))
        }
    }
}

/// Checks that a weight blob matches the layer declaration.
pub(crate) fn validate_weights(
    op: &LayerOp,
    weights: &LayerWeights,
    in_features: usize,
) -> Result<(), String> {
    match (op, weights) {
        (
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            },
            LayerWeights::Conv { weights, bias },
        ) => {
            let expected = out_channels * in_channels * kernel_h * kernel_w;
            if weights.len() != expected {
                return Err(format!(
                    "weight tensor has {} values, expected {out_channels}x{in_channels}x{kernel_h}x{kernel_w} = {expected}",
                    weights.len()
                ));
            }
            if bias.len() != *out_channels {
                return Err(format!(
                    "bias has {} values, expected {out_channels}",
                    bias.len()
                ));
            }
            Ok(())
        }
        (
            LayerOp::FullyConnected { out_features },
            LayerWeights::Dense {
                weights,
                bias,
                in_features: stored,
            },
        ) => {
            if *stored != in_features {
                return Err(format!(
                    "dense weights built for {stored} inputs, layer receives {in_features}"
                ));
            }
            let expected = out_features * in_features;
            if weights.len() != expected {
                return Err(format!(
                    "weight matrix has {} values, expected {out_features}x{in_features} = {expected}",
                    weights.len()
                ));
            }
            if bias.len() != *out_features {
                return Err(format!(
                    "bias has {} values, expected {out_features}",
                    bias.len()
                ));
            }
            Ok(())
        }
        (LayerOp::Relu | LayerOp::MaxPool2d { .. } | LayerOp::ConcatFusion | LayerOp::SumFusion, LayerWeights::None) => {
            Ok(())
        }
        _ => Err("weight kind does not match layer kind".to_string()),
    }
}

pub(crate) fn forward_layer(
    op: &LayerOp,
    weights: &LayerWeights,
    inputs: &[&SpatiotemporalTensor],
) -> SpatiotemporalTensor {
    match op {
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let LayerWeights::Conv { weights, bias } = weights else {
                unreachable!("validated at construction")
            };
            conv_forward(
                inputs[0],
                weights,
                bias,
                *in_channels,
                *out_channels,
                *kernel_h,
                *kernel_w,
                *stride,
                *padding,
            )
        }
        LayerOp::Relu => {
            let x = inputs[0];
            let data = x.data().iter().map(|&v| v.max(0.0)).collect();
            let (h, w, t, c) = x.shape();
            SpatiotemporalTensor::from_vec(h, w, t, c, data).expect("same shape")
        }
        LayerOp::MaxPool2d { window, stride } => pool_forward(inputs[0], *window, *stride),
        LayerOp::ConcatFusion => {
            let (h, w, t, _) = inputs[0].shape();
            let channels: usize = inputs.iter().map(|x| x.channels()).sum();
            let mut out = SpatiotemporalTensor::zeros(h, w, t, channels).expect("positive dims");
            let mut base = 0;
            for x in inputs {
                let c = x.channels();
                for i in 0..h {
                    for j in 0..w {
                        for k in 0..t {
                            for d in 0..c {
                                out.set(i, j, k, base + d, x.get(i, j, k, d));
                            }
                        }
                    }
                }
                base += c;
            }
            out
        }
        LayerOp::SumFusion => {
            let mut out = inputs[0].clone();
            for x in &inputs[1..] {
                out.add_scaled(x, 1.0).expect("validated at construction");
            }
            out
        }
        LayerOp::FullyConnected { out_features } => {
            let LayerWeights::Dense {
                weights,
                bias,
                in_features,
            } = weights
            else {
                unreachable!("validated at construction")
            };
            let x = inputs[0].data();
            debug_assert_eq!(x.len(), *in_features);
            let mut out = Vec::with_capacity(*out_features);
            for o in 0..*out_features {
                let row = &weights[o * in_features..(o + 1) * in_features];
                let acc: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                out.push(acc + bias[o]);
            }
            SpatiotemporalTensor::from_vec(1, 1, 1, *out_features, out).expect("positive dims")
        }
    }
}

/// Gradients with respect to each input, given the gradient at the output.
pub(crate) fn backward_layer(
    op: &LayerOp,
    weights: &LayerWeights,
    inputs: &[&SpatiotemporalTensor],
    gout: &SpatiotemporalTensor,
) -> Vec<SpatiotemporalTensor> {
    match op {
        LayerOp::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            let LayerWeights::Conv { weights, .. } = weights else {
                unreachable!("validated at construction")
            };
            vec![conv_backward(
                inputs[0],
                weights,
                gout,
                *in_channels,
                *out_channels,
                *kernel_h,
                *kernel_w,
                *stride,
                *padding,
            )]
        }
        LayerOp::Relu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect();
            let (h, w, t, c) = x.shape();
            vec![SpatiotemporalTensor::from_vec(h, w, t, c, data).expect("same shape")]
        }
        LayerOp::MaxPool2d { window, stride } => {
            vec![pool_backward(inputs[0], gout, *window, *stride)]
        }
        LayerOp::ConcatFusion => {
            let (h, w, t, _) = inputs[0].shape();
            let mut grads = Vec::with_capacity(inputs.len());
            let mut base = 0;
            for x in inputs {
                let c = x.channels();
                let gin = SpatiotemporalTensor::from_fn(h, w, t, c, |i, j, k, d| {
                    gout.get(i, j, k, base + d)
                })
                .expect("finite gradient");
                grads.push(gin);
                base += c;
            }
            grads
        }
        LayerOp::SumFusion => inputs.iter().map(|_| gout.clone()).collect(),
        LayerOp::FullyConnected { out_features } => {
            let LayerWeights::Dense {
                weights,
                in_features,
                ..
            } = weights
            else {
                unreachable!("validated at construction")
            };
            let g = gout.data();
            let mut gin = vec![0.0; *in_features];
            for o in 0..*out_features {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let row = &weights[o * in_features..(o + 1) * in_features];
                for (acc, w) in gin.iter_mut().zip(row) {
                    *acc += go * w;
                }
            }
            let (h, w, t, c) = inputs[0].shape();
            vec![SpatiotemporalTensor::from_vec(h, w, t, c, gin).expect("finite gradient")]
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &SpatiotemporalTensor,
    weights: &[f64],
    bias: &[f64],
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> SpatiotemporalTensor {
    let (h, w, t, _) = x.shape();
    let out_h = (h + 2 * padding - kh) / stride + 1;
    let out_w = (w + 2 * padding - kw) / stride + 1;
    let mut out = SpatiotemporalTensor::zeros(out_h, out_w, t, out_c).expect("positive dims");
    for k in 0..t {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for oc in 0..out_c {
                    let mut acc = bias[oc];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wbase = kw * (ky + kh * in_c * oc) + kx;
                            for ic in 0..in_c {
                                let wv = weights[wbase + kw * kh * ic];
                                acc += wv * x.get(iy as usize, ix as usize, k, ic);
                            }
                        }
                    }
                    out.set(oy, ox, k, oc, acc);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &SpatiotemporalTensor,
    weights: &[f64],
    gout: &SpatiotemporalTensor,
    in_c: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> SpatiotemporalTensor {
    let (h, w, t, _) = x.shape();
    let (out_h, out_w, _, _) = gout.shape();
    let mut gin = SpatiotemporalTensor::zeros(h, w, t, in_c).expect("positive dims");
    for k in 0..t {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for oc in 0..out_c {
                    let go = gout.get(oy, ox, k, oc);
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wbase = kw * (ky + kh * in_c * oc) + kx;
                            for ic in 0..in_c {
                                let wv = weights[wbase + kw * kh * ic];
                                let cur = gin.get(iy as usize, ix as usize, k, ic);
                                gin.set(iy as usize, ix as usize, k, ic, cur + go * wv);
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

fn pool_forward(x: &SpatiotemporalTensor, window: usize, stride: usize) -> SpatiotemporalTensor {
    let (h, w, t, c) = x.shape();
    let out_h = (h - window) / stride + 1;
    let out_w = (w - window) / stride + 1;
    let mut out = SpatiotemporalTensor::zeros(out_h, out_w, t, c).expect("positive dims");
    for k in 0..t {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for d in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for wy in 0..window {
                        for wx in 0..window {
                            let v = x.get(oy * stride + wy, ox * stride + wx, k, d);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.set(oy, ox, k, d, best);
                }
            }
        }
    }
    out
}

fn pool_backward(
    x: &SpatiotemporalTensor,
    gout: &SpatiotemporalTensor,
    window: usize,
    stride: usize,
) -> SpatiotemporalTensor {
    let (h, w, t, c) = x.shape();
    let (out_h, out_w, _, _) = gout.shape();
    let mut gin = SpatiotemporalTensor::zeros(h, w, t, c).expect("positive dims");
    for k in 0..t {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for d in 0..c {
                    // First maximum in row-major window order, matching the
                    // strict `>` comparison of the forward pass.
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (0, 0);
                    for wy in 0..window {
                        for wx in 0..window {
                            let iy = oy * stride + wy;
                            let ix = ox * stride + wx;
                            let v = x.get(iy, ix, k, d);
                            if v > best {
                                best = v;
                                arg = (iy, ix);
                            }
                        }
                    }
                    let cur = gin.get(arg.0, arg.1, k, d);
                    gin.set(arg.0, arg.1, k, d, cur + gout.get(oy, ox, k, d));
                }
            }
        }
    }
    gin
}
