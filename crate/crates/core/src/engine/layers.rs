use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Activation shape flowing between layers. Batch dimension is implicit:
/// tensors are `[n, c, h, w]` for `Chw` and `[n, d]` for `Flat`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Chw { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Shape {
    pub fn volume(&self) -> usize {
        match *self {
            Shape::Chw { c, h, w } => c * h * w,
            Shape::Flat { d } => d,
        }
    }

    pub fn batch_dims(&self, n: usize) -> Vec<usize> {
        match *self {
            Shape::Chw { c, h, w } => vec![n, c, h, w],
            Shape::Flat { d } => vec![n, d],
        }
    }
}

/// One layer description. Input channel/unit counts are never stored; they
/// are inferred from the preceding layer's output shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    FullyConnected {
        units: usize,
    },
    Softmax,
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Relu => "relu",
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Flatten => "flatten",
        }
    }
}

fn window_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if kernel == 0 || stride == 0 {
        return Err(Error::rejected("kernel and stride must be positive"));
    }
    if padded < kernel {
        return Err(Error::shape(format!(
            "window of size {kernel} does not fit extent {extent} (padding {padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output shape of `spec` applied to `input`, or an error when the layer
/// cannot accept that shape.
pub fn infer_shape(spec: &LayerSpec, input: &Shape) -> Result<Shape> {
    match (spec, *input) {
        (
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            },
            Shape::Chw { h, w, .. },
        ) => Ok(Shape::Chw {
            c: *out_channels,
            h: window_out(h, *kernel, *stride, *padding)?,
            w: window_out(w, *kernel, *stride, *padding)?,
        }),
        (LayerSpec::MaxPool { kernel, stride }, Shape::Chw { c, h, w })
        | (LayerSpec::AvgPool { kernel, stride }, Shape::Chw { c, h, w }) => Ok(Shape::Chw {
            c,
            h: window_out(h, *kernel, *stride, 0)?,
            w: window_out(w, *kernel, *stride, 0)?,
        }),
        (LayerSpec::Relu, s) => Ok(s),
        (LayerSpec::FullyConnected { units }, Shape::Flat { .. }) => Ok(Shape::Flat { d: *units }),
        (LayerSpec::Softmax, Shape::Flat { d }) => Ok(Shape::Flat { d }),
        (LayerSpec::Flatten, s) => Ok(Shape::Flat { d: s.volume() }),
        (spec, input) => Err(Error::shape(format!(
            "{} cannot take input shape {input:?}",
            spec.kind()
        ))),
    }
}

/// Shapes of the parameter tensors of `spec` given its input shape.
/// Empty for parameter-free layers; `[weight, bias]` otherwise.
pub fn param_shapes(spec: &LayerSpec, input: &Shape) -> Vec<Vec<usize>> {
    match (spec, *input) {
        (
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            },
            Shape::Chw { c, .. },
        ) => vec![
            vec![*out_channels, c, *kernel, *kernel],
            vec![*out_channels],
        ],
        (LayerSpec::FullyConnected { units }, Shape::Flat { d }) => {
            vec![vec![*units, d], vec![*units]]
        }
        _ => vec![],
    }
}

/// Per-parameter fan-in, used for zero-mean uniform initialization.
pub fn fan_in(spec: &LayerSpec, input: &Shape) -> usize {
    match (spec, *input) {
        (LayerSpec::Conv2d { kernel, .. }, Shape::Chw { c, .. }) => c * kernel * kernel,
        (LayerSpec::FullyConnected { .. }, Shape::Flat { d }) => d,
        _ => 0,
    }
}

fn pad_plane(src: &[f64], h: usize, w: usize, p: usize, dst: &mut [f64]) {
    let pw = w + 2 * p;
    dst.fill(0.0);
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        dst[(y + p) * pw + p..(y + p) * pw + p + w].copy_from_slice(row);
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
    ph: usize,
    pw: usize,
}

fn conv_dims(spec: &LayerSpec, input: &Shape) -> ConvDims {
    let (out_channels, k, s, p) = match spec {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        } => (*out_channels, *kernel, *stride, *padding),
        _ => unreachable!(),
    };
    let (c_in, h, w) = match *input {
        Shape::Chw { c, h, w } => (c, h, w),
        _ => unreachable!(),
    };
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    ConvDims {
        c_in,
        h,
        w,
        c_out: out_channels,
        oh,
        ow,
        k,
        s,
        p,
        ph: h + 2 * p,
        pw: w + 2 * p,
    }
}

fn conv_forward(d: &ConvDims, params: &[Tensor], input: &Tensor, n: usize) -> Tensor {
    let weight = params[0].data();
    let bias = params[1].data();
    let mut out = Tensor::zeros(&[n, d.c_out, d.oh, d.ow]);
    let in_plane = d.ph * d.pw;
    let out_plane = d.oh * d.ow;
    let mut padded = vec![0.0; d.c_in * in_plane];
    for e in 0..n {
        let src = &input.data()[e * d.c_in * d.h * d.w..(e + 1) * d.c_in * d.h * d.w];
        if d.p == 0 {
            padded.copy_from_slice(src);
        } else {
            for ic in 0..d.c_in {
                pad_plane(
                    &src[ic * d.h * d.w..(ic + 1) * d.h * d.w],
                    d.h,
                    d.w,
                    d.p,
                    &mut padded[ic * in_plane..(ic + 1) * in_plane],
                );
            }
        }
        let dst = &mut out.data_mut()[e * d.c_out * out_plane..(e + 1) * d.c_out * out_plane];
        for oc in 0..d.c_out {
            let plane = &mut dst[oc * out_plane..(oc + 1) * out_plane];
            plane.fill(bias[oc]);
            for ic in 0..d.c_in {
                let ip = &padded[ic * in_plane..(ic + 1) * in_plane];
                let wbase = (oc * d.c_in + ic) * d.k * d.k;
                for ki in 0..d.k {
                    for kj in 0..d.k {
                        let wv = weight[wbase + ki * d.k + kj];
                        if d.s == 1 {
                            // Shifted-row accumulate: contiguous in and out.
                            for y in 0..d.oh {
                                let row = &ip[(y + ki) * d.pw + kj..(y + ki) * d.pw + kj + d.ow];
                                let orow = &mut plane[y * d.ow..(y + 1) * d.ow];
                                for x in 0..d.ow {
                                    orow[x] += wv * row[x];
                                }
                            }
                        } else {
                            for y in 0..d.oh {
                                let base = (y * d.s + ki) * d.pw + kj;
                                let orow = &mut plane[y * d.ow..(y + 1) * d.ow];
                                for x in 0..d.ow {
                                    orow[x] += wv * ip[base + x * d.s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    d: &ConvDims,
    params: &[Tensor],
    input: &Tensor,
    grad_out: &Tensor,
    n: usize,
) -> (Vec<Tensor>, Tensor) {
    let weight = params[0].data();
    let mut d_weight = Tensor::zeros(params[0].shape());
    let mut d_bias = Tensor::zeros(params[1].shape());
    let mut d_input = Tensor::zeros(&[n, d.c_in, d.h, d.w]);
    let in_plane = d.ph * d.pw;
    let out_plane = d.oh * d.ow;
    let mut padded = vec![0.0; d.c_in * in_plane];
    let mut d_padded = vec![0.0; d.c_in * in_plane];
    for e in 0..n {
        let src = &input.data()[e * d.c_in * d.h * d.w..(e + 1) * d.c_in * d.h * d.w];
        if d.p == 0 {
            padded.copy_from_slice(src);
        } else {
            for ic in 0..d.c_in {
                pad_plane(
                    &src[ic * d.h * d.w..(ic + 1) * d.h * d.w],
                    d.h,
                    d.w,
                    d.p,
                    &mut padded[ic * in_plane..(ic + 1) * in_plane],
                );
            }
        }
        d_padded.fill(0.0);
        let gout = &grad_out.data()[e * d.c_out * out_plane..(e + 1) * d.c_out * out_plane];
        for oc in 0..d.c_out {
            let gplane = &gout[oc * out_plane..(oc + 1) * out_plane];
            d_bias.data_mut()[oc] += gplane.iter().sum::<f64>();
            for ic in 0..d.c_in {
                let ip = &padded[ic * in_plane..(ic + 1) * in_plane];
                let dip = &mut d_padded[ic * in_plane..(ic + 1) * in_plane];
                let wbase = (oc * d.c_in + ic) * d.k * d.k;
                for ki in 0..d.k {
                    for kj in 0..d.k {
                        let wv = weight[wbase + ki * d.k + kj];
                        let mut dw = 0.0;
                        if d.s == 1 {
                            for y in 0..d.oh {
                                let grow = &gplane[y * d.ow..(y + 1) * d.ow];
                                let base = (y + ki) * d.pw + kj;
                                let row = &ip[base..base + d.ow];
                                let drow = &mut dip[base..base + d.ow];
                                for x in 0..d.ow {
                                    dw += grow[x] * row[x];
                                    drow[x] += wv * grow[x];
                                }
                            }
                        } else {
                            for y in 0..d.oh {
                                let grow = &gplane[y * d.ow..(y + 1) * d.ow];
                                let base = (y * d.s + ki) * d.pw + kj;
                                for x in 0..d.ow {
                                    dw += grow[x] * ip[base + x * d.s];
                                    dip[base + x * d.s] += wv * grow[x];
                                }
                            }
                        }
                        d_weight.data_mut()[wbase + ki * d.k + kj] += dw;
                    }
                }
            }
        }
        let din = &mut d_input.data_mut()[e * d.c_in * d.h * d.w..(e + 1) * d.c_in * d.h * d.w];
        if d.p == 0 {
            for (a, b) in din.iter_mut().zip(&d_padded) {
                *a += b;
            }
        } else {
            for ic in 0..d.c_in {
                let dip = &d_padded[ic * in_plane..(ic + 1) * in_plane];
                let dplane = &mut din[ic * d.h * d.w..(ic + 1) * d.h * d.w];
                for y in 0..d.h {
                    let base = (y + d.p) * d.pw + d.p;
                    for x in 0..d.w {
                        dplane[y * d.w + x] += dip[base + x];
                    }
                }
            }
        }
    }
    (vec![d_weight, d_bias], d_input)
}

fn pool_forward(
    spec: &LayerSpec,
    input: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    n: usize,
) -> Tensor {
    let (k, s, is_max) = match spec {
        LayerSpec::MaxPool { kernel, stride } => (*kernel, *stride, true),
        LayerSpec::AvgPool { kernel, stride } => (*kernel, *stride, false),
        _ => unreachable!(),
    };
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let norm = 1.0 / (k * k) as f64;
    for e in 0..n {
        for ch in 0..c {
            let ip = &input.data()[(e * c + ch) * h * w..(e * c + ch + 1) * h * w];
            let op = &mut out.data_mut()[(e * c + ch) * oh * ow..(e * c + ch + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
                    for ki in 0..k {
                        let base = (y * s + ki) * w + x * s;
                        for kj in 0..k {
                            let v = ip[base + kj];
                            if is_max {
                                if v > acc {
                                    acc = v;
                                }
                            } else {
                                acc += v;
                            }
                        }
                    }
                    op[y * ow + x] = if is_max { acc } else { acc * norm };
                }
            }
        }
    }
    out
}

fn pool_backward(
    spec: &LayerSpec,
    input: &Tensor,
    grad_out: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    n: usize,
) -> Tensor {
    let (k, s, is_max) = match spec {
        LayerSpec::MaxPool { kernel, stride } => (*kernel, *stride, true),
        LayerSpec::AvgPool { kernel, stride } => (*kernel, *stride, false),
        _ => unreachable!(),
    };
    let oh = (h - k) / s + 1;
    let ow = (w - k) / s + 1;
    let mut d_input = Tensor::zeros(&[n, c, h, w]);
    let norm = 1.0 / (k * k) as f64;
    for e in 0..n {
        for ch in 0..c {
            let ip = &input.data()[(e * c + ch) * h * w..(e * c + ch + 1) * h * w];
            let gp = &grad_out.data()[(e * c + ch) * oh * ow..(e * c + ch + 1) * oh * ow];
            let dp = &mut d_input.data_mut()[(e * c + ch) * h * w..(e * c + ch + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let g = gp[y * ow + x];
                    if is_max {
                        // Gradient goes to the first maximum in scan order.
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for ki in 0..k {
                            let base = (y * s + ki) * w + x * s;
                            for kj in 0..k {
                                let v = ip[base + kj];
                                if v > best {
                                    best = v;
                                    best_idx = base + kj;
                                }
                            }
                        }
                        dp[best_idx] += g;
                    } else {
                        let gs = g * norm;
                        for ki in 0..k {
                            let base = (y * s + ki) * w + x * s;
                            for kj in 0..k {
                                dp[base + kj] += gs;
                            }
                        }
                    }
                }
            }
        }
    }
    d_input
}

fn fc_forward(params: &[Tensor], input: &Tensor, d_in: usize, units: usize, n: usize) -> Tensor {
    let weight = params[0].data();
    let bias = params[1].data();
    let mut out = Tensor::zeros(&[n, units]);
    for e in 0..n {
        let x = &input.data()[e * d_in..(e + 1) * d_in];
        let y = &mut out.data_mut()[e * units..(e + 1) * units];
        for u in 0..units {
            let wrow = &weight[u * d_in..(u + 1) * d_in];
            let mut acc = bias[u];
            for j in 0..d_in {
                acc += wrow[j] * x[j];
            }
            y[u] = acc;
        }
    }
    out
}

fn fc_backward(
    params: &[Tensor],
    input: &Tensor,
    grad_out: &Tensor,
    d_in: usize,
    units: usize,
    n: usize,
) -> (Vec<Tensor>, Tensor) {
    let weight = params[0].data();
    let mut d_weight = Tensor::zeros(params[0].shape());
    let mut d_bias = Tensor::zeros(params[1].shape());
    let mut d_input = Tensor::zeros(&[n, d_in]);
    for e in 0..n {
        let x = &input.data()[e * d_in..(e + 1) * d_in];
        let g = &grad_out.data()[e * units..(e + 1) * units];
        let dx = &mut d_input.data_mut()[e * d_in..(e + 1) * d_in];
        for u in 0..units {
            let gu = g[u];
            if gu == 0.0 {
                continue;
            }
            d_bias.data_mut()[u] += gu;
            let wrow = &weight[u * d_in..(u + 1) * d_in];
            let dwrow = &mut d_weight.data_mut()[u * d_in..(u + 1) * d_in];
            for j in 0..d_in {
                dwrow[j] += gu * x[j];
                dx[j] += gu * wrow[j];
            }
        }
    }
    (vec![d_weight, d_bias], d_input)
}

/// Numerically stable softmax over the last axis of a `[n, d]` tensor.
pub fn softmax_rows(input: &Tensor, d: usize, n: usize) -> Tensor {
    let mut out = Tensor::zeros(&[n, d]);
    for e in 0..n {
        let x = &input.data()[e * d..(e + 1) * d];
        let y = &mut out.data_mut()[e * d..(e + 1) * d];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..d {
            let v = (x[j] - m).exp();
            y[j] = v;
            z += v;
        }
        for v in y.iter_mut() {
            *v /= z;
        }
    }
    out
}

fn softmax_backward(output: &Tensor, grad_out: &Tensor, d: usize, n: usize) -> Tensor {
    let mut d_input = Tensor::zeros(&[n, d]);
    for e in 0..n {
        let p = &output.data()[e * d..(e + 1) * d];
        let g = &grad_out.data()[e * d..(e + 1) * d];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        let dx = &mut d_input.data_mut()[e * d..(e + 1) * d];
        for j in 0..d {
            dx[j] = p[j] * (g[j] - dot);
        }
    }
    d_input
}

/// Applies one layer to a batch. `input` must have shape `in_shape` with a
/// leading batch dimension; `params` must match `param_shapes`.
pub fn forward(spec: &LayerSpec, in_shape: &Shape, params: &[Tensor], input: &Tensor) -> Tensor {
    let n = input.shape()[0];
    match (spec, *in_shape) {
        (LayerSpec::Conv2d { .. }, _) => {
            let d = conv_dims(spec, in_shape);
            conv_forward(&d, params, input, n)
        }
        (LayerSpec::MaxPool { .. }, Shape::Chw { c, h, w })
        | (LayerSpec::AvgPool { .. }, Shape::Chw { c, h, w }) => {
            pool_forward(spec, input, c, h, w, n)
        }
        (LayerSpec::Relu, _) => {
            let mut out = input.clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            out
        }
        (LayerSpec::FullyConnected { units }, Shape::Flat { d }) => {
            fc_forward(params, input, d, *units, n)
        }
        (LayerSpec::Softmax, Shape::Flat { d }) => softmax_rows(input, d, n),
        (LayerSpec::Flatten, s) => input
            .reshape(&[n, s.volume()])
            .expect("flatten preserves volume"),
        _ => unreachable!("shape checked at construction"),
    }
}

/// Gradients of one layer. Returns parameter gradients (same order as
/// `param_shapes`) and the gradient with respect to the layer input.
/// `output` is the forward result on the same `input`.
pub fn backward(
    spec: &LayerSpec,
    in_shape: &Shape,
    params: &[Tensor],
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
) -> (Vec<Tensor>, Tensor) {
    let n = input.shape()[0];
    match (spec, *in_shape) {
        (LayerSpec::Conv2d { .. }, _) => {
            let d = conv_dims(spec, in_shape);
            conv_backward(&d, params, input, grad_out, n)
        }
        (LayerSpec::MaxPool { .. }, Shape::Chw { c, h, w })
        | (LayerSpec::AvgPool { .. }, Shape::Chw { c, h, w }) => {
            (vec![], pool_backward(spec, input, grad_out, c, h, w, n))
        }
        (LayerSpec::Relu, _) => {
            let mut d_input = grad_out.clone();
            for (dv, x) in d_input.data_mut().iter_mut().zip(input.data()) {
                if *x <= 0.0 {
                    *dv = 0.0;
                }
            }
            (vec![], d_input)
        }
        (LayerSpec::FullyConnected { units }, Shape::Flat { d }) => {
            fc_backward(params, input, grad_out, d, *units, n)
        }
        (LayerSpec::Softmax, Shape::Flat { d }) => {
            (vec![], softmax_backward(output, grad_out, d, n))
        }
        (LayerSpec::Flatten, s) => (
            vec![],
            grad_out
                .reshape(&s.batch_dims(n))
                .expect("flatten preserves volume"),
        ),
        _ => unreachable!("shape checked at construction"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv2d_all_ones_kernel() {
        let spec = LayerSpec::Conv2d {
            out_channels: 1,
            kernel: 2,
            stride: 1,
            padding: 0,
        };
        let in_shape = Shape::Chw { c: 1, h: 3, w: 3 };
        let params = vec![
            single(&[1, 1, 2, 2], vec![1.0; 4]),
            single(&[1], vec![0.0]),
        ];
        let input = single(&[1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let out = forward(&spec, &in_shape, &params, &input);
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // Nested-loop reference over an asymmetric case with padding and stride.
        let spec = LayerSpec::Conv2d {
            out_channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let in_shape = Shape::Chw { c: 2, h: 5, w: 4 };
        let mut rng = crate::engine::rng::Rng::new(7);
        let w: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_normal()).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.gen_normal()).collect();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.gen_normal()).collect();
        let params = vec![single(&[2, 2, 3, 3], w.clone()), single(&[2], b.clone())];
        let input = single(&[1, 2, 5, 4], x.clone());
        let out = forward(&spec, &in_shape, &params, &input);
        let (oh, ow) = (3, 2);
        assert_eq!(out.shape(), &[1, 2, oh, ow]);
        for oc in 0..2 {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (y * 2 + ki) as isize - 1;
                                let ix = (xx * 2 + kj) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 4 {
                                    acc += w[((oc * 2 + ic) * 3 + ki) * 3 + kj]
                                        * x[(ic * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(oc * oh + y) * ow + xx];
                    assert!((got - acc).abs() < 1e-12, "oc={oc} y={y} x={xx}");
                }
            }
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let spec = LayerSpec::Relu;
        let in_shape = Shape::Flat { d: 2 };
        let input = single(&[1, 2], vec![-1.0, 2.0]);
        let out = forward(&spec, &in_shape, &[], &input);
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric_logits() {
        let spec = LayerSpec::Softmax;
        let in_shape = Shape::Flat { d: 2 };
        let input = single(&[1, 2], vec![0.0, 0.0]);
        let out = forward(&spec, &in_shape, &[], &input);
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_simplex_for_large_logits() {
        let spec = LayerSpec::Softmax;
        let in_shape = Shape::Flat { d: 3 };
        let input = single(&[1, 3], vec![50.0, -50.0, 12.0]);
        let out = forward(&spec, &in_shape, &[], &input);
        let s: f64 = out.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(out.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn fc_weight_gradient_is_outer_product() {
        // y = Wx, upstream g: dW must equal g xᵀ.
        let spec = LayerSpec::FullyConnected { units: 2 };
        let in_shape = Shape::Flat { d: 2 };
        let params = vec![
            single(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]),
            single(&[2], vec![0.0, 0.0]),
        ];
        let input = single(&[1, 2], vec![4.0, -1.0]);
        let output = forward(&spec, &in_shape, &params, &input);
        let g = single(&[1, 2], vec![2.0, -3.0]);
        let (pgrads, _) = backward(&spec, &in_shape, &params, &input, &output, &g);
        assert_eq!(pgrads[0].data(), &[8.0, -2.0, -12.0, 3.0]);
        assert_eq!(pgrads[1].data(), &[2.0, -3.0]);
    }

    #[test]
    fn maxpool_backward_first_index_on_ties() {
        let spec = LayerSpec::MaxPool { kernel: 2, stride: 2 };
        let in_shape = Shape::Chw { c: 1, h: 2, w: 2 };
        let input = single(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]);
        let output = forward(&spec, &in_shape, &[], &input);
        assert_eq!(output.data(), &[5.0]);
        let g = single(&[1, 1, 1, 1], vec![1.0]);
        let (_, din) = backward(&spec, &in_shape, &[], &input, &output, &g);
        assert_eq!(din.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_distributes_gradient() {
        let spec = LayerSpec::AvgPool { kernel: 2, stride: 2 };
        let in_shape = Shape::Chw { c: 1, h: 2, w: 2 };
        let input = single(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let output = forward(&spec, &in_shape, &[], &input);
        assert_eq!(output.data(), &[2.5]);
        let g = single(&[1, 1, 1, 1], vec![4.0]);
        let (_, din) = backward(&spec, &in_shape, &[], &input, &output, &g);
        assert_eq!(din.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_inference_rejects_mismatches() {
        let fc = LayerSpec::FullyConnected { units: 3 };
        assert!(infer_shape(&fc, &Shape::Chw { c: 1, h: 4, w: 4 }).is_err());
        let conv = LayerSpec::Conv2d {
            out_channels: 1,
            kernel: 5,
            stride: 1,
            padding: 0,
        };
        assert!(infer_shape(&conv, &Shape::Chw { c: 1, h: 3, w: 3 }).is_err());
        assert!(infer_shape(&conv, &Shape::Flat { d: 9 }).is_err());
    }
}
