//! Backbone layers in `f32` with hand-written backward passes.
//!
//! Each layer caches what its backward pass needs during a training forward
//! pass. Convolutions are 3×3, stride 1, zero padding 1, lowered to GEMM via
//! im2col.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, InputShape};
use crate::error::{Error, Result};
use crate::optim::Param;
use crate::rng::Rng;

fn he_uniform(rng: &mut Rng, fan_in: usize, len: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: the strides describe matrices lying inside the given slices; all
    // callers pass dense row- or column-major views sized m×k, k×n and m×n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in·9]`
    pub weight: Param<f32>,
    pub bias: Param<f32>,
    #[serde(skip)]
    cols: Vec<f32>,
    #[serde(skip)]
    input_dims: (usize, usize, usize),
}

impl Conv3x3 {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * 9;
        Self {
            in_channels,
            out_channels,
            weight: Param::new(he_uniform(rng, fan_in, out_channels * fan_in)),
            bias: Param::new(vec![0.0; out_channels]),
            cols: Vec::new(),
            input_dims: (0, 0, 0),
        }
    }

    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let InputShape {
            height: h,
            width: w,
            ..
        } = x.shape;
        let hw = h * w;
        let kdim = self.in_channels * 9;
        let out_shape = InputShape::image(self.out_channels, h, w);
        let mut out = Batch::zeros(out_shape, x.n);
        let mut scratch = vec![0.0; kdim * hw];
        if train {
            self.cols.resize(x.n * kdim * hw, 0.0);
            self.input_dims = (x.n, h, w);
        }
        for i in 0..x.n {
            let col: &mut [f32] = if train {
                &mut self.cols[i * kdim * hw..(i + 1) * kdim * hw]
            } else {
                &mut scratch
            };
            im2col(self.in_channels, x.item(i), h, w, col);
            let y = out.item_mut(i);
            for (o, chunk) in y.chunks_mut(hw).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            gemm(
                self.out_channels,
                kdim,
                hw,
                &self.weight.value,
                (kdim as isize, 1),
                col,
                (hw as isize, 1),
                1.0,
                y,
            );
        }
        out
    }

    fn backward(&mut self, grad: &Batch, need_input_grad: bool) -> Option<Batch> {
        let (n, h, w) = self.input_dims;
        let hw = h * w;
        let kdim = self.in_channels * 9;
        let mut dx =
            need_input_grad.then(|| Batch::zeros(InputShape::image(self.in_channels, h, w), n));
        let mut dcol = vec![0.0; kdim * hw];
        for i in 0..n {
            let dy = grad.item(i);
            let col = &self.cols[i * kdim * hw..(i + 1) * kdim * hw];
            // dW += dY · colᵀ
            gemm(
                self.out_channels,
                hw,
                kdim,
                dy,
                (hw as isize, 1),
                col,
                (1, hw as isize),
                1.0,
                &mut self.weight.grad,
            );
            for (o, chunk) in dy.chunks(hw).enumerate() {
                self.bias.grad[o] += chunk.iter().sum::<f32>();
            }
            if let Some(dx) = dx.as_mut() {
                // dcol = Wᵀ · dY
                gemm(
                    kdim,
                    self.out_channels,
                    hw,
                    &self.weight.value,
                    (1, kdim as isize),
                    dy,
                    (hw as isize, 1),
                    0.0,
                    &mut dcol,
                );
                col2im(self.in_channels, &dcol, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

fn im2col(in_channels: usize, img: &[f32], h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..in_channels {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(in_channels: usize, col: &[f32], h: usize, w: usize, img: &mut [f32]) {
    let hw = h * w;
    img.fill(0.0);
    for ci in 0..in_channels {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Relu {
    #[serde(skip)]
    active: Vec<bool>,
}

impl Relu {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut out = x.clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        if train {
            self.active = x.data.iter().map(|&v| v > 0.0).collect();
        }
        out
    }

    fn backward(&mut self, grad: &Batch) -> Batch {
        let mut dx = grad.clone();
        for (g, &a) in dx.data.iter_mut().zip(&self.active) {
            if !a {
                *g = 0.0;
            }
        }
        dx
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaxPool2 {
    #[serde(skip)]
    argmax: Vec<u32>,
    #[serde(skip)]
    input_shape: Option<(usize, InputShape)>,
}

impl MaxPool2 {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let InputShape {
            channels,
            height,
            width,
        } = x.shape;
        let (oh, ow) = (height / 2, width / 2);
        let out_shape = InputShape::image(channels, oh, ow);
        let mut out = Batch::zeros(out_shape, x.n);
        if train {
            self.argmax.resize(out.data.len(), 0);
            self.input_shape = Some((x.n, x.shape));
        }
        let mut idx = 0;
        for i in 0..x.n {
            let img = x.item(i);
            for c in 0..channels {
                let plane = &img[c * height * width..(c + 1) * height * width];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_at = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let at = (2 * y + dy) * width + 2 * xx + dx;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                        out.data[idx] = best;
                        if train {
                            self.argmax[idx] = (c * height * width + best_at) as u32;
                        }
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, grad: &Batch) -> Batch {
        let (n, shape) = self.input_shape.expect("backward before forward");
        let mut dx = Batch::zeros(shape, n);
        let per_out = grad.shape.len();
        for i in 0..n {
            let g = grad.item(i);
            let arg = &self.argmax[i * per_out..(i + 1) * per_out];
            let d = dx.item_mut(i);
            for (&a, &v) in arg.iter().zip(g) {
                d[a as usize] += v;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalAvgPool {
    #[serde(skip)]
    input_shape: Option<(usize, InputShape)>,
}

impl GlobalAvgPool {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let hw = x.shape.height * x.shape.width;
        let mut out = Batch::zeros(InputShape::vector(x.shape.channels), x.n);
        for (o, chunk) in out.data.iter_mut().zip(x.data.chunks(hw)) {
            *o = chunk.iter().sum::<f32>() / hw as f32;
        }
        if train {
            self.input_shape = Some((x.n, x.shape));
        }
        out
    }

    fn backward(&mut self, grad: &Batch) -> Batch {
        let (n, shape) = self.input_shape.expect("backward before forward");
        let hw = shape.height * shape.width;
        let mut dx = Batch::zeros(shape, n);
        for (chunk, &g) in dx.data.chunks_mut(hw).zip(&grad.data) {
            chunk.fill(g / hw as f32);
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out, in]`
    pub weight: Param<f32>,
    pub bias: Param<f32>,
    #[serde(skip)]
    input: Vec<f32>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(he_uniform(rng, inputs, inputs * outputs)),
            bias: Param::new(vec![0.0; outputs]),
            input: Vec::new(),
        }
    }

    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        let mut out = Batch::zeros(InputShape::vector(self.outputs), x.n);
        for i in 0..x.n {
            out.item_mut(i).copy_from_slice(&self.bias.value);
        }
        // out[n×o] += x[n×i] · Wᵀ
        gemm(
            x.n,
            self.inputs,
            self.outputs,
            &x.data,
            (self.inputs as isize, 1),
            &self.weight.value,
            (1, self.inputs as isize),
            1.0,
            &mut out.data,
        );
        if train {
            self.input.clear();
            self.input.extend_from_slice(&x.data);
        }
        out
    }

    fn backward(&mut self, grad: &Batch, need_input_grad: bool) -> Option<Batch> {
        let n = grad.n;
        // dW[o×i] += gradᵀ · x
        gemm(
            self.outputs,
            n,
            self.inputs,
            &grad.data,
            (1, self.outputs as isize),
            &self.input,
            (self.inputs as isize, 1),
            1.0,
            &mut self.weight.grad,
        );
        for g in grad.data.chunks(self.outputs) {
            for (b, &v) in self.bias.grad.iter_mut().zip(g) {
                *b += v;
            }
        }
        need_input_grad.then(|| {
            let mut dx = Batch::zeros(InputShape::vector(self.inputs), n);
            gemm(
                n,
                self.outputs,
                self.inputs,
                &grad.data,
                (self.outputs as isize, 1),
                &self.weight.value,
                (self.inputs as isize, 1),
                0.0,
                &mut dx.data,
            );
            dx
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv3x3),
    Relu(Relu),
    MaxPool(MaxPool2),
    GlobalAvgPool(GlobalAvgPool),
    Dense(Dense),
}

impl Layer {
    fn forward(&mut self, x: &Batch, train: bool) -> Batch {
        match self {
            Layer::Conv(l) => l.forward(x, train),
            Layer::Relu(l) => l.forward(x, train),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::GlobalAvgPool(l) => l.forward(x, train),
            Layer::Dense(l) => l.forward(x, train),
        }
    }

    fn backward(&mut self, grad: &Batch, need_input_grad: bool) -> Option<Batch> {
        match self {
            Layer::Conv(l) => l.backward(grad, need_input_grad),
            Layer::Dense(l) => l.backward(grad, need_input_grad),
            Layer::Relu(l) => Some(l.backward(grad)),
            Layer::MaxPool(l) => Some(l.backward(grad)),
            Layer::GlobalAvgPool(l) => Some(l.backward(grad)),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param<f32>> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Blocks of conv3x3 + ReLU, with 2×2 max pooling between blocks, then
    /// global average pooling. The last width is the feature dimension K.
    Conv { widths: Vec<usize> },
    /// Dense + ReLU stack for vector inputs; the last width is K.
    Mlp { widths: Vec<usize> },
}

impl BackboneConfig {
    pub fn conv4(k: usize) -> Self {
        BackboneConfig::Conv {
            widths: vec![(k / 8).max(1), (k / 4).max(1), (k / 2).max(1), k],
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneConfig::Conv { widths } | BackboneConfig::Mlp { widths } => {
                *widths.last().unwrap_or(&0)
            }
        }
    }
}

/// Feature extractor producing a K-dimensional nonnegative pooled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub input: InputShape,
    pub feature_dim: usize,
    pub layers: Vec<Layer>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, input: InputShape, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::new();
        match config {
            BackboneConfig::Conv { widths } => {
                if widths.is_empty() {
                    return Err(Error::invalid("conv backbone needs at least one block"));
                }
                let pools = widths.len() - 1;
                if input.height >> pools == 0 || input.width >> pools == 0 {
                    return Err(Error::Shape(format!(
                        "{}x{} input is too small for {} blocks",
                        input.height,
                        input.width,
                        widths.len()
                    )));
                }
                let mut in_c = input.channels;
                for (b, &w) in widths.iter().enumerate() {
                    layers.push(Layer::Conv(Conv3x3::new(in_c, w, rng)));
                    layers.push(Layer::Relu(Relu::default()));
                    if b + 1 < widths.len() {
                        layers.push(Layer::MaxPool(MaxPool2::default()));
                    }
                    in_c = w;
                }
                layers.push(Layer::GlobalAvgPool(GlobalAvgPool::default()));
            }
            BackboneConfig::Mlp { widths } => {
                if widths.is_empty() {
                    return Err(Error::invalid("mlp backbone needs at least one layer"));
                }
                let mut in_d = input.len();
                for &w in widths {
                    layers.push(Layer::Dense(Dense::new(in_d, w, rng)));
                    layers.push(Layer::Relu(Relu::default()));
                    in_d = w;
                }
            }
        }
        Ok(Self {
            input,
            feature_dim: config.feature_dim(),
            layers,
        })
    }

    /// Returns `n × K` features. `train` enables caching for [`Self::backward`].
    pub fn forward(&mut self, x: &Batch, train: bool) -> Result<Batch> {
        if x.shape != self.input {
            return Err(Error::Shape(format!(
                "backbone expects {:?}, got {:?}",
                self.input, x.shape
            )));
        }
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train);
        }
        Ok(h)
    }

    /// Inference without touching the training caches.
    pub fn features(&self, x: &Batch) -> Result<Batch> {
        self.clone_without_caches().forward(x, false)
    }

    /// Back-propagates `n × K` feature gradients, accumulating parameter grads.
    pub fn backward(&mut self, grad: &Batch) {
        let mut g = grad.clone();
        let last = self.layers.len();
        for (idx, layer) in self.layers.iter_mut().enumerate().rev() {
            let need_input = idx > 0;
            match layer.backward(&g, need_input) {
                Some(next) => g = next,
                None => {
                    debug_assert!(idx == 0 || last == 0);
                    break;
                }
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    fn clone_without_caches(&self) -> Backbone {
        let mut copy = Backbone {
            input: self.input,
            feature_dim: self.feature_dim,
            layers: Vec::with_capacity(self.layers.len()),
        };
        for l in &self.layers {
            copy.layers.push(match l {
                Layer::Conv(c) => Layer::Conv(Conv3x3 {
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    weight: Param::new(c.weight.value.clone()),
                    bias: Param::new(c.bias.value.clone()),
                    cols: Vec::new(),
                    input_dims: (0, 0, 0),
                }),
                Layer::Dense(d) => Layer::Dense(Dense {
                    inputs: d.inputs,
                    outputs: d.outputs,
                    weight: Param::new(d.weight.value.clone()),
                    bias: Param::new(d.bias.value.clone()),
                    input: Vec::new(),
                }),
                Layer::Relu(_) => Layer::Relu(Relu::default()),
                Layer::MaxPool(_) => Layer::MaxPool(MaxPool2::default()),
                Layer::GlobalAvgPool(_) => Layer::GlobalAvgPool(GlobalAvgPool::default()),
            });
        }
        copy
    }
}
