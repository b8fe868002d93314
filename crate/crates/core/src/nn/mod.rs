//! Small differentiable convolutional networks with exact reverse-mode
//! gradients.
//!
//! Tensors fed to a [`Network`] have shape `[channels, height, width]`.
//! Vector-valued problems use `1x1` spatial extent, where a pointwise layer is
//! a dense layer.

mod optim;

pub use optim::{Optimizer, OptimizerConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch { expected: shape, got: vec![data.len()] });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "tensor", index: i });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    /// A `[len, 1, 1]` tensor holding a vector.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len(), 1, 1], values)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::invalid(format!("expected a [C, H, W] tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn check_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.clone(), got: other.shape.clone() });
        }
        Ok(())
    }

    /// Concatenate `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (_, h, w) = first.chw()?;
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            let (pc, ph, pw) = p.chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::ShapeMismatch { expected: vec![pc, h, w], got: p.shape.clone() });
            }
            data.extend_from_slice(&p.data);
            c += pc;
        }
        Ok(Tensor { shape: vec![c, h, w], data })
    }

    /// Mean of each channel of a `[C, H, W]` tensor.
    pub fn channel_means(&self) -> Result<Vec<f64>> {
        let (c, h, w) = self.chw()?;
        let n = h * w;
        Ok((0..c).map(|i| self.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect())
    }
}

/// One entry of a network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `kernel x kernel` convolution with periodic padding and bias.
    Conv { out: usize, kernel: usize },
    /// `1x1` convolution (a dense layer on each pixel).
    Pointwise { out: usize },
    /// `x * sigmoid(x)`.
    Silu,
    /// `x + body(x)`; the body must preserve the channel count.
    Residual { body: Vec<LayerSpec> },
    /// Non-overlapping average pooling.
    AvgPool { factor: usize },
    /// Nearest-neighbour upsampling.
    Upsample { factor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub init_seed: u64,
    /// Initialize the last convolution to zero so the network starts as the
    /// zero map.
    #[serde(default)]
    pub zero_last: bool,
}

impl NetworkSpec {
    /// Residual conv net with six convolutions of width `width`.
    pub fn residual_conv(in_channels: usize, out_channels: usize, width: usize, seed: u64) -> Self {
        let block = || LayerSpec::Residual {
            body: vec![
                LayerSpec::Conv { out: width, kernel: 3 },
                LayerSpec::Silu,
                LayerSpec::Conv { out: width, kernel: 3 },
            ],
        };
        Self {
            in_channels,
            layers: vec![
                LayerSpec::Conv { out: width, kernel: 3 },
                LayerSpec::Silu,
                block(),
                LayerSpec::Silu,
                block(),
                LayerSpec::Silu,
                LayerSpec::Conv { out: out_channels, kernel: 3 },
            ],
            init_seed: seed,
            zero_last: true,
        }
    }

    /// Plain conv net with four convolutions.
    pub fn plain_conv(in_channels: usize, out_channels: usize, width: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for _ in 0..3 {
            layers.push(LayerSpec::Conv { out: width, kernel: 3 });
            layers.push(LayerSpec::Silu);
        }
        layers.push(LayerSpec::Conv { out: out_channels, kernel: 3 });
        Self { in_channels, layers, init_seed: seed, zero_last: false }
    }

    /// Pointwise MLP with `depth` hidden layers.
    pub fn mlp(in_channels: usize, out_channels: usize, hidden: usize, depth: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(LayerSpec::Pointwise { out: hidden });
            layers.push(LayerSpec::Silu);
        }
        layers.push(LayerSpec::Pointwise { out: out_channels });
        Self { in_channels, layers, init_seed: seed, zero_last: false }
    }

    /// Total parameter count. A convolution contributes `out*in*k^2 + out`;
    /// every other layer contributes nothing of its own.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(Network::compile(self)?.2)
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(Network::compile(self)?.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { inp: usize, out: usize, k: usize, offset: usize },
    Silu,
    Residual(Vec<Layer>),
    AvgPool(usize),
    Upsample(usize),
}

/// Per-layer inputs saved by [`Network::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct Activations {
    entries: Vec<Cached>,
}

#[derive(Debug, Clone)]
enum Cached {
    Input(Tensor),
    Residual(Vec<Cached>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    out_channels: usize,
    params: Vec<f64>,
}

impl Network {
    fn compile(spec: &NetworkSpec) -> Result<(Vec<Layer>, usize, usize)> {
        fn walk(specs: &[LayerSpec], mut ch: usize, offset: &mut usize) -> Result<(Vec<Layer>, usize)> {
            let mut out = Vec::with_capacity(specs.len());
            for s in specs {
                match *s {
                    LayerSpec::Conv { out: o, .. } | LayerSpec::Pointwise { out: o } if o > 0 => {
                        let k = if let LayerSpec::Conv { kernel, .. } = *s { kernel } else { 1 };
                        if k == 0 || k % 2 == 0 {
                            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
                        }
                        out.push(Layer::Conv { inp: ch, out: o, k, offset: *offset });
                        *offset += o * ch * k * k + o;
                        ch = o;
                    }
                    LayerSpec::Conv { .. } | LayerSpec::Pointwise { .. } => {
                        return Err(Error::invalid("layer with zero output channels"));
                    }
                    LayerSpec::Silu => out.push(Layer::Silu),
                    LayerSpec::Residual { ref body } => {
                        let (inner, c) = walk(body, ch, offset)?;
                        if c != ch {
                            return Err(Error::invalid(format!("residual body maps {ch} channels to {c}")));
                        }
                        out.push(Layer::Residual(inner));
                    }
                    LayerSpec::AvgPool { factor } | LayerSpec::Upsample { factor } if factor == 0 => {
                        return Err(Error::invalid("pooling factor must be positive"));
                    }
                    LayerSpec::AvgPool { factor } => out.push(Layer::AvgPool(factor)),
                    LayerSpec::Upsample { factor } => out.push(Layer::Upsample(factor)),
                }
            }
            Ok((out, ch))
        }
        if spec.in_channels == 0 {
            return Err(Error::invalid("network needs at least one input channel"));
        }
        let mut n = 0;
        let (layers, ch) = walk(&spec.layers, spec.in_channels, &mut n)?;
        Ok((layers, ch, n))
    }

    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let (layers, out_channels, n) = Self::compile(&spec)?;
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        fn init(layers: &[Layer], params: &mut [f64], rng: &mut ChaCha8Rng) {
            for l in layers {
                match l {
                    Layer::Conv { inp, out, k, offset } => {
                        let fan_in = (inp * k * k) as f64;
                        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("positive std");
                        for p in &mut params[*offset..offset + out * inp * k * k] {
                            *p = normal.sample(rng);
                        }
                    }
                    Layer::Residual(body) => init(body, params, rng),
                    _ => {}
                }
            }
        }
        init(&layers, &mut params, &mut rng);
        if spec.zero_last {
            if let Some((o, w)) = last_conv(&layers) {
                params[o..o + w].iter_mut().for_each(|p| *p = 0.0);
            }
        }
        Ok(Self { spec, layers, out_channels, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Overwrite the bias of the last convolution, one value per output channel.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let (o, w) = last_conv(&self.layers).ok_or_else(|| Error::invalid("network has no convolution"))?;
        if bias.len() != self.out_channels || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid(format!("need {} finite bias values, got {}", self.out_channels, bias.len())));
        }
        self.params[o + w - bias.len()..o + w].copy_from_slice(bias);
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.params.len()], got: vec![params.len()] });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        run(&self.layers, &self.params, &mut cur, None);
        Ok(cur)
    }

    /// Forward pass that also records what [`Network::backward`] needs.
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, Activations)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        run(&self.layers, &self.params, &mut cur, Some(&mut entries));
        Ok((cur, Activations { entries }))
    }

    /// Reverse-mode pass: returns the gradient with respect to the input and
    /// the flat parameter gradient.
    pub fn backward(&self, acts: &Activations, grad_out: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        if acts.entries.len() != self.layers.len() || (self.layers.is_empty() && grad_out.is_empty()) {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads = vec![0.0; self.params.len()];
        let g = back(&self.layers, &self.params, &acts.entries, grad_out.clone(), &mut grads);
        Ok((g, grads))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.chw()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch { expected: vec![self.spec.in_channels, h, w], got: x.shape.clone() });
        }
        let mut div = 1;
        fn pool_depth(layers: &[Layer], div: &mut usize) {
            for l in layers {
                match l {
                    Layer::AvgPool(f) => *div *= f,
                    Layer::Residual(b) => pool_depth(b, div),
                    _ => {}
                }
            }
        }
        pool_depth(&self.layers, &mut div);
        if h % div != 0 || w % div != 0 {
            return Err(Error::invalid(format!("{h}x{w} input is not divisible by the pooling factor {div}")));
        }
        Ok(())
    }
}

fn last_conv(layers: &[Layer]) -> Option<(usize, usize)> {
    layers.iter().rev().find_map(|l| match l {
        Layer::Conv { inp, out, k, offset } => Some((*offset, out * inp * k * k + out)),
        Layer::Residual(b) => last_conv(b),
        _ => None,
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn run(layers: &[Layer], params: &[f64], cur: &mut Tensor, mut cache: Option<&mut Vec<Cached>>) {
    for l in layers {
        match l {
            Layer::Residual(body) => {
                let mut inner = Vec::new();
                let mut y = cur.clone();
                run(body, params, &mut y, cache.as_ref().map(|_| &mut inner));
                for (a, b) in cur.data.iter_mut().zip(&y.data) {
                    *a += b;
                }
                if let Some(c) = cache.as_deref_mut() {
                    c.push(Cached::Residual(inner));
                }
            }
            _ => {
                let next = layer_forward(l, params, cur);
                let input = std::mem::replace(cur, next);
                if let Some(c) = cache.as_deref_mut() {
                    c.push(Cached::Input(input));
                }
            }
        }
    }
}

fn layer_forward(l: &Layer, params: &[f64], x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    match *l {
        Layer::Conv { inp, out, k: 1, offset } => {
            let n = h * w;
            let (wts, bias) = params[offset..offset + out * inp + out].split_at(out * inp);
            let mut y = vec![0.0; out * n];
            for o in 0..out {
                let yo = &mut y[o * n..(o + 1) * n];
                yo.iter_mut().for_each(|v| *v = bias[o]);
                for i in 0..inp {
                    let wv = wts[o * inp + i];
                    for (d, s) in yo.iter_mut().zip(&x.data[i * n..(i + 1) * n]) {
                        *d += wv * s;
                    }
                }
            }
            Tensor::from_parts(vec![out, h, w], y)
        }
        Layer::Conv { inp, out, k, offset } => {
            let wts = &params[offset..offset + out * inp * k * k];
            let bias = &params[offset + out * inp * k * k..offset + out * inp * k * k + out];
            let n = h * w;
            let mut y = vec![0.0; out * n];
            let (rows, cols) = (wrap_index(h, k), wrap_index(w, k));
            for o in 0..out {
                let yo = &mut y[o * n..(o + 1) * n];
                yo.iter_mut().for_each(|v| *v = bias[o]);
                for i in 0..inp {
                    let xi = &x.data[i * n..(i + 1) * n];
                    for dy in 0..k {
                        for dx in 0..k {
                            let wv = wts[((o * inp + i) * k + dy) * k + dx];
                            if wv == 0.0 {
                                continue;
                            }
                            for r in 0..h {
                                let src = &xi[rows[dy][r] * w..(rows[dy][r] + 1) * w];
                                let dst = &mut yo[r * w..(r + 1) * w];
                                for (cc, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[cols[dx][cc]];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![out, h, w], y)
        }
        Layer::Silu => x.map(|v| v * sigmoid(v)),
        Layer::AvgPool(f) => {
            let (oh, ow) = (h / f, w / f);
            let s = 1.0 / (f * f) as f64;
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for r in 0..h {
                    for cc in 0..w {
                        y[(ch * oh + r / f) * ow + cc / f] += s * x.data[(ch * h + r) * w + cc];
                    }
                }
            }
            Tensor::from_parts(vec![c, oh, ow], y)
        }
        Layer::Upsample(f) => {
            let (oh, ow) = (h * f, w * f);
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for r in 0..oh {
                    for cc in 0..ow {
                        y[(ch * oh + r) * ow + cc] = x.data[(ch * h + r / f) * w + cc / f];
                    }
                }
            }
            Tensor::from_parts(vec![c, oh, ow], y)
        }
        Layer::Residual(_) => unreachable!("handled by run"),
    }
}

/// `idx[d][r]` is the source row for kernel tap `d` at output row `r`.
fn wrap_index(n: usize, k: usize) -> Vec<Vec<usize>> {
    let p = k / 2;
    (0..k).map(|d| (0..n).map(|r| (r + d + n * k - p) % n).collect()).collect()
}

fn back(layers: &[Layer], params: &[f64], cache: &[Cached], mut g: Tensor, grads: &mut [f64]) -> Tensor {
    for (l, c) in layers.iter().zip(cache).rev() {
        g = match (l, c) {
            (Layer::Residual(body), Cached::Residual(inner)) => {
                let gb = back(body, params, inner, g.clone(), grads);
                let mut out = g;
                for (a, b) in out.data.iter_mut().zip(&gb.data) {
                    *a += b;
                }
                out
            }
            (_, Cached::Input(x)) => layer_backward(l, params, x, &g, grads),
            _ => unreachable!("cache structure mirrors the layer list"),
        };
    }
    g
}

#[allow(clippy::needless_range_loop)]
fn layer_backward(l: &Layer, params: &[f64], x: &Tensor, g: &Tensor, grads: &mut [f64]) -> Tensor {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    match *l {
        Layer::Conv { inp, out, k: 1, offset } => {
            let n = h * w;
            let mut gx = vec![0.0; inp * n];
            for o in 0..out {
                let go = &g.data[o * n..(o + 1) * n];
                grads[offset + out * inp + o] += go.iter().sum::<f64>();
                for i in 0..inp {
                    let xi = &x.data[i * n..(i + 1) * n];
                    let wv = params[offset + o * inp + i];
                    let mut acc = 0.0;
                    for ((gxv, &gv), &xv) in gx[i * n..(i + 1) * n].iter_mut().zip(go).zip(xi) {
                        acc += gv * xv;
                        *gxv += wv * gv;
                    }
                    grads[offset + o * inp + i] += acc;
                }
            }
            Tensor::from_parts(vec![inp, h, w], gx)
        }
        Layer::Conv { inp, out, k, offset } => {
            let nw = out * inp * k * k;
            let n = h * w;
            let mut gx = vec![0.0; inp * n];
            let (rows, cols) = (wrap_index(h, k), wrap_index(w, k));
            for o in 0..out {
                let go = &g.data[o * n..(o + 1) * n];
                grads[offset + nw + o] += go.iter().sum::<f64>();
                for i in 0..inp {
                    let xi = &x.data[i * n..(i + 1) * n];
                    for dy in 0..k {
                        for dx in 0..k {
                            let widx = ((o * inp + i) * k + dy) * k + dx;
                            let wv = params[offset + widx];
                            let mut acc = 0.0;
                            for r in 0..h {
                                let sr = rows[dy][r];
                                let gr = &go[r * w..(r + 1) * w];
                                for (cc, &gv) in gr.iter().enumerate() {
                                    let si = sr * w + cols[dx][cc];
                                    acc += gv * xi[si];
                                    gx[i * n + si] += wv * gv;
                                }
                            }
                            grads[offset + widx] += acc;
                        }
                    }
                }
            }
            Tensor::from_parts(vec![inp, h, w], gx)
        }
        Layer::Silu => {
            let data = x
                .data
                .iter()
                .zip(&g.data)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            Tensor::from_parts(x.shape.clone(), data)
        }
        Layer::AvgPool(f) => {
            let (oh, ow) = (h / f, w / f);
            let s = 1.0 / (f * f) as f64;
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for r in 0..h {
                    for cc in 0..w {
                        gx[(ch * h + r) * w + cc] = s * g.data[(ch * oh + r / f) * ow + cc / f];
                    }
                }
            }
            Tensor::from_parts(x.shape.clone(), gx)
        }
        Layer::Upsample(f) => {
            let (oh, ow) = (h * f, w * f);
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for r in 0..oh {
                    for cc in 0..ow {
                        gx[(ch * h + r / f) * w + cc / f] += g.data[(ch * oh + r) * ow + cc];
                    }
                }
            }
            Tensor::from_parts(x.shape.clone(), gx)
        }
        Layer::Residual(_) => unreachable!("handled by back"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_net(inp: usize, out: usize, k: usize) -> Network {
        Network::new(NetworkSpec {
            in_channels: inp,
            layers: vec![LayerSpec::Conv { out, kernel: k }],
            init_seed: 1,
            zero_last: false,
        })
        .unwrap()
    }

    #[test]
    fn empty_net_is_identity() {
        let net = Network::new(NetworkSpec { in_channels: 2, layers: vec![], init_seed: 0, zero_last: false }).unwrap();
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn hand_computed_conv() {
        let mut net = conv_net(1, 1, 3);
        // kernel picks the right neighbour minus the centre, bias 0.5
        let mut p = vec![0.0; 10];
        p[5] = 1.0;
        p[4] = -1.0;
        p[9] = 0.5;
        net.set_params(&p).unwrap();
        let x = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let right = x.data()[r * 4 + (c + 1) % 4];
                let expect = right - x.data()[r * 4 + c] + 0.5;
                assert_eq!(y.data()[r * 4 + c], expect);
            }
        }
    }

    #[test]
    fn chain_validation() {
        let bad = NetworkSpec {
            in_channels: 3,
            layers: vec![LayerSpec::Residual { body: vec![LayerSpec::Pointwise { out: 4 }] }],
            init_seed: 0,
            zero_last: false,
        };
        assert!(Network::new(bad).is_err());
        let even = NetworkSpec {
            in_channels: 1,
            layers: vec![LayerSpec::Conv { out: 1, kernel: 2 }],
            init_seed: 0,
            zero_last: false,
        };
        assert!(Network::new(even).is_err());
    }

    #[test]
    fn parameter_count_formula() {
        let spec = NetworkSpec::residual_conv(5, 1, 32, 0);
        let expect = (32 * 5 * 9 + 32) + 4 * (32 * 32 * 9 + 32) + (32 * 9 + 1);
        assert_eq!(spec.parameter_count().unwrap(), expect);
        assert_eq!(NetworkSpec::mlp(4, 2, 8, 1, 0).parameter_count().unwrap(), 8 * 4 + 8 + 2 * 8 + 2);
    }

    #[test]
    fn zero_last_gives_zero_output() {
        let net = Network::new(NetworkSpec::residual_conv(2, 1, 4, 3)).unwrap();
        let x = Tensor::filled(vec![2, 4, 4], 0.7);
        assert!(net.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward() {
        let net = conv_net(1, 1, 1);
        let g = Tensor::zeros(vec![1, 1, 1]);
        assert!(matches!(net.backward(&Activations::default(), &g), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn dense_layer_gradient_is_outer_product() {
        let net = conv_net(3, 2, 1);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        let (_, acts) = net.forward_cached(&x).unwrap();
        let g = Tensor::vector(vec![0.3, -1.1]).unwrap();
        let (_, grads) = net.backward(&acts, &g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads[o * 3 + i], g.data()[o] * x.data()[i]);
            }
            assert_eq!(grads[6 + o], g.data()[o]);
        }
    }
}
