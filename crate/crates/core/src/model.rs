//! Feature generator `ψ` and keypoint regressor heads `f`, `f'`.
//!
//! The generator is a stack of 3×3 conv + ReLU stages. A head is an optional
//! 2× transposed-conv upsample, two 3×3 conv + ReLU layers of the configured
//! width, and a 1×1 projection to `K` logit maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_out_size, ConvOptions, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::heatmap::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_channels: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub head_width: usize,
    pub keypoints: usize,
    /// Double the feature resolution inside each head.
    pub upsample: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 64,
            channels: vec![16, 32, 32, 32],
            strides: vec![2, 2, 1, 1],
            head_width: 64,
            keypoints: 1,
            upsample: false,
        }
    }
}

const KERNEL: usize = 3;

fn same_pad(stride: usize) -> ConvOptions {
    ConvOptions { stride, padding: 1 }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad(format!(
                "{} channel stages but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("channels and strides must be positive".into());
        }
        if self.image_channels == 0 || self.head_width == 0 || self.keypoints == 0 {
            return bad("image_channels, head_width and keypoints must be positive".into());
        }
        let total: usize = self.strides.iter().product();
        if total > self.image_size {
            return bad(format!(
                "stride product {total} exceeds input size {}",
                self.image_size
            ));
        }
        self.feature_size().map(|_| ())
    }

    /// Spatial side of the generator output.
    pub fn feature_size(&self) -> Result<usize> {
        let mut side = self.image_size;
        for &s in &self.strides {
            side = conv_out_size(side, KERNEL, same_pad(s))
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("model: stage collapses a {side}px map")))?;
        }
        Ok(side)
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Heatmap grid produced by the heads.
    pub fn grid(&self) -> Result<Grid> {
        let side = self.feature_size()? * if self.upsample { 2 } else { 1 };
        Ok(Grid::square(side))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
}

/// Ordered layers with their weights and biases (`2i`, `2i + 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    name: String,
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
}

/// How a network's parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Leaves that receive gradients.
    Trainable,
    /// Constants: forward only, no gradient reaches them.
    Frozen,
}

struct LayerInit {
    layer: Layer,
    weight_shape: [usize; 4],
    bias_len: usize,
    fan_in: usize,
    gain: f64,
}

fn init_network<T: Scalar>(name: &str, specs: Vec<LayerInit>, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(specs.len());
    let mut params = Vec::with_capacity(2 * specs.len());
    for s in specs {
        let std = (s.gain / s.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = s.weight_shape.iter().product();
        let w: Vec<T> = (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
        params.push(Tensor::new(&s.weight_shape, w).expect("sized"));
        params.push(Tensor::zeros(&[s.bias_len]));
        layers.push(s.layer);
    }
    Network {
        name: name.to_string(),
        layers,
        params,
    }
}

fn conv_spec(name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, relu: bool) -> LayerInit {
    LayerInit {
        layer: Layer {
            name: name.into(),
            kind: LayerKind::Conv,
            stride,
            padding: k / 2,
            relu,
        },
        weight_shape: [c_out, c_in, k, k],
        bias_len: c_out,
        fan_in: c_in * k * k,
        gain: if relu { 2.0 } else { 1.0 },
    }
}

/// `ψ`: He-initialized conv stack.
pub fn build_generator<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut c_in = config.image_channels;
    let mut specs = Vec::new();
    for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
        specs.push(conv_spec(&format!("conv{i}"), c_in, c, KERNEL, s, true));
        c_in = c;
    }
    Ok(init_network("generator", specs, seed))
}

/// A regressor head (`f` or `f'`) reading generator features.
pub fn build_regressor<T: Scalar>(config: &ModelConfig, name: &str, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let c_in = config.feature_channels();
    let w = config.head_width;
    let mut specs = Vec::new();
    if config.upsample {
        specs.push(LayerInit {
            layer: Layer {
                name: "up".into(),
                kind: LayerKind::ConvTranspose,
                stride: 2,
                padding: 0,
                relu: true,
            },
            weight_shape: [c_in, c_in, 2, 2],
            bias_len: c_in,
            fan_in: c_in,
            gain: 2.0,
        });
    }
    specs.push(conv_spec("conv0", c_in, w, KERNEL, 1, true));
    specs.push(conv_spec("conv1", w, w, KERNEL, 1, true));
    specs.push(conv_spec("proj", w, config.keypoints, 1, 1, false));
    Ok(init_network(name, specs, seed))
}

impl<T: Scalar> Network<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// `layer.weight` / `layer.bias` for every parameter, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.weight", l.name), format!("{}.bias", l.name)])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Replaces parameter values, keeping the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(
                "set_params",
                format!("{} tensors for {} parameters", params.len(), self.params.len()),
            ));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::shape("set_params", old.shape(), new.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, binding: Binding) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| match binding {
                Binding::Trainable => g.param(p.clone()),
                Binding::Frozen => g.constant(p.clone()),
            })
            .collect()
    }

    /// Applies the layers to `x` using parameters bound by [`Network::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid("forward", "bound parameters belong to another network"));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (vars[2 * i], Some(vars[2 * i + 1]));
            let opts = ConvOptions {
                stride: layer.stride,
                padding: layer.padding,
            };
            h = match layer.kind {
                LayerKind::Conv => g.conv2d(h, w, b, opts)?,
                LayerKind::ConvTranspose => g.conv_transpose2d(h, w, b, opts)?,
            };
            if layer.relu {
                h = g.relu(h);
            }
            if !g.value(h).all_finite() {
                return Err(Error::NonFinite(format!("activations of {}.{}", self.name, layer.name)));
            }
        }
        Ok(h)
    }
}

/// `(f ∘ ψ)(x)`: logits `B×K×H'×W'` for images `B×C×H×W`.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    generator: (&Network<T>, &[Var]),
    regressor: (&Network<T>, &[Var]),
    images: Var,
) -> Result<Var> {
    let features = generator.0.forward(g, generator.1, images)?;
    regressor.0.forward(g, regressor.1, features)
}

/// Generator plus the two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub generator: Network<T>,
    pub head: Network<T>,
    pub adversarial: Network<T>,
}

impl<T: Scalar> Model<T> {
    /// Independent initializations for `ψ`, `f` and `f'`, all derived from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let base = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            generator: build_generator(&config, base ^ 1)?,
            head: build_regressor(&config, "head", base ^ 2)?,
            adversarial: build_regressor(&config, "adversarial", base ^ 3)?,
            config,
        })
    }

    pub fn networks(&self) -> [&Network<T>; 3] {
        [&self.generator, &self.head, &self.adversarial]
    }

    pub fn num_params(&self) -> usize {
        self.networks().iter().map(|n| n.num_params()).sum()
    }

    /// Every parameter as `network.layer.weight`-style named tensors.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        self.networks()
            .iter()
            .flat_map(|n| {
                n.param_names()
                    .into_iter()
                    .map(move |p| format!("{}.{p}", n.name()))
                    .zip(n.params().iter().cloned())
            })
            .collect()
    }

    /// Inverse of [`Model::named_params`].
    pub fn load_named(&mut self, arrays: &[(String, Tensor<T>)]) -> Result<()> {
        for net in [&mut self.generator, &mut self.head, &mut self.adversarial] {
            let mut params = Vec::new();
            for pname in net.param_names() {
                let full = format!("{}.{pname}", net.name());
                let t = arrays
                    .iter()
                    .find(|(n, _)| *n == full)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array {full}")))?;
                params.push(t.1.clone());
            }
            net.set_params(params)?;
        }
        Ok(())
    }

    /// Logits of `f` (or `f'` when `adversarial`) with every parameter frozen.
    pub fn predict(&self, images: &Tensor<T>, adversarial: bool) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let gv = self.generator.bind(&mut g, Binding::Frozen);
        let head = if adversarial { &self.adversarial } else { &self.head };
        let hv = head.bind(&mut g, Binding::Frozen);
        let x = g.constant(images.clone());
        let out = forward(&mut g, (&self.generator, &gv), (head, &hv), x)?;
        Ok(g.value(out).clone())
    }

    /// Logits of both heads in one pass over the generator.
    pub fn predict_both(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let gv = self.generator.bind(&mut g, Binding::Frozen);
        let hv = self.head.bind(&mut g, Binding::Frozen);
        let av = self.adversarial.bind(&mut g, Binding::Frozen);
        let x = g.constant(images.clone());
        let feat = self.generator.forward(&mut g, &gv, x)?;
        let f = self.head.forward(&mut g, &hv, feat)?;
        let fa = self.adversarial.forward(&mut g, &av, feat)?;
        Ok((g.value(f).clone(), g.value(fa).clone()))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::heatmap::KeypointSet;
    use crate::losses::KlLoss;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_channels: 2,
            image_size: 8,
            channels: vec![3, 2],
            strides: vec![2, 1],
            head_width: 3,
            keypoints: 2,
            upsample: false,
        }
    }

    /// Direct nested-loop convolution (or transposed convolution).
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, layer: &Layer) -> Tensor<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (s, p) = (layer.stride as isize, layer.padding as isize);
        let xs = x.data();
        let ws = w.data();
        match layer.kind {
            LayerKind::Conv => {
                let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let oh = (h + 2 * layer.padding - kh) / layer.stride + 1;
                let ow = (wd + 2 * layer.padding - kw) / layer.stride + 1;
                let mut out = vec![0.0; n * co * oh * ow];
                for bi in 0..n {
                    for o in 0..co {
                        for y in 0..oh {
                            for xo in 0..ow {
                                let mut acc = b.data()[o];
                                for c in 0..ci {
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            let iy = y as isize * s + u as isize - p;
                                            let ix = xo as isize * s + v as isize - p;
                                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                                acc += xs[((bi * ci + c) * h + iy as usize) * wd + ix as usize]
                                                    * ws[((o * ci + c) * kh + u) * kw + v];
                                            }
                                        }
                                    }
                                }
                                out[((bi * co + o) * oh + y) * ow + xo] = if layer.relu { acc.max(0.0) } else { acc };
                            }
                        }
                    }
                }
                Tensor::new(&[n, co, oh, ow], out).unwrap()
            }
            LayerKind::ConvTranspose => {
                let (co, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
                let oh = (h - 1) * layer.stride + kh - 2 * layer.padding;
                let ow = (wd - 1) * layer.stride + kw - 2 * layer.padding;
                let mut out = vec![0.0; n * co * oh * ow];
                for bi in 0..n {
                    for c in 0..ci {
                        for y in 0..h {
                            for xi in 0..wd {
                                for o in 0..co {
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            let oy = y as isize * s + u as isize - p;
                                            let ox = xi as isize * s + v as isize - p;
                                            if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                                out[((bi * co + o) * oh + oy as usize) * ow + ox as usize] +=
                                                    xs[((bi * ci + c) * h + y) * wd + xi]
                                                        * ws[((c * co + o) * kh + u) * kw + v];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (i, v) in out.iter_mut().enumerate() {
                    *v += b.data()[(i / (oh * ow)) % co];
                    if layer.relu {
                        *v = v.max(0.0);
                    }
                }
                Tensor::new(&[n, co, oh, ow], out).unwrap()
            }
        }
    }

    #[test]
    fn default_feature_shape() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_size().unwrap(), 16);
        assert_eq!(cfg.feature_channels(), 32);
        let gen = build_generator::<f32>(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let v = gen.bind(&mut g, Binding::Frozen);
        let x = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let out = gen.forward(&mut g, &v, x).unwrap();
        assert_eq!(g.shape(out), &[1, 32, 16, 16]);
    }

    #[test]
    fn regressor_shape_and_seeds() {
        let cfg = ModelConfig {
            keypoints: 4,
            ..ModelConfig::default()
        };
        let f = build_regressor::<f32>(&cfg, "head", 1).unwrap();
        let f2 = build_regressor::<f32>(&cfg, "head", 2).unwrap();
        assert_ne!(f.params(), f2.params());
        assert_eq!(f, build_regressor::<f32>(&cfg, "head", 1).unwrap());
        assert_eq!(
            build_generator::<f32>(&cfg, 9).unwrap(),
            build_generator::<f32>(&cfg, 9).unwrap()
        );

        let mut g = Graph::new();
        let v = f.bind(&mut g, Binding::Frozen);
        let x = g.constant(Tensor::zeros(&[2, 32, 16, 16]));
        let out = f.forward(&mut g, &v, x).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 16, 16]);

        let up = ModelConfig { upsample: true, ..cfg };
        assert_eq!(up.grid().unwrap(), Grid::square(32));
        let f = build_regressor::<f32>(&up, "head", 1).unwrap();
        let v = f.bind(&mut g, Binding::Frozen);
        let out = f.forward(&mut g, &v, x).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 32, 32]);
    }

    #[test]
    fn degenerate_configs_error() {
        let cfg = ModelConfig {
            image_size: 8,
            strides: vec![2, 2, 2, 2],
            ..ModelConfig::default()
        };
        assert!(build_generator::<f32>(&cfg, 0).is_err());
        let cfg = ModelConfig {
            strides: vec![2, 2],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            keypoints: 0,
            ..ModelConfig::default()
        };
        assert!(build_regressor::<f32>(&cfg, "head", 0).is_err());
    }

    #[test]
    fn zero_weights_give_bias_maps() {
        let cfg = tiny();
        let mut model = Model::<f64>::new(cfg.clone(), 3).unwrap();
        let mut params: Vec<Tensor<f64>> = model.head.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        let last = params.len() - 1;
        params[last] = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
        model.head.set_params(params).unwrap();
        let out = model.predict(&random(&[3, 2, 8, 8], 5), false).unwrap();
        assert_eq!(out.shape(), &[3, 2, 4, 4]);
        for (i, chunk) in out.data().chunks(16).enumerate() {
            let b = if i % 2 == 0 { 0.25 } else { -1.5 };
            assert!(chunk.iter().all(|&v| v == b));
        }
    }

    #[test]
    fn batch_independence() {
        let model = Model::<f64>::new(tiny(), 4).unwrap();
        let x = random(&[2, 2, 8, 8], 6);
        let both = model.predict(&x, false).unwrap();
        let half = x.numel() / 2;
        let a = model.predict(&Tensor::new(&[1, 2, 8, 8], x.data()[..half].to_vec()).unwrap(), false).unwrap();
        let b = model.predict(&Tensor::new(&[1, 2, 8, 8], x.data()[half..].to_vec()).unwrap(), false).unwrap();
        assert_eq!(Tensor::stack_batch(&[a, b]).unwrap(), both);
    }

    #[test]
    fn forward_matches_per_layer_oracle() {
        for upsample in [false, true] {
            let cfg = ModelConfig { upsample, ..tiny() };
            let mut model = Model::<f64>::new(cfg, 11).unwrap();
            // Nonzero biases so they are exercised.
            for (i, net) in [&mut model.generator, &mut model.head].into_iter().enumerate() {
                let params: Vec<Tensor<f64>> = net
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j % 2 == 1 { random(p.shape(), 100 + (i * 10 + j) as u64) } else { p.clone() })
                    .collect();
                net.set_params(params).unwrap();
            }
            let x = random(&[2, 2, 8, 8], 7);
            let mut h = x.clone();
            for net in [&model.generator, &model.head] {
                for (i, layer) in net.layers().iter().enumerate() {
                    h = conv_oracle(&h, &net.params()[2 * i], &net.params()[2 * i + 1], layer);
                }
            }
            let out = model.predict(&x, false).unwrap();
            assert_eq!(out.shape(), h.shape());
            for (a, b) in out.data().iter().zip(h.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let model = Model::<f64>::new(tiny(), 1).unwrap();
        let mut x = random(&[1, 2, 8, 8], 2);
        x.data_mut()[5] = f64::INFINITY;
        let err = model.predict(&x, false).unwrap_err().to_string();
        assert!(err.contains("generator.conv0"), "{err}");
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = ModelConfig {
            image_channels: 1,
            image_size: 6,
            channels: vec![2, 2],
            strides: vec![2, 1],
            head_width: 2,
            keypoints: 1,
            upsample: false,
        };
        let model = Model::<f64>::new(cfg.clone(), 21).unwrap();
        let kl = KlLoss::new(cfg.grid().unwrap(), 1.0).unwrap();
        let x = random(&[2, 1, 6, 6], 3);
        let pts = vec![KeypointSet::new(vec![(0.4, 2.1)]), KeypointSet::new(vec![(2.7, 1.2)])];
        let gen_n = model.generator.params().len();
        let mut points: Vec<Tensor<f64>> = model.generator.params().to_vec();
        // Perturb biases away from zero so every ReLU is exercised off its kink.
        for (i, p) in points.iter_mut().enumerate() {
            if i % 2 == 1 {
                *p = random(p.shape(), 50 + i as u64).map(|v| 0.1 * v);
            }
        }
        points.extend(model.head.params().iter().cloned());
        points.push(x);
        let err = grad_check_many(
            |g, vars| {
                let (gv, rest) = vars.split_at(gen_n);
                let (hv, xv) = rest.split_at(rest.len() - 1);
                let logits = forward(g, (&model.generator, gv), (&model.head, hv), xv[0])?;
                let p = g.spatial_softmax(logits)?;
                Ok(kl.loss_true(g, p, &pts)?.value)
            },
            &points,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn frozen_binding_blocks_gradient() {
        let model = Model::<f64>::new(tiny(), 8).unwrap();
        let mut g = Graph::new();
        let gv = model.generator.bind(&mut g, Binding::Trainable);
        let hv = model.head.bind(&mut g, Binding::Frozen);
        let x = g.constant(random(&[1, 2, 8, 8], 1));
        let out = forward(&mut g, (&model.generator, &gv), (&model.head, &hv), x).unwrap();
        let s = g.sum(out);
        g.backward(s).unwrap();
        assert!(hv.iter().all(|&v| g.grad(v).unwrap().is_none()));
        assert!(gv.iter().any(|&v| g.grad(v).unwrap().is_some()));
    }

    #[test]
    fn named_params_round_trip() {
        let a = Model::<f32>::new(tiny(), 1).unwrap();
        let mut b = Model::<f32>::new(tiny(), 2).unwrap();
        assert_ne!(a, b);
        b.load_named(&a.named_params()).unwrap();
        assert_eq!(a, b);
        assert!(a.named_params().iter().any(|(n, _)| n == "adversarial.proj.bias"));
        assert!(b.load_named(&a.named_params()[1..]).is_err());
    }
}
