//! Configurable U-Net with same-padding convolutions, so the output has the
//! spatial size of the input.
//!
//! Encoder level `l` (channels `base_width · 2^l`): two 3×3 conv + ReLU, the
//! result is kept as a skip connection, then 2×2 max pooling. The bottleneck
//! is two more conv + ReLU at `base_width · 2^depth` channels. Each decoder
//! level upsamples with a 2×2 stride-2 transposed convolution that halves the
//! channels, concatenates the skip connection and applies two conv + ReLU. A
//! final 1×1 convolution maps to the output channels.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{self, ConvGrads};
use crate::nn::tensor::{Real, Tensor};

/// Upper end of the input rescaling interval, keeping it half-open.
pub const RESCALE_TOP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub kernel_size: usize,
    pub rescale_input: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 12,
            out_channels: 3,
            base_width: 64,
            depth: 4,
            kernel_size: 3,
            rescale_input: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth < 1 {
            return bad("U-Net depth must be >= 1".into());
        }
        if self.kernel_size != 3 {
            return bad(format!("kernel_size must be 3, got {}", self.kernel_size));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let m = 1usize << self.depth;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by 2^depth = {m} (depth {})",
                self.depth
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("net config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    bias: usize,
}

/// A U-Net instance: configuration plus parameter layout.
#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    enc: Vec<[ConvSlot; 2]>,
    mid: [ConvSlot; 2],
    // dec[l]: up, conv1, conv2 for level l
    dec: Vec<[ConvSlot; 3]>,
    head: ConvSlot,
    shapes: Vec<(String, [usize; 4])>,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut shapes = Vec::new();
        let mut add = |name: String, w: [usize; 4], co: usize| {
            let weight = shapes.len();
            shapes.push((format!("{name}.weight"), w));
            shapes.push((format!("{name}.bias"), [1, 1, 1, co]));
            ConvSlot { weight, bias: weight + 1 }
        };
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for l in 0..cfg.depth {
            let c = cfg.width(l);
            enc.push([
                add(format!("enc{l}.conv1"), [c, cin, k, k], c),
                add(format!("enc{l}.conv2"), [c, c, k, k], c),
            ]);
            cin = c;
        }
        let cm = cfg.width(cfg.depth);
        let mid = [
            add("mid.conv1".into(), [cm, cin, k, k], cm),
            add("mid.conv2".into(), [cm, cm, k, k], cm),
        ];
        let mut dec: Vec<[ConvSlot; 3]> = Vec::new();
        for l in (0..cfg.depth).rev() {
            let c = cfg.width(l);
            let up = cfg.width(l + 1);
            dec.push([
                add(format!("dec{l}.up"), [up, c, 2, 2], c),
                add(format!("dec{l}.conv1"), [c, 2 * c, k, k], c),
                add(format!("dec{l}.conv2"), [c, c, k, k], c),
            ]);
        }
        dec.reverse();
        let head = add("head".into(), [cfg.out_channels, cfg.width(0), 1, 1], cfg.out_channels);
        Ok(Self {
            cfg,
            enc,
            mid,
            dec,
            head,
            shapes,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn param_shapes(&self) -> &[(String, [usize; 4])] {
        &self.shapes
    }

    /// Fan-in scaled uniform weights (He bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParameterSet<T> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .shapes
            .iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(*shape)
                } else {
                    // a transposed 2x2 stride-2 output pixel sees one input pixel per channel
                    let fan_in = if name.contains(".up.") {
                        shape[0]
                    } else {
                        shape[1] * shape[2] * shape[3]
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let v = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
                    Tensor::from_vec(*shape, v).expect("shape product")
                };
                Param {
                    name: name.clone(),
                    value,
                }
            })
            .collect();
        ParameterSet { params }
    }

    pub fn zero_params<T: Real>(&self) -> ParameterSet<T> {
        ParameterSet {
            params: self
                .shapes
                .iter()
                .map(|(name, shape)| Param {
                    name: name.clone(),
                    value: Tensor::zeros(*shape),
                })
                .collect(),
        }
    }

    pub fn check_params<T: Real>(&self, params: &ParameterSet<T>) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                self.shapes.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.params.iter().zip(&self.shapes) {
            if &p.name != name || p.value.shape() != *shape {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(params, x)?.output)
    }

    /// Forward pass keeping every activation needed by [`UNet::backward`].
    pub fn forward_cached<T: Real>(&self, params: &ParameterSet<T>, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        self.cfg.check_input(x.shape())?;
        let p = |i: usize| &params.params[i].value;
        let conv_relu = |x: &Tensor<T>, s: ConvSlot| -> Result<Tensor<T>> {
            let mut y = layers::conv2d(x, p(s.weight), p(s.bias))?;
            layers::relu_inplace(&mut y);
            Ok(y)
        };

        let x0 = if self.cfg.rescale_input { rescale_input(x) } else { x.clone() };
        let mut enc = Vec::with_capacity(self.cfg.depth);
        let mut h = x0;
        for slots in &self.enc {
            let r1 = conv_relu(&h, slots[0])?;
            let r2 = conv_relu(&r1, slots[1])?;
            let (pooled, argmax) = layers::maxpool2(&r2)?;
            enc.push(EncCache { input: h, r1, r2, argmax });
            h = pooled;
        }
        let m1 = conv_relu(&h, self.mid[0])?;
        let m2 = conv_relu(&m1, self.mid[1])?;
        let mid = MidCache { input: h, r1: m1 };
        let mut h = m2;
        let mut dec: Vec<Option<DecCache<T>>> = (0..self.cfg.depth).map(|_| None).collect();
        for l in (0..self.cfg.depth).rev() {
            let s = self.dec[l];
            let up = layers::upconv2(&h, p(s[0].weight), p(s[0].bias))?;
            let cat = layers::concat_channels(&up, &enc[l].r2)?;
            let r1 = conv_relu(&cat, s[1])?;
            let r2 = conv_relu(&r1, s[2])?;
            dec[l] = Some(DecCache {
                below: std::mem::replace(&mut h, r2),
                cat,
                r1,
            });
        }
        let output = layers::conv2d(&h, p(self.head.weight), p(self.head.bias))?;
        Ok(ForwardCache {
            enc,
            mid,
            dec: dec.into_iter().map(|d| d.expect("every level visited")).collect(),
            top: h,
            output,
        })
    }

    /// Parameter gradients for upstream gradient `dout` (same shape as the
    /// output). Gradients are accumulated into `grads`, which must be laid
    /// out like the parameter set.
    pub fn backward<T: Real>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        dout: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<()> {
        self.backward_impl(params, cache, dout, grads, false).map(|_| ())
    }

    /// Like [`UNet::backward`] but also returns the gradient with respect to
    /// the (rescaled, when enabled) network input.
    pub fn backward_with_input<T: Real>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        dout: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) -> Result<Tensor<T>> {
        Ok(self
            .backward_impl(params, cache, dout, grads, true)?
            .expect("input gradient requested"))
    }

    fn backward_impl<T: Real>(
        &self,
        params: &ParameterSet<T>,
        cache: &ForwardCache<T>,
        dout: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        if grads.len() != params.len() {
            return Err(Error::Shape("gradient buffer does not match parameters".into()));
        }
        let p = |i: usize| &params.params[i].value;
        let mut accumulate = |s: ConvSlot, g: &ConvGrads<T>| {
            add_into(&mut grads[s.weight], &g.dweight);
            add_into(&mut grads[s.bias], &g.dbias);
        };

        let g = layers::conv2d_backward(&cache.top, p(self.head.weight), p(self.head.bias), dout, true)?;
        accumulate(self.head, &g);
        let mut dh = g.dx.expect("requested");

        let mut dskips: Vec<Option<Tensor<T>>> = (0..self.cfg.depth).map(|_| None).collect();
        for l in 0..self.cfg.depth {
            let s = self.dec[l];
            let dc = &cache.dec[l];
            // dh is the gradient of this level's r2 (post-ReLU)
            let r2 = if l == 0 { &cache.top } else { &cache.dec[l - 1].below };
            layers::relu_backward_inplace(r2, &mut dh)?;
            let g = layers::conv2d_backward(&dc.r1, p(s[2].weight), p(s[2].bias), &dh, true)?;
            accumulate(s[2], &g);
            let mut d = g.dx.expect("requested");
            layers::relu_backward_inplace(&dc.r1, &mut d)?;
            let g = layers::conv2d_backward(&dc.cat, p(s[1].weight), p(s[1].bias), &d, true)?;
            accumulate(s[1], &g);
            let up_channels = self.cfg.width(l);
            let (dup, dskip) = layers::concat_backward(&g.dx.expect("requested"), up_channels)?;
            dskips[l] = Some(dskip);
            let g = layers::upconv2_backward(&dc.below, p(s[0].weight), p(s[0].bias), &dup)?;
            accumulate(s[0], &g);
            dh = g.dx.expect("upconv always returns dx");
        }

        // bottleneck: dh is the gradient of m2 = dec[depth-1].below
        let m2 = &cache.dec[self.cfg.depth - 1].below;
        layers::relu_backward_inplace(m2, &mut dh)?;
        let g = layers::conv2d_backward(&cache.mid.r1, p(self.mid[1].weight), p(self.mid[1].bias), &dh, true)?;
        accumulate(self.mid[1], &g);
        let mut d = g.dx.expect("requested");
        layers::relu_backward_inplace(&cache.mid.r1, &mut d)?;
        let g = layers::conv2d_backward(&cache.mid.input, p(self.mid[0].weight), p(self.mid[0].bias), &d, true)?;
        accumulate(self.mid[0], &g);
        let mut dh = g.dx.expect("requested");

        for l in (0..self.cfg.depth).rev() {
            let s = self.enc[l];
            let ec = &cache.enc[l];
            let mut d = layers::maxpool2_backward(ec.r2.shape(), &ec.argmax, &dh)?;
            add_into(&mut d, dskips[l].as_ref().expect("filled above"));
            layers::relu_backward_inplace(&ec.r2, &mut d)?;
            let g = layers::conv2d_backward(&ec.r1, p(s[1].weight), p(s[1].bias), &d, true)?;
            accumulate(s[1], &g);
            let mut d = g.dx.expect("requested");
            layers::relu_backward_inplace(&ec.r1, &mut d)?;
            let need_dx = l > 0 || need_input_grad;
            let g = layers::conv2d_backward(&ec.input, p(s[0].weight), p(s[0].bias), &d, need_dx)?;
            accumulate(s[0], &g);
            if let Some(dx) = g.dx {
                dh = dx;
            }
        }
        Ok(need_input_grad.then_some(dh))
    }
}

fn add_into<T: Real>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a = *a + b;
    }
}

/// Maps every sample affinely onto `[0, RESCALE_TOP]` using its own min and
/// max. A constant sample maps to 0.
pub fn rescale_input<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    let top = T::from_f64(RESCALE_TOP);
    for s in 0..x.batch() {
        let v = y.sample_mut(s);
        let lo = v.iter().copied().fold(T::infinity(), T::min);
        let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
        let span = hi - lo;
        for e in v.iter_mut() {
            *e = if span > T::zero() { (*e - lo) / span * top } else { T::zero() };
        }
    }
    y
}

struct EncCache<T> {
    input: Tensor<T>,
    r1: Tensor<T>,
    r2: Tensor<T>,
    argmax: Vec<u32>,
}

struct MidCache<T> {
    input: Tensor<T>,
    r1: Tensor<T>,
}

struct DecCache<T> {
    /// Input of the upconv (output of the level below).
    below: Tensor<T>,
    cat: Tensor<T>,
    r1: Tensor<T>,
}

/// Activations saved by the forward pass.
pub struct ForwardCache<T> {
    enc: Vec<EncCache<T>>,
    mid: MidCache<T>,
    dec: Vec<DecCache<T>>,
    /// Output of decoder level 0, input of the 1×1 head.
    top: Tensor<T>,
    pub output: Tensor<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(depth: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 3,
            base_width: 4,
            depth,
            kernel_size: 3,
            rescale_input: true,
        }
    }

    #[test]
    fn output_keeps_spatial_size() {
        for depth in 1..=3 {
            let net = UNet::new(cfg(depth)).unwrap();
            let params = net.init_params::<f32>(1);
            let side = 8 << (depth - 1);
            let x = Tensor::from_vec([2, 2, side, side + 8], (0..2 * 2 * side * (side + 8)).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
            let y = net.forward(&params, &x).unwrap();
            assert_eq!(y.shape(), [2, 3, side, side + 8]);
        }
    }

    #[test]
    fn zero_params_output_final_bias() {
        let net = UNet::new(cfg(2)).unwrap();
        let mut params = net.zero_params::<f64>();
        let head_bias = params.params.iter().position(|p| p.name == "head.bias").unwrap();
        params.params[head_bias].value.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let x = Tensor::from_vec([1, 2, 8, 8], (0..128).map(|i| i as f64).collect()).unwrap();
        let y = net.forward(&params, &x).unwrap();
        for (c, want) in [0.1, -0.2, 0.3].iter().enumerate() {
            assert!(y.data()[c * 64..(c + 1) * 64].iter().all(|v| v == want));
        }
    }

    #[test]
    fn divisibility_and_config_errors() {
        let net = UNet::new(cfg(2)).unwrap();
        let params = net.init_params::<f32>(0);
        let err = net.forward(&params, &Tensor::zeros([1, 2, 6, 8])).unwrap_err();
        assert!(err.to_string().contains("divisible by 2^depth"), "{err}");
        assert!(net.forward(&params, &Tensor::zeros([1, 3, 8, 8])).is_err());
        assert!(UNet::new(UNetConfig { depth: 0, ..cfg(1) }).is_err());
        assert!(UNet::new(UNetConfig { kernel_size: 5, ..cfg(1) }).is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = UNet::new(UNetConfig::default()).unwrap();
        let mut names: Vec<_> = net.param_shapes().iter().map(|(n, _)| n.clone()).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        // 4 levels × (2 enc + 3 dec) + 2 mid + head, each weight+bias
        assert_eq!(n, 2 * (4 * 5 + 2 + 1));
    }

    #[test]
    fn rescale_maps_into_half_open_unit_interval() {
        let x = Tensor::from_vec([2, 1, 1, 3], vec![2.0f64, 4.0, 6.0, 5.0, 5.0, 5.0]).unwrap();
        let y = rescale_input(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.5 * RESCALE_TOP).abs() < 1e-15);
        assert!(y.data()[2] < 1.0);
        assert_eq!(&y.data()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_composition_does_not_change_outputs() {
        let net = UNet::new(cfg(2)).unwrap();
        let params = net.init_params::<f32>(3);
        let n = 3 * 2 * 8 * 8;
        let x = Tensor::from_vec([3, 2, 8, 8], (0..n).map(|i| ((i * 31) % 17) as f32 / 17.0).collect()).unwrap();
        let y = net.forward(&params, &x).unwrap();
        for s in 0..3 {
            let xs = Tensor::from_vec([1, 2, 8, 8], x.sample(s).to_vec()).unwrap();
            assert_eq!(net.forward(&params, &xs).unwrap().data(), y.sample(s));
        }
    }
}
