//! Segmentation network with a multi-side boundary head and the two fusion paths.
//!
//! The encoder has four stride-2 stages. The segmentation decoder runs a 3×3
//! context conv at stride 16, an optional concatenation of the (detached)
//! boundary map, a 1×1 bottleneck, and a stride-4 skip fusion. The boundary
//! head taps all four stages: sides 1-3 produce one channel each, side 4
//! produces `C_b` channels, and a grouped 1×1 conv fuses the per-class slices
//! `[side4_c, s1, s2, s3]`. The optional refinement interleaves the fused
//! boundary map with the spatial gradient of the softmax mask and applies a
//! grouped 3×3 conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, ConvSpec, Graph, Mode, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// one boundary channel per class
    Semantic,
    /// a single class-agnostic channel
    Binary,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub widths: [usize; 4],
    /// channels of the context conv, bottleneck and decoder
    pub decoder_width: usize,
    /// channels of the reduced stride-4 skip features
    pub skip_width: usize,
    pub use_bsf: bool,
    pub use_sgf: bool,
    pub boundary_mode: BoundaryMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            widths: [16, 32, 64, 96],
            decoder_width: 32,
            skip_width: 16,
            use_bsf: false,
            use_sgf: false,
            boundary_mode: BoundaryMode::Semantic,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Channels of the boundary head output, 0 without a head.
    pub fn boundary_channels(&self) -> usize {
        match self.boundary_mode {
            BoundaryMode::Semantic => self.num_classes,
            BoundaryMode::Binary => 1,
            BoundaryMode::None => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.widths.contains(&0) || self.decoder_width == 0 || self.skip_width == 0 {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if (self.use_bsf || self.use_sgf) && self.boundary_mode == BoundaryMode::None {
            return Err(Error::Config(
                "bsf and sgf need the boundary head (boundary_mode != none)".into(),
            ));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must be in (0, 1], got {}",
                self.bn_momentum
            )));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 {
            return Err(Error::Config(format!("bn_eps must be positive, got {}", self.bn_eps)));
        }
        Ok(())
    }
}

/// Outputs of one forward pass. Boundary maps are sigmoid probabilities.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub logits: Var,
    pub q_fuse: Option<Var>,
    pub q_last: Option<Var>,
    pub q_refine: Option<Var>,
    /// spatial gradient of the softmax mask, reduced to the boundary channel count
    pub q_grad: Option<Var>,
}

impl ForwardOutputs {
    /// Boundary heads that receive boundary supervision.
    pub fn boundary_heads(&self) -> Vec<Var> {
        [self.q_fuse, self.q_last, self.q_refine]
            .into_iter()
            .flatten()
            .collect()
    }

    /// Map used as the teacher's boundary pseudo-label source.
    pub fn boundary_source(&self) -> Option<Var> {
        self.q_refine.or(self.q_fuse)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

#[derive(Clone, Copy, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: ConvRef,
    bn: BnRef,
}

#[derive(Clone, Debug)]
struct Side {
    reduce: ConvBn,
    up: ConvRef,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<[ConvBn; 2]>,
    sides: Vec<Side>,
    fuse: Option<ConvRef>,
    context: ConvBn,
    bottleneck: ConvBn,
    skip: ConvBn,
    decoder: ConvBn,
    classifier: ConvRef,
    sgf: Option<ConvRef>,
}

/// Network weights, batch-norm buffers and the wiring between them.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar = f32> {
    pub config: ModelConfig,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    layout: Layout,
}

struct Builder<'a, T: Scalar, R: Rng> {
    rng: &'a mut R,
    params: Vec<Tensor<T>>,
    param_names: Vec<String>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    momentum: T,
    eps: T,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn param(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push(t);
        self.param_names.push(name);
        self.params.len() - 1
    }

    /// He-uniform weights, zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool) -> ConvRef {
        let cg = cin / spec.groups;
        let bound = (6.0 / (cg * k * k) as f64).sqrt();
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cg, k, k], |_| T::of(rng.gen_range(-bound..bound)));
        let w = self.param(format!("{name}.weight"), w);
        let b = bias.then(|| self.param(format!("{name}.bias"), Tensor::zeros(&[cout])));
        ConvRef { w, b, spec }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let gamma = self.param(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.param(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.bn.push(BatchNormState::new(c, self.momentum, self.eps));
        self.bn_names.push(name.to_string());
        BnRef {
            gamma,
            beta,
            state: self.bn.len() - 1,
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let conv = self.conv(
            &format!("{name}.conv"),
            cin,
            cout,
            k,
            ConvSpec::new(stride, k / 2, 1),
            false,
        );
        let bn = self.bn(&format!("{name}.bn"), cout);
        ConvBn { conv, bn }
    }
}

/// `|softmax(logits) - avgpool3(softmax(logits))|` per channel.
pub fn spatial_gradient<T: Scalar>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let m = g.softmax_channels(logits)?;
    let pooled = g.avg_pool_3x3_same(m)?;
    let d = g.sub(m, pooled)?;
    Ok(g.abs(d))
}

/// Interleave `(q_fuse_c, q_grad_c)` pairs, grouped 3×3 conv, sigmoid.
pub fn sgf_refine<T: Scalar>(g: &mut Graph<T>, q_fuse: Var, q_grad: Var, weight: Var, bias: Var) -> Result<Var> {
    let (_, c, _, _) = g.value(q_fuse).dims4()?;
    let pairs = g.slice_interleave(q_fuse, q_grad)?;
    let y = g.conv2d(pairs, weight, Some(bias), ConvSpec::new(1, 1, c))?;
    Ok(g.sigmoid(y))
}

/// Block-average `x` down by an integer factor.
pub fn area_downsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "area_downsample",
            "spatial",
            format!("{h}x{w} by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let d = x.data();
    Ok(Tensor::from_fn(&[n, c, oh, ow], |i| {
        let (p, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let mut s = 0.0;
        for dy in 0..factor {
            let row = (p * h + y * factor + dy) * w + xx * factor;
            s += d[row..row + factor].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        T::of(s * inv)
    }))
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng,
            params: Vec::new(),
            param_names: Vec::new(),
            bn: Vec::new(),
            bn_names: Vec::new(),
            momentum: T::of(config.bn_momentum),
            eps: T::of(config.bn_eps),
        };
        let w = config.widths;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &cout) in w.iter().enumerate() {
            let a = b.conv_bn(&format!("enc{i}.0"), cin, cout, 3, 2);
            let c = b.conv_bn(&format!("enc{i}.1"), cout, cout, 3, 1);
            encoder.push([a, c]);
            cin = cout;
        }

        let cb = config.boundary_channels();
        let mut sides = Vec::new();
        let mut fuse = None;
        if cb > 0 {
            for (i, &wi) in w.iter().enumerate() {
                let out = if i == 3 { cb } else { 1 };
                let reduce = b.conv_bn(&format!("side{}", i + 1), wi, out, 1, 1);
                let up = b.conv(&format!("side{}.up", i + 1), out, out, 3, ConvSpec::new(1, 1, 1), true);
                sides.push(Side { reduce, up });
            }
            fuse = Some(b.conv("fuse", 4 * cb, cb, 1, ConvSpec::new(1, 0, cb), true));
        }

        let d = config.decoder_width;
        let context = b.conv_bn("context", w[3], d, 3, 1);
        let bsf_extra = if config.use_bsf { cb } else { 0 };
        let bottleneck = b.conv_bn("bottleneck", d + bsf_extra, d, 1, 1);
        let skip = b.conv_bn("skip", w[1], config.skip_width, 1, 1);
        let decoder = b.conv_bn("decoder", d + config.skip_width, d, 3, 1);
        let classifier = b.conv("classifier", d, config.num_classes, 1, ConvSpec::default(), true);
        let sgf = config
            .use_sgf
            .then(|| b.conv("sgf", 2 * cb, cb, 3, ConvSpec::new(1, 1, cb), true));

        let layout = Layout {
            encoder,
            sides,
            fuse,
            context,
            bottleneck,
            skip,
            decoder,
            classifier,
            sgf,
        };
        Ok(Self {
            config,
            params: b.params,
            param_names: b.param_names,
            bn: b.bn,
            bn_names: b.bn_names,
            layout,
        })
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    /// Total number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Indices of parameters that belong to the boundary head (sides and fusion).
    pub fn boundary_head_params(&self) -> Vec<usize> {
        self.param_names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("side") || n.starts_with("fuse"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Put every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn conv(&self, g: &mut Graph<T>, p: &[Var], x: Var, c: ConvRef) -> Result<Var> {
        g.conv2d(x, p[c.w], c.b.map(|b| p[b]), c.spec)
    }

    fn conv_bn_relu(&mut self, g: &mut Graph<T>, p: &[Var], x: Var, l: ConvBn, mode: Mode) -> Result<Var> {
        let y = self.conv(g, p, x, l.conv)?;
        let y = g.batch_norm(y, p[l.bn.gamma], p[l.bn.beta], &mut self.bn[l.bn.state], mode)?;
        Ok(g.relu(y))
    }

    /// Stage outputs at strides 2, 4, 8 and 16.
    pub fn encoder_forward(&mut self, g: &mut Graph<T>, p: &[Var], image: Var, mode: Mode) -> Result<[Var; 4]> {
        let (_, c, h, w) = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::shape(
                "encoder",
                "channels",
                format!("expected 3 image channels, got {c}"),
            ));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "encoder",
                "spatial",
                format!("{h}x{w} is not a positive multiple of 16"),
            ));
        }
        let mut x = image;
        let mut feats = [image; 4];
        for (i, stage) in self.layout.encoder.clone().iter().enumerate() {
            x = self.conv_bn_relu(g, p, x, stage[0], mode)?;
            x = self.conv_bn_relu(g, p, x, stage[1], mode)?;
            feats[i] = x;
        }
        Ok(feats)
    }

    /// Side outputs (pre-sigmoid, at half resolution) and the fused/last probabilities.
    pub fn boundary_head_forward(
        &mut self,
        g: &mut Graph<T>,
        p: &[Var],
        feats: &[Var; 4],
        out_hw: (usize, usize),
        mode: Mode,
    ) -> Result<(Var, Var)> {
        let fuse = self
            .layout
            .fuse
            .ok_or_else(|| Error::Config("model has no boundary head".into()))?;
        let (h, w) = out_hw;
        let mut side_out = Vec::with_capacity(4);
        for (i, side) in self.layout.sides.clone().iter().enumerate() {
            let y = self.conv_bn_relu(g, p, feats[i], side.reduce, mode)?;
            let y = g.bilinear_resize(y, h / 2, w / 2)?;
            side_out.push(self.conv(g, p, y, side.up)?);
        }
        let cb = self.config.boundary_channels();
        let stacked = g.concat_channels(&[side_out[3], side_out[0], side_out[1], side_out[2]])?;
        let index: Vec<usize> = (0..cb).flat_map(|c| [c, cb, cb + 1, cb + 2]).collect();
        let sliced = g.gather_channels(stacked, &index)?;
        let fused = self.conv(g, p, sliced, fuse)?;
        let fused = g.bilinear_resize(fused, h, w)?;
        let q_fuse = g.sigmoid(fused);
        let last = g.bilinear_resize(side_out[3], h, w)?;
        let q_last = g.sigmoid(last);
        Ok((q_fuse, q_last))
    }

    /// Segmentation logits at input resolution; `boundary` is the stride-16 map for BSF.
    pub fn seg_head_forward(
        &mut self,
        g: &mut Graph<T>,
        p: &[Var],
        feats: &[Var; 4],
        boundary: Option<Var>,
        out_hw: (usize, usize),
        mode: Mode,
    ) -> Result<Var> {
        let l = self.layout.clone();
        let ctx = self.conv_bn_relu(g, p, feats[3], l.context, mode)?;
        let ctx = match (self.config.use_bsf, boundary) {
            (true, Some(b)) => g.concat_channels(&[ctx, b])?,
            (true, None) => return Err(Error::Config("bsf is enabled but no boundary map was given".into())),
            (false, _) => ctx,
        };
        let bott = self.conv_bn_relu(g, p, ctx, l.bottleneck, mode)?;
        let (_, _, h4, w4) = g.value(feats[1]).dims4()?;
        let up = g.bilinear_resize(bott, h4, w4)?;
        let skip = self.conv_bn_relu(g, p, feats[1], l.skip, mode)?;
        let cat = g.concat_channels(&[up, skip])?;
        let dec = self.conv_bn_relu(g, p, cat, l.decoder, mode)?;
        let logits = self.conv(g, p, dec, l.classifier)?;
        g.bilinear_resize(logits, out_hw.0, out_hw.1)
    }

    /// Full forward pass honoring the component toggles.
    pub fn forward(&mut self, g: &mut Graph<T>, p: &[Var], image: Var, mode: Mode) -> Result<ForwardOutputs> {
        if p.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} parameter handles for a model with {} parameters",
                p.len(),
                self.params.len()
            )));
        }
        let (_, _, h, w) = g.value(image).dims4()?;
        let feats = self.encoder_forward(g, p, image, mode)?;
        let (q_fuse, q_last) = if self.layout.fuse.is_some() {
            let (f, l) = self.boundary_head_forward(g, p, &feats, (h, w), mode)?;
            (Some(f), Some(l))
        } else {
            (None, None)
        };
        let bsf_input = match (self.config.use_bsf, q_fuse) {
            (true, Some(q)) => {
                let small = area_downsample(g.value(q), 16)?;
                Some(g.constant(small))
            }
            _ => None,
        };
        let logits = self.seg_head_forward(g, p, &feats, bsf_input, (h, w), mode)?;
        let (q_refine, q_grad) = match (self.layout.sgf, q_fuse) {
            (Some(sgf), Some(qf)) => {
                let grad = spatial_gradient(g, logits)?;
                let grad = match self.config.boundary_mode {
                    BoundaryMode::Binary => g.channel_max(grad)?,
                    _ => grad,
                };
                let bias = sgf.b.expect("sgf conv has a bias");
                (Some(sgf_refine(g, qf, grad, p[sgf.w], p[bias])?), Some(grad))
            }
            _ => (None, None),
        };
        Ok(ForwardOutputs {
            logits,
            q_fuse,
            q_last,
            q_refine,
            q_grad,
        })
    }

    /// Same structure and shapes as `other` (parameter and buffer names and sizes).
    pub fn check_compatible(&self, other: &Network<T>) -> Result<()> {
        let same = self.param_names == other.param_names
            && self.bn_names == other.bn_names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::Config("networks differ in structure".into()));
        }
        Ok(())
    }
}
