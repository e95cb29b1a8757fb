//! Small 3D encoder-decoder segmentation network with a cube-location
//! classification head, its parameter store and the EMA teacher update.
//!
//! Topology for depth `D` and base width `w` (`w_l = w·2^l`):
//!
//! ```text
//! enc0:  conv3(1 → w_0) + IN + LReLU
//! for l in 1..=D:
//!   down_l: conv2/s2(w_{l-1} → w_l) + IN + LReLU
//!   enc_l:  conv3(w_l → w_l) + IN + LReLU            (enc_D = bottleneck)
//! for l in D-1..=0:
//!   up_l:   tconv2/s2(w_{l+1} → w_l) + bias
//!   dec_l:  conv3([up_l, enc_l] → w_l) + IN + LReLU
//! head:  conv1(w_0 → C+1) + bias                      (logits)
//! cls:   GAP(bottleneck) → fc(w_D → hidden) → LReLU → fc(hidden → N³)
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::nn::{self, NormActCache, Taps, LEAKY_SLOPE};
use crate::volume::{Dims, ProbKind, ProbMap, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NetworkConfig {
    /// Organ classes `C`; the network predicts `C+1` channels.
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
    pub cls_hidden: usize,
    /// The location head average-pools the bottleneck to `cls_grid³` cells
    /// and flattens them; 1 is global average pooling.
    pub cls_grid: usize,
    /// Output width of the location head (`N³`).
    pub n_locations: usize,
    pub norm: Norm,
}

/// Normalization inside every convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Norm {
    /// Per-channel statistics over the spatial extent of one input.
    #[default]
    Instance,
    /// Affine map only; absolute intensities survive cube-wise inference.
    None,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            base_width: 4,
            depth: 2,
            cls_hidden: 32,
            cls_grid: 2,
            n_locations: 27,
            norm: Norm::Instance,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            bail!(Config, "network needs at least one organ class");
        }
        if self.base_width == 0 || self.cls_hidden == 0 || self.cls_grid == 0 {
            bail!(Config, "network widths must be positive");
        }
        if self.depth == 0 || self.depth > 6 {
            bail!(Config, "network depth must be in 1..=6, got {}", self.depth);
        }
        if self.n_locations == 0 {
            bail!(Config, "location head needs at least one output");
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Bottleneck feature dimension `D`.
    pub fn feature_dim(&self) -> usize {
        self.width(self.depth)
    }

    /// Input length of the location head.
    pub fn cls_input_dim(&self) -> usize {
        self.feature_dim() * self.cls_grid.pow(3)
    }

    /// Spatial size every input dimension must be divisible by.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let m = self.size_multiple();
        if dims.is_empty() || !dims.divisible_by(m) {
            bail!(Dimension, "input {dims} must be divisible by {m} (depth {})", self.depth);
        }
        Ok(())
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
struct StageIdx {
    w: usize,
    gamma: usize,
    beta: usize,
    in_ch: usize,
    out_ch: usize,
    taps: Taps,
}

#[derive(Debug, Clone, Copy)]
struct UpIdx {
    w: usize,
    b: usize,
    in_ch: usize,
    out_ch: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<StageIdx>,
    up: Vec<UpIdx>,
    dec: Vec<StageIdx>,
    head_w: usize,
    head_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Tensor names, shapes and fan-ins in storage order.
fn tensor_specs(cfg: &NetworkConfig) -> (Layout, Vec<(String, Vec<usize>, usize)>) {
    let mut specs: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
        specs.push((name, shape, fan_in));
        specs.len() - 1
    };
    let stage =
        |push: &mut dyn FnMut(String, Vec<usize>, usize) -> usize, name: &str, ci: usize, co: usize, taps: Taps| {
            let nt = taps.count();
            StageIdx {
                w: push(format!("{name}.conv.w"), vec![co, ci, nt], ci * nt),
                gamma: push(format!("{name}.norm.gamma"), vec![co], 0),
                beta: push(format!("{name}.norm.beta"), vec![co], 0),
                in_ch: ci,
                out_ch: co,
                taps,
            }
        };
    let d = cfg.depth;
    let mut enc = Vec::with_capacity(2 * d + 1);
    enc.push(stage(&mut push, "enc0", 1, cfg.width(0), Taps::Same3));
    for l in 1..=d {
        enc.push(stage(&mut push, &format!("down{l}"), cfg.width(l - 1), cfg.width(l), Taps::Down2));
        enc.push(stage(&mut push, &format!("enc{l}"), cfg.width(l), cfg.width(l), Taps::Same3));
    }
    let mut up = Vec::with_capacity(d);
    let mut dec = Vec::with_capacity(d);
    for l in (0..d).rev() {
        let (ci, co) = (cfg.width(l + 1), cfg.width(l));
        up.push(UpIdx {
            w: push(format!("up{l}.w"), vec![ci, co, 8], ci),
            b: push(format!("up{l}.b"), vec![co], 0),
            in_ch: ci,
            out_ch: co,
        });
        dec.push(stage(&mut push, &format!("dec{l}"), 2 * co, co, Taps::Same3));
    }
    let c_out = cfg.num_classes + 1;
    let head_w = push("head.w".into(), vec![c_out, cfg.width(0), 1], cfg.width(0));
    let head_b = push("head.b".into(), vec![c_out], 0);
    let fd = cfg.cls_input_dim();
    let fc1_w = push("cls.fc1.w".into(), vec![cfg.cls_hidden, fd], fd);
    let fc1_b = push("cls.fc1.b".into(), vec![cfg.cls_hidden], 0);
    let fc2_w = push("cls.fc2.w".into(), vec![cfg.n_locations, cfg.cls_hidden], cfg.cls_hidden);
    let fc2_b = push("cls.fc2.b".into(), vec![cfg.n_locations], 0);
    (Layout { enc, up, dec, head_w, head_b, fc1_w, fc1_b, fc2_w, fc2_b }, specs)
}

/// Student or teacher parameters.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    config: NetworkConfig,
    layout: Layout,
    tensors: Vec<ParamTensor>,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Fan-in scaled (He) uniform initialisation: weights `U(−b, b)` with
/// `b = √(6 / fan_in)`, i.e. standard deviation `√(2 / fan_in)`. Norm gains
/// start at 1, all shifts and biases at 0.
pub fn init_params(config: &NetworkConfig, rng: &mut impl rand::Rng) -> Result<NetworkParams> {
    config.validate()?;
    let (layout, specs) = tensor_specs(config);
    let tensors = specs
        .into_iter()
        .map(|(name, shape, fan_in)| {
            let n: usize = shape.iter().product();
            let data = if fan_in > 0 {
                let b = libm::sqrtf(6.0 / fan_in as f32);
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            } else if name.ends_with("gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            ParamTensor { name, shape, data }
        })
        .collect();
    Ok(NetworkParams { config: config.clone(), layout, tensors })
}

impl NetworkParams {
    /// Rebuilds parameters from stored tensors, checking names and shapes.
    pub fn from_tensors(config: NetworkConfig, tensors: Vec<ParamTensor>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = tensor_specs(&config);
        if specs.len() != tensors.len() {
            bail!(Consistency, "expected {} parameter tensors, got {}", specs.len(), tensors.len());
        }
        for ((name, shape, _), t) in specs.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                bail!(Consistency, "parameter {} {:?} does not match expected {name} {shape:?}", t.name, t.shape);
            }
        }
        Ok(Self { config, layout, tensors })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    fn t(&self, i: usize) -> &[f32] {
        &self.tensors[i].data
    }
}

/// Encoder bottleneck features `(D, w', h', l')` of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl FeatureBlock {
    /// Average over `g³` equal cells, channel-major then cell index
    /// `(cz·g + cy)·g + cx`.
    pub fn pooled(&self, g: usize) -> Result<Vec<f32>> {
        if g == 0 || !self.dims.divisible_by(g) {
            bail!(Dimension, "features {} cannot be pooled to a {g}³ grid", self.dims);
        }
        let n = self.dims.len();
        let cell = self.dims.div(g);
        let mut out = vec![0.0f64; self.channels * g * g * g];
        for c in 0..self.channels {
            for (i, &v) in self.data[c * n..(c + 1) * n].iter().enumerate() {
                let [x, y, z] = self.dims.coords(i);
                out[c * g * g * g + ((z / cell.l) * g + y / cell.h) * g + x / cell.w] += v as f64;
            }
        }
        let size = cell.len() as f64;
        Ok(out.into_iter().map(|v| (v / size) as f32).collect())
    }
}

/// Gradient buffers shaped like a [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(p: &NetworkParams) -> Self {
        Self { tensors: p.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// How far a training forward pass goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Full,
    EncoderOnly,
}

/// Saved activations of one training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    level_dims: Vec<Dims>,
    input: Vec<f32>,
    enc: Vec<NormActCache>,
    concat: Vec<Vec<f32>>,
    dec: Vec<NormActCache>,
    logits: Option<Vec<f32>>,
}

impl Tape {
    pub fn input_dims(&self) -> Dims {
        self.level_dims[0]
    }

    /// Raw logits (`C+1` channels), present for [`ForwardMode::Full`].
    pub fn logits(&self) -> Option<&[f32]> {
        self.logits.as_deref()
    }

    pub fn bottleneck(&self) -> &[f32] {
        &self.enc.last().expect("encoder stages").out
    }

    pub fn bottleneck_dims(&self) -> Dims {
        *self.level_dims.last().expect("levels")
    }
}

fn stage_forward(p: &NetworkParams, s: &StageIdx, input: &[f32], in_dims: Dims) -> (NormActCache, Dims) {
    let (pre, od) = nn::conv_forward(input, s.in_ch, in_dims, p.t(s.w), &[], s.out_ch, s.taps);
    (nn::norm_act_forward(&pre, s.out_ch, od.len(), p.t(s.gamma), p.t(s.beta), p.config.norm == Norm::Instance), od)
}

#[allow(clippy::too_many_arguments)]
fn stage_backward(
    p: &NetworkParams,
    s: &StageIdx,
    input: &[f32],
    in_dims: Dims,
    cache: &NormActCache,
    gout: &[f32],
    g: &mut Grads,
    gin: Option<&mut [f32]>,
) {
    let od = s.taps.out_dims(in_dims);
    let mut gpre = vec![0.0f32; s.out_ch * od.len()];
    {
        let (lo, hi) = g.tensors.split_at_mut(s.beta);
        let (ggamma, gbeta) = (&mut lo[s.gamma], &mut hi[0]);
        nn::norm_act_backward(
            cache,
            s.out_ch,
            od.len(),
            p.t(s.gamma),
            gout,
            ggamma,
            gbeta,
            &mut gpre,
            p.config.norm == Norm::Instance,
        );
    }
    nn::conv_backward(input, s.in_ch, in_dims, p.t(s.w), s.out_ch, s.taps, &gpre, &mut g.tensors[s.w], &mut [], gin);
}

/// Training forward pass keeping every activation needed by [`backward`].
pub fn forward_train(p: &NetworkParams, input: &Volume, mode: ForwardMode) -> Result<Tape> {
    let cfg = &p.config;
    cfg.check_input(input.dims())?;
    let lay = &p.layout;
    let mut level_dims = vec![input.dims()];
    let mut enc: Vec<NormActCache> = Vec::with_capacity(lay.enc.len());
    let mut dims = input.dims();
    for (k, s) in lay.enc.iter().enumerate() {
        let src: &[f32] = if k == 0 { input.data() } else { &enc[k - 1].out };
        let (cache, od) = stage_forward(p, s, src, dims);
        if od != dims {
            level_dims.push(od);
        }
        dims = od;
        enc.push(cache);
    }
    let mut tape =
        Tape { level_dims, input: input.data().to_vec(), enc, concat: Vec::new(), dec: Vec::new(), logits: None };
    if mode == ForwardMode::EncoderOnly {
        return Ok(tape);
    }
    let d = cfg.depth;
    for k in 0..d {
        let l = d - 1 - k;
        let u = &lay.up[k];
        let src: &[f32] = if k == 0 { &tape.enc[2 * d].out } else { &tape.dec[k - 1].out };
        let (mut cat, od) = nn::up_forward(src, u.in_ch, tape.level_dims[l + 1], p.t(u.w), p.t(u.b), u.out_ch);
        cat.extend_from_slice(&tape.enc[2 * l].out);
        let (cache, _) = stage_forward(p, &lay.dec[k], &cat, od);
        tape.concat.push(cat);
        tape.dec.push(cache);
    }
    let last = &tape.dec[d - 1].out;
    let (logits, _) = nn::conv_forward(
        last,
        cfg.width(0),
        tape.level_dims[0],
        p.t(lay.head_w),
        p.t(lay.head_b),
        cfg.num_classes + 1,
        Taps::Point,
    );
    tape.logits = Some(logits);
    Ok(tape)
}

/// Back-propagates logit and/or bottleneck gradients through a tape,
/// accumulating parameter gradients into `g`.
pub fn backward(
    p: &NetworkParams,
    tape: &Tape,
    grad_logits: Option<&[f32]>,
    grad_bottleneck: Option<&[f32]>,
    g: &mut Grads,
) {
    let cfg = &p.config;
    let lay = &p.layout;
    let d = cfg.depth;
    let ld = &tape.level_dims;
    let mut genc: Vec<Vec<f32>> = tape.enc.iter().map(|c| vec![0.0f32; c.out.len()]).collect();
    if let Some(gb) = grad_bottleneck {
        nn::axpy(1.0, gb, &mut genc[2 * d]);
    }
    if let Some(gl) = grad_logits {
        assert!(!tape.dec.is_empty(), "logit gradients need a full forward pass");
        let last = &tape.dec[d - 1].out;
        let mut gdec = vec![0.0f32; last.len()];
        {
            let (lo, hi) = g.tensors.split_at_mut(lay.head_b);
            nn::conv_backward(
                last,
                cfg.width(0),
                ld[0],
                p.t(lay.head_w),
                cfg.num_classes + 1,
                Taps::Point,
                gl,
                &mut lo[lay.head_w],
                &mut hi[0],
                Some(&mut gdec),
            );
        }
        for k in (0..d).rev() {
            let l = d - 1 - k;
            let s = &lay.dec[k];
            let mut gcat = vec![0.0f32; tape.concat[k].len()];
            stage_backward(p, s, &tape.concat[k], ld[l], &tape.dec[k], &gdec, g, Some(&mut gcat));
            let half = s.out_ch * ld[l].len();
            nn::axpy(1.0, &gcat[half..], &mut genc[2 * l]);
            let u = &lay.up[k];
            let src: &[f32] = if k == 0 { &tape.enc[2 * d].out } else { &tape.dec[k - 1].out };
            let mut gsrc = vec![0.0f32; src.len()];
            {
                let (lo, hi) = g.tensors.split_at_mut(u.b);
                nn::up_backward(
                    src,
                    u.in_ch,
                    ld[l + 1],
                    p.t(u.w),
                    u.out_ch,
                    &gcat[..half],
                    &mut lo[u.w],
                    &mut hi[0],
                    &mut gsrc,
                );
            }
            if k == 0 {
                nn::axpy(1.0, &gsrc, &mut genc[2 * d]);
            } else {
                gdec = gsrc;
            }
        }
    }
    for k in (0..lay.enc.len()).rev() {
        let s = &lay.enc[k];
        // down_l (k = 2l−1) reads level l−1, enc_l (k = 2l) reads level l.
        let in_dims = ld[k / 2];
        let gout = core::mem::take(&mut genc[k]);
        if k == 0 {
            stage_backward(p, s, &tape.input, in_dims, &tape.enc[0], &gout, g, None);
        } else {
            let (before, _) = genc.split_at_mut(k);
            stage_backward(p, s, &tape.enc[k - 1].out, in_dims, &tape.enc[k], &gout, g, Some(&mut before[k - 1]));
        }
    }
}

/// Segmentation logits and bottleneck features for one input.
pub fn forward_seg(p: &NetworkParams, v: &Volume) -> Result<(ProbMap, FeatureBlock)> {
    let tape = forward_train(p, v, ForwardMode::Full)?;
    let c = p.config.num_classes + 1;
    let feats = FeatureBlock {
        channels: p.config.feature_dim(),
        dims: tape.bottleneck_dims(),
        data: tape.bottleneck().to_vec(),
    };
    let logits = ProbMap::new(c, v.dims(), ProbKind::Logits, tape.logits.expect("full pass"))?;
    Ok((logits, feats))
}

/// Inputs and hidden pre-activations saved by [`cls_forward`].
#[derive(Debug, Clone)]
pub struct ClsCache {
    pooled: Vec<f32>,
    hidden: Vec<f32>,
    dims: Dims,
}

/// Location logits (length `N³`) from bottleneck features.
pub fn cls_forward(p: &NetworkParams, f: &FeatureBlock) -> Result<(Vec<f32>, ClsCache)> {
    let cfg = &p.config;
    if f.channels != cfg.feature_dim() || f.data.len() != f.channels * f.dims.len() {
        bail!(Dimension, "feature block has {} channels, head expects {}", f.channels, cfg.feature_dim());
    }
    let pooled = f.pooled(cfg.cls_grid)?;
    let lay = &p.layout;
    let (fd, hd, no) = (cfg.cls_input_dim(), cfg.cls_hidden, cfg.n_locations);
    let (w1, b1, w2, b2) = (p.t(lay.fc1_w), p.t(lay.fc1_b), p.t(lay.fc2_w), p.t(lay.fc2_b));
    let hidden: Vec<f32> = (0..hd).map(|h| b1[h] + nn::dot(&w1[h * fd..(h + 1) * fd], &pooled)).collect();
    let act: Vec<f32> = hidden.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
    let logits = (0..no).map(|o| b2[o] + nn::dot(&w2[o * hd..(o + 1) * hd], &act)).collect();
    Ok((logits, ClsCache { pooled, hidden, dims: f.dims }))
}

/// Backward of [`cls_forward`]; returns the gradient w.r.t. the bottleneck
/// activations (each pooled gradient spread evenly over its cell).
pub fn cls_backward(p: &NetworkParams, cache: &ClsCache, grad_logits: &[f32], g: &mut Grads) -> Vec<f32> {
    let cfg = &p.config;
    let lay = &p.layout;
    let (fd, hd, no) = (cfg.cls_input_dim(), cfg.cls_hidden, cfg.n_locations);
    let act: Vec<f32> = cache.hidden.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
    let w2 = p.t(lay.fc2_w);
    let mut gact = vec![0.0f32; hd];
    for o in 0..no {
        let go = grad_logits[o];
        g.tensors[lay.fc2_b][o] += go;
        nn::axpy(go, &act, &mut g.tensors[lay.fc2_w][o * hd..(o + 1) * hd]);
        nn::axpy(go, &w2[o * hd..(o + 1) * hd], &mut gact);
    }
    let w1 = p.t(lay.fc1_w);
    let mut gpool = vec![0.0f32; fd];
    for h in 0..hd {
        let gh = gact[h] * if cache.hidden[h] > 0.0 { 1.0 } else { LEAKY_SLOPE };
        g.tensors[lay.fc1_b][h] += gh;
        nn::axpy(gh, &cache.pooled, &mut g.tensors[lay.fc1_w][h * fd..(h + 1) * fd]);
        nn::axpy(gh, &w1[h * fd..(h + 1) * fd], &mut gpool);
    }
    let gr = cfg.cls_grid;
    let dims = cache.dims;
    let cell = dims.div(gr);
    let n = dims.len();
    let scale = 1.0 / cell.len() as f32;
    let mut out = vec![0.0f32; cfg.feature_dim() * n];
    for (c, chan) in out.chunks_mut(n).enumerate() {
        for (i, v) in chan.iter_mut().enumerate() {
            let [x, y, z] = dims.coords(i);
            *v = gpool[c * gr * gr * gr + ((z / cell.l) * gr + y / cell.h) * gr + x / cell.w] * scale;
        }
    }
    out
}

/// Location logits (length `N³`) for the features of one cube.
pub fn classify_location(p: &NetworkParams, f: &FeatureBlock) -> Result<Vec<f32>> {
    Ok(cls_forward(p, f)?.0)
}

/// `θ_t ← decay·θ_t + (1 − decay)·θ_s` for every parameter.
pub fn ema_update(teacher: &mut NetworkParams, student: &NetworkParams, decay: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        bail!(Config, "EMA decay {decay} outside [0, 1]");
    }
    if !teacher.same_shape(student) {
        bail!(Consistency, "teacher and student shapes differ");
    }
    let keep = 1.0 - decay;
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = decay * *a + keep * b;
        }
    }
    Ok(())
}
