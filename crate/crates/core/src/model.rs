//! 3D convolutional VAE with optional age conditioning or age regression.
//!
//! Encoder: `L` stride-2 kernel-3 convolutions with LeakyReLU, flattened into
//! two affine heads for `z_mu` and `z_log_var`. Decoder: an affine layer back
//! to the last encoder feature shape, `L` stride-2 transposed convolutions
//! with LeakyReLU, and a final stride-1 convolution with linear output.
//!
//! * [`Variant::Vae`] ignores age.
//! * [`Variant::VaeAc`] multiplies the sampled latent by the scaled
//!   chronological age before decoding.
//! * [`Variant::VaeAp`] adds one affine layer from the flattened encoder
//!   features to a predicted age; the reconstruction path is untouched.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, ConvGeom};
use crate::seed;
use crate::volume::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vae,
    VaeAc,
    VaeAp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vae, Variant::VaeAc, Variant::VaeAp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Vae => "vae",
            Variant::VaeAc => "vae_ac",
            Variant::VaeAp => "vae_ap",
        }
    }

    /// Accepts both `vae_ac` and `vae-ac` spellings.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vae" => Some(Variant::Vae),
            "vae_ac" | "vae-ac" => Some(Variant::VaeAc),
            "vae_ap" | "vae-ap" => Some(Variant::VaeAp),
            _ => None,
        }
    }

    pub fn predicts_age(self) -> bool {
        self == Variant::VaeAp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_shape: Shape,
    pub latent_dim: usize,
    /// Output channels of each encoder stage.
    pub channels: Vec<usize>,
    /// Ages in years are divided by this before entering the network.
    pub age_normalizer: f64,
}

impl ModelConfig {
    /// 32³ inputs, 128 latents.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            input_shape: Shape::new(32, 32, 32),
            latent_dim: 128,
            channels: vec![16, 32, 64, 128],
            age_normalizer: 100.0,
        }
    }

    /// 64×77×66 inputs, 2048 latents.
    pub fn paper(variant: Variant) -> Self {
        Self {
            input_shape: Shape::new(64, 77, 66),
            latent_dim: 2048,
            ..Self::desk(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Validation("latent_dim must be at least 1".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Validation(format!("channels {:?} must be nonempty and positive", self.channels)));
        }
        if self.input_shape.0.contains(&0) {
            return Err(Error::Validation(format!("input shape {} has a zero extent", self.input_shape)));
        }
        if !(self.age_normalizer.is_finite() && self.age_normalizer > 0.0) {
            return Err(Error::Validation(format!("age_normalizer {} must be positive", self.age_normalizer)));
        }
        Ok(())
    }

    /// Spatial extents before the first stage and after every encoder stage.
    pub fn encoder_dims(&self) -> Vec<[usize; 3]> {
        let mut dims = vec![self.input_shape.0];
        for _ in &self.channels {
            let last = *dims.last().expect("seeded");
            dims.push(last.map(|d| nn::conv_out_dim(d, 2, 1)));
        }
        dims
    }

    /// Length of the flattened final encoder feature map.
    pub fn feature_len(&self) -> usize {
        let dims = self.encoder_dims();
        self.channels.last().expect("validated") * dims.last().expect("seeded").iter().product::<usize>()
    }
}

/// Parameter block of one layer: weight then bias, contiguous.
#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    start: usize,
    weight_len: usize,
    bias_len: usize,
}

impl Slot {
    fn weight(&self) -> Range<usize> {
        self.start..self.start + self.weight_len
    }

    fn bias(&self) -> Range<usize> {
        self.start + self.weight_len..self.end()
    }

    fn end(&self) -> usize {
        self.start + self.weight_len + self.bias_len
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    enc: Vec<(ConvGeom, Slot)>,
    mu: Slot,
    logvar: Slot,
    dec_fc: Slot,
    dec: Vec<(ConvGeom, Slot)>,
    out: (ConvGeom, Slot),
    /// Always last so the other variants' parameters form a prefix.
    age: Option<Slot>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut cursor = 0usize;
        let mut slot = |name: String, w: usize, b: usize| {
            let s = Slot {
                name,
                start: cursor,
                weight_len: w,
                bias_len: b,
            };
            cursor = s.end();
            s
        };
        let dims = cfg.encoder_dims();
        let l = cfg.channels.len();
        let mut enc = Vec::with_capacity(l);
        let mut cin = 1;
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let g = ConvGeom::conv(cin, cout, dims[s], 2, 1);
            enc.push((g, slot(format!("enc.{s}"), g.weight_len(), cout)));
            cin = cout;
        }
        let feat = cfg.feature_len();
        let mu = slot("mu".into(), cfg.latent_dim * feat, cfg.latent_dim);
        let logvar = slot("logvar".into(), cfg.latent_dim * feat, cfg.latent_dim);
        let dec_fc = slot("dec.fc".into(), feat * cfg.latent_dim, feat);
        let mut dec = Vec::with_capacity(l);
        for t in 0..l {
            let small = cfg.channels[l - 1 - t];
            let big = if t + 1 < l { cfg.channels[l - 2 - t] } else { cfg.channels[0] };
            let g = ConvGeom {
                cin: big,
                cout: small,
                in_dims: dims[l - 1 - t],
                out_dims: dims[l - t],
                stride: 2,
                pad: 1,
            };
            dec.push((g, slot(format!("dec.{t}"), g.weight_len(), big)));
        }
        let og = ConvGeom::conv(cfg.channels[0], 1, dims[0], 1, 1);
        let out = (og, slot("out".into(), og.weight_len(), 1));
        let age = cfg.variant.predicts_age().then(|| slot("age".into(), feat, 1));
        Self {
            enc,
            mu,
            logvar,
            dec_fc,
            dec,
            out,
            age,
            total: cursor,
        }
    }

    fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.enc
            .iter()
            .map(|(_, s)| s)
            .chain([&self.mu, &self.logvar, &self.dec_fc])
            .chain(self.dec.iter().map(|(_, s)| s))
            .chain(core::iter::once(&self.out.1))
            .chain(self.age.as_ref())
    }
}

/// Posterior parameters `q(z|x) = N(z_mu, exp(z_log_var / 2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub z_mu: Vec<f64>,
    pub z_log_var: Vec<f64>,
}

impl Posterior {
    pub fn sigma(&self) -> Vec<f64> {
        self.z_log_var.iter().map(|lv| libm::exp(lv / 2.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub z_mu: Vec<f64>,
    pub z_log_var: Vec<f64>,
    pub z: Vec<f64>,
    /// Age-conditioned latent, `vae_ac` only.
    pub z_tilde: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub x_tilde: Vec<f64>,
    pub latent: LatentStats,
    /// Predicted age in years, `vae_ap` only.
    pub a_p: Option<f64>,
}

/// `z = z_mu + exp(z_log_var / 2) * noise`.
pub fn reparameterize(posterior: &Posterior, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != posterior.z_mu.len() {
        return Err(shape_err(
            format!("noise of length {}", posterior.z_mu.len()),
            format!("length {}", noise.len()),
        ));
    }
    Ok(posterior
        .z_mu
        .iter()
        .zip(&posterior.z_log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + libm::exp(lv / 2.0) * e)
        .collect())
}

/// Elementwise `z * (a_c / age_normalizer)`.
pub fn condition_latent(z: &[f64], a_c_years: f64, age_normalizer: f64) -> Result<Vec<f64>> {
    if !(a_c_years.is_finite() && a_c_years > 0.0) {
        return Err(Error::Validation(format!("chronological age {a_c_years} must be positive")));
    }
    if !(age_normalizer.is_finite() && age_normalizer > 0.0) {
        return Err(Error::Validation(format!("age_normalizer {age_normalizer} must be positive")));
    }
    let scale = a_c_years / age_normalizer;
    Ok(z.iter().map(|v| v * scale).collect())
}

#[derive(Debug, Clone)]
struct EncoderTrace {
    /// Pre-activations per stage.
    pre: Vec<Vec<f64>>,
    /// Post-activations per stage; the last one is the feature map.
    act: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct DecoderTrace {
    z: Vec<f64>,
    fc_pre: Vec<f64>,
    /// Input to each transposed stage (the first is the activated fc output).
    stage_in: Vec<Vec<f64>>,
    stage_pre: Vec<Vec<f64>>,
    /// Input to the output convolution.
    out_in: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    x: Vec<f64>,
    enc: EncoderTrace,
    noise: Vec<f64>,
    /// Multiplier applied to `z` before decoding (1 unless `vae_ac`).
    age_factor: f64,
    dec: DecoderTrace,
}

/// Loss gradients with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub x_tilde: Vec<f64>,
    pub z_mu: Vec<f64>,
    pub z_log_var: Vec<f64>,
    /// d loss / d a_p, with `a_p` in years.
    pub a_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl Vae {
    /// Randomly initialised model; He-normal convolutions, small heads.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng(seed, &[seed::tag::INIT]);
        let mut fill = |params: &mut [f64], range: Range<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[range] {
                *p = dist.sample(&mut rng);
            }
        };
        let he = |fan_in: usize| libm::sqrt(2.0 / fan_in as f64);
        let feat = cfg.feature_len();
        for (g, s) in &layout.enc {
            fill(&mut params, s.weight(), he(g.col_rows()));
        }
        fill(&mut params, layout.mu.weight(), libm::sqrt(1.0 / feat as f64));
        fill(&mut params, layout.logvar.weight(), 0.1 * libm::sqrt(1.0 / feat as f64));
        fill(&mut params, layout.dec_fc.weight(), he(cfg.latent_dim));
        // A stride-s transposed conv feeds each output voxel about 27/s³
        // taps per input channel.
        for (g, s) in &layout.dec {
            let taps = (g.cout * nn::KERNEL_VOLUME / (g.stride * g.stride * g.stride)).max(1);
            fill(&mut params, s.weight(), he(taps));
        }
        let (og, os) = &layout.out;
        fill(&mut params, os.weight(), libm::sqrt(1.0 / og.col_rows() as f64));
        if let Some(a) = &layout.age {
            fill(&mut params, a.weight(), 0.1 * libm::sqrt(1.0 / feat as f64));
        }
        Ok(Self { cfg, layout, params })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_params(cfg: ModelConfig, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(shape_err(
                format!("{} parameters", layout.total),
                format!("{} parameters", params.len()),
            ));
        }
        Ok(Self { cfg, layout, params })
    }

    /// The same weights under another variant; an age head is added with
    /// zero weights or dropped as needed.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let cfg = ModelConfig {
            variant,
            ..self.cfg.clone()
        };
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let shared = self.layout.age.as_ref().map_or(self.layout.total, |a| a.start);
        params[..shared].copy_from_slice(&self.params[..shared]);
        if let (Some(src), Some(dst)) = (&self.layout.age, &layout.age) {
            params[dst.start..dst.end()].copy_from_slice(&self.params[src.start..src.end()]);
        }
        Self { cfg, layout, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Names of all parameter tensors, `<layer>.weight` / `<layer>.bias`.
    pub fn tensor_names(&self) -> Vec<String> {
        self.layout
            .slots()
            .flat_map(|s| [format!("{}.weight", s.name), format!("{}.bias", s.name)])
            .collect()
    }

    fn tensor_range(&self, name: &str) -> Option<Range<usize>> {
        let (layer, kind) = name.rsplit_once('.')?;
        let slot = self.layout.slots().find(|s| s.name == layer)?;
        match kind {
            "weight" => Some(slot.weight()),
            "bias" => Some(slot.bias()),
            _ => None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensor_range(name).map(|r| &self.params[r])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.tensor_range(name).map(move |r| &mut self.params[r])
    }

    /// Sets the age-head bias so an untrained model predicts `years`.
    pub fn set_age_bias(&mut self, years: f64) -> Result<()> {
        let norm = self.cfg.age_normalizer;
        let b = self
            .tensor_mut("age.bias")
            .ok_or(Error::UnsupportedVariant { op: "set_age_bias", variant: "non-age" })?;
        b[0] = years / norm;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let shape = self.cfg.input_shape;
        if x.len() != shape.len() {
            return Err(shape_err(
                format!("input of shape {shape} ({} voxels)", shape.len()),
                format!("{} voxels", x.len()),
            ));
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.cfg.latent_dim {
            return Err(shape_err(
                format!("latent of length {}", self.cfg.latent_dim),
                format!("length {}", z.len()),
            ));
        }
        Ok(())
    }

    fn w(&self, s: &Slot) -> &[f64] {
        &self.params[s.weight()]
    }

    fn b(&self, s: &Slot) -> &[f64] {
        &self.params[s.bias()]
    }

    fn run_encoder(&self, x: &[f64]) -> EncoderTrace {
        let mut pre = Vec::with_capacity(self.layout.enc.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.layout.enc.len());
        for (g, s) in &self.layout.enc {
            let input = act.last().map_or(x, |v| v.as_slice());
            let p = g.conv_forward(input, self.w(s), self.b(s));
            act.push(nn::leaky_relu(&p));
            pre.push(p);
        }
        EncoderTrace { pre, act }
    }

    fn heads(&self, features: &[f64]) -> Posterior {
        Posterior {
            z_mu: nn::linear_forward(features, self.w(&self.layout.mu), self.b(&self.layout.mu)),
            z_log_var: nn::linear_forward(features, self.w(&self.layout.logvar), self.b(&self.layout.logvar)),
        }
    }

    /// Flattened final encoder feature map, the input of every head.
    pub fn encode_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run_encoder(x).act.pop().expect("at least one stage"))
    }

    /// Posterior parameters for one input volume.
    pub fn encode(&self, x: &[f64]) -> Result<Posterior> {
        let features = self.encode_features(x)?;
        Ok(self.heads(&features))
    }

    /// Age regression from encoder features, in years.
    pub fn predict_age(&self, features: &[f64]) -> Result<f64> {
        let slot = self.layout.age.as_ref().ok_or(Error::UnsupportedVariant {
            op: "predict_age",
            variant: self.cfg.variant.as_str(),
        })?;
        if features.len() != self.cfg.feature_len() {
            return Err(shape_err(
                format!("{} features", self.cfg.feature_len()),
                format!("{}", features.len()),
            ));
        }
        let raw = nn::linear_forward(features, self.w(slot), self.b(slot))[0];
        Ok(raw * self.cfg.age_normalizer)
    }

    fn run_decoder(&self, z: &[f64]) -> (DecoderTrace, Vec<f64>) {
        let fc_pre = nn::linear_forward(z, self.w(&self.layout.dec_fc), self.b(&self.layout.dec_fc));
        let mut stage_in = vec![nn::leaky_relu(&fc_pre)];
        let mut stage_pre = Vec::with_capacity(self.layout.dec.len());
        for (g, s) in &self.layout.dec {
            let p = g.tconv_forward(stage_in.last().expect("seeded"), self.w(s), self.b(s));
            stage_in.push(nn::leaky_relu(&p));
            stage_pre.push(p);
        }
        let out_in = stage_in.pop().expect("seeded");
        let (og, os) = &self.layout.out;
        let x_tilde = og.conv_forward(&out_in, self.w(os), self.b(os));
        let trace = DecoderTrace {
            z: z.to_vec(),
            fc_pre,
            stage_in,
            stage_pre,
            out_in,
        };
        (trace, x_tilde)
    }

    /// Reconstruction for a (possibly conditioned) latent.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        Ok(self.run_decoder(z).1)
    }

    /// Gradient of `<d_x_tilde, decode(z)>` with respect to `z`.
    pub fn decode_vjp(&self, z: &[f64], d_x_tilde: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        self.check_input(d_x_tilde)?;
        let (trace, _) = self.run_decoder(z);
        let mut scratch = vec![0.0; self.layout.total];
        Ok(self.decoder_backward(&trace, d_x_tilde, &mut scratch))
    }

    fn age_factor(&self, a_c_years: Option<f64>) -> Result<f64> {
        match self.cfg.variant {
            Variant::VaeAc => {
                let a = a_c_years.ok_or_else(|| {
                    Error::Validation("variant vae_ac requires the chronological age".into())
                })?;
                if !(a.is_finite() && a > 0.0) {
                    return Err(Error::Validation(format!("chronological age {a} must be positive")));
                }
                Ok(a / self.cfg.age_normalizer)
            }
            _ => Ok(1.0),
        }
    }

    /// encode → reparameterize → condition (vae_ac) → decode, plus the age
    /// prediction for vae_ap.
    pub fn forward(&self, x: &[f64], a_c_years: Option<f64>, noise: &[f64]) -> Result<ForwardOutput> {
        self.forward_traced(x, a_c_years, noise).map(|(out, _)| out)
    }

    pub fn forward_traced(&self, x: &[f64], a_c_years: Option<f64>, noise: &[f64]) -> Result<(ForwardOutput, Trace)> {
        self.check_input(x)?;
        let age_factor = self.age_factor(a_c_years)?;
        let enc = self.run_encoder(x);
        let features = enc.act.last().expect("at least one stage");
        let posterior = self.heads(features);
        let z = reparameterize(&posterior, noise)?;
        let z_tilde = match self.cfg.variant {
            Variant::VaeAc => Some(condition_latent(&z, a_c_years.expect("checked"), self.cfg.age_normalizer)?),
            _ => None,
        };
        let a_p = match self.cfg.variant {
            Variant::VaeAp => Some(self.predict_age(features)?),
            _ => None,
        };
        let (dec, x_tilde) = self.run_decoder(z_tilde.as_deref().unwrap_or(&z));
        let out = ForwardOutput {
            x_tilde,
            latent: LatentStats {
                z_mu: posterior.z_mu,
                z_log_var: posterior.z_log_var,
                z,
                z_tilde,
            },
            a_p,
        };
        let trace = Trace {
            x: x.to_vec(),
            enc,
            noise: noise.to_vec(),
            age_factor,
            dec,
        };
        Ok((out, trace))
    }

    fn split_grad<'g>(grad: &'g mut [f64], s: &Slot) -> (&'g mut [f64], &'g mut [f64]) {
        grad[s.start..s.end()].split_at_mut(s.weight_len)
    }

    /// Returns d/dz of the decoder input; accumulates decoder parameter grads.
    fn decoder_backward(&self, t: &DecoderTrace, d_x_tilde: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (og, os) = &self.layout.out;
        let (gw, gb) = Self::split_grad(grad, os);
        let mut d = og
            .conv_backward(&t.out_in, self.w(os), d_x_tilde, gw, gb, true)
            .expect("input grad requested");
        for (i, (g, s)) in self.layout.dec.iter().enumerate().rev() {
            nn::leaky_relu_backward(&t.stage_pre[i], &mut d);
            let (gw, gb) = Self::split_grad(grad, s);
            d = g
                .tconv_backward(&t.stage_in[i], self.w(s), &d, gw, gb, true)
                .expect("input grad requested");
        }
        nn::leaky_relu_backward(&t.fc_pre, &mut d);
        let mut dz = vec![0.0; t.z.len()];
        let (gw, gb) = Self::split_grad(grad, &self.layout.dec_fc);
        nn::linear_backward(&t.z, self.w(&self.layout.dec_fc), &d, gw, gb, Some(&mut dz));
        dz
    }

    /// Backpropagates output gradients, adding `weight *` the parameter
    /// gradient into `grad`.
    pub fn backward(&self, trace: &Trace, g: &OutputGrads, weight: f64, grad: &mut [f64]) -> Result<()> {
        if grad.len() != self.layout.total {
            return Err(shape_err(
                format!("{} gradient slots", self.layout.total),
                format!("{}", grad.len()),
            ));
        }
        let scaled = |v: &[f64]| v.iter().map(|x| x * weight).collect::<Vec<f64>>();
        let dz_dec = self.decoder_backward(&trace.dec, &scaled(&g.x_tilde), grad);

        let features = trace.enc.act.last().expect("at least one stage");
        let lv = nn::linear_forward(features, self.w(&self.layout.logvar), self.b(&self.layout.logvar));
        let mut d_mu = scaled(&g.z_mu);
        let mut d_lv = scaled(&g.z_log_var);
        for i in 0..d_mu.len() {
            let dz = dz_dec[i] * trace.age_factor;
            d_mu[i] += dz;
            d_lv[i] += dz * trace.noise[i] * 0.5 * libm::exp(lv[i] / 2.0);
        }

        let mut d_feat = vec![0.0; features.len()];
        let (gw, gb) = Self::split_grad(grad, &self.layout.mu);
        nn::linear_backward(features, self.w(&self.layout.mu), &d_mu, gw, gb, Some(&mut d_feat));
        let (gw, gb) = Self::split_grad(grad, &self.layout.logvar);
        nn::linear_backward(features, self.w(&self.layout.logvar), &d_lv, gw, gb, Some(&mut d_feat));
        if let Some(slot) = &self.layout.age {
            let d_raw = [g.a_p * weight * self.cfg.age_normalizer];
            let (gw, gb) = Self::split_grad(grad, slot);
            nn::linear_backward(features, self.w(slot), &d_raw, gw, gb, Some(&mut d_feat));
        }

        let mut d = d_feat;
        for (s, (geom, slot)) in self.layout.enc.iter().enumerate().rev() {
            nn::leaky_relu_backward(&trace.enc.pre[s], &mut d);
            let input = if s == 0 { &trace.x } else { &trace.enc.act[s - 1] };
            let (gw, gb) = Self::split_grad(grad, slot);
            match geom.conv_backward(input, self.w(slot), &d, gw, gb, s > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_shape: Shape::new(8, 7, 6),
            latent_dim: 6,
            channels: vec![3, 4],
            age_normalizer: 100.0,
        }
    }

    fn input(cfg: &ModelConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.input_shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn shapes_and_names() {
        for variant in Variant::ALL {
            let m = Vae::new(tiny(variant), 1).unwrap();
            let out = m.forward(&input(m.config(), 2), Some(40.0), &noise(6, 3)).unwrap();
            assert_eq!(out.x_tilde.len(), 8 * 7 * 6);
            assert_eq!(out.latent.z_mu.len(), 6);
            assert_eq!(out.a_p.is_some(), variant == Variant::VaeAp);
            assert_eq!(out.latent.z_tilde.is_some(), variant == Variant::VaeAc);
            assert_eq!(m.tensor_names().iter().any(|n| n == "age.weight"), variant == Variant::VaeAp);
        }
        let cfg = ModelConfig::desk(Variant::Vae);
        assert_eq!(cfg.encoder_dims().last().unwrap(), &[2, 2, 2]);
        assert_eq!(cfg.feature_len(), 1024);
        let paper = ModelConfig::paper(Variant::Vae);
        assert_eq!(paper.encoder_dims()[1], [32, 39, 33]);
    }

    #[test]
    fn shape_errors_name_both_sides() {
        let m = Vae::new(tiny(Variant::Vae), 1).unwrap();
        match m.encode(&[0.0; 10]) {
            Err(Error::Shape { expected, received }) => {
                assert!(expected.contains("8x7x6"));
                assert!(received.contains("10"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(m.decode(&[0.0; 5]), Err(Error::Shape { .. })));
        let post = m.encode(&input(m.config(), 1)).unwrap();
        assert!(matches!(reparameterize(&post, &[0.0; 3]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let mut m = Vae::new(tiny(Variant::Vae), 1).unwrap();
        for name in ["mu.weight", "mu.bias", "logvar.weight", "logvar.bias"] {
            m.tensor_mut(name).unwrap().fill(0.0);
        }
        let p = m.encode(&input(m.config(), 5)).unwrap();
        assert!(p.z_mu.iter().all(|&v| v == 0.0));
        assert!(p.z_log_var.iter().all(|&v| v == 0.0));
        assert!(p.sigma().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn latent_length_follows_config() {
        for n_z in [8, 2048] {
            let cfg = ModelConfig {
                latent_dim: n_z,
                ..tiny(Variant::Vae)
            };
            let m = Vae::new(cfg, 1).unwrap();
            let p = m.encode(&input(m.config(), 5)).unwrap();
            assert_eq!(p.z_mu.len(), n_z);
            assert_eq!(p.z_log_var.len(), n_z);
        }
    }

    #[test]
    fn different_inputs_different_means() {
        let m = Vae::new(tiny(Variant::Vae), 1).unwrap();
        let a = m.encode(&input(m.config(), 5)).unwrap();
        let b = m.encode(&input(m.config(), 6)).unwrap();
        assert_ne!(a.z_mu, b.z_mu);
    }

    #[test]
    fn reparameterize_cases() {
        let p = Posterior {
            z_mu: vec![0.5, -1.0, 2.0],
            z_log_var: vec![0.0, 0.0, 0.0],
        };
        assert_eq!(reparameterize(&p, &[0.0; 3]).unwrap(), p.z_mu);
        assert_eq!(reparameterize(&p, &[1.0, 0.0, 0.0]).unwrap(), vec![1.5, -1.0, 2.0]);
    }

    #[test]
    fn reparameterize_monte_carlo() {
        let p = Posterior {
            z_mu: vec![0.3, -2.0],
            z_log_var: vec![(4.0f64).ln(), (0.25f64).ln()],
        };
        let sigma = p.sigma();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                reparameterize(&p, &e).unwrap()
            })
            .collect();
        for i in 0..2 {
            let xs: Vec<f64> = draws.iter().map(|z| z[i]).collect();
            let (mean, std) = crate::stats::mean_std(&xs).unwrap();
            let se_mean = sigma[i] / (n as f64).sqrt();
            let se_std = sigma[i] / (2.0 * n as f64).sqrt();
            assert!((mean - p.z_mu[i]).abs() < 3.0 * se_mean, "mean {mean}");
            assert!((std - sigma[i]).abs() < 3.0 * se_std, "std {std}");
        }
    }

    #[test]
    fn condition_latent_cases() {
        let z = vec![0.5, -0.5];
        assert_eq!(condition_latent(&z, 45.0, 45.0).unwrap(), z);
        let c = condition_latent(&z, 45.0, 100.0).unwrap();
        assert!((c[0] - 0.225).abs() < 1e-15 && (c[1] + 0.225).abs() < 1e-15);
        assert!(matches!(condition_latent(&z, 0.0, 100.0), Err(Error::Validation(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let age = rng.gen_range(1.0..99.0);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let zt = condition_latent(&z, age, 100.0).unwrap();
            assert!((norm(&zt) - age / 100.0 * norm(&z)).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_age_contract() {
        let mut m = Vae::new(tiny(Variant::VaeAp), 1).unwrap();
        m.tensor_mut("age.weight").unwrap().fill(0.0);
        m.tensor_mut("age.bias").unwrap().fill(0.0);
        let f = m.encode_features(&input(m.config(), 3)).unwrap();
        assert_eq!(m.predict_age(&f).unwrap(), 0.0);
        m.set_age_bias(42.0).unwrap();
        assert!((m.predict_age(&f).unwrap() - 42.0).abs() < 1e-12);
        let plain = m.with_variant(Variant::Vae);
        assert!(matches!(plain.predict_age(&f), Err(Error::UnsupportedVariant { .. })));
    }

    #[test]
    fn decode_is_deterministic_with_correct_shape() {
        let m = Vae::new(tiny(Variant::Vae), 1).unwrap();
        let z = noise(6, 4);
        let a = m.decode(&z).unwrap();
        assert_eq!(a.len(), m.config().input_shape.len());
        assert_eq!(a, m.decode(&z).unwrap());
    }

    #[test]
    fn baseline_ignores_age() {
        let m = Vae::new(tiny(Variant::Vae), 1).unwrap();
        let x = input(m.config(), 3);
        let e = noise(6, 4);
        assert_eq!(m.forward(&x, Some(30.0), &e).unwrap(), m.forward(&x, Some(80.0), &e).unwrap());
        assert_eq!(m.forward(&x, None, &e).unwrap(), m.forward(&x, Some(80.0), &e).unwrap());
    }

    #[test]
    fn vae_ac_requires_age() {
        let m = Vae::new(tiny(Variant::VaeAc), 1).unwrap();
        let x = input(m.config(), 3);
        assert!(matches!(m.forward(&x, None, &noise(6, 1)), Err(Error::Validation(_))));
    }

    #[test]
    fn variant_equivalences_are_exact() {
        let ap = Vae::new(tiny(Variant::VaeAp), 9).unwrap();
        let base = ap.with_variant(Variant::Vae);
        let ac = ap.with_variant(Variant::VaeAc);
        let x = input(ap.config(), 3);
        let e = noise(6, 4);
        let b = base.forward(&x, None, &e).unwrap();
        let c = ac.forward(&x, Some(100.0), &e).unwrap();
        let p = ap.forward(&x, Some(55.0), &e).unwrap();
        assert_eq!(b.x_tilde, c.x_tilde);
        assert_eq!(b.x_tilde, p.x_tilde);
        assert_eq!(b.latent.z_mu, p.latent.z_mu);
        assert!(p.a_p.is_some());
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let m = Vae::new(tiny(Variant::Vae), 2).unwrap();
        let z = noise(6, 8);
        let w = input(m.config(), 9);
        let f = |z: &[f64]| m.decode(z).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = m.decode_vjp(&z, &w).unwrap();
        let h = 1e-5;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "z[{i}]: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn from_params_checks_length() {
        let m = Vae::new(tiny(Variant::Vae), 2).unwrap();
        assert!(Vae::from_params(tiny(Variant::Vae), m.params().to_vec()).is_ok());
        assert!(matches!(Vae::from_params(tiny(Variant::Vae), vec![0.0; 3]), Err(Error::Shape { .. })));
    }
}
