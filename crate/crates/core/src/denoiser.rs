//! Noise-prediction network over short frame stacks.
//!
//! Spatial U-Net with three resolutions, a residual temporal convolution in
//! every block and temporal self-attention at the bottleneck. Timestep and
//! action enter through per-block FiLM.

use serde::{Deserialize, Serialize};
use rand::Rng;
use slowfast_tensor::{grad_check, Bound, Element, GradCheckConfig, GradCheckReport, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::gridworld::{Action, CONTEXT_WINDOW, NUM_ACTIONS};
use crate::lora::{adapted_weight, dense, LoraBinding};
use crate::rng::{self, tags};

const NORM_EPS: f64 = 1e-5;
/// Frame, indicator, anchor frame.
const IN_CHANNELS: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub channels: usize,
    pub emb_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub frame_size: usize,
    pub max_frames: usize,
    pub temporal_attention: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            emb_dim: 64,
            time_dim: 64,
            groups: 8,
            frame_size: 32,
            max_frames: CONTEXT_WINDOW,
            temporal_attention: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.groups == 0 || c % self.groups != 0 {
            return Err(Error::Config(format!(
                "channels {c} must be a positive multiple of groups {}",
                self.groups
            )));
        }
        if self.frame_size == 0 || self.frame_size % 4 != 0 {
            return Err(Error::Config(format!(
                "frame size {} must be a positive multiple of 4",
                self.frame_size
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.emb_dim == 0 {
            return Err(Error::Config("time_dim must be even and emb_dim positive".into()));
        }
        if self.max_frames == 0 || self.max_frames > CONTEXT_WINDOW {
            return Err(Error::Config(format!(
                "max_frames {} must lie in 1..={CONTEXT_WINDOW}",
                self.max_frames
            )));
        }
        Ok(())
    }
}

/// Blocks as `(name, in_channels, out_channels, stride)` in multiples of
/// the base width.
const BLOCKS: [(&str, usize, usize, usize); 5] = [
    ("down1", 1, 1, 1),
    ("down2", 1, 1, 2),
    ("down3", 1, 2, 2),
    ("up1", 3, 1, 1),
    ("up2", 2, 1, 1),
];

enum Init {
    FanIn(usize, f64),
    Zeros,
    Ones,
    /// FiLM head: scale rows fan-in uniform, shift rows zero.
    Film(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub arch: ArchConfig,
}

/// Per-sample conditioning for one forward pass.
pub struct Conditioning<'a> {
    /// `[B * F]` flags, 1 marks a clean conditioning frame.
    pub indicator: &'a [f32],
    pub timesteps: &'a [usize],
    /// `ᾱ_t` for each sample's timestep; sets the output skip mix.
    pub alpha_bars: &'a [f64],
    pub actions: &'a [Action],
}

impl Denoiser {
    pub fn new(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch })
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let a = &self.arch;
        let (c, e) = (a.channels, a.emb_dim);
        let mut v: Vec<(String, Vec<usize>, Init)> = vec![
            ("time.fc1.w".into(), vec![e, a.time_dim], Init::FanIn(a.time_dim, 1.0)),
            ("time.fc1.b".into(), vec![e], Init::Zeros),
            ("time.fc2.w".into(), vec![e, e], Init::FanIn(e, 1.0)),
            ("time.fc2.b".into(), vec![e], Init::Zeros),
            ("action.table".into(), vec![NUM_ACTIONS, e], Init::FanIn(1, 1.0)),
            ("in.conv.w".into(), vec![c, IN_CHANNELS, 3, 3], Init::FanIn(IN_CHANNELS * 9, 1.0)),
            ("in.conv.b".into(), vec![c], Init::Zeros),
        ];
        for (name, ci, co, _) in BLOCKS {
            let (ci, co) = (ci * c, co * c);
            v.push((format!("{name}.conv.w"), vec![co, ci, 3, 3], Init::FanIn(ci * 9, 1.0)));
            v.push((format!("{name}.conv.b"), vec![co], Init::Zeros));
            v.push((format!("{name}.norm.g"), vec![co], Init::Ones));
            v.push((format!("{name}.norm.b"), vec![co], Init::Zeros));
            v.push((format!("{name}.film.w"), vec![2 * co, e], Init::Film(co)));
            v.push((format!("{name}.film.b"), vec![2 * co], Init::Zeros));
            v.push((format!("{name}.tconv.w"), vec![co, co, 3], Init::FanIn(co * 3, 0.5)));
            v.push((format!("{name}.tconv.b"), vec![co], Init::Zeros));
            if name == "down3" && a.temporal_attention {
                let m = 2 * c;
                v.push(("mid.norm.g".into(), vec![m], Init::Ones));
                v.push(("mid.norm.b".into(), vec![m], Init::Zeros));
                for p in ["q", "k", "v", "o"] {
                    v.push((format!("mid.attn.{p}.w"), vec![m, m], Init::FanIn(m, 1.0)));
                    v.push((format!("mid.attn.{p}.b"), vec![m], Init::Zeros));
                }
            }
        }
        v.push(("out.norm.g".into(), vec![c], Init::Ones));
        v.push(("out.norm.b".into(), vec![c], Init::Zeros));
        v.push(("out.conv.w".into(), vec![3, c, 3, 3], Init::FanIn(c * 9, 0.1)));
        v.push(("out.conv.b".into(), vec![3], Init::Zeros));
        v.push(("out.gate".into(), vec![1], Init::Zeros));
        v
    }

    /// Fresh parameters; identical seeds give identical stores.
    pub fn init_params<F: Element>(&self, seed: u64) -> Result<ParamStore<F>> {
        let mut store = ParamStore::new();
        for (i, (name, shape, init)) in self.param_specs().into_iter().enumerate() {
            let mut r = rng::stream(seed, &[tags::INIT, i as u64]);
            let t = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::FanIn(fan, gain) => rng::uniform(&mut r, &shape, gain / (fan as f64).sqrt()),
                Init::Film(co) => {
                    let mut t: Tensor<F> = rng::uniform(&mut r, &shape, 1.0 / (shape[1] as f64).sqrt());
                    let cols = shape[1];
                    t.data_mut()[co * cols..].iter_mut().for_each(|v| *v = F::zero());
                    t
                }
            };
            store.insert(name, t)?;
        }
        Ok(store)
    }

    /// Weights that may carry LoRA adapters, in a fixed order.
    pub fn injection_points(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, ..) in BLOCKS {
            v.push(format!("{name}.conv"));
            v.push(format!("{name}.film"));
            if name == "down3" && self.arch.temporal_attention {
                for p in ["q", "k", "v", "o"] {
                    v.push(format!("mid.attn.{p}"));
                }
            }
        }
        v
    }

    /// Frames of temporal context that can reach an output frame through
    /// the convolutional path, on either side.
    pub fn temporal_radius(&self) -> usize {
        BLOCKS.len()
    }

    fn check_input<F: Element>(&self, tape: &Tape<F>, x: Var, cond: &Conditioning) -> Result<(usize, usize)> {
        let s = self.arch.frame_size;
        let &[b, f, 3, h, w] = tape.shape(x) else {
            return Err(Error::Config(format!(
                "denoiser input must be [B,F,3,H,W], got {:?}",
                tape.shape(x)
            )));
        };
        if f > self.arch.max_frames {
            return Err(Error::ContextWindow {
                frames: f,
                max: self.arch.max_frames,
            });
        }
        if (h, w) != (s, s) {
            return Err(Error::Config(format!("frames are {h}x{w}, network expects {s}x{s}")));
        }
        if cond.indicator.len() != b * f
            || cond.timesteps.len() != b
            || cond.alpha_bars.len() != b
            || cond.actions.len() != b
        {
            return Err(Error::Config(format!(
                "conditioning sizes (indicator {}, timesteps {}, alpha_bars {}, actions {}) do not match batch {b} x {f} frames",
                cond.indicator.len(),
                cond.timesteps.len(),
                cond.alpha_bars.len(),
                cond.actions.len()
            )));
        }
        Ok((b, f))
    }

    fn sinusoid<F: Element>(&self, t: &[usize]) -> Tensor<F> {
        let d = self.arch.time_dim;
        let half = d / 2;
        let mut data = Vec::with_capacity(t.len() * d);
        for &ti in t {
            let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
            let args: Vec<f64> = freqs.map(|fr| ti as f64 * fr).collect();
            data.extend(args.iter().map(|a| F::from_f64_lossy(a.sin())));
            data.extend(args.iter().map(|a| F::from_f64_lossy(a.cos())));
        }
        Tensor::new(&[t.len(), d], data).expect("sinusoid shape")
    }

    /// Activated conditioning embedding `[B, emb]` shared by all FiLM heads.
    fn embed<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, l: Option<&LoraBinding>, cond: &Conditioning) -> Result<Var> {
        let sin = tape.constant(self.sinusoid(cond.timesteps));
        let mut h = dense(tape, p, l, "time.fc1", sin)?;
        h = tape.silu(h)?;
        h = dense(tape, p, l, "time.fc2", h)?;
        let ids: Vec<usize> = cond.actions.iter().map(|a| a.id()).collect();
        let act = tape.gather_rows(p.get("action.table")?, &ids)?;
        let e = tape.add(h, act)?;
        Ok(tape.silu(e)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<F: Element>(
        &self,
        tape: &mut Tape<F>,
        p: &Bound,
        l: Option<&LoraBinding>,
        name: &str,
        x: Var,
        emb: Var,
        bf: (usize, usize),
        stride: usize,
    ) -> Result<Var> {
        let (b, f) = bf;
        let w = adapted_weight(tape, p, l, &format!("{name}.conv"))?;
        let mut h = tape.conv2d(
            x,
            w,
            p.get(&format!("{name}.conv.b"))?,
            stride,
            1,
        )?;
        h = tape.group_norm(
            h,
            p.get(&format!("{name}.norm.g"))?,
            p.get(&format!("{name}.norm.b"))?,
            self.arch.groups,
            NORM_EPS,
        )?;
        let shape = tape.shape(h).to_vec();
        let (co, s) = (shape[1], shape[2] * shape[3]);
        let film = dense(tape, p, l, &format!("{name}.film"), emb)?;
        let scale = tape.slice(film, 1, 0, co)?;
        let scale = tape.reshape(scale, &[b, 1, co, 1])?;
        let shift = tape.slice(film, 1, co, co)?;
        let shift = tape.reshape(shift, &[b, 1, co, 1])?;
        let hv = tape.reshape(h, &[b, f, co, s])?;
        let scaled = tape.mul(hv, scale)?;
        let mut hv = tape.add(hv, scaled)?;
        hv = tape.add(hv, shift)?;
        hv = tape.silu(hv)?;
        let t = tape.temporal_conv(
            hv,
            p.get(&format!("{name}.tconv.w"))?,
            p.get(&format!("{name}.tconv.b"))?,
        )?;
        hv = tape.add(hv, t)?;
        Ok(tape.reshape(hv, &shape)?)
    }

    /// Single-head self-attention across frames at every spatial position.
    fn attention<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, l: Option<&LoraBinding>, x: Var, bf: (usize, usize)) -> Result<Var> {
        let (b, f) = bf;
        let shape = tape.shape(x).to_vec();
        let (c, s) = (shape[1], shape[2] * shape[3]);
        let n = tape.group_norm(x, p.get("mid.norm.g")?, p.get("mid.norm.b")?, self.arch.groups, NORM_EPS)?;
        let n = tape.reshape(n, &[b, f, c, s])?;
        let tokens = tape.permute(n, &[0, 3, 1, 2])?;
        let tokens = tape.reshape(tokens, &[b * s * f, c])?;
        let mut qkv = Vec::with_capacity(3);
        for name in ["mid.attn.q", "mid.attn.k", "mid.attn.v"] {
            let y = dense(tape, p, l, name, tokens)?;
            qkv.push(tape.reshape(y, &[b * s, f, c])?);
        }
        let scores = tape.bmm(qkv[0], qkv[1], true)?;
        let scores = tape.scale(scores, F::from_f64_lossy(1.0 / (c as f64).sqrt()))?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.bmm(attn, qkv[2], false)?;
        let mixed = tape.reshape(mixed, &[b * s * f, c])?;
        let out = dense(tape, p, l, "mid.attn.o", mixed)?;
        let out = tape.reshape(out, &[b, s, f, c])?;
        let out = tape.permute(out, &[0, 2, 3, 1])?;
        let out = tape.reshape(out, &shape)?;
        Ok(tape.add(x, out)?)
    }

    /// Per-frame network input `[B*F, 7, H, W]`: the frame, its indicator
    /// and the anchor, which is the last clean frame of the stack (zeros when
    /// there is none). The anchor hands every noised frame the conditioning
    /// content at full resolution.
    fn input_stack<F: Element>(&self, tape: &mut Tape<F>, x: Var, indicator: &[f32], b: usize, f: usize) -> Result<Var> {
        let hw = self.arch.frame_size;
        let n = 3 * hw * hw;
        let xd = tape.value(x).data();
        let mut extra = Vec::with_capacity(b * f * (n + hw * hw));
        for bi in 0..b {
            let flags = &indicator[bi * f..(bi + 1) * f];
            let anchor = flags.iter().rposition(|&v| v > 0.5).map(|j| &xd[(bi * f + j) * n..(bi * f + j + 1) * n]);
            for &v in flags {
                extra.extend(std::iter::repeat_n(F::from_f64_lossy(v as f64), hw * hw));
                match anchor {
                    Some(a) => extra.extend_from_slice(a),
                    None => extra.extend(std::iter::repeat_n(F::zero(), n)),
                }
            }
        }
        let extra = tape.constant(Tensor::new(&[b, f, 4, hw, hw], extra)?);
        let inp = tape.concat(&[x, extra], 2)?;
        Ok(tape.reshape(inp, &[b * f, IN_CHANNELS, hw, hw])?)
    }

    /// Predicted noise `[B, F, 3, H, W]` for noisy frames `x` of the same shape.
    pub fn forward<F: Element>(
        &self,
        tape: &mut Tape<F>,
        params: &Bound,
        lora: Option<&LoraBinding>,
        x: Var,
        cond: &Conditioning,
    ) -> Result<Var> {
        let (b, f) = self.check_input(tape, x, cond)?;
        let hw = self.arch.frame_size;
        let emb = self.embed(tape, params, lora, cond)?;
        let inp = self.input_stack(tape, x, cond.indicator, b, f)?;
        let h0 = tape.conv2d(inp, params.get("in.conv.w")?, params.get("in.conv.b")?, 1, 1)?;

        let bf = (b, f);
        let d1 = self.block(tape, params, lora, "down1", h0, emb, bf, 1)?;
        let d2 = self.block(tape, params, lora, "down2", d1, emb, bf, 2)?;
        let mut mid = self.block(tape, params, lora, "down3", d2, emb, bf, 2)?;
        if self.arch.temporal_attention {
            mid = self.attention(tape, params, lora, mid, bf)?;
        }
        let u = tape.upsample2x(mid)?;
        let u = tape.concat(&[u, d2], 1)?;
        let u1 = self.block(tape, params, lora, "up1", u, emb, bf, 1)?;
        let u = tape.upsample2x(u1)?;
        let u = tape.concat(&[u, d1], 1)?;
        let u2 = self.block(tape, params, lora, "up2", u, emb, bf, 1)?;

        let mut o = tape.group_norm(u2, params.get("out.norm.g")?, params.get("out.norm.b")?, self.arch.groups, NORM_EPS)?;
        o = tape.silu(o)?;
        o = tape.conv2d(o, params.get("out.conv.w")?, params.get("out.conv.b")?, 1, 1)?;
        let o = tape.reshape(o, &[b, f, 3, hw, hw])?;

        // eps = g * sqrt(1 - ab) * x + sqrt(ab) * net. At high noise the
        // network output is the (negated) clean frame rather than a tiny
        // correction to x. The gate starts at zero.
        let coef = |v: Vec<f64>| Tensor::new(&[b, 1, 1, 1, 1], v.into_iter().map(F::from_f64_lossy).collect());
        let c_skip = tape.constant(coef(cond.alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect())?);
        let c_out = tape.constant(coef(cond.alpha_bars.iter().map(|a| a.sqrt()).collect())?);
        let gate = params.get("out.gate")?;
        let gate = tape.reshape(gate, &[1, 1, 1, 1, 1])?;
        let skip = tape.mul(x, c_skip)?;
        let skip = tape.mul(skip, gate)?;
        let o = tape.mul(o, c_out)?;
        Ok(tape.add(skip, o)?)
    }

    /// Bottleneck activations of a single clean frame, flattened.
    pub fn bottleneck_features(&self, params: &ParamStore<f32>, frame: &[f32]) -> Result<Vec<f32>> {
        let hw = self.arch.frame_size;
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params);
        let x = tape.constant(Tensor::new(&[1, 1, 3, hw, hw], frame.to_vec())?);
        let cond = Conditioning {
            indicator: &[1.0],
            timesteps: &[1],
            alpha_bars: &[1.0],
            actions: &[Action::Null],
        };
        self.check_input(&tape, x, &cond)?;
        let emb = self.embed(&mut tape, &p, None, &cond)?;
        let inp = self.input_stack(&mut tape, x, &[1.0], 1, 1)?;
        let h0 = tape.conv2d(inp, p.get("in.conv.w")?, p.get("in.conv.b")?, 1, 1)?;
        let d1 = self.block(&mut tape, &p, None, "down1", h0, emb, (1, 1), 1)?;
        let d2 = self.block(&mut tape, &p, None, "down2", d1, emb, (1, 1), 2)?;
        let d3 = self.block(&mut tape, &p, None, "down3", d2, emb, (1, 1), 2)?;
        Ok(tape.value(d3).data().to_vec())
    }
}

impl ArchConfig {
    /// Smallest configuration exercising every layer: 8x8 frames, base width 8.
    pub fn gradcheck_toy() -> Self {
        Self {
            channels: 8,
            emb_dim: 16,
            time_dim: 16,
            groups: 4,
            frame_size: 8,
            max_frames: 2,
            temporal_attention: true,
        }
    }
}

/// Finite-difference check of the full network in f64 on a seeded toy
/// instance: random two-frame input (first frame clean), random timestep and
/// action, mse against a random target.
pub fn gradient_check(seed: u64, max_elems_per_param: usize, tolerance: f64) -> Result<GradCheckReport> {
    let net = Denoiser::new(ArchConfig::gradcheck_toy())?;
    let mut store = net.init_params::<f64>(seed)?;
    let mut r = rng::stream(seed, &[tags::INIT, u64::MAX]);
    // Non-zero biases and shifts so every path carries signal.
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
    let s = net.arch.frame_size;
    let x: Tensor<f64> = rng::gaussian(&mut r, &[1, 2, 3, s, s]);
    let target: Tensor<f64> = rng::gaussian(&mut r, &[1, 2, 3, s, s]);
    let t = [r.random_range(1..=1000usize)];
    let ab = [r.random_range(0.01..0.99)];
    let a = [Action::ENV[r.random_range(0..Action::ENV.len())]];
    let build = |tape: &mut Tape<f64>, p: &Bound| -> slowfast_tensor::Result<Var> {
        let xv = tape.constant(x.clone());
        let cond = Conditioning {
            indicator: &[1.0, 0.0],
            timesteps: &t,
            alpha_bars: &ab,
            actions: &a,
        };
        let out = net
            .forward(tape, p, None, xv, &cond)
            .map_err(|e| slowfast_tensor::TensorError::InvalidArgument { op: "denoiser", msg: e.to_string() })?;
        let tv = tape.constant(target.clone());
        tape.mse(out, tv)
    };
    let cfg = GradCheckConfig {
        h: 1e-5,
        max_elems_per_param,
        seed,
        tolerance,
    };
    Ok(grad_check(&mut store, build, cfg)?)
}

/// Indicator flags marking the first `f_p` of `f` frames in each of `b` samples.
pub fn prefix_indicator(b: usize, f: usize, f_p: usize) -> Vec<f32> {
    (0..b * f).map(|i| if i % f < f_p { 1.0 } else { 0.0 }).collect()
}
