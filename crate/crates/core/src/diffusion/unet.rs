//! 3D U-Net noise predictor with timestep conditioning and bottleneck taps.
//!
//! Channel widths follow `base_channels * channel_multipliers[level]`, with a
//! stride-2 convolution between levels and nearest-neighbour upsampling plus
//! convolution on the way back. The bottleneck is residual -> self-attention
//! -> residual; those three sub-block outputs are the feature tap points.

use std::collections::BTreeMap;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{multi_head_attention, Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ParamBinding, ParamSet};
use crate::util;
use crate::volume::Resolution;

/// The three bottleneck sub-blocks available as feature taps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidBlock {
    Mid0,
    Mid1,
    Mid2,
}

impl MidBlock {
    pub const ALL: [MidBlock; 3] = [MidBlock::Mid0, MidBlock::Mid1, MidBlock::Mid2];

    pub fn index(self) -> usize {
        match self {
            MidBlock::Mid0 => 0,
            MidBlock::Mid1 => 1,
            MidBlock::Mid2 => 2,
        }
    }
}

impl std::fmt::Display for MidBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MidBlock::Mid0 => "mid_0",
            MidBlock::Mid1 => "mid_1",
            MidBlock::Mid2 => "mid_2",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MidBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mid_0" | "mid0" => Ok(MidBlock::Mid0),
            "mid_1" | "mid1" => Ok(MidBlock::Mid1),
            "mid_2" | "mid2" => Ok(MidBlock::Mid2),
            other => Err(Error::Validation(format!("unknown bottleneck block {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    /// Levels whose in-plane resolution equals this get a self-attention block.
    pub attention_resolution: usize,
    /// Nominal in-plane input size (H = W); fixes where attention sits.
    pub in_plane: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm_groups: usize,
}

impl DenoiserConfig {
    /// CPU-sized profile for (8, 32, 32) volumes.
    pub fn desk() -> Self {
        DenoiserConfig {
            base_channels: 16,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_level: 1,
            attention_resolution: 8,
            in_plane: 32,
            in_channels: 1,
            out_channels: 1,
            norm_groups: 8,
        }
    }

    /// Full-size profile for (16, 256, 256) volumes: base width 64, expansion
    /// (1,1,2,2,4), one residual block per level, attention at 16x16.
    pub fn paper() -> Self {
        DenoiserConfig {
            base_channels: 64,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            blocks_per_level: 1,
            attention_resolution: 16,
            in_plane: 256,
            in_channels: 1,
            out_channels: 1,
            norm_groups: 32,
        }
    }

    /// Minimal profile for numerical gradient checks on (4, 4, 4) inputs.
    pub fn tiny() -> Self {
        DenoiserConfig {
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            attention_resolution: 2,
            in_plane: 4,
            in_channels: 1,
            out_channels: 1,
            norm_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() < 2 {
            return Err(Error::Config("need at least two resolution levels".into()));
        }
        for &ch in &self.level_channels() {
            if ch % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channel width {ch} is not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels * self.channel_multipliers.last().unwrap()
    }

    /// Spatial shape of the bottleneck for a given input resolution.
    pub fn bottleneck_resolution(&self, input: Resolution) -> Resolution {
        let f = 1usize << (self.levels() - 1);
        Resolution::new((input.d / f).max(1), (input.h / f).max(1), (input.w / f).max(1))
    }

    fn sin_dim(&self) -> usize {
        self.base_channels.max(2) & !1
    }

    fn temb_dim(&self) -> usize {
        self.base_channels * 4
    }

    fn attention_heads(channels: usize) -> usize {
        (channels / 16).max(1)
    }
}

/// Sinusoidal timestep embedding as a (1, dim) matrix.
pub fn timestep_embedding(t: usize, dim: usize) -> Arr {
    assert!(dim >= 2 && dim % 2 == 0);
    let half = dim / 2;
    let mut out = Arr::zeros(IxDyn(&[1, dim]));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[IxDyn(&[0, i])] = arg.sin();
        out[IxDyn(&[0, half + i])] = arg.cos();
    }
    out
}

/// How far a forward pass should run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardScope {
    /// Encoder + bottleneck + decoder + output projection.
    Full,
    /// Stop after the requested bottleneck sub-block.
    ThroughTap(MidBlock),
}

pub struct UNetOutput {
    /// Predicted noise; present only for `ForwardScope::Full`.
    pub out: Option<Var>,
    /// Captured bottleneck activations, indexed by `MidBlock::index`.
    pub taps: [Option<Var>; 3],
}

impl UNetOutput {
    pub fn tap(&self, block: MidBlock) -> Var {
        self.taps[block.index()].expect("tap was not captured at this scope")
    }
}

pub struct UNet {
    pub config: DenoiserConfig,
}

enum SpecInit {
    FanIn(usize),
    Zero,
    One,
}

impl UNet {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        Ok(UNet { config })
    }

    /// Initialise parameters. Output-side stabiliser weights (second conv of
    /// each residual block, attention output projection, final projection)
    /// start at zero so the network is near-identity at step 0.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = util::stream(seed, "unet-init");
        let mut params = ParamSet::new();
        for (name, shape, init) in self.param_specs() {
            let value = match init {
                SpecInit::FanIn(fan) => nn::init_fan_in(&shape, fan, &mut rng),
                SpecInit::Zero => nn::zeros(&shape),
                SpecInit::One => nn::ones(&shape),
            };
            params.insert(&name, value);
        }
        params
    }

    fn res_block_specs(specs: &mut Vec<(String, Vec<usize>, SpecInit)>, prefix: &str, c_in: usize, c_out: usize, temb_dim: usize) {
        let k3 = 27;
        specs.push((format!("{prefix}/gn1/g"), vec![c_in], SpecInit::One));
        specs.push((format!("{prefix}/gn1/b"), vec![c_in], SpecInit::Zero));
        specs.push((format!("{prefix}/conv1/w"), vec![c_out, c_in, 3, 3, 3], SpecInit::FanIn(c_in * k3)));
        specs.push((format!("{prefix}/conv1/b"), vec![c_out], SpecInit::Zero));
        specs.push((format!("{prefix}/temb/w"), vec![temb_dim, c_out], SpecInit::FanIn(temb_dim)));
        specs.push((format!("{prefix}/temb/b"), vec![c_out], SpecInit::Zero));
        specs.push((format!("{prefix}/gn2/g"), vec![c_out], SpecInit::One));
        specs.push((format!("{prefix}/gn2/b"), vec![c_out], SpecInit::Zero));
        specs.push((format!("{prefix}/conv2/w"), vec![c_out, c_out, 3, 3, 3], SpecInit::Zero));
        specs.push((format!("{prefix}/conv2/b"), vec![c_out], SpecInit::Zero));
        if c_in != c_out {
            specs.push((format!("{prefix}/skip/w"), vec![c_out, c_in, 1, 1, 1], SpecInit::FanIn(c_in)));
            specs.push((format!("{prefix}/skip/b"), vec![c_out], SpecInit::Zero));
        }
    }

    fn attn_block_specs(specs: &mut Vec<(String, Vec<usize>, SpecInit)>, prefix: &str, c: usize) {
        specs.push((format!("{prefix}/gn/g"), vec![c], SpecInit::One));
        specs.push((format!("{prefix}/gn/b"), vec![c], SpecInit::Zero));
        for proj in ["q", "k", "v"] {
            specs.push((format!("{prefix}/{proj}/w"), vec![c, c], SpecInit::FanIn(c)));
        }
        specs.push((format!("{prefix}/out/w"), vec![c, c], SpecInit::Zero));
        specs.push((format!("{prefix}/out/b"), vec![c], SpecInit::Zero));
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>, SpecInit)> {
        let cfg = &self.config;
        let chans = cfg.level_channels();
        let temb_dim = cfg.temb_dim();
        let mut specs = Vec::new();
        specs.push(("temb/mlp1/w".into(), vec![cfg.sin_dim(), temb_dim], SpecInit::FanIn(cfg.sin_dim())));
        specs.push(("temb/mlp1/b".into(), vec![temb_dim], SpecInit::Zero));
        specs.push(("temb/mlp2/w".into(), vec![temb_dim, temb_dim], SpecInit::FanIn(temb_dim)));
        specs.push(("temb/mlp2/b".into(), vec![temb_dim], SpecInit::Zero));
        specs.push(("enc/stem/w".into(), vec![chans[0], cfg.in_channels, 3, 3, 3], SpecInit::FanIn(cfg.in_channels * 27)));
        specs.push(("enc/stem/b".into(), vec![chans[0]], SpecInit::Zero));

        let mut prev = chans[0];
        for (level, &ch) in chans.iter().enumerate() {
            for b in 0..cfg.blocks_per_level {
                let c_in = if b == 0 { prev } else { ch };
                Self::res_block_specs(&mut specs, &format!("enc/l{level}/b{b}/res"), c_in, ch, temb_dim);
                if self.has_attention(level) {
                    Self::attn_block_specs(&mut specs, &format!("enc/l{level}/b{b}/attn"), ch);
                }
            }
            prev = ch;
            if level + 1 < chans.len() {
                specs.push((format!("enc/down{level}/w"), vec![ch, ch, 3, 3, 3], SpecInit::FanIn(ch * 27)));
                specs.push((format!("enc/down{level}/b"), vec![ch], SpecInit::Zero));
            }
        }

        let cb = cfg.bottleneck_channels();
        Self::res_block_specs(&mut specs, "mid/0/res", cb, cb, temb_dim);
        Self::attn_block_specs(&mut specs, "mid/1/attn", cb);
        Self::res_block_specs(&mut specs, "mid/2/res", cb, cb, temb_dim);

        for level in (0..chans.len()).rev() {
            let ch = chans[level];
            let above = if level + 1 < chans.len() { chans[level + 1] } else { cb };
            for b in 0..cfg.blocks_per_level {
                let c_in = if b == 0 { above + ch } else { ch };
                Self::res_block_specs(&mut specs, &format!("dec/l{level}/b{b}/res"), c_in, ch, temb_dim);
                if self.has_attention(level) {
                    Self::attn_block_specs(&mut specs, &format!("dec/l{level}/b{b}/attn"), ch);
                }
            }
            if level > 0 {
                specs.push((format!("dec/up{level}/w"), vec![ch, ch, 3, 3, 3], SpecInit::FanIn(ch * 27)));
                specs.push((format!("dec/up{level}/b"), vec![ch], SpecInit::Zero));
            }
        }

        specs.push(("out/gn/g".into(), vec![chans[0]], SpecInit::One));
        specs.push(("out/gn/b".into(), vec![chans[0]], SpecInit::Zero));
        specs.push(("out/conv/w".into(), vec![cfg.out_channels, chans[0], 3, 3, 3], SpecInit::Zero));
        specs.push(("out/conv/b".into(), vec![cfg.out_channels], SpecInit::Zero));
        specs
    }

    fn has_attention(&self, level: usize) -> bool {
        (self.config.in_plane >> level) == self.config.attention_resolution
    }

    fn res_block(
        &self,
        tape: &mut Tape,
        p: &ParamBinding,
        prefix: &str,
        x: Var,
        temb: Var,
        c_in: usize,
        c_out: usize,
    ) -> Var {
        let cfg = &self.config;
        let h = tape.group_norm(x, p.var(&format!("{prefix}/gn1/g")), p.var(&format!("{prefix}/gn1/b")), cfg.norm_groups, 1e-5);
        let h = tape.silu(h);
        let h = tape.conv3d(h, p.var(&format!("{prefix}/conv1/w")), p.var(&format!("{prefix}/conv1/b")), 1, 1);
        let ts = tape.silu(temb);
        let tp = tape.matmul(ts, p.var(&format!("{prefix}/temb/w")));
        let tp = tape.add_row_bias(tp, p.var(&format!("{prefix}/temb/b")));
        let tp = tape.reshape(tp, &[c_out]);
        let h = tape.add_channel_bias(h, tp);
        let h = tape.group_norm(h, p.var(&format!("{prefix}/gn2/g")), p.var(&format!("{prefix}/gn2/b")), cfg.norm_groups, 1e-5);
        let h = tape.silu(h);
        let h = tape.conv3d(h, p.var(&format!("{prefix}/conv2/w")), p.var(&format!("{prefix}/conv2/b")), 1, 1);
        let skip = if c_in == c_out {
            x
        } else {
            tape.conv3d(x, p.var(&format!("{prefix}/skip/w")), p.var(&format!("{prefix}/skip/b")), 1, 0)
        };
        tape.add(skip, h)
    }

    fn attn_block(&self, tape: &mut Tape, p: &ParamBinding, prefix: &str, x: Var, channels: usize) -> Var {
        let cfg = &self.config;
        let shape: Vec<usize> = tape.shape(x).to_vec();
        let spatial: usize = shape[1..].iter().product();
        let h = tape.group_norm(x, p.var(&format!("{prefix}/gn/g")), p.var(&format!("{prefix}/gn/b")), cfg.norm_groups, 1e-5);
        let flat = tape.reshape(h, &[channels, spatial]);
        let tokens = tape.permute(flat, &[1, 0]);
        let attn = multi_head_attention(
            tape,
            tokens,
            tokens,
            p.var(&format!("{prefix}/q/w")),
            p.var(&format!("{prefix}/k/w")),
            p.var(&format!("{prefix}/v/w")),
            p.var(&format!("{prefix}/out/w")),
            DenoiserConfig::attention_heads(channels),
        );
        let attn = tape.add_row_bias(attn, p.var(&format!("{prefix}/out/b")));
        let back = tape.permute(attn, &[1, 0]);
        let back = tape.reshape(back, &shape);
        tape.add(x, back)
    }

    /// Run the denoiser on a single volume `(C_in, D, H, W)` at timestep `t`.
    pub fn forward(&self, tape: &mut Tape, p: &ParamBinding, x: Var, t: usize, scope: ForwardScope) -> UNetOutput {
        let cfg = &self.config;
        let chans = cfg.level_channels();
        let temb_sin = tape.leaf(timestep_embedding(t, cfg.sin_dim()));
        let temb = tape.matmul(temb_sin, p.var("temb/mlp1/w"));
        let temb = tape.add_row_bias(temb, p.var("temb/mlp1/b"));
        let temb = tape.silu(temb);
        let temb = tape.matmul(temb, p.var("temb/mlp2/w"));
        let temb = tape.add_row_bias(temb, p.var("temb/mlp2/b"));

        let mut h = tape.conv3d(x, p.var("enc/stem/w"), p.var("enc/stem/b"), 1, 1);
        let mut skips: Vec<(Var, usize)> = Vec::with_capacity(chans.len());
        let mut prev = chans[0];
        for (level, &ch) in chans.iter().enumerate() {
            for b in 0..cfg.blocks_per_level {
                let c_in = if b == 0 { prev } else { ch };
                h = self.res_block(tape, p, &format!("enc/l{level}/b{b}/res"), h, temb, c_in, ch);
                if self.has_attention(level) {
                    h = self.attn_block(tape, p, &format!("enc/l{level}/b{b}/attn"), h, ch);
                }
            }
            prev = ch;
            skips.push((h, ch));
            if level + 1 < chans.len() {
                h = tape.conv3d(h, p.var(&format!("enc/down{level}/w")), p.var(&format!("enc/down{level}/b")), 2, 1);
            }
        }

        let cb = cfg.bottleneck_channels();
        let mut taps: [Option<Var>; 3] = [None, None, None];
        h = self.res_block(tape, p, "mid/0/res", h, temb, cb, cb);
        taps[0] = Some(h);
        if scope == ForwardScope::ThroughTap(MidBlock::Mid0) {
            return UNetOutput { out: None, taps };
        }
        h = self.attn_block(tape, p, "mid/1/attn", h, cb);
        taps[1] = Some(h);
        if scope == ForwardScope::ThroughTap(MidBlock::Mid1) {
            return UNetOutput { out: None, taps };
        }
        h = self.res_block(tape, p, "mid/2/res", h, temb, cb, cb);
        taps[2] = Some(h);
        if let ForwardScope::ThroughTap(_) = scope {
            return UNetOutput { out: None, taps };
        }

        for level in (0..chans.len()).rev() {
            let ch = chans[level];
            let above = if level + 1 < chans.len() { chans[level + 1] } else { cb };
            let (skip, _) = skips[level];
            for b in 0..cfg.blocks_per_level {
                let c_in = if b == 0 { above + ch } else { ch };
                if b == 0 {
                    h = tape.concat(&[h, skip], 0);
                }
                h = self.res_block(tape, p, &format!("dec/l{level}/b{b}/res"), h, temb, c_in, ch);
                if self.has_attention(level) {
                    h = self.attn_block(tape, p, &format!("dec/l{level}/b{b}/attn"), h, ch);
                }
            }
            if level > 0 {
                h = tape.nearest_up2(h);
                h = tape.conv3d(h, p.var(&format!("dec/up{level}/w")), p.var(&format!("dec/up{level}/b")), 1, 1);
            }
        }

        let h = tape.group_norm(h, p.var("out/gn/g"), p.var("out/gn/b"), cfg.norm_groups, 1e-5);
        let h = tape.silu(h);
        let out = tape.conv3d(h, p.var("out/conv/w"), p.var("out/conv/b"), 1, 1);
        UNetOutput { out: Some(out), taps }
    }

    /// Convenience: eval-mode denoiser output as a plain array.
    pub fn predict_noise(&self, params: &ParamSet, x_t: &Arr, t: usize) -> Result<Arr> {
        if !x_t.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("denoiser input contains non-finite values".into()));
        }
        let mut tape = Tape::eval_only();
        let binding = params.bind(&mut tape);
        let x = tape.leaf(x_t.clone());
        let out = self.forward(&mut tape, &binding, x, t, ForwardScope::Full);
        Ok(tape.value(out.out.unwrap()).clone())
    }

    /// Names of every parameter, grouped by section prefix.
    pub fn section_names(&self) -> BTreeMap<&'static str, Vec<String>> {
        let mut map: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
        for (name, _, _) in self.param_specs() {
            let section = if name.starts_with("enc/") {
                "encoder"
            } else if name.starts_with("mid/") {
                "bottleneck"
            } else if name.starts_with("dec/") {
                "decoder"
            } else if name.starts_with("temb/") {
                "temb"
            } else {
                "out"
            };
            map.entry(section).or_default().push(name);
        }
        map
    }
}
