//! The segmentation U-Net.
//!
//! Symmetric encoder/decoder with skip connections at every level. Encoder
//! blocks run two 3×3 convolutions with group normalization and LeakyReLU,
//! then 2×2 max pooling; the bottleneck switches to instance normalization
//! and dropout; decoder blocks upsample with 2×2 transposed convolutions,
//! concatenate the skip, and mirror the double convolution (the two deepest
//! also carry dropout). A 1×1 convolution plus sigmoid emits per-pixel
//! probabilities. All convolutions are Kaiming-initialized.

use super::EhMaskerError;
use crate::auribox::Side;
use crate::data::Modality;
use crate::nn::{
    read_checkpoint, write_checkpoint, Checkpoint, Conv2d, ConvTranspose2x2, Dropout, GroupNorm,
    Layer, LeakyRelu, MaxPool2d, Param, StateIter,
};
use crate::rng::derive_seed;
use ndarray::{concatenate, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Encoder levels before the bottleneck.
    pub depth: usize,
    /// Channels of the first encoder level; doubles per level.
    pub base_channels: usize,
    /// Group-norm group count (clamped to the channel count).
    pub norm_groups: usize,
    pub leaky_slope: f32,
    pub dropout_p: f32,
    /// Square input side; must be divisible by 2^depth.
    pub input_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 32,
            norm_groups: 8,
            leaky_slope: 0.01,
            dropout_p: 0.3,
            input_size: super::patch::PATCH_SIZE,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), EhMaskerError> {
        if self.depth == 0 || self.depth > 6 {
            return Err(EhMaskerError::ConfigError("depth must be 1..=6".into()));
        }
        if self.base_channels == 0 {
            return Err(EhMaskerError::ConfigError("base_channels must be > 0".into()));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(EhMaskerError::ConfigError(format!(
                "input {} not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EhMaskerError::ConfigError("dropout_p must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Double conv with normalization and activation; optional trailing dropout.
struct ConvPair {
    c1: Conv2d,
    n1: GroupNorm,
    a1: LeakyRelu,
    c2: Conv2d,
    n2: GroupNorm,
    a2: LeakyRelu,
    dropout: Option<Dropout>,
}

impl ConvPair {
    #[allow(clippy::too_many_arguments)]
    fn new(
        in_c: usize,
        out_c: usize,
        groups: usize,
        slope: f32,
        instance_norm: bool,
        dropout: Option<(f32, u64)>,
        rng: &mut ChaCha8Rng,
    ) -> ConvPair {
        let norm = |c: usize| {
            if instance_norm {
                GroupNorm::instance(c)
            } else {
                GroupNorm::new(c, groups.min(c))
            }
        };
        ConvPair {
            c1: Conv2d::new(in_c, out_c, 3, 1, 1, rng),
            n1: norm(out_c),
            a1: LeakyRelu::new(slope),
            c2: Conv2d::new(out_c, out_c, 3, 1, 1, rng),
            n2: norm(out_c),
            a2: LeakyRelu::new(slope),
            dropout: dropout.map(|(p, seed)| Dropout::new(p, seed)),
        }
    }
}

impl Layer for ConvPair {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let mut h = self.c1.forward(x, train);
        h = self.n1.forward(h, train);
        h = self.a1.forward(h, train);
        h = self.c2.forward(h, train);
        h = self.n2.forward(h, train);
        h = self.a2.forward(h, train);
        match &mut self.dropout {
            Some(d) => d.forward(h, train),
            None => h,
        }
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let mut g = match &mut self.dropout {
            Some(d) => d.backward(gy),
            None => gy,
        };
        g = self.a2.backward(g);
        g = self.n2.backward(g);
        g = self.c2.backward(g);
        g = self.a1.backward(g);
        g = self.n1.backward(g);
        self.c1.backward(g)
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let mut h = self.c1.infer(x);
        h = self.n1.infer(h);
        h = self.a1.infer(h);
        h = self.c2.infer(h);
        h = self.n2.infer(h);
        self.a2.infer(h)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.c1.params_mut();
        v.extend(self.n1.params_mut());
        v.extend(self.c2.params_mut());
        v.extend(self.n2.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.c1.params();
        v.extend(self.n1.params());
        v.extend(self.c2.params());
        v.extend(self.n2.params());
        v
    }

    fn save_state(&self, out: &mut Vec<ArrayD<f32>>) {
        self.c1.save_state(out);
        self.n1.save_state(out);
        self.c2.save_state(out);
        self.n2.save_state(out);
    }

    fn load_state(&mut self, inp: &mut StateIter) -> Result<(), crate::nn::NnError> {
        self.c1.load_state(inp)?;
        self.n1.load_state(inp)?;
        self.c2.load_state(inp)?;
        self.n2.load_state(inp)
    }
}

struct DecoderLevel {
    up: ConvTranspose2x2,
    convs: ConvPair,
    skip_channels: usize,
}

/// The full network.
pub struct UNet {
    pub cfg: UNetConfig,
    pub modality: Option<Modality>,
    /// Segmentation target provenance (left/right agnostic; kept for report
    /// completeness when a model is trained per side).
    pub side: Option<Side>,
    pub seed: u64,
    encoders: Vec<ConvPair>,
    pools: Vec<MaxPool2d>,
    bottleneck: ConvPair,
    decoders: Vec<DecoderLevel>,
    head: Conv2d,
    cached_probs: Option<Array4<f32>>,
}

/// Build a U-Net with seeded Kaiming initialization.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<UNet, EhMaskerError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[40]));
    let mut encoders = Vec::with_capacity(cfg.depth);
    let mut pools = Vec::with_capacity(cfg.depth);
    let mut in_c = 1;
    for level in 0..cfg.depth {
        let out_c = cfg.base_channels << level;
        encoders.push(ConvPair::new(
            in_c,
            out_c,
            cfg.norm_groups,
            cfg.leaky_slope,
            false,
            None,
            &mut rng,
        ));
        pools.push(MaxPool2d::new(2, 2, 0));
        in_c = out_c;
    }
    let bottleneck_c = cfg.base_channels << cfg.depth;
    let bottleneck = ConvPair::new(
        in_c,
        bottleneck_c,
        cfg.norm_groups,
        cfg.leaky_slope,
        true,
        Some((cfg.dropout_p, derive_seed(seed, &[41]))),
        &mut rng,
    );
    // decoders stored deepest-first; dropout on the two deepest levels
    let mut decoders = Vec::with_capacity(cfg.depth);
    for level in (0..cfg.depth).rev() {
        let skip_c = cfg.base_channels << level;
        let deep_c = cfg.base_channels << (level + 1);
        let dropout = if cfg.depth - 1 - level < 2 {
            Some((cfg.dropout_p, derive_seed(seed, &[42, level as u64])))
        } else {
            None
        };
        decoders.push(DecoderLevel {
            up: ConvTranspose2x2::new(deep_c, skip_c, &mut rng),
            convs: ConvPair::new(
                2 * skip_c,
                skip_c,
                cfg.norm_groups,
                cfg.leaky_slope,
                false,
                dropout,
                &mut rng,
            ),
            skip_channels: skip_c,
        });
    }
    let head = Conv2d::new(cfg.base_channels, 1, 1, 1, 0, &mut rng);
    Ok(UNet {
        cfg: cfg.clone(),
        modality: None,
        side: None,
        seed,
        encoders,
        pools,
        bottleneck,
        decoders,
        head,
        cached_probs: None,
    })
}

impl UNet {
    /// Training forward; returns sigmoid probabilities (N, 1, S, S) and
    /// caches them for [`UNet::backward_probs`].
    pub fn forward_train(&mut self, x: Array4<f32>) -> Array4<f32> {
        let mut skips: Vec<Array4<f32>> = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (enc, pool) in self.encoders.iter_mut().zip(self.pools.iter_mut()) {
            h = enc.forward(h, true);
            skips.push(h.clone());
            h = pool.forward(h, true);
        }
        h = self.bottleneck.forward(h, true);
        for dec in self.decoders.iter_mut() {
            let skip = skips.pop().expect("skip stack aligned with decoders");
            let up = dec.up.forward(h, true);
            let cat = concatenate(Axis(1), &[up.view(), skip.view()]).unwrap();
            h = dec.convs.forward(cat, true);
        }
        let z = self.head.forward(h, true);
        let p = z.mapv(stable_sigmoid);
        self.cached_probs = Some(p.clone());
        p
    }

    /// Backpropagate ∂L/∂probabilities through the sigmoid and the network.
    pub fn backward_probs(&mut self, gprobs: Array4<f32>) {
        let p = self
            .cached_probs
            .take()
            .expect("backward_probs without forward_train");
        // dL/dz = dL/dp · p(1-p)
        let mut gz = gprobs;
        ndarray::Zip::from(&mut gz).and(&p).for_each(|g, &pv| {
            *g *= pv * (1.0 - pv);
        });
        let mut g = self.head.backward(gz);
        let mut skip_grads: Vec<Array4<f32>> = Vec::with_capacity(self.cfg.depth);
        for dec in self.decoders.iter_mut().rev() {
            let gcat = dec.convs.backward(g);
            let c_up = dec.skip_channels;
            let g_up = gcat.slice(ndarray::s![.., ..c_up, .., ..]).to_owned();
            let g_skip = gcat.slice(ndarray::s![.., c_up.., .., ..]).to_owned();
            skip_grads.push(g_skip);
            g = dec.up.backward(g_up);
        }
        g = self.bottleneck.backward(g);
        // decoders were walked shallowest-first above, so skip_grads pops
        // deepest-first to pair with the encoder walk below
        for (enc, pool) in self
            .encoders
            .iter_mut()
            .zip(self.pools.iter_mut())
            .rev()
        {
            let mut g_enc_out = pool.backward(g);
            let g_skip = skip_grads.pop().expect("skip gradient per level");
            g_enc_out += &g_skip;
            g = enc.backward(g_enc_out);
        }
    }

    /// Inference probabilities (dropout off, no caching).
    pub fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let mut skips: Vec<Array4<f32>> = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (enc, pool) in self.encoders.iter().zip(self.pools.iter()) {
            h = enc.infer(h);
            skips.push(h.clone());
            h = pool.infer(h);
        }
        h = self.bottleneck.infer(h);
        for dec in self.decoders.iter() {
            let skip = skips.pop().unwrap();
            let up = dec.up.infer(h);
            let cat = concatenate(Axis(1), &[up.view(), skip.view()]).unwrap();
            h = dec.convs.infer(cat);
        }
        self.head.infer(h).mapv(stable_sigmoid)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        for d in &mut self.decoders {
            v.extend(d.up.params_mut());
            v.extend(d.convs.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        for e in &self.encoders {
            v.extend(e.params());
        }
        v.extend(self.bottleneck.params());
        for d in &self.decoders {
            v.extend(d.up.params());
            v.extend(d.convs.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.w.len()).sum()
    }

    fn save_state(&self) -> Vec<ArrayD<f32>> {
        let mut out = Vec::new();
        for e in &self.encoders {
            e.save_state(&mut out);
        }
        self.bottleneck.save_state(&mut out);
        for d in &self.decoders {
            d.up.save_state(&mut out);
            d.convs.save_state(&mut out);
        }
        self.head.save_state(&mut out);
        out
    }

    fn load_state(&mut self, tensors: Vec<ArrayD<f32>>) -> Result<(), EhMaskerError> {
        let mut it = StateIter::new(tensors);
        for e in &mut self.encoders {
            e.load_state(&mut it)?;
        }
        self.bottleneck.load_state(&mut it)?;
        for d in &mut self.decoders {
            d.up.load_state(&mut it)?;
            d.convs.load_state(&mut it)?;
        }
        self.head.load_state(&mut it)?;
        it.finish()?;
        Ok(())
    }
}

fn stable_sigmoid(v: f32) -> f32 {
    // clamp keeps probabilities strictly inside (0, 1) in f32
    let p = 1.0 / (1.0 + (-v).exp());
    p.clamp(1e-7, 1.0 - 1e-7)
}

pub fn save_unet(path: &Path, model: &UNet) -> Result<(), EhMaskerError> {
    let cfg = &model.cfg;
    let mut config = vec![
        ("depth".to_string(), cfg.depth.to_string()),
        ("base_channels".to_string(), cfg.base_channels.to_string()),
        ("norm_groups".to_string(), cfg.norm_groups.to_string()),
        ("leaky_slope".to_string(), cfg.leaky_slope.to_string()),
        ("dropout_p".to_string(), cfg.dropout_p.to_string()),
        ("input_size".to_string(), cfg.input_size.to_string()),
        ("seed".to_string(), model.seed.to_string()),
    ];
    if let Some(m) = model.modality {
        config.push(("modality".to_string(), m.token().to_string()));
    }
    let ckpt = Checkpoint {
        kind: "ehmasker".into(),
        config,
        tensors: model.save_state(),
    };
    write_checkpoint(path, &ckpt)?;
    Ok(())
}

pub fn load_unet(path: &Path) -> Result<UNet, EhMaskerError> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind != "ehmasker" {
        return Err(EhMaskerError::ConfigError(format!(
            "checkpoint kind {} is not an ehmasker model",
            ckpt.kind
        )));
    }
    let cfg = UNetConfig {
        depth: ckpt.config_parse("depth")?,
        base_channels: ckpt.config_parse("base_channels")?,
        norm_groups: ckpt.config_parse("norm_groups")?,
        leaky_slope: ckpt.config_parse("leaky_slope")?,
        dropout_p: ckpt.config_parse("dropout_p")?,
        input_size: ckpt.config_parse("input_size")?,
    };
    let seed = ckpt.config_parse("seed").unwrap_or(0);
    let mut model = build_unet(&cfg, seed)?;
    model.modality = ckpt.config_get("modality").and_then(Modality::parse);
    model.load_state(ckpt.tensors)?;
    Ok(model)
}
