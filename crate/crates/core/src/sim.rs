//! Spatial information module.
//!
//! Backbone features are concatenated with the positional-encoding field and
//! passed through one of four encoder bodies. The body output feeds two
//! sibling heads: a residual correction added back onto the features, and a
//! reparameterization head producing a per-pixel Gaussian latent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::nn::{self, Conv, Linear, Params};
use crate::diffmath::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::posenc::{PeMap, D_MODEL};

pub const PE_CHANNELS: usize = 2 * D_MODEL;
/// The residual correction is squashed into `[-RESIDUAL_SCALE, RESIDUAL_SCALE]`.
pub const RESIDUAL_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimArch {
    /// Two residual blocks of 3x3 convolutions.
    Conv,
    /// Three sigmoid attention maps from 1x1, 3x3 and 5x5 branches.
    Attention,
    /// One transformer-encoder block with a single head.
    SelfAttn,
    /// One transformer-encoder block with several heads.
    #[serde(rename = "mhsa")]
    MultiheadSa,
}

impl SimArch {
    pub const ALL: [SimArch; 4] = [SimArch::Conv, SimArch::Attention, SimArch::SelfAttn, SimArch::MultiheadSa];

    pub fn as_str(self) -> &'static str {
        match self {
            SimArch::Conv => "conv",
            SimArch::Attention => "attention",
            SimArch::SelfAttn => "self-attn",
            SimArch::MultiheadSa => "mhsa",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub arch: SimArch,
    pub heads: usize,
    pub feature_channels: usize,
    pub latent_channels: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            arch: SimArch::MultiheadSa,
            heads: 4,
            feature_channels: 32,
            latent_channels: 8,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 || self.latent_channels == 0 {
            return Err(Error::Config("feature and latent channels must be >= 1".into()));
        }
        let heads = self.effective_heads();
        if heads == 0 || !self.feature_channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention width {}",
                self.feature_channels
            )));
        }
        Ok(())
    }

    fn effective_heads(&self) -> usize {
        match self.arch {
            SimArch::MultiheadSa => self.heads,
            _ => 1,
        }
    }
}

/// Per-pixel Gaussian latent `N(mu, exp(logvar))`, both `[L, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentParams {
    pub mu: Var,
    pub logvar: Var,
}

/// `z = mu + exp(logvar / 2) * noise`, differentiable in `mu` and `logvar`.
pub fn reparameterize(g: &mut Graph, lat: LatentParams, noise: Var) -> Result<Var> {
    if g.shape(noise) != g.shape(lat.mu) || g.shape(lat.logvar) != g.shape(lat.mu) {
        return Err(Error::shape(
            "reparameterize",
            format!(
                "mu {:?}, logvar {:?}, noise {:?}",
                g.shape(lat.mu),
                g.shape(lat.logvar),
                g.shape(noise)
            ),
        ));
    }
    let half = g.scale(lat.logvar, 0.5);
    let sigma = g.exp(half);
    let spread = g.mul(sigma, noise)?;
    g.add(lat.mu, spread)
}

/// Scaled dot-product self-attention over the pixels of a feature map.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    heads: Vec<[Linear; 3]>,
    out: Linear,
    head_dim: usize,
}

/// Result of an attention pass; `weights[h]` is the `[N, N]` row-stochastic map of head `h`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide attention width {width}")));
        }
        let head_dim = width / heads;
        let heads = (0..heads)
            .map(|h| {
                [
                    Linear::new(store, &format!("{name}.h{h}.query"), width, head_dim, rng),
                    Linear::new(store, &format!("{name}.h{h}.key"), width, head_dim, rng),
                    Linear::new(store, &format!("{name}.h{h}.value"), width, head_dim, rng),
                ]
            })
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), width, width, rng);
        Ok(MultiHeadAttention { heads, out, head_dim })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Attend over tokens `[N, C]`.
    pub fn forward_tokens(&self, g: &mut Graph, p: Params, tokens: Var) -> Result<AttentionOutput> {
        let width = self.head_dim * self.heads.len();
        if g.shape(tokens).len() != 2 || g.shape(tokens)[1] != width {
            return Err(Error::shape("attention", format!("tokens {:?}, width {width}", g.shape(tokens))));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for [wq, wk, wv] in &self.heads {
            let q = wq.forward(g, p, tokens)?;
            let k = wk.forward(g, p, tokens)?;
            let v = wv.forward(g, p, tokens)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, v)?);
            weights.push(attn);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let out = self.out.forward(g, p, cat)?;
        Ok(AttentionOutput { out, weights })
    }

    /// Attend over the pixels of a `[C, H, W]` map; the output has the same shape.
    pub fn forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<AttentionOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("attention", format!("{s:?}")));
        }
        let tokens = nn::to_tokens(g, x)?;
        let res = self.forward_tokens(g, p, tokens)?;
        let out = nn::from_tokens(g, res.out, s[1], s[2])?;
        Ok(AttentionOutput { out, weights: res.weights })
    }
}

#[derive(Clone, Debug)]
enum Body {
    Conv(Vec<[Conv; 2]>),
    Attention { branches: [Conv; 3], fuse: Conv },
    Transformer { attn: MultiHeadAttention, ffn: [Linear; 2] },
}

/// The spatial information module's parameters and structure.
#[derive(Clone, Debug)]
pub struct Sim {
    pub cfg: SimConfig,
    in_proj: Conv,
    body: Body,
    out_proj: Conv,
    mu_head: Conv,
    logvar_head: Conv,
    params: Vec<ParamId>,
}

/// Output of [`Sim::forward`].
#[derive(Clone, Copy, Debug)]
pub struct SimOutput {
    /// Space-aware features `[C, H, W]`.
    pub features: Var,
    pub latent: LatentParams,
}

impl Sim {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: SimConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let first = store.len();
        let c = cfg.feature_channels;
        let in_proj = Conv::new(store, "sim.in_proj", c + PE_CHANNELS, c, 1, rng);
        let body = match cfg.arch {
            SimArch::Conv => Body::Conv(
                (0..2)
                    .map(|b| {
                        let a = Conv::new(store, &format!("sim.block{b}.conv_a"), c, c, 3, rng);
                        let bconv = Conv::new(store, &format!("sim.block{b}.conv_b"), c, c, 3, rng);
                        bconv.scale_init(store, 0.5);
                        [a, bconv]
                    })
                    .collect(),
            ),
            SimArch::Attention => Body::Attention {
                branches: [1, 3, 5].map(|k| Conv::new(store, &format!("sim.att{k}x{k}"), c, c, k, rng)),
                fuse: Conv::new(store, "sim.att_fuse", 3 * c, c, 1, rng),
            },
            SimArch::SelfAttn | SimArch::MultiheadSa => Body::Transformer {
                attn: MultiHeadAttention::new(store, "sim.attn", c, cfg.effective_heads(), rng)?,
                ffn: [
                    Linear::new(store, "sim.ffn1", c, 2 * c, rng),
                    Linear::new(store, "sim.ffn2", 2 * c, c, rng),
                ],
            },
        };
        let out_proj = Conv::new(store, "sim.out_proj", c, c, 1, rng);
        out_proj.scale_init(store, 0.1);
        let mu_head = Conv::new(store, "sim.mu", c, cfg.latent_channels, 1, rng);
        mu_head.scale_init(store, 0.1);
        let logvar_head = Conv::new(store, "sim.logvar", c, cfg.latent_channels, 1, rng);
        logvar_head.scale_init(store, 0.1);
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Sim {
            cfg,
            in_proj,
            body,
            out_proj,
            mu_head,
            logvar_head,
            params,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Parameters of the first layer that read the positional channels.
    pub fn pe_weight(&self) -> ParamId {
        self.in_proj.weight
    }

    /// Zero the residual head so that the output features equal the input.
    pub fn zero_residual(&self, store: &mut ParamStore) {
        self.out_proj.zero(store);
    }

    /// Run the module on `features` `[C, H, W]` with an optional encoding
    /// field; `None` feeds an all-zero field of the same width.
    pub fn forward(&self, g: &mut Graph, p: Params, features: Var, pe: Option<&PeMap>) -> Result<SimOutput> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[0] != self.cfg.feature_channels {
            return Err(Error::shape(
                "sim_forward",
                format!("features {s:?}, expected {} channels", self.cfg.feature_channels),
            ));
        }
        let (h, w) = (s[1], s[2]);
        let pe_values = match pe {
            Some(m) => {
                if m.height() != h || m.width() != w {
                    return Err(Error::shape(
                        "sim_forward",
                        format!("encoding {}x{} vs features {h}x{w}", m.height(), m.width()),
                    ));
                }
                m.values.clone()
            }
            None => Tensor::zeros(&[PE_CHANNELS, h, w]),
        };
        let pe_var = g.constant(pe_values);
        let input = g.concat(&[features, pe_var], 0)?;
        let h0 = self.in_proj.forward(g, p, input)?;
        let h0 = g.relu(h0);
        let trunk = self.body_forward(g, p, h0)?;
        let delta = self.out_proj.forward(g, p, trunk)?;
        let delta = g.tanh(delta);
        let delta = g.scale(delta, RESIDUAL_SCALE);
        let out = g.add(features, delta)?;
        let mu = self.mu_head.forward(g, p, trunk)?;
        let logvar = self.logvar_head.forward(g, p, trunk)?;
        Ok(SimOutput {
            features: out,
            latent: LatentParams { mu, logvar },
        })
    }

    fn body_forward(&self, g: &mut Graph, p: Params, x: Var) -> Result<Var> {
        match &self.body {
            Body::Conv(blocks) => {
                let mut h = x;
                for [a, b] in blocks {
                    let t = a.forward(g, p, h)?;
                    let t = g.relu(t);
                    let t = b.forward(g, p, t)?;
                    let sum = g.add(h, t)?;
                    h = g.relu(sum);
                }
                Ok(h)
            }
            Body::Attention { branches, fuse } => {
                let mut gated = Vec::with_capacity(3);
                for br in branches {
                    let a = br.forward(g, p, x)?;
                    let a = g.sigmoid(a);
                    gated.push(g.mul(a, x)?);
                }
                let cat = g.concat(&gated, 0)?;
                let f = fuse.forward(g, p, cat)?;
                let f = g.relu(f);
                g.add(x, f)
            }
            Body::Transformer { attn, ffn } => {
                let s = g.shape(x).to_vec();
                let tokens = nn::to_tokens(g, x)?;
                let a = attn.forward_tokens(g, p, tokens)?;
                let t1 = g.add(tokens, a.out)?;
                let f = ffn[0].forward(g, p, t1)?;
                let f = g.relu(f);
                let f = ffn[1].forward(g, p, f)?;
                let t2 = g.add(t1, f)?;
                nn::from_tokens(g, t2, s[1], s[2])
            }
        }
    }
}
