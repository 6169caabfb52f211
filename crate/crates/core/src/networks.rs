//! Encoder, generator, classifier, discriminator and the frozen label
//! embedding, bundled with the spatial information module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::nn::{self, Conv, Params};
use crate::diffmath::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::sim::{Sim, SimConfig, RESIDUAL_SCALE};

/// Width of every class embedding.
pub const EMBED_DIM: usize = 600;
/// Spatial reduction of the encoder.
pub const DOWNSAMPLE: usize = 4;
/// Encoder outputs are squashed into `[-FEATURE_SCALE, FEATURE_SCALE]`,
/// which keeps pairwise feature distances in the useful range of the
/// unit-bandwidth kernel.
pub const FEATURE_SCALE: f64 = 0.25;
/// Bound on every feature coordinate after the SIM residual; the generator
/// output shares it.
pub const FEATURE_BOUND: f64 = FEATURE_SCALE + RESIDUAL_SCALE;

/// Frozen class-id -> vector lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub names: Vec<String>,
    /// `[K, dim]`.
    pub vectors: Tensor,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let k = vectors.len();
        if k == 0 || names.len() != k {
            return Err(Error::shape("embedding_table", format!("{} names, {k} vectors", names.len())));
        }
        let dim = vectors[0].len();
        if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(Error::shape(
                "embedding_table",
                format!("entry {i} has {} components, expected {dim}", v.len()),
            ));
        }
        let data = vectors.into_iter().flatten().collect();
        Ok(EmbeddingTable {
            names,
            vectors: Tensor::new(vec![k, dim], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn get(&self, id: u16) -> Result<&[f64]> {
        let id = id as usize;
        if id >= self.len() {
            return Err(Error::UnknownClass(id));
        }
        let d = self.dim();
        Ok(&self.vectors.data()[id * d..(id + 1) * d])
    }

    pub fn id_of(&self, name: &str) -> Option<u16> {
        self.names.iter().position(|n| n == name).map(|i| i as u16)
    }
}

/// Per-pixel embedding lookup; ignore pixels map to zero.
pub fn map_labels(y: &LabelMap, table: &EmbeddingTable) -> Result<Tensor> {
    let (h, w, d) = (y.height(), y.width(), table.dim());
    let plane = h * w;
    let mut data = vec![0.0; d * plane];
    for (i, &id) in y.data().iter().enumerate() {
        if id == IGNORE {
            continue;
        }
        for (ch, &v) in table.get(id)?.iter().enumerate() {
            data[ch * plane + i] = v;
        }
    }
    Tensor::new(vec![d, h, w], data)
}

/// Three 3x3 conv blocks with two 2x2 average pools between them.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: [Conv; 3],
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, out_channels: usize, rng: &mut R) -> Self {
        Encoder {
            convs: [
                Conv::new(store, "enc.conv1", 3, 16, 3, rng),
                Conv::new(store, "enc.conv2", 16, 32, 3, rng),
                Conv::new(store, "enc.conv3", 32, out_channels, 3, rng),
            ],
        }
    }

    pub fn first_layer(&self) -> ParamId {
        self.convs[0].weight
    }

    pub fn forward(&self, g: &mut Graph, p: Params, image: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("encode", format!("image {s:?}, expected [3, H, W]")));
        }
        if s[1] < DOWNSAMPLE || s[2] < DOWNSAMPLE || !s[1].is_multiple_of(DOWNSAMPLE) || !s[2].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::shape(
                "encode",
                format!("extent {}x{} must be a positive multiple of {DOWNSAMPLE}", s[1], s[2]),
            ));
        }
        // no activation between blocks: features stay additive in colour and texture
        let h = self.convs[0].forward(g, p, image)?;
        let h = nn::avg_pool2(g, h)?;
        let h = self.convs[1].forward(g, p, h)?;
        let h = nn::avg_pool2(g, h)?;
        let h = self.convs[2].forward(g, p, h)?;
        let h = g.tanh(h);
        Ok(g.scale(h, FEATURE_SCALE))
    }
}

/// Rebuilds each `DOWNSAMPLE x DOWNSAMPLE` image patch from the encoder
/// feature at that cell. Only used to pretrain the encoder.
#[derive(Clone, Debug)]
pub struct Decoder {
    conv: Conv,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, rng: &mut R) -> Self {
        Decoder {
            conv: Conv::new(store, "dec.conv", in_channels, 3 * DOWNSAMPLE * DOWNSAMPLE, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Params, f: Var) -> Result<Var> {
        self.conv.forward(g, p, f)
    }
}

/// `[3, H, W] -> [3 * D * D, H / D, W / D]` with channel order
/// `(colour, row in patch, column in patch)`.
pub fn space_to_depth(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    let d = DOWNSAMPLE;
    if s.len() != 3 || !s[1].is_multiple_of(d) || !s[2].is_multiple_of(d) {
        return Err(Error::shape("space_to_depth", format!("{s:?}")));
    }
    let (c, h, w) = (s[0], s[1] / d, s[2] / d);
    Ok(Tensor::from_fn(&[c * d * d, h, w], |i| {
        let (ch, r, col) = (i / (h * w), i / w % h, i % w);
        let (k, dr, dc) = (ch / (d * d), ch / d % d, ch % d);
        image.at(&[k, r * d + dr, col * d + dc])
    }))
}

/// Per-pixel synthesis `e ⊕ z -> F̂`.
#[derive(Clone, Debug)]
pub struct Generator {
    layers: [Conv; 3],
    embed_gain: f64,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed_dim: usize,
        latent: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        Generator {
            layers: [
                Conv::new(store, "gen.fc1", embed_dim + latent, hidden, 1, rng),
                Conv::new(store, "gen.fc2", hidden, hidden, 1, rng),
                Conv::new(store, "gen.fc3", hidden, out_channels, 1, rng),
            ],
            // unit-norm embeddings spread over many channels; lift them to the latent's scale
            embed_gain: (embed_dim as f64).sqrt(),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Params, e: Var, z: Var) -> Result<Var> {
        let (se, sz) = (g.shape(e).to_vec(), g.shape(z).to_vec());
        if se.len() != 3 || sz.len() != 3 || se[1..] != sz[1..] {
            return Err(Error::shape("generate", format!("e {se:?}, z {sz:?}")));
        }
        let e = g.scale(e, self.embed_gain);
        let x = g.concat(&[e, z], 0)?;
        let h = self.layers[0].forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.layers[2].forward(g, p, h)?;
        let h = g.tanh(h);
        Ok(g.scale(h, FEATURE_BOUND))
    }
}

/// Two 1x1 layers producing `K` logits per pixel.
#[derive(Clone, Debug)]
pub struct Classifier {
    layers: [Conv; 2],
    pub num_classes: usize,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_channels: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Classifier {
            layers: [
                Conv::new(store, "cls.fc1", in_channels, hidden, 1, rng),
                Conv::new(store, "cls.fc2", hidden, num_classes, 1, rng),
            ],
            num_classes,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Params, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 3 || s[0] != self.layers[0].c_in {
            return Err(Error::shape(
                "classify",
                format!("features {s:?}, expected {} channels", self.layers[0].c_in),
            ));
        }
        let h = self.layers[0].forward(g, p, f)?;
        let h = g.relu(h);
        self.layers[1].forward(g, p, h)
    }
}

/// Per-pixel probability that a feature column is real.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: [Conv; 2],
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        Discriminator {
            layers: [
                Conv::new(store, "disc.fc1", in_channels, hidden, 1, rng),
                Conv::new(store, "disc.fc2", hidden, 1, 1, rng),
            ],
        }
    }

    pub fn zero_final(&self, store: &mut ParamStore) {
        self.layers[1].zero(store);
    }

    pub fn forward(&self, g: &mut Graph, p: Params, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 3 || s[0] != self.layers[0].c_in {
            return Err(Error::shape(
                "discriminate",
                format!("features {s:?}, expected {} channels", self.layers[0].c_in),
            ));
        }
        let h = self.layers[0].forward(g, p, f)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub sim: SimConfig,
    /// Hidden width of the generator, classifier and discriminator.
    pub hidden: usize,
    pub num_classes: usize,
}

impl NetConfig {
    pub fn feature_channels(&self) -> usize {
        self.sim.feature_channels
    }
}

/// Parameter ids of each network, for optimizers and freeze checks.
#[derive(Clone, Debug, Default)]
pub struct ParamGroups {
    pub encoder: Vec<ParamId>,
    pub sim: Vec<ParamId>,
    pub generator: Vec<ParamId>,
    pub classifier: Vec<ParamId>,
    pub discriminator: Vec<ParamId>,
    pub decoder: Vec<ParamId>,
}

/// All networks plus their shared parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub cfg: NetConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub sim: Sim,
    pub generator: Generator,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
    pub decoder: Decoder,
    pub embeddings: EmbeddingTable,
    pub groups: ParamGroups,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(cfg: NetConfig, embeddings: EmbeddingTable, rng: &mut R) -> Result<Self> {
        if embeddings.len() != cfg.num_classes {
            return Err(Error::Config(format!(
                "embedding table has {} classes, config expects {}",
                embeddings.len(),
                cfg.num_classes
            )));
        }
        let c = cfg.feature_channels();
        let mut store = ParamStore::new();
        let mut mark = 0;
        let mut take = |store: &ParamStore| {
            let ids = (mark..store.len()).map(ParamId).collect::<Vec<_>>();
            mark = store.len();
            ids
        };
        let encoder = Encoder::new(&mut store, c, rng);
        let enc_ids = take(&store);
        let sim = Sim::new(&mut store, cfg.sim, rng)?;
        let sim_ids = take(&store);
        let generator = Generator::new(&mut store, embeddings.dim(), cfg.sim.latent_channels, cfg.hidden, c, rng);
        let gen_ids = take(&store);
        let classifier = Classifier::new(&mut store, c, cfg.hidden, cfg.num_classes, rng);
        let cls_ids = take(&store);
        let discriminator = Discriminator::new(&mut store, c, cfg.hidden, rng);
        let disc_ids = take(&store);
        let decoder = Decoder::new(&mut store, c, rng);
        let dec_ids = take(&store);
        Ok(ModelBundle {
            cfg,
            store,
            encoder,
            sim,
            generator,
            classifier,
            discriminator,
            decoder,
            embeddings,
            groups: ParamGroups {
                encoder: enc_ids,
                sim: sim_ids,
                generator: gen_ids,
                classifier: cls_ids,
                discriminator: disc_ids,
                decoder: dec_ids,
            },
        })
    }
}
