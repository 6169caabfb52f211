//! Staged optimisation: joint SIM/generator training, classifier transfer on
//! synthetic unseen-class features, and one round of self-training.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::seq::index;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClassCatalog, Sample};
use crate::diffmath::nn::Params;
use crate::diffmath::{softmax_tensor, Graph, OptimizerState, ParamId, Tensor, Var, DEFAULT_POLY_POWER};
use crate::error::{Error, Result};
use crate::eval::{gzsl_report, per_class_iou, ConfusionMatrix, GzslReport};
use crate::labels::{LabelMap, IGNORE};
use crate::losses::{self, LossWeights};
use crate::networks::{map_labels, space_to_depth, ModelBundle, NetConfig, DOWNSAMPLE};
use crate::posenc::{build_pe_map, PeMap, PeMode};
use crate::seeds;
use crate::sim::{reparameterize, LatentParams, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Backbone,
    Sim,
    G,
    Transfer,
    SelfTrain,
}

impl Stage {
    fn code(self) -> u64 {
        match self {
            Stage::Backbone => 10,
            Stage::Sim => 11,
            Stage::G => 12,
            Stage::Transfer => 13,
            Stage::SelfTrain => 14,
        }
    }
}

/// Which positional encoding, if any, feeds the spatial information module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeChoice {
    None,
    Rpe,
    Ape,
    ApeInterp,
}

impl PeChoice {
    pub const ALL: [PeChoice; 4] = [PeChoice::None, PeChoice::Ape, PeChoice::ApeInterp, PeChoice::Rpe];

    pub fn mode(self) -> Option<PeMode> {
        match self {
            PeChoice::None => None,
            PeChoice::Rpe => Some(PeMode::Rpe),
            PeChoice::Ape => Some(PeMode::Ape),
            PeChoice::ApeInterp => Some(PeMode::ApeInterp),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PeChoice::None => "none",
            PeChoice::Rpe => "rpe",
            PeChoice::Ape => "ape",
            PeChoice::ApeInterp => "ape-interp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    St,
    Ast,
}

/// Update rule for the encoder, SIM and classifier in the joint stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MainOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Adam for the encoder and patch decoder during pretraining.
    pub backbone: f64,
    /// Encoder, SIM and classifier in the joint stage.
    pub sim: f64,
    /// Adam for the generator.
    pub generator: f64,
    /// Adam for the discriminator.
    pub discriminator: f64,
    /// SGD for the classifier during transfer.
    pub transfer: f64,
    /// SGD for the classifier during self-training.
    pub self_train: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            backbone: 3e-3,
            sim: 3e-3,
            generator: 1e-3,
            discriminator: 1e-3,
            transfer: 0.05,
            self_train: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepBudgets {
    /// Patch reconstruction steps before the joint stage; 0 skips them.
    pub backbone: usize,
    pub sim_g: usize,
    pub transfer: usize,
    pub self_train: usize,
}

impl Default for StepBudgets {
    fn default() -> Self {
        StepBudgets {
            backbone: 1000,
            sim_g: 1500,
            transfer: 500,
            self_train: 300,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    pub strategy: Strategy,
    pub keep_fraction: f64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            strategy: Strategy::Ast,
            keep_fraction: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub pe: PeChoice,
    pub sim: SimConfig,
    pub hidden: usize,
    pub weights: LossWeights,
    pub lr: LearningRates,
    pub poly_power: f64,
    pub main_optimizer: MainOptimizer,
    /// Keep the pretrained encoder fixed from the joint stage on.
    pub freeze_encoder: bool,
    pub steps: StepBudgets,
    pub batch_size: usize,
    pub self_train: SelfTrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            pe: PeChoice::Rpe,
            sim: SimConfig::default(),
            hidden: 64,
            weights: LossWeights::default(),
            lr: LearningRates::default(),
            poly_power: DEFAULT_POLY_POWER,
            main_optimizer: MainOptimizer::Adam,
            freeze_encoder: false,
            steps: StepBudgets::default(),
            batch_size: 4,
            self_train: SelfTrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("batch_size and hidden must be >= 1".into()));
        }
        let st = &self.self_train;
        if !(st.keep_fraction > 0.0 && st.keep_fraction <= 1.0) {
            return Err(Error::Config(format!("keep_fraction {} outside (0, 1]", st.keep_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    /// One value per step for every loss term, rounded to `f32`.
    pub loss_series: BTreeMap<String, Vec<f64>>,
    pub wall_time: f64,
    pub seed: u64,
}

impl StageReport {
    pub fn new(stage: Stage, seed: u64, terms: &[&str]) -> Self {
        StageReport {
            stage,
            steps: 0,
            loss_series: terms.iter().map(|t| (t.to_string(), Vec::new())).collect(),
            wall_time: 0.0,
            seed,
        }
    }

    fn push(&mut self, values: &[(&str, f64)], elapsed: f64) {
        for &(k, v) in values {
            self.loss_series
                .get_mut(k)
                .expect("term registered")
                .push(v as f32 as f64);
        }
        self.steps += 1;
        self.wall_time += elapsed;
    }

    /// Mean of `term` over steps `[from, to)`.
    pub fn window_mean(&self, term: &str, from: usize, to: usize) -> Option<f64> {
        let s = self.loss_series.get(term)?;
        let w = s.get(from..to.min(s.len()))?;
        (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSource {
    RandomRegion,
    RelabeledGt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLayout {
    pub label_map: LabelMap,
    pub source: LayoutSource,
}

fn components(gt: &LabelMap) -> Vec<Vec<usize>> {
    let (h, w) = (gt.height(), gt.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || gt.data()[start] == IGNORE {
            continue;
        }
        let id = gt.data()[start];
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(p - w);
            }
            if r + 1 < h {
                nbrs.push(p + w);
            }
            if c > 0 {
                nbrs.push(p - 1);
            }
            if c + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if !seen[q] && gt.data()[q] == id {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn random_rectangle<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<usize> {
    let n = h * w;
    let (lo, hi) = ((0.1 * n as f64).ceil() as usize, (0.4 * n as f64).floor() as usize);
    let fits: Vec<(usize, usize)> = (1..=h)
        .flat_map(|rh| (1..=w).map(move |rw| (rh, rw)))
        .filter(|&(rh, rw)| (lo..=hi).contains(&(rh * rw)))
        .collect();
    let (rh, rw) = fits.choose(rng).copied().unwrap_or((h, w));
    let r0 = rng.random_range(0..=h - rh);
    let c0 = rng.random_range(0..=w - rw);
    (r0..r0 + rh)
        .flat_map(|r| (c0..c0 + rw).map(move |c| r * w + c))
        .collect()
}

/// Copy `gt` and relabel one region with a uniformly drawn unseen class.
///
/// The region is a uniformly chosen 4-connected labelled component, or a
/// random rectangle covering 10-40% of the pixels when `gt` has no labels.
pub fn build_pseudo_layout<R: Rng + ?Sized>(gt: &LabelMap, unseen: &BTreeSet<u16>, rng: &mut R) -> Result<PseudoLayout> {
    let classes: Vec<u16> = unseen.iter().copied().collect();
    let class = *classes
        .choose(rng)
        .ok_or_else(|| Error::Contract("pseudo-layout needs at least one unseen class".into()))?;
    let comps = components(gt);
    let (region, source) = match comps.choose(rng) {
        Some(c) => (c.clone(), LayoutSource::RelabeledGt),
        None => (random_rectangle(gt.height(), gt.width(), rng), LayoutSource::RandomRegion),
    };
    let mut label_map = gt.clone();
    for p in region {
        label_map.data_mut()[p] = class;
    }
    Ok(PseudoLayout { label_map, source })
}

/// Graph handles of one real forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RealForward {
    pub features: Var,
    pub latent: LatentParams,
    pub logits: Var,
}

/// Terms of the joint-stage prediction objective for one image.
#[derive(Clone, Copy, Debug)]
pub struct SimLoss {
    pub total: Var,
    pub ce: Var,
    pub kld: Var,
    pub forward: RealForward,
}

/// Terms of the generator objective for one image.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adversarial: Var,
    pub mmd: Var,
}

/// What the generator step needs from the prediction step of the same batch.
#[derive(Clone, Debug)]
pub struct GInput {
    pub features: Tensor,
    pub embedding: Tensor,
    pub latent: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Backbone,
    Joint,
    Transfer,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    Halted,
}

/// Class-id sets of a catalog, shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplit {
    pub seen: BTreeSet<u16>,
    pub unseen: BTreeSet<u16>,
}

impl ClassSplit {
    pub fn of(catalog: &ClassCatalog) -> Self {
        ClassSplit {
            seen: catalog.seen.clone(),
            unseen: catalog.unseen.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: PipelineConfig,
    pub model: ModelBundle,
    pub classes: ClassSplit,
    pub opt_backbone: OptimizerState,
    pub opt_sim: OptimizerState,
    pub opt_gen: OptimizerState,
    pub opt_disc: OptimizerState,
    pub opt_transfer: OptimizerState,
    pub phase: Phase,
    /// Steps completed within the current phase.
    pub phase_step: usize,
    pub reports: Vec<StageReport>,
    /// Feature grid the model was trained on.
    pub train_grid: (usize, usize),
    feature_cache: Option<Vec<Tensor>>,
}

fn round_store(model: &mut ModelBundle) {
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

fn check_finite(stage: Stage, step: usize, terms: &[(&str, f64)]) -> Result<()> {
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::NonFinite(format!("{name} = {v} at {stage:?} step {step}"))),
        None => Ok(()),
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

impl Trainer {
    pub fn new(cfg: PipelineConfig, catalog: &ClassCatalog, image_size: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let (h0, w0) = image_size;
        if h0 % DOWNSAMPLE != 0 || w0 % DOWNSAMPLE != 0 || h0 == 0 || w0 == 0 {
            return Err(Error::Config(format!("image size {h0}x{w0} must be a multiple of {DOWNSAMPLE}")));
        }
        let net = NetConfig {
            sim: cfg.sim,
            hidden: cfg.hidden,
            num_classes: catalog.num_classes(),
        };
        let mut rng = seeds::stream(&[cfg.seed, 0x1417]);
        let mut model = ModelBundle::new(net, catalog.embeddings.clone(), &mut rng)?;
        round_store(&mut model);
        let gr = &model.groups;
        let backbone: Vec<ParamId> = gr.encoder.iter().chain(&gr.decoder).copied().collect();
        let opt_backbone = OptimizerState::adam(backbone, &model.store, cfg.lr.backbone, cfg.steps.backbone)?
            .with_f32_rounding(true);
        let enc: &[ParamId] = if cfg.freeze_encoder { &[] } else { &gr.encoder };
        let main: Vec<ParamId> = enc.iter().chain(&gr.sim).chain(&gr.classifier).copied().collect();
        let opt_sim = match cfg.main_optimizer {
            MainOptimizer::Sgd => OptimizerState::sgd_poly(main, cfg.lr.sim, cfg.steps.sim_g, cfg.poly_power)?,
            MainOptimizer::Adam => OptimizerState::adam(main, &model.store, cfg.lr.sim, cfg.steps.sim_g)?,
        }
        .with_f32_rounding(true);
        let opt_gen = OptimizerState::adam(gr.generator.clone(), &model.store, cfg.lr.generator, cfg.steps.sim_g)?
            .with_f32_rounding(true);
        let opt_disc = OptimizerState::adam(gr.discriminator.clone(), &model.store, cfg.lr.discriminator, cfg.steps.sim_g)?
            .with_f32_rounding(true);
        let opt_transfer = OptimizerState::sgd_poly(gr.classifier.clone(), cfg.lr.transfer, cfg.steps.transfer, cfg.poly_power)?
            .with_f32_rounding(true);
        let reports = vec![
            StageReport::new(Stage::Backbone, cfg.seed, &["reconstruction"]),
            StageReport::new(Stage::Sim, cfg.seed, &["ce", "kld", "total"]),
            StageReport::new(Stage::G, cfg.seed, &["adv", "generator", "mmd", "total"]),
            StageReport::new(Stage::Transfer, cfg.seed, &["ce_real", "ce_synthetic", "total"]),
        ];
        Ok(Trainer {
            cfg,
            model,
            classes: ClassSplit::of(catalog),
            opt_backbone,
            opt_sim,
            opt_gen,
            opt_disc,
            opt_transfer,
            phase: Phase::Backbone,
            phase_step: 0,
            reports,
            train_grid: (h0 / DOWNSAMPLE, w0 / DOWNSAMPLE),
            feature_cache: None,
        })
    }

    pub fn report(&self, stage: Stage) -> Option<&StageReport> {
        self.reports.iter().find(|r| r.stage == stage)
    }

    fn report_mut(&mut self, stage: Stage) -> &mut StageReport {
        if let Some(i) = self.reports.iter().position(|r| r.stage == stage) {
            return &mut self.reports[i];
        }
        self.reports.push(StageReport::new(stage, self.cfg.seed, &[]));
        self.reports.last_mut().expect("just pushed")
    }

    /// Encoding field for a feature grid, or `None` when PE is disabled.
    pub fn pe_map(&self, h: usize, w: usize) -> Result<Option<PeMap>> {
        match self.cfg.pe.mode() {
            None => Ok(None),
            Some(PeMode::ApeInterp) => build_pe_map(h, w, PeMode::ApeInterp, Some(self.train_grid)).map(Some),
            Some(mode) => build_pe_map(h, w, mode, None).map(Some),
        }
    }

    /// Encoder, SIM and classifier on one image.
    pub fn forward_real(&self, g: &mut Graph, p: Params, image: &Tensor) -> Result<RealForward> {
        let m = &self.model;
        let x = g.constant(image.clone());
        let f0 = m.encoder.forward(g, p, x)?;
        let s = g.shape(f0).to_vec();
        let pe = self.pe_map(s[1], s[2])?;
        let out = m.sim.forward(g, p, f0, pe.as_ref())?;
        let logits = m.classifier.forward(g, p, out.features)?;
        Ok(RealForward {
            features: out.features,
            latent: out.latent,
            logits,
        })
    }

    /// `CE(upsampled logits, y) + alpha * KLD` for one seen-only sample.
    pub fn sim_loss(&self, g: &mut Graph, p: Params, sample: &Sample) -> Result<SimLoss> {
        if let Some(&bad) = sample.labels.classes().iter().find(|c| !self.classes.seen.contains(c)) {
            return Err(Error::Contract(format!("class {bad} in a seen-only training batch")));
        }
        let forward = self.forward_real(g, p, &sample.image)?;
        let up = g.resize_bilinear(forward.logits, sample.labels.height(), sample.labels.width(), false)?;
        let ce = losses::cross_entropy(g, up, &sample.labels, None)?.loss;
        let kld = losses::kld_standard_normal(g, forward.latent)?;
        let weighted = g.scale(kld, self.cfg.weights.alpha);
        let total = g.add(ce, weighted)?;
        Ok(SimLoss { total, ce, kld, forward })
    }

    /// Negated adversarial objective; minimising it trains the discriminator.
    pub fn discriminator_loss(&self, g: &mut Graph, p_gen: Params, p_disc: Params, input: &GInput) -> Result<Var> {
        let m = &self.model;
        let real = g.constant(input.features.clone());
        let e = g.constant(input.embedding.clone());
        let z = g.constant(input.latent.clone());
        let fake = m.generator.forward(g, p_gen, e, z)?;
        let d_real = m.discriminator.forward(g, p_disc, real)?;
        let d_fake = m.discriminator.forward(g, p_disc, fake)?;
        let adv = losses::adversarial_losses(g, d_real, d_fake).adv;
        Ok(g.neg(adv))
    }

    /// `mean log(1 - D(G(e, z))) + beta * MMD(real, fake)`.
    pub fn generator_loss(&self, g: &mut Graph, p_gen: Params, p_disc: Params, input: &GInput) -> Result<GeneratorLoss> {
        let m = &self.model;
        let real = g.constant(input.features.clone());
        let e = g.constant(input.embedding.clone());
        let z = g.constant(input.latent.clone());
        let fake = m.generator.forward(g, p_gen, e, z)?;
        let d_fake = m.discriminator.forward(g, p_disc, fake)?;
        let adversarial = losses::fake_term(g, d_fake);
        let mmd = losses::mmd_loss(g, real, fake, &input.labels, &self.classes.seen)?.loss;
        let weighted = g.scale(mmd, self.cfg.weights.beta);
        let total = g.add(adversarial, weighted)?;
        Ok(GeneratorLoss {
            total,
            adversarial,
            mmd,
        })
    }

    fn batch(&self, stage: Stage, step: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::Contract(format!("{stage:?} needs a non-empty dataset")));
        }
        let mut rng = seeds::stream(&[self.cfg.seed, stage.code(), step as u64, 0xba7c]);
        let b = self.cfg.batch_size.min(n);
        Ok(index::sample(&mut rng, n, b).into_vec())
    }

    /// One prediction step on encoder, SIM and classifier. Returns the mean
    /// terms and, per image, the inputs of the matching generator step.
    pub fn train_step_sim(&mut self, batch: &[&Sample], step: usize) -> Result<(f64, f64, Vec<GInput>)> {
        let b = batch.len() as f64;
        self.model.store.zero_grad();
        let (mut ce_sum, mut kld_sum) = (0.0, 0.0);
        let mut g_inputs = Vec::with_capacity(batch.len());
        for (slot, sample) in batch.iter().enumerate() {
            let mut g = Graph::new();
            let loss = self.sim_loss(&mut g, Params::train(&self.model.store), sample)?;
            let scaled = g.scale(loss.total, 1.0 / b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&grads);
            ce_sum += scalar(&g, loss.ce);
            kld_sum += scalar(&g, loss.kld);

            let mu = g.value(loss.forward.latent.mu).shape().to_vec();
            let mut rng = seeds::stream(&[self.cfg.seed, Stage::G.code(), step as u64, slot as u64]);
            let noise = Tensor::from_fn(&mu, |_| rng.sample(StandardNormal));
            let mut zg = Graph::new();
            let lat = LatentParams {
                mu: zg.constant(g.value(loss.forward.latent.mu).clone()),
                logvar: zg.constant(g.value(loss.forward.latent.logvar).clone()),
            };
            let nz = zg.constant(noise);
            let z = reparameterize(&mut zg, lat, nz)?;
            let labels = sample.labels.downsample_mode(DOWNSAMPLE)?;
            g_inputs.push(GInput {
                features: g.value(loss.forward.features).clone(),
                embedding: map_labels(&labels, &self.model.embeddings)?,
                latent: zg.value(z).clone(),
                labels,
            });
        }
        let (ce, kld) = (ce_sum / b, kld_sum / b);
        check_finite(Stage::Sim, step, &[("ce", ce), ("kld", kld)])?;
        self.opt_sim.step(&mut self.model.store)?;
        Ok((ce, kld, g_inputs))
    }

    /// One discriminator ascent step then one generator descent step.
    /// Returns the mean adversarial objective, generator term and MMD.
    pub fn train_step_g(&mut self, inputs: &[GInput], step: usize) -> Result<(f64, f64, f64)> {
        let b = inputs.len() as f64;
        self.model.store.zero_grad();
        let mut adv_sum = 0.0;
        for input in inputs {
            let mut g = Graph::new();
            let store = &self.model.store;
            let loss = self.discriminator_loss(&mut g, Params::freeze(store), Params::train(store), input)?;
            adv_sum -= scalar(&g, loss);
            let scaled = g.scale(loss, 1.0 / b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&grads);
        }
        self.opt_disc.step(&mut self.model.store)?;

        self.model.store.zero_grad();
        let (mut gen_sum, mut mmd_sum) = (0.0, 0.0);
        for input in inputs {
            let mut g = Graph::new();
            let store = &self.model.store;
            let loss = self.generator_loss(&mut g, Params::train(store), Params::freeze(store), input)?;
            gen_sum += scalar(&g, loss.adversarial);
            mmd_sum += scalar(&g, loss.mmd);
            let scaled = g.scale(loss.total, 1.0 / b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&grads);
        }
        let out = (adv_sum / b, gen_sum / b, mmd_sum / b);
        check_finite(Stage::G, step, &[("adv", out.0), ("generator", out.1), ("mmd", out.2)])?;
        self.opt_gen.step(&mut self.model.store)?;
        Ok(out)
    }

    /// Mean squared error of rebuilding each image patch from its feature.
    pub fn reconstruction_loss(&self, g: &mut Graph, p: Params, image: &Tensor) -> Result<Var> {
        let m = &self.model;
        let x = g.constant(image.clone());
        let f = m.encoder.forward(g, p, x)?;
        let rebuilt = m.decoder.forward(g, p, f)?;
        let target = g.constant(space_to_depth(image)?);
        let d = g.sub(rebuilt, target)?;
        let sq = g.square(d)?;
        Ok(g.mean_all(sq))
    }

    /// One encoder pretraining step; returns the mean reconstruction error.
    pub fn backbone_step(&mut self, images: &[&Tensor], step: usize) -> Result<f64> {
        let b = images.len() as f64;
        self.model.store.zero_grad();
        let mut sum = 0.0;
        for image in images {
            let mut g = Graph::new();
            let loss = self.reconstruction_loss(&mut g, Params::train(&self.model.store), image)?;
            sum += scalar(&g, loss);
            let scaled = g.scale(loss, 1.0 / b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&grads);
        }
        let mse = sum / b;
        check_finite(Stage::Backbone, step, &[("reconstruction", mse)])?;
        self.opt_backbone.step(&mut self.model.store)?;
        Ok(mse)
    }

    fn joint_step(&mut self, train: &[Sample]) -> Result<()> {
        let step = self.phase_step;
        let t0 = Instant::now();
        let idx = self.batch(Stage::Sim, step, train.len())?;
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let (ce, kld, inputs) = self.train_step_sim(&batch, step)?;
        let t1 = Instant::now();
        let alpha = self.cfg.weights.alpha;
        self.report_mut(Stage::Sim)
            .push(&[("ce", ce), ("kld", kld), ("total", ce + alpha * kld)], (t1 - t0).as_secs_f64());
        let (adv, gen, mmd) = self.train_step_g(&inputs, step)?;
        let beta = self.cfg.weights.beta;
        self.report_mut(Stage::G).push(
            &[("adv", adv), ("generator", gen), ("mmd", mmd), ("total", gen + beta * mmd)],
            t1.elapsed().as_secs_f64(),
        );
        Ok(())
    }

    /// Features of every image after the encoder and SIM.
    pub fn real_features(&self, samples: &[Sample]) -> Result<Vec<Tensor>> {
        samples
            .iter()
            .map(|s| {
                let mut g = Graph::new();
                let fwd = self.forward_real(&mut g, Params::freeze(&self.model.store), &s.image)?;
                Ok(g.value(fwd.features).clone())
            })
            .collect()
    }

    /// Synthetic features for a layout, with `z` drawn from the prior.
    pub fn synthesize<R: Rng + ?Sized>(&self, layout: &LabelMap, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.constant(map_labels(layout, &self.model.embeddings)?);
        let l = self.cfg.sim.latent_channels;
        let z = g.constant(Tensor::from_fn(&[l, layout.height(), layout.width()], |_| {
            rng.sample(StandardNormal)
        }));
        let f = self.model.generator.forward(&mut g, Params::freeze(&self.model.store), e, z)?;
        Ok(g.value(f).clone())
    }

    /// Classifier loss on real features at full resolution plus synthetic
    /// features over a pseudo-layout at feature resolution.
    pub fn transfer_loss(
        &self,
        g: &mut Graph,
        p: Params,
        real: &Tensor,
        labels: &LabelMap,
        synthetic: &Tensor,
        layout: &LabelMap,
    ) -> Result<(Var, Var, Var)> {
        let c = &self.model.classifier;
        let fr = g.constant(real.clone());
        let lr = c.forward(g, p, fr)?;
        let up = g.resize_bilinear(lr, labels.height(), labels.width(), false)?;
        let ce_real = losses::cross_entropy(g, up, labels, None)?.loss;
        let fs = g.constant(synthetic.clone());
        let ls = c.forward(g, p, fs)?;
        let ce_syn = losses::cross_entropy(g, ls, layout, None)?.loss;
        let total = g.add(ce_real, ce_syn)?;
        Ok((total, ce_real, ce_syn))
    }

    /// One classifier step on a real batch and one pseudo-layout per image.
    pub fn transfer_step(&mut self, train: &[Sample], step: usize) -> Result<(f64, f64)> {
        if self.feature_cache.is_none() {
            self.feature_cache = Some(self.real_features(train)?);
        }
        let idx = self.batch(Stage::Transfer, step, train.len())?;
        let b = idx.len() as f64;
        self.model.store.zero_grad();
        let (mut real_sum, mut syn_sum) = (0.0, 0.0);
        for (slot, &i) in idx.iter().enumerate() {
            let mut rng = seeds::stream(&[self.cfg.seed, Stage::Transfer.code(), step as u64, slot as u64]);
            let down = train[i].labels.downsample_mode(DOWNSAMPLE)?;
            let layout = build_pseudo_layout(&down, &self.classes.unseen, &mut rng)?;
            let synthetic = self.synthesize(&layout.label_map, &mut rng)?;
            let real = &self.feature_cache.as_ref().expect("cache filled")[i];
            let mut g = Graph::new();
            let (total, ce_real, ce_syn) = self.transfer_loss(
                &mut g,
                Params::train(&self.model.store),
                real,
                &train[i].labels,
                &synthetic,
                &layout.label_map,
            )?;
            real_sum += scalar(&g, ce_real);
            syn_sum += scalar(&g, ce_syn);
            let scaled = g.scale(total, 1.0 / b);
            let grads = g.backward(scaled)?;
            self.model.store.accumulate(&grads);
        }
        let out = (real_sum / b, syn_sum / b);
        check_finite(Stage::Transfer, step, &[("ce_real", out.0), ("ce_synthetic", out.1)])?;
        self.opt_transfer.step(&mut self.model.store)?;
        Ok(out)
    }

    /// Total steps completed across the backbone, joint and transfer phases.
    pub fn global_step(&self) -> usize {
        let s = &self.cfg.steps;
        match self.phase {
            Phase::Backbone => self.phase_step,
            Phase::Joint => s.backbone + self.phase_step,
            Phase::Transfer => s.backbone + s.sim_g + self.phase_step,
            Phase::Done => s.backbone + s.sim_g + s.transfer,
        }
    }

    /// Continue the joint and transfer phases from wherever training stands.
    /// With `halt_at`, stop once that many total steps are complete.
    pub fn run(&mut self, train: &[Sample], halt_at: Option<usize>) -> Result<RunStatus> {
        loop {
            if halt_at.is_some_and(|h| self.global_step() >= h) && self.phase != Phase::Done {
                return Ok(RunStatus::Halted);
            }
            match self.phase {
                Phase::Backbone if self.phase_step >= self.cfg.steps.backbone => {
                    self.phase = Phase::Joint;
                    self.phase_step = 0;
                }
                Phase::Backbone => {
                    let t0 = Instant::now();
                    let idx = self.batch(Stage::Backbone, self.phase_step, train.len())?;
                    let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].image).collect();
                    let mse = self.backbone_step(&images, self.phase_step)?;
                    self.report_mut(Stage::Backbone)
                        .push(&[("reconstruction", mse)], t0.elapsed().as_secs_f64());
                    self.phase_step += 1;
                }
                Phase::Joint if self.phase_step >= self.cfg.steps.sim_g => {
                    self.phase = Phase::Transfer;
                    self.phase_step = 0;
                }
                Phase::Joint => {
                    self.joint_step(train)?;
                    self.phase_step += 1;
                }
                Phase::Transfer if self.phase_step >= self.cfg.steps.transfer => {
                    self.phase = Phase::Done;
                    self.phase_step = 0;
                    self.feature_cache = None;
                }
                Phase::Transfer => {
                    let t0 = Instant::now();
                    let (r, s) = self.transfer_step(train, self.phase_step)?;
                    self.report_mut(Stage::Transfer).push(
                        &[("ce_real", r), ("ce_synthetic", s), ("total", r + s)],
                        t0.elapsed().as_secs_f64(),
                    );
                    self.phase_step += 1;
                }
                Phase::Done => return Ok(RunStatus::Finished),
            }
        }
    }

    /// Per-pixel class probabilities `[K, H, W]` at image resolution.
    pub fn probabilities(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = self.forward_real(&mut g, Params::freeze(&self.model.store), image)?;
        let s = image.shape();
        let up = g.resize_bilinear(fwd.logits, s[1], s[2], false)?;
        Ok(softmax_tensor(g.value(up), 0, false))
    }

    /// Arg-max labels and max-probability confidences at image resolution.
    pub fn predict(&self, image: &Tensor) -> Result<(LabelMap, Tensor)> {
        let probs = self.probabilities(image)?;
        let (k, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        let n = h * w;
        let d = probs.data();
        let mut labels = Vec::with_capacity(n);
        let mut conf = Vec::with_capacity(n);
        for i in 0..n {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            labels.push(best as u16);
            conf.push(d[best * n + i]);
        }
        Ok((LabelMap::new(h, w, labels)?, Tensor::new(vec![h, w], conf)?))
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation> {
        let mut cm = ConfusionMatrix::new(self.classes.num_classes());
        for s in samples {
            let (pred, _) = self.predict(&s.image)?;
            cm.accumulate(&pred, &s.labels)?;
        }
        let gzsl = gzsl_report(&cm, &self.classes.seen, &self.classes.unseen)?;
        Ok(Evaluation {
            per_class_iou: per_class_iou(&cm),
            cm,
            gzsl,
        })
    }

    /// Pseudo-labels for one unlabelled image: pixels predicted as an unseen
    /// class, weighted by the chosen strategy. Other pixels are ignored.
    pub fn pseudo_label(&self, image: &Tensor, st: &SelfTrainConfig, temperature: f64) -> Result<(LabelMap, Tensor)> {
        let (pred, conf) = self.predict(image)?;
        let candidates: Vec<bool> = pred.data().iter().map(|c| self.classes.unseen.contains(c)).collect();
        let weights = match st.strategy {
            Strategy::St => {
                let m = losses::st_mask_among(&conf, &candidates, st.keep_fraction)?;
                Tensor::new(
                    conf.shape().to_vec(),
                    m.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                )?
            }
            Strategy::Ast => {
                if candidates.iter().any(|&c| c) {
                    losses::ast_weights_masked(&conf, &candidates, temperature)?
                } else {
                    Tensor::zeros(conf.shape())
                }
            }
        };
        let mut labels = pred;
        for (l, &w) in labels.data_mut().iter_mut().zip(weights.data()) {
            if w == 0.0 {
                *l = IGNORE;
            }
        }
        Ok((labels, weights))
    }

    /// Fine-tune the classifier on pseudo-labelled unlabelled images mixed
    /// with labelled seen-class images.
    pub fn self_train_round(&mut self, unlabeled: &[Sample], labeled: &[Sample]) -> Result<StageReport> {
        if unlabeled.is_empty() {
            return Err(Error::Contract("self-training needs unlabelled images".into()));
        }
        let st = self.cfg.self_train;
        let temperature = self.cfg.weights.temperature;
        let t_start = Instant::now();
        let pseudo = unlabeled
            .iter()
            .map(|s| self.pseudo_label(&s.image, &st, temperature))
            .collect::<Result<Vec<_>>>()?;
        let feats_u = self.real_features(unlabeled)?;
        let feats_l = self.real_features(labeled)?;
        let steps = self.cfg.steps.self_train;
        let mut opt = OptimizerState::sgd_poly(self.model.groups.classifier.clone(), self.cfg.lr.self_train, steps, self.cfg.poly_power)?
            .with_f32_rounding(true);
        let mut report = StageReport::new(Stage::SelfTrain, self.cfg.seed, &["ce_pseudo", "ce_seen", "total"]);
        report.wall_time = t_start.elapsed().as_secs_f64();
        for step in 0..steps {
            let t0 = Instant::now();
            let iu = self.batch(Stage::SelfTrain, step, unlabeled.len())?;
            let il = if labeled.is_empty() {
                Vec::new()
            } else {
                self.batch(Stage::Sim, usize::MAX - step, labeled.len())?
            };
            let b = iu.len() as f64;
            self.model.store.zero_grad();
            let (mut pu, mut ps) = (0.0, 0.0);
            for (slot, &i) in iu.iter().enumerate() {
                let mut g = Graph::new();
                let p = Params::train(&self.model.store);
                let c = &self.model.classifier;
                let fu = g.constant(feats_u[i].clone());
                let lu = c.forward(&mut g, p, fu)?;
                let (labels, weights) = &pseudo[i];
                let up = g.resize_bilinear(lu, labels.height(), labels.width(), false)?;
                let ce_u = losses::cross_entropy(&mut g, up, labels, Some(weights))?.loss;
                let mut total = ce_u;
                pu += scalar(&g, ce_u);
                if let Some(&j) = il.get(slot) {
                    let fl = g.constant(feats_l[j].clone());
                    let ll = c.forward(&mut g, p, fl)?;
                    let y = &labeled[j].labels;
                    let up = g.resize_bilinear(ll, y.height(), y.width(), false)?;
                    let ce_l = losses::cross_entropy(&mut g, up, y, None)?.loss;
                    ps += scalar(&g, ce_l);
                    total = g.add(total, ce_l)?;
                }
                let scaled = g.scale(total, 1.0 / b);
                let grads = g.backward(scaled)?;
                self.model.store.accumulate(&grads);
            }
            let (pu, ps) = (pu / b, ps / b);
            check_finite(Stage::SelfTrain, step, &[("ce_pseudo", pu), ("ce_seen", ps)])?;
            opt.step(&mut self.model.store)?;
            report.push(&[("ce_pseudo", pu), ("ce_seen", ps), ("total", pu + ps)], t0.elapsed().as_secs_f64());
        }
        Ok(report)
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cm: ConfusionMatrix,
    pub gzsl: GzslReport,
    pub per_class_iou: BTreeMap<u16, f64>,
}
