#![allow(dead_code)]

use std::collections::BTreeSet;
use std::time::Instant;

use sign::cli::config::RunConfig;
use sign::cli::state::{trainer_from_checkpoint, trainer_to_checkpoint};
use sign::cli::checkpoint::Checkpoint;
use sign::cli::{cmd_ablate, default_values};
use sign::datagen::{generate_dataset, make_class_catalog, render_sample, DataConfig, Dataset, Split};
use sign::diffmath::nn::{avg_pool2, from_tokens, to_tokens, Params};
use sign::diffmath::{check_params, finite_difference_check, GradCheckReport, Graph, ParamId, Tensor, Var};
use sign::eval::{gzsl_report, ConfusionMatrix};
use sign::losses::{adversarial_losses, ast_weights, cross_entropy, kld_standard_normal, mmd_loss, mmd_sets};
use sign::networks::map_labels;
use sign::pipeline::{build_pseudo_layout, GInput, PeChoice, PipelineConfig, StepBudgets, Strategy, Trainer};
use sign::posenc::{build_pe_map, PeMode};
use sign::sim::{reparameterize, LatentParams, SimArch};
use sign::{seeds, LabelMap, Result, IGNORE};

pub const REL: f64 = 1e-3;
pub const ABS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn line(&self, id: &str) -> String {
        format!("criterion {id}: {} ({})", if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Fixed random projection of `y` onto a scalar.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = seeds::stream(&[seed, 0x9e0]);
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum_all(p))
}

type OpFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// One differentiable operation under test: a name, an input point and a
/// scalar-valued closure of that input.
pub struct OpCase {
    pub name: &'static str,
    pub point: Tensor,
    pub f: OpFn,
}

fn case(name: &'static str, point: Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        point,
        f: Box::new(f),
    }
}

/// Every graph operation, each wrapped to produce a scalar.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = seeds::stream(&[seed, 0xc1]);
    let mut n = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let pos = |t: Tensor| t.map(|v| 0.5 + v.abs());
    let s = seed;
    let mut out = Vec::new();

    macro_rules! binary {
        ($name:literal, $name_b:literal, $op:ident, $big:expr, $small:expr) => {{
            let c = $small;
            out.push(case($name, $big, move |g, x| {
                let k = g.constant(c.clone());
                let y = g.$op(x, k)?;
                project(g, y, s)
            }));
            let c = $big;
            out.push(case($name_b, $small, move |g, x| {
                let k = g.constant(c.clone());
                let y = g.$op(k, x)?;
                project(g, y, s)
            }));
        }};
    }
    binary!("add", "add-broadcast", add, n(&[3, 4]), n(&[1, 4]));
    binary!("sub", "sub-broadcast", sub, n(&[3, 4]), n(&[3, 1]));
    binary!("mul", "mul-broadcast", mul, n(&[2, 3, 4]), n(&[3, 4]));
    binary!("div-numerator", "div-denominator", div, pos(n(&[3, 4])), pos(n(&[1, 4])));

    macro_rules! unary {
        ($name:literal, $point:expr, |$g:ident, $x:ident| $body:expr) => {{
            out.push(case($name, $point, move |$g, $x| {
                let y = $body;
                project($g, y, s)
            }));
        }};
    }
    unary!("exp", n(&[3, 4]), |g, x| g.exp(x));
    unary!("log", pos(n(&[3, 4])), |g, x| g.log(x));
    unary!("relu", n(&[3, 4]), |g, x| g.relu(x));
    unary!("sigmoid", n(&[3, 4]), |g, x| g.sigmoid(x));
    unary!("tanh", n(&[3, 4]), |g, x| g.tanh(x));
    unary!("clamp", n(&[3, 4]), |g, x| g.clamp(x, -0.5, 0.5));
    unary!("square", n(&[3, 4]), |g, x| g.square(x)?);
    unary!("scale", n(&[3, 4]), |g, x| g.scale(x, -1.7));
    unary!("neg", n(&[3, 4]), |g, x| g.neg(x));
    unary!("add_scalar", n(&[3, 4]), |g, x| g.add_scalar(x, 0.3));
    unary!("sum-axis", n(&[3, 4, 2]), |g, x| g.sum(x, 1)?);
    unary!("mean-axis", n(&[3, 4, 2]), |g, x| g.mean(x, 2)?);
    unary!("max-axis", n(&[3, 4, 2]), |g, x| g.max(x, 1)?);
    unary!("reshape", n(&[3, 4]), |g, x| g.reshape(x, &[2, 6])?);
    unary!("permute", n(&[2, 3, 4]), |g, x| g.permute(x, &[2, 0, 1])?);
    unary!("transpose", n(&[3, 4]), |g, x| g.transpose(x)?);
    unary!("index_select", n(&[4, 3]), |g, x| g.index_select(x, 0, &[2, 0, 2])?);
    unary!("softmax", n(&[4, 3]), |g, x| g.softmax(x, 0)?);
    unary!("log_softmax", n(&[4, 3]), |g, x| g.log_softmax(x, 1)?);
    unary!("resize-align", n(&[2, 3, 4]), |g, x| g.resize_bilinear(x, 5, 7, true)?);
    unary!("resize-half-pixel", n(&[2, 3, 4]), |g, x| g.resize_bilinear(x, 5, 7, false)?);
    unary!("resize-shrink", n(&[2, 5, 6]), |g, x| g.resize_bilinear(x, 2, 3, false)?);
    unary!("avg_pool2", n(&[2, 4, 6]), |g, x| avg_pool2(g, x)?);
    unary!("to_tokens", n(&[3, 2, 4]), |g, x| to_tokens(g, x)?);
    unary!("from_tokens", n(&[8, 3]), |g, x| from_tokens(g, x, 2, 4)?);

    out.push(case("sum_all", n(&[3, 4]), move |g, x| {
        let y = g.square(x)?;
        Ok(g.sum_all(y))
    }));
    out.push(case("mean_all", n(&[3, 4]), move |g, x| {
        let y = g.exp(x);
        Ok(g.mean_all(y))
    }));

    let b = n(&[4, 2]);
    out.push(case("matmul-left", n(&[3, 4]), move |g, x| {
        let k = g.constant(b.clone());
        let y = g.matmul(x, k)?;
        project(g, y, s)
    }));
    let a = n(&[3, 4]);
    out.push(case("matmul-right", n(&[4, 2]), move |g, x| {
        let k = g.constant(a.clone());
        let y = g.matmul(k, x)?;
        project(g, y, s)
    }));
    let other = n(&[3, 2]);
    out.push(case("concat", n(&[3, 4]), move |g, x| {
        let k = g.constant(other.clone());
        let y = g.concat(&[x, k], 1)?;
        project(g, y, s)
    }));

    let kernel = n(&[3, 2, 3, 3]);
    out.push(case("conv2d-input-s2p1", n(&[2, 5, 5]), move |g, x| {
        let k = g.constant(kernel.clone());
        let y = g.conv2d(x, k, 2, 1)?;
        project(g, y, s)
    }));
    let image = n(&[2, 5, 5]);
    out.push(case("conv2d-kernel-s1p0", n(&[3, 2, 3, 3]), move |g, k| {
        let x = g.constant(image.clone());
        let y = g.conv2d(x, k, 1, 0)?;
        project(g, y, s)
    }));
    let image = n(&[4, 4, 4]);
    out.push(case("conv2d-pointwise", n(&[2, 4, 1, 1]), move |g, k| {
        let x = g.constant(image.clone());
        let y = g.conv2d(x, k, 1, 0)?;
        project(g, y, s)
    }));

    let (logvar, noise) = (n(&[2, 3, 3]).map(|v| 0.5 * v), n(&[2, 3, 3]));
    out.push(case("reparameterize-mu", n(&[2, 3, 3]), move |g, mu| {
        let lat = LatentParams {
            mu,
            logvar: g.constant(logvar.clone()),
        };
        let z = g.constant(noise.clone());
        let y = reparameterize(g, lat, z)?;
        project(g, y, s)
    }));
    let (mu, noise) = (n(&[2, 3, 3]), n(&[2, 3, 3]));
    out.push(case("reparameterize-logvar", n(&[2, 3, 3]).map(|v| 0.5 * v), move |g, logvar| {
        let lat = LatentParams {
            mu: g.constant(mu.clone()),
            logvar,
        };
        let z = g.constant(noise.clone());
        let y = reparameterize(g, lat, z)?;
        project(g, y, s)
    }));

    // loss building blocks
    let logvar = n(&[2, 2, 2]).map(|v| 0.5 * v);
    out.push(case("kld-mu", n(&[2, 2, 2]), move |g, mu| {
        let lat = LatentParams {
            mu,
            logvar: g.constant(logvar.clone()),
        };
        kld_standard_normal(g, lat)
    }));
    let mut rng = seeds::stream(&[seed, 0xce]);
    let labels: Vec<u16> = (0..12)
        .map(|i| if i % 5 == 4 { IGNORE } else { (rand::Rng::random_range(&mut rng, 0..4)) as u16 })
        .collect();
    let y = LabelMap::new(3, 4, labels).expect("valid labels");
    let weights = Tensor::uniform(&[3, 4], 0.1, 1.0, &mut rng);
    out.push(case("cross-entropy-weighted", n(&[4, 3, 4]), move |g, logits| {
        Ok(cross_entropy(g, logits, &y, Some(&weights))?.loss)
    }));
    let b = n(&[5, 3]);
    out.push(case("mmd-sets", n(&[4, 3]), move |g, a| {
        let k = g.constant(b.clone());
        mmd_sets(g, a, k)
    }));
    let fake = n(&[3, 2, 3]);
    let ymap = LabelMap::new(2, 3, vec![0, 1, 1, 2, 0, 1]).expect("valid labels");
    let seen: BTreeSet<u16> = [0, 1].into();
    out.push(case("mmd-per-class", n(&[3, 2, 3]), move |g, real| {
        let f = g.constant(fake.clone());
        Ok(mmd_loss(g, real, f, &ymap, &seen)?.loss)
    }));
    let d_fake = Tensor::uniform(&[6], 0.1, 0.9, &mut rng);
    out.push(case("adversarial", Tensor::uniform(&[6], 0.1, 0.9, &mut rng), move |g, d_real| {
        let f = g.constant(d_fake.clone());
        Ok(adversarial_losses(g, d_real, f).adv)
    }));
    out
}

/// Small trainer with every parameter nudged off its initial value so that
/// zero-initialised paths carry gradient too.
pub fn gradcheck_trainer(seed: u64) -> Result<(Trainer, sign::datagen::Sample)> {
    let cat = make_class_catalog(7, 3, seed)?;
    let mut cfg = PipelineConfig {
        seed,
        pe: PeChoice::ALL[(seed as usize / 4 + seed as usize) % 4],
        hidden: 8,
        ..PipelineConfig::default()
    };
    cfg.sim.arch = SimArch::ALL[seed as usize % 4];
    cfg.sim.feature_channels = 8;
    cfg.sim.latent_channels = 2;
    cfg.sim.heads = 2;
    let mut t = Trainer::new(cfg, &cat, (32, 32))?;
    let mut rng = seeds::stream(&[seed, 0x9a]);
    let ids: Vec<ParamId> = t.model.store.ids().collect();
    for id in ids {
        let v = t.model.store.value(id).clone();
        let noise = Tensor::randn(v.shape(), 0.1, &mut rng);
        let nudged = Tensor::new(v.shape().to_vec(), v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?;
        t.model.store.set(id, nudged)?;
    }
    let sample = render_sample(&cat, Split::TrainSeen, seed, seed, (32, 32))?;
    Ok((t, sample))
}

pub struct StageCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every full-stage loss against its trainable group.
pub fn stage_checks(seed: u64) -> Result<Vec<StageCheck>> {
    let (t, sample) = gradcheck_trainer(seed)?;
    let gr = &t.model.groups;
    let store = &t.model.store;
    let coords = 3;
    let mut out = Vec::new();

    let ids: Vec<ParamId> = gr.encoder.iter().chain(&gr.sim).chain(&gr.classifier).copied().collect();
    let report = check_params(store, &ids, |g, s| Ok(t.sim_loss(g, Params::train(s), &sample)?.total), REL, ABS, coords)?;
    out.push(StageCheck { name: "sim", report });

    let down = sample.labels.downsample_mode(4)?;
    let mut rng = seeds::stream(&[seed, 0x61]);
    let (c, l) = (t.cfg.sim.feature_channels, t.cfg.sim.latent_channels);
    let input = GInput {
        features: Tensor::randn(&[c, 8, 8], 0.2, &mut rng),
        embedding: map_labels(&down, &t.model.embeddings)?,
        latent: Tensor::randn(&[l, 8, 8], 1.0, &mut rng),
        labels: down.clone(),
    };
    let report = check_params(
        store,
        &gr.discriminator,
        |g, s| t.discriminator_loss(g, Params::freeze(s), Params::train(s), &input),
        REL,
        ABS,
        coords,
    )?;
    out.push(StageCheck {
        name: "discriminator",
        report,
    });
    let report = check_params(
        store,
        &gr.generator,
        |g, s| Ok(t.generator_loss(g, Params::train(s), Params::freeze(s), &input)?.total),
        REL,
        ABS,
        coords,
    )?;
    out.push(StageCheck { name: "generator", report });

    let layout = build_pseudo_layout(&down, &t.classes.unseen, &mut rng)?.label_map;
    let synthetic = t.synthesize(&layout, &mut rng)?;
    let real = Tensor::randn(&[c, 8, 8], 0.2, &mut rng);
    let report = check_params(
        store,
        &gr.classifier,
        |g, s| Ok(t.transfer_loss(g, Params::train(s), &real, &sample.labels, &synthetic, &layout)?.0),
        REL,
        ABS,
        coords,
    )?;
    out.push(StageCheck { name: "transfer", report });

    let ids: Vec<ParamId> = gr.encoder.iter().chain(&gr.decoder).copied().collect();
    let report = check_params(store, &ids, |g, s| t.reconstruction_loss(g, Params::train(s), &sample.image), REL, ABS, coords)?;
    out.push(StageCheck {
        name: "reconstruction",
        report,
    });
    Ok(out)
}

pub const GRAD_SEEDS: u64 = 10;

pub fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut checks = 0;
    for seed in 0..GRAD_SEEDS {
        for c in op_cases(seed) {
            checks += 1;
            match finite_difference_check(&c.f, &c.point, REL, ABS) {
                Ok(r) if r.pass => {}
                Ok(r) => failures.push(format!("{} seed {seed}: abs {:.2e} rel {:.2e}", c.name, r.max_abs_err, r.max_rel_err)),
                Err(e) => failures.push(format!("{} seed {seed}: {e}", c.name)),
            }
        }
        match stage_checks(seed) {
            Ok(list) => {
                for c in list {
                    checks += 1;
                    if !c.report.pass {
                        failures.push(format!(
                            "{} seed {seed}: abs {:.2e} rel {:.2e}",
                            c.name, c.report.max_abs_err, c.report.max_rel_err
                        ));
                    }
                }
            }
            Err(e) => failures.push(format!("stages seed {seed}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    let mut detail = format!("{checks} checks over {GRAD_SEEDS} seeds in {secs:.1}s");
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join(", ")));
    }
    Outcome::new(pass, detail)
}

/// Monte-Carlo estimate of the mean per-site KL and its standard error.
pub fn kld_monte_carlo(mu: &[f64], logvar: &[f64], samples: usize, seed: u64) -> (f64, f64) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seeds::stream(&[seed, 0x4c]);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mut v = 0.0;
        for (&m, &lv) in mu.iter().zip(logvar) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x = m + (0.5 * lv).exp() * eps;
            // log q(x) - log p(x)
            v += -0.5 * lv - 0.5 * eps * eps + 0.5 * x * x;
        }
        v /= mu.len() as f64;
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn kld_closed_form(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let k = mu.len();
    let lat = LatentParams {
        mu: g.constant(Tensor::new(vec![k, 1, 1], mu.to_vec())?),
        logvar: g.constant(Tensor::new(vec![k, 1, 1], logvar.to_vec())?),
    };
    let v = kld_standard_normal(&mut g, lat)?;
    g.value(v).item()
}

pub fn mmd_singleton(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let va = g.constant(Tensor::new(vec![1, a.len()], a.to_vec())?);
    let vb = g.constant(Tensor::new(vec![1, b.len()], b.to_vec())?);
    let m = mmd_sets(&mut g, va, vb)?;
    g.value(m).item()
}

pub fn criterion_2() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let (mu, logvar) = ([0.3, -1.2, 0.8], [0.4, -0.7, 0.1]);
    let (mc, se) = kld_monte_carlo(&mu, &logvar, 1_000_000, 2);
    match kld_closed_form(&mu, &logvar) {
        Ok(k) => {
            let z = (k - mc).abs() / se;
            pass &= z <= 3.0;
            notes.push(format!("KLD {k:.5} vs MC {mc:.5} ({z:.2} SE)"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("KLD: {e}"));
        }
    }
    let mut rng = seeds::stream(&[0x33]);
    let mut worst: f64 = 0.0;
    let mut worst_same: f64 = 0.0;
    for _ in 0..20 {
        let a = Tensor::randn(&[6], 0.8, &mut rng);
        let b = Tensor::randn(&[6], 0.8, &mut rng);
        let d2: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let expect = 2.0 - 2.0 * (-d2 / 2.0).exp();
        match (mmd_singleton(a.data(), b.data()), mmd_singleton(a.data(), a.data())) {
            (Ok(m), Ok(z)) => {
                worst = worst.max((m - expect).abs());
                worst_same = worst_same.max(z.abs());
            }
            _ => worst = f64::INFINITY,
        }
    }
    let set = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let (x, y) = (g.constant(set.clone()), g.constant(set));
    let same = mmd_sets(&mut g, x, y).ok().map(|m| g.value(m).data()[0]).unwrap_or(f64::INFINITY);
    worst_same = worst_same.max(same.abs());
    pass &= worst <= 1e-9 && worst_same <= 1e-9;
    notes.push(format!("MMD singleton err {worst:.1e}, identical sets {worst_same:.1e}"));

    let mut g = Graph::new();
    let half = Tensor::full(&[4], 0.5);
    let (r, f) = (g.constant(half.clone()), g.constant(half));
    let adv = adversarial_losses(&mut g, r, f).adv;
    let err = (g.value(adv).data()[0] - 2.0 * 0.5f64.ln()).abs();
    pass &= err <= 1e-9;
    notes.push(format!("adversarial at 0.5 err {err:.1e}"));
    Outcome::new(pass, notes.join("; "))
}

pub fn criterion_3() -> Outcome {
    let mut rng = seeds::stream(&[0x16]);
    let mut pass = true;
    let (mut formula, mut shift) = (0.0f64, 0.0f64);
    let mut max_is_one = true;
    let mut min_t2 = f64::INFINITY;
    let mut limit = 0.0f64;
    for _ in 0..50 {
        let p = Tensor::uniform(&[64], 0.0, 1.0, &mut rng);
        let max = p.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for t in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let Ok(w) = ast_weights(&p, t) else {
                pass = false;
                continue;
            };
            for (&wi, &pi) in w.data().iter().zip(p.data()) {
                formula = formula.max((wi - ((pi - max) / t).exp()).abs());
            }
            max_is_one &= w.data().iter().copied().fold(f64::NEG_INFINITY, f64::max) == 1.0;
            let shifted = ast_weights(&p.map(|v| v + 0.37), t).expect("finite temperature");
            shift = shift.max(w.max_abs_diff(&shifted));
            if t == 2.0 {
                min_t2 = min_t2.min(w.data().iter().copied().fold(f64::INFINITY, f64::min));
            }
        }
        let w = ast_weights(&p, 1e6).expect("finite temperature");
        limit = limit.max(w.data().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max));
    }
    pass &= formula <= 1e-12 && max_is_one && shift <= 1e-12 && min_t2 >= (-0.5f64).exp() && limit <= 1e-6;
    Outcome::new(
        pass,
        format!(
            "formula err {formula:.1e}, max==1 {max_is_one}, shift err {shift:.1e}, min(T=2) {min_t2:.4}, |w-1| at T=1e6 {limit:.1e}"
        ),
    )
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn criterion_4() -> Outcome {
    let mut norm_err = 0.0f64;
    let mut consistency = 0.0f64;
    let mut ape_gap = 0.0f64;
    let base = [(2, 2), (2, 3), (3, 5), (4, 4)];
    for &(h, w) in &base {
        let small = build_pe_map(h, w, PeMode::Rpe, None).expect("valid grid");
        for r in 0..h {
            for c in 0..w {
                norm_err = norm_err.max((norm_sq(&small.column(r, c)) - 300.0).abs());
            }
        }
        for k in [2, 3, 4] {
            let big = build_pe_map(h * k, w * k, PeMode::Rpe, None).expect("valid grid");
            for r in 0..h {
                for c in 0..w {
                    let a = small.column(r, c);
                    let b = big.column(r * k, c * k);
                    consistency = consistency.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                }
            }
        }
    }
    let (a2, a4) = (
        build_pe_map(2, 2, PeMode::Ape, None).expect("valid grid"),
        build_pe_map(4, 4, PeMode::Ape, None).expect("valid grid"),
    );
    for r in 0..2 {
        for c in 0..2 {
            let (a, b) = (a2.column(r, c), a4.column(2 * r, 2 * c));
            ape_gap = ape_gap.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    let pass = norm_err <= 1e-9 && consistency <= 1e-9 && ape_gap > 0.1;
    Outcome::new(
        pass,
        format!("norm err {norm_err:.1e}, RPE cross-size err {consistency:.1e}, APE W=2 vs W=4 gap {ape_gap:.3}"),
    )
}

/// Confusion matrix over classes {seen 0, unseen 1, sink 2} whose seen and
/// unseen IoUs are `s` and `u` exactly (in basis points).
pub fn crafted_confusion(s_bp: u64, u_bp: u64) -> ConfusionMatrix {
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for (class, hit) in [(0u16, s_bp), (1u16, u_bp)] {
        for i in 0..10_000 {
            gt.push(class);
            pred.push(if i < hit { class } else { 2 });
        }
    }
    let n = gt.len();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(
        &LabelMap::new(1, n, pred).expect("valid labels"),
        &LabelMap::new(1, n, gt).expect("valid labels"),
    )
    .expect("matching sizes");
    cm
}

pub fn criterion_5() -> Outcome {
    let seen: BTreeSet<u16> = [0].into();
    let unseen: BTreeSet<u16> = [1].into();
    let mut notes = Vec::new();
    let mut pass = true;
    for (s, u, h) in [(7862, 3312, 46.61), (7840, 2659, 39.72)] {
        match gzsl_report(&crafted_confusion(s, u), &seen, &unseen) {
            Ok(r) => {
                let got = 100.0 * r.harmonic;
                pass &= (got - h).abs() <= 0.01;
                notes.push(format!("{} -> {got:.4} (want {h})", r.row()));
            }
            Err(e) => {
                pass = false;
                notes.push(e.to_string());
            }
        }
    }
    Outcome::new(pass, notes.join("; "))
}

/// Results of one seed of the desk benchmark.
#[derive(Clone, Debug)]
pub struct SeedResult {
    pub seed: u64,
    pub transfer_unseen: f64,
    pub transfer_seen: f64,
    pub ast_harmonic: f64,
    pub st_harmonic: f64,
}

pub const BENCH_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Train on the default desk data and score after transfer; with
/// `self_train`, also score AST (T = 2) and ST (keep 0.75) rounds started
/// from the same post-transfer state.
pub fn bench_seed(seed: u64, pe: PeChoice, self_train: bool) -> Result<SeedResult> {
    let data = generate_dataset(&DataConfig::default(), seed)?;
    let cfg = PipelineConfig {
        seed,
        pe,
        ..PipelineConfig::default()
    };
    let size = (data.train[0].image.shape()[1], data.train[0].image.shape()[2]);
    let mut t = Trainer::new(cfg, &data.catalog, size)?;
    t.run(&data.train, None)?;
    let post = t.evaluate(&data.test)?.gzsl;
    let (mut ast_h, mut st_h) = (f64::NAN, f64::NAN);
    if self_train {
        let mut ast = t.clone();
        ast.cfg.self_train.strategy = Strategy::Ast;
        ast.cfg.weights.temperature = 2.0;
        ast.self_train_round(&data.unlabeled, &data.train)?;
        ast_h = ast.evaluate(&data.test)?.gzsl.harmonic;
        let mut st = t;
        st.cfg.self_train.strategy = Strategy::St;
        st.cfg.self_train.keep_fraction = 0.75;
        st.self_train_round(&data.unlabeled, &data.train)?;
        st_h = st.evaluate(&data.test)?.gzsl.harmonic;
    }
    Ok(SeedResult {
        seed,
        transfer_unseen: post.unseen,
        transfer_seen: post.seen,
        ast_harmonic: ast_h,
        st_harmonic: st_h,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Criterion 6 split into its three parts.
pub fn criterion_6() -> [Outcome; 3] {
    let budget = 600.0;
    let t0 = Instant::now();
    let rpe: Result<Vec<SeedResult>> = BENCH_SEEDS.iter().map(|&s| bench_seed(s, PeChoice::Rpe, true)).collect();
    let t_rpe = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let none: Result<Vec<SeedResult>> = BENCH_SEEDS.iter().map(|&s| bench_seed(s, PeChoice::None, false)).collect();
    let t_none = t1.elapsed().as_secs_f64();
    let (rpe, none) = match (rpe, none) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            let o = Outcome::new(false, format!("benchmark aborted: {e}"));
            return [o.clone(), o.clone(), o];
        }
    };
    let k = DataConfig::default();
    let baseline = 1.0 / (k.n_seen + k.n_unseen) as f64;
    let above = rpe.iter().filter(|r| r.transfer_unseen > baseline).count();
    let unseen: Vec<String> = rpe.iter().map(|r| format!("{:.2}", 100.0 * r.transfer_unseen)).collect();
    let timing = format!("rpe {t_rpe:.0}s, no-pe {t_none:.0}s");
    let in_time = t_rpe < budget && t_none < budget;
    let a = Outcome::new(
        above >= 4 && in_time,
        format!(
            "unseen mIoU after transfer [{}] vs baseline {:.2}: {above}/5 above; {timing}",
            unseen.join(", "),
            100.0 * baseline
        ),
    );
    let (s_rpe, s_none) = (
        mean(rpe.iter().map(|r| r.transfer_seen)),
        mean(none.iter().map(|r| r.transfer_seen)),
    );
    let b = Outcome::new(
        s_rpe > s_none && in_time,
        format!("mean seen mIoU rpe {:.2} vs none {:.2}", 100.0 * s_rpe, 100.0 * s_none),
    );
    let (h_ast, h_st) = (mean(rpe.iter().map(|r| r.ast_harmonic)), mean(rpe.iter().map(|r| r.st_harmonic)));
    let c = Outcome::new(
        h_ast >= h_st && in_time,
        format!("mean harmonic AST(T=2) {:.2} vs ST(0.75) {:.2}", 100.0 * h_ast, 100.0 * h_st),
    );
    [a, b, c]
}

/// Tiny data and budgets for contract checks.
pub fn tiny_data(seed: u64) -> Dataset {
    generate_dataset(
        &DataConfig {
            train: 6,
            unlabeled: 4,
            test: 3,
            ..DataConfig::default()
        },
        seed,
    )
    .expect("tiny dataset")
}

pub fn tiny_pipeline(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        steps: StepBudgets {
            backbone: 2,
            sim_g: 2,
            transfer: 2,
            self_train: 2,
        },
        batch_size: 2,
        hidden: 8,
        ..PipelineConfig::default()
    };
    cfg.sim.feature_channels = 8;
    cfg.sim.latent_channels = 2;
    cfg.sim.heads = 2;
    cfg
}

pub fn tiny_run_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        data: DataConfig {
            train: 6,
            unlabeled: 4,
            test: 3,
            ..DataConfig::default()
        },
        pipeline: tiny_pipeline(seed),
        ..RunConfig::default()
    }
}

pub fn bits(t: &Trainer, ids: &[ParamId]) -> Vec<Vec<u64>> {
    t.model.store.snapshot(ids)
}

/// Which parameter groups changed between two snapshots of a trainer.
pub fn changed_groups(before: &Trainer, after: &Trainer) -> Vec<&'static str> {
    let a = &before.model.groups;
    [
        ("encoder", &a.encoder),
        ("sim", &a.sim),
        ("generator", &a.generator),
        ("classifier", &a.classifier),
        ("discriminator", &a.discriminator),
        ("decoder", &a.decoder),
    ]
    .into_iter()
    .filter(|(_, ids)| bits(before, ids) != bits(after, ids))
    .map(|(n, _)| n)
    .collect()
}

pub fn all_bits(t: &Trainer) -> Vec<Vec<u64>> {
    let ids: Vec<ParamId> = t.model.store.ids().collect();
    bits(t, &ids)
}

/// Checkpoint bytes with wall-clock records dropped.
pub fn checkpoint_without_timing(t: &Trainer, data: &Dataset) -> Result<Vec<u8>> {
    let ck = trainer_to_checkpoint(t, &data.catalog)?;
    let mut kept = Checkpoint::new();
    for r in &ck.records {
        if !r.name.ends_with("/wall_time") {
            kept.push(r.name.clone(), r.shape.clone(), r.data.clone())?;
        }
    }
    Ok(kept.to_bytes())
}

pub fn freeze_contracts(freeze_encoder: bool) -> Result<Vec<String>> {
    let data = tiny_data(5);
    let mut cfg = tiny_pipeline(5);
    cfg.freeze_encoder = freeze_encoder;
    let size = (32, 32);
    let mut t = Trainer::new(cfg, &data.catalog, size)?;
    let mut problems = Vec::new();
    let mut expect = |stage: &str, before: &Trainer, after: &Trainer, want: &[&str]| {
        let got = changed_groups(before, after);
        if got != want {
            problems.push(format!("{stage}: changed {got:?}, expected {want:?}"));
        }
    };
    let s0 = t.clone();
    t.run(&data.train, Some(2))?;
    expect("backbone", &s0, &t, &["encoder", "decoder"]);
    let s1 = t.clone();
    t.run(&data.train, Some(4))?;
    let joint: &[&str] = if freeze_encoder {
        &["sim", "generator", "classifier", "discriminator"]
    } else {
        &["encoder", "sim", "generator", "classifier", "discriminator"]
    };
    expect("joint", &s1, &t, joint);
    let s2 = t.clone();
    t.run(&data.train, None)?;
    expect("transfer", &s2, &t, &["classifier"]);
    let s3 = t.clone();
    t.self_train_round(&data.unlabeled, &data.train)?;
    expect("self-train", &s3, &t, &["classifier"]);
    Ok(problems)
}

fn full_tiny_run(seed: u64) -> Result<(Trainer, Vec<u8>, String)> {
    let data = tiny_data(seed);
    let mut t = Trainer::new(tiny_pipeline(seed), &data.catalog, (32, 32))?;
    t.run(&data.train, None)?;
    t.self_train_round(&data.unlabeled, &data.train)?;
    let ck = checkpoint_without_timing(&t, &data)?;
    let row = t.evaluate(&data.test)?.gzsl.row();
    Ok((t, ck, row))
}

/// Halt mid-transfer, round-trip through checkpoint bytes, finish, and
/// compare against an uninterrupted run.
pub fn resume_matches(seed: u64) -> Result<bool> {
    let data = tiny_data(seed);
    let mut straight = Trainer::new(tiny_pipeline(seed), &data.catalog, (32, 32))?;
    straight.run(&data.train, None)?;
    let mut halted = Trainer::new(tiny_pipeline(seed), &data.catalog, (32, 32))?;
    halted.run(&data.train, Some(5))?;
    let bytes = trainer_to_checkpoint(&halted, &data.catalog)?.to_bytes();
    let (mut resumed, _) = trainer_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
    resumed.run(&data.train, None)?;
    Ok(checkpoint_without_timing(&straight, &data)? == checkpoint_without_timing(&resumed, &data)?)
}

pub fn criterion_7() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for freeze in [false, true] {
        match freeze_contracts(freeze) {
            Ok(p) if p.is_empty() => {}
            Ok(p) => {
                pass = false;
                notes.extend(p);
            }
            Err(e) => {
                pass = false;
                notes.push(e.to_string());
            }
        }
    }
    match (full_tiny_run(7), full_tiny_run(7)) {
        (Ok(a), Ok(b)) => {
            let same = all_bits(&a.0) == all_bits(&b.0) && a.1 == b.1 && a.2 == b.2;
            pass &= same;
            notes.push(format!("repeat run identical: {same}"));
        }
        _ => {
            pass = false;
            notes.push("repeat run failed".into());
        }
    }
    let data = tiny_data(3);
    let roundtrip = (|| -> Result<bool> {
        let mut t = Trainer::new(tiny_pipeline(3), &data.catalog, (32, 32))?;
        t.run(&data.train, Some(5))?;
        let a = trainer_to_checkpoint(&t, &data.catalog)?.to_bytes();
        let (back, cat) = trainer_from_checkpoint(&Checkpoint::from_bytes(&a)?)?;
        Ok(trainer_to_checkpoint(&back, &cat)?.to_bytes() == a)
    })();
    let rt = matches!(roundtrip, Ok(true));
    pass &= rt;
    notes.push(format!("save/load/save identical: {rt}"));
    let resumed = matches!(resume_matches(3), Ok(true));
    pass &= resumed;
    notes.push(format!("resume mid-transfer identical: {resumed}"));
    if pass {
        notes.insert(0, "stage freezes hold".into());
    }
    Outcome::new(pass, notes.join("; "))
}

pub fn criterion_8() -> Outcome {
    let cfg = tiny_run_config(0);
    let seeds = [0, 1];
    let mut notes = Vec::new();
    let mut pass = true;
    let pe = (cmd_ablate(&cfg, "pe", &default_values("pe"), &seeds), cmd_ablate(&cfg, "pe", &default_values("pe"), &seeds));
    match pe {
        (Ok(a), Ok(b)) => {
            let ok = a.rows.len() == 4 && a.to_csv() == b.to_csv() && a.runs.iter().all(|r| r.error.is_none());
            pass &= ok;
            notes.push(format!("pe table {} rows, repeatable {}", a.rows.len(), a.to_csv() == b.to_csv()));
        }
        _ => {
            pass = false;
            notes.push("pe sweep failed".into());
        }
    }
    let temps = default_values("temperature");
    match (cmd_ablate(&cfg, "temperature", &temps, &seeds), cmd_ablate(&cfg, "temperature", &temps, &seeds)) {
        (Ok(a), Ok(b)) => {
            let csv = a.to_csv();
            let points = csv.lines().count() - 1;
            let has_two = csv.lines().skip(1).any(|l| l.split(',').next().and_then(|v| v.parse::<f64>().ok()) == Some(2.0));
            let ok = points == 5 && has_two && csv == b.to_csv();
            pass &= ok;
            notes.push(format!("temperature csv {points} points, T=2 present {has_two}, repeatable {}", csv == b.to_csv()));
        }
        _ => {
            pass = false;
            notes.push("temperature sweep failed".into());
        }
    }
    Outcome::new(pass, notes.join("; "))
}
