//! Objective terms and the pseudo-label weighting rules.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::sim::LatentParams;

/// Probabilities entering a logarithm are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 100.0,
            beta: 50.0,
            temperature: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "alpha {}, beta {} and temperature {} must be > 0",
                self.alpha, self.beta, self.temperature
            )));
        }
        Ok(())
    }
}

/// KL divergence of `N(mu, exp(logvar))` from `N(0, 1)`, averaged over latent sites.
pub fn kld_standard_normal(g: &mut Graph, lat: LatentParams) -> Result<Var> {
    if !g.value(lat.mu).all_finite() || !g.value(lat.logvar).all_finite() {
        return Err(Error::NonFinite("latent mean or log-variance".into()));
    }
    let mu2 = g.square(lat.mu)?;
    let var = g.exp(lat.logvar);
    // var + mu^2 - 1 - logvar
    let a = g.add(var, mu2)?;
    let b = g.sub(a, lat.logvar)?;
    let c = g.add_scalar(b, -1.0);
    let m = g.mean_all(c);
    Ok(g.scale(m, 0.5))
}

/// A loss value together with the number of pixels that contributed.
#[derive(Clone, Copy, Debug)]
pub struct Supported {
    pub loss: Var,
    pub support: usize,
}

impl Supported {
    /// True when no pixel contributed and the loss is the constant 0.
    pub fn is_empty(&self) -> bool {
        self.support == 0
    }
}

/// Weighted mean of `-log softmax(logits)[y]` over labelled pixels.
///
/// Pixels labelled [`IGNORE`] or with weight 0 are skipped.
pub fn cross_entropy(g: &mut Graph, logits: Var, y: &LabelMap, pixel_weights: Option<&Tensor>) -> Result<Supported> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[1] != y.height() || s[2] != y.width() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {s:?}, labels {}x{}", y.height(), y.width()),
        ));
    }
    let (k, n) = (s[0], s[1] * s[2]);
    if let Some(w) = pixel_weights {
        if w.len() != n {
            return Err(Error::shape("cross_entropy", format!("weights {:?} for {n} pixels", w.shape())));
        }
        if let Some(bad) = w.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel weight {bad} outside [0, 1]")));
        }
    }
    let mut total = 0.0;
    let mut support = 0;
    for (i, &c) in y.data().iter().enumerate() {
        if c == IGNORE {
            continue;
        }
        if c as usize >= k {
            return Err(Error::ClassOutOfRange { id: c as usize, classes: k });
        }
        let w = pixel_weights.map_or(1.0, |w| w.data()[i]);
        if w > 0.0 {
            total += w;
            support += 1;
        }
    }
    if support == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(Supported { loss: zero, support });
    }
    let mut mask = vec![0.0; k * n];
    for (i, &c) in y.data().iter().enumerate() {
        if c == IGNORE {
            continue;
        }
        let w = pixel_weights.map_or(1.0, |w| w.data()[i]);
        mask[c as usize * n + i] = w / total;
    }
    let mask = g.constant(Tensor::new(s.clone(), mask)?);
    let logp = g.log_softmax(logits, 0)?;
    let picked = g.mul(logp, mask)?;
    let sum = g.sum_all(picked);
    Ok(Supported {
        loss: g.neg(sum),
        support,
    })
}

/// Squared MMD between two sets of row vectors `[n, C]` and `[m, C]` under
/// the kernel `exp(-|a - b|^2 / 2)`, using the biased estimator.
pub fn mmd_sets(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("mmd", format!("{sa:?} vs {sb:?}")));
    }
    let kaa = kernel_mean(g, a, a)?;
    let kbb = kernel_mean(g, b, b)?;
    let kab = kernel_mean(g, a, b)?;
    let same = g.add(kaa, kbb)?;
    let cross = g.scale(kab, 2.0);
    g.sub(same, cross)
}

fn kernel_mean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let a2 = g.square(a)?;
    let na = g.sum(a2, 1)?;
    let b2 = g.square(b)?;
    let nb = g.sum(b2, 1)?;
    let nb = g.transpose(nb)?;
    let bt = g.transpose(b)?;
    let dot = g.matmul(a, bt)?;
    let dot = g.scale(dot, -2.0);
    let d = g.add(na, nb)?;
    let d = g.add(d, dot)?;
    let d = g.scale(d, -0.5);
    let k = g.exp(d);
    Ok(g.mean_all(k))
}

/// Sum over seen classes present in `y` of the per-class MMD between real
/// and synthetic feature columns. Classes without pixels are skipped.
pub fn mmd_loss(g: &mut Graph, real: Var, fake: Var, y: &LabelMap, seen: &BTreeSet<u16>) -> Result<Supported> {
    let (sr, sf) = (g.shape(real).to_vec(), g.shape(fake).to_vec());
    if sr.len() != 3 || sr != sf || sr[1] != y.height() || sr[2] != y.width() {
        return Err(Error::shape(
            "mmd_loss",
            format!("real {sr:?}, fake {sf:?}, labels {}x{}", y.height(), y.width()),
        ));
    }
    let c = sr[0];
    let rt = g.reshape(real, &[c, sr[1] * sr[2]])?;
    let rt = g.transpose(rt)?;
    let ft = g.reshape(fake, &[c, sr[1] * sr[2]])?;
    let ft = g.transpose(ft)?;
    let mut terms = Vec::new();
    let mut support = 0;
    for &cls in seen {
        let idx = y.pixels_of(cls);
        if idx.is_empty() {
            continue;
        }
        support += idx.len();
        let a = g.index_select(rt, 0, &idx)?;
        let b = g.index_select(ft, 0, &idx)?;
        terms.push(mmd_sets(g, a, b)?);
    }
    let loss = match terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        1 => terms[0],
        _ => {
            let cat = g.concat(&terms, 0)?;
            g.sum_all(cat)
        }
    };
    Ok(Supported { loss, support })
}

/// Adversarial objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    /// `mean log D(real) + mean log(1 - D(fake))`; the discriminator ascends it.
    pub adv: Var,
    /// `mean log(1 - D(fake))`; the generator descends it.
    pub generator: Var,
}

pub fn adversarial_losses(g: &mut Graph, d_real: Var, d_fake: Var) -> AdversarialLosses {
    let r = g.clamp(d_real, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lr = g.log(r);
    let real_term = g.mean_all(lr);
    let generator = fake_term(g, d_fake);
    let adv = g.add(real_term, generator).expect("scalars broadcast");
    AdversarialLosses { adv, generator }
}

/// `mean log(1 - D(fake))` on its own, for generator steps that never touch real features.
pub fn fake_term(g: &mut Graph, d_fake: Var) -> Var {
    let f = g.clamp(d_fake, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let nf = g.neg(f);
    let one_minus = g.add_scalar(nf, 1.0);
    let lf = g.log(one_minus);
    g.mean_all(lf)
}

/// Annealed weights `exp((p_i - max p) / T)`; the most confident pixel gets 1.
pub fn ast_weights(confidence: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let max = confidence.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(confidence.map(|p| ((p - max) / temperature).exp()))
}

/// [`ast_weights`] restricted to the pixels where `mask` is set; other
/// pixels get weight 0. The maximum is taken over masked pixels only.
pub fn ast_weights_masked(confidence: &Tensor, mask: &[bool], temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    if mask.len() != confidence.len() {
        return Err(Error::shape("ast_weights", format!("{} mask entries for {}", mask.len(), confidence.len())));
    }
    let max = confidence
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = confidence.clone();
    for (w, &m) in out.data_mut().iter_mut().zip(mask) {
        *w = if m { ((*w - max) / temperature).exp() } else { 0.0 };
    }
    Ok(out)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be > 0, got {t}")))
    }
}

/// Selection of the most confident pseudo-labelled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StMask {
    pub mask: Vec<bool>,
    /// Set when there were no candidate pixels at all.
    pub empty: bool,
}

/// Keep the `ceil(keep_fraction * N)` most confident pixels.
pub fn st_mask(confidence: &Tensor, keep_fraction: f64) -> Result<StMask> {
    st_mask_among(confidence, &vec![true; confidence.len()], keep_fraction)
}

/// [`st_mask`] over the candidate pixels only; ties go to the lower
/// row-major index.
pub fn st_mask_among(confidence: &Tensor, candidates: &[bool], keep_fraction: f64) -> Result<StMask> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Domain(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    if candidates.len() != confidence.len() {
        return Err(Error::shape("st_mask", format!("{} candidates for {}", candidates.len(), confidence.len())));
    }
    let mut idx: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i]).collect();
    let mut mask = vec![false; candidates.len()];
    if idx.is_empty() {
        return Ok(StMask { mask, empty: true });
    }
    let conf = confidence.data();
    idx.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    let keep = ((keep_fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
    for &i in &idx[..keep] {
        mask[i] = true;
    }
    Ok(StMask { mask, empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(g: &mut Graph, mu: f64, lv: f64) -> LatentParams {
        LatentParams {
            mu: g.constant(Tensor::full(&[2, 2, 2], mu)),
            logvar: g.constant(Tensor::full(&[2, 2, 2], lv)),
        }
    }

    #[test]
    fn kld_examples() {
        let mut g = Graph::new();
        let l = lat(&mut g, 0.0, 0.0);
        let k = kld_standard_normal(&mut g, l).unwrap();
        assert_eq!(g.value(k).data()[0], 0.0);
        let l = lat(&mut g, 1.0, 0.0);
        let k = kld_standard_normal(&mut g, l).unwrap();
        assert!((g.value(k).data()[0] - 0.5).abs() < 1e-15);
        let l = lat(&mut g, 0.0, 1.0);
        let k = kld_standard_normal(&mut g, l).unwrap();
        assert!((g.value(k).data()[0] - (std::f64::consts::E - 2.0) / 2.0).abs() < 1e-15);
        let l = lat(&mut g, f64::NAN, 0.0);
        assert!(kld_standard_normal(&mut g, l).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let y = LabelMap::new(1, 2, vec![0, 4]).unwrap();
        let logits = g.constant(Tensor::zeros(&[5, 1, 2]));
        let ce = cross_entropy(&mut g, logits, &y, None).unwrap();
        assert!((g.value(ce.loss).data()[0] - 5f64.ln()).abs() < 1e-12);

        let mut sharp = Tensor::full(&[2, 1, 2], -1e4);
        sharp.set(&[0, 0, 0], 0.0);
        sharp.set(&[1, 0, 1], 0.0);
        let sharp = g.constant(sharp);
        let y2 = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let ce = cross_entropy(&mut g, sharp, &y2, None).unwrap();
        assert_eq!(g.value(ce.loss).data()[0], 0.0);

        let ign = LabelMap::filled(1, 2, IGNORE);
        let ce = cross_entropy(&mut g, logits, &ign, None).unwrap();
        assert!(ce.is_empty());
        assert_eq!(g.value(ce.loss).data()[0], 0.0);

        let bad = LabelMap::new(1, 2, vec![0, 5]).unwrap();
        assert!(cross_entropy(&mut g, logits, &bad, None).is_err());
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let mut g = Graph::new();
        let logits = g.constant(Tensor::randn(&[4, 3, 3], 1.0, &mut rng));
        let y = LabelMap::new(3, 3, vec![0, 1, 2, 3, IGNORE, 0, 1, 2, 3]).unwrap();
        let a = cross_entropy(&mut g, logits, &y, None).unwrap();
        let b = cross_entropy(&mut g, logits, &y, Some(&Tensor::ones(&[3, 3]))).unwrap();
        assert_eq!(g.value(a.loss).data()[0].to_bits(), g.value(b.loss).data()[0].to_bits());
    }

    #[test]
    fn mmd_singletons() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let m = mmd_sets(&mut g, a, b).unwrap();
        assert!((g.value(m).data()[0] - (2.0 - 2.0 * (-1f64).exp())).abs() < 1e-12);
        let z = mmd_sets(&mut g, a, a).unwrap();
        assert!(g.value(z).data()[0].abs() < 1e-12);
    }

    #[test]
    fn mmd_skips_absent_classes() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::zeros(&[2, 1, 2]));
        let fake = g.constant(Tensor::ones(&[2, 1, 2]));
        let y = LabelMap::new(1, 2, vec![0, 0]).unwrap();
        let seen: BTreeSet<u16> = [1, 2].into();
        let m = mmd_loss(&mut g, real, fake, &y, &seen).unwrap();
        assert!(m.is_empty());
        assert_eq!(g.value(m.loss).data()[0], 0.0);
    }

    #[test]
    fn adversarial_at_half() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::full(&[1, 2, 2], 0.5));
        let l = adversarial_losses(&mut g, h, h);
        assert!((g.value(l.adv).data()[0] - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ast_examples() {
        let w = ast_weights(&Tensor::from_vec(vec![0.9, 0.5]), 2.0).unwrap();
        assert_eq!(w.data()[0], 1.0);
        assert!((w.data()[1] - (-0.2f64).exp()).abs() < 1e-12);
        let w = ast_weights(&Tensor::full(&[3], 0.4), 2.0).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));
        assert!(ast_weights(&w, 0.0).is_err());
        let m = ast_weights_masked(&Tensor::from_vec(vec![0.99, 0.5, 0.7]), &[false, true, true], 1.0).unwrap();
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[2], 1.0);
    }

    #[test]
    fn st_examples() {
        let c = Tensor::from_vec(vec![0.9, 0.8, 0.7, 0.1]);
        assert_eq!(st_mask(&c, 0.75).unwrap().mask, vec![true, true, true, false]);
        assert!(st_mask(&c, 1.0).unwrap().mask.iter().all(|&m| m));
        let eq = Tensor::full(&[4], 0.3);
        assert_eq!(st_mask(&eq, 0.5).unwrap().mask, vec![true, true, false, false]);
        let none = st_mask_among(&c, &[false; 4], 0.75).unwrap();
        assert!(none.empty && none.mask.iter().all(|&m| !m));
        assert!(st_mask(&c, 0.0).is_err());
    }
}
