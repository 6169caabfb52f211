//! Full trainer state in a `SIGNCKPT` container.
//!
//! Record names:
//!
//! ```text
//! meta/kind meta/config meta/catalog meta/image_size meta/phase meta/phase_step
//! param/<name>
//! opt/<optimizer>/step_count opt/<optimizer>/m/<name> opt/<optimizer>/v/<name>
//! report/<stage>/steps report/<stage>/wall_time report/<stage>/loss/<term>
//! ```

use std::collections::BTreeMap;

use super::checkpoint::Checkpoint;
use super::data::CatalogFile;
use crate::datagen::ClassCatalog;
use crate::diffmath::{OptimizerState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::pipeline::{Phase, PipelineConfig, Stage, StageReport, Trainer};

const KIND: &[u8] = b"sign-trainer";

fn label<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .expect("unit enum")
}

fn from_label<T: serde::de::DeserializeOwned>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Checkpoint(format!("unknown tag {s}")))
}

fn optimizers(t: &Trainer) -> [(&'static str, &OptimizerState); 5] {
    [
        ("backbone", &t.opt_backbone),
        ("sim", &t.opt_sim),
        ("generator", &t.opt_gen),
        ("discriminator", &t.opt_disc),
        ("transfer", &t.opt_transfer),
    ]
}

fn optimizer_mut<'a>(t: &'a mut Trainer, name: &str) -> &'a mut OptimizerState {
    match name {
        "backbone" => &mut t.opt_backbone,
        "sim" => &mut t.opt_sim,
        "generator" => &mut t.opt_gen,
        "discriminator" => &mut t.opt_disc,
        _ => &mut t.opt_transfer,
    }
}

pub fn trainer_to_checkpoint(t: &Trainer, catalog: &ClassCatalog) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.push_bytes("meta/kind", KIND)?;
    let cfg = serde_json::to_vec(&t.cfg).expect("config serializes");
    ck.push_bytes("meta/config", &cfg)?;
    ck.push_bytes("meta/catalog", CatalogFile::from_catalog(catalog).to_json().as_bytes())?;
    let (h, w) = t.train_grid;
    ck.push("meta/image_size", vec![2], vec![(h * crate::networks::DOWNSAMPLE) as f32, (w * crate::networks::DOWNSAMPLE) as f32])?;
    ck.push_bytes("meta/phase", label(&t.phase).as_bytes())?;
    ck.push_count("meta/phase_step", t.phase_step as u64)?;
    let store = &t.model.store;
    for id in store.ids() {
        ck.push_tensor(format!("param/{}", store.name(id)), store.value(id))?;
    }
    for (name, opt) in optimizers(t) {
        ck.push_count(format!("opt/{name}/step_count"), opt.step_count as u64)?;
        for (&id, (m, v)) in opt.params().iter().zip(&opt.adam_moments) {
            ck.push_tensor(format!("opt/{name}/m/{}", store.name(id)), m)?;
            ck.push_tensor(format!("opt/{name}/v/{}", store.name(id)), v)?;
        }
    }
    for r in &t.reports {
        let s = label(&r.stage);
        ck.push_count(format!("report/{s}/steps"), r.steps as u64)?;
        ck.push_scalar(format!("report/{s}/wall_time"), r.wall_time)?;
        for (term, series) in &r.loss_series {
            ck.push(
                format!("report/{s}/loss/{term}"),
                vec![series.len()],
                series.iter().map(|&v| v as f32).collect(),
            )?;
        }
    }
    Ok(ck)
}

fn restore_tensor(ck: &Checkpoint, name: &str, target: &Tensor) -> Result<Tensor> {
    let t = ck.tensor(name)?;
    if t.shape() != target.shape() {
        return Err(Error::shape(
            "checkpoint",
            format!("{name} has shape {:?}, model expects {:?}", t.shape(), target.shape()),
        ));
    }
    Ok(t)
}

fn restore_store(ck: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let name = format!("param/{}", store.name(*id));
        let t = restore_tensor(ck, &name, store.value(*id))?;
        store.set(*id, t)?;
    }
    let stored = ck.names_with_prefix("param/").count();
    if stored != ids.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {stored} parameters, model has {}",
            ids.len()
        )));
    }
    Ok(())
}

/// Rebuild a trainer and its catalog from a checkpoint.
pub fn trainer_from_checkpoint(ck: &Checkpoint) -> Result<(Trainer, ClassCatalog)> {
    if ck.bytes("meta/kind")? != KIND {
        return Err(Error::Checkpoint("not a trainer checkpoint".into()));
    }
    let cfg: PipelineConfig = serde_json::from_slice(&ck.bytes("meta/config")?)
        .map_err(|e| Error::Checkpoint(format!("bad meta/config: {e}")))?;
    let text = String::from_utf8(ck.bytes("meta/catalog")?)
        .map_err(|_| Error::Checkpoint("meta/catalog is not UTF-8".into()))?;
    let catalog = CatalogFile::parse(&text, std::path::Path::new("meta/catalog"))?.to_catalog()?;
    let size = match ck.require("meta/image_size")?.data.as_slice() {
        &[h, w] => (h as usize, w as usize),
        _ => return Err(Error::Checkpoint("meta/image_size must hold two extents".into())),
    };
    let mut t = Trainer::new(cfg, &catalog, size)?;
    restore_store(ck, &mut t.model.store)?;
    for name in ["backbone", "sim", "generator", "discriminator", "transfer"] {
        let step_count = ck.count(&format!("opt/{name}/step_count"))? as usize;
        let mut moments = Vec::new();
        let opt = optimizers(&t).into_iter().find(|(n, _)| *n == name).expect("known optimizer").1;
        for (&id, (m, v)) in opt.params().iter().zip(&opt.adam_moments) {
            let pname = t.model.store.name(id);
            moments.push((
                restore_tensor(ck, &format!("opt/{name}/m/{pname}"), m)?,
                restore_tensor(ck, &format!("opt/{name}/v/{pname}"), v)?,
            ));
        }
        let opt = optimizer_mut(&mut t, name);
        opt.step_count = step_count;
        opt.adam_moments = moments;
    }
    let phase: Phase = from_label(&String::from_utf8_lossy(&ck.bytes("meta/phase")?))?;
    t.phase = phase;
    t.phase_step = ck.count("meta/phase_step")? as usize;
    let mut reports: BTreeMap<String, StageReport> = BTreeMap::new();
    let mut order = Vec::new();
    for name in ck.names_with_prefix("report/") {
        let rest = &name["report/".len()..];
        let (stage, field) = rest
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("bad report record {name}")))?;
        if !reports.contains_key(stage) {
            let s: Stage = from_label(stage)?;
            reports.insert(stage.to_string(), StageReport::new(s, t.cfg.seed, &[]));
            order.push(stage.to_string());
        }
        let r = reports.get_mut(stage).expect("inserted");
        match field {
            "steps" => r.steps = ck.count(name)? as usize,
            "wall_time" => r.wall_time = ck.scalar(name)?,
            _ => {
                let term = field
                    .strip_prefix("loss/")
                    .ok_or_else(|| Error::Checkpoint(format!("bad report record {name}")))?;
                let data = &ck.require(name)?.data;
                r.loss_series.insert(term.to_string(), data.iter().map(|&v| v as f64).collect());
            }
        }
    }
    t.reports = order.into_iter().map(|s| reports.remove(&s).expect("present")).collect();
    Ok((t, catalog))
}
