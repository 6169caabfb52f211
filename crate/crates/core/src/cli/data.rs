//! On-disk dataset: `catalog.json`, one container per split and a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::config::hex;
use crate::datagen::{ClassCatalog, ClassSpec, DataConfig, Dataset, Sample, Split};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::networks::EmbeddingTable;

pub const CATALOG_FILE: &str = "catalog.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// JSON form of a class catalog, embeddings included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogFile {
    pub seed: u64,
    pub seen: BTreeSet<u16>,
    pub unseen: BTreeSet<u16>,
    pub classes: Vec<ClassSpec>,
    pub embeddings: Vec<Vec<f64>>,
}

impl CatalogFile {
    pub fn from_catalog(c: &ClassCatalog) -> Self {
        let dim = c.embeddings.dim();
        CatalogFile {
            seed: c.seed,
            seen: c.seen.clone(),
            unseen: c.unseen.clone(),
            classes: c.classes.clone(),
            embeddings: c.embeddings.vectors.data().chunks(dim).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn to_catalog(&self) -> Result<ClassCatalog> {
        let k = self.classes.len();
        if let Some(bad) = self.classes.iter().enumerate().find(|(i, c)| c.id as usize != *i) {
            return Err(Error::Config(format!("catalog class {} listed at position {}", bad.1.id, bad.0)));
        }
        if let Some(&id) = self.seen.iter().chain(&self.unseen).find(|&&id| id as usize >= k) {
            return Err(Error::ClassOutOfRange { id: id as usize, classes: k });
        }
        if self.seen.len() + self.unseen.len() != k || !self.seen.is_disjoint(&self.unseen) {
            return Err(Error::Config("seen and unseen sets must partition the classes".into()));
        }
        let names = self.classes.iter().map(|c| c.name.clone()).collect();
        Ok(ClassCatalog {
            classes: self.classes.clone(),
            embeddings: EmbeddingTable::new(names, self.embeddings.clone())?,
            seen: self.seen.clone(),
            unseen: self.unseen.clone(),
            seed: self.seed,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("catalog serializes");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_seed: u64,
    pub config: DataConfig,
    pub catalog_sha256: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

pub fn split_name(split: Split) -> &'static str {
    match split {
        Split::TrainSeen => "train-seen",
        Split::UnlabeledMixed => "unlabeled-mixed",
        Split::Test => "test",
    }
}

fn split_file(split: Split) -> String {
    format!("{}.ckpt", split_name(split))
}

/// Pack a split as `images [N, 3, H, W]`, `labels [N, H, W]` and
/// `has_unseen [N]`.
pub fn split_to_checkpoint(samples: &[Sample], size: (usize, usize)) -> Result<Checkpoint> {
    let (h, w) = size;
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.image.shape() != [3, h, w] {
            return Err(Error::shape("dataset", format!("image {:?}, expected [3, {h}, {w}]", s.image.shape())));
        }
        images.extend(s.image.data().iter().map(|&v| v as f32));
        labels.extend(s.labels.data().iter().map(|&v| v as f32));
    }
    let mut ck = Checkpoint::new();
    ck.push("images", vec![n, 3, h, w], images)?;
    ck.push("labels", vec![n, h, w], labels)?;
    ck.push(
        "has_unseen",
        vec![n],
        samples.iter().map(|s| if s.has_unseen { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok(ck)
}

pub fn split_from_checkpoint(ck: &Checkpoint) -> Result<Vec<Sample>> {
    let images = ck.require("images")?;
    let labels = ck.require("labels")?;
    let flags = ck.require("has_unseen")?;
    let (n, h, w) = match (images.shape.as_slice(), labels.shape.as_slice()) {
        (&[n, 3, h, w], &[n2, h2, w2]) if n == n2 && h == h2 && w == w2 && flags.shape == [n] => (n, h, w),
        _ => {
            return Err(Error::Checkpoint(format!(
                "inconsistent split shapes: images {:?}, labels {:?}",
                images.shape, labels.shape
            )))
        }
    };
    (0..n)
        .map(|i| {
            let px = &images.data[i * 3 * h * w..(i + 1) * 3 * h * w];
            let ids = labels.data[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&v| {
                    if v.fract() == 0.0 && (0.0..=u16::MAX as f32).contains(&v) {
                        Ok(v as u16)
                    } else {
                        Err(Error::Checkpoint(format!("label value {v} is not a class id")))
                    }
                })
                .collect::<Result<Vec<u16>>>()?;
            Ok(Sample {
                image: Tensor::new(vec![3, h, w], px.iter().map(|&v| v as f64).collect())?,
                labels: LabelMap::new(h, w, ids)?,
                has_unseen: flags.data[i] != 0.0,
            })
        })
        .collect()
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write catalog, splits and manifest into `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset, cfg: &DataConfig, data_seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let catalog = CatalogFile::from_catalog(&data.catalog).to_json();
    write(&dir.join(CATALOG_FILE), catalog.as_bytes())?;
    let size = (cfg.image_size, cfg.image_size);
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let samples = data.split(split);
        let bytes = split_to_checkpoint(samples, size)?.to_bytes();
        let file = split_file(split);
        write(&dir.join(&file), &bytes)?;
        splits.insert(
            split_name(split).to_string(),
            SplitEntry {
                file,
                count: samples.len(),
                sha256: sha(&bytes),
            },
        );
    }
    let manifest = Manifest {
        data_seed,
        config: cfg.clone(),
        catalog_sha256: sha(catalog.as_bytes()),
        splits,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Load a dataset written by [`write_dataset`], checking every digest.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read(MANIFEST_FILE)?).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    let cbytes = read(CATALOG_FILE)?;
    if sha(&cbytes) != manifest.catalog_sha256 {
        return Err(Error::Config(format!("{} does not match the manifest digest", dir.join(CATALOG_FILE).display())));
    }
    let text = String::from_utf8_lossy(&cbytes);
    let catalog = CatalogFile::parse(&text, &dir.join(CATALOG_FILE))?.to_catalog()?;
    let load = |split: Split| -> Result<Vec<Sample>> {
        let entry = manifest
            .splits
            .get(split_name(split))
            .ok_or_else(|| Error::Config(format!("manifest lacks split {}", split_name(split))))?;
        let bytes = read(&entry.file)?;
        if sha(&bytes) != entry.sha256 {
            return Err(Error::Config(format!("{} does not match the manifest digest", dir.join(&entry.file).display())));
        }
        let samples = split_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        if samples.len() != entry.count {
            return Err(Error::Config(format!("split {} holds {} samples, manifest says {}", split_name(split), samples.len(), entry.count)));
        }
        Ok(samples)
    };
    let data = Dataset {
        train: load(Split::TrainSeen)?,
        unlabeled: load(Split::UnlabeledMixed)?,
        test: load(Split::Test)?,
        catalog,
    };
    Ok((data, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_dataset;

    fn small() -> DataConfig {
        DataConfig {
            train: 3,
            unlabeled: 2,
            test: 2,
            ..DataConfig::default()
        }
    }

    #[test]
    fn catalog_round_trip() {
        let cat = crate::datagen::make_class_catalog(7, 3, 5).unwrap();
        let file = CatalogFile::from_catalog(&cat);
        let back = CatalogFile::parse(&file.to_json(), Path::new("c.json")).unwrap();
        assert_eq!(back.to_catalog().unwrap(), cat);
    }

    #[test]
    fn dataset_round_trip_and_idempotence() {
        let cfg = small();
        let data = generate_dataset(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &data, &cfg, 1).unwrap();
        assert_eq!(m.splits["train-seen"].count, 3);
        let first: Vec<Vec<u8>> = ["catalog.json", "manifest.json", "test.ckpt"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        write_dataset(dir.path(), &data, &cfg, 1).unwrap();
        for (f, b) in ["catalog.json", "manifest.json", "test.ckpt"].iter().zip(&first) {
            assert_eq!(&fs::read(dir.path().join(f)).unwrap(), b, "{f}");
        }
        let (back, _) = read_dataset(dir.path()).unwrap();
        assert_eq!(back.catalog, data.catalog);
        for (a, b) in back.train.iter().zip(&data.train) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn tampered_split_rejected() {
        let cfg = small();
        let data = generate_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data, &cfg, 2).unwrap();
        let p = dir.path().join("test.ckpt");
        let mut b = fs::read(&p).unwrap();
        let last = b.len() - 1;
        b[last] ^= 1;
        fs::write(&p, b).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Config(_))));
    }
}
