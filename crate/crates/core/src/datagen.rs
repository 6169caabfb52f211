//! Synthetic scenes of coloured, textured shapes with compositional class
//! embeddings, and ingestion of plain-text word-vector files.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::networks::{EmbeddingTable, EMBED_DIM};
use crate::seeds;

const SHAPE_BLOCK: usize = 64;
const COLOR_BLOCK: usize = 64;
const ZONE_OFFSET: usize = SHAPE_BLOCK + COLOR_BLOCK;
const BACKGROUND_DIM: usize = ZONE_OFFSET + 3;
const ATTRIBUTE_DIMS: usize = BACKGROUND_DIM + 1;
const EMBED_NOISE: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.02;
const PLACEMENT_ATTEMPTS: usize = 100;
const MIN_SIZE: usize = 9;
const MAX_SIZE: usize = 14;
const BACKGROUND_RGB: [f64; 3] = [0.25, 0.25, 0.25];
const TEXTURE_AMPLITUDE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Stripe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Top,
    Bottom,
    Any,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Stripe];
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.65, 0.3, 0.3],
            Color::Green => [0.3, 0.65, 0.3],
            Color::Blue => [0.3, 0.3, 0.65],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: Shape,
    pub color: Color,
    pub zone: Zone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: u16,
    pub name: String,
    /// `None` for the background class.
    pub attributes: Option<Attributes>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    pub classes: Vec<ClassSpec>,
    pub embeddings: EmbeddingTable,
    pub seen: BTreeSet<u16>,
    pub unseen: BTreeSet<u16>,
    pub seed: u64,
}

impl ClassCatalog {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn background(&self) -> u16 {
        0
    }

    fn objects(&self, split: Split) -> Vec<u16> {
        self.classes
            .iter()
            .filter(|c| c.attributes.is_some())
            .map(|c| c.id)
            .filter(|id| split != Split::TrainSeen || self.seen.contains(id))
            .collect()
    }
}

fn class_name(a: &Attributes) -> String {
    let shape = format!("{:?}", a.shape).to_lowercase();
    let color = format!("{:?}", a.color).to_lowercase();
    match a.zone {
        Zone::Any => format!("{color}-{shape}"),
        z => format!("{color}-{shape}-{}", format!("{z:?}").to_lowercase()),
    }
}

fn unit_rows<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn attribute_code(a: Option<&Attributes>) -> [u64; 3] {
    match a {
        None => [u64::MAX; 3],
        Some(a) => [a.shape as u64, a.color as u64, a.zone as u64],
    }
}

fn embed(a: Option<&Attributes>, shape_rows: &[Vec<f64>], color_rows: &[Vec<f64>], seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    match a {
        None => v[BACKGROUND_DIM] = 1.0,
        Some(a) => {
            v[..SHAPE_BLOCK].copy_from_slice(&shape_rows[a.shape as usize]);
            v[SHAPE_BLOCK..ZONE_OFFSET].copy_from_slice(&color_rows[a.color as usize]);
            v[ZONE_OFFSET + a.zone as usize] = 1.0;
        }
    }
    let code = attribute_code(a);
    let mut rng = seeds::stream(&[seed, 0xe3b, code[0], code[1], code[2]]);
    let noise = Normal::new(0.0, EMBED_NOISE).expect("positive sigma");
    for x in &mut v[..ATTRIBUTE_DIMS] {
        *x += noise.sample(&mut rng);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Build a catalog with `n_seen` seen classes (background and a top/bottom
/// pair included) and `n_unseen` unseen ones.
///
/// Every unseen class combines a shape and a colour that each occur in some
/// seen class.
pub fn make_class_catalog(n_seen: usize, n_unseen: usize, seed: u64) -> Result<ClassCatalog> {
    if n_seen < 4 || n_unseen < 1 {
        return Err(Error::InfeasibleSplit(format!(
            "need at least 4 seen and 1 unseen class, got {n_seen} and {n_unseen}"
        )));
    }
    let pairs: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    // background and the zone pair take three seen slots; the pair's (shape, colour) is used once
    let free_seen = n_seen - 3;
    if free_seen + n_unseen + 1 > pairs.len() {
        return Err(Error::InfeasibleSplit(format!(
            "{n_seen} seen + {n_unseen} unseen exceeds the {} attribute combinations",
            pairs.len()
        )));
    }
    let mut rng = seeds::stream(&[seed, 0xca7]);
    let mut chosen = None;
    // Prefer splits where every unseen (s, c) closes a rectangle of seen
    // classes (s, c'), (s', c'), (s', c): the shape change is then observed in
    // some colour and the colour change in some shape.
    'search: for strict in [true, false] {
        for _ in 0..1000 {
            let mut order = pairs.clone();
            order.shuffle(&mut rng);
            let zone_pair = order[0];
            let seen_objs = &order[1..1 + free_seen];
            let rest = &order[1 + free_seen..];
            let seen: BTreeSet<(Shape, Color)> = seen_objs.iter().copied().chain([zone_pair]).collect();
            let composable = |&(s, c): &(Shape, Color)| {
                if !strict {
                    return seen.iter().any(|p| p.0 == s) && seen.iter().any(|p| p.1 == c);
                }
                seen.iter().any(|&(s2, c2)| {
                    s2 != s && c2 != c && seen.contains(&(s, c2)) && seen.contains(&(s2, c))
                })
            };
            let unseen: Vec<_> = rest.iter().filter(|p| composable(p)).take(n_unseen).copied().collect();
            if unseen.len() == n_unseen {
                chosen = Some((zone_pair, seen_objs.to_vec(), unseen));
                break 'search;
            }
        }
    }
    let (zone_pair, seen_objs, unseen_objs) = chosen.ok_or_else(|| {
        Error::InfeasibleSplit(format!("no compositional split for {n_seen} seen / {n_unseen} unseen"))
    })?;

    let mut attrs: Vec<Option<Attributes>> = vec![None];
    for zone in [Zone::Top, Zone::Bottom] {
        attrs.push(Some(Attributes {
            shape: zone_pair.0,
            color: zone_pair.1,
            zone,
        }));
    }
    for &(shape, color) in seen_objs.iter().chain(&unseen_objs) {
        attrs.push(Some(Attributes {
            shape,
            color,
            zone: Zone::Any,
        }));
    }

    let mut mix_rng = seeds::stream(&[seed, 0xab]);
    let shape_rows = unit_rows(Shape::ALL.len(), SHAPE_BLOCK, &mut mix_rng);
    let color_rows = unit_rows(Color::ALL.len(), COLOR_BLOCK, &mut mix_rng);
    let classes: Vec<ClassSpec> = attrs
        .iter()
        .enumerate()
        .map(|(i, a)| ClassSpec {
            id: i as u16,
            name: a.as_ref().map_or_else(|| "background".to_string(), class_name),
            attributes: *a,
        })
        .collect();
    let vectors = attrs
        .iter()
        .map(|a| embed(a.as_ref(), &shape_rows, &color_rows, seed))
        .collect();
    let embeddings = EmbeddingTable::new(classes.iter().map(|c| c.name.clone()).collect(), vectors)?;
    Ok(ClassCatalog {
        seen: (0..n_seen as u16).collect(),
        unseen: (n_seen as u16..(n_seen + n_unseen) as u16).collect(),
        classes,
        embeddings,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TrainSeen,
    UnlabeledMixed,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainSeen, Split::UnlabeledMixed, Split::Test];

    fn code(self) -> u64 {
        match self {
            Split::TrainSeen => 1,
            Split::UnlabeledMixed => 2,
            Split::Test => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainSeen => "train-seen",
            Split::UnlabeledMixed => "unlabeled-mixed",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub has_unseen: bool,
}

fn inside(shape: Shape, size: usize, r: usize, c: usize) -> bool {
    let s = size as i64;
    let (r, c) = (r as i64, c as i64);
    match shape {
        Shape::Square => true,
        Shape::Disk => {
            let (dr, dc) = (2 * r + 1 - s, 2 * c + 1 - s);
            dr * dr + dc * dc <= s * s
        }
        Shape::Triangle => {
            // apex at the top centre, base along the bottom row
            let half = (r + 1) / 2;
            (2 * c - (s - 1)).abs() <= 2 * half + 1
        }
        Shape::Stripe => r >= s / 3 && r < s - s / 3,
    }
}

/// Per-shape grey offset added to the fill colour on every channel: a
/// shape-specific brightness plus a +-TEXTURE_AMPLITUDE pattern.
fn texture(shape: Shape, r: usize, c: usize) -> f64 {
    let (base, on) = match shape {
        Shape::Square => return -0.15,
        Shape::Disk => (0.15, (r / 2 + c / 2).is_multiple_of(2)),
        Shape::Triangle => (-0.05, r.is_multiple_of(2)),
        Shape::Stripe => (0.05, c.is_multiple_of(2)),
    };
    if on {
        base + TEXTURE_AMPLITUDE
    } else {
        base - TEXTURE_AMPLITUDE
    }
}

/// Render scene `index` of `split`. The result depends only on
/// `(catalog, split, index, seed)` and the image size.
pub fn render_sample(catalog: &ClassCatalog, split: Split, index: u64, seed: u64, size: (usize, usize)) -> Result<Sample> {
    let (h, w) = size;
    if h < MAX_SIZE * 2 || w < MAX_SIZE {
        return Err(Error::Config(format!("image size {h}x{w} too small for {MAX_SIZE}px shapes")));
    }
    let mut rng = seeds::stream(&[seed, split.code(), index]);
    let objects = catalog.objects(split);
    let mut labels = LabelMap::filled(h, w, catalog.background());
    let mut colors = vec![BACKGROUND_RGB; h * w];
    let regions = rng.random_range(1..=3usize);
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..regions {
        let id = *objects.choose(&mut rng).expect("catalog has objects");
        let a = catalog.classes[id as usize].attributes.expect("object class");
        for _ in 0..PLACEMENT_ATTEMPTS {
            let s = rng.random_range(MIN_SIZE..=MAX_SIZE);
            let (r_lo, r_hi) = match a.zone {
                Zone::Top => (0, h / 2 - s),
                Zone::Bottom => (h / 2, h - s),
                Zone::Any => (0, h - s),
            };
            let r0 = rng.random_range(r_lo..=r_hi);
            let c0 = rng.random_range(0..=w - s);
            let overlaps = boxes
                .iter()
                .any(|&(br, bc, bs)| r0 < br + bs && br < r0 + s && c0 < bc + bs && bc < c0 + s);
            if overlaps {
                continue;
            }
            boxes.push((r0, c0, s));
            let rgb = a.color.rgb();
            for r in 0..s {
                for c in 0..s {
                    if inside(a.shape, s, r, c) {
                        let (pr, pc) = (r0 + r, c0 + c);
                        labels.set(pr, pc, id);
                        let t = texture(a.shape, pr, pc);
                        colors[pr * w + pc] = [rgb[0] + t, rgb[1] + t, rgb[2] + t];
                    }
                }
            }
            break;
        }
    }
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive sigma");
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            // f32-exact so that dataset files reload without loss
            data[ch * plane + i] = (colors[i][ch] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32 as f64;
        }
    }
    let has_unseen = labels.data().iter().any(|id| catalog.unseen.contains(id));
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], data)?,
        labels,
        has_unseen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub image_size: usize,
    pub train: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_seen: 7,
            n_unseen: 3,
            image_size: 32,
            train: 256,
            unlabeled: 128,
            test: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub train: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::TrainSeen => &self.train,
            Split::UnlabeledMixed => &self.unlabeled,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let catalog = make_class_catalog(cfg.n_seen, cfg.n_unseen, seed)?;
    let size = (cfg.image_size, cfg.image_size);
    let render = |split, n: usize| -> Result<Vec<Sample>> {
        (0..n as u64).map(|i| render_sample(&catalog, split, i, seed, size)).collect()
    };
    Ok(Dataset {
        train: render(Split::TrainSeen, cfg.train)?,
        unlabeled: render(Split::UnlabeledMixed, cfg.unlabeled)?,
        test: render(Split::Test, cfg.test)?,
        catalog,
    })
}

/// Read a whitespace-separated embedding file: a name of one or more
/// tokens, then exactly [`EMBED_DIM`] reals per line.
///
/// `aliases` maps line names onto class names; lines that land on the same
/// class are averaged. Classes keep the order of their first appearance.
pub fn load_embedding_file(path: &Path, aliases: &HashMap<String, String>) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text, path, aliases)
}

pub fn parse_embeddings(text: &str, path: &Path, aliases: &HashMap<String, String>) -> Result<EmbeddingTable> {
    let mut names: Vec<String> = Vec::new();
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let err = |detail: String| Error::EmbeddingFormat {
            path: path.to_path_buf(),
            line: lineno + 1,
            detail,
        };
        let name_len = 1 + tokens[1..].iter().take_while(|t| t.parse::<f64>().is_err()).count();
        let values = tokens[name_len..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != EMBED_DIM {
            return Err(err(format!("expected {EMBED_DIM} values, found {}", values.len())));
        }
        let raw = tokens[..name_len].join(" ");
        let class = aliases.get(&raw).cloned().unwrap_or(raw);
        match names.iter().position(|n| *n == class) {
            Some(i) => {
                for (s, v) in sums[i].0.iter_mut().zip(&values) {
                    *s += v;
                }
                sums[i].1 += 1;
            }
            None => {
                names.push(class);
                sums.push((values, 1));
            }
        }
    }
    if names.is_empty() {
        return Err(Error::EmbeddingFormat {
            path: path.to_path_buf(),
            line: 0,
            detail: "no embeddings".into(),
        });
    }
    let vectors = sums
        .into_iter()
        .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
        .collect();
    EmbeddingTable::new(names, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn default_catalog_shape() {
        let cat = make_class_catalog(7, 3, 0).unwrap();
        assert_eq!(cat.num_classes(), 10);
        assert!(cat.seen.is_disjoint(&cat.unseen));
        let a1 = cat.classes[1].attributes.unwrap();
        let a2 = cat.classes[2].attributes.unwrap();
        assert_eq!((a1.shape, a1.color), (a2.shape, a2.color));
        assert_ne!(a1.zone, a2.zone);
        for id in 0..10u16 {
            let v = cat.embeddings.get(id).unwrap();
            assert!((cos(v, v) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn compositional_coverage() {
        for seed in 0..20 {
            let cat = make_class_catalog(7, 3, seed).unwrap();
            let seen: Vec<Attributes> = cat.seen.iter().filter_map(|&i| cat.classes[i as usize].attributes).collect();
            for &u in &cat.unseen {
                let a = cat.classes[u as usize].attributes.unwrap();
                assert!(seen.iter().any(|s| s.shape == a.shape));
                assert!(seen.iter().any(|s| s.color == a.color));
            }
        }
    }

    #[test]
    fn infeasible_split() {
        assert!(matches!(make_class_catalog(3, 1, 0), Err(Error::InfeasibleSplit(_))));
        assert!(matches!(make_class_catalog(12, 3, 0), Err(Error::InfeasibleSplit(_))));
    }

    #[test]
    fn render_is_deterministic_and_split_safe() {
        let cat = make_class_catalog(7, 3, 5).unwrap();
        let a = render_sample(&cat, Split::TrainSeen, 3, 9, (32, 32)).unwrap();
        let b = render_sample(&cat, Split::TrainSeen, 3, 9, (32, 32)).unwrap();
        assert_eq!(a, b);
        for i in 0..200 {
            let s = render_sample(&cat, Split::TrainSeen, i, 9, (32, 32)).unwrap();
            assert!(!s.has_unseen);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zone_classes_stay_in_their_half() {
        let cat = make_class_catalog(7, 3, 1).unwrap();
        for i in 0..200 {
            let s = render_sample(&cat, Split::Test, i, 2, (32, 32)).unwrap();
            for r in 0..32 {
                for c in 0..32 {
                    match s.labels.get(r, c) {
                        1 => assert!(r < 16),
                        2 => assert!(r >= 16),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_file_parsing() {
        let row = |name: &str, first: f64, second: f64| {
            let mut v = vec![0.0; EMBED_DIM];
            v[0] = first;
            v[1] = second;
            format!("{name} {}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
        };
        let text = format!("{}\n{}\n{}\n", row("tv", 1.0, 0.0), row("monitor", 0.0, 1.0), row("potted plant", 0.2, 0.3));
        let aliases = HashMap::from([("monitor".to_string(), "tv".to_string())]);
        let t = parse_embeddings(&text, Path::new("e.txt"), &aliases).unwrap();
        assert_eq!(t.names, vec!["tv", "potted plant"]);
        assert_eq!(&t.get(0).unwrap()[..2], &[0.5, 0.5]);
        assert_eq!(&t.get(1).unwrap()[..2], &[0.2, 0.3]);

        let short = format!("cat {}", vec!["0.1"; EMBED_DIM - 1].join(" "));
        let bad = format!("{}\n{short}\n", row("dog", 0.0, 0.0));
        match parse_embeddings(&bad, Path::new("e.txt"), &HashMap::new()) {
            Err(Error::EmbeddingFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
