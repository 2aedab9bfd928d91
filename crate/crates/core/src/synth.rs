//! Synthetic multi-granularity parsing scenes and panoptic scenes.
//!
//! Every pixel feature is its label's prototype plus Gaussian noise. Parsing
//! scenes are labeled at the finest granularity and coarsened through the
//! taxonomy, so all granularities of one scene agree. Each scene draws a
//! latent style, and parts belonging to another style never appear in it;
//! confusable labels with nearby prototypes can then be told apart from the
//! rest of the scene but hardly from a single pixel.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::Region;
use crate::taxonomy::LabelTaxonomy;
use crate::tensor::Tensor;

/// One thing instance: identity, class, the box handed to the model, and
/// the visible mask as sorted flat pixel indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u32,
    pub class: usize,
    pub region: Region,
    pub pixels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `H×W×C`.
    pub features: Tensor,
    /// Per-domain `H·W` label maps, row-major.
    pub labels: BTreeMap<String, Vec<usize>>,
    pub instances: Vec<Instance>,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn label_map(&self, domain: &str) -> Result<&[usize]> {
        self.labels
            .get(domain)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("sample has no labels for domain '{domain}'")))
    }

    pub fn regions(&self) -> Vec<Region> {
        self.instances.iter().map(|i| i.region).collect()
    }
}

/// Parameters of one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub domain: String,
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub noise: f64,
    #[serde(default)]
    pub instance_mode: bool,
}

impl DatasetSpec {
    /// Scene `index` draws from its own stream of the dataset seed.
    pub fn scene_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn noise(&self) -> Result<Normal<f64>> {
        Normal::new(0.0, self.noise)
            .map_err(|_| Error::Generation(format!("invalid noise level {}", self.noise)))
    }
}

fn default_parts() -> [usize; 2] {
    [2, 5]
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsingLayout {
    pub fine_domain: String,
    /// Inclusive range of part count per scene.
    #[serde(default = "default_parts")]
    pub parts: [usize; 2],
    /// Mutually exclusive label groups; labels in no group appear in any
    /// scene.
    #[serde(default)]
    pub styles: Vec<Vec<String>>,
    /// Pairs whose second prototype is placed `separation` away from the
    /// first.
    #[serde(default)]
    pub confusable: Vec<[String; 2]>,
    pub separation: f64,
    #[serde(default = "default_scale")]
    pub prototype_scale: f64,
    pub prototype_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanopticLayout {
    pub stuff: Vec<String>,
    pub things: Vec<String>,
    pub max_instances: usize,
    /// Box jitter as a fraction of box size, at most 0.1.
    pub jitter: f64,
    #[serde(default = "default_scale")]
    pub prototype_scale: f64,
    pub prototype_seed: u64,
}

impl PanopticLayout {
    /// Stuff classes first, then things.
    pub fn classes(&self) -> Vec<String> {
        self.stuff.iter().chain(&self.things).cloned().collect()
    }

    pub fn is_thing(&self, class: usize) -> bool {
        class >= self.stuff.len()
    }
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `labels × C` prototypes of norm `scale`, except that the second member of
/// each confusable pair sits `separation` from the first.
pub fn prototypes(
    labels: &[String],
    channels: usize,
    confusable: &[[String; 2]],
    separation: f64,
    scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..labels.len())
        .map(|_| {
            random_direction(channels, &mut rng)
                .into_iter()
                .map(|x| x * scale)
                .collect()
        })
        .collect();
    let index = |name: &str| {
        labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::Generation(format!("confusable label '{name}' is not generated")))
    };
    for [a, b] in confusable {
        let (ia, ib) = (index(a)?, index(b)?);
        let dir = random_direction(channels, &mut rng);
        rows[ib] = rows[ia]
            .iter()
            .zip(&dir)
            .map(|(p, d)| p + separation * d)
            .collect();
    }
    Tensor::new(vec![labels.len(), channels], rows.concat())
}

fn paint_features<R: Rng + ?Sized>(
    map: &[usize],
    protos: &Tensor,
    spec: &DatasetSpec,
    rng: &mut R,
) -> Result<Tensor> {
    let noise = spec.noise()?;
    let c = spec.channels;
    let mut data = Vec::with_capacity(map.len() * c);
    for &label in map {
        for &p in protos.row(label) {
            data.push(p + noise.sample(rng));
        }
    }
    Tensor::new(vec![spec.height, spec.width, c], data)
}

fn check_spec(spec: &DatasetSpec, protos: &Tensor, min_pixels: usize) -> Result<()> {
    if spec.channels != protos.cols() {
        return Err(Error::Generation(format!(
            "dataset asks for {} channels, prototypes have {}",
            spec.channels,
            protos.cols()
        )));
    }
    if spec.height < 4 || spec.width < 4 || spec.height * spec.width < min_pixels {
        return Err(Error::Generation(format!(
            "a {}×{} map is too small (needs at least {min_pixels} pixels, 4 per side)",
            spec.height, spec.width
        )));
    }
    Ok(())
}

/// Generates human-parsing scenes over a taxonomy.
#[derive(Clone, Debug)]
pub struct ParsingGenerator {
    taxonomy: LabelTaxonomy,
    fine: String,
    background: usize,
    /// Fine-label adjacency lists.
    neighbors: Vec<Vec<usize>>,
    /// Per style, the labels a scene of that style may contain.
    allowed: Vec<Vec<usize>>,
    parts: [usize; 2],
    protos: Tensor,
    /// For each other domain, fine label → label in that domain.
    coarsen: BTreeMap<String, Vec<usize>>,
}

impl ParsingGenerator {
    pub fn new(taxonomy: LabelTaxonomy, layout: &ParsingLayout, channels: usize) -> Result<Self> {
        let fine = taxonomy.domain(&layout.fine_domain)?.clone();
        let background = fine.index_of("background").ok_or_else(|| {
            Error::Generation(format!(
                "domain '{}' needs a 'background' label",
                fine.name
            ))
        })?;
        let [lo, hi] = layout.parts;
        if lo == 0 || lo > hi {
            return Err(Error::Generation(format!("invalid part range [{lo}, {hi}]")));
        }
        let mut neighbors = vec![Vec::new(); fine.len()];
        for (a, b) in taxonomy.adjacency_pairs(&fine.name)? {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let mut styled = vec![false; fine.len()];
        let mut groups = Vec::new();
        for style in &layout.styles {
            let mut g = Vec::new();
            for name in style {
                let i = fine.index_of(name).ok_or_else(|| {
                    Error::Generation(format!("style label '{name}' is not in '{}'", fine.name))
                })?;
                styled[i] = true;
                g.push(i);
            }
            groups.push(g);
        }
        let neutral: Vec<usize> = (0..fine.len())
            .filter(|&i| !styled[i] && i != background)
            .collect();
        let allowed = if groups.is_empty() {
            vec![neutral]
        } else {
            groups
                .into_iter()
                .map(|mut g| {
                    g.extend(&neutral);
                    g.sort_unstable();
                    g
                })
                .collect()
        };
        let mut coarsen = BTreeMap::new();
        for d in taxonomy.domains() {
            if d.name != fine.name {
                coarsen.insert(d.name.clone(), taxonomy.ancestor_map(&fine.name, &d.name)?);
            }
        }
        let protos = prototypes(
            &fine.labels,
            channels,
            &layout.confusable,
            layout.separation,
            layout.prototype_scale,
            layout.prototype_seed,
        )?;
        Ok(Self {
            fine: fine.name,
            taxonomy,
            background,
            neighbors,
            allowed,
            parts: layout.parts,
            protos,
            coarsen,
        })
    }

    pub fn taxonomy(&self) -> &LabelTaxonomy {
        &self.taxonomy
    }

    pub fn fine_domain(&self) -> &str {
        &self.fine
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.protos
    }

    /// A connected set of parts grown along the adjacency within one style,
    /// each paired with the already chosen part it attaches to.
    fn choose_parts<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(usize, Option<usize>)> {
        let allowed = self.allowed.choose(rng).expect("at least one style");
        let target = rng.random_range(self.parts[0]..=self.parts[1]);
        let mut chosen: Vec<(usize, Option<usize>)> = Vec::new();
        let Some(&first) = allowed.choose(rng) else {
            return chosen;
        };
        chosen.push((first, None));
        while chosen.len() < target {
            let frontier: Vec<(usize, usize)> = chosen
                .iter()
                .flat_map(|&(c, _)| self.neighbors[c].iter().map(move |&n| (n, c)))
                .filter(|&(n, _)| {
                    allowed.binary_search(&n).is_ok() && chosen.iter().all(|&(c, _)| c != n)
                })
                .collect();
            match frontier.choose(rng) {
                Some(&(n, anchor)) => chosen.push((n, Some(anchor))),
                None => break,
            }
        }
        chosen
    }

    fn layout_map<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Vec<usize> {
        let parts = self.choose_parts(rng);
        let side = h.min(w) as f64;
        let mut centers: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
        let mut map = vec![self.background; h * w];
        for (label, anchor) in parts {
            let r = rng.random_range(side / 8.0..side / 4.5);
            let (cy, cx) = match anchor.and_then(|a| centers.get(&a)) {
                Some(&(ay, ax, ar)) => {
                    let t = rng.random_range(0.0..std::f64::consts::TAU);
                    let d = 0.8 * (ar + r);
                    (
                        (ay + d * t.sin()).clamp(r * 0.5, h as f64 - r * 0.5),
                        (ax + d * t.cos()).clamp(r * 0.5, w as f64 - r * 0.5),
                    )
                }
                None => (
                    rng.random_range(h as f64 * 0.25..h as f64 * 0.75),
                    rng.random_range(w as f64 * 0.25..w as f64 * 0.75),
                ),
            };
            let aspect: f64 = rng.random_range(0.6..1.6);
            let (ry, rx) = (r * aspect.sqrt(), r / aspect.sqrt());
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        map[y * w + x] = label;
                    }
                }
            }
            centers.insert(label, (cy, cx, r));
        }
        map
    }

    pub fn scene(&self, spec: &DatasetSpec, index: usize) -> Result<SceneSample> {
        check_spec(spec, &self.protos, 16 * self.parts[1])?;
        let mut rng = spec.scene_rng(index);
        let fine = self.layout_map(spec.height, spec.width, &mut rng);
        let features = paint_features(&fine, &self.protos, spec, &mut rng)?;
        let mut labels = BTreeMap::new();
        for (domain, map) in &self.coarsen {
            labels.insert(domain.clone(), fine.iter().map(|&l| map[l]).collect());
        }
        labels.insert(self.fine.clone(), fine);
        Ok(SceneSample {
            features,
            labels,
            instances: Vec::new(),
        })
    }
}

/// Replaces every label of `from` by its ancestor in `to`.
pub fn relabel_granularity(
    map: &[usize],
    from: &str,
    to: &str,
    taxonomy: &LabelTaxonomy,
) -> Result<Vec<usize>> {
    let ancestors = taxonomy.ancestor_map(from, to)?;
    map.iter()
        .map(|&l| {
            ancestors.get(l).copied().ok_or_else(|| {
                Error::Input(format!("label {l} out of range for domain '{from}'"))
            })
        })
        .collect()
}

/// Every subordinate pair `(f, c)`: pixels labeled `f` in `f`'s domain are
/// labeled `c` in `c`'s domain. Returns the first violation.
pub fn check_hierarchy(sample: &SceneSample, taxonomy: &LabelTaxonomy) -> Result<()> {
    for (f, c) in taxonomy.subordinate_pairs() {
        let fd = &taxonomy.domains()[f.domain].name;
        let cd = &taxonomy.domains()[c.domain].name;
        let (Some(fm), Some(cm)) = (sample.labels.get(fd), sample.labels.get(cd)) else {
            continue;
        };
        if let Some(p) = (0..fm.len()).find(|&p| fm[p] == f.label && cm[p] != c.label) {
            return Err(Error::Integrity(format!(
                "pixel {p} is '{}' in '{fd}' but not '{}' in '{cd}'",
                taxonomy.label_name(f),
                taxonomy.label_name(c)
            )));
        }
    }
    Ok(())
}

/// Generates stuff-and-things scenes.
#[derive(Clone, Debug)]
pub struct PanopticGenerator {
    layout: PanopticLayout,
    protos: Tensor,
}

impl PanopticGenerator {
    pub fn new(layout: &PanopticLayout, channels: usize) -> Result<Self> {
        if layout.stuff.is_empty() {
            return Err(Error::Generation("panoptic scenes need a stuff class".into()));
        }
        if !(0.0..=0.1).contains(&layout.jitter) {
            return Err(Error::Generation(format!(
                "box jitter {} outside [0, 0.1]",
                layout.jitter
            )));
        }
        let classes = layout.classes();
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Generation(format!("duplicate panoptic class '{dup}'")));
        }
        let protos = prototypes(
            &classes,
            channels,
            &[],
            0.0,
            layout.prototype_scale,
            layout.prototype_seed,
        )?;
        Ok(Self {
            layout: layout.clone(),
            protos,
        })
    }

    pub fn layout(&self) -> &PanopticLayout {
        &self.layout
    }

    pub fn scene(&self, spec: &DatasetSpec, index: usize) -> Result<SceneSample> {
        if !spec.instance_mode {
            return Err(Error::Generation(format!(
                "dataset '{}' is not in instance mode",
                spec.domain
            )));
        }
        check_spec(spec, &self.protos, 16)?;
        let (h, w) = (spec.height, spec.width);
        let mut rng = spec.scene_rng(index);
        let n_stuff = self.layout.stuff.len();
        let top = rng.random_range(0..n_stuff);
        let bottom = rng.random_range(0..n_stuff);
        let horizon = rng.random_range(h / 3..=2 * h / 3);
        let mut map: Vec<usize> = (0..h * w)
            .map(|p| if p / w < horizon { top } else { bottom })
            .collect();
        let mut owner = vec![0u32; h * w];
        let k = if self.layout.things.is_empty() {
            0
        } else {
            rng.random_range(0..=self.layout.max_instances)
        };
        let mut drawn = Vec::with_capacity(k);
        for id in 1..=k as u32 {
            let class = n_stuff + rng.random_range(0..self.layout.things.len());
            let bh = rng.random_range(h / 5..=h * 2 / 5).max(2);
            let bw = rng.random_range(w / 5..=w * 2 / 5).max(2);
            let y0 = rng.random_range(0..=h - bh);
            let x0 = rng.random_range(0..=w - bw);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    map[y * w + x] = class;
                    owner[y * w + x] = id;
                }
            }
            drawn.push((id, class));
        }
        let mut instances = Vec::new();
        for (id, class) in drawn {
            let pixels: Vec<usize> = (0..h * w).filter(|&p| owner[p] == id).collect();
            if pixels.is_empty() {
                continue;
            }
            let tight = bounding_box(&pixels, w);
            let region = self.jitter(tight, &pixels, h, w, &mut rng);
            instances.push(Instance {
                id,
                class,
                region,
                pixels,
            });
        }
        let features = paint_features(&map, &self.protos, spec, &mut rng)?;
        Ok(SceneSample {
            features,
            labels: BTreeMap::from([(spec.domain.clone(), map)]),
            instances,
        })
    }

    fn jitter<R: Rng + ?Sized>(
        &self,
        tight: Region,
        pixels: &[usize],
        h: usize,
        w: usize,
        rng: &mut R,
    ) -> Region {
        let j = self.layout.jitter;
        if j == 0.0 {
            return tight;
        }
        let dy = j * (tight.y1 - tight.y0) as f64;
        let dx = j * (tight.x1 - tight.x0) as f64;
        let mut shift = |v: usize, d: f64, hi: usize| {
            let s = rng.random_range(-d..=d).round();
            (v as f64 + s).clamp(0.0, hi as f64) as usize
        };
        let r = Region::new(
            shift(tight.y0, dy, h),
            shift(tight.x0, dx, w),
            shift(tight.y1, dy, h),
            shift(tight.x1, dx, w),
        );
        let hits = pixels.iter().any(|&p| r.contains(p / w, p % w));
        if r.y0 < r.y1 && r.x0 < r.x1 && hits {
            r
        } else {
            tight
        }
    }
}

fn bounding_box(pixels: &[usize], w: usize) -> Region {
    let ys = pixels.iter().map(|p| p / w);
    let xs = pixels.iter().map(|p| p % w);
    Region::new(
        ys.clone().min().unwrap(),
        xs.clone().min().unwrap(),
        ys.max().unwrap() + 1,
        xs.max().unwrap() + 1,
    )
}

/// Either kind of scene generator.
#[derive(Clone, Debug)]
pub enum Generator {
    Parsing(ParsingGenerator),
    Panoptic(PanopticGenerator),
}

impl Generator {
    pub fn scene(&self, spec: &DatasetSpec, index: usize) -> Result<SceneSample> {
        match self {
            Generator::Parsing(g) => g.scene(spec, index),
            Generator::Panoptic(g) => g.scene(spec, index),
        }
    }

    /// All scenes of a dataset, in index order. `workers > 1` spreads them
    /// over a thread pool; the result does not depend on it.
    pub fn dataset(&self, spec: &DatasetSpec, workers: usize) -> Result<Vec<SceneSample>> {
        if workers <= 1 {
            return (0..spec.scenes).map(|i| self.scene(spec, i)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Generation(e.to_string()))?;
        pool.install(|| {
            (0..spec.scenes)
                .into_par_iter()
                .map(|i| self.scene(spec, i))
                .collect()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SceneLayout {
    Parsing(ParsingLayout),
    Panoptic(PanopticLayout),
}

fn default_side() -> usize {
    24
}

fn default_channels() -> usize {
    16
}

/// A benchmark: one train and one test dataset per listed domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    /// Relative paths resolve against the spec file's directory.
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    pub domains: Vec<String>,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub noise: f64,
    pub layout: SceneLayout,
}

pub const SPLITS: [&str; 2] = ["train", "test"];

fn mix_seed(seed: u64, domain: usize, split: usize) -> u64 {
    let mut z = seed ^ ((domain as u64) << 32 | split as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl GenSpec {
    /// Reads a spec and makes its taxonomy path absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: GenSpec = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if let Some(t) = &spec.taxonomy {
            let base = path.parent().unwrap_or(Path::new("."));
            spec.taxonomy = Some(base.join(t));
        }
        Ok(spec)
    }

    pub fn generator(&self) -> Result<Generator> {
        match &self.layout {
            SceneLayout::Parsing(layout) => {
                let path = self.taxonomy.as_ref().ok_or_else(|| {
                    Error::Config("parsing scenes need a taxonomy path".into())
                })?;
                let taxonomy = LabelTaxonomy::load(path)?;
                for d in &self.domains {
                    taxonomy.domain(d)?;
                }
                Ok(Generator::Parsing(ParsingGenerator::new(
                    taxonomy,
                    layout,
                    self.channels,
                )?))
            }
            SceneLayout::Panoptic(layout) => {
                Ok(Generator::Panoptic(PanopticGenerator::new(layout, self.channels)?))
            }
        }
    }

    /// The dataset for `domain` and split `"train"` or `"test"`.
    pub fn dataset(&self, domain: &str, split: &str) -> Result<DatasetSpec> {
        let di = self
            .domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Input(format!("spec has no domain '{domain}'")))?;
        let si = SPLITS
            .iter()
            .position(|s| *s == split)
            .ok_or_else(|| Error::Input(format!("unknown split '{split}'")))?;
        Ok(DatasetSpec {
            domain: domain.to_string(),
            scenes: if si == 0 { self.train } else { self.test },
            height: self.height,
            width: self.width,
            channels: self.channels,
            seed: mix_seed(self.seed, di, si),
            noise: self.noise,
            instance_mode: matches!(self.layout, SceneLayout::Panoptic(_)),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    domain: String,
    shape: [usize; 3],
    labels: BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    instances: Vec<Instance>,
}

fn meta_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.meta.json"))
}

/// Writes `<name>.bin` (little-endian `f64`, row-major, no header) and
/// `<name>.meta.json`.
pub fn write_sample(dir: &Path, name: &str, domain: &str, sample: &SceneSample) -> Result<()> {
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, sample.features.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
    let meta = SampleMeta {
        domain: domain.to_string(),
        shape: [sample.height(), sample.width(), sample.channels()],
        labels: sample.labels.clone(),
        instances: sample.instances.clone(),
    };
    let mp = meta_path(dir, name);
    let text = serde_json::to_string(&meta).map_err(|e| Error::json(&mp, e))?;
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn read_sample(dir: &Path, name: &str) -> Result<SceneSample> {
    let mp = meta_path(dir, name);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let features = Tensor::from_le_bytes(&meta.shape, &bytes)
        .map_err(|e| Error::Integrity(format!("{}: {e}", bin.display())))?;
    let pixels = meta.shape[0] * meta.shape[1];
    for (domain, map) in &meta.labels {
        if map.len() != pixels {
            return Err(Error::Integrity(format!(
                "{}: label map for '{domain}' has {} entries, expected {pixels}",
                mp.display(),
                map.len()
            )));
        }
    }
    Ok(SceneSample {
        features,
        labels: meta.labels,
        instances: meta.instances,
    })
}

pub fn sample_name(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Writes a whole dataset into `dir`, creating it.
pub fn write_dataset(dir: &Path, domain: &str, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir, &sample_name(i), domain, s)?;
    }
    Ok(())
}

/// Reads every sample in `dir`, ordered by name.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        if let Some(stem) = e.file_name().to_str().and_then(|n| n.strip_suffix(".meta.json")) {
            names.push(stem.to_string());
        }
    }
    names.sort();
    names.iter().map(|n| read_sample(dir, n)).collect()
}

/// `<root>/<domain>/<split>`.
pub fn split_dir(root: &Path, domain: &str, split: &str) -> PathBuf {
    root.join(domain).join(split)
}

/// Per-domain `(train, test)` counts written by [`generate`].
pub type GenSummary = BTreeMap<String, (usize, usize)>;

/// Generates and writes every dataset of `spec` under `out`.
pub fn generate(spec: &GenSpec, out: &Path, workers: usize) -> Result<GenSummary> {
    let generator = spec.generator()?;
    let mut summary = GenSummary::new();
    for domain in &spec.domains {
        let mut counts = [0; 2];
        for (si, split) in SPLITS.iter().enumerate() {
            let ds = spec.dataset(domain, split)?;
            let samples = generator.dataset(&ds, workers)?;
            write_dataset(&split_dir(out, domain, split), domain, &samples)?;
            counts[si] = samples.len();
        }
        summary.insert(domain.clone(), (counts[0], counts[1]));
    }
    Ok(summary)
}
