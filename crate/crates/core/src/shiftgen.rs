//! Synthetic benchmarks for the two distribution-shift regimes.
//!
//! * Subpopulation shift: a label-carrying core axis, an attribute-carrying
//!   spurious axis and isotropic noise. The train split follows a skewed
//!   `label x attribute` contingency table, the test split is group-balanced.
//! * Domain generalization: class prototypes shared by all domains, with a
//!   domain-specific class direction rotated by a seeded per-domain angle and
//!   a per-domain mean offset. Train/ID splits draw from the train domains,
//!   the two OOD splits from held-out domains.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestId,
    TestOod1,
    TestOod2,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::TestId, Split::TestOod1, Split::TestOod2];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test_id",
            Split::TestOod1 => "test_ood1",
            Split::TestOod2 => "test_ood2",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown split `{s}`")))
    }
}

/// Samples with class label, group id, domain id and split tag.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub group: Vec<usize>,
    pub domain: Vec<usize>,
    pub split: Vec<Split>,
    pub num_classes: usize,
    pub num_groups: usize,
}

/// Feature rows and metadata of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub split: Split,
    pub x: Matrix,
    pub y: Vec<usize>,
    pub group: Vec<usize>,
    pub domain: Vec<usize>,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn view(&self, split: Split) -> SplitView {
        let idx = self.indices(split);
        SplitView {
            split,
            x: self.x.select_rows(&idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            group: idx.iter().map(|&i| self.group[i]).collect(),
            domain: idx.iter().map(|&i| self.domain[i]).collect(),
        }
    }

    /// Splits that contain at least one sample, in canonical order.
    pub fn present_splits(&self) -> Vec<Split> {
        let set: BTreeSet<Split> = self.split.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Count per `(split, group)`.
    pub fn group_counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.num_groups];
        for i in 0..self.len() {
            if self.split[i] == split {
                c[self.group[i]] += 1;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.x.rows() != n || self.group.len() != n || self.domain.len() != n || self.split.len() != n {
            return Err(Error::Shape("dataset columns have different lengths".into()));
        }
        if let Some(&y) = self.y.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Contract(format!("label {y} >= num_classes {}", self.num_classes)));
        }
        if let Some(&g) = self.group.iter().find(|&&g| g >= self.num_groups) {
            return Err(Error::Contract(format!("group {g} >= num_groups {}", self.num_groups)));
        }
        if !self.x.is_finite() {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        Ok(())
    }

    /// CSV with header `split,domain,group,label,x0..x{d-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "split,domain,group,label")?;
        for j in 0..self.dim() {
            write!(out, ",x{j}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{},{},{},{}", self.split[i], self.domain[i], self.group[i], self.y[i])?;
            for v in self.x.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Reads the CSV schema of [`Self::write_csv`]. Class and group counts are
    /// inferred as one past the largest id seen.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset file".into()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        if cols.len() < 5 || cols[..4] != ["split", "domain", "group", "label"] {
            return Err(Error::Parse(format!("bad dataset header `{header}`")));
        }
        let d = cols.len() - 4;
        for (j, c) in cols[4..].iter().enumerate() {
            if *c != format!("x{j}") {
                return Err(Error::Parse(format!("expected column x{j}, found `{c}`")));
            }
        }
        let mut data = Vec::new();
        let (mut y, mut group, mut domain, mut split) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != d + 4 {
                return Err(Error::Parse(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    d + 4
                )));
            }
            let int = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad integer `{s}`", lineno + 2)))
            };
            split.push(fields[0].parse()?);
            domain.push(int(fields[1])?);
            group.push(int(fields[2])?);
            y.push(int(fields[3])?);
            for f in &fields[4..] {
                data.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("line {}: bad value `{f}`", lineno + 2)))?,
                );
            }
        }
        let n = y.len();
        let ds = Self {
            x: Matrix::from_vec(n, d, data)?,
            num_classes: y.iter().max().map_or(0, |m| m + 1).max(2),
            num_groups: group.iter().max().map_or(0, |m| m + 1),
            y,
            group,
            domain,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Reference train counts per group `2 y + a` for a hair-colour task:
/// (not blond, male), (not blond, female), (blond, male), (blond, female).
pub const REFERENCE_GROUP_COUNTS: [usize; 4] = [66874, 71629, 1387, 22880];

/// Scales `weights` to integers summing to `total` by largest remainder;
/// ties in the remainder go to the lower index.
pub fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainders compared exactly as (w * total) mod sum
    order.sort_by(|&a, &b| {
        let ra = weights[a] * total % sum;
        let rb = weights[b] * total % sum;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubpopConfig {
    /// Train samples per group `2 y + a`.
    pub train_counts: [usize; 4],
    /// Test samples per group.
    pub test_per_group: usize,
    pub core_separation: f64,
    pub spurious_separation: f64,
    /// Extra pure-noise dimensions beyond the core and spurious axes.
    pub noise_dims: usize,
    pub noise: f64,
    /// Noise on the core axis; defaults to `noise` when absent.
    pub core_noise: Option<f64>,
    pub seed: u64,
}

impl Default for SubpopConfig {
    fn default() -> Self {
        Self::reference_ratio(8000)
    }
}

impl SubpopConfig {
    /// Group counts proportional to the printed contingency table.
    pub fn reference_ratio(n_train: usize) -> Self {
        let c = largest_remainder(&REFERENCE_GROUP_COUNTS, n_train);
        Self {
            train_counts: [c[0], c[1], c[2], c[3]],
            test_per_group: 500,
            core_separation: 1.0,
            spurious_separation: 2.0,
            noise_dims: 30,
            noise: 1.0,
            core_noise: None,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        2 + self.noise_dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_counts.iter().all(|&c| c == 0) {
            return Err(Error::config("dataset.train_counts", "at least one group must be nonempty"));
        }
        if !(self.core_separation > 0.0) {
            return Err(Error::config("dataset.core_separation", "must be > 0"));
        }
        if !(self.spurious_separation > 0.0) {
            return Err(Error::config("dataset.spurious_separation", "must be > 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("dataset.noise", "must be >= 0"));
        }
        if let Some(c) = self.core_noise {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config("dataset.core_noise", "must be >= 0"));
            }
        }
        Ok(())
    }
}

pub fn gen_subpop(cfg: &SubpopConfig) -> Result<GroupedDataset> {
    cfg.validate()?;
    let d = cfg.dim();
    if d < 2 {
        return Err(Error::config("dataset.noise_dims", "need core and spurious axes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let core_noise = cfg.core_noise.unwrap_or(cfg.noise);
    let mut data = Vec::new();
    let (mut y, mut group, mut split) = (Vec::new(), Vec::new(), Vec::new());

    let mut emit = |sp: Split, g: usize, count: usize, rng: &mut ChaCha8Rng| {
        let (label, attr) = (g / 2, g % 2);
        let core = if label == 1 { 1.0 } else { -1.0 };
        let spur = if attr == 1 { 1.0 } else { -1.0 };
        for _ in 0..count {
            data.push(core * cfg.core_separation + core_noise * gaussian(rng));
            data.push(spur * cfg.spurious_separation + cfg.noise * gaussian(rng));
            for _ in 2..d {
                data.push(cfg.noise * gaussian(rng));
            }
            y.push(label);
            group.push(g);
            split.push(sp);
        }
    };
    for (g, &count) in cfg.train_counts.iter().enumerate() {
        emit(Split::Train, g, count, &mut rng);
    }
    for g in 0..4 {
        emit(Split::TestId, g, cfg.test_per_group, &mut rng);
    }
    let n = y.len();
    Ok(GroupedDataset {
        x: Matrix::from_vec(n, d, data)?,
        y,
        group,
        domain: vec![0; n],
        split,
        num_classes: 2,
        num_groups: 4,
    })
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub num_domains: usize,
    pub train_domains: Vec<usize>,
    pub ood1_domains: Vec<usize>,
    pub ood2_domains: Vec<usize>,
    /// Train samples per (train domain, class).
    pub train_per_class: usize,
    /// ID test samples per (train domain, class).
    pub id_test_per_class: usize,
    /// OOD test samples per (held-out domain, class).
    pub ood_per_class: usize,
    /// Total feature dimension, at least 3.
    pub dim: usize,
    /// Class separation along the shared core axis.
    pub core_separation: f64,
    /// Class separation along the domain-rotated direction.
    pub domain_separation: f64,
    /// Per-domain rotation angles are drawn uniformly from `[-max, max]`.
    pub max_rotation: f64,
    /// Scale of the per-domain mean offset.
    pub offset_scale: f64,
    pub noise: f64,
    /// Noise on the core axis; defaults to `noise` when absent.
    pub core_noise: Option<f64>,
    pub seed: u64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            num_domains: 5,
            train_domains: vec![0, 3, 4],
            ood1_domains: vec![1],
            ood2_domains: vec![2],
            train_per_class: 1000,
            id_test_per_class: 250,
            ood_per_class: 500,
            dim: 32,
            core_separation: 1.0,
            domain_separation: 1.0,
            max_rotation: std::f64::consts::PI,
            offset_scale: 0.5,
            noise: 1.0,
            core_noise: None,
            seed: 0,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::config("dataset.num_domains", "must be >= 1"));
        }
        if self.dim < 3 {
            return Err(Error::config("dataset.dim", "must be >= 3"));
        }
        let mut seen = BTreeSet::new();
        for (key, list) in [
            ("dataset.train_domains", &self.train_domains),
            ("dataset.ood1_domains", &self.ood1_domains),
            ("dataset.ood2_domains", &self.ood2_domains),
        ] {
            for &d in list {
                if d >= self.num_domains {
                    return Err(Error::config(key, format!("domain {d} >= num_domains")));
                }
                if !seen.insert(d) {
                    return Err(Error::config(key, format!("domain {d} assigned to two splits")));
                }
            }
        }
        if self.train_domains.is_empty() || self.train_per_class == 0 {
            return Err(Error::config("dataset.train_domains", "train split would be empty"));
        }
        for (key, v) in [
            ("dataset.core_separation", self.core_separation),
            ("dataset.domain_separation", self.domain_separation),
            ("dataset.max_rotation", self.max_rotation),
            ("dataset.offset_scale", self.offset_scale),
            ("dataset.noise", self.noise),
            ("dataset.core_noise", self.core_noise.unwrap_or(0.0)),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-domain transform: rotation angle, the second axis of the rotation
/// plane, and the mean offset.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub angle: f64,
    pub plane_axis: Vec<f64>,
    pub offset: Vec<f64>,
}

/// Transforms for every domain, derived from the config seed only.
pub fn domain_transforms(cfg: &DomainConfig) -> Vec<DomainTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0a1);
    (0..cfg.num_domains)
        .map(|_| {
            let angle = if cfg.max_rotation > 0.0 {
                rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
            } else {
                0.0
            };
            // unit axis orthogonal to e0 and e1
            let mut axis = vec![0.0; cfg.dim];
            let mut n2 = 0.0;
            for v in axis.iter_mut().skip(2) {
                *v = gaussian(&mut rng);
                n2 += *v * *v;
            }
            let n = n2.sqrt();
            axis.iter_mut().for_each(|v| *v /= n);
            let offset = (0..cfg.dim)
                .map(|_| cfg.offset_scale * gaussian(&mut rng))
                .collect();
            DomainTransform {
                angle,
                plane_axis: axis,
                offset,
            }
        })
        .collect()
}

pub fn gen_domains(cfg: &DomainConfig) -> Result<GroupedDataset> {
    cfg.validate()?;
    let d = cfg.dim;
    let transforms = domain_transforms(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let core_noise = cfg.core_noise.unwrap_or(cfg.noise);
    let mut data = Vec::new();
    let (mut y, mut domain, mut split) = (Vec::new(), Vec::new(), Vec::new());

    let mut emit = |sp: Split, dom: usize, per_class: usize, rng: &mut ChaCha8Rng| {
        let t = &transforms[dom];
        let (c, s) = (t.angle.cos(), t.angle.sin());
        for label in 0..2 {
            let sign = if label == 1 { 1.0 } else { -1.0 };
            // prototype sign * (core e0 + dom e1), with e1 rotated toward plane_axis
            let mut proto = vec![0.0; d];
            proto[0] = sign * cfg.core_separation;
            proto[1] = sign * cfg.domain_separation * c;
            for (p, a) in proto.iter_mut().zip(&t.plane_axis) {
                *p += sign * cfg.domain_separation * s * a;
            }
            for _ in 0..per_class {
                for j in 0..d {
                    let sigma = if j == 0 { core_noise } else { cfg.noise };
                    data.push(proto[j] + t.offset[j] + sigma * gaussian(rng));
                }
                y.push(label);
                domain.push(dom);
                split.push(sp);
            }
        }
    };
    for &dom in &cfg.train_domains {
        emit(Split::Train, dom, cfg.train_per_class, &mut rng);
    }
    for &dom in &cfg.train_domains {
        emit(Split::TestId, dom, cfg.id_test_per_class, &mut rng);
    }
    for &dom in &cfg.ood1_domains {
        emit(Split::TestOod1, dom, cfg.ood_per_class, &mut rng);
    }
    for &dom in &cfg.ood2_domains {
        emit(Split::TestOod2, dom, cfg.ood_per_class, &mut rng);
    }
    let n = y.len();
    Ok(GroupedDataset {
        x: Matrix::from_vec(n, d, data)?,
        group: y.clone(),
        y,
        domain,
        split,
        num_classes: 2,
        num_groups: 2,
    })
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Subpop(SubpopConfig),
    Domain(DomainConfig),
    /// A CSV in the dataset export schema.
    Csv { path: String },
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetConfig::Subpop(c) => c.validate(),
            DatasetConfig::Domain(c) => c.validate(),
            DatasetConfig::Csv { path } => {
                if path.is_empty() {
                    Err(Error::config("dataset.path", "must not be empty"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn generate(&self) -> Result<GroupedDataset> {
        match self {
            DatasetConfig::Subpop(c) => gen_subpop(c),
            DatasetConfig::Domain(c) => gen_domains(c),
            DatasetConfig::Csv { path } => {
                let f = std::fs::File::open(path)?;
                GroupedDataset::read_csv(std::io::BufReader::new(f))
            }
        }
    }
}
