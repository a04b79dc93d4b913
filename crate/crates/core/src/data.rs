//! Synthetic identity datasets with an imbalanced hardness mix.
//!
//! Each class has a prototype drawn uniformly on the unit sphere; a sample is
//! `normalize(prototype + σ·g)` with `g` standard Gaussian and `σ` depending on
//! whether the sample is easy (low noise, the majority) or hard. A fifth of the
//! classes is held out for open-set evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::l2_norm;
use crate::rng::{stream, Purpose};

pub const MAGIC: &[u8; 8] = b"HBDSET\0\x01";
pub const VERSION: u32 = 1;
/// Fraction of classes reserved for evaluation.
pub const EVAL_CLASS_FRACTION: f64 = 0.2;
/// Maximum number of genuine verification pairs; impostors match the count.
pub const MAX_POSITIVE_PAIRS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub easy_fraction: f64,
    pub easy_noise: f64,
    pub hard_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 62,
            samples_per_class: 120,
            input_dim: 32,
            easy_fraction: 0.85,
            easy_noise: 0.15,
            hard_noise: 0.8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 5 {
            return Err(Error::config(
                "gen.num_classes",
                format!("need at least 5 classes to hold out an evaluation split, got {}", self.num_classes),
            ));
        }
        if self.samples_per_class < 2 {
            return Err(Error::config(
                "gen.samples_per_class",
                format!("need at least 2, got {}", self.samples_per_class),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::config(
                "gen.input_dim",
                format!("need at least 2, got {}", self.input_dim),
            ));
        }
        if !(self.easy_fraction > 0.0 && self.easy_fraction <= 1.0) {
            return Err(Error::config(
                "gen.easy_fraction",
                format!("must be in (0, 1], got {}", self.easy_fraction),
            ));
        }
        if !(self.easy_noise.is_finite() && self.easy_noise > 0.0) {
            return Err(Error::config(
                "gen.easy_noise",
                format!("must be positive, got {}", self.easy_noise),
            ));
        }
        if !(self.hard_noise.is_finite() && self.hard_noise > self.easy_noise) {
            return Err(Error::config(
                "gen.hard_noise",
                format!(
                    "must exceed easy_noise ({}), got {}",
                    self.easy_noise, self.hard_noise
                ),
            ));
        }
        Ok(())
    }

    pub fn eval_classes(&self) -> usize {
        ((self.num_classes as f64 * EVAL_CLASS_FRACTION).floor() as usize).max(1)
    }

    pub fn train_classes(&self) -> usize {
        self.num_classes - self.eval_classes()
    }

    pub fn easy_per_class(&self) -> usize {
        (self.easy_fraction * self.samples_per_class as f64).floor() as usize
    }
}

/// Generation-time noise level. Only evaluation and reporting look at it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Easy,
    Hard,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Easy => "easy",
            Tier::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: u64,
    pub input: Vec<f64>,
    pub class_id: usize,
    pub tier: Tier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierPair {
    EasyEasy,
    HardHard,
    Mixed,
}

impl TierPair {
    pub fn of(a: Tier, b: Tier) -> Self {
        match (a, b) {
            (Tier::Easy, Tier::Easy) => TierPair::EasyEasy,
            (Tier::Hard, Tier::Hard) => TierPair::HardHard,
            _ => TierPair::Mixed,
        }
    }

    fn tag(self) -> u8 {
        match self {
            TierPair::EasyEasy => 0,
            TierPair::HardHard => 1,
            TierPair::Mixed => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(TierPair::EasyEasy),
            1 => Some(TierPair::HardHard),
            2 => Some(TierPair::Mixed),
            _ => None,
        }
    }
}

/// A verification pair; `a` and `b` index into [`EvalSplit::samples`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_class: bool,
    pub tier_pair: TierPair,
}

/// Held-out classes and the protocols built on them.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub samples: Vec<LabeledSample>,
    pub verification_pairs: Vec<VerificationPair>,
    /// One easy sample per held-out class (indices into `samples`).
    pub gallery: Vec<usize>,
    /// Every held-out sample not in the gallery.
    pub probes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<LabeledSample>,
    pub eval: EvalSplit,
}

impl Dataset {
    pub fn num_train_classes(&self) -> usize {
        self.config.train_classes()
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_sample<R: Rng + ?Sized>(prototype: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = prototype
            .iter()
            .map(|p| {
                let g: f64 = StandardNormal.sample(rng);
                p + sigma * g
            })
            .collect();
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates the training set and the held-out evaluation split.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let mut proto_rng = stream(config.seed, Purpose::Prototypes, 0);
    let prototypes: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| unit_gaussian(config.input_dim, &mut proto_rng))
        .collect();

    let n_easy = config.easy_per_class();
    let mut next_id = 0u64;
    let mut train = Vec::new();
    let mut held_out = Vec::new();
    for (class, proto) in prototypes.iter().enumerate() {
        let mut rng = stream(config.seed, Purpose::Samples, class as u64);
        for k in 0..config.samples_per_class {
            let tier = if k < n_easy { Tier::Easy } else { Tier::Hard };
            let sigma = match tier {
                Tier::Easy => config.easy_noise,
                Tier::Hard => config.hard_noise,
            };
            let sample = LabeledSample {
                sample_id: next_id,
                input: noisy_sample(proto, sigma, &mut rng),
                class_id: class,
                tier,
            };
            next_id += 1;
            if class < config.train_classes() {
                train.push(sample);
            } else {
                held_out.push(sample);
            }
        }
    }
    let eval = build_eval_split(held_out, config.seed)?;
    Ok(Dataset {
        config: config.clone(),
        train,
        eval,
    })
}

fn build_eval_split(samples: Vec<LabeledSample>, seed: u64) -> Result<EvalSplit> {
    let mut gallery = Vec::new();
    let mut seen = HashSet::new();
    // First easy sample of each class, falling back to the first sample.
    let mut classes: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    classes.dedup();
    for &c in &classes {
        let pick = samples
            .iter()
            .position(|s| s.class_id == c && s.tier == Tier::Easy)
            .or_else(|| samples.iter().position(|s| s.class_id == c))
            .expect("class has samples");
        gallery.push(pick);
        seen.insert(pick);
    }
    let probes: Vec<usize> = (0..samples.len()).filter(|i| !seen.contains(i)).collect();

    let mut positives = Vec::new();
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            if samples[i].class_id == samples[j].class_id {
                positives.push((i, j));
            }
        }
    }
    let mut rng = stream(seed, Purpose::Pairs, 0);
    if positives.len() > MAX_POSITIVE_PAIRS {
        let mut keep = index::sample(&mut rng, positives.len(), MAX_POSITIVE_PAIRS).into_vec();
        keep.sort_unstable();
        positives = keep.into_iter().map(|k| positives[k]).collect();
    }
    let mut negatives = Vec::with_capacity(positives.len());
    let mut chosen = HashSet::new();
    if classes.len() > 1 {
        let n = samples.len();
        while negatives.len() < positives.len() {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if samples[i].class_id == samples[j].class_id {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if chosen.insert(key) {
                negatives.push(key);
            }
        }
    }
    let pair = |(a, b): (usize, usize), same: bool| VerificationPair {
        a,
        b,
        same_class: same,
        tier_pair: TierPair::of(samples[a].tier, samples[b].tier),
    };
    let verification_pairs = positives
        .into_iter()
        .map(|p| pair(p, true))
        .chain(negatives.into_iter().map(|p| pair(p, false)))
        .collect();
    Ok(EvalSplit {
        samples,
        verification_pairs,
        gallery,
        probes,
    })
}

fn write_sample(w: &mut Writer, s: &LabeledSample) {
    w.u64(s.sample_id);
    w.u64(s.class_id as u64);
    w.u8(match s.tier {
        Tier::Easy => 0,
        Tier::Hard => 1,
    });
    w.f64s(&s.input);
}

fn read_sample(r: &mut Reader<'_>, dim: usize) -> Result<LabeledSample> {
    let sample_id = r.u64()?;
    let class_id = r.u64()? as usize;
    let tier = match r.u8()? {
        0 => Tier::Easy,
        1 => Tier::Hard,
        t => return Err(r.error(format!("unknown tier tag {t}"))),
    };
    let input = r.f64s(dim)?;
    Ok(LabeledSample {
        sample_id,
        input,
        class_id,
        tier,
    })
}

impl Dataset {
    /// Binary encoding: magic, version, generator config, counts, samples,
    /// pairs, gallery, probes, SHA-256 digest.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(c.num_classes as u64);
        w.u64(c.samples_per_class as u64);
        w.u64(c.input_dim as u64);
        w.f64(c.easy_fraction);
        w.f64(c.easy_noise);
        w.f64(c.hard_noise);
        w.u64(c.seed);
        w.u64(self.train.len() as u64);
        for s in &self.train {
            write_sample(&mut w, s);
        }
        let e = &self.eval;
        w.u64(e.samples.len() as u64);
        for s in &e.samples {
            write_sample(&mut w, s);
        }
        w.u64(e.verification_pairs.len() as u64);
        for p in &e.verification_pairs {
            w.u64(p.a as u64);
            w.u64(p.b as u64);
            w.u8(p.same_class as u8);
            w.u8(p.tier_pair.tag());
        }
        w.u64(e.gallery.len() as u64);
        for &g in &e.gallery {
            w.u64(g as u64);
        }
        w.u64(e.probes.len() as u64);
        for &p in &e.probes {
            w.u64(p as u64);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::unverified(data);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a dataset file (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let body_len = data
            .len()
            .checked_sub(32)
            .ok_or_else(|| r.error("truncated before checksum"))?;
        let mut r = Reader::unverified(&data[..body_len]);
        r.take(MAGIC.len() + 4)?;
        let config = GenConfig {
            num_classes: r.u64()? as usize,
            samples_per_class: r.u64()? as usize,
            input_dim: r.u64()? as usize,
            easy_fraction: r.f64()?,
            easy_noise: r.f64()?,
            hard_noise: r.f64()?,
            seed: r.u64()?,
        };
        let dim = config.input_dim;
        let sample_size = 17 + 8 * dim;
        let n_train = r.count(sample_size)?;
        let train = (0..n_train)
            .map(|_| read_sample(&mut r, dim))
            .collect::<Result<Vec<_>>>()?;
        let n_eval = r.count(sample_size)?;
        let samples = (0..n_eval)
            .map(|_| read_sample(&mut r, dim))
            .collect::<Result<Vec<_>>>()?;
        let n_pairs = r.count(18)?;
        let mut verification_pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let at = r.offset();
            let a = r.u64()? as usize;
            let b = r.u64()? as usize;
            let same_class = r.u8()? != 0;
            let tag = r.u8()?;
            let tier_pair =
                TierPair::from_tag(tag).ok_or_else(|| r.error(format!("unknown pair tag {tag}")))?;
            if a >= n_eval || b >= n_eval {
                return Err(Error::Format {
                    offset: at,
                    message: format!("pair ({a}, {b}) indexes past {n_eval} eval samples"),
                });
            }
            verification_pairs.push(VerificationPair {
                a,
                b,
                same_class,
                tier_pair,
            });
        }
        let read_indices = |r: &mut Reader<'_>| -> Result<Vec<usize>> {
            let n = r.count(8)?;
            (0..n)
                .map(|_| {
                    let v = r.u64()? as usize;
                    if v >= n_eval {
                        Err(r.error(format!("index {v} past {n_eval} eval samples")))
                    } else {
                        Ok(v)
                    }
                })
                .collect()
        };
        let gallery = read_indices(&mut r)?;
        let probes = read_indices(&mut r)?;
        r.expect_end()?;
        Reader::verified(data).map_err(|_| Error::Corruption {
            path: path.to_path_buf(),
            message: "checksum mismatch".into(),
        })?;
        Ok(Self {
            config,
            train,
            eval: EvalSplit {
                samples,
                verification_pairs,
                gallery,
                probes,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?, path)
    }

    /// `sample_id,class_id,tier,v0..v{dim-1}` for every train and eval sample.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,class_id,tier");
        for d in 0..self.config.input_dim {
            write!(out, ",v{d}").expect("write to String");
        }
        out.push('\n');
        for s in self.train.iter().chain(&self.eval.samples) {
            write!(out, "{},{},{}", s.sample_id, s.class_id, s.tier.as_str()).expect("write");
            for v in &s.input {
                write!(out, ",{v:.16e}").expect("write");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_classes: 10,
            samples_per_class: 20,
            input_dim: 8,
            ..GenConfig::default()
        }
    }

    #[test]
    fn rejects_too_few_classes_and_bad_fraction() {
        let err = generate(&GenConfig {
            num_classes: 4,
            ..small()
        })
        .unwrap_err();
        assert!(err.to_string().contains("gen.num_classes"));
        let err = GenConfig {
            easy_fraction: 1.2,
            ..small()
        }
        .validate()
        .unwrap_err();
        assert!(err.to_string().contains("gen.easy_fraction"));
        assert!(GenConfig {
            hard_noise: 0.1,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn split_shapes_and_open_set() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.train.len(), 8 * 20);
        assert_eq!(d.eval.samples.len(), 2 * 20);
        assert_eq!(d.eval.gallery.len(), 2);
        assert_eq!(d.eval.probes.len(), 38);
        let train_classes: HashSet<_> = d.train.iter().map(|s| s.class_id).collect();
        assert!(d.eval.samples.iter().all(|s| !train_classes.contains(&s.class_id)));
        for &g in &d.eval.gallery {
            assert_eq!(d.eval.samples[g].tier, Tier::Easy);
        }
        let pos = d.eval.verification_pairs.iter().filter(|p| p.same_class).count();
        assert_eq!(pos, 2 * 190);
        assert_eq!(d.eval.verification_pairs.len(), 2 * pos);
        for s in d.train.iter().chain(&d.eval.samples) {
            assert!((l2_norm(&s.input) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn near_zero_easy_noise_reproduces_prototype() {
        let cfg = GenConfig {
            easy_noise: 1e-300,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        let easy: Vec<_> = d.train.iter().filter(|s| s.class_id == 0 && s.tier == Tier::Easy).collect();
        for s in &easy[1..] {
            for (a, b) in s.input.iter().zip(&easy[0].input) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(&small()).unwrap().to_bytes();
        let b = generate(&small()).unwrap().to_bytes();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 1, ..small() }).unwrap().to_bytes();
        assert_ne!(a, c);
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let d = generate(&small()).unwrap();
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, d);

        let mut bad = bytes.clone();
        bad[1] = b'?';
        assert!(matches!(
            Dataset::from_bytes(&bad, Path::new("mem")),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&bad, Path::new("mem")),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            Dataset::from_bytes(truncated, Path::new("mem")),
            Err(Error::Format { .. })
        ));
        let mut flipped = bytes.clone();
        let k = bytes.len() - 100;
        flipped[k] ^= 1;
        assert!(Dataset::from_bytes(&flipped, Path::new("mem")).is_err());
    }

    #[test]
    fn csv_header() {
        let d = generate(&small()).unwrap();
        let csv = d.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("sample_id,class_id,tier,v0,v1"));
        assert!(header.ends_with(",v7"));
        assert_eq!(csv.lines().count(), 1 + 200);
    }
}
