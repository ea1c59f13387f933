//! Datasets: the parametric synthetic generator, a CIFAR-10 binary reader,
//! threat-level splits, and a binary dataset cache.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::FeatureMap;

pub const NUM_CLASSES: usize = 10;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CACHE_MAGIC: &[u8; 4] = b"PDFD";
const CACHE_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FeatureMap,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Base,
    Shifted,
}

impl Style {
    fn contrast(self) -> f64 {
        match self {
            Style::Base => 1.0,
            Style::Shifted => 0.7,
        }
    }

    fn noise(self) -> f64 {
        match self {
            Style::Base => 0.02,
            Style::Shifted => 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub style: Style,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { size: 16, style: Style::Base, seed: 0 }
    }
}

/// Stripe period in pixels for classes 0..=3.
const STRIPE_PERIOD: f64 = 4.0;

/// Generates `n` samples. Sample `i` draws its label and pattern parameters
/// from its own seeded stream before any pixel noise, so the two styles agree
/// on labels and geometry for the same seed.
pub fn synth_generate(spec: &SynthSpec, n: usize) -> Vec<Sample> {
    (0..n).map(|i| synth_sample(spec, i)).collect()
}

fn synth_sample(spec: &SynthSpec, index: usize) -> Sample {
    let s = spec.size;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, tag::DATA, index as u32));
    let label = rng.below(NUM_CLASSES);
    let mut img = FeatureMap::zeros(1, s, s);
    match label {
        0..=3 => {
            let angle = PI / 4.0 * label as f64;
            let phase = 2.0 * PI * rng.uniform();
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..s {
                for x in 0..s {
                    let t = x as f64 * ca + y as f64 * sa;
                    img.set(0, y, x, 0.5 + 0.5 * (2.0 * PI * t / STRIPE_PERIOD + phase).sin());
                }
            }
        }
        4..=6 => {
            let cell = 2 + 2 * (label - 4);
            let oy = rng.below(2 * cell);
            let ox = rng.below(2 * cell);
            for y in 0..s {
                for x in 0..s {
                    img.set(0, y, x, (((y + oy) / cell + (x + ox) / cell) % 2) as f64);
                }
            }
        }
        _ => {
            let r = (2 + label - 7) as f64;
            let span = s as f64 - 2.0 * r;
            let cy = r + span * rng.uniform();
            let cx = r + span * rng.uniform();
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img.set(0, y, x, (-d2 / (2.0 * r * r)).exp());
                }
            }
        }
    }
    let (contrast, noise) = (spec.style.contrast(), spec.style.noise());
    for v in img.data_mut() {
        *v = (0.5 + contrast * (*v - 0.5) + noise * rng.gaussian()).clamp(0.0, 1.0);
    }
    Sample { image: img, label }
}

/// Reads CIFAR-10 binary records: one label byte followed by 3x32x32 pixel
/// bytes in R, G, B plane order.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Sample>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!("truncated record: {} trailing bytes", bytes.len() - whole),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= NUM_CLASSES {
                return Err(Error::Format { offset: (i * CIFAR_RECORD) as u64, reason: format!("label {label} > 9") });
            }
            let pixels = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(Sample { image: FeatureMap::from_vec(3, 32, 32, pixels)?, label })
        })
        .collect()
}

pub fn load_cifar10(path: &Path) -> Result<Vec<Sample>> {
    parse_cifar10(&std::fs::read(path)?)
}

/// Train/test pool that threat splits draw from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Generator behind the pools, when synthetic. Level-1 auxiliary data is
    /// drawn from its shifted style.
    pub synth: Option<SynthSpec>,
}

impl Dataset {
    /// Synthetic train and test pools from disjoint index ranges of one stream.
    pub fn synthetic(spec: SynthSpec, train: usize, test: usize) -> Self {
        let all = synth_generate(&spec, train + test);
        let test_part = all[train..].to_vec();
        let mut train_part = all;
        train_part.truncate(train);
        Self { train: train_part, test: test_part, synth: Some(spec) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ThreatLevel {
    /// Similar-distribution auxiliary data under a sample budget.
    SimilarDistribution = 1,
    /// In-distribution subset under a sample budget.
    InDistribution = 2,
    /// The full training set.
    Unbounded = 3,
}

impl TryFrom<u8> for ThreatLevel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(ThreatLevel::SimilarDistribution),
            2 => Ok(ThreatLevel::InDistribution),
            3 => Ok(ThreatLevel::Unbounded),
            _ => Err(Error::Config(format!("threat level {v} not in 1..=3"))),
        }
    }
}

impl From<ThreatLevel> for u8 {
    fn from(l: ThreatLevel) -> u8 {
        l as u8
    }
}

pub const MAX_LIMITED_BUDGET: usize = 2000;

#[derive(Debug, Clone)]
pub struct ThreatSplit {
    pub level: ThreatLevel,
    pub attacker: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Attacker training data for `level`; the evaluation set is always the
/// held-out test pool, which no level can draw from.
pub fn threat_split(data: &Dataset, level: ThreatLevel, budget: usize, seed: u64) -> Result<ThreatSplit> {
    if level != ThreatLevel::Unbounded && budget > MAX_LIMITED_BUDGET {
        return Err(Error::ThreatModel(format!("budget {budget} exceeds {MAX_LIMITED_BUDGET} for level {}", level as u8)));
    }
    let attacker = match level {
        ThreatLevel::Unbounded => data.train.clone(),
        ThreatLevel::InDistribution => {
            if budget > data.train.len() {
                return Err(Error::InvalidArgument(format!("budget {budget} exceeds pool of {}", data.train.len())));
            }
            let mut rng = SplitMix64::new(derive_seed(seed, tag::ATTACK, 2));
            let mut idx: Vec<usize> = (0..data.train.len()).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
            }
            idx.truncate(budget);
            idx.sort_unstable();
            idx.into_iter().map(|i| data.train[i].clone()).collect()
        }
        ThreatLevel::SimilarDistribution => match data.synth {
            Some(spec) => {
                let aux = SynthSpec { style: Style::Shifted, seed: derive_seed(seed, tag::ATTACK, 1), ..spec };
                synth_generate(&aux, budget)
            }
            None => {
                if budget > data.train.len() {
                    return Err(Error::InvalidArgument(format!("budget {budget} exceeds pool of {}", data.train.len())));
                }
                let mut rng = SplitMix64::new(derive_seed(seed, tag::ATTACK, 1));
                data.train[..budget]
                    .iter()
                    .map(|s| {
                        let image = s.image.map(|v| 0.5 + 0.7 * (v - 0.5));
                        let noisy: Vec<f64> =
                            image.data().iter().map(|v| (v + 0.1 * rng.gaussian()).clamp(0.0, 1.0)).collect();
                        let (c, h, w) = image.shape();
                        Ok(Sample { image: FeatureMap::from_vec(c, h, w, noisy)?, label: s.label })
                    })
                    .collect::<Result<_>>()?
            }
        },
    };
    Ok(ThreatSplit { level, attacker, eval: data.test.clone() })
}

/// Dataset cache: `"PDFD" | version u8 | count u32 | per sample: label u8 +
/// tensor (ndims u8, dims u32 each, f32 values)`, all little-endian.
pub fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.push(CACHE_VERSION);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.push(s.label as u8);
        s.image.encode_f32(&mut out);
    }
    out
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>> {
    let fmt = |offset: usize, reason: &str| Error::Format { offset: offset as u64, reason: reason.into() };
    if bytes.len() < 9 || &bytes[..4] != CACHE_MAGIC {
        return Err(fmt(0, "not a dataset cache"));
    }
    if bytes[4] != CACHE_VERSION {
        return Err(fmt(4, "unsupported cache version"));
    }
    let count = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let mut pos = 9;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = *bytes.get(pos).ok_or_else(|| fmt(pos, "truncated"))? as usize;
        let (image, used) = FeatureMap::decode_f32(&bytes[pos + 1..], usize::MAX).map_err(|_| fmt(pos + 1, "bad tensor"))?;
        out.push(Sample { image, label });
        pos += 1 + used;
    }
    if pos != bytes.len() {
        return Err(fmt(pos, "trailing bytes"));
    }
    Ok(out)
}
