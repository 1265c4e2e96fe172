use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::F, Sex::M];

    pub fn index(self) -> usize {
        match self {
            Sex::F => 0,
            Sex::M => 1,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::F => "F",
            Sex::M => "M",
        })
    }
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "F" | "f" => Ok(Sex::F),
            "M" | "m" => Ok(Sex::M),
            other => Err(Error::contract(format!("unknown sex {other:?} (expected F or M)"))),
        }
    }
}

/// Non-image information about one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    /// Years.
    pub age: f64,
    pub sex: Sex,
    #[serde(default)]
    pub extras: BTreeMap<String, String>,
}

impl AttributeRecord {
    pub fn new(age: f64, sex: Sex) -> Self {
        AttributeRecord {
            age,
            sex,
            extras: BTreeMap::new(),
        }
    }
}

/// Maps records to decoder inputs: `[age scaled to [-1, 1], one-hot(sex),
/// one-hot(extra_1), ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeEncoder {
    pub age_min: f64,
    pub age_max: f64,
    /// Declared categorical vocabularies, encoded in this order.
    pub extras: Vec<(String, Vec<String>)>,
}

/// Slack for ages a rounding error outside the training range.
const AGE_SLACK: f64 = 1e-9;

impl AttributeEncoder {
    pub fn new(age_min: f64, age_max: f64) -> Result<Self> {
        if !(age_min.is_finite() && age_max.is_finite() && age_max > age_min) {
            return Err(Error::contract(format!("invalid age range [{age_min}, {age_max}]")));
        }
        Ok(AttributeEncoder {
            age_min,
            age_max,
            extras: Vec::new(),
        })
    }

    /// Encoder spanning the ages of `records`.
    pub fn fit(records: &[AttributeRecord]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::contract("attribute encoder needs at least two records"));
        }
        let lo = records.iter().map(|r| r.age).fold(f64::INFINITY, f64::min);
        let hi = records.iter().map(|r| r.age).fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi)
    }

    pub fn with_extra(mut self, name: &str, vocab: &[&str]) -> Self {
        self.extras
            .push((name.to_string(), vocab.iter().map(|s| s.to_string()).collect()));
        self
    }

    pub fn dim(&self) -> usize {
        3 + self.extras.iter().map(|(_, v)| v.len()).sum::<usize>()
    }

    pub fn normalize_age(&self, age: f64) -> Result<f64> {
        if !(age >= self.age_min - AGE_SLACK && age <= self.age_max + AGE_SLACK) {
            return Err(Error::contract(format!(
                "age {age} outside the population range [{}, {}]",
                self.age_min, self.age_max
            )));
        }
        let z = 2.0 * (age - self.age_min) / (self.age_max - self.age_min) - 1.0;
        Ok(z.clamp(-1.0, 1.0))
    }

    pub fn denormalize_age(&self, z: f64) -> f64 {
        self.age_min + (z + 1.0) * 0.5 * (self.age_max - self.age_min)
    }

    pub fn encode(&self, rec: &AttributeRecord) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(self.normalize_age(rec.age)?);
        out.extend(Sex::ALL.iter().map(|&s| if s == rec.sex { 1.0 } else { 0.0 }));
        for (name, vocab) in &self.extras {
            let value = rec
                .extras
                .get(name)
                .ok_or_else(|| Error::contract(format!("record lacks attribute {name}")))?;
            let k = vocab.iter().position(|v| v == value).ok_or_else(|| {
                Error::contract(format!(
                    "unknown value {value:?} for attribute {name} (vocabulary {vocab:?})"
                ))
            })?;
            out.extend((0..vocab.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
        }
        Ok(out)
    }

    pub fn decode(&self, a: &[f64]) -> Result<AttributeRecord> {
        if a.len() != self.dim() {
            return Err(Error::contract(format!(
                "attribute vector has length {}, expected {}",
                a.len(),
                self.dim()
            )));
        }
        let argmax = |s: &[f64]| {
            s.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        let sex = Sex::ALL[argmax(&a[1..3])];
        let mut extras = BTreeMap::new();
        let mut off = 3;
        for (name, vocab) in &self.extras {
            extras.insert(name.clone(), vocab[argmax(&a[off..off + vocab.len()])].clone());
            off += vocab.len();
        }
        Ok(AttributeRecord {
            age: self.denormalize_age(a[0]),
            sex,
            extras,
        })
    }
}
