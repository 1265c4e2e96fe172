use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Volume;

/// How the template intensity is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitSpec {
    /// Voxelwise mean of `n` randomly drawn subjects.
    MeanOf(usize),
    /// One randomly drawn subject.
    SingleSubject,
    Zeros,
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::MeanOf(n) => write!(f, "mean-of-{n}"),
            InitSpec::SingleSubject => f.write_str("single-subject"),
            InitSpec::Zeros => f.write_str("zeros"),
        }
    }
}

impl FromStr for InitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "single-subject" => Ok(InitSpec::SingleSubject),
            "zeros" => Ok(InitSpec::Zeros),
            _ => s
                .strip_prefix("mean-of-")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(InitSpec::MeanOf)
                .ok_or_else(|| Error::Config(format!("unknown init spec {s:?}"))),
        }
    }
}

/// Initial template image drawn from `images` according to `spec`.
pub fn init_image<R: Rng>(spec: InitSpec, images: &[&Volume], rng: &mut R) -> Result<Vec<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("template initialization needs a non-empty dataset"))?;
    let n = first.data().len();
    match spec {
        InitSpec::Zeros => Ok(vec![0.0; n]),
        InitSpec::SingleSubject => {
            let i = rng.random_range(0..images.len());
            Ok(images[i].data().to_vec())
        }
        InitSpec::MeanOf(k) => {
            if k > images.len() {
                return Err(Error::contract(format!(
                    "mean-of-{k} initialization with only {} subjects",
                    images.len()
                )));
            }
            let picks = index::sample(rng, images.len(), k).into_vec();
            let mut acc = vec![0.0; n];
            for &i in &picks {
                for (a, v) in acc.iter_mut().zip(images[i].data()) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= k as f64);
            Ok(acc)
        }
    }
}
