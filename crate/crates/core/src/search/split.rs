use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ManifestEntry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Every subject appears in all partitions; images do not repeat.
    SampleDisjoint,
    /// No subject appears in two partitions.
    SubjectDisjoint,
}

impl FromStr for SplitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" | "sample_disjoint" => Ok(SplitScheme::SampleDisjoint),
            "subject" | "subject_disjoint" => Ok(SplitScheme::SubjectDisjoint),
            other => Err(Error::Parse(format!("unknown split scheme \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub scheme: SplitScheme,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 70 / 10 / 20.
    pub fn new(scheme: SplitScheme, seed: u64) -> Self {
        SplitSpec {
            scheme,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn train_fraction(&self) -> f64 {
        1.0 - self.val_fraction - self.test_fraction
    }

    /// Validation and test counts out of `n`; training gets the remainder.
    fn counts(&self, n: usize) -> (usize, usize) {
        let val = (self.val_fraction * n as f64).round() as usize;
        let test = (self.test_fraction * n as f64).round() as usize;
        (val, test.min(n - val.min(n)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Partitions a manifest. Rows keep their manifest order within each part.
pub fn split_dataset(entries: &[ManifestEntry], spec: &SplitSpec) -> Result<Split> {
    let (v, t) = (spec.val_fraction, spec.test_fraction);
    if !(0.0..1.0).contains(&v) || !(0.0..1.0).contains(&t) || v + t >= 1.0 {
        return Err(Error::Contract(format!(
            "split fractions val={v}, test={t} leave no training share"
        )));
    }
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_subject.entry(&e.subject_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // 0 = train, 1 = val, 2 = test
    let mut part = vec![0u8; entries.len()];
    match spec.scheme {
        SplitScheme::SampleDisjoint => {
            if by_subject.is_empty() {
                return Err(Error::InsufficientData("empty manifest".into()));
            }
            for (subject, idx) in &by_subject {
                if idx.len() < 2 {
                    return Err(Error::InsufficientData(format!(
                        "subject {subject} has {} image(s); sample-disjoint splits need 2",
                        idx.len()
                    )));
                }
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                let (nv, nt) = spec.counts(idx.len());
                for i in &idx[..nv] {
                    part[*i] = 1;
                }
                for i in &idx[nv..nv + nt] {
                    part[*i] = 2;
                }
            }
        }
        SplitScheme::SubjectDisjoint => {
            if by_subject.len() < 10 {
                return Err(Error::InsufficientData(format!(
                    "{} subjects; subject-disjoint splits need 10",
                    by_subject.len()
                )));
            }
            let mut subjects: Vec<&Vec<usize>> = by_subject.values().collect();
            subjects.shuffle(&mut rng);
            let (nv, nt) = spec.counts(subjects.len());
            for (k, idx) in subjects.iter().enumerate() {
                let p = if k < nv {
                    1
                } else if k < nv + nt {
                    2
                } else {
                    0
                };
                for i in idx.iter() {
                    part[*i] = p;
                }
            }
        }
    }
    let mut out = Split::default();
    for (e, p) in entries.iter().zip(part) {
        match p {
            0 => out.train.push(e.clone()),
            1 => out.val.push(e.clone()),
            _ => out.test.push(e.clone()),
        }
    }
    Ok(out)
}
