//! Verification scores and error-rate metrics. Scores are dissimilarities:
//! a pair is accepted when its score is at or below the threshold.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::softmax_values;
use crate::error::{Error, Result};
use crate::iriscode::{match_templates, IrisTemplate};
use crate::supernet::{HeadKind, Mode, Supernet};

/// Impostor comparisons kept per genuine comparison.
pub const IMPOSTOR_RATIO: usize = 10;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Result<Self> {
        let s = ScoreSet { genuine, impostor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::InsufficientData(format!(
                "{} genuine and {} impostor scores; both must be non-empty",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score set contains a non-finite score".into()));
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            label: String,
            score: f64,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut s = ScoreSet::default();
        for row in rdr.deserialize() {
            let row: Row = row?;
            match row.label.as_str() {
                "genuine" => s.genuine.push(row.score),
                "impostor" => s.impostor.push(row.score),
                other => {
                    return Err(Error::Parse(format!(
                        "{}: label must be genuine or impostor, got \"{other}\"",
                        path.display()
                    )))
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "score"])?;
        for (label, scores) in [("genuine", &self.genuine), ("impostor", &self.impostor)] {
            for s in scores {
                w.write_record([label, &format!("{s:?}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    fn pooled_range(&self) -> (f64, f64) {
        self.genuine
            .iter()
            .chain(&self.impostor)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Fraction of impostors accepted and of genuines rejected at `t`.
    pub fn rates_at(&self, t: f64) -> (f64, f64) {
        let far = self.impostor.iter().filter(|v| **v <= t).count() as f64 / self.impostor.len() as f64;
        let frr = self.genuine.iter().filter(|v| **v > t).count() as f64 / self.genuine.len() as f64;
        (far, frr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Points in increasing threshold order. The first threshold lies below
/// every score (FAR 0, FRR 1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// All pooled scores are equal.
    pub degenerate: bool,
}

/// Sweeps thresholds over the pooled score range: every distinct score when
/// `n_thresholds` is `None`, else that many evenly spaced values from the
/// minimum to the maximum.
pub fn roc(s: &ScoreSet, n_thresholds: Option<usize>) -> Result<RocCurve> {
    s.validate()?;
    let (lo, hi) = s.pooled_range();
    let mut thresholds = match n_thresholds {
        None => {
            let mut all: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
            all.sort_by(f64::total_cmp);
            all.dedup();
            all
        }
        Some(n) if n >= 2 => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
        Some(n) => {
            return Err(Error::Contract(format!("need at least 2 thresholds, got {n}")));
        }
    };
    let below = lo - (hi - lo).max(lo.abs()).max(1.0) * 1e-9;
    thresholds.insert(0, below);
    let mut genuine = s.genuine.clone();
    let mut impostor = s.impostor.clone();
    genuine.sort_by(f64::total_cmp);
    impostor.sort_by(f64::total_cmp);
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let points = thresholds
        .into_iter()
        .map(|t| {
            let acc_i = impostor.partition_point(|v| *v <= t);
            let acc_g = genuine.partition_point(|v| *v <= t);
            RocPoint {
                threshold: t,
                far: acc_i as f64 / ni,
                frr: (genuine.len() - acc_g) as f64 / ng,
            }
        })
        .collect();
    Ok(RocCurve {
        points,
        degenerate: lo == hi,
    })
}

impl RocCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("threshold,far,frr\n");
        for p in &self.points {
            out.push_str(&format!("{:?},{:?},{:?}\n", p.threshold, p.far, p.frr));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub value: f64,
    /// Scores carry no information; the value is fixed at 0.5.
    pub degenerate: bool,
}

/// Error rate where FAR meets FRR, interpolated linearly between the two
/// bracketing thresholds.
pub fn eer(curve: &RocCurve) -> Eer {
    if curve.degenerate {
        return Eer {
            value: 0.5,
            degenerate: true,
        };
    }
    let p = &curve.points;
    for w in p.windows(2) {
        let (d0, d1) = (w[0].far - w[0].frr, w[1].far - w[1].frr);
        if d0 == 0.0 {
            return Eer {
                value: w[0].far,
                degenerate: false,
            };
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = -d0 / (d1 - d0);
            return Eer {
                value: w[0].far + a * (w[1].far - w[0].far),
                degenerate: false,
            };
        }
    }
    // The last threshold accepts everything, so FAR − FRR ends at 1.
    let last = p.last().expect("curve has points");
    Eer {
        value: 0.5 * (last.far + last.frr),
        degenerate: false,
    }
}

/// FRR at the largest threshold whose FAR does not exceed `far_target`.
pub fn frr_at_far(curve: &RocCurve, far_target: f64) -> f64 {
    let p = &curve.points;
    let i = p.iter().rposition(|q| q.far <= far_target).unwrap_or(0);
    p[i].frr
}

pub const DEFAULT_FAR_TARGET: f64 = 0.001;

/// Headline numbers of one score set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eer: f64,
    pub degenerate: bool,
    pub frr_at_far: f64,
    pub genuine: usize,
    pub impostor: usize,
}

pub fn metrics(s: &ScoreSet) -> Result<Metrics> {
    let curve = roc(s, None)?;
    let e = eer(&curve);
    Ok(Metrics {
        eer: e.value,
        degenerate: e.degenerate,
        frr_at_far: frr_at_far(&curve, DEFAULT_FAR_TARGET),
        genuine: s.genuine.len(),
        impostor: s.impostor.len(),
    })
}

/// Keeps at most `IMPOSTOR_RATIO × genuine` of `items`, chosen with a seeded
/// draw and returned in their original order.
fn subsample<T: Copy>(items: Vec<T>, genuine: usize, seed: u64) -> Vec<T> {
    let cap = IMPOSTOR_RATIO * genuine;
    if items.len() <= cap {
        return items;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// All same-label pairs and a capped sample of different-label pairs.
pub fn verification_pairs(
    labels: &[usize],
    seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                genuine.push((i, j));
            } else {
                impostor.push((i, j));
            }
        }
    }
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} genuine and {} impostor pairs; need both",
            genuine.len(),
            impostor.len()
        )));
    }
    let impostor = subsample(impostor, genuine.len(), seed);
    Ok((genuine, impostor))
}

fn pair_scores(
    labels: &[usize],
    seed: u64,
    mut score: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<ScoreSet> {
    let (g, i) = verification_pairs(labels, seed)?;
    let genuine = g.iter().map(|(a, b)| score(*a, *b)).collect::<Result<_>>()?;
    let impostor = i.iter().map(|(a, b)| score(*a, *b)).collect::<Result<_>>()?;
    ScoreSet::new(genuine, impostor)
}

/// Each sample claims its own identity (genuine, score `1 − p`) and every
/// other enrolled identity (impostor), the latter capped by sampling.
pub fn classifier_scores(probs: &[Vec<f64>], claims: &[usize], seed: u64) -> Result<ScoreSet> {
    if probs.len() != claims.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} claims",
            probs.len(),
            claims.len()
        )));
    }
    let mut genuine = Vec::with_capacity(claims.len());
    let mut impostor_claims = Vec::new();
    for (i, (p, c)) in probs.iter().zip(claims).enumerate() {
        if *c >= p.len() {
            return Err(Error::Contract(format!(
                "claimed identity {c} is not among the classifier's {} classes",
                p.len()
            )));
        }
        genuine.push(1.0 - p[*c]);
        impostor_claims.extend((0..p.len()).filter(|k| k != c).map(|k| (i, k)));
    }
    let impostor = subsample(impostor_claims, genuine.len(), seed)
        .into_iter()
        .map(|(i, k)| 1.0 - probs[i][k])
        .collect();
    ScoreSet::new(genuine, impostor)
}

pub fn embedding_scores(embeddings: &[Vec<f64>], labels: &[usize], seed: u64) -> Result<ScoreSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape("one embedding per label required".into()));
    }
    pair_scores(labels, seed, |a, b| {
        Ok(embeddings[a]
            .iter()
            .zip(&embeddings[b])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt())
    })
}

pub fn hamming_scores(
    templates: &[IrisTemplate],
    labels: &[usize],
    max_shift: usize,
    seed: u64,
) -> Result<ScoreSet> {
    if templates.len() != labels.len() {
        return Err(Error::Shape("one template per label required".into()));
    }
    pair_scores(labels, seed, |a, b| {
        Ok(match_templates(&templates[a], &templates[b], max_shift)?.hd)
    })
}

/// Eval-mode head outputs, one row per sample, in chunks of `chunk`.
pub fn network_outputs(net: &Supernet<f32>, ds: &Dataset, chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let y = net.predict(&ds.batch::<f32>(c), Mode::Eval)?;
        let d = y.shape()[1];
        out.extend(
            y.data()
                .chunks(d)
                .map(|row| row.iter().map(|v| *v as f64).collect::<Vec<_>>()),
        );
    }
    Ok(out)
}

/// Scores a trained network on `ds`: claimed-identity probabilities for a
/// softmax head, embedding distances for an embedding head.
pub fn network_scores(net: &Supernet<f32>, ds: &Dataset, seed: u64) -> Result<ScoreSet> {
    let out = network_outputs(net, ds, 64)?;
    match net.head() {
        HeadKind::Softmax => {
            let probs: Vec<Vec<f64>> = out.iter().map(|row| softmax_values(row)).collect();
            classifier_scores(&probs, &ds.labels, seed)
        }
        HeadKind::Embedding => embedding_scores(&out, &ds.labels, seed),
    }
}
