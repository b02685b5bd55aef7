//! Embedding export and a linear separability probe over etiology labels.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Severity, SpeakerSpec};
use crate::error::{Error, Result};
use crate::model::EmbeddingBundle;

/// One speaker's flattened `L·M` embedding with its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub speaker_id: u64,
    pub etiology: usize,
    pub severity: Severity,
    pub vector: Vec<f32>,
}

/// Flattens every speaker row of `eb`, labelled from `specs`.
pub fn export_embeddings(eb: &EmbeddingBundle, specs: &[SpeakerSpec]) -> Result<Vec<EmbeddingRecord>> {
    eb.validate()?;
    let by_id: BTreeMap<u64, &SpeakerSpec> = specs.iter().map(|s| (s.speaker_id, s)).collect();
    eb.speakers
        .iter()
        .map(|&id| {
            let spec = by_id.get(&id).ok_or_else(|| Error::UnknownSpeaker(id.to_string()))?;
            Ok(EmbeddingRecord {
                speaker_id: id,
                etiology: spec.etiology,
                severity: spec.severity,
                vector: eb.flat_vector(id)?,
            })
        })
        .collect()
}

/// One JSON record per line.
pub fn records_to_jsonl(records: &[EmbeddingRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
        .collect()
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EmbeddingRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::pre(format!("record {i}: {e}"))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { steps: 500, lr: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAccuracy {
    pub etiology_a: usize,
    pub etiology_b: usize,
    pub speakers: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub pairs: Vec<PairAccuracy>,
    pub mean_accuracy: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Full-batch gradient descent on the mean logistic loss, zero init.
fn fit_logistic(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let e = sigmoid(z) - yi;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += e * v;
            }
            gb += e;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= cfg.lr * g / n;
        }
        b -= cfg.lr * gb / n;
    }
    (w, b)
}

/// Feature-wise standardization fitted on `train`.
fn standardize(train: &[Vec<f64>]) -> impl Fn(&[f64]) -> Vec<f64> {
    let d = train[0].len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    move |r: &[f64]| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect()
}

/// Leave-one-out accuracy of a binary logistic classifier.
fn loo_accuracy(x: &[Vec<f64>], y: &[f64], cfg: &ProbeConfig) -> f64 {
    let correct = (0..x.len())
        .filter(|&i| {
            let train_x: Vec<Vec<f64>> = x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| r.clone()).collect();
            let train_y: Vec<f64> = y.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v).collect();
            let scale = standardize(&train_x);
            let sx: Vec<Vec<f64>> = train_x.iter().map(|r| scale(r)).collect();
            let (w, b) = fit_logistic(&sx, &train_y, cfg);
            let t = scale(&x[i]);
            let z = t.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z >= 0.0) == (y[i] == 1.0)
        })
        .count();
    correct as f64 / x.len() as f64
}

/// Pairwise leave-one-out accuracy for every pair of etiologies present.
pub fn probe_separability(records: &[EmbeddingRecord], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let mut classes: BTreeMap<usize, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in records {
        classes.entry(r.etiology).or_default().push(r);
    }
    if classes.len() < 2 {
        return Err(Error::pre(format!("probe needs at least 2 etiologies, found {}", classes.len())));
    }
    if let Some((e, v)) = classes.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::pre(format!("etiology {e} has {} member(s); need at least 2", v.len())));
    }
    let dim = records[0].vector.len();
    if records.iter().any(|r| r.vector.len() != dim) || dim == 0 {
        return Err(Error::dims("embedding vectors differ in length"));
    }
    let keys: Vec<usize> = classes.keys().copied().collect();
    let mut pairs = Vec::new();
    for (i, &a) in keys.iter().enumerate() {
        for &b in &keys[i + 1..] {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (label, e) in [(0.0, a), (1.0, b)] {
                for r in &classes[&e] {
                    x.push(r.vector.iter().map(|&v| f64::from(v)).collect());
                    y.push(label);
                }
            }
            pairs.push(PairAccuracy {
                etiology_a: a,
                etiology_b: b,
                speakers: x.len(),
                accuracy: loo_accuracy(&x, &y, cfg),
            });
        }
    }
    let mean_accuracy = pairs.iter().map(|p| p.accuracy).sum::<f64>() / pairs.len() as f64;
    Ok(ProbeReport { pairs, mean_accuracy })
}

/// The same records with etiology labels permuted.
pub fn shuffle_labels(records: &[EmbeddingRecord], seed: u64) -> Vec<EmbeddingRecord> {
    let mut labels: Vec<usize> = records.iter().map(|r| r.etiology).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    records
        .iter()
        .zip(labels)
        .map(|(r, etiology)| EmbeddingRecord { etiology, ..r.clone() })
        .collect()
}
