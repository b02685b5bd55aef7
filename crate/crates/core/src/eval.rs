//! Per-speaker evaluation and the cross-approach comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{
    base_forward, forward_with_bundle, forward_with_embedding, forward_with_submodel, Basemodel, EmbeddingBundle,
    Fnv64, OneHotBundle, Submodel,
};
use crate::tensor::Tensor;

/// Per-frame MSE above which a frame counts as an error.
pub const FER_THRESHOLD: f32 = 0.1;

/// A trained approach, resolved to a model for each speaker on demand.
#[derive(Clone, Copy, Debug)]
pub enum Variant<'a> {
    Base,
    /// One independently trained submodel per speaker.
    Submodels(&'a BTreeMap<u64, Submodel>),
    /// One shared submodel for every speaker.
    Pooled(&'a Submodel),
    OneHot(&'a OneHotBundle),
    Embedding(&'a EmbeddingBundle),
    /// One adapted embedding bundle per speaker.
    Embeddings(&'a BTreeMap<u64, EmbeddingBundle>),
    /// One fully fine-tuned model copy per speaker.
    Full(&'a BTreeMap<u64, Basemodel>),
}

impl Variant<'_> {
    pub fn predict(&self, base: &Basemodel, speaker_id: u64, x: &Tensor) -> Result<Tensor> {
        let missing = || Error::UnknownSpeaker(speaker_id.to_string());
        match self {
            Variant::Base => base_forward(base, x),
            Variant::Submodels(m) => forward_with_submodel(base, Some(m.get(&speaker_id).ok_or_else(missing)?), x),
            Variant::Pooled(s) => forward_with_submodel(base, Some(s), x),
            Variant::OneHot(b) => forward_with_bundle(base, b, speaker_id, x),
            Variant::Embedding(eb) => forward_with_embedding(base, eb, &eb.row(speaker_id)?, x),
            Variant::Embeddings(m) => {
                let eb = m.get(&speaker_id).ok_or_else(missing)?;
                forward_with_embedding(base, eb, &eb.row(speaker_id)?, x)
            }
            Variant::Full(m) => base_forward(m.get(&speaker_id).ok_or_else(missing)?, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScore {
    pub speaker_id: u64,
    pub frames: usize,
    pub mse: f64,
    pub fer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n − 1); 0 for a single speaker.
    pub stdev: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Aggregate {
        let n = values.len();
        if n == 0 {
            return Aggregate {
                mean: f64::NAN,
                median: f64::NAN,
                stdev: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let stdev = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Aggregate { mean, median, stdev }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub speakers: Vec<SpeakerScore>,
    pub mse: Aggregate,
    pub mean_fer: f64,
    /// Hash of the evaluated speaker ids and frames.
    pub test_set: u64,
}

impl EvalReport {
    pub fn score(&self, speaker_id: u64) -> Option<&SpeakerScore> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id)
    }
}

/// Scores `variant` on `split` of every corpus.
pub fn evaluate(base: &Basemodel, variant: Variant<'_>, corpora: &[Corpus], split: Split) -> Result<EvalReport> {
    if corpora.is_empty() {
        return Err(Error::pre("evaluate needs at least one corpus"));
    }
    let mut fp = Fnv64::new();
    let mut speakers = Vec::with_capacity(corpora.len());
    for c in corpora {
        if c.count(split) == 0 {
            return Err(Error::pre(format!("speaker {} has an empty {split:?} split", c.speaker_id)));
        }
        let (x, y) = c.frames(split)?;
        fp.write(&c.speaker_id.to_le_bytes());
        fp.write_f32s(x.data());
        fp.write_f32s(y.data());
        let pred = variant.predict(base, c.speaker_id, &x)?;
        let d = y.cols();
        let mut total = 0.0f64;
        let mut errors = 0usize;
        for r in 0..y.rows() {
            let se: f64 = pred
                .row(r)
                .iter()
                .zip(y.row(r))
                .map(|(&p, &t)| (f64::from(p) - f64::from(t)).powi(2))
                .sum();
            total += se;
            if se / d as f64 > f64::from(FER_THRESHOLD) {
                errors += 1;
            }
        }
        let frames = y.rows();
        speakers.push(SpeakerScore {
            speaker_id: c.speaker_id,
            frames,
            mse: total / (frames * d) as f64,
            fer: errors as f64 / frames as f64,
        });
    }
    let mses: Vec<f64> = speakers.iter().map(|s| s.mse).collect();
    let mean_fer = speakers.iter().map(|s| s.fer).sum::<f64>() / speakers.len() as f64;
    Ok(EvalReport {
        split,
        mse: Aggregate::of(&mses),
        mean_fer,
        speakers,
        test_set: fp.finish(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub approach: String,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub stdev_mse: f64,
    pub mean_fer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub split: Split,
    pub rows: Vec<ComparisonRow>,
}

/// One row per approach. All reports must cover the same test set.
pub fn comparison_report(reports: &[(String, EvalReport)]) -> Result<ComparisonTable> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::pre("comparison needs at least one report"));
    };
    for (name, r) in reports {
        if r.test_set != first.test_set || r.split != first.split {
            return Err(Error::pre(format!("approach {name:?} was evaluated on a different test set")));
        }
    }
    Ok(ComparisonTable {
        split: first.split,
        rows: reports
            .iter()
            .map(|(name, r)| ComparisonRow {
                approach: name.clone(),
                mean_mse: r.mse.mean,
                median_mse: r.mse.median,
                stdev_mse: r.mse.stdev,
                mean_fer: r.mean_fer,
            })
            .collect(),
    })
}

impl ComparisonTable {
    pub fn row(&self, approach: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.approach == approach)
    }

    /// Tab-separated text with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("approach\tmean_mse\tmedian_mse\tstdev_mse\tmean_fer\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.approach, r.mean_mse, r.median_mse, r.stdev_mse, r.mean_fer
            );
        }
        s
    }

    /// One JSON record per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }
}
