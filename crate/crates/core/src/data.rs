//! Synthetic speaker corpora.
//!
//! Each synthetic speaker distorts clean frames `y ~ N(0, I)` through
//! `A_s = I + ε·(R_e + κ·P_s)`, where `R_e` is shared by every speaker of
//! etiology `e`, `P_s` is speaker-specific and `ε` is the severity. The task
//! is to recover `y` from `x = A_s·y + σ_n·η`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{derive_seed, write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::model::FORMAT_VERSION;
use crate::tensor::{self, Tensor};

pub const DEFAULT_KAPPA: f32 = 0.3;
pub const DEFAULT_NOISE_STD: f32 = 0.05;
pub const MIN_UTTERANCES: usize = 10;

const CORPUS_MAGIC: [u8; 4] = *b"CORP";

#[derive(Clone, Debug, PartialEq)]
pub struct EtiologyCatalog {
    pub d_in: usize,
    pub seed: u64,
    pub names: Vec<String>,
    pub matrices: Vec<Tensor>,
}

impl EtiologyCatalog {
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// `E` random matrices with entries `N(0, 1/d_in)`.
pub fn gen_catalog(n_etiologies: usize, d_in: usize, seed: u64) -> Result<EtiologyCatalog> {
    if n_etiologies < 2 {
        return Err(Error::pre(format!("need at least 2 etiologies, got {n_etiologies}")));
    }
    if d_in == 0 {
        return Err(Error::pre("d_in must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (d_in as f32).sqrt();
    let matrices = (0..n_etiologies)
        .map(|_| Tensor::randn(&[d_in, d_in], std, &mut rng))
        .collect();
    Ok(EtiologyCatalog {
        d_in,
        seed,
        names: (0..n_etiologies).map(|e| format!("etiology-{e}")).collect(),
        matrices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Typical,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub fn epsilon(self) -> f32 {
        match self {
            Severity::Typical => 0.0,
            Severity::Mild => 0.1,
            Severity::Moderate => 0.3,
            Severity::Severe => 0.6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Severity::Typical => "typical",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

/// Everything needed to regenerate a speaker profile from its catalog.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub speaker_id: u64,
    pub etiology: usize,
    pub severity: Severity,
    pub kappa: f32,
    pub noise_std: f32,
    pub seed: u64,
}

impl SpeakerSpec {
    pub fn new(speaker_id: u64, etiology: usize, severity: Severity, seed: u64) -> Self {
        SpeakerSpec {
            speaker_id,
            etiology,
            severity,
            kappa: DEFAULT_KAPPA,
            noise_std: DEFAULT_NOISE_STD,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub spec: SpeakerSpec,
    pub idiosyncrasy: Tensor,
    pub distortion: Tensor,
}

impl SpeakerProfile {
    pub fn speaker_id(&self) -> u64 {
        self.spec.speaker_id
    }

    /// `x = A_s·y + σ_n·η` for every row of `y`, drawing `η` from `rng`.
    pub fn distort(&self, y: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut x = tensor::matmul(y, &self.distortion.transpose())?;
        if self.spec.noise_std > 0.0 {
            let normal = Normal::new(0.0f32, self.spec.noise_std).expect("finite noise std");
            for v in x.data_mut() {
                *v += normal.sample(rng);
            }
        }
        Ok(x)
    }
}

pub fn gen_speaker(catalog: &EtiologyCatalog, spec: SpeakerSpec) -> Result<SpeakerProfile> {
    let Some(r) = catalog.matrices.get(spec.etiology) else {
        return Err(Error::pre(format!(
            "etiology {} out of range for a catalog of {}",
            spec.etiology,
            catalog.len()
        )));
    };
    let d = catalog.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let p = Tensor::randn(&[d, d], 1.0 / (d as f32).sqrt(), &mut rng);
    let eps = spec.severity.epsilon();
    let mut a = Tensor::identity(d);
    if eps != 0.0 {
        for ((a, &r), &p) in a.data_mut().iter_mut().zip(r.data()).zip(p.data()) {
            *a += eps * (r + spec.kappa * p);
        }
    }
    Ok(SpeakerProfile {
        spec,
        idiosyncrasy: p,
        distortion: a,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn tag(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u32) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Dev),
            2 => Ok(Split::Test),
            _ => Err(Error::pre(format!("bad split tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// Distorted frames, `T × d_in`.
    pub x: Tensor,
    /// Clean frames, `T × d_in`.
    pub y: Tensor,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub speaker_id: u64,
    pub d_in: usize,
    pub frames_per_utt: usize,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 80% train, 10% dev, the remainder test.
    pub fn eighty_ten_ten(n: usize) -> Self {
        let train = n * 8 / 10;
        let dev = n / 10;
        SplitCounts {
            train,
            dev,
            test: n - train - dev,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

/// `n_utts` utterances of `T` frames with an 80/10/10 split.
pub fn gen_corpus(speaker: &SpeakerProfile, n_utts: usize, frames_per_utt: usize, seed: u64) -> Result<Corpus> {
    if n_utts < MIN_UTTERANCES {
        return Err(Error::pre(format!(
            "need at least {MIN_UTTERANCES} utterances to split, got {n_utts}"
        )));
    }
    gen_corpus_with_split(speaker, SplitCounts::eighty_ten_ten(n_utts), frames_per_utt, seed)
}

/// Like [`gen_corpus`] with explicit split sizes; used for low-data adaptation sets.
pub fn gen_corpus_with_split(
    speaker: &SpeakerProfile,
    counts: SplitCounts,
    frames_per_utt: usize,
    seed: u64,
) -> Result<Corpus> {
    if frames_per_utt == 0 || counts.total() == 0 {
        return Err(Error::pre("corpus needs at least one utterance and one frame"));
    }
    let d = speaker.distortion.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(counts.total());
    for _ in 0..counts.total() {
        let y = Tensor::randn(&[frames_per_utt, d], 1.0, &mut rng);
        let x = speaker.distort(&y, &mut rng)?;
        utterances.push(Utterance { x, y, split: Split::Train });
    }
    let mut order: Vec<usize> = (0..counts.total()).collect();
    order.shuffle(&mut rng);
    for (rank, &i) in order.iter().enumerate() {
        utterances[i].split = if rank < counts.train {
            Split::Train
        } else if rank < counts.train + counts.dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    Ok(Corpus {
        speaker_id: speaker.speaker_id(),
        d_in: d,
        frames_per_utt,
        utterances,
    })
}

impl Corpus {
    pub fn utterances_in(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.utterances_in(split).count()
    }

    /// All frames of a split stacked into `(x, y)` matrices.
    pub fn frames(&self, split: Split) -> Result<(Tensor, Tensor)> {
        let utts: Vec<&Utterance> = self.utterances_in(split).collect();
        if utts.is_empty() {
            return Err(Error::pre(format!("split {split:?} of speaker {} is empty", self.speaker_id)));
        }
        let x = Tensor::stack_rows(utts.iter().flat_map(|u| (0..u.x.rows()).map(|r| u.x.row(r))))?;
        let y = Tensor::stack_rows(utts.iter().flat_map(|u| (0..u.y.rows()).map(|r| u.y.row(r))))?;
        Ok((x, y))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let per = self.frames_per_utt * self.d_in;
        let mut w = Writer::with_capacity(32 + self.utterances.len() * (4 + 8 * per));
        w.bytes(&CORPUS_MAGIC)
            .u16(FORMAT_VERSION)
            .u16(0)
            .u64(self.speaker_id)
            .u32(self.d_in as u32)
            .u32(self.frames_per_utt as u32)
            .u32(self.utterances.len() as u32)
            .u32(0);
        for u in &self.utterances {
            w.u32(u.split.tag()).f32s(u.x.data()).f32s(u.y.data());
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Corpus> {
        let mut r = Reader::new(bytes);
        r.magic(CORPUS_MAGIC)?;
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion(version));
        }
        let _flags = r.u16()?;
        let speaker_id = r.u64()?;
        let d_in = r.u32()? as usize;
        let frames_per_utt = r.u32()? as usize;
        let n = r.u32()? as usize;
        let _reserved = r.u32()?;
        let per = frames_per_utt * d_in;
        r.expect_remaining((n * (4 + 8 * per)) as u64)?;
        let mut utterances = Vec::with_capacity(n);
        for _ in 0..n {
            let split = Split::from_tag(r.u32()?)?;
            let x = Tensor::matrix(frames_per_utt, d_in, r.f32s(per)?)?;
            let y = Tensor::matrix(frames_per_utt, d_in, r.f32s(per)?)?;
            utterances.push(Utterance { x, y, split });
        }
        Ok(Corpus {
            speaker_id,
            d_in,
            frames_per_utt,
            utterances,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        Corpus::from_bytes(&fs::read(path)?)
    }
}

/// Population shape: how many speakers of which kinds, and corpus sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub n_speakers: usize,
    pub n_etiologies: usize,
    pub n_typical: usize,
    /// Severity cycle for atypical speakers; speaker `i` gets `severities[i % len]`.
    pub severities: Vec<Severity>,
    pub kappa: f32,
    pub noise_std: f32,
    pub n_utts: usize,
    pub frames_per_utt: usize,
    pub d_in: usize,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            n_speakers: 16,
            n_etiologies: 4,
            n_typical: 4,
            severities: vec![Severity::Mild, Severity::Moderate, Severity::Severe],
            kappa: DEFAULT_KAPPA,
            noise_std: DEFAULT_NOISE_STD,
            n_utts: 300,
            frames_per_utt: 10,
            d_in: 8,
            seed: 0,
        }
    }
}

/// First id used for typical (basemodel training) speakers.
pub const TYPICAL_ID_BASE: u64 = 10_000;

#[derive(Clone, Debug)]
pub struct Population {
    pub config: PopulationConfig,
    pub catalog: EtiologyCatalog,
    pub speakers: Vec<SpeakerProfile>,
    pub corpora: Vec<Corpus>,
    pub typical: Vec<SpeakerProfile>,
    pub typical_corpora: Vec<Corpus>,
}

impl PopulationConfig {
    /// Atypical speaker specs: ids `1..=n_speakers`, etiology `i mod E`.
    pub fn speaker_specs(&self) -> Vec<SpeakerSpec> {
        (0..self.n_speakers)
            .map(|i| SpeakerSpec {
                speaker_id: i as u64 + 1,
                etiology: i % self.n_etiologies,
                severity: self.severities[i % self.severities.len().max(1)],
                kappa: self.kappa,
                noise_std: self.noise_std,
                seed: derive_seed(self.seed, 1_000 + i as u64),
            })
            .collect()
    }

    pub fn typical_specs(&self) -> Vec<SpeakerSpec> {
        (0..self.n_typical)
            .map(|i| SpeakerSpec {
                speaker_id: TYPICAL_ID_BASE + i as u64,
                etiology: 0,
                severity: Severity::Typical,
                kappa: self.kappa,
                noise_std: self.noise_std,
                seed: derive_seed(self.seed, 2_000 + i as u64),
            })
            .collect()
    }

    pub fn corpus_seed(&self, speaker_id: u64) -> u64 {
        derive_seed(self.seed, 1 << 40 | speaker_id)
    }
}

/// Generates catalog, speakers and corpora; corpora are produced in parallel
/// but each depends only on its own seed.
pub fn gen_population(config: &PopulationConfig) -> Result<Population> {
    if config.severities.is_empty() {
        return Err(Error::pre("severity cycle is empty"));
    }
    let catalog = gen_catalog(config.n_etiologies, config.d_in, derive_seed(config.seed, 0))?;
    let speakers = config
        .speaker_specs()
        .into_iter()
        .map(|s| gen_speaker(&catalog, s))
        .collect::<Result<Vec<_>>>()?;
    let typical = config
        .typical_specs()
        .into_iter()
        .map(|s| gen_speaker(&catalog, s))
        .collect::<Result<Vec<_>>>()?;
    let make = |p: &SpeakerProfile| {
        gen_corpus(p, config.n_utts, config.frames_per_utt, config.corpus_seed(p.speaker_id()))
    };
    let corpora = crate::par::map(&speakers, make).into_iter().collect::<Result<Vec<_>>>()?;
    let typical_corpora = crate::par::map(&typical, make).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Population {
        config: config.clone(),
        catalog,
        speakers,
        corpora,
        typical,
        typical_corpora,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: u64,
    pub etiology: usize,
    pub etiology_name: String,
    pub severity: Severity,
    pub epsilon: f32,
    pub kappa: f32,
    pub noise_std: f32,
    pub seed: u64,
    pub typical: bool,
    pub corpus: String,
}

/// Human-readable description of a generated population; enough to
/// regenerate every profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config: PopulationConfig,
    pub catalog_seed: u64,
    pub etiology_names: Vec<String>,
    pub speakers: Vec<SpeakerRecord>,
}

impl Population {
    pub fn manifest(&self) -> DataManifest {
        let rec = |p: &SpeakerProfile, typical: bool| SpeakerRecord {
            speaker_id: p.spec.speaker_id,
            etiology: p.spec.etiology,
            etiology_name: self.catalog.names[p.spec.etiology].clone(),
            severity: p.spec.severity,
            epsilon: p.spec.severity.epsilon(),
            kappa: p.spec.kappa,
            noise_std: p.spec.noise_std,
            seed: p.spec.seed,
            typical,
            corpus: format!("corpus/{}.corp", p.spec.speaker_id),
        };
        DataManifest {
            config: self.config.clone(),
            catalog_seed: self.catalog.seed,
            etiology_names: self.catalog.names.clone(),
            speakers: self
                .speakers
                .iter()
                .map(|p| rec(p, false))
                .chain(self.typical.iter().map(|p| rec(p, true)))
                .collect(),
        }
    }

    /// Writes `speakers.json` and `corpus/<id>.corp` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for c in self.corpora.iter().chain(&self.typical_corpora) {
            c.save(&dir.join("corpus").join(format!("{}.corp", c.speaker_id)))?;
        }
        let json = serde_json::to_vec_pretty(&self.manifest()).map_err(|e| Error::Store(e.to_string()))?;
        write_atomic(&dir.join("speakers.json"), &json)
    }

    /// Reads a population written by [`Population::save`], regenerating the
    /// profiles from the manifest.
    pub fn load(dir: &Path) -> Result<Population> {
        let manifest: DataManifest = serde_json::from_slice(&fs::read(dir.join("speakers.json"))?)
            .map_err(|e| Error::Store(format!("speakers.json: {e}")))?;
        let config = manifest.config.clone();
        let catalog = gen_catalog(config.n_etiologies, config.d_in, manifest.catalog_seed)?;
        let mut pop = Population {
            config,
            catalog,
            speakers: Vec::new(),
            corpora: Vec::new(),
            typical: Vec::new(),
            typical_corpora: Vec::new(),
        };
        for r in &manifest.speakers {
            let spec = SpeakerSpec {
                speaker_id: r.speaker_id,
                etiology: r.etiology,
                severity: r.severity,
                kappa: r.kappa,
                noise_std: r.noise_std,
                seed: r.seed,
            };
            let profile = gen_speaker(&pop.catalog, spec)?;
            let corpus = Corpus::load(&dir.join(&r.corpus))?;
            if r.typical {
                pop.typical.push(profile);
                pop.typical_corpora.push(corpus);
            } else {
                pop.speakers.push(profile);
                pop.corpora.push(corpus);
            }
        }
        Ok(pop)
    }

    pub fn profile(&self, speaker_id: u64) -> Option<&SpeakerProfile> {
        self.speakers
            .iter()
            .chain(&self.typical)
            .find(|p| p.speaker_id() == speaker_id)
    }

    pub fn corpus(&self, speaker_id: u64) -> Option<&Corpus> {
        self.corpora
            .iter()
            .chain(&self.typical_corpora)
            .find(|c| c.speaker_id == speaker_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_is_deterministic_and_sized() {
        let a = gen_catalog(4, 32, 3).unwrap();
        let b = gen_catalog(4, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let expect = (32.0f32).sqrt();
        for m in &a.matrices {
            let n = m.frobenius_norm();
            assert!((n - expect).abs() < 0.2 * expect, "{n} vs {expect}");
        }
        assert!(gen_catalog(1, 8, 0).is_err());
    }

    #[test]
    fn typical_speaker_has_identity_distortion() {
        let cat = gen_catalog(2, 8, 0).unwrap();
        let p = gen_speaker(&cat, SpeakerSpec::new(1, 1, Severity::Typical, 5)).unwrap();
        assert!(p.distortion.bit_eq(&Tensor::identity(8)));
        assert!(gen_speaker(&cat, SpeakerSpec::new(1, 2, Severity::Mild, 5)).is_err());
    }

    #[test]
    fn distortion_scales_linearly_with_severity() {
        let cat = gen_catalog(2, 8, 0).unwrap();
        let mild = gen_speaker(&cat, SpeakerSpec::new(1, 0, Severity::Mild, 5)).unwrap();
        let severe = gen_speaker(&cat, SpeakerSpec::new(1, 0, Severity::Severe, 5)).unwrap();
        let eye = Tensor::identity(8);
        let a = mild.distortion.sub(&eye).unwrap().frobenius_norm();
        let b = severe.distortion.sub(&eye).unwrap().frobenius_norm();
        assert!((a / b - 0.1 / 0.6).abs() < 1e-4);
    }

    #[test]
    fn same_etiology_is_closer_on_average() {
        let cat = gen_catalog(4, 8, 1).unwrap();
        let mut same = 0.0;
        let mut diff = 0.0;
        for i in 0..20u64 {
            let s = gen_speaker(&cat, SpeakerSpec::new(1, 0, Severity::Moderate, 3 * i)).unwrap();
            let t = gen_speaker(&cat, SpeakerSpec::new(2, 0, Severity::Moderate, 3 * i + 1)).unwrap();
            let u = gen_speaker(&cat, SpeakerSpec::new(3, 1, Severity::Moderate, 3 * i + 2)).unwrap();
            same += s.distortion.sub(&t.distortion).unwrap().frobenius_norm();
            diff += s.distortion.sub(&u.distortion).unwrap().frobenius_norm();
        }
        assert!(same < diff, "{same} vs {diff}");
    }

    #[test]
    fn corpus_split_and_determinism() {
        let cat = gen_catalog(2, 8, 0).unwrap();
        let p = gen_speaker(&cat, SpeakerSpec::new(1, 0, Severity::Mild, 5)).unwrap();
        let c = gen_corpus(&p, 300, 10, 9).unwrap();
        assert_eq!(c.count(Split::Train), 240);
        assert_eq!(c.count(Split::Dev), 30);
        assert_eq!(c.count(Split::Test), 30);
        let again = gen_corpus(&p, 300, 10, 9).unwrap();
        assert_eq!(c.to_bytes(), again.to_bytes());
        assert!(gen_corpus(&p, 9, 10, 9).is_err());
    }

    #[test]
    fn noiseless_typical_corpus_is_clean() {
        let cat = gen_catalog(2, 8, 0).unwrap();
        let mut spec = SpeakerSpec::new(1, 0, Severity::Typical, 5);
        spec.noise_std = 0.0;
        let p = gen_speaker(&cat, spec).unwrap();
        let c = gen_corpus(&p, 20, 4, 1).unwrap();
        for u in &c.utterances {
            assert!(u.x.bit_eq(&u.y));
        }
    }

    #[test]
    fn noiseless_distortion_is_linear_and_bounded() {
        let cat = gen_catalog(2, 8, 0).unwrap();
        let mut spec = SpeakerSpec::new(1, 1, Severity::Severe, 5);
        spec.noise_std = 0.0;
        let p = gen_speaker(&cat, spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let x1 = p.distort(&y, &mut rng).unwrap();
        let x2 = p.distort(&y.scale(2.0), &mut rng).unwrap();
        let diff = x2.sub(&x1.scale(2.0)).unwrap();
        assert!(diff.frobenius_norm() < 1e-5);
        // ||A y|| <= (1 + ε ||R + κP||_F) ||y||, Frobenius bounds the operator norm
        let r = cat.matrices[1].clone();
        let mut rp = r.clone();
        for (a, &b) in rp.data_mut().iter_mut().zip(p.idiosyncrasy.data()) {
            *a += spec.kappa * b;
        }
        let bound = (1.0 + 0.6 * rp.frobenius_norm()) * y.frobenius_norm();
        assert!(x1.frobenius_norm() <= bound + 1e-5);
    }

    #[test]
    fn corpus_bytes_round_trip() {
        let cat = gen_catalog(2, 4, 0).unwrap();
        let p = gen_speaker(&cat, SpeakerSpec::new(7, 1, Severity::Moderate, 5)).unwrap();
        let c = gen_corpus(&p, 12, 3, 2).unwrap();
        assert_eq!(Corpus::from_bytes(&c.to_bytes()).unwrap(), c);
        let bytes = c.to_bytes();
        assert_eq!(Corpus::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().code(), "TRUNCATED");
    }

    #[test]
    fn population_save_load() {
        let cfg = PopulationConfig {
            n_speakers: 4,
            n_typical: 1,
            n_utts: 10,
            frames_per_utt: 2,
            ..Default::default()
        };
        let pop = gen_population(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        pop.save(dir.path()).unwrap();
        let back = Population::load(dir.path()).unwrap();
        assert_eq!(back.speakers, pop.speakers);
        assert_eq!(back.corpora, pop.corpora);
        assert_eq!(back.typical_corpora, pop.typical_corpora);
    }
}
