//! Training regimes: basemodel, full fine-tuning, per-speaker submodels,
//! the one-hot bundle, the pooled submodel, the real-embedding mixture and
//! new-speaker adaptation.
//!
//! Every job is single-threaded and fully determined by its config seed.
//! Independent per-speaker jobs fan out through [`crate::par`].

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, NodeId, Record};
use crate::binio::derive_seed;
use crate::data::{Corpus, Split, Utterance};
use crate::error::{Error, Result};
use crate::model::graph::{self, LayerAdapter};
use crate::model::{Basemodel, BasemodelConfig, EmbeddingBundle, OneHotBundle, Submodel, EMBEDDING_INIT_STD};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::par;
use crate::tensor::Tensor;

/// Minimum number of training frames accepted for new-speaker adaptation.
pub const MIN_ADAPT_FRAMES: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Utterances per batch.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    /// Start adapters with a zero up-projection instead of random weights.
    #[serde(default)]
    pub zero_up_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 2_000,
            lr: 1e-3,
            seed: 0,
            zero_up_init: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::pre("batch_size must be >= 1"));
        }
        if self.steps == 0 {
            return Err(Error::pre("steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::pre(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Same config with an independent seed for the job keyed by `stream`.
    pub fn for_job(&self, stream: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, stream),
            ..*self
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f32>,
}

impl TrainLog {
    fn window_mean(v: &[f32]) -> f32 {
        v.iter().sum::<f32>() / v.len().max(1) as f32
    }

    /// Mean loss over the first `k` steps.
    pub fn initial(&self, k: usize) -> f32 {
        Self::window_mean(&self.losses[..k.min(self.losses.len())])
    }

    /// Mean loss over the last `k` steps.
    pub fn final_(&self, k: usize) -> f32 {
        let n = self.losses.len();
        Self::window_mean(&self.losses[n - k.min(n)..])
    }

    /// Relative drop from the first-step loss to the mean of the last 10.
    pub fn reduction(&self) -> f32 {
        let first = self.losses.first().copied().unwrap_or(0.0);
        if first == 0.0 {
            return 0.0;
        }
        1.0 - self.final_(10) / first
    }
}

/// Which parameters move during new-speaker adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Only the new embedding row; banks stay frozen.
    EmbOnly,
    /// The new row and the pre-trained banks.
    EmbAndBanks,
}

fn train_utterances(corpus: &Corpus) -> Result<Vec<&Utterance>> {
    let v: Vec<&Utterance> = corpus.utterances_in(Split::Train).collect();
    if v.is_empty() {
        return Err(Error::pre(format!("speaker {} has no training utterances", corpus.speaker_id)));
    }
    Ok(v)
}

fn stack<'u>(utts: impl Iterator<Item = &'u Utterance> + Clone) -> Result<(Tensor, Tensor)> {
    let x = Tensor::stack_rows(utts.clone().flat_map(|u| (0..u.x.rows()).map(move |r| u.x.row(r))))?;
    let y = Tensor::stack_rows(utts.flat_map(|u| (0..u.y.rows()).map(move |r| u.y.row(r))))?;
    Ok((x, y))
}

/// Runs `cfg.steps` Adam steps. `step` computes the loss and gradients for
/// one batch against the current state; `params` exposes the trainable set.
fn optimize<M, S, P>(model: &mut M, cfg: &TrainConfig, mut step: S, params: P) -> Result<TrainLog>
where
    S: FnMut(&M, &mut ChaCha8Rng) -> Result<(f32, GradMap)>,
    P: for<'m> Fn(&'m mut M) -> Vec<(String, &'m mut Tensor)>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xba7c));
    let mut state = AdamState::new();
    let hyper = cfg.adam();
    let mut log = TrainLog {
        losses: Vec::with_capacity(cfg.steps),
    };
    for i in 0..cfg.steps {
        let (loss, grads) = step(model, &mut rng)?;
        if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step: i, loss });
        }
        adam_step(params(model), &grads, &mut state, &hyper)?;
        log.losses.push(loss);
    }
    Ok(log)
}

fn mse_step(rec: &mut Record<'_>, base: &graph::BaseNodes, adapters: &[LayerAdapter], x: Tensor, y: Tensor) -> Result<NodeId> {
    let xn = rec.input(x);
    let out = graph::forward(rec, base, adapters, xn)?;
    let yn = rec.input(y);
    rec.mse(out, yn)
}

fn single_adapters<'a>(rec: &mut Record<'a>, prefix: &str, sub: &'a Submodel, trainable: bool) -> Vec<LayerAdapter> {
    sub.layers
        .iter()
        .enumerate()
        .map(|(l, a)| LayerAdapter::Single {
            body: graph::register_body(rec, &format!("{prefix}.l{l}"), &a.body, trainable),
            alpha: a.alpha,
        })
        .collect()
}

/// MSE of the basemodel on `(x, y)` and its gradients for every
/// basemodel parameter, keyed `base.*`.
pub fn base_batch_grads(base: &Basemodel, x: Tensor, y: Tensor) -> Result<(f32, GradMap)> {
    let mut rec = Record::new();
    let bn = graph::register_base(&mut rec, base, true);
    let loss = mse_step(&mut rec, &bn, &[], x, y)?;
    let g = rec.backward(loss)?;
    Ok((rec.value(loss).data()[0], g))
}

/// MSE of `sub` over the frozen basemodel and its gradients, keyed `sub.l{l}.*`.
pub fn submodel_batch_grads(base: &Basemodel, sub: &Submodel, x: Tensor, y: Tensor) -> Result<(f32, GradMap)> {
    let mut rec = Record::new();
    let bn = graph::register_base(&mut rec, base, false);
    let adapters = single_adapters(&mut rec, "sub", sub, true);
    let loss = mse_step(&mut rec, &bn, &adapters, x, y)?;
    let g = rec.backward(loss)?;
    Ok((rec.value(loss).data()[0], g))
}

fn train_all_params(mut model: Basemodel, corpora: &[&Corpus], cfg: &TrainConfig) -> Result<(Basemodel, TrainLog)> {
    let pool: Vec<&Utterance> = corpora
        .iter()
        .map(|c| train_utterances(c))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let batch = cfg.batch_size;
    let log = optimize(
        &mut model,
        cfg,
        |m: &Basemodel, rng| {
            let picked: Vec<&Utterance> = (0..batch).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let (x, y) = stack(picked.iter().copied())?;
            base_batch_grads(m, x, y)
        },
        |m| m.named_params_mut(),
    )?;
    Ok((model, log))
}

/// Trains a fresh basemodel on typical speech.
pub fn train_base(corpora: &[Corpus], base_cfg: BasemodelConfig, cfg: &TrainConfig) -> Result<(Basemodel, TrainLog)> {
    if corpora.is_empty() {
        return Err(Error::pre("train_base needs at least one corpus"));
    }
    cfg.validate()?;
    let model = Basemodel::init(base_cfg)?;
    let refs: Vec<&Corpus> = corpora.iter().collect();
    train_all_params(model, &refs, cfg)
}

/// Fine-tunes every parameter of a copy of `base`; `base` itself is untouched.
pub fn finetune_full(base: &Basemodel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Basemodel, TrainLog)> {
    train_all_params(base.clone(), &[corpus], cfg)
}

/// Continues training `init` on one speaker with the basemodel frozen.
pub fn adapt_submodel(base: &Basemodel, init: Submodel, corpus: &Corpus, cfg: &TrainConfig) -> Result<(Submodel, TrainLog)> {
    init.check_against(&base.config)?;
    let utts = train_utterances(corpus)?;
    let mut sub = init.with_alpha(1.0);
    let batch = cfg.batch_size;
    let log = optimize(
        &mut sub,
        cfg,
        |s: &Submodel, rng| {
            let picked: Vec<&Utterance> = (0..batch).map(|_| utts[rng.gen_range(0..utts.len())]).collect();
            let (x, y) = stack(picked.iter().copied())?;
            submodel_batch_grads(base, s, x, y)
        },
        |s| s.named_params_mut("sub"),
    )?;
    Ok((sub, log))
}

/// Trains a fresh per-speaker submodel with the basemodel frozen.
pub fn train_submodel(base: &Basemodel, corpus: &Corpus, d_b: usize, cfg: &TrainConfig) -> Result<(Submodel, TrainLog)> {
    if d_b == 0 {
        return Err(Error::pre("d_b must be >= 1"));
    }
    cfg.validate()?;
    let init = Submodel::init_with(
        corpus.speaker_id,
        base.config.d_model,
        d_b,
        base.config.n_layers,
        derive_seed(cfg.seed, 0x5eed),
        cfg.zero_up_init,
    )?;
    adapt_submodel(base, init, corpus, cfg)
}

/// Independent submodel jobs, one per corpus, run in parallel. Each job's
/// seed depends only on `cfg.seed` and its speaker id.
pub fn train_submodels(base: &Basemodel, corpora: &[Corpus], d_b: usize, cfg: &TrainConfig) -> Result<Vec<(Submodel, TrainLog)>> {
    par::map(corpora, |c| train_submodel(base, c, d_b, &cfg.for_job(c.speaker_id)))
        .into_iter()
        .collect()
}

/// Full fine-tuning for each corpus, run in parallel.
pub fn finetune_full_all(base: &Basemodel, corpora: &[Corpus], cfg: &TrainConfig) -> Result<Vec<(Basemodel, TrainLog)>> {
    par::map(corpora, |c| finetune_full(base, c, &cfg.for_job(c.speaker_id)))
        .into_iter()
        .collect()
}

/// Pooled (speaker, utterance) training pairs.
fn pooled_pairs(corpora: &[Corpus]) -> Result<Vec<(usize, &Utterance)>> {
    let mut out = Vec::new();
    for (i, c) in corpora.iter().enumerate() {
        out.extend(train_utterances(c)?.into_iter().map(|u| (i, u)));
    }
    Ok(out)
}

fn check_unique(corpora: &[Corpus]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for c in corpora {
        if !seen.insert(c.speaker_id) {
            return Err(Error::pre(format!("duplicate speaker id {}", c.speaker_id)));
        }
    }
    Ok(())
}

/// One optimizer step's loss and gradients for a one-hot batch. Samples are
/// grouped by speaker; each group runs through its own member, and the
/// group losses are weighted by group size so the total is the batch mean.
pub fn onehot_batch_grads(base: &Basemodel, members: &[Submodel], batch: &[(usize, &Utterance)]) -> Result<(f32, GradMap)> {
    let mut groups: BTreeMap<usize, Vec<&Utterance>> = BTreeMap::new();
    for &(i, u) in batch {
        groups.entry(i).or_default().push(u);
    }
    let mut rec = Record::new();
    let bn = graph::register_base(&mut rec, base, false);
    let mut terms = Vec::with_capacity(groups.len());
    for (i, utts) in &groups {
        let adapters = single_adapters(&mut rec, &format!("member{i}"), &members[*i], true);
        let (x, y) = stack(utts.iter().copied())?;
        let l = mse_step(&mut rec, &bn, &adapters, x, y)?;
        terms.push((l, utts.len() as f32 / batch.len() as f32));
    }
    let loss = rec.lin_comb(&terms)?;
    let g = rec.backward(loss)?;
    Ok((rec.value(loss).data()[0], g))
}

/// N per-speaker submodels trained in one job. Batches draw (speaker,
/// utterance) pairs uniformly from the pooled training sets; each sample
/// only updates its own speaker's member.
pub fn train_onehot(base: &Basemodel, corpora: &[Corpus], d_b: usize, cfg: &TrainConfig) -> Result<(OneHotBundle, TrainLog)> {
    if corpora.len() < 2 {
        return Err(Error::pre(format!("one-hot training needs N >= 2 speakers, got {}", corpora.len())));
    }
    if d_b == 0 {
        return Err(Error::pre("d_b must be >= 1"));
    }
    check_unique(corpora)?;
    cfg.validate()?;
    let pairs = pooled_pairs(corpora)?;
    let mut members = corpora
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Submodel::init_with(
                c.speaker_id,
                base.config.d_model,
                d_b,
                base.config.n_layers,
                derive_seed(cfg.seed, 0x1000 + i as u64),
                cfg.zero_up_init,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = cfg.batch_size;
    let log = optimize(
        &mut members,
        cfg,
        |ms: &Vec<Submodel>, rng| {
            let picked: Vec<(usize, &Utterance)> =
                (0..batch).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
            onehot_batch_grads(base, ms, &picked)
        },
        |ms| {
            ms.iter_mut()
                .enumerate()
                .flat_map(|(i, s)| s.named_params_mut(&format!("member{i}")))
                .collect()
        },
    )?;
    Ok((OneHotBundle::new(members)?, log))
}

/// One shared submodel trained on all speakers' data, ignoring identity.
/// Its speaker id is [`POOLED_SPEAKER_ID`].
pub fn train_pooled(base: &Basemodel, corpora: &[Corpus], d_b_pooled: usize, cfg: &TrainConfig) -> Result<(Submodel, TrainLog)> {
    if corpora.len() < 2 {
        return Err(Error::pre(format!("pooled training needs N >= 2 speakers, got {}", corpora.len())));
    }
    if d_b_pooled == 0 {
        return Err(Error::pre("d_b must be >= 1"));
    }
    cfg.validate()?;
    let pairs = pooled_pairs(corpora)?;
    let mut sub = Submodel::init_with(
        POOLED_SPEAKER_ID,
        base.config.d_model,
        d_b_pooled,
        base.config.n_layers,
        derive_seed(cfg.seed, 0x9001),
        cfg.zero_up_init,
    )?;
    let batch = cfg.batch_size;
    let log = optimize(
        &mut sub,
        cfg,
        |s: &Submodel, rng| {
            let picked: Vec<&Utterance> = (0..batch).map(|_| pairs[rng.gen_range(0..pairs.len())].1).collect();
            let (x, y) = stack(picked.iter().copied())?;
            submodel_batch_grads(base, s, x, y)
        },
        |s| s.named_params_mut("sub"),
    )?;
    Ok((sub, log))
}

/// Speaker id carried by the pooled submodel.
pub const POOLED_SPEAKER_ID: u64 = 0;

/// Loss and gradients of the embedding mixture on a batch; `rows[b]` is the
/// embedding row of sample `b`.
pub fn embedding_batch_grads(
    base: &Basemodel,
    eb: &EmbeddingBundle,
    batch: &[(usize, &Utterance)],
    train_banks: bool,
) -> Result<(f32, GradMap)> {
    let (x, y) = stack(batch.iter().map(|(_, u)| *u))?;
    let rows: Vec<usize> = batch
        .iter()
        .flat_map(|(i, u)| std::iter::repeat_n(*i, u.x.rows()))
        .collect();
    let mut rec = Record::new();
    let bn = graph::register_base(&mut rec, base, false);
    let table = rec.param("embedding", &eb.embedding, true);
    let m = eb.n_banks;
    let mut adapters = Vec::with_capacity(eb.n_layers);
    for (l, layer) in eb.banks.iter().enumerate() {
        let banks = layer
            .iter()
            .enumerate()
            .map(|(k, b)| graph::register_body(&mut rec, &format!("bank{k}.l{l}"), b, train_banks))
            .collect();
        let weights = rec.gather(table, rows.clone(), l * m, m)?;
        adapters.push(LayerAdapter::Mixture {
            banks,
            weights,
            alpha: eb.alpha,
        });
    }
    let loss = mse_step(&mut rec, &bn, &adapters, x, y)?;
    let g = rec.backward(loss)?;
    Ok((rec.value(loss).data()[0], g))
}

fn optimize_embedding(base: &Basemodel, eb: &mut EmbeddingBundle, pairs: &[(usize, &Utterance)], cfg: &TrainConfig, train_banks: bool) -> Result<TrainLog> {
    let batch = cfg.batch_size;
    optimize(
        eb,
        cfg,
        |eb: &EmbeddingBundle, rng| {
            let picked: Vec<(usize, &Utterance)> =
                (0..batch).map(|_| pairs[rng.gen_range(0..pairs.len())]).collect();
            embedding_batch_grads(base, eb, &picked, train_banks)
        },
        |eb| {
            let mut p = vec![("embedding".to_string(), &mut eb.embedding)];
            p.extend(eb.banks.iter_mut().enumerate().flat_map(|(l, layer)| {
                layer
                    .iter_mut()
                    .enumerate()
                    .flat_map(move |(k, b)| b.named_params_mut(&format!("bank{k}.l{l}")))
            }));
            p
        },
    )
}

/// `M` shared banks per layer and an `N × (L·M)` embedding, trained jointly.
pub fn train_embedding(base: &Basemodel, corpora: &[Corpus], n_banks: usize, d_b: usize, cfg: &TrainConfig) -> Result<(EmbeddingBundle, TrainLog)> {
    if corpora.len() < 2 {
        return Err(Error::pre(format!("embedding training needs N >= 2 speakers, got {}", corpora.len())));
    }
    check_unique(corpora)?;
    cfg.validate()?;
    let mut eb = EmbeddingBundle::init(
        &base.config,
        corpora.iter().map(|c| c.speaker_id).collect(),
        n_banks,
        d_b,
        derive_seed(cfg.seed, 0xe4b),
    )?;
    let pairs = pooled_pairs(corpora)?;
    let log = optimize_embedding(base, &mut eb, &pairs, cfg, true)?;
    Ok((eb, log))
}

/// A fresh `L × M` embedding row, entries `N(0, 0.1)`.
pub fn init_embedding_row(n_layers: usize, n_banks: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n_layers, n_banks], EMBEDDING_INIT_STD, &mut rng)
}

/// Adapts a trained embedding bundle to one new speaker: the trained
/// embedding matrix is dropped and replaced by a single fresh row, then the
/// row (and, in [`AdaptMode::EmbAndBanks`], the banks) are trained on the
/// new speaker's data. Returns a one-speaker bundle.
pub fn adapt_new_speaker(base: &Basemodel, eb: &EmbeddingBundle, corpus: &Corpus, cfg: &TrainConfig, mode: AdaptMode) -> Result<(EmbeddingBundle, TrainLog)> {
    eb.check_against(&base.config)?;
    cfg.validate()?;
    let utts = train_utterances(corpus)?;
    let frames: usize = utts.iter().map(|u| u.x.rows()).sum();
    if frames < MIN_ADAPT_FRAMES {
        return Err(Error::pre(format!(
            "adaptation needs at least {MIN_ADAPT_FRAMES} training frames, got {frames}"
        )));
    }
    let row = init_embedding_row(eb.n_layers, eb.n_banks, derive_seed(cfg.seed, 0xada7));
    let mut adapted = EmbeddingBundle {
        speakers: vec![corpus.speaker_id],
        embedding: row.reshape(vec![1, eb.n_layers * eb.n_banks])?,
        ..eb.clone()
    };
    let pairs: Vec<(usize, &Utterance)> = utts.into_iter().map(|u| (0, u)).collect();
    let log = optimize_embedding(base, &mut adapted, &pairs, cfg, mode == AdaptMode::EmbAndBanks)?;
    Ok((adapted, log))
}
