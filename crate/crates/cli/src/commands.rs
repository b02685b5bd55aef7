use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use submodel::cache::CacheConfig;
use submodel::data::{gen_population, Corpus, Population, PopulationConfig, Split};
use submodel::eval::{comparison_report, evaluate, EvalReport, Variant};
use submodel::model::{count_params, serialized_size, Basemodel, BasemodelConfig, Submodel};
use submodel::probe::{
    export_embeddings, probe_separability, records_from_jsonl, records_to_jsonl, shuffle_labels, ProbeConfig,
    ProbeReport,
};
use submodel::serve::{bench_load, serve, Server};
use submodel::store::{
    load_base, load_bundle, load_embedding, load_submodel, save_base, save_bundle, save_embedding, save_submodel,
    split_bundle, SubmodelStore,
};
use submodel::train::{
    adapt_new_speaker, finetune_full_all, train_base, train_embedding, train_onehot, train_pooled, train_submodels,
    TrainLog,
};

use crate::manifest::RunManifest;
use crate::*;

const BASE_FILE: &str = "base.bin";
const BASE_EXT: &str = "base";

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => cmd_train_base(a),
        Command::FinetuneFull(a) => finetune_full(a),
        Command::TrainSubmodel(a) => train_submodel(a),
        Command::TrainOnehot(a) => cmd_train_onehot(a),
        Command::Split(a) => split(a),
        Command::TrainPooled(a) => cmd_train_pooled(a),
        Command::TrainEmbedding(a) => cmd_train_embedding(a),
        Command::AdaptSpeaker(a) => adapt_speaker(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => cmd_serve(a),
        Command::BenchLoad(a) => cmd_bench_load(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Probe(a) => probe(a),
        Command::Params(a) => params(a),
    }
}

fn load_population(dir: &Path) -> Result<Population> {
    Population::load(dir).with_context(|| format!("loading population from {}", dir.display()))
}

fn load_base_at(path: &Path) -> Result<Basemodel> {
    load_base(path).with_context(|| format!("loading basemodel {}", path.display()))
}

/// Disordered-speaker corpora, optionally restricted to `ids`.
fn select(pop: Population, ids: &[u64]) -> Result<Vec<Corpus>> {
    if ids.is_empty() {
        return Ok(pop.corpora);
    }
    let mut by_id: BTreeMap<u64, Corpus> = pop.corpora.into_iter().map(|c| (c.speaker_id, c)).collect();
    ids.iter()
        .map(|id| by_id.remove(id).with_context(|| format!("speaker {id} is not in the population")))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn summarize(what: &str, log: &TrainLog) {
    println!(
        "{what}: {} steps, loss {:.5} -> {:.5}",
        log.losses.len(),
        log.initial(10),
        log.final_(10)
    );
}

/// Files in `dir` with extension `ext`, keyed by the numeric file stem.
fn numbered_files(dir: &Path, ext: &str) -> Result<BTreeMap<u64, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.insert(id, path);
        }
    }
    Ok(out)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut m = RunManifest::new("gen-data", &a)?;
    let cfg = PopulationConfig {
        n_speakers: a.speakers,
        n_etiologies: a.etiologies,
        n_typical: a.typical,
        kappa: a.kappa,
        noise_std: a.noise_std,
        n_utts: a.utts,
        frames_per_utt: a.frames,
        d_in: a.d_in,
        seed: a.seed,
        ..PopulationConfig::default()
    };
    let pop = gen_population(&cfg)?;
    pop.save(&a.out)?;
    println!(
        "{} speakers and {} typical speakers written to {}",
        pop.corpora.len(),
        pop.typical_corpora.len(),
        a.out.display()
    );
    m.output(a.out.join("speakers.json"));
    m.output(a.out.join("corpus"));
    m.append_to(&a.out)
}

fn cmd_train_base(a: TrainBaseArgs) -> Result<()> {
    let mut m = RunManifest::new("train-base", &a)?;
    let pop = load_population(&a.data)?;
    let d_in = pop.config.d_in;
    let cfg = BasemodelConfig {
        d_in,
        d_model: a.d_model,
        d_ff: a.d_ff,
        n_layers: a.layers,
        d_out: d_in,
        seed: a.init_seed,
    };
    let train = a.train.resolve(3000, 3e-3);
    let (base, log) = train_base(&pop.typical_corpora, cfg, &train)?;
    summarize("basemodel", &log);
    let path = a.out.join(BASE_FILE);
    fs::create_dir_all(&a.out)?;
    save_base(&base, &path)?;
    m.input(&a.data);
    m.output(&path);
    m.append_to(&a.out)
}

fn finetune_full(a: PerSpeakerArgs) -> Result<()> {
    let mut m = RunManifest::new("finetune-full", &a)?;
    let base = load_base_at(&a.base)?;
    let corpora = select(load_population(&a.data)?, &a.speakers)?;
    let cfg = a.train.resolve(2000, 1e-4);
    let dir = a.out.join("full");
    fs::create_dir_all(&dir)?;
    for (c, (model, log)) in corpora.iter().zip(finetune_full_all(&base, &corpora, &cfg)?) {
        summarize(&format!("speaker {}", c.speaker_id), &log);
        let path = dir.join(format!("{}.{BASE_EXT}", c.speaker_id));
        save_base(&model, &path)?;
        m.output(path);
    }
    m.input(&a.data);
    m.input(&a.base);
    m.append_to(&a.out)
}

fn train_submodel(a: TrainSubmodelArgs) -> Result<()> {
    let mut m = RunManifest::new("train-submodel", &a)?;
    let c = &a.common;
    let base = load_base_at(&c.base)?;
    let corpora = select(load_population(&c.data)?, &c.speakers)?;
    let cfg = c.train.resolve(2000, 1e-3);
    let trained = submodel::par::with_threads(a.parallel, || train_submodels(&base, &corpora, a.d_b, &cfg))?;
    let store = SubmodelStore::create(c.out.join("submodels"))?;
    for (sub, log) in &trained {
        summarize(&format!("speaker {}", sub.speaker_id()), log);
        m.output(store.save(sub)?);
    }
    m.input(&c.data);
    m.input(&c.base);
    m.append_to(&c.out)
}

fn cmd_train_onehot(a: BundleArgs) -> Result<()> {
    let mut m = RunManifest::new("train-onehot", &a)?;
    let c = &a.common;
    let base = load_base_at(&c.base)?;
    let corpora = select(load_population(&c.data)?, &c.speakers)?;
    let cfg = c.train.resolve(2000 * corpora.len(), 1e-3);
    let (bundle, log) = train_onehot(&base, &corpora, a.d_b, &cfg)?;
    summarize("one-hot bundle", &log);
    fs::create_dir_all(&c.out)?;
    let path = c.out.join("onehot.bndl");
    save_bundle(&bundle, &path)?;
    m.input(&c.data);
    m.input(&c.base);
    m.output(path);
    m.append_to(&c.out)
}

fn split(a: SplitArgs) -> Result<()> {
    let mut m = RunManifest::new("split", &a)?;
    let bundle = load_bundle(&a.bundle).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let store = SubmodelStore::create(a.out.join("submodels"))?;
    let files = split_bundle(&bundle, &store)?;
    println!("{} submodels written to {}", files.len(), store.root().display());
    m.input(&a.bundle);
    m.outputs.extend(files);
    m.append_to(&a.out)
}

fn cmd_train_pooled(a: PooledArgs) -> Result<()> {
    let mut m = RunManifest::new("train-pooled", &a)?;
    let c = &a.common;
    let base = load_base_at(&c.base)?;
    let corpora = select(load_population(&c.data)?, &c.speakers)?;
    let cfg = c.train.resolve(2000 * corpora.len(), 1e-3);
    let (sub, log) = train_pooled(&base, &corpora, a.d_b, &cfg)?;
    summarize("pooled submodel", &log);
    fs::create_dir_all(&c.out)?;
    let path = c.out.join("pooled.subm");
    save_submodel(&sub, &path)?;
    m.input(&c.data);
    m.input(&c.base);
    m.output(path);
    m.append_to(&c.out)
}

fn cmd_train_embedding(a: EmbeddingArgs) -> Result<()> {
    let mut m = RunManifest::new("train-embedding", &a)?;
    let c = &a.common;
    let base = load_base_at(&c.base)?;
    let corpora = select(load_population(&c.data)?, &c.speakers)?;
    let cfg = c.train.resolve(2000 * corpora.len(), 1e-3);
    let (eb, log) = train_embedding(&base, &corpora, a.banks, a.d_b, &cfg)?;
    summarize("embedding bundle", &log);
    fs::create_dir_all(&c.out)?;
    let path = c.out.join("embedding.embm");
    save_embedding(&eb, &path)?;
    m.input(&c.data);
    m.input(&c.base);
    m.output(path);
    m.append_to(&c.out)
}

fn adapt_speaker(a: AdaptArgs) -> Result<()> {
    let mut m = RunManifest::new("adapt-speaker", &a)?;
    let base = load_base_at(&a.base)?;
    let eb = load_embedding(&a.embedding).with_context(|| format!("loading {}", a.embedding.display()))?;
    let mut corpus = Corpus::load(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    if let Some(n) = a.train_utts {
        let mut kept = 0;
        corpus.utterances.retain(|u| {
            if u.split != Split::Train {
                return true;
            }
            kept += 1;
            kept <= n
        });
    }
    let cfg = a.train.resolve(1000, 1e-3);
    let (adapted, log) = adapt_new_speaker(&base, &eb, &corpus, &cfg, a.mode.into())?;
    summarize(&format!("speaker {}", corpus.speaker_id), &log);
    let dir = a.out.join("adapted");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.embm", corpus.speaker_id));
    save_embedding(&adapted, &path)?;
    m.input(&a.corpus);
    m.input(&a.base);
    m.input(&a.embedding);
    m.output(path);
    m.append_to(&a.out)
}

/// An evaluation report labelled with its approach.
#[derive(Serialize, Deserialize)]
struct NamedReport {
    approach: String,
    report: EvalReport,
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut m = RunManifest::new("eval", &a)?;
    let base = load_base_at(&a.base)?;
    let corpora = match &a.data {
        Some(dir) => load_population(dir)?.corpora,
        None => a
            .corpus
            .iter()
            .map(|p| Corpus::load(p).with_context(|| format!("loading corpus {}", p.display())))
            .collect::<Result<_>>()?,
    };
    let model = || a.model.as_deref().context("--model is required for this variant");
    let split: Split = a.split.into();
    let report = match a.variant {
        VariantArg::Base => evaluate(&base, Variant::Base, &corpora, split)?,
        VariantArg::Submodels => {
            let store = SubmodelStore::open(model()?)?;
            let mut subs = BTreeMap::new();
            for id in store.speaker_ids()? {
                subs.insert(id, store.load(id, Some(&base.config))?);
            }
            evaluate(&base, Variant::Submodels(&subs), &corpora, split)?
        }
        VariantArg::Pooled => {
            let sub: Submodel = load_submodel(model()?, Some(&base.config))?;
            evaluate(&base, Variant::Pooled(&sub), &corpora, split)?
        }
        VariantArg::Onehot => evaluate(&base, Variant::OneHot(&load_bundle(model()?)?), &corpora, split)?,
        VariantArg::Embedding => evaluate(&base, Variant::Embedding(&load_embedding(model()?)?), &corpora, split)?,
        VariantArg::Adapted => {
            let mut ebs = BTreeMap::new();
            for (id, p) in numbered_files(model()?, "embm")? {
                ebs.insert(id, load_embedding(&p)?);
            }
            evaluate(&base, Variant::Embeddings(&ebs), &corpora, split)?
        }
        VariantArg::Full => {
            let mut models = BTreeMap::new();
            for (id, p) in numbered_files(model()?, BASE_EXT)? {
                models.insert(id, load_base(&p)?);
            }
            evaluate(&base, Variant::Full(&models), &corpora, split)?
        }
    };
    let approach = a.name.clone().unwrap_or_else(|| {
        serde_json::to_value(a.variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    });
    println!(
        "{approach}: mean MSE {:.6}, median {:.6}, stdev {:.6}, FER {:.4} over {} speakers",
        report.mse.mean,
        report.mse.median,
        report.mse.stdev,
        report.mean_fer,
        report.speakers.len()
    );
    let path = a.out.join("eval").join(format!("{approach}.json"));
    write_json(&path, &NamedReport { approach, report })?;
    m.input(&a.base);
    m.inputs.extend(a.model.clone());
    m.output(path);
    m.append_to(&a.out)
}

fn report(a: ReportArgs) -> Result<()> {
    let mut m = RunManifest::new("report", &a)?;
    let mut rows = Vec::new();
    for p in &a.reports {
        let text = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let r: NamedReport = serde_json::from_slice(&text).with_context(|| format!("parsing {}", p.display()))?;
        rows.push((r.approach, r.report));
        m.input(p);
    }
    let table = comparison_report(&rows)?;
    let tsv = table.to_tsv();
    print!("{tsv}");
    fs::create_dir_all(&a.out)?;
    let (t, j) = (a.out.join("report.tsv"), a.out.join("report.jsonl"));
    fs::write(&t, tsv)?;
    fs::write(&j, table.to_jsonl())?;
    m.output(t);
    m.output(j);
    m.append_to(&a.out)
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let mut m = RunManifest::new("serve", &a)?;
    let server = Server::from_paths(&a.base, &a.store, CacheConfig { capacity: a.capacity })?;
    let handle = serve(Arc::new(server), a.addr.as_str())?;
    println!("listening on {}", handle.local_addr());
    let server = handle.server().clone();
    handle.join();
    let path = a.out.join("serve_stats.json");
    write_json(&path, &server.stats())?;
    m.input(&a.base);
    m.input(&a.store);
    m.output(path);
    m.append_to(&a.out)
}

fn cmd_bench_load(a: BenchLoadArgs) -> Result<()> {
    let mut m = RunManifest::new("bench-load", &a)?;
    let store = SubmodelStore::open(&a.store)?;
    let r = bench_load(&store, &a.base, a.k)?;
    println!(
        "submodel cold {:.1}±{:.1} us, warm {:.1} us, basemodel reload {:.1}±{:.1} us",
        r.submodel_cold.mean_micros,
        r.submodel_cold.std_micros,
        r.submodel_warm.mean_micros,
        r.base_reload.mean_micros,
        r.base_reload.std_micros
    );
    println!(
        "reload/cold ratio {:.1}x, size ratio {:.1}x ({} vs {} bytes)",
        r.ratio,
        r.size_ratio(),
        r.base_bytes,
        r.submodel_bytes
    );
    let path = a.out.join("bench_load.json");
    write_json(&path, &r)?;
    m.input(&a.base);
    m.input(&a.store);
    m.output(path);
    m.append_to(&a.out)
}

fn export(a: ExportArgs) -> Result<()> {
    let mut m = RunManifest::new("export-embeddings", &a)?;
    let eb = load_embedding(&a.embedding).with_context(|| format!("loading {}", a.embedding.display()))?;
    let pop = load_population(&a.data)?;
    let specs: Vec<_> = pop.speakers.iter().map(|s| s.spec).collect();
    let records = export_embeddings(&eb, &specs)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("embeddings.jsonl");
    fs::write(&path, records_to_jsonl(&records))?;
    println!(
        "{} vectors of length {} written to {}",
        records.len(),
        records.first().map_or(0, |r| r.vector.len()),
        path.display()
    );
    m.input(&a.embedding);
    m.input(&a.data);
    m.output(path);
    m.append_to(&a.out)
}

#[derive(Serialize)]
struct ProbeOutput {
    probe: ProbeReport,
    shuffled_accuracies: Vec<f64>,
    shuffled_mean: f64,
}

fn probe(a: ProbeArgs) -> Result<()> {
    let mut m = RunManifest::new("probe", &a)?;
    let text = fs::read_to_string(&a.embeddings).with_context(|| format!("reading {}", a.embeddings.display()))?;
    let records = records_from_jsonl(&text)?;
    let cfg = ProbeConfig { steps: a.steps, lr: a.lr };
    let probe = probe_separability(&records, &cfg)?;
    for p in &probe.pairs {
        println!(
            "etiology {} vs {}: {:.3} over {} speakers",
            p.etiology_a, p.etiology_b, p.accuracy, p.speakers
        );
    }
    let shuffled_accuracies = (0..a.shuffles)
        .map(|s| probe_separability(&shuffle_labels(&records, s), &cfg).map(|r| r.mean_accuracy))
        .collect::<submodel::Result<Vec<_>>>()?;
    let shuffled_mean = if shuffled_accuracies.is_empty() {
        f64::NAN
    } else {
        shuffled_accuracies.iter().sum::<f64>() / shuffled_accuracies.len() as f64
    };
    println!("mean pairwise accuracy {:.3}, shuffled labels {shuffled_mean:.3}", probe.mean_accuracy);
    let path = a.out.join("probe.json");
    write_json(&path, &ProbeOutput { probe, shuffled_accuracies, shuffled_mean })?;
    m.input(&a.embeddings);
    m.output(path);
    m.append_to(&a.out)
}

/// Groups digits in threes: 1141329 -> "1,141,329".
fn thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn params(a: ParamsArgs) -> Result<()> {
    let m = RunManifest::new("params", &a)?;
    let count = count_params(a.d_model, a.d_b, a.layers)?;
    let bytes = serialized_size(count);
    println!("parameters: {}", thousands(count));
    println!("on disk:    {} bytes ({:.2} MB)", thousands(bytes), bytes as f64 / 1e6);
    match &a.out {
        Some(out) => m.append_to(out),
        None => Ok(()),
    }
}
