//! `mmpoi`: prepare corpora, train the encoder, evaluate and recommend.

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmpoi::domain::{AttributeKey, Corpus, PoiMeta};
use mmpoi::eval::{evaluate, group_split, run_ablation};
use mmpoi::ingest::{CategoryAllowlist, FixtureBackend, GeocoderBackend, GeocoderClient};
use mmpoi::model::{Encoder, ModelConfig, ModelParams};
use mmpoi::pipeline::{prepare, read_corpus, write_corpus, DescriptionSources};
use mmpoi::rank::{build_index, rank, ItemIndex, RankOptions};
use mmpoi::synth::{generate, SignalMode};
use mmpoi::textrep::vocab_from_metas;
use mmpoi::train::{finetune_two_stage, pretrain};
use serde::Serialize;

use config::RunConfig;
use manifest::{digest_inputs, RunManifest};

const INDEX_FILE: &str = "index.bin";

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "mmpoi", version, about = "Text-based sequential POI recommendation")]
struct Cli {
    /// TOML file overriding the built-in configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomised stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct DescFlags {
    /// Keep venue descriptions (default).
    #[arg(long, conflicts_with = "without_desc")]
    with_desc: bool,
    /// Strip venue descriptions before training or scoring.
    #[arg(long)]
    without_desc: bool,
}

impl DescFlags {
    fn apply(&self, corpus: Corpus) -> Corpus {
        if self.without_desc {
            corpus.without_attribute(AttributeKey::VenueDesc)
        } else {
            corpus
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    DescOnly,
    Category,
    Geo,
}

impl From<ModeArg> for SignalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::DescOnly => SignalMode::DescOnly,
            ModeArg::Category => SignalMode::Category,
            ModeArg::Geo => SignalMode::Geo,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a corpus from raw check-in, postal, geocoder and caption files.
    Prepare {
        #[arg(long)]
        checkins: PathBuf,
        /// Postal code table (Japan Post layout by default).
        #[arg(long)]
        postal: PathBuf,
        /// JSON Lines of offline geocoder records.
        #[arg(long, required_unless_present = "geocoder_http")]
        geocoder_fixtures: Option<PathBuf>,
        /// Query a live geocoder configured by GEOCODER_BASE_URL and GEOCODER_API_KEY.
        #[arg(long)]
        geocoder_http: bool,
        /// Address cache to load before and save after geocoding.
        #[arg(long)]
        geocoder_cache: Option<PathBuf>,
        /// Category allowlist, one name per line (default: bundled food list).
        #[arg(long)]
        allowlist: Option<PathBuf>,
        /// JSON Lines of {venue_id, description}.
        #[arg(long)]
        descriptions: Option<PathBuf>,
        /// JSON Lines of {venue_id, image_ids}.
        #[arg(long)]
        venue_images: Option<PathBuf>,
        /// JSON Lines of {image_id, caption}.
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Rows of image_id,class.
        #[arg(long, requires = "class_mapping")]
        class_images: Option<PathBuf>,
        /// Rows of venue_category,image_class.
        #[arg(long)]
        class_mapping: Option<PathBuf>,
        #[arg(long)]
        min_checkins: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted-signal corpus in the raw input formats.
    Synth {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-token plus contrastive pretraining on the training users.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        desc: DescFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage finetuning against the full item index.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[command(flatten)]
        desc: DescFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every venue into an index file.
    Encode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[command(flatten)]
        desc: DescFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-last-out metrics on the held-out users.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Precomputed index (default: re-encode the corpus).
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        desc: DescFlags,
        #[arg(long)]
        exclude_seen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate with and without descriptions.
    Ablate {
        #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
        corpus: Option<PathBuf>,
        /// Generate a synthetic corpus with this signal mode instead.
        #[arg(long, value_enum)]
        synth: Option<ModeArg>,
        /// Remove descriptions from both arms (the two rows must match).
        #[arg(long)]
        no_desc_both: bool,
        #[arg(long)]
        exclude_seen: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k venues for a visit history.
    Recommend {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// Venue ids in visit order, one per line.
        #[arg(long)]
        history: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long)]
        exclude_seen: bool,
        #[command(flatten)]
        desc: DescFlags,
        /// Also write recommendations.tsv and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that the files in an output directory match its manifest.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

fn need(flag: &str, path: &Path) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{flag}: {} does not exist", path.display())).into())
    }
}

fn need_opt(flag: &str, path: &Option<PathBuf>) -> anyhow::Result<()> {
    path.as_deref().map_or(Ok(()), |p| need(flag, p))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    need("--corpus", path)?;
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_encoder(path: &Path) -> anyhow::Result<Encoder> {
    need("--encoder", path)?;
    Encoder::load(path).with_context(|| format!("loading encoder {}", path.display()))
}

/// Only the training users, chosen by the seeded split.
fn train_part(corpus: &Corpus, cfg: &RunConfig) -> anyhow::Result<Corpus> {
    let (train, _) = group_split(&corpus.sequences, &cfg.experiment.split)?;
    Ok(Corpus {
        pois: corpus.pois.clone(),
        sequences: train,
    })
}

fn cmd_prepare(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let Command::Prepare {
        checkins,
        postal,
        geocoder_fixtures,
        geocoder_http,
        geocoder_cache,
        allowlist,
        descriptions,
        venue_images,
        captions,
        class_images,
        class_mapping,
        min_checkins,
        out,
    } = &cli.command
    else {
        unreachable!()
    };
    need("--checkins", checkins)?;
    need("--postal", postal)?;
    need_opt("--geocoder-fixtures", geocoder_fixtures)?;
    need_opt("--allowlist", allowlist)?;
    need_opt("--descriptions", descriptions)?;
    need_opt("--venue-images", venue_images)?;
    need_opt("--captions", captions)?;
    need_opt("--class-images", class_images)?;
    need_opt("--class-mapping", class_mapping)?;
    let mut pcfg = cfg.prepare.clone();
    if let Some(m) = min_checkins {
        pcfg.min_checkins = *m;
    }

    let allow = match allowlist {
        Some(p) => CategoryAllowlist::parse(BufReader::new(File::open(p)?))?,
        None => CategoryAllowlist::foursquare_food(),
    };
    let backend: Box<dyn GeocoderBackend> = match (geocoder_fixtures, geocoder_http) {
        (Some(p), _) => Box::new(
            FixtureBackend::parse(BufReader::new(File::open(p)?))
                .with_context(|| format!("reading {}", p.display()))?,
        ),
        (None, true) => http_backend()?,
        (None, false) => unreachable!("clap requires one geocoder"),
    };
    let client = GeocoderClient::new(backend);
    if let Some(cache) = geocoder_cache.as_deref().filter(|p| p.exists()) {
        let n = client.load_cache(BufReader::new(File::open(cache)?))?;
        log::info!("loaded {n} cached addresses");
    }
    let sources = DescriptionSources {
        published: descriptions.clone(),
        venue_images: venue_images.clone(),
        class_images: class_images.clone(),
        class_mapping: class_mapping.clone(),
        captions: captions.clone(),
    };
    let mut inputs: Vec<&Path> = vec![checkins, postal];
    inputs.extend(
        [geocoder_fixtures, allowlist, descriptions, venue_images, captions, class_images, class_mapping]
            .into_iter()
            .filter_map(|p| p.as_deref()),
    );
    let manifest = RunManifest::new("prepare", cfg.prepare.seed, serde_json::to_value(&pcfg)?, digest_inputs(&inputs)?);

    let prepared = prepare(checkins, postal, &allow, &client, &sources, &pcfg).context("stage prepare")?;
    if let Some(cache) = geocoder_cache {
        client.save_cache(BufWriter::new(File::create(cache)?))?;
    }
    create_dir(out)?;
    write_corpus(out, &prepared.corpus, Some(&prepared.counts))?;
    let mut w = BufWriter::new(File::create(out.join("malformed.jsonl"))?);
    for m in &prepared.malformed {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let c = &prepared.counts;
    println!(
        "users {}  check-ins after filters {}  POIs {}  interactions {}  malformed lines {}",
        c.users, c.filters.loyal_checkins, c.final_pois, c.interactions, c.malformed_lines
    );
    manifest.finish(out)?;
    Ok(())
}

#[cfg(feature = "http-geocoder")]
fn http_backend() -> anyhow::Result<Box<dyn GeocoderBackend>> {
    use mmpoi::ingest::geocoder::{HttpBackend, HttpConfig};
    let cfg = HttpConfig::from_env(10_000, 3).map_err(|e| UsageError(e.to_string()))?;
    Ok(Box::new(HttpBackend::new(cfg)?))
}

#[cfg(not(feature = "http-geocoder"))]
fn http_backend() -> anyhow::Result<Box<dyn GeocoderBackend>> {
    Err(UsageError("--geocoder-http needs a build with the http-geocoder feature".into()).into())
}

fn cmd_synth(cfg: &RunConfig, mode: Option<ModeArg>, out: &Path) -> anyhow::Result<()> {
    let mut scfg = cfg.synth.clone();
    if let Some(m) = mode {
        scfg.mode = m.into();
    }
    scfg.validate().map_err(|e| UsageError(e.to_string()))?;
    let manifest = RunManifest::new("synth", scfg.seed, serde_json::to_value(&scfg)?, Vec::new());
    let data = generate(&scfg)?;
    data.write_to(out)?;
    println!(
        "{} users, {} venues, {} check-ins ({} of {} transitions in the preferred topic)",
        scfg.users,
        scfg.venues,
        data.checkins.len(),
        data.in_topic_transitions,
        data.transitions
    );
    manifest.finish(out)?;
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, corpus_dir: &Path, desc: DescFlags, out: &Path) -> anyhow::Result<()> {
    let full = load_corpus(corpus_dir)?;
    let ex = &cfg.experiment;
    let vocab = vocab_from_metas(full.pois.values(), ex.text.max_vocab, ex.text.min_freq)?;
    let corpus = desc.apply(full);
    let manifest = RunManifest::new("pretrain", ex.seed, serde_json::to_value(cfg)?, digest_inputs(&[corpus_dir])?);
    let params = ModelParams::init(ModelConfig {
        vocab_size: vocab.len(),
        ..ex.model
    })?;
    let encoder = Encoder::new(params, vocab, ex.text)?;
    let train = train_part(&corpus, cfg)?;
    let (encoder, report) = pretrain(&train, encoder, &ex.train).context("stage pretrain")?;
    create_dir(out)?;
    encoder.save(out)?;
    report.write_jsonl(BufWriter::new(File::create(out.join("pretrain_log.jsonl"))?))?;
    manifest.finish(out)?;
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, corpus_dir: &Path, enc_dir: &Path, desc: DescFlags, out: &Path) -> anyhow::Result<()> {
    let corpus = desc.apply(load_corpus(corpus_dir)?);
    let encoder = load_encoder(enc_dir)?;
    let manifest = RunManifest::new(
        "finetune",
        cfg.experiment.seed,
        serde_json::to_value(cfg)?,
        digest_inputs(&[corpus_dir, enc_dir])?,
    );
    let train = train_part(&corpus, cfg)?;
    let (encoder, index, report) =
        finetune_two_stage(&train, encoder, &cfg.experiment.train).context("stage finetune")?;
    create_dir(out)?;
    encoder.save(out)?;
    index.save(&out.join(INDEX_FILE))?;
    report.write_jsonl(BufWriter::new(File::create(out.join("finetune_log.jsonl"))?))?;
    manifest.finish(out)?;
    Ok(())
}

fn cmd_encode(cfg: &RunConfig, corpus_dir: &Path, enc_dir: &Path, desc: DescFlags, out: &Path) -> anyhow::Result<()> {
    let corpus = desc.apply(load_corpus(corpus_dir)?);
    let encoder = load_encoder(enc_dir)?;
    let manifest = RunManifest::new(
        "encode",
        cfg.experiment.seed,
        serde_json::to_value(cfg)?,
        digest_inputs(&[corpus_dir, enc_dir])?,
    );
    let index = build_index(corpus.pois.values(), &encoder).context("stage encode")?;
    create_dir(out)?;
    index.save(&out.join(INDEX_FILE))?;
    println!("encoded {} venues into {}", index.len(), out.join(INDEX_FILE).display());
    manifest.finish(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    cfg: &RunConfig,
    corpus_dir: &Path,
    enc_dir: &Path,
    index_path: Option<&Path>,
    desc: DescFlags,
    exclude_seen: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let corpus = desc.apply(load_corpus(corpus_dir)?);
    let encoder = load_encoder(enc_dir)?;
    let mut inputs: Vec<&Path> = vec![corpus_dir, enc_dir];
    let index = match index_path {
        Some(p) => {
            need("--index", p)?;
            inputs.push(p);
            ItemIndex::load(p)?
        }
        None => build_index(corpus.pois.values(), &encoder)?,
    };
    let manifest = RunManifest::new("evaluate", cfg.experiment.seed, serde_json::to_value(cfg)?, digest_inputs(&inputs)?);
    let (_, test) = group_split(&corpus.sequences, &cfg.experiment.split)?;
    let mut opts = cfg.experiment.eval;
    opts.exclude_seen |= exclude_seen;
    let metrics = evaluate(&test, &corpus.pois, &index, &encoder, &opts).context("stage evaluate")?;
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let label = if desc.without_desc { "Without" } else { "With" };
    let table = metrics.to_table(label);
    write_text(&out.join("metrics.txt"), &table)?;
    print!("{table}");
    manifest.finish(out)?;
    Ok(())
}

fn cmd_ablate(
    cfg: &RunConfig,
    corpus_dir: Option<&Path>,
    synth: Option<ModeArg>,
    no_desc_both: bool,
    exclude_seen: bool,
    out: &Path,
) -> anyhow::Result<()> {
    create_dir(out)?;
    let mut cfg = cfg.clone();
    cfg.experiment.eval.exclude_seen |= exclude_seen;
    let (corpus, inputs) = match (corpus_dir, synth) {
        (Some(dir), _) => (load_corpus(dir)?, digest_inputs(&[dir])?),
        (None, Some(mode)) => {
            cfg.synth.mode = mode.into();
            cfg.synth.validate().map_err(|e| UsageError(e.to_string()))?;
            (synthetic_corpus(&cfg, out)?, Vec::new())
        }
        (None, None) => unreachable!("clap requires a corpus source"),
    };
    let manifest = RunManifest::new("ablate", cfg.experiment.seed, serde_json::to_value(&cfg)?, inputs);
    let outcome = run_ablation(&corpus, &cfg.experiment, no_desc_both).context("stage ablate")?;
    write_json(&out.join("with_desc.json"), &outcome.report.with_desc)?;
    write_json(&out.join("without_desc.json"), &outcome.report.without_desc)?;
    write_json(&out.join("ablation.json"), &outcome.report)?;
    let table = outcome.report.to_table();
    write_text(&out.join("ablation.txt"), &table)?;
    for (name, arm) in [("with_desc", &outcome.with_desc), ("without_desc", &outcome.without_desc)] {
        let dir = out.join("logs").join(name);
        create_dir(&dir)?;
        arm.pretrain.write_jsonl(BufWriter::new(File::create(dir.join("pretrain_log.jsonl"))?))?;
        arm.finetune.write_jsonl(BufWriter::new(File::create(dir.join("finetune_log.jsonl"))?))?;
    }
    print!("{table}");
    manifest.finish(out)?;
    Ok(())
}

/// Generates raw synthetic files under `out/synth` and prepares them into `out/corpus`.
fn synthetic_corpus(cfg: &RunConfig, out: &Path) -> anyhow::Result<Corpus> {
    let data = generate(&cfg.synth)?;
    let files = data.write_to(&out.join("synth"))?;
    let backend = FixtureBackend::parse(BufReader::new(File::open(&files.geocoder)?))?;
    let pcfg = mmpoi::pipeline::PrepareConfig {
        min_checkins: 1,
        ..cfg.prepare.clone()
    };
    let sources = DescriptionSources {
        venue_images: Some(files.venue_images.clone()),
        captions: Some(files.captions.clone()),
        ..Default::default()
    };
    let prepared = prepare(
        &files.checkins,
        &files.postal,
        &CategoryAllowlist::foursquare_food(),
        &GeocoderClient::new(Box::new(backend)),
        &sources,
        &pcfg,
    )
    .context("stage prepare")?;
    write_corpus(&out.join("corpus"), &prepared.corpus, Some(&prepared.counts))?;
    Ok(prepared.corpus)
}

fn read_history(path: &Path) -> anyhow::Result<Vec<String>> {
    need("--history", path)?;
    let mut ids = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let id = line.split('\t').next().unwrap_or("").trim();
        if !id.is_empty() && !id.starts_with('#') {
            ids.push(id.to_string());
        }
    }
    Ok(ids)
}

#[allow(clippy::too_many_arguments)]
fn cmd_recommend(
    cfg: &RunConfig,
    corpus_dir: &Path,
    enc_dir: &Path,
    index_path: &Path,
    history: &Path,
    top_k: usize,
    exclude_seen: bool,
    desc: DescFlags,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    if top_k == 0 {
        bail!(UsageError("--top-k must be at least 1".into()));
    }
    let corpus = desc.apply(load_corpus(corpus_dir)?);
    let encoder = load_encoder(enc_dir)?;
    need("--index", index_path)?;
    let index = ItemIndex::load(index_path)?;
    let mut prefix: Vec<&PoiMeta> = Vec::new();
    for id in read_history(history)? {
        match corpus.pois.get(&id) {
            Some(m) => prefix.push(m),
            None => log::warn!("unknown venue {id:?} in history; skipped"),
        }
    }
    if prefix.is_empty() {
        bail!("history has no known venues");
    }
    let ranked = rank(
        &prefix,
        &index,
        &encoder,
        &RankOptions {
            top_k: Some(top_k),
            exclude_seen,
        },
    )?;
    let mut lines = String::new();
    for r in &ranked {
        let meta = corpus.pois.get(&r.venue_id);
        let field = |k| meta.and_then(|m| m.get(k)).unwrap_or("-");
        lines.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\n",
            r.venue_id,
            r.score,
            field(AttributeKey::VenueName),
            field(AttributeKey::VenueArea)
        ));
    }
    print!("{lines}");
    if let Some(out) = out {
        let manifest = RunManifest::new(
            "recommend",
            cfg.experiment.seed,
            serde_json::to_value(cfg)?,
            digest_inputs(&[corpus_dir, enc_dir, index_path, history])?,
        );
        create_dir(out)?;
        write_text(&out.join("recommendations.tsv"), &lines)?;
        manifest.finish(out)?;
    }
    Ok(())
}

fn cmd_verify(out: &Path) -> anyhow::Result<()> {
    need("--out", out)?;
    let manifest = RunManifest::read(out)?;
    let stale = manifest.stale_artifacts(out)?;
    if !stale.is_empty() {
        bail!("{} artifact(s) changed since the run: {}", stale.len(), stale.join(", "));
    }
    println!("{} artifacts match the manifest", manifest.artifacts.len());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    if let Some(p) = &cli.config {
        need("--config", p)?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match &cli.command {
        Command::Prepare { .. } => cmd_prepare(cli, &cfg),
        Command::Synth { mode, out } => cmd_synth(&cfg, *mode, out),
        Command::Pretrain { corpus, desc, out } => cmd_pretrain(&cfg, corpus, *desc, out),
        Command::Finetune {
            corpus,
            encoder,
            desc,
            out,
        } => cmd_finetune(&cfg, corpus, encoder, *desc, out),
        Command::Encode {
            corpus,
            encoder,
            desc,
            out,
        } => cmd_encode(&cfg, corpus, encoder, *desc, out),
        Command::Evaluate {
            corpus,
            encoder,
            index,
            desc,
            exclude_seen,
            out,
        } => cmd_evaluate(&cfg, corpus, encoder, index.as_deref(), *desc, *exclude_seen, out),
        Command::Ablate {
            corpus,
            synth,
            no_desc_both,
            exclude_seen,
            out,
        } => cmd_ablate(&cfg, corpus.as_deref(), *synth, *no_desc_both, *exclude_seen, out),
        Command::Recommend {
            corpus,
            encoder,
            index,
            history,
            top_k,
            exclude_seen,
            desc,
            out,
        } => cmd_recommend(&cfg, corpus, encoder, index, history, *top_k, *exclude_seen, *desc, out.as_deref()),
        Command::Verify { out } => cmd_verify(out),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(e.downcast_ref::<mmpoi::Error>(), Some(mmpoi::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
