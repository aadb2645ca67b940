//! Subcommands. Each one writes its artifacts plus `config.toml`, the fully
//! resolved configuration including the seed, into `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use newscap_core::corpus::{build_vocab, corpus_texts, split, synth_generate, EntityInventory, Sample};
use newscap_core::decoder::{generate, prepare_all, train, AlphaMode, Search};
use newscap_core::metrics::evaluate;
use newscap_core::nee::{evaluate_nep, kb_from_corpus, train_joint_logged, KnowledgeBase};
use newscap_core::taxonomy::{class_distribution, component_frequencies, ClassDistribution, ComponentVector};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "newscap", version, about = "Template-guided news image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file of run settings; unset keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one setting, e.g. `--set d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus, its splits, a knowledge base and the class report.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the joint word/entity table on a knowledge base.
    TrainNee {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        kb: PathBuf,
    },
    /// Train the captioner on `train.jsonl` and `val.jsonl` in a corpus directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Entity table checkpoint from `train-nee`.
        #[arg(long, value_name = "PATH")]
        nee: PathBuf,
    },
    /// Caption every sample of a JSONL file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_parser = ["oracle", "auto", "manual"])]
        alpha_mode: Option<String>,
        /// Five comma-separated weights for `--alpha-mode manual`.
        #[arg(long, value_name = "W,W,W,W,W")]
        alpha: Option<String>,
        #[arg(long, value_parser = ["none", "text", "image"])]
        zero_out: Option<String>,
        /// Beam width; 1 decodes greedily.
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_length: Option<usize>,
    },
    /// Score generated captions against reference samples.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        generated: PathBuf,
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
        #[arg(long, value_parser = ["gold", "detected"])]
        reference_components: Option<String>,
    },
    /// Template-class and length statistics of one or more JSONL files.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH", required = true, num_args = 1..)]
        data: Vec<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command, returning the
/// process exit code. Messages go to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command and returns its summary lines.
pub fn execute(command: Command) -> Result<Vec<String>> {
    match command {
        Command::Synth { common } => synth(&common),
        Command::TrainNee { common, kb } => train_nee(&common, &kb),
        Command::Train { common, data, nee } => train_model(&common, &data, &nee),
        Command::Generate { common, model, data, alpha_mode, alpha, zero_out, beam, max_length } => {
            let mut extra = Vec::new();
            if let Some(m) = alpha_mode {
                extra.push(format!("alpha_mode=\"{m}\""));
            }
            if let Some(a) = alpha {
                extra.push(format!("alpha=[{a}]"));
            }
            if let Some(z) = zero_out {
                extra.push(format!("zero_out=\"{z}\""));
            }
            if let Some(b) = beam {
                extra.push(format!("beam={b}"));
            }
            if let Some(m) = max_length {
                extra.push(format!("max_length={m}"));
            }
            generate_captions(&common, &extra, &model, &data)
        }
        Command::Evaluate { common, generated, references, reference_components } => {
            let extra: Vec<String> =
                reference_components.into_iter().map(|r| format!("reference_components=\"{r}\"")).collect();
            evaluate_captions(&common, &extra, &generated, &references)
        }
        Command::Stats { common, data } => stats(&common, &data),
    }
}

fn resolve(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn echo_config(config: &RunConfig, out: &Path) -> Result<()> {
    io::write_text(&config.to_toml(), &out.join("config.toml"))
}

fn gold_vectors(samples: &[Sample]) -> Vec<ComponentVector> {
    samples.iter().map(|s| ComponentVector::from_flags(s.caption.gold_components)).collect()
}

fn write_distribution(dist: &ClassDistribution, out: &Path) -> Result<()> {
    io::write_json(dist, &out.join("class_distribution.json"))?;
    io::write_text(&dist.render(), &out.join("class_distribution.txt"))
}

fn synth(common: &Common) -> Result<Vec<String>> {
    let cfg = resolve(common, &[])?;
    let out = &common.out;
    let samples = synth_generate(&cfg.generator(), cfg.samples, cfg.seed)?;
    let (tr, va, te) = split(&samples, cfg.split, cfg.seed)?;
    io::save_jsonl(&tr, &out.join("train.jsonl"))?;
    io::save_jsonl(&va, &out.join("val.jsonl"))?;
    io::save_jsonl(&te, &out.join("test.jsonl"))?;
    let dist = class_distribution(&gold_vectors(&samples))?;
    write_distribution(&dist, out)?;
    let kb = kb_from_corpus(&samples, cfg.kb_coverage, cfg.kb_anchor_window, cfg.seed)?;
    io::write_json(&kb, &out.join("kb.json"))?;
    echo_config(&cfg, out)?;
    let top = dist.top();
    Ok(vec![
        format!("wrote {} / {} / {} samples to {}", tr.len(), va.len(), te.len(), out.display()),
        format!("knowledge base: {} entities, {} anchors", kb.entities.len(), kb.anchors.len()),
        format!("top template class {} at {:.2}%", top.class_id, top.percent),
    ])
}

#[derive(Serialize)]
struct NeeLog {
    epoch_losses: Vec<[f64; 4]>,
    anchor_mean_rank: f64,
    anchor_negatives: usize,
}

fn train_nee(common: &Common, kb_path: &Path) -> Result<Vec<String>> {
    let cfg = resolve(common, &[])?;
    require(kb_path)?;
    let kb: KnowledgeBase = io::read_json(kb_path)?;
    kb.validate()?;
    let (table, log) = train_joint_logged(&kb, &cfg.nee(), cfg.seed)?;
    let n_neg = cfg.nee_negatives.min(kb.entities.len().saturating_sub(1));
    let outcomes = evaluate_nep(&table, &kb, &kb.anchors, n_neg, cfg.seed)?;
    let mean_rank = if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().map(|o| o.rank as f64).sum::<f64>() / outcomes.len() as f64
    };
    let out = &common.out;
    Checkpoint::nee_only(&cfg, &table).save(&out.join("nee.ckpt"))?;
    let nee_log = NeeLog { epoch_losses: log.epoch_losses, anchor_mean_rank: mean_rank, anchor_negatives: n_neg };
    io::write_json(&nee_log, &out.join("nee_log.json"))?;
    echo_config(&cfg, out)?;
    Ok(vec![
        format!("trained {} words and {} entities at dim {}", table.words.len(), table.entities.len(), table.dim),
        format!("anchor mean rank {mean_rank:.3} against {n_neg} negatives"),
    ])
}

fn train_model(common: &Common, data: &Path, nee: &Path) -> Result<Vec<String>> {
    let mut cfg = resolve(common, &[])?;
    let (train_path, val_path) = (data.join("train.jsonl"), data.join("val.jsonl"));
    for p in [&train_path, &val_path, &nee.to_path_buf()] {
        require(p)?;
    }
    let train_set = io::load_jsonl(&train_path)?;
    let val_set = io::load_jsonl(&val_path)?;
    let first = train_set.first().ok_or_else(|| CliError::Data(format!("{} is empty", train_path.display())))?;
    let table = Checkpoint::load(nee)?.table()?;
    // stream widths follow the data and the table
    cfg.image_dim = first.image_feature.len();
    cfg.nee_dim = table.dim;
    let vocab = build_vocab(corpus_texts(&train_set), cfg.vocab_min_count)?;
    let model_cfg = cfg.model(vocab.len());
    model_cfg.validate().map_err(CliError::from_core_config)?;
    let prepared_train = prepare_all(&train_set, &vocab, &table, &model_cfg)?;
    let prepared_val = prepare_all(&val_set, &vocab, &table, &model_cfg)?;
    let mut model = newscap_core::decoder::CaptionModel::new(&model_cfg, cfg.seed)?;
    let report = train(&mut model, &prepared_train, &prepared_val, &cfg.train(), cfg.seed)?;
    let val_loss = (!prepared_val.is_empty()).then_some(report.best_val_loss);
    let out = &common.out;
    Checkpoint::model(&cfg, &model, &vocab, &table, report.best_step, val_loss).save(&out.join("model.ckpt"))?;
    io::write_json(&report, &out.join("train_report.json"))?;
    echo_config(&cfg, out)?;
    let mut lines = vec![format!(
        "trained {} parameters for {} steps on {} samples (vocabulary {})",
        model.store.num_values(),
        report.steps,
        prepared_train.len(),
        vocab.len()
    )];
    if let Some(v) = val_loss {
        lines.push(format!("best validation loss {v:.4} at step {}", report.best_step));
    }
    Ok(lines)
}

fn generate_captions(common: &Common, extra: &[String], model_path: &Path, data: &Path) -> Result<Vec<String>> {
    require(model_path)?;
    require(data)?;
    let ckpt = Checkpoint::load(model_path)?;
    // architecture and widths come from the checkpoint, decoding settings from the command
    let requested = resolve(common, extra)?;
    let mut cfg = ckpt.header.config.clone();
    cfg.seed = requested.seed;
    cfg.alpha_mode = requested.alpha_mode.clone();
    cfg.alpha = requested.alpha;
    cfg.zero_out = requested.zero_out;
    cfg.beam = requested.beam;
    cfg.max_length = requested.max_length;
    let gen_cfg = cfg.generation()?;
    let model = ckpt.caption_model()?;
    let vocab = ckpt.vocabulary()?;
    let table = ckpt.table()?;
    let samples = io::load_jsonl(data)?;
    let prepared = prepare_all(&samples, &vocab, &table, &model.config)?;
    let lines = prepared
        .iter()
        .map(|s| {
            let g = generate(&model, s, &gen_cfg)?;
            Ok(io::GeneratedLine { id: s.id.clone(), tokens: vocab.decode(&g.ids)?, alpha: g.alpha.0, score: g.score })
        })
        .collect::<Result<Vec<_>>>()?;
    let header = io::GenerationHeader {
        model: model_path.display().to_string(),
        alpha_mode: cfg.alpha_mode.clone(),
        alpha: match gen_cfg.alpha_mode {
            AlphaMode::Manual(a) => Some(a.0),
            _ => None,
        },
        zero_out: serde_plain(&cfg.zero_out),
        beam: match gen_cfg.search {
            Search::Greedy => 1,
            Search::Beam(w) => w,
        },
        max_length: gen_cfg.max_length,
        seed: cfg.seed,
    };
    let out = &common.out;
    io::save_generated(&header, &lines, &out.join("generated.jsonl"))?;
    echo_config(&cfg, out)?;
    Ok(vec![format!("generated {} captions into {}", lines.len(), out.join("generated.jsonl").display())])
}

/// Unit enum variant name as its serde string.
fn serde_plain<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(e) => e.to_string(),
    }
}

fn evaluate_captions(common: &Common, extra: &[String], generated: &Path, references: &Path) -> Result<Vec<String>> {
    let cfg = resolve(common, extra)?;
    require(generated)?;
    require(references)?;
    let (_, lines) = io::load_generated(generated)?;
    let refs = io::load_jsonl(references)?;
    let by_id: std::collections::BTreeMap<&str, &io::GeneratedLine> = lines.iter().map(|l| (l.id.as_str(), l)).collect();
    if by_id.len() != lines.len() {
        return Err(CliError::Data(format!("{}: duplicate caption ids", generated.display())));
    }
    let mut candidates = Vec::with_capacity(refs.len());
    for r in &refs {
        let line = by_id
            .get(r.id())
            .ok_or_else(|| CliError::Data(format!("no generated caption for reference `{}`", r.id())))?;
        candidates.push(line.tokens.clone());
    }
    if lines.len() != refs.len() {
        return Err(CliError::Data(format!(
            "{} generated captions for {} references",
            lines.len(),
            refs.len()
        )));
    }
    let inventory = EntityInventory::from_samples(&refs)?;
    let records: Vec<_> = refs.iter().map(|s| s.caption.clone()).collect();
    let report = evaluate(&candidates, &records, &inventory, cfg.reference_components)?;
    let out = &common.out;
    io::write_json(&report, &out.join("report.json"))?;
    let text = report.render();
    io::write_text(&text, &out.join("report.txt"))?;
    echo_config(&cfg, out)?;
    Ok(text.lines().map(str::to_string).collect())
}

#[derive(Serialize)]
struct StatsReport {
    files: Vec<String>,
    samples: usize,
    mean_article_tokens: f64,
    mean_caption_tokens: f64,
    /// Percent of captions with each component.
    component_percent: [f64; 5],
    class_distribution: ClassDistribution,
}

fn stats(common: &Common, data: &[PathBuf]) -> Result<Vec<String>> {
    let cfg = resolve(common, &[])?;
    let mut samples = Vec::new();
    for p in data {
        require(p)?;
        samples.extend(io::load_jsonl(p)?);
    }
    if samples.is_empty() {
        return Err(CliError::Data("no samples to summarise".into()));
    }
    let n = samples.len() as f64;
    let vectors = gold_vectors(&samples);
    let dist = class_distribution(&vectors)?;
    let report = StatsReport {
        files: data.iter().map(|p| p.display().to_string()).collect(),
        samples: samples.len(),
        mean_article_tokens: samples.iter().map(|s| s.article.tokens.len() as f64).sum::<f64>() / n,
        mean_caption_tokens: samples.iter().map(|s| s.caption.tokens.len() as f64).sum::<f64>() / n,
        component_percent: component_frequencies(&vectors)?,
        class_distribution: dist.clone(),
    };
    let out = &common.out;
    io::write_json(&report, &out.join("stats.json"))?;
    write_distribution(&dist, out)?;
    echo_config(&cfg, out)?;
    let top = dist.top();
    Ok(vec![
        format!("{} samples, mean article {:.1} tokens, mean caption {:.1} tokens", report.samples, report.mean_article_tokens, report.mean_caption_tokens),
        format!("top template class {} at {:.2}%", top.class_id, top.percent),
    ])
}
