use std::path::{Path, PathBuf};

use newscap::checkpoint::{Checkpoint, Kind};
use newscap::io::{self, GeneratedLine, GenerationHeader};
use newscap_core::metrics::EvalReport;

const SMALL: &str = "\
samples = 60
article_len_min = 12
article_len_max = 20
image_dim = 8
nee_dim = 8
nee_epochs = 1
nee_negatives = 5
d_model = 16
d_text = 16
num_heads = 2
encoder_layers = 1
shared_blocks = 1
ff_width = 32
segment_len = 8
max_article_len = 16
max_caption_len = 16
head_hidden = 16
train_steps = 4
train_batch_size = 2
eval_every = 2
max_length = 8
";

fn run(args: &[&str]) -> i32 {
    newscap::cli::run(std::iter::once("newscap").chain(args.iter().copied()))
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("small.toml"), SMALL).unwrap();
        Fixture { _dir: dir, root }
    }

    fn p(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn run(&self, args: &[&str]) -> i32 {
        let config = self.p("small.toml");
        let mut all = args.to_vec();
        all.extend(["--config", &config]);
        run(&all)
    }

    /// Corpus, entity table and captioner.
    fn trained(&self) -> &Self {
        assert_eq!(self.run(&["synth", "--out", &self.p("corpus")]), 0);
        assert_eq!(self.run(&["train-nee", "--out", &self.p("nee"), "--kb", &self.p("corpus/kb.json")]), 0);
        let code = self.run(&[
            "train",
            "--out",
            &self.p("model"),
            "--data",
            &self.p("corpus"),
            "--nee",
            &self.p("nee/nee.ckpt"),
        ]);
        assert_eq!(code, 0);
        self
    }
}

#[test]
fn pipeline_writes_every_artifact() {
    let f = Fixture::new();
    f.trained();
    for rel in [
        "corpus/train.jsonl",
        "corpus/val.jsonl",
        "corpus/test.jsonl",
        "corpus/kb.json",
        "corpus/class_distribution.json",
        "corpus/class_distribution.txt",
        "corpus/config.toml",
        "nee/nee.ckpt",
        "nee/nee_log.json",
        "model/model.ckpt",
        "model/train_report.json",
    ] {
        assert!(f.root.join(rel).is_file(), "missing {rel}");
    }
    let ckpt = Checkpoint::load(Path::new(&f.p("model/model.ckpt"))).unwrap();
    assert_eq!(ckpt.header.kind, Kind::Model);
    assert_eq!(ckpt.header.config.d_model, 16);
    assert!(ckpt.caption_model().is_ok());

    let code = f.run(&[
        "generate",
        "--out",
        &f.p("gen"),
        "--model",
        &f.p("model/model.ckpt"),
        "--data",
        &f.p("corpus/test.jsonl"),
        "--alpha-mode",
        "manual",
        "--alpha",
        "1,0,0.5,0,1",
        "--beam",
        "3",
    ]);
    assert_eq!(code, 0);
    let (header, lines) = io::load_generated(Path::new(&f.p("gen/generated.jsonl"))).unwrap();
    assert_eq!(header.alpha_mode, "manual");
    assert_eq!(header.alpha, Some([1.0, 0.0, 0.5, 0.0, 1.0]));
    assert_eq!(header.beam, 3);
    let test = io::load_jsonl(Path::new(&f.p("corpus/test.jsonl"))).unwrap();
    assert_eq!(lines.len(), test.len());
    assert!(lines.iter().all(|l| l.alpha == [1.0, 0.0, 0.5, 0.0, 1.0] && l.tokens.len() <= 8));

    let code = f.run(&[
        "evaluate",
        "--out",
        &f.p("eval"),
        "--generated",
        &f.p("gen/generated.jsonl"),
        "--references",
        &f.p("corpus/test.jsonl"),
    ]);
    assert_eq!(code, 0);
    let report: EvalReport = io::read_json(Path::new(&f.p("eval/report.json"))).unwrap();
    assert_eq!(report.n, test.len());
    assert!(f.root.join("eval/report.txt").is_file());
}

#[test]
fn references_scored_against_themselves_are_perfect() {
    let f = Fixture::new();
    assert_eq!(f.run(&["synth", "--out", &f.p("corpus")]), 0);
    let test = io::load_jsonl(Path::new(&f.p("corpus/test.jsonl"))).unwrap();
    let header = GenerationHeader {
        model: "references".into(),
        alpha_mode: "oracle".into(),
        alpha: None,
        zero_out: "none".into(),
        beam: 1,
        max_length: 32,
        seed: 0,
    };
    let lines: Vec<GeneratedLine> = test
        .iter()
        .rev()
        .map(|s| GeneratedLine { id: s.id().into(), tokens: s.caption.tokens.clone(), alpha: [1.0; 5], score: 0.0 })
        .collect();
    io::save_generated(&header, &lines, Path::new(&f.p("self.jsonl"))).unwrap();
    let code = f.run(&[
        "evaluate",
        "--out",
        &f.p("eval"),
        "--generated",
        &f.p("self.jsonl"),
        "--references",
        &f.p("corpus/test.jsonl"),
        "--reference-components",
        "detected",
    ]);
    assert_eq!(code, 0);
    let r: EvalReport = io::read_json(Path::new(&f.p("eval/report.json"))).unwrap();
    assert!((r.bleu4 - 1.0).abs() < 1e-12 && (r.rouge_l - 1.0).abs() < 1e-12);
    assert!((r.cider - 10.0).abs() < 1e-9);
    assert_eq!((r.ne.p, r.ne.r), (1.0, 1.0));
    for pr in r.components.per_component() {
        assert!(pr.p == 1.0 || r.flags.iter().any(|f| f.contains("precision")));
        assert!(pr.r == 1.0 || r.flags.iter().any(|f| f.contains("recall")));
    }
}

#[test]
fn stats_reports_every_file() {
    let f = Fixture::new();
    assert_eq!(f.run(&["synth", "--out", &f.p("corpus")]), 0);
    let code = f.run(&[
        "stats",
        "--out",
        &f.p("stats"),
        "--data",
        &f.p("corpus/train.jsonl"),
        &f.p("corpus/test.jsonl"),
    ]);
    assert_eq!(code, 0);
    let stats: serde_json::Value = io::read_json(Path::new(&f.p("stats/stats.json"))).unwrap();
    let text = stats.to_string();
    assert!(text.contains("train.jsonl") && text.contains("test.jsonl"), "{text}");
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let f = Fixture::new();
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["synth"]), 1);
    assert_eq!(f.run(&["train-nee", "--out", &f.p("x"), "--kb", &f.p("missing.json")]), 2);
    assert_eq!(f.run(&["synth", "--out", &f.p("x"), "--set", "no_such_key=1"]), 2);
    std::fs::write(f.root.join("bad.toml"), "samples = \"many\"\n").unwrap();
    assert_eq!(run(&["synth", "--out", &f.p("x"), "--config", &f.p("bad.toml")]), 2);
    assert_eq!(run(&["synth", "--out", &f.p("x"), "--set", "beam=0"]), 2);
}

#[test]
fn manual_mode_without_weights_is_refused() {
    let f = Fixture::new();
    f.trained();
    let code = f.run(&[
        "generate",
        "--out",
        &f.p("gen"),
        "--model",
        &f.p("model/model.ckpt"),
        "--data",
        &f.p("corpus/test.jsonl"),
        "--alpha-mode",
        "manual",
    ]);
    assert_eq!(code, 2);
    assert!(!f.root.join("gen/generated.jsonl").exists());
}

#[test]
fn a_table_checkpoint_cannot_caption() {
    let f = Fixture::new();
    assert_eq!(f.run(&["synth", "--out", &f.p("corpus")]), 0);
    assert_eq!(f.run(&["train-nee", "--out", &f.p("nee"), "--kb", &f.p("corpus/kb.json")]), 0);
    let code = f.run(&[
        "generate",
        "--out",
        &f.p("gen"),
        "--model",
        &f.p("nee/nee.ckpt"),
        "--data",
        &f.p("corpus/test.jsonl"),
    ]);
    assert_eq!(code, 2);
}
