//! File formats: sample JSONL, generated-caption JSONL, and plain JSON.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use newscap_core::corpus::{Article, CaptionRecord, EntityMention, Sample};
use newscap_core::Error as CoreError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One sample per line, flat field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub id: String,
    pub article_tokens: Vec<String>,
    pub article_entities: Vec<EntityMention>,
    pub image_feature: Vec<f64>,
    pub caption_tokens: Vec<String>,
    pub caption_entities: Vec<EntityMention>,
    pub gold_components: [u8; 5],
}

impl From<&Sample> for SampleLine {
    fn from(s: &Sample) -> Self {
        SampleLine {
            id: s.article.id.clone(),
            article_tokens: s.article.tokens.clone(),
            article_entities: s.article.entities.clone(),
            image_feature: s.image_feature.clone(),
            caption_tokens: s.caption.tokens.clone(),
            caption_entities: s.caption.entities.clone(),
            gold_components: s.caption.gold_components.map(u8::from),
        }
    }
}

impl TryFrom<SampleLine> for Sample {
    type Error = CoreError;

    fn try_from(l: SampleLine) -> std::result::Result<Self, CoreError> {
        let mut gold = [false; 5];
        for (g, &v) in gold.iter_mut().zip(&l.gold_components) {
            *g = match v {
                0 => false,
                1 => true,
                _ => {
                    return Err(CoreError::Validation {
                        field: "gold_components".into(),
                        message: format!("flag {v} is not 0 or 1"),
                    })
                }
            };
        }
        let sample = Sample {
            article: Article { id: l.id, tokens: l.article_tokens, entities: l.article_entities },
            image_feature: l.image_feature,
            caption: CaptionRecord { tokens: l.caption_tokens, entities: l.caption_entities, gold_components: gold },
        };
        sample.validate(None)?;
        Ok(sample)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| CliError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Non-blank lines with their 1-based numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| CliError::Parse { path: path.into(), line, message: e.to_string() })
}

pub fn save_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    write_lines(path, samples.iter().map(SampleLine::from))
}

/// Every line is parsed and validated; errors carry the line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, text)| {
            let line: SampleLine = parse_line(path, n, &text)?;
            Sample::try_from(line).map_err(|e| CliError::Parse { path: path.into(), line: n, message: e.to_string() })
        })
        .collect()
}

/// First line of a generated-caption file: how the captions were made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationHeader {
    pub model: String,
    pub alpha_mode: String,
    /// Set only for manual weights.
    pub alpha: Option<[f64; 5]>,
    pub zero_out: String,
    pub beam: usize,
    pub max_length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedLine {
    pub id: String,
    pub tokens: Vec<String>,
    /// Component weights the decoder mixed with.
    pub alpha: [f64; 5],
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: GenerationHeader,
}

pub fn save_generated(header: &GenerationHeader, lines: &[GeneratedLine], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |v: serde_json::Result<String>| -> Result<()> {
        let s = v.map_err(|e| CliError::io(path, e.into()))?;
        w.write_all(s.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| CliError::io(path, e))
    };
    put(serde_json::to_string(&HeaderLine { header: header.clone() }))?;
    for l in lines {
        put(serde_json::to_string(l))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_generated(path: &Path) -> Result<(GenerationHeader, Vec<GeneratedLine>)> {
    let mut lines = read_lines(path)?.into_iter();
    let (n, first) = lines
        .next()
        .ok_or_else(|| CliError::Parse { path: path.into(), line: 1, message: "missing header line".into() })?;
    let header: HeaderLine = parse_line(path, n, &first)?;
    let body = lines.map(|(n, text)| parse_line(path, n, &text)).collect::<Result<_>>()?;
    Ok((header.header, body))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e.into()))?;
    text.push('\n');
    write_text(&text, path)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse { path: path.into(), line: e.line(), message: e.to_string() })
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use newscap_core::corpus::{synth_generate, GeneratorConfig};

    #[test]
    fn samples_round_trip_losslessly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let samples = synth_generate(&GeneratorConfig::default(), 100, 3).unwrap();
        save_jsonl(&samples, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), samples);
    }

    #[test]
    fn empty_file_is_an_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let samples = synth_generate(&GeneratorConfig::default(), 2, 3).unwrap();
        save_jsonl(&samples, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();
        match load_jsonl(&path) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn span_past_the_end_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("span.jsonl");
        let mut s = synth_generate(&GeneratorConfig::default(), 1, 3).unwrap();
        let n = s[0].article.tokens.len();
        s[0].article.entities[0].end = n + 1;
        save_jsonl(&s, &path).unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("article_entities"), "{err}");
    }

    #[test]
    fn generated_file_keeps_its_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let header = GenerationHeader {
            model: "m".into(),
            alpha_mode: "manual".into(),
            alpha: Some([1.0, 0.0, 0.0, 0.0, 0.0]),
            zero_out: "none".into(),
            beam: 1,
            max_length: 8,
            seed: 0,
        };
        let lines = vec![GeneratedLine { id: "a".into(), tokens: vec!["x".into()], alpha: [1.0, 0.0, 0.0, 0.0, 0.0], score: -0.5 }];
        save_generated(&header, &lines, &path).unwrap();
        assert_eq!(load_generated(&path).unwrap(), (header, lines));
    }
}
