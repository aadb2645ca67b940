//! Caption-quality and template-fidelity metrics.
//!
//! Reports keep every rate in `[0, 1]` (CIDEr in `[0, 10]`); the rendered
//! text form multiplies by 100.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, EntityInventory, MatchedCaption};
use crate::taxonomy::{detect_components, Component};
use crate::{math, Error, Result};

type Tokens = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: {a} candidates but {b} references")));
    }
    Ok(())
}

/// Corpus BLEU-4 with brevity penalty. Orders 2..=4 with no matches use
/// add-one smoothing; no unigram matches gives 0.
pub fn bleu4(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_aligned("bleu4", candidates.len(), references.len())?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Input("bleu4: candidate without references".into()));
        }
        cand_len += cand.len();
        // closest reference length, shorter on ties
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty");
        for n in 1..=4 {
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngrams(cand, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if cand_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if matched[n] == 0 {
            1.0 / (total[n] as f64 + 1.0)
        } else {
            matched[n] as f64 / total[n] as f64
        };
        log_sum += math::ln(p);
    }
    let bp = if cand_len > ref_len { 1.0 } else { math::exp(1.0 - ref_len as f64 / cand_len as f64) };
    Ok(bp * math::exp(log_sum / 4.0))
}

/// Longest common subsequence length.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Mean ROUGE-L F-measure; with several references the best precision
/// and recall are combined.
pub fn rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_aligned("rouge_l", candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let (mut p, mut r) = (0.0f64, 0.0f64);
        for reference in refs {
            let l = lcs_len(cand, reference) as f64;
            if l > 0.0 {
                p = p.max(l / cand.len() as f64);
                r = r.max(l / reference.len() as f64);
            }
        }
        if p > 0.0 && r > 0.0 {
            let b2 = ROUGE_BETA * ROUGE_BETA;
            total += (1.0 + b2) * p * r / (r + b2 * p);
        }
    }
    Ok(total / candidates.len() as f64)
}

/// Document frequencies of every n-gram (n = 1..=4) over reference sets.
#[derive(Debug, Clone, PartialEq)]
pub struct CiderIdf {
    docs: usize,
    df: BTreeMap<Vec<String>, usize>,
}

impl CiderIdf {
    pub fn new(references: &[Vec<Tokens>]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Input("cider: empty reference corpus".into()));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
            for r in refs {
                for n in 1..=4 {
                    for g in ngrams(r, n).into_keys() {
                        seen.insert(g, ());
                    }
                }
            }
            for g in seen.into_keys() {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(CiderIdf { docs: references.len(), df })
    }

    /// `ln(N / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        math::ln(self.docs as f64 / df as f64)
    }

    fn vector<'a>(&self, tokens: &'a [String], n: usize) -> BTreeMap<&'a [String], f64> {
        ngrams(tokens, n).into_iter().map(|(g, c)| (g, c as f64 * self.idf(g))).collect()
    }
}

fn sparse_cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = math::sqrt(a.values().map(|x| x * x).sum());
    let nb = math::sqrt(b.values().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scale applied to the averaged cosine.
pub const CIDER_SCALE: f64 = 10.0;

/// CIDEr against an idf table built from `references`.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    let idf = CiderIdf::new(references)?;
    cider_with(candidates, references, &idf)
}

pub fn cider_with(candidates: &[Tokens], references: &[Vec<Tokens>], idf: &CiderIdf) -> Result<f64> {
    check_aligned("cider", candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Err(Error::Input("cider: no candidates".into()));
    }
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        let mut score = 0.0;
        for n in 1..=4 {
            let c = idf.vector(cand, n);
            let sims: f64 = refs.iter().map(|r| sparse_cosine(&c, &idf.vector(r, n))).sum();
            score += sims / refs.len() as f64;
        }
        total += CIDER_SCALE * score / 4.0;
    }
    Ok(total / candidates.len() as f64)
}

/// A precision/recall pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub p: f64,
    pub r: f64,
}

/// Rate with a zero-denominator flag.
fn ratio(num: usize, den: usize, flag: String, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(flag);
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-averaged entity precision and recall, matching entity-id
/// multisets per caption.
pub fn ne_precision_recall(
    generated: &[Tokens],
    references: &[Tokens],
    inventory: &EntityInventory,
    flags: &mut Vec<String>,
) -> Result<PrecisionRecall> {
    check_aligned("ne_precision_recall", generated.len(), references.len())?;
    let (mut matched, mut gen_total, mut ref_total) = (0, 0, 0);
    let ids = |tokens: &[String]| -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for e in inventory.extract(tokens) {
            *m.entry(e.entity_id.expect("inventory mentions are linked")).or_insert(0) += 1;
        }
        m
    };
    for (g, r) in generated.iter().zip(references) {
        let (gi, ri) = (ids(g), ids(r));
        gen_total += gi.values().sum::<usize>();
        ref_total += ri.values().sum::<usize>();
        matched += gi.iter().map(|(id, c)| (*c).min(ri.get(id).copied().unwrap_or(0))).sum::<usize>();
    }
    Ok(PrecisionRecall {
        p: ratio(matched, gen_total, "ne_precision: no generated entities".into(), flags),
        r: ratio(matched, ref_total, "ne_recall: no reference entities".into(), flags),
    })
}

/// Per-component scores in component order, plus their unweighted means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub who: PrecisionRecall,
    pub when: PrecisionRecall,
    #[serde(rename = "where")]
    pub where_: PrecisionRecall,
    pub misc: PrecisionRecall,
    pub context: PrecisionRecall,
    pub avg: PrecisionRecall,
}

impl ComponentScores {
    pub fn per_component(&self) -> [PrecisionRecall; 5] {
        [self.who, self.when, self.where_, self.misc, self.context]
    }
}

/// Presence confusion per component: TP both, FP generated only, FN
/// reference only.
pub fn component_precision_recall(
    generated: &[[bool; 5]],
    references: &[[bool; 5]],
    flags: &mut Vec<String>,
) -> Result<ComponentScores> {
    check_aligned("component_precision_recall", generated.len(), references.len())?;
    let mut pr = [PrecisionRecall::default(); 5];
    for c in Component::ALL {
        let i = c.index();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (g, r) in generated.iter().zip(references) {
            match (g[i], r[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        pr[i] = PrecisionRecall {
            p: ratio(tp, tp + fp, format!("{c}_precision: no generated positives"), flags),
            r: ratio(tp, tp + fn_, format!("{c}_recall: no reference positives"), flags),
        };
    }
    let avg = PrecisionRecall {
        p: pr.iter().map(|x| x.p).sum::<f64>() / 5.0,
        r: pr.iter().map(|x| x.r).sum::<f64>() / 5.0,
    };
    Ok(ComponentScores { who: pr[0], when: pr[1], where_: pr[2], misc: pr[3], context: pr[4], avg })
}

/// Source of reference component flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceComponents {
    /// Annotated flags stored with the caption.
    #[default]
    Gold,
    /// The same detector applied to generated text.
    Detected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub ne: PrecisionRecall,
    pub components: ComponentScores,
    pub n: usize,
    pub flags: Vec<String>,
}

impl EvalReport {
    /// Human-readable table with rates scaled by 100.
    pub fn render(&self) -> String {
        let mut out = format!(
            "samples    {}\nBLEU-4     {:.2}\nROUGE-L    {:.2}\nCIDEr      {:.2}\nNE P / R   {:.2} / {:.2}\n",
            self.n,
            100.0 * self.bleu4,
            100.0 * self.rouge_l,
            100.0 * self.cider,
            100.0 * self.ne.p,
            100.0 * self.ne.r
        );
        for (c, pr) in Component::ALL.iter().zip(self.components.per_component()) {
            out += &format!("{:<10} {:.2} / {:.2}\n", c.as_str(), 100.0 * pr.p, 100.0 * pr.r);
        }
        out += &format!("{:<10} {:.2} / {:.2}\n", "avg", 100.0 * self.components.avg.p, 100.0 * self.components.avg.r);
        for f in &self.flags {
            out += &format!("flag: {f}\n");
        }
        out
    }
}

/// Score generated captions against reference captions. Generated
/// components come from inventory matching plus the context heuristic.
pub fn evaluate(
    generated: &[Tokens],
    references: &[CaptionRecord],
    inventory: &EntityInventory,
    reference_mode: ReferenceComponents,
) -> Result<EvalReport> {
    check_aligned("evaluate", generated.len(), references.len())?;
    if generated.is_empty() {
        return Err(Error::Input("evaluate: no captions".into()));
    }
    let ref_tokens: Vec<Tokens> = references.iter().map(|r| r.tokens.clone()).collect();
    let ref_lists: Vec<Vec<Tokens>> = ref_tokens.iter().map(|r| vec![r.clone()]).collect();
    let mut flags = Vec::new();
    let ne = ne_precision_recall(generated, &ref_tokens, inventory, &mut flags)?;
    let detect = |tokens: &Tokens| {
        let m = MatchedCaption::new(tokens.clone(), inventory);
        detect_components(&m, false).threshold(0.5)
    };
    let gen_flags: Vec<[bool; 5]> = generated.iter().map(detect).collect();
    let ref_flags: Vec<[bool; 5]> = match reference_mode {
        ReferenceComponents::Gold => references.iter().map(|r| r.gold_components).collect(),
        ReferenceComponents::Detected => ref_tokens.iter().map(detect).collect(),
    };
    let components = component_precision_recall(&gen_flags, &ref_flags, &mut flags)?;
    Ok(EvalReport {
        bleu4: bleu4(generated, &ref_lists)?,
        rouge_l: rouge_l(generated, &ref_lists)?,
        cider: cider(generated, &ref_lists)?,
        ne,
        components,
        n: generated.len(),
        flags,
    })
}
