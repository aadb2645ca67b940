//! Joint word/entity embeddings with the neural entity predictor (NEP)
//! and the missing-entity fallback.
//!
//! Training minimises four negative-sampled objectives with hand-derived
//! gradients: word skip-gram, graph skip-gram over KB edges, an anchor
//! objective predicting context words from entities, and the NEP softmax
//! over a positive entity and sampled negatives. Skip-gram style objectives
//! use separate output ("context") vectors that stay internal to training.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::math;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, SeededRng};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Knowledge base

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub entity: String,
    pub context: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub entities: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub anchors: Vec<Anchor>,
    pub word_corpus: Vec<Vec<String>>,
}

impl KnowledgeBase {
    pub fn validate(&self) -> Result<()> {
        let known = self.entity_index()?;
        for (a, b) in &self.edges {
            for e in [a, b] {
                if !known.contains_key(e.as_str()) {
                    return Err(Error::validation("kb_edges", format!("unknown entity `{e}`")));
                }
            }
            if a == b {
                return Err(Error::validation("kb_edges", format!("self edge on `{a}`")));
            }
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !known.contains_key(a.entity.as_str()) {
                return Err(Error::validation("kb_anchors", format!("anchor {i}: unknown entity `{}`", a.entity)));
            }
            if a.context.is_empty() {
                return Err(Error::validation("kb_anchors", format!("anchor {i}: empty context")));
            }
        }
        Ok(())
    }

    /// Entity id to position; errors on duplicates.
    pub fn entity_index(&self) -> Result<BTreeMap<&str, usize>> {
        let mut index = BTreeMap::new();
        for (i, e) in self.entities.iter().enumerate() {
            if index.insert(e.as_str(), i).is_some() {
                return Err(Error::validation("kb_entities", format!("duplicate entity `{e}`")));
            }
        }
        Ok(index)
    }

    /// Sorted word vocabulary over the corpus and anchor contexts.
    pub fn words(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self
            .word_corpus
            .iter()
            .flatten()
            .chain(self.anchors.iter().flat_map(|a| &a.context))
            .collect();
        set.into_iter().cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// Embedding table

/// Word and entity vectors in one space plus the NEP text projection
/// `v_t = mean(word vectors) * W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEmbeddingTable {
    pub dim: usize,
    pub words: Vec<String>,
    pub entities: Vec<String>,
    pub word_vectors: Vec<f64>,
    pub entity_vectors: Vec<f64>,
    pub nep_weight: Vec<f64>,
    pub nep_bias: Vec<f64>,
    #[serde(skip)]
    word_index: BTreeMap<String, usize>,
    #[serde(skip)]
    entity_index: BTreeMap<String, usize>,
}

impl JointEmbeddingTable {
    /// All-zero table; the projection starts as the identity.
    pub fn new(words: Vec<String>, entities: Vec<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut nep_weight = vec![0.0; dim * dim];
        for i in 0..dim {
            nep_weight[i * dim + i] = 1.0;
        }
        let mut table = JointEmbeddingTable {
            dim,
            word_vectors: vec![0.0; words.len() * dim],
            entity_vectors: vec![0.0; entities.len() * dim],
            words,
            entities,
            nep_weight,
            nep_bias: vec![0.0; dim],
            word_index: BTreeMap::new(),
            entity_index: BTreeMap::new(),
        };
        table.reindex()?;
        Ok(table)
    }

    /// Rebuild lookup maps and check shapes, e.g. after deserialising.
    pub fn reindex(&mut self) -> Result<()> {
        let d = self.dim;
        let shapes = [
            ("word_vectors", self.word_vectors.len(), self.words.len() * d),
            ("entity_vectors", self.entity_vectors.len(), self.entities.len() * d),
            ("nep_weight", self.nep_weight.len(), d * d),
            ("nep_bias", self.nep_bias.len(), d),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!("{name}: {got} values, expected {want}")));
            }
        }
        self.word_index = index_of(&self.words, "word")?;
        self.entity_index = index_of(&self.entities, "entity")?;
        Ok(())
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.word_index.get(w).copied()
    }
    pub fn entity_id(&self, e: &str) -> Option<usize> {
        self.entity_index.get(e).copied()
    }
    pub fn word_vector(&self, w: &str) -> Option<&[f64]> {
        self.word_id(w).map(|i| row(&self.word_vectors, i, self.dim))
    }
    pub fn entity_vector(&self, e: &str) -> Option<&[f64]> {
        self.entity_id(e).map(|i| row(&self.entity_vectors, i, self.dim))
    }
    pub fn entity_row(&self, i: usize) -> &[f64] {
        row(&self.entity_vectors, i, self.dim)
    }

    fn project(&self, mean: &[f64]) -> Vec<f64> {
        project(&self.nep_weight, &self.nep_bias, mean, self.dim)
    }

    fn mean_words(&self, tokens: &[String]) -> Vec<f64> {
        let ids: Vec<Option<usize>> = tokens.iter().map(|t| self.word_id(t)).collect();
        mean_rows(&self.word_vectors, &ids, self.dim)
    }
}

fn index_of(items: &[String], what: &str) -> Result<BTreeMap<String, usize>> {
    let mut index = BTreeMap::new();
    for (i, s) in items.iter().enumerate() {
        if index.insert(s.clone(), i).is_some() {
            return Err(Error::Input(format!("duplicate {what} `{s}`")));
        }
    }
    Ok(index)
}

fn row(data: &[f64], i: usize, d: usize) -> &[f64] {
    &data[i * d..(i + 1) * d]
}

/// Mean over all positions; `None` (out of vocabulary) adds zero but counts.
fn mean_rows(data: &[f64], ids: &[Option<usize>], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for id in ids.iter().flatten() {
        for (m, x) in mean.iter_mut().zip(row(data, *id, d)) {
            *m += x;
        }
    }
    let n = ids.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn project(weight: &[f64], bias: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    let mut out = bias.to_vec();
    for (i, xi) in x.iter().enumerate() {
        if *xi != 0.0 {
            for (o, w) in out.iter_mut().zip(&weight[i * d..(i + 1) * d]) {
                *o += xi * w;
            }
        }
    }
    out
}

/// Text vector: projection of the mean word vector of `tokens`.
pub fn text_vector(tokens: &[String], table: &JointEmbeddingTable) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Input("text_vector needs at least one token".into()));
    }
    Ok(table.project(&table.mean_words(tokens)))
}

fn candidate_scores(
    table: &JointEmbeddingTable,
    v_t: &[f64],
    e: &str,
    negatives: &[String],
) -> Result<Vec<f64>> {
    if negatives.iter().any(|n| n == e) {
        return Err(Error::Contract(format!("positive entity `{e}` listed among negatives")));
    }
    core::iter::once(e)
        .chain(negatives.iter().map(String::as_str))
        .map(|id| {
            table
                .entity_vector(id)
                .map(|v| math::dot(v, v_t))
                .ok_or_else(|| Error::Input(format!("unknown entity `{id}`")))
        })
        .collect()
}

/// Probability of `e` against `negatives` given text `t` (softmax over
/// the positive and the negatives).
pub fn nep_probability(e: &str, t: &[String], negatives: &[String], table: &JointEmbeddingTable) -> Result<f64> {
    let v_t = text_vector(t, table)?;
    let scores = candidate_scores(table, &v_t, e, negatives)?;
    Ok(math::exp(scores[0] - math::log_sum_exp(&scores)))
}

/// Probability of `e` over every entity in the table.
pub fn nep_probability_full(e: &str, t: &[String], table: &JointEmbeddingTable) -> Result<f64> {
    let negatives: Vec<String> = table.entities.iter().filter(|x| *x != e).cloned().collect();
    nep_probability(e, t, &negatives, table)
}

/// Entity vector when the table knows `entity`, else the text vector of
/// `context`.
pub fn lookup_entity(entity: Option<&str>, context: &[String], table: &JointEmbeddingTable) -> Result<Vec<f64>> {
    if let Some(v) = entity.and_then(|e| table.entity_vector(e)) {
        return Ok(v.to_vec());
    }
    if context.is_empty() {
        return Err(Error::Input(format!(
            "entity `{}` missing from the table and no context given",
            entity.unwrap_or("<none>")
        )));
    }
    text_vector(context, table)
}

pub const FALLBACK_CONTEXT_LEN: usize = 64;

/// At most `width` tokens centred on the span `[start, end)`.
pub fn fallback_context(tokens: &[String], start: usize, end: usize, width: usize) -> &[String] {
    if tokens.len() <= width {
        return tokens;
    }
    let centre = (start + end) / 2;
    let lo = centre.saturating_sub(width / 2).min(tokens.len() - width);
    &tokens[lo..lo + width]
}

// ---------------------------------------------------------------------------
// Negative sampling

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    #[default]
    Uniform,
    /// Proportional to anchor frequency raised to 0.75.
    Unigram,
}

/// Outcome of scoring one anchor against its negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NepOutcome {
    pub positive: String,
    pub negatives: Vec<String>,
    pub loss: f64,
    /// 1 is best.
    pub rank: usize,
}

/// Uniform draw without replacement from the KB entities not in `t_entities`.
pub fn sample_negatives(kb: &KnowledgeBase, t_entities: &[String], n_neg: usize, seed: u64) -> Result<Vec<String>> {
    let excluded: BTreeSet<&str> = t_entities.iter().map(String::as_str).collect();
    let mut candidates: Vec<&String> = kb.entities.iter().filter(|e| !excluded.contains(e.as_str())).collect();
    if candidates.len() < n_neg {
        return Err(Error::Input(format!(
            "{} candidate negatives, {n_neg} requested",
            candidates.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    let (picked, _) = candidates.partial_shuffle(&mut rng, n_neg);
    Ok(picked.iter().map(|e| (*e).clone()).collect())
}

/// Sampler over indices `0..n` with optional weights.
#[derive(Debug, Clone)]
struct IndexSampler {
    cumulative: Option<Vec<f64>>,
    n: usize,
}

impl IndexSampler {
    fn uniform(n: usize) -> Self {
        IndexSampler { cumulative: None, n }
    }

    fn weighted(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        IndexSampler { cumulative: Some(cumulative), n: weights.len() }
    }

    fn draw(&self, rng: &mut SeededRng) -> usize {
        match &self.cumulative {
            None => rng.random_range(0..self.n),
            Some(c) => {
                let target = rng.random::<f64>() * c[c.len() - 1];
                c.partition_point(|x| *x <= target).min(self.n - 1)
            }
        }
    }

    /// `k` distinct indices outside `excluded`, by rejection. Callers
    /// guarantee at least `k` eligible indices with positive weight.
    fn draw_distinct(&self, rng: &mut SeededRng, k: usize, excluded: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.cumulative.is_none() && k * 2 > self.n {
            let mut pool: Vec<usize> = (0..self.n).filter(|i| !excluded.contains(i)).collect();
            let (picked, _) = pool.partial_shuffle(rng, k);
            out.extend_from_slice(picked);
            return out;
        }
        while out.len() < k {
            let i = self.draw(rng);
            if !excluded.contains(&i) && !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeeConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Anchors per step; skip-gram pairs and edges are drawn in equal number.
    pub batch_size: usize,
    pub window: usize,
    /// Negatives for the three sigmoid objectives.
    pub sigmoid_negatives: usize,
    /// Negatives for the NEP softmax.
    pub nep_negatives: usize,
    /// Weights of skip-gram, graph, anchor and NEP losses.
    pub objective_weights: [f64; 4],
    pub negative_sampling: NegativeSampling,
    pub init_scale: f64,
}

impl Default for NeeConfig {
    fn default() -> Self {
        NeeConfig {
            dim: 300,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 32,
            window: 2,
            sigmoid_negatives: 5,
            nep_negatives: 50,
            objective_weights: [1.0; 4],
            negative_sampling: NegativeSampling::Uniform,
            init_scale: 0.1,
        }
    }
}

impl NeeConfig {
    pub fn validate(&self, kb: &KnowledgeBase) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("dim, batch_size and window must be positive".into()));
        }
        if self.nep_negatives >= kb.entities.len() {
            return Err(Error::Config(format!(
                "nep_negatives = {} needs more than that many entities, KB has {}",
                self.nep_negatives,
                kb.entities.len()
            )));
        }
        if self.sigmoid_negatives + 2 > kb.entities.len() {
            return Err(Error::Config("sigmoid_negatives exceeds the entity count".into()));
        }
        if !(self.learning_rate > 0.0) || self.objective_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("learning rate must be positive and weights non-negative".into()));
        }
        Ok(())
    }
}

/// Objective order used in loss arrays.
pub const OBJECTIVES: [&str; 4] = ["skip_gram", "graph", "anchor", "nep"];

#[derive(Debug, Clone, PartialEq)]
struct SigmoidItem {
    source: usize,
    target: usize,
    negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct NepItem {
    context: Vec<Option<usize>>,
    positive: usize,
    negatives: Vec<usize>,
}

/// One fixed set of training examples for every objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeeBatch {
    skip_gram: Vec<SigmoidItem>,
    graph: Vec<SigmoidItem>,
    anchor: Vec<SigmoidItem>,
    nep: Vec<NepItem>,
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    word_in: Vec<f64>,
    word_out: Vec<f64>,
    entity_in: Vec<f64>,
    entity_out: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Params {
    fn zeros_like(&self) -> Params {
        Params {
            word_in: vec![0.0; self.word_in.len()],
            word_out: vec![0.0; self.word_out.len()],
            entity_in: vec![0.0; self.entity_in.len()],
            entity_out: vec![0.0; self.entity_out.len()],
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.word_in,
            &mut self.word_out,
            &mut self.entity_in,
            &mut self.entity_out,
            &mut self.weight,
            &mut self.bias,
        ]
    }

    fn tensors(&self) -> [&Vec<f64>; 6] {
        [&self.word_in, &self.word_out, &self.entity_in, &self.entity_out, &self.weight, &self.bias]
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Mean negative-sampled logistic loss of `in[source]` against `out[target]`.
fn sigmoid_objective(
    input: &[f64],
    output: &[f64],
    items: &[SigmoidItem],
    d: usize,
    mut grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let n = items.len() as f64;
    let mut total = 0.0;
    for item in items {
        let u = row(input, item.source, d);
        let targets = core::iter::once((item.target, 1.0)).chain(item.negatives.iter().map(|n| (*n, 0.0)));
        for (t, label) in targets {
            let o = row(output, t, d);
            let s = math::dot(u, o);
            // -log sigmoid(s) for positives, -log sigmoid(-s) for negatives
            let signed = if label == 1.0 { s } else { -s };
            total += softplus(-signed);
            if let Some((g_in, g_out, w)) = grads.as_mut() {
                let coeff = (math::sigmoid(s) - label) * *w / n;
                add_scaled(&mut g_in[item.source * d..(item.source + 1) * d], o, coeff);
                add_scaled(&mut g_out[t * d..(t + 1) * d], u, coeff);
            }
        }
    }
    total / n
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + math::ln(1.0 + math::exp(-x))
    } else {
        math::ln(1.0 + math::exp(x))
    }
}

fn nep_objective(p: &Params, items: &[NepItem], d: usize, mut grads: Option<(&mut Params, f64)>) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let n = items.len() as f64;
    let mut total = 0.0;
    for item in items {
        let mean = mean_rows(&p.word_in, &item.context, d);
        let v_t = project(&p.weight, &p.bias, &mean, d);
        let candidates: Vec<usize> = core::iter::once(item.positive).chain(item.negatives.iter().copied()).collect();
        let mut probs: Vec<f64> = candidates.iter().map(|&e| math::dot(row(&p.entity_in, e, d), &v_t)).collect();
        total += math::log_sum_exp(&probs) - probs[0];
        if let Some((g, w)) = grads.as_mut() {
            math::softmax_in_place(&mut probs);
            let mut d_v = vec![0.0; d];
            for (j, &e) in candidates.iter().enumerate() {
                let coeff = (probs[j] - if j == 0 { 1.0 } else { 0.0 }) * *w / n;
                add_scaled(&mut g.entity_in[e * d..(e + 1) * d], &v_t, coeff);
                add_scaled(&mut d_v, row(&p.entity_in, e, d), coeff);
            }
            add_scaled(&mut g.bias, &d_v, 1.0);
            let mut d_mean = vec![0.0; d];
            for i in 0..d {
                if mean[i] != 0.0 {
                    add_scaled(&mut g.weight[i * d..(i + 1) * d], &d_v, mean[i]);
                }
                d_mean[i] = math::dot(&p.weight[i * d..(i + 1) * d], &d_v);
            }
            let share = 1.0 / item.context.len() as f64;
            for id in item.context.iter().flatten() {
                add_scaled(&mut g.word_in[id * d..(id + 1) * d], &d_mean, share);
            }
        }
    }
    total / n
}

/// Per-objective mean losses; with `grads`, accumulates the gradient of
/// the weighted sum.
fn batch_loss(p: &Params, batch: &NeeBatch, weights: [f64; 4], d: usize, grads: Option<&mut Params>) -> [f64; 4] {
    match grads {
        None => [
            sigmoid_objective(&p.word_in, &p.word_out, &batch.skip_gram, d, None),
            sigmoid_objective(&p.entity_in, &p.entity_out, &batch.graph, d, None),
            sigmoid_objective(&p.entity_in, &p.word_out, &batch.anchor, d, None),
            nep_objective(p, &batch.nep, d, None),
        ],
        Some(g) => {
            let sg = sigmoid_objective(
                &p.word_in,
                &p.word_out,
                &batch.skip_gram,
                d,
                Some((&mut g.word_in, &mut g.word_out, weights[0])),
            );
            let graph = sigmoid_objective(
                &p.entity_in,
                &p.entity_out,
                &batch.graph,
                d,
                Some((&mut g.entity_in, &mut g.entity_out, weights[1])),
            );
            let anchor = sigmoid_objective(
                &p.entity_in,
                &p.word_out,
                &batch.anchor,
                d,
                Some((&mut g.entity_in, &mut g.word_out, weights[2])),
            );
            let nep = nep_objective(p, &batch.nep, d, Some((g, weights[3])));
            [sg, graph, anchor, nep]
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NeeTrainingLog {
    /// Mean batch losses per epoch, in [`OBJECTIVES`] order.
    pub epoch_losses: Vec<[f64; 4]>,
}

/// Stateful trainer; [`train_joint`] wraps it.
#[derive(Debug, Clone)]
pub struct NeeTrainer {
    config: NeeConfig,
    words: Vec<String>,
    entities: Vec<String>,
    params: Params,
    grads: Params,
    adam: AdamState,
    rng: SeededRng,
    skip_gram_pairs: Vec<(usize, usize)>,
    edges: Vec<(usize, usize)>,
    anchors: Vec<(usize, Vec<usize>)>,
    word_sampler: IndexSampler,
    entity_sampler: IndexSampler,
    epochs_done: usize,
}

impl NeeTrainer {
    pub fn new(kb: &KnowledgeBase, config: &NeeConfig, seed: u64) -> Result<Self> {
        kb.validate()?;
        config.validate(kb)?;
        let words = kb.words();
        if words.len() < config.sigmoid_negatives + 2 {
            return Err(Error::Config("word vocabulary smaller than sigmoid_negatives + 2".into()));
        }
        let word_index = index_of(&words, "word")?;
        let entity_index = kb.entity_index()?;
        let d = config.dim;

        let mut skip_gram_pairs = Vec::new();
        let mut word_counts = vec![0.0; words.len()];
        for sentence in &kb.word_corpus {
            let ids: Vec<usize> = sentence.iter().map(|w| word_index[w]).collect();
            for (i, &c) in ids.iter().enumerate() {
                word_counts[c] += 1.0;
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window + 1).min(ids.len());
                for (j, &t) in ids.iter().enumerate().take(hi).skip(lo) {
                    if j != i {
                        skip_gram_pairs.push((c, t));
                    }
                }
            }
        }
        let mut edges = Vec::new();
        for (a, b) in &kb.edges {
            let (a, b) = (entity_index[a.as_str()], entity_index[b.as_str()]);
            edges.push((a, b));
            edges.push((b, a));
        }
        let mut entity_counts = vec![0.0; kb.entities.len()];
        let anchors: Vec<(usize, Vec<usize>)> = kb
            .anchors
            .iter()
            .map(|a| {
                let e = entity_index[a.entity.as_str()];
                entity_counts[e] += 1.0;
                for w in &a.context {
                    word_counts[word_index[w]] += 1.0;
                }
                (e, a.context.iter().map(|w| word_index[w]).collect())
            })
            .collect();
        if anchors.is_empty() {
            return Err(Error::Input("knowledge base has no anchors".into()));
        }

        let word_sampler = IndexSampler::weighted(&word_counts.iter().map(|c| math::pow(*c, 0.75)).collect::<Vec<_>>());
        let entity_sampler = match config.negative_sampling {
            NegativeSampling::Uniform => IndexSampler::uniform(kb.entities.len()),
            NegativeSampling::Unigram => {
                // unseen entities keep a floor so every one stays drawable
                let w: Vec<f64> = entity_counts.iter().map(|c| math::pow(c + 1.0, 0.75)).collect();
                IndexSampler::weighted(&w)
            }
        };

        let mut init = rng::derived(seed, 1);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng::normal(&mut init) * config.init_scale).collect() };
        let params = Params {
            word_in: draw(words.len() * d),
            word_out: draw(words.len() * d),
            entity_in: draw(kb.entities.len() * d),
            entity_out: draw(kb.entities.len() * d),
            weight: {
                let mut w = draw(d * d);
                for i in 0..d {
                    w[i * d + i] += 1.0;
                }
                w
            },
            bias: vec![0.0; d],
        };
        let grads = params.zeros_like();
        let adam = AdamState::with_moments(
            AdamConfig { learning_rate: config.learning_rate, ..Default::default() },
            params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        );
        Ok(NeeTrainer {
            config: config.clone(),
            words,
            entities: kb.entities.clone(),
            params,
            grads,
            adam,
            rng: rng::derived(seed, 2),
            skip_gram_pairs,
            edges,
            anchors,
            word_sampler,
            entity_sampler,
            epochs_done: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    fn sigmoid_item(&self, rng: &mut SeededRng, source: usize, target: usize, entity_targets: bool) -> SigmoidItem {
        let sampler = if entity_targets { &self.entity_sampler } else { &self.word_sampler };
        let negatives = sampler.draw_distinct(rng, self.config.sigmoid_negatives, &[target, source]);
        SigmoidItem { source, target, negatives }
    }

    fn nep_item(&self, rng: &mut SeededRng, anchor: usize) -> NepItem {
        let (e, ctx) = &self.anchors[anchor];
        NepItem {
            context: ctx.iter().map(|w| Some(*w)).collect(),
            positive: *e,
            negatives: self.entity_sampler.draw_distinct(rng, self.config.nep_negatives, &[*e]),
        }
    }

    fn make_batch(&self, rng: &mut SeededRng, anchor_ids: &[usize]) -> NeeBatch {
        let mut batch = NeeBatch::default();
        let k = anchor_ids.len();
        for _ in 0..k {
            if !self.skip_gram_pairs.is_empty() {
                let (c, t) = self.skip_gram_pairs[rng.random_range(0..self.skip_gram_pairs.len())];
                let item = self.sigmoid_item(rng, c, t, false);
                batch.skip_gram.push(item);
            }
            if !self.edges.is_empty() {
                let (a, b) = self.edges[rng.random_range(0..self.edges.len())];
                let item = self.sigmoid_item(rng, a, b, true);
                batch.graph.push(item);
            }
        }
        for &a in anchor_ids {
            let (e, ctx) = &self.anchors[a];
            for &w in ctx {
                let negatives = self.word_sampler.draw_distinct(rng, self.config.sigmoid_negatives, &[w]);
                batch.anchor.push(SigmoidItem { source: *e, target: w, negatives });
            }
            batch.nep.push(self.nep_item(rng, a));
        }
        batch
    }

    /// A fixed evaluation batch over every anchor, drawn from `seed`.
    pub fn probe(&self, seed: u64) -> NeeBatch {
        let mut rng = rng::seeded(seed);
        let ids: Vec<usize> = (0..self.anchors.len()).collect();
        self.make_batch(&mut rng, &ids)
    }

    /// Per-objective losses on a fixed batch.
    pub fn objective_losses(&self, batch: &NeeBatch) -> [f64; 4] {
        batch_loss(&self.params, batch, self.config.objective_weights, self.config.dim, None)
    }

    /// One pass over the anchors in shuffled mini-batches; returns the
    /// mean batch losses.
    pub fn epoch(&mut self) -> Result<[f64; 4]> {
        let mut order: Vec<usize> = (0..self.anchors.len()).collect();
        let mut rng = self.rng.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch = self.make_batch(&mut rng, chunk);
            self.grads.fill_zero();
            let losses = batch_loss(
                &self.params,
                &batch,
                self.config.objective_weights,
                self.config.dim,
                Some(&mut self.grads),
            );
            if losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::Numerical {
                    step: self.adam.step_count,
                    message: format!("non-finite NEE loss {losses:?}"),
                });
            }
            let [pw_in, pw_out, pe_in, pe_out, pw, pb] = self.params.tensors_mut();
            let [gw_in, gw_out, ge_in, ge_out, gw, gb] = self.grads.tensors();
            self.adam.step_slices(&mut [
                (pw_in, gw_in),
                (pw_out, gw_out),
                (pe_in, ge_in),
                (pe_out, ge_out),
                (pw, gw),
                (pb, gb),
            ])?;
            for (s, l) in sums.iter_mut().zip(losses) {
                *s += l;
            }
            steps += 1;
        }
        self.rng = rng;
        self.epochs_done += 1;
        Ok(sums.map(|s| s / steps as f64))
    }

    pub fn table(&self) -> Result<JointEmbeddingTable> {
        let mut table = JointEmbeddingTable::new(self.words.clone(), self.entities.clone(), self.config.dim)?;
        table.word_vectors.clone_from(&self.params.word_in);
        table.entity_vectors.clone_from(&self.params.entity_in);
        table.nep_weight.clone_from(&self.params.weight);
        table.nep_bias.clone_from(&self.params.bias);
        Ok(table)
    }
}

/// Train the joint table for `config.epochs` epochs.
pub fn train_joint(kb: &KnowledgeBase, config: &NeeConfig, seed: u64) -> Result<JointEmbeddingTable> {
    train_joint_logged(kb, config, seed).map(|(t, _)| t)
}

pub fn train_joint_logged(
    kb: &KnowledgeBase,
    config: &NeeConfig,
    seed: u64,
) -> Result<(JointEmbeddingTable, NeeTrainingLog)> {
    let mut trainer = NeeTrainer::new(kb, config, seed)?;
    let mut log = NeeTrainingLog::default();
    for _ in 0..config.epochs {
        log.epoch_losses.push(trainer.epoch()?);
    }
    Ok((trainer.table()?, log))
}

/// Score each anchor against `n_neg` uniform negatives.
pub fn evaluate_nep(
    table: &JointEmbeddingTable,
    kb: &KnowledgeBase,
    anchors: &[Anchor],
    n_neg: usize,
    seed: u64,
) -> Result<Vec<NepOutcome>> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let negatives = sample_negatives(kb, core::slice::from_ref(&a.entity), n_neg, seed.wrapping_add(i as u64))?;
            let v_t = text_vector(&a.context, table)?;
            let scores = candidate_scores(table, &v_t, &a.entity, &negatives)?;
            let rank = 1 + scores[1..].iter().filter(|s| **s > scores[0]).count();
            Ok(NepOutcome {
                positive: a.entity.clone(),
                negatives,
                loss: math::log_sum_exp(&scores) - scores[0],
                rank,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Knowledge bases

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyKbConfig {
    pub entities: usize,
    pub clusters: usize,
    pub topic_words: usize,
    pub signature_words: usize,
    pub filler_words: usize,
    pub anchors_per_entity: usize,
    pub held_out_per_entity: usize,
    pub context_len: usize,
    pub edges_per_entity: usize,
    pub sentences_per_cluster: usize,
}

impl Default for ToyKbConfig {
    fn default() -> Self {
        ToyKbConfig {
            entities: 100,
            clusters: 10,
            topic_words: 12,
            signature_words: 3,
            filler_words: 20,
            anchors_per_entity: 8,
            held_out_per_entity: 2,
            context_len: 8,
            edges_per_entity: 3,
            sentences_per_cluster: 20,
        }
    }
}

/// Cluster-structured toy KB plus anchors withheld from training.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyKb {
    pub kb: KnowledgeBase,
    pub held_out: Vec<Anchor>,
}

/// Entities fall into clusters sharing topic words; each entity also owns
/// signature words, so its anchors identify it.
pub fn toy_kb(config: &ToyKbConfig, seed: u64) -> Result<ToyKb> {
    let c = config;
    if c.entities < 2 || c.clusters == 0 || c.clusters > c.entities || c.context_len < 2 || c.signature_words == 0 {
        return Err(Error::Config("toy KB needs ≥2 entities, 1..=entities clusters, context_len ≥ 2 and signature words".into()));
    }
    let mut rng = rng::seeded(seed);
    let entities: Vec<String> = (0..c.entities).map(|i| format!("E{i:03}")).collect();
    let cluster_of = |i: usize| i % c.clusters;
    let topic = |k: usize, j: usize| format!("topic{k}_{j}");
    let signature = |i: usize, j: usize| format!("sig{i}_{j}");
    let filler: Vec<String> = (0..c.filler_words).map(|j| format!("w{j}")).collect();

    let mut edges = BTreeSet::new();
    for i in 0..c.entities {
        let mates: Vec<usize> = (0..c.entities).filter(|&j| j != i && cluster_of(j) == cluster_of(i)).collect();
        for _ in 0..c.edges_per_entity.min(mates.len()) {
            let j = mates[rng.random_range(0..mates.len())];
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let edges = edges.into_iter().map(|(a, b)| (entities[a].clone(), entities[b].clone())).collect();

    let context = |rng: &mut SeededRng, i: usize| -> Vec<String> {
        let k = cluster_of(i);
        let n_sig = (c.context_len / 3).clamp(1, c.signature_words);
        let mut ctx: Vec<String> = (0..n_sig).map(|_| signature(i, rng.random_range(0..c.signature_words))).collect();
        while ctx.len() < c.context_len {
            if c.filler_words > 0 && rng.random_bool(0.3) {
                ctx.push(filler[rng.random_range(0..c.filler_words)].clone());
            } else {
                ctx.push(topic(k, rng.random_range(0..c.topic_words.max(1))));
            }
        }
        ctx.shuffle(rng);
        ctx
    };
    let mut anchors = Vec::new();
    let mut held_out = Vec::new();
    for i in 0..c.entities {
        for _ in 0..c.anchors_per_entity {
            anchors.push(Anchor { entity: entities[i].clone(), context: context(&mut rng, i) });
        }
        for _ in 0..c.held_out_per_entity {
            held_out.push(Anchor { entity: entities[i].clone(), context: context(&mut rng, i) });
        }
    }
    let mut word_corpus = Vec::new();
    for k in 0..c.clusters {
        let members: Vec<usize> = (0..c.entities).filter(|&i| cluster_of(i) == k).collect();
        for _ in 0..c.sentences_per_cluster {
            let i = members[rng.random_range(0..members.len())];
            word_corpus.push(context(&mut rng, i));
        }
    }
    let kb = KnowledgeBase { entities, edges, anchors, word_corpus };
    kb.validate()?;
    Ok(ToyKb { kb, held_out })
}

/// KB over the linked entities of a corpus. A `1 - coverage` share of
/// entities is left out so lookups exercise the fallback. Anchor contexts
/// are `window` tokens either side of a mention with entity tokens removed.
pub fn kb_from_corpus(samples: &[Sample], coverage: f64, window: usize, seed: u64) -> Result<KnowledgeBase> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::Config(format!("coverage {coverage} outside [0, 1]")));
    }
    let mut all = BTreeSet::new();
    for s in samples {
        for m in s.article.entities.iter().chain(&s.caption.entities) {
            if let Some(id) = &m.entity_id {
                all.insert(id.clone());
            }
        }
    }
    let mut ids: Vec<String> = all.into_iter().collect();
    let mut rng = rng::seeded(seed);
    ids.shuffle(&mut rng);
    let keep = libm::round(coverage * ids.len() as f64) as usize;
    ids.truncate(keep);
    ids.sort();
    let covered: BTreeSet<&str> = ids.iter().map(String::as_str).collect();

    let mut edges = BTreeSet::new();
    let mut anchors = Vec::new();
    let mut word_corpus = Vec::new();
    for s in samples {
        let tokens = &s.article.tokens;
        let mut in_entity = vec![false; tokens.len()];
        for m in &s.article.entities {
            in_entity[m.start..m.end].iter_mut().for_each(|x| *x = true);
        }
        let present: BTreeSet<&str> = s
            .article
            .entities
            .iter()
            .filter_map(|m| m.entity_id.as_deref())
            .filter(|id| covered.contains(id))
            .collect();
        for a in &present {
            for b in &present {
                if a < b {
                    edges.insert((a.to_string(), b.to_string()));
                }
            }
        }
        for m in &s.article.entities {
            let Some(id) = m.entity_id.as_deref().filter(|id| covered.contains(id)) else {
                continue;
            };
            let lo = m.start.saturating_sub(window);
            let hi = (m.end + window).min(tokens.len());
            let context: Vec<String> = (lo..hi).filter(|&i| !in_entity[i]).map(|i| tokens[i].clone()).collect();
            if !context.is_empty() {
                anchors.push(Anchor { entity: id.to_string(), context });
            }
        }
        word_corpus.push(tokens.clone());
    }
    let kb = KnowledgeBase { entities: ids, edges: edges.into_iter().collect(), anchors, word_corpus };
    kb.validate()?;
    Ok(kb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn s(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn table_with(entity_vecs: &[&[f64]], dim: usize) -> JointEmbeddingTable {
        let entities = (0..entity_vecs.len()).map(|i| format!("e{i}")).collect();
        let mut t = JointEmbeddingTable::new(s(&["a", "b"]), entities, dim).unwrap();
        t.word_vectors = (0..2 * dim).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        t.entity_vectors = entity_vecs.iter().flat_map(|v| v.iter().copied()).collect();
        t
    }

    #[test]
    fn text_vector_of_single_word_and_oov() {
        let mut t = table_with(&[&[0.0, 0.0]], 2);
        t.nep_bias = vec![0.5, -0.5];
        assert_eq!(text_vector(&s(&["b"]), &t).unwrap(), vec![0.3 + 0.5, 0.4 - 0.5]);
        assert_eq!(text_vector(&s(&["zzz", "qq"]), &t).unwrap(), vec![0.5, -0.5]);
        assert!(matches!(text_vector(&[], &t), Err(Error::Input(_))));
    }

    #[test]
    fn symmetric_candidates_split_mass() {
        let t = table_with(&[&[1.0, 2.0], &[1.0, 2.0]], 2);
        let p = nep_probability("e0", &s(&["a"]), &s(&["e1"]), &t).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        let vecs: Vec<&[f64]> = vec![&[0.3, -0.2]; 51];
        let t = table_with(&vecs, 2);
        let negs: Vec<String> = (1..51).map(|i| format!("e{i}")).collect();
        let p = nep_probability("e0", &s(&["a", "b"]), &negs, &t).unwrap();
        assert!((p - 1.0 / 51.0).abs() < 1e-12);
    }

    #[test]
    fn positive_among_negatives_is_contract_error() {
        let t = table_with(&[&[1.0, 0.0], &[0.0, 1.0]], 2);
        let r = nep_probability("e0", &s(&["a"]), &s(&["e1", "e0"]), &t);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn full_softmax_matches_direct_sum() {
        let mut rng = rng::seeded(3);
        let d = 4;
        let vecs: Vec<Vec<f64>> = (0..10).map(|_| (0..d).map(|_| rng::normal(&mut rng)).collect()).collect();
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        let mut t = table_with(&refs, d);
        t.nep_weight = (0..d * d).map(|_| rng::normal(&mut rng) * 0.5).collect();
        let ctx = s(&["a", "b", "a", "oov"]);
        // oracle: naive exponentials of v_e . (mean @ W + b)
        let mut mean = [0.0; 4];
        for w in &ctx {
            if let Some(v) = t.word_vector(w) {
                for k in 0..d {
                    mean[k] += v[k] / ctx.len() as f64;
                }
            }
        }
        let v_t: Vec<f64> = (0..d).map(|j| (0..d).map(|i| mean[i] * t.nep_weight[i * d + j]).sum::<f64>() + t.nep_bias[j]).collect();
        let exps: Vec<f64> = vecs.iter().map(|v| v.iter().zip(&v_t).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut total = 0.0;
        for i in 0..10 {
            let p = nep_probability_full(&format!("e{i}"), &ctx, &t).unwrap();
            assert!((p - exps[i] / z).abs() < 1e-12);
            total += p;
        }
        assert!((total - 1.0).abs() < 1e-9);
    }

    fn small_kb(n: usize) -> KnowledgeBase {
        KnowledgeBase {
            entities: (0..n).map(|i| format!("e{i}")).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn negatives_forced_and_excluded() {
        let kb = small_kb(51);
        let negs = sample_negatives(&kb, &s(&["e7"]), 50, 1).unwrap();
        let set: BTreeSet<_> = negs.iter().collect();
        assert_eq!(set.len(), 50);
        assert!(!set.contains(&"e7".to_string()));
        assert_eq!(negs, sample_negatives(&kb, &s(&["e7"]), 50, 1).unwrap());
        assert!(matches!(sample_negatives(&kb, &s(&["e7"]), 51, 1), Err(Error::Input(_))));
    }

    #[test]
    fn lookup_prefers_stored_vector() {
        let t = table_with(&[&[1.0, 2.0]], 2);
        assert_eq!(lookup_entity(Some("e0"), &[], &t).unwrap(), vec![1.0, 2.0]);
        let ctx = s(&["a", "b"]);
        assert_eq!(lookup_entity(Some("nope"), &ctx, &t).unwrap(), text_vector(&ctx, &t).unwrap());
        assert_eq!(lookup_entity(None, &ctx, &t).unwrap(), text_vector(&ctx, &t).unwrap());
        assert!(matches!(lookup_entity(None, &[], &t), Err(Error::Input(_))));
    }

    #[test]
    fn fallback_context_is_centred_and_clamped() {
        let toks: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        let w = fallback_context(&toks, 50, 52, 10);
        assert_eq!(w.first().unwrap(), "46");
        assert_eq!(w.len(), 10);
        assert_eq!(fallback_context(&toks, 0, 1, 10)[0], "0");
        assert_eq!(fallback_context(&toks, 98, 100, 10)[0], "90");
        assert_eq!(fallback_context(&toks[..5], 0, 1, 10).len(), 5);
    }

    #[test]
    fn config_rejects_too_many_negatives() {
        let kb = toy_kb(&ToyKbConfig { entities: 20, clusters: 4, ..Default::default() }, 0).unwrap().kb;
        let cfg = NeeConfig { nep_negatives: 20, dim: 8, ..Default::default() };
        assert!(matches!(NeeTrainer::new(&kb, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn kb_validation_catches_unknown_entities() {
        let mut kb = small_kb(3);
        kb.edges.push(("e0".into(), "e9".into()));
        assert!(matches!(kb.validate(), Err(Error::Validation { .. })));
        let mut kb = small_kb(3);
        kb.anchors.push(Anchor { entity: "e1".into(), context: vec![] });
        assert!(kb.validate().is_err());
    }

    fn tiny_trainer() -> (NeeTrainer, NeeBatch) {
        let cfg = ToyKbConfig {
            entities: 12,
            clusters: 3,
            topic_words: 4,
            signature_words: 2,
            filler_words: 3,
            anchors_per_entity: 2,
            held_out_per_entity: 0,
            context_len: 4,
            edges_per_entity: 2,
            sentences_per_cluster: 3,
        };
        let kb = toy_kb(&cfg, 5).unwrap().kb;
        let nee = NeeConfig { dim: 5, nep_negatives: 6, sigmoid_negatives: 3, batch_size: 4, ..Default::default() };
        let trainer = NeeTrainer::new(&kb, &nee, 9).unwrap();
        let mut rng = rng::seeded(1);
        let batch = trainer.make_batch(&mut rng, &[0, 3, 5]);
        (trainer, batch)
    }

    #[test]
    fn hand_gradients_match_finite_differences() {
        let (trainer, batch) = tiny_trainer();
        let d = trainer.config.dim;
        let weights = [0.7, 1.3, 0.9, 1.1];
        let mut grads = trainer.params.zeros_like();
        batch_loss(&trainer.params, &batch, weights, d, Some(&mut grads));
        let total = |p: &Params| -> f64 {
            let l = batch_loss(p, &batch, weights, d, None);
            l.iter().zip(weights).map(|(l, w)| l * w).sum()
        };
        let mut summary = gradcheck::GradCheck { checked: 0, passed: 0, max_rel_error: 0.0 };
        for k in 0..6 {
            let base = trainer.params.tensors()[k].clone();
            let analytic = grads.tensors()[k].clone();
            let r = gradcheck::check(&base, &analytic, 1e-5, 1e-4, None, |x| {
                let mut p = trainer.params.clone();
                p.tensors_mut()[k].copy_from_slice(x);
                total(&p)
            });
            summary.merge(&r);
        }
        assert!(summary.pass_fraction() >= 0.99, "{summary:?}");
    }

    #[test]
    fn every_objective_drops_in_first_epoch() {
        let toy = toy_kb(&ToyKbConfig { entities: 40, clusters: 5, ..Default::default() }, 2).unwrap();
        let cfg = NeeConfig { dim: 32, nep_negatives: 20, ..Default::default() };
        let mut trainer = NeeTrainer::new(&toy.kb, &cfg, 4).unwrap();
        let probe = trainer.probe(77);
        let before = trainer.objective_losses(&probe);
        trainer.epoch().unwrap();
        let after = trainer.objective_losses(&probe);
        for k in 0..4 {
            assert!(after[k] < before[k], "{}: {} -> {}", OBJECTIVES[k], before[k], after[k]);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let toy = toy_kb(&ToyKbConfig { entities: 20, clusters: 4, ..Default::default() }, 2).unwrap();
        let cfg = NeeConfig { dim: 8, nep_negatives: 10, epochs: 2, ..Default::default() };
        assert_eq!(train_joint(&toy.kb, &cfg, 1).unwrap(), train_joint(&toy.kb, &cfg, 1).unwrap());
    }

    #[test]
    fn unigram_sampling_trains() {
        let toy = toy_kb(&ToyKbConfig { entities: 20, clusters: 4, ..Default::default() }, 2).unwrap();
        let cfg = NeeConfig {
            dim: 8,
            nep_negatives: 10,
            epochs: 1,
            negative_sampling: NegativeSampling::Unigram,
            ..Default::default()
        };
        let (_, log) = train_joint_logged(&toy.kb, &cfg, 1).unwrap();
        assert!(log.epoch_losses[0].iter().all(|l| l.is_finite()));
    }

    #[test]
    fn corpus_kb_covers_requested_share() {
        let cfg = crate::corpus::GeneratorConfig::default();
        let samples = crate::corpus::synth_generate(&cfg, 30, 3).unwrap();
        let full = kb_from_corpus(&samples, 1.0, 4, 0).unwrap();
        let half = kb_from_corpus(&samples, 0.5, 4, 0).unwrap();
        assert_eq!(half.entities.len(), (full.entities.len() as f64 * 0.5).round() as usize);
        assert!(!full.anchors.is_empty() && !full.edges.is_empty());
        let known: BTreeSet<_> = half.entities.iter().collect();
        assert!(half.anchors.iter().all(|a| known.contains(&a.entity)));
    }
}
