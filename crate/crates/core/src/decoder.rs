//! The template-guided hybrid decoder, training and generation.
//!
//! Three shared blocks feed five component-specific subblocks (who, when,
//! where, misc, context). Their outputs are mixed as
//! `u_bar = (1/5) * sum_i alpha_i * u4_i` before the output network.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{Sample, Vocabulary};
use crate::encoder::{entity_features, Dropout, EncodedSample, EncodedVars, Encoder, EncoderInput, ModelConfig, ZeroOut};
use crate::nee::JointEmbeddingTable;
use crate::nn::{Activation, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::optim::{clip_grad_norm, AdamConfig, AdamState};
use crate::rng::{self, SeededRng};
use crate::taxonomy::ComponentVector;
use crate::{math, Error, Result};

/// Pre-norm block: causal self-attention, three cross-attentions fused by
/// concatenation and projection, then a feed-forward network.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    /// Over image, text and entity streams, in that order.
    pub cross: [MultiHeadAttention; 3],
    pub fusion: Linear,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

const STREAMS: [&str; 3] = ["image", "text", "entities"];

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = c.d_model;
        let mut mha = |suffix: &str, rng: &mut R| MultiHeadAttention::new(store, &format!("{name}.{suffix}"), d, c.num_heads, rng);
        let self_attn = mha("self_attn", rng)?;
        let cross = [mha("cross_image", rng)?, mha("cross_text", rng)?, mha("cross_entities", rng)?];
        Ok(DecoderBlock {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
            self_attn,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
            cross,
            fusion: Linear::new(store, &format!("{name}.fusion"), 3 * d, d, rng)?,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), d)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, c.ff_width, c.activation, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: Var,
        enc: &EncodedVars,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let d = self.fusion.out_dim;
        for (name, v) in STREAMS.iter().zip([enc.image, enc.text, enc.entities]) {
            let (rows, cols) = g.dims(v);
            if cols != d || rows == 0 {
                return Err(Error::Dimension(format!(
                    "{name} stream has shape {:?}, expected [n >= 1, {d}]",
                    g.shape(v)
                )));
            }
        }
        let n = self.self_norm.forward(g, store, prev)?;
        let a = self.self_attn.forward(g, store, n, n, true)?;
        let a = drop.apply(g, a);
        let h = g.add(prev, a)?;
        let n = self.cross_norm.forward(g, store, h)?;
        let mut parts = Vec::with_capacity(3);
        for (attn, kv) in self.cross.iter().zip([enc.image, enc.text, enc.entities]) {
            parts.push(attn.forward(g, store, n, kv, false)?);
        }
        let joined = g.concat_cols(&parts)?;
        let f = self.fusion.forward(g, store, joined)?;
        let f = drop.apply(g, f);
        let h = g.add(h, f)?;
        let n = self.ff_norm.forward(g, store, h)?;
        let f = self.ff.forward(g, store, n)?;
        let f = drop.apply(g, f);
        g.add(h, f)
    }
}

/// A component-specific fourth block with its own closing norm.
#[derive(Debug, Clone)]
pub struct Subblock {
    pub block: DecoderBlock,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct HybridDecoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub shared: Vec<DecoderBlock>,
    /// Exactly five, in component order.
    pub subblocks: Vec<Subblock>,
    pub out_hidden: Linear,
    pub out_proj: Linear,
    pub activation: Activation,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl HybridDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, c: &ModelConfig, rng: &mut R) -> Result<Self> {
        c.validate()?;
        let std = 1.0 / libm::sqrt(c.d_model as f64);
        let max_positions = c.max_caption_len + 1;
        let token_embedding = store.add("decoder.token_embedding", Tensor::normal(&[c.vocab_size, c.d_model], std, rng))?;
        let position_embedding =
            store.add("decoder.position_embedding", Tensor::normal(&[max_positions, c.d_model], std, rng))?;
        let shared = (0..c.shared_blocks)
            .map(|i| DecoderBlock::new(store, &format!("decoder.block{}", i + 1), c, rng))
            .collect::<Result<Vec<_>>>()?;
        let subblocks = crate::taxonomy::Component::ALL
            .iter()
            .map(|comp| {
                let name = format!("decoder.block4_{}", comp.as_str());
                Ok(Subblock {
                    block: DecoderBlock::new(store, &name, c, rng)?,
                    norm: LayerNorm::new(store, &format!("{name}.final_norm"), c.d_model)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HybridDecoder {
            token_embedding,
            position_embedding,
            shared,
            subblocks,
            out_hidden: Linear::new(store, "decoder.out_hidden", c.d_model, c.ff_width, rng)?,
            out_proj: Linear::new(store, "decoder.out_proj", c.ff_width, c.vocab_size, rng)?,
            activation: c.activation,
            max_positions,
            vocab_size: c.vocab_size,
        })
    }

    /// `u4_i` for every subblock, each `[n, d_model]`.
    pub fn component_outputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedVars,
        input_ids: &[usize],
        drop: &mut Dropout,
    ) -> Result<Vec<Var>> {
        if input_ids.is_empty() || input_ids.len() > self.max_positions {
            return Err(Error::Input(format!(
                "decoder input of {} tokens; allowed 1..={}",
                input_ids.len(),
                self.max_positions
            )));
        }
        if let Some(bad) = input_ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = g.param(store, self.token_embedding);
        let tok = g.gather_rows(table, input_ids)?;
        let positions: Vec<usize> = (0..input_ids.len()).collect();
        let pos_table = g.param(store, self.position_embedding);
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut u = g.add(tok, pos)?;
        u = drop.apply(g, u);
        for block in &self.shared {
            u = block.forward(g, store, u, enc, drop)?;
        }
        self.subblocks
            .iter()
            .map(|s| {
                let x = s.block.forward(g, store, u, enc, drop)?;
                s.norm.forward(g, store, x)
            })
            .collect()
    }

    /// Logits `[n, K]` of the output network applied to `u_bar`.
    pub fn output_logits(&self, g: &mut Graph, store: &ParamStore, u_bar: Var) -> Result<Var> {
        let h = self.out_hidden.forward(g, store, u_bar)?;
        let h = match self.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        self.out_proj.forward(g, store, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncodedVars,
        input_ids: &[usize],
        alpha: &ComponentVector,
        drop: &mut Dropout,
    ) -> Result<Var> {
        alpha.check_range()?;
        let outs = self.component_outputs(g, store, enc, input_ids, drop)?;
        let u_bar = mix(g, &outs, alpha)?;
        self.output_logits(g, store, u_bar)
    }
}

/// `(1/5) * sum_i alpha_i * u_i`.
pub fn mix(g: &mut Graph, outs: &[Var], alpha: &ComponentVector) -> Result<Var> {
    if outs.len() != 5 {
        return Err(Error::Dimension(format!("expected 5 subblock outputs, got {}", outs.len())));
    }
    let mut acc: Option<Var> = None;
    for (u, a) in outs.iter().zip(alpha.0) {
        let term = g.scale(*u, a / 5.0);
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(acc.expect("five terms"))
}

/// Encoder, decoder and their parameters.
#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: HybridDecoder,
}

impl CaptionModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::derived(seed, 11);
        let encoder = Encoder::new(&mut store, config, &mut rng)?;
        let decoder = HybridDecoder::new(&mut store, config, &mut rng)?;
        Ok(CaptionModel { config: config.clone(), store, encoder, decoder })
    }

    pub fn encode(&self, sample: &PreparedSample, zero_out: ZeroOut) -> Result<EncodedSample> {
        self.encoder.encode_sample(&self.store, &sample.input, zero_out)
    }
}

/// A sample converted to ids and entity features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub input: EncoderInput,
    /// Caption ids without begin/end markers.
    pub caption_ids: Vec<usize>,
    pub gold: [bool; 5],
}

impl PreparedSample {
    /// `<bos> y_1 .. y_n` and `y_1 .. y_n <eos>`.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut input = vec![Vocabulary::BOS_ID];
        input.extend_from_slice(&self.caption_ids);
        let mut target: Vec<Option<usize>> = self.caption_ids.iter().map(|&i| Some(i)).collect();
        target.push(Some(Vocabulary::EOS_ID));
        (input, target)
    }

    pub fn gold_alpha(&self) -> ComponentVector {
        ComponentVector::from_flags(self.gold)
    }
}

/// Ids, entity features and gold flags for one sample. Captions longer
/// than `max_caption_len` are truncated.
pub fn prepare(
    sample: &Sample,
    vocab: &Vocabulary,
    table: &JointEmbeddingTable,
    config: &ModelConfig,
) -> Result<PreparedSample> {
    if sample.caption.tokens.is_empty() {
        return Err(Error::Input(format!("sample `{}` has an empty caption", sample.id())));
    }
    let mut caption_ids = vocab.encode(&sample.caption.tokens);
    caption_ids.truncate(config.max_caption_len);
    Ok(PreparedSample {
        id: sample.id().into(),
        input: EncoderInput {
            image: sample.image_feature.clone(),
            article_ids: vocab.encode(&sample.article.tokens),
            entity_features: entity_features(&sample.article, table)?,
        },
        caption_ids,
        gold: sample.caption.gold_components,
    })
}

pub fn prepare_all(
    samples: &[Sample],
    vocab: &Vocabulary,
    table: &JointEmbeddingTable,
    config: &ModelConfig,
) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare(s, vocab, table, config)).collect()
}

/// Next-token distribution after `prefix` (which starts with `<bos>`).
pub fn decode_step(
    model: &CaptionModel,
    prefix: &[usize],
    alpha: &ComponentVector,
    encoded: &EncodedSample,
) -> Result<Vec<f64>> {
    let mut logp = step_log_probs(model, prefix, alpha, encoded)?;
    logp.iter_mut().for_each(|l| *l = math::exp(*l));
    Ok(logp)
}

fn step_log_probs(
    model: &CaptionModel,
    prefix: &[usize],
    alpha: &ComponentVector,
    encoded: &EncodedSample,
) -> Result<Vec<f64>> {
    alpha.check_range()?;
    let mut g = Graph::new();
    let enc = encoded.load(&mut g);
    let outs = model.decoder.component_outputs(&mut g, &model.store, &enc, prefix, &mut Dropout::off())?;
    let last: Vec<Var> = outs
        .iter()
        .map(|u| g.slice_rows(*u, prefix.len() - 1, 1))
        .collect::<Result<_>>()?;
    let u_bar = mix(&mut g, &last, alpha)?;
    let logits = model.decoder.output_logits(&mut g, &model.store, u_bar)?;
    let row = g.value(logits);
    let lse = math::log_sum_exp(row);
    Ok(row.iter().map(|x| x - lse).collect())
}

/// Teacher-forced mean negative log-likelihood over caption positions,
/// end token included.
pub fn sequence_nll(model: &CaptionModel, sample: &PreparedSample, alpha: &ComponentVector) -> Result<f64> {
    let mut g = Graph::new();
    let enc = model.encoder.encode(&mut g, &model.store, &sample.input, ZeroOut::None, &mut Dropout::off())?;
    let (input, target) = sample.teacher_forcing();
    let logits = model.decoder.forward(&mut g, &model.store, &enc, &input, alpha, &mut Dropout::off())?;
    let loss = g.cross_entropy(logits, &target)?;
    Ok(g.scalar(loss))
}

/// Share of caption positions (end token included) where the gold-alpha
/// argmax equals the target.
pub fn teacher_forced_accuracy(model: &CaptionModel, samples: &[PreparedSample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let mut g = Graph::new();
        let enc = model.encoder.encode(&mut g, &model.store, &s.input, ZeroOut::None, &mut Dropout::off())?;
        let (input, target) = s.teacher_forcing();
        let logits = model.decoder.forward(&mut g, &model.store, &enc, &input, &s.gold_alpha(), &mut Dropout::off())?;
        let k = model.config.vocab_size;
        for (i, t) in target.iter().enumerate() {
            let row = &g.value(logits)[i * k..(i + 1) * k];
            hit += usize::from(Some(argmax(row)) == *t);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Weight of the component-head loss.
    pub lambda_c: f64,
    /// Stop component-loss gradients at the encoder outputs.
    pub detach_component_head: bool,
    /// Global gradient-norm cap; zero disables clipping.
    pub clip_norm: f64,
    /// Validation interval in steps; the last step is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 8,
            adam: AdamConfig::default(),
            lambda_c: 1.0,
            detach_component_head: false,
            clip_norm: 1.0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lambda_c >= 0.0) || !(self.clip_norm >= 0.0) || !(self.adam.learning_rate > 0.0) {
            return Err(Error::Config("lambda_c and clip_norm must be non-negative, learning rate positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub history: Vec<TrainPoint>,
}

/// Caption NLL (gold alpha) plus `lambda_c` times the component BCE, as a
/// graph node; returns `(total, nll, bce)`.
pub fn joint_loss(
    g: &mut Graph,
    model: &CaptionModel,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    drop: &mut Dropout,
) -> Result<(Var, f64, f64)> {
    let store = &model.store;
    let enc = model.encoder.encode(g, store, &sample.input, ZeroOut::None, drop)?;
    let (input, target) = sample.teacher_forcing();
    let logits = model.decoder.forward(g, store, &enc, &input, &sample.gold_alpha(), drop)?;
    let nll = g.cross_entropy(logits, &target)?;
    let nll_value = g.scalar(nll);
    if cfg.lambda_c == 0.0 {
        return Ok((nll, nll_value, 0.0));
    }
    let head_in = if cfg.detach_component_head {
        let mut freeze = |v: Var| {
            let t = Tensor::new(g.shape(v).to_vec(), g.value(v).to_vec()).expect("graph shape");
            g.constant(&t)
        };
        EncodedVars { image: freeze(enc.image), text: freeze(enc.text), entities: freeze(enc.entities) }
    } else {
        enc
    };
    let probs = model.encoder.predict_components(g, store, &head_in)?;
    let targets = sample.gold.map(|b| if b { 1.0 } else { 0.0 });
    let bce = g.binary_cross_entropy(probs, &targets)?;
    let bce_value = g.scalar(bce);
    let weighted = g.scale(bce, cfg.lambda_c);
    Ok((g.add(nll, weighted)?, nll_value, bce_value))
}

/// Mean training objective without dropout.
pub fn mean_loss(model: &CaptionModel, samples: &[PreparedSample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let (loss, _, _) = joint_loss(&mut g, model, s, cfg, &mut Dropout::off())?;
        total += g.scalar(loss);
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch Adam on the joint objective. With a validation set, the
/// parameters with the lowest validation loss are kept; otherwise the
/// final parameters are.
pub fn train(
    model: &mut CaptionModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, seed, &mut |_, _| Ok(false))
}

/// As [`train`], calling `on_eval` after every evaluation; training stops
/// early once it returns `true`.
pub fn train_with(
    model: &mut CaptionModel,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    cfg: &TrainConfig,
    seed: u64,
    on_eval: &mut dyn FnMut(&CaptionModel, &TrainPoint) -> Result<bool>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let mut adam = AdamState::new(cfg.adam, &model.store);
    let mut order_rng = rng::derived(seed, 21);
    let mut drop_rng = rng::derived(seed, 22);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut report = TrainReport { best_val_loss: f64::INFINITY, ..Default::default() };
    let mut best: Option<ParamStore> = None;
    let mut window = (0.0, 0usize);

    for step in 1..=cfg.steps {
        model.store.zero_grad();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let sample = &train_set[order[cursor]];
            cursor += 1;
            let mut drop = Dropout::train(model.config.dropout, SeededRng::from_rng(&mut drop_rng));
            let mut g = Graph::new();
            let (loss, _, _) = joint_loss(&mut g, model, sample, cfg, &mut drop)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numerical { step: step as u64, message: format!("loss {value} on `{}`", sample.id) });
            }
            batch_loss += value;
            let scaled = g.scale(loss, 1.0 / cfg.batch_size.min(train_set.len()) as f64);
            g.backward(scaled)?;
            g.accumulate_param_grads(&mut model.store)?;
        }
        if cfg.clip_norm > 0.0 {
            let norm = clip_grad_norm(&mut model.store, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical { step: step as u64, message: "non-finite gradient norm".into() });
            }
        }
        adam.step(&mut model.store)?;
        window.0 += batch_loss / cfg.batch_size.min(train_set.len()) as f64;
        window.1 += 1;

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let train_loss = window.0 / window.1 as f64;
            window = (0.0, 0);
            let val_loss = if val_set.is_empty() { train_loss } else { mean_loss(model, val_set, cfg)? };
            let point = TrainPoint { step, train_loss, val_loss };
            report.history.push(point);
            report.steps = step;
            if val_loss < report.best_val_loss || val_set.is_empty() {
                report.best_val_loss = val_loss;
                report.best_step = step;
                if !val_set.is_empty() {
                    best = Some(model.store.clone());
                }
            }
            if on_eval(model, &point)? {
                break;
            }
        }
    }
    if let Some(mut store) = best {
        store.zero_grad();
        model.store = store;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Gold components of the reference caption.
    #[default]
    Oracle,
    /// Predicted probabilities used as continuous weights.
    Auto,
    Manual(ComponentVector),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Search {
    #[default]
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub alpha_mode: AlphaMode,
    pub search: Search,
    /// Generated tokens, end token included.
    pub max_length: usize,
    pub zero_out: ZeroOut,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { alpha_mode: AlphaMode::Oracle, search: Search::Greedy, max_length: 32, zero_out: ZeroOut::None }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Search::Beam(0) = self.search {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be positive".into()));
        }
        if let AlphaMode::Manual(a) = self.alpha_mode {
            a.check_range().map_err(|e| Error::Config(format!("{e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Caption ids without the end token.
    pub ids: Vec<usize>,
    pub alpha: ComponentVector,
    /// Mean log-probability per generated token.
    pub score: f64,
}

/// Caption for one sample under `cfg`.
pub fn generate(model: &CaptionModel, sample: &PreparedSample, cfg: &GenerationConfig) -> Result<Generation> {
    cfg.validate()?;
    let encoded = model.encode(sample, cfg.zero_out)?;
    let alpha = match cfg.alpha_mode {
        AlphaMode::Oracle => sample.gold_alpha(),
        AlphaMode::Auto => encoded.alpha_pred,
        AlphaMode::Manual(a) => a,
    };
    // the decoder sees at most max_caption_len + 1 inputs
    let max_length = cfg.max_length.min(model.decoder.max_positions);
    let mut step = |prefix: &[usize]| step_log_probs(model, prefix, &alpha, &encoded);
    let (ids, score) = match cfg.search {
        Search::Greedy => greedy_search(max_length, Vocabulary::BOS_ID, Vocabulary::EOS_ID, &mut step)?,
        Search::Beam(width) => beam_search(width, max_length, Vocabulary::BOS_ID, Vocabulary::EOS_ID, &mut step)?,
    };
    let ids = ids.into_iter().filter(|&i| i != Vocabulary::EOS_ID).collect();
    Ok(Generation { ids, alpha, score })
}

/// Argmax decoding (lowest id wins ties). Returns the tokens after
/// `bos`, end token included when produced, and the mean log-probability.
pub fn greedy_search(
    max_length: usize,
    bos: usize,
    eos: usize,
    step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<(Vec<usize>, f64)> {
    let mut seq = vec![bos];
    let mut total = 0.0;
    while seq.len() <= max_length {
        let logp = step(&seq)?;
        let next = argmax(&logp);
        total += logp[next];
        seq.push(next);
        if next == eos {
            break;
        }
    }
    let n = (seq.len() - 1) as f64;
    Ok((seq.split_off(1), total / n))
}

/// Beam search. Each step keeps the `width` best expansions of the live
/// beams by summed log-probability; those ending in `eos` move to the
/// finished pool. The result maximises mean log-probability among
/// finished hypotheses (live ones count once `max_length` is reached).
pub fn beam_search(
    width: usize,
    max_length: usize,
    bos: usize,
    eos: usize,
    step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
) -> Result<(Vec<usize>, f64)> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![bos], 0.0)];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_length {
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (b, (seq, score)) in live.iter().enumerate() {
            let logp = step(seq)?;
            candidates.extend(logp.iter().enumerate().map(|(t, l)| (b, t, score + l)));
        }
        // stable: ties keep beam order, then token order
        candidates.sort_by(|x, y| y.2.total_cmp(&x.2));
        let mut next = Vec::with_capacity(width);
        for (b, t, score) in candidates.into_iter().take(width) {
            let mut seq = live[b].0.clone();
            seq.push(t);
            if t == eos {
                finished.push((seq, score));
            } else {
                next.push((seq, score));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (seq, score) in finished {
        let mean = score / (seq.len() - 1) as f64;
        if best.as_ref().is_none_or(|(_, m)| mean > *m) {
            best = Some((seq, mean));
        }
    }
    let (mut seq, mean) = best.expect("at least one hypothesis");
    Ok((seq.split_off(1), mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Component;

    use crate::gradcheck::{tiny_model_config as tiny_config, tiny_sample};

    fn model() -> CaptionModel {
        CaptionModel::new(&tiny_config(), 3).unwrap()
    }

    #[test]
    fn zero_alpha_gives_input_independent_distribution() {
        let m = model();
        let s = tiny_sample();
        let enc = m.encode(&s, ZeroOut::None).unwrap();
        let a = decode_step(&m, &[1, 5], &ComponentVector::ZERO, &enc).unwrap();
        let mut other = s.clone();
        other.input.image = vec![-2.0; 4];
        let enc2 = m.encode(&other, ZeroOut::None).unwrap();
        let b = decode_step(&m, &[1, 9, 9], &ComponentVector::ZERO, &enc2).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_out_of_range_is_contract_error() {
        let m = model();
        let enc = m.encode(&tiny_sample(), ZeroOut::None).unwrap();
        let bad = ComponentVector([0.0, 1.5, 0.0, 0.0, 0.0]);
        assert!(matches!(decode_step(&m, &[1], &bad, &enc), Err(Error::Contract(_))));
    }

    #[test]
    fn untrained_uniform_logits_give_log_vocab() {
        let mut m = model();
        for name in ["decoder.out_proj.weight", "decoder.out_proj.bias"] {
            let id = m.store.id(name).unwrap();
            m.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let nll = sequence_nll(&m, &tiny_sample(), &ComponentVector([1.0; 5])).unwrap();
        assert!((nll - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_equals_stepwise_cross_entropy() {
        let m = model();
        let s = tiny_sample();
        let alpha = ComponentVector([0.9, 0.1, 0.4, 0.0, 0.7]);
        let enc = m.encode(&s, ZeroOut::None).unwrap();
        let (input, target) = s.teacher_forcing();
        let mut total = 0.0;
        for n in 1..=input.len() {
            let p = decode_step(&m, &input[..n], &alpha, &enc).unwrap();
            total -= p[target[n - 1].unwrap()].ln();
        }
        let nll = sequence_nll(&m, &s, &alpha).unwrap();
        assert!((nll - total / input.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn causal_end_to_end() {
        let m = model();
        let s = tiny_sample();
        let enc = m.encode(&s, ZeroOut::None).unwrap();
        let alpha = s.gold_alpha();
        let full = |ids: &[usize]| {
            let mut g = Graph::new();
            let e = enc.load(&mut g);
            let l = m.decoder.forward(&mut g, &m.store, &e, ids, &alpha, &mut Dropout::off()).unwrap();
            g.value(l).to_vec()
        };
        let a = full(&[1, 5, 7, 9]);
        let b = full(&[1, 5, 8, 3]);
        assert_eq!(a[..2 * 12], b[..2 * 12]);
        assert_ne!(a[2 * 12..3 * 12], b[2 * 12..3 * 12]);
    }

    #[test]
    fn block_reports_bad_stream() {
        let m = model();
        let mut g = Graph::new();
        let prev = g.zeros(&[2, 8]);
        let enc = EncodedVars { image: g.zeros(&[1, 8]), text: g.zeros(&[3, 7]), entities: g.zeros(&[1, 8]) };
        let err = m.decoder.shared[0].forward(&mut g, &m.store, prev, &enc, &mut Dropout::off()).unwrap_err();
        assert!(format!("{err}").contains("text"));
    }

    #[test]
    fn lambda_zero_leaves_head_without_gradient() {
        let mut m = model();
        let cfg = TrainConfig { lambda_c: 0.0, ..Default::default() };
        let mut g = Graph::new();
        let (loss, _, _) = joint_loss(&mut g, &m, &tiny_sample(), &cfg, &mut Dropout::off()).unwrap();
        g.backward(loss).unwrap();
        m.store.zero_grad();
        g.accumulate_param_grads(&mut m.store).unwrap();
        for name in ["head.hidden.weight", "head.out.weight", "head.out.bias"] {
            let id = m.store.id(name).unwrap();
            assert!(m.store.get(id).grad().is_none_or(|g| g.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn detached_head_sends_no_gradient_to_encoder() {
        let m = model();
        let cfg = TrainConfig { detach_component_head: true, ..Default::default() };
        let s = tiny_sample();
        let grads_of = |cfg: &TrainConfig| {
            let mut st = m.store.clone();
            st.zero_grad();
            let mut g = Graph::new();
            let mut mm = m.clone();
            mm.store = st.clone();
            let (loss, _, _) = joint_loss(&mut g, &mm, &s, cfg, &mut Dropout::off()).unwrap();
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut st).unwrap();
            let id = st.id("encoder.image_proj.weight").unwrap();
            st.get(id).grad().unwrap().to_vec()
        };
        let with_head = grads_of(&TrainConfig { lambda_c: 1.0, ..Default::default() });
        let detached = grads_of(&cfg);
        let no_head = grads_of(&TrainConfig { lambda_c: 0.0, ..Default::default() });
        assert_eq!(detached, no_head);
        assert_ne!(with_head, no_head);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let m = model();
        let s = tiny_sample();
        let greedy = generate(&m, &s, &GenerationConfig { max_length: 5, ..Default::default() }).unwrap();
        let beam = generate(&m, &s, &GenerationConfig { max_length: 5, search: Search::Beam(1), ..Default::default() }).unwrap();
        assert_eq!(greedy, beam);
    }

    #[test]
    fn manual_gold_alpha_matches_oracle() {
        let m = model();
        let s = tiny_sample();
        let oracle = generate(&m, &s, &GenerationConfig { max_length: 5, ..Default::default() }).unwrap();
        let manual = GenerationConfig { max_length: 5, alpha_mode: AlphaMode::Manual(s.gold_alpha()), ..Default::default() };
        assert_eq!(oracle, generate(&m, &s, &manual).unwrap());
    }

    /// Exhaustive best mean log-probability over every sequence that ends
    /// in `eos` within `max_len` tokens or reaches `max_len` tokens.
    fn exhaustive(
        max_len: usize,
        eos: usize,
        k: usize,
        step: &mut dyn FnMut(&[usize]) -> Vec<f64>,
    ) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(vec![0usize], 0.0)];
        while let Some((seq, score)) = stack.pop() {
            let logp = step(&seq);
            for t in 0..k {
                let mut s = seq.clone();
                s.push(t);
                let total = score + logp[t];
                if t == eos || s.len() - 1 == max_len {
                    let mean = total / (s.len() - 1) as f64;
                    if mean > best.1 {
                        best = (s[1..].to_vec(), mean);
                    }
                } else {
                    stack.push((s, total));
                }
            }
        }
        best
    }

    fn markov_toy(seed: u64, k: usize, sharp: f64) -> impl FnMut(&[usize]) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        let table: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let logits: Vec<f64> = (0..k).map(|_| rng::normal(&mut r) * sharp).collect();
                let lse = math::log_sum_exp(&logits);
                logits.iter().map(|l| l - lse).collect()
            })
            .collect();
        move |prefix: &[usize]| table[*prefix.last().unwrap()].clone()
    }

    #[test]
    fn unpruned_beam_equals_exhaustive_search() {
        for seed in 0..20 {
            let mut toy = markov_toy(seed, 5, 1.0);
            let (seq, score) = exhaustive(4, 1, 5, &mut toy);
            let mut step = |p: &[usize]| Ok(toy(p));
            let (beam_seq, beam_score) = beam_search(625, 4, 0, 1, &mut step).unwrap();
            assert_eq!(beam_seq, seq);
            assert!((beam_score - score).abs() < 1e-12);
        }
    }

    #[test]
    fn width_four_beam_matches_exhaustive_on_five_token_toy() {
        let mut toy = markov_toy(7, 5, 2.0);
        let (seq, score) = exhaustive(4, 1, 5, &mut toy);
        let mut step = |p: &[usize]| Ok(toy(p));
        let (beam_seq, beam_score) = beam_search(4, 4, 0, 1, &mut step).unwrap();
        assert_eq!(beam_seq, seq);
        assert!((beam_score - score).abs() < 1e-12);
    }

    #[test]
    fn generation_config_validation() {
        assert!(GenerationConfig { search: Search::Beam(0), ..Default::default() }.validate().is_err());
        let bad = GenerationConfig { alpha_mode: AlphaMode::Manual(ComponentVector([2.0; 5])), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn one_hot_alpha_selects_a_fifth_of_the_subblock() {
        let m = model();
        let s = tiny_sample();
        let enc = m.encode(&s, ZeroOut::None).unwrap();
        let mut g = Graph::new();
        let e = enc.load(&mut g);
        let outs = m.decoder.component_outputs(&mut g, &m.store, &e, &[1, 5], &mut Dropout::off()).unwrap();
        let u = mix(&mut g, &outs, &ComponentVector::one_hot(Component::Where)).unwrap();
        for (a, b) in g.value(u).iter().zip(g.value(outs[2])) {
            assert!((a - b / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let s = tiny_sample();
        let run = || {
            let mut m = model();
            let cfg = TrainConfig { steps: 30, batch_size: 1, eval_every: 10, adam: AdamConfig { learning_rate: 0.01, ..Default::default() }, ..Default::default() };
            let before = mean_loss(&m, core::slice::from_ref(&s), &cfg).unwrap();
            let report = train(&mut m, core::slice::from_ref(&s), core::slice::from_ref(&s), &cfg, 5).unwrap();
            (before, report, m.store)
        };
        let (before, report, store) = run();
        assert!(report.best_val_loss < before);
        let (_, report2, store2) = run();
        assert_eq!(report, report2);
        assert!(store.iter().zip(store2.iter()).all(|(a, b)| a.1.values() == b.1.values()));
    }
}
