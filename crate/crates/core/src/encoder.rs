//! Image, text and entity feature streams, multi-span text reading (MSTR)
//! for long articles, and the component prediction head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::Article;
use crate::nee::{fallback_context, lookup_entity, JointEmbeddingTable, FALLBACK_CONTEXT_LEN};
use crate::nn::{Activation, EncoderLayer, LayerNorm, Linear};
use crate::rng::SeededRng;
use crate::taxonomy::ComponentVector;
use crate::{Error, Result};

/// How the two MSTR segments are merged over their overlap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Linear ramp from segment A to segment B.
    #[default]
    Ramp,
    /// Equal weights throughout.
    Average,
}

/// Model dimensions. Defaults are desk scale; the published setting is
/// `d_image = 2048`, `d_text = 1024`, `d_entity = 300`, 16 heads,
/// segments of 512 and articles capped at 1000 tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_image: usize,
    pub d_text: usize,
    pub d_entity: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub shared_blocks: usize,
    pub subblocks: usize,
    pub ff_width: usize,
    pub vocab_size: usize,
    pub segment_len: usize,
    pub max_article_len: usize,
    pub max_caption_len: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub activation: Activation,
    pub interpolation: Interpolation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_image: 32,
            d_text: 64,
            d_entity: 300,
            num_heads: 4,
            encoder_layers: 2,
            shared_blocks: 3,
            subblocks: 5,
            ff_width: 128,
            vocab_size: 0,
            segment_len: 64,
            max_article_len: 128,
            max_caption_len: 32,
            dropout: 0.0,
            head_hidden: 64,
            activation: Activation::Gelu,
            interpolation: Interpolation::Ramp,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_image", self.d_image),
            ("d_text", self.d_text),
            ("d_entity", self.d_entity),
            ("num_heads", self.num_heads),
            ("ff_width", self.ff_width),
            ("vocab_size", self.vocab_size),
            ("segment_len", self.segment_len),
            ("max_article_len", self.max_article_len),
            ("max_caption_len", self.max_caption_len),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, d) in [("d_model", self.d_model), ("d_text", self.d_text)] {
            if d % self.num_heads != 0 {
                return Err(Error::Config(format!(
                    "{name} {d} is not divisible by num_heads {}",
                    self.num_heads
                )));
            }
        }
        if self.subblocks != 5 {
            return Err(Error::Config(format!("subblocks must be 5 (one per component), got {}", self.subblocks)));
        }
        if self.max_article_len > 2 * self.segment_len {
            return Err(Error::Config(format!(
                "two segments of {} cannot cover max_article_len {}",
                self.segment_len, self.max_article_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout switch threaded through forward passes.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: Option<SeededRng>,
}

impl Dropout {
    /// Inference: identity.
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }
    pub fn train(rate: f64, rng: SeededRng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }
    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => x,
        }
    }
}

/// Raw inputs for one article/image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub image: Vec<f64>,
    pub article_ids: Vec<usize>,
    /// One `d_entity` vector per article mention.
    pub entity_features: Vec<Vec<f64>>,
}

/// Which streams are replaced with zeros.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroOut {
    #[default]
    None,
    /// Text and entity streams.
    Text,
    Image,
}

/// Graph handles of the three encoded streams.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub image: Var,
    pub text: Var,
    pub entities: Var,
}

/// Encoded streams as values, plus the head's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub x_image: Tensor,
    pub x_text: Tensor,
    pub x_entities: Tensor,
    pub alpha_pred: ComponentVector,
}

impl EncodedSample {
    pub fn load(&self, g: &mut Graph) -> EncodedVars {
        EncodedVars {
            image: g.constant(&self.x_image),
            text: g.constant(&self.x_text),
            entities: g.constant(&self.x_entities),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: ModelConfig,
    pub image_proj: Linear,
    pub image_norm: LayerNorm,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub text_norm: LayerNorm,
    pub text_proj: Linear,
    pub entity_proj: Linear,
    pub entity_null: ParamId,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let emb_std = 1.0 / libm::sqrt(c.d_text as f64);
        let layers = (0..c.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("encoder.layer{i}"),
                    c.d_text,
                    c.num_heads,
                    c.ff_width,
                    c.activation,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            config: c.clone(),
            image_proj: Linear::new(store, "encoder.image_proj", c.d_image, c.d_model, rng)?,
            image_norm: LayerNorm::new(store, "encoder.image_norm", c.d_model)?,
            token_embedding: store.add(
                "encoder.token_embedding",
                Tensor::normal(&[c.vocab_size, c.d_text], emb_std, rng),
            )?,
            position_embedding: store.add(
                "encoder.position_embedding",
                Tensor::normal(&[c.max_article_len, c.d_text], emb_std, rng),
            )?,
            layers,
            text_norm: LayerNorm::new(store, "encoder.text_norm", c.d_text)?,
            text_proj: Linear::new(store, "encoder.text_proj", c.d_text, c.d_model, rng)?,
            entity_proj: Linear::new(store, "encoder.entity_proj", c.d_entity, c.d_model, rng)?,
            entity_null: store.add(
                "encoder.entity_null",
                Tensor::normal(&[1, c.d_model], 1.0 / libm::sqrt(c.d_model as f64), rng),
            )?,
            head_hidden: Linear::new(store, "head.hidden", 3 * c.d_model, c.head_hidden, rng)?,
            head_out: Linear::new(store, "head.out", c.head_hidden, 5, rng)?,
        })
    }

    /// `[1, d_model]`: projected and normalised image feature.
    pub fn encode_image(&self, g: &mut Graph, store: &ParamStore, image: &[f64]) -> Result<Var> {
        if image.len() != self.config.d_image {
            return Err(Error::Dimension(format!(
                "image feature has {} values, expected {}",
                image.len(),
                self.config.d_image
            )));
        }
        let x = g.constant(&Tensor::new(vec![1, image.len()], image.to_vec())?);
        let p = self.image_proj.forward(g, store, x)?;
        self.image_norm.forward(g, store, p)
    }

    /// One segment of at most `segment_len` tokens starting at article
    /// position `offset`; rows stay at width `d_text`.
    pub fn encode_text_segment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        offset: usize,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let c = &self.config;
        if ids.is_empty() {
            return Err(Error::Input("cannot encode an empty text segment".into()));
        }
        if ids.len() > c.segment_len {
            return Err(Error::Contract(format!(
                "segment of {} tokens exceeds segment_len {}",
                ids.len(),
                c.segment_len
            )));
        }
        if offset + ids.len() > c.max_article_len {
            return Err(Error::Contract(format!(
                "positions {}..{} exceed max_article_len {}",
                offset,
                offset + ids.len(),
                c.max_article_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        let table = g.param(store, self.token_embedding);
        let tokens = g.gather_rows(table, ids)?;
        let positions: Vec<usize> = (offset..offset + ids.len()).collect();
        let pos_table = g.param(store, self.position_embedding);
        let pos = g.gather_rows(pos_table, &positions)?;
        let mut x = g.add(tokens, pos)?;
        x = drop.apply(g, x);
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        self.text_norm.forward(g, store, x)
    }

    /// `[min(len, max_article_len), d_model]` text features.
    pub fn mstr_encode(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], drop: &mut Dropout) -> Result<Var> {
        let c = &self.config;
        let ids = &ids[..ids.len().min(c.max_article_len)];
        let l = ids.len();
        let s = c.segment_len;
        let merged = if l <= s {
            self.encode_text_segment(g, store, ids, 0, drop)?
        } else {
            let a = self.encode_text_segment(g, store, &ids[..s], 0, drop)?;
            let b = self.encode_text_segment(g, store, &ids[l - s..], l - s, drop)?;
            // l > s, so 0 <= k < s and both exclusive parts are non-empty
            let k = 2 * s - l;
            let mut parts = vec![g.slice_rows(a, 0, l - s)?];
            if k > 0 {
                let w = overlap_weights(k, c.interpolation);
                let a_over = g.slice_rows(a, l - s, k)?;
                let b_over = g.slice_rows(b, 0, k)?;
                let a_part = g.scale_rows(a_over, w.iter().map(|w| 1.0 - w).collect())?;
                let b_part = g.scale_rows(b_over, w)?;
                parts.push(g.add(a_part, b_part)?);
            }
            parts.push(g.slice_rows(b, k, s - k)?);
            g.concat_rows(&parts)?
        };
        self.text_proj.forward(g, store, merged)
    }

    /// `[max(1, n), d_model]`: projected entity features, or the learned
    /// null row when there are none.
    pub fn encode_entities(&self, g: &mut Graph, store: &ParamStore, features: &[Vec<f64>]) -> Result<Var> {
        let d = self.config.d_entity;
        if features.is_empty() {
            return Ok(g.param(store, self.entity_null));
        }
        if let Some((i, f)) = features.iter().enumerate().find(|(_, f)| f.len() != d) {
            return Err(Error::Dimension(format!("entity feature {i} has {} values, expected {d}", f.len())));
        }
        let x = g.constant(&Tensor::new(vec![features.len(), d], features.concat())?);
        self.entity_proj.forward(g, store, x)
    }

    /// Sigmoid probabilities `[1, 5]` from pooled streams.
    pub fn predict_components(&self, g: &mut Graph, store: &ParamStore, enc: &EncodedVars) -> Result<Var> {
        let t = g.mean_rows(enc.text);
        let e = g.mean_rows(enc.entities);
        let x = g.concat_cols(&[enc.image, t, e])?;
        let h = self.head_hidden.forward(g, store, x)?;
        let h = match self.config.activation {
            Activation::Gelu => g.gelu(h),
            Activation::Relu => g.relu(h),
        };
        let logits = self.head_out.forward(g, store, h)?;
        Ok(g.sigmoid(logits))
    }

    /// All three streams, with `zero_out` applied.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &EncoderInput,
        zero_out: ZeroOut,
        drop: &mut Dropout,
    ) -> Result<EncodedVars> {
        let mut image = self.encode_image(g, store, &input.image)?;
        let mut text = self.mstr_encode(g, store, &input.article_ids, drop)?;
        let mut entities = self.encode_entities(g, store, &input.entity_features)?;
        match zero_out {
            ZeroOut::None => {}
            ZeroOut::Text => {
                text = zeros_like(g, text);
                entities = zeros_like(g, entities);
            }
            ZeroOut::Image => image = zeros_like(g, image),
        }
        Ok(EncodedVars { image, text, entities })
    }

    /// Inference-time encoding to values.
    pub fn encode_sample(&self, store: &ParamStore, input: &EncoderInput, zero_out: ZeroOut) -> Result<EncodedSample> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, store, input, zero_out, &mut Dropout::off())?;
        let probs = self.predict_components(&mut g, store, &enc)?;
        let p = g.value(probs);
        let alpha = ComponentVector::new([p[0], p[1], p[2], p[3], p[4]])?;
        Ok(EncodedSample {
            x_image: value_tensor(&g, enc.image),
            x_text: value_tensor(&g, enc.text),
            x_entities: value_tensor(&g, enc.entities),
            alpha_pred: alpha,
        })
    }
}

fn zeros_like(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    g.zeros(&shape)
}

fn value_tensor(g: &Graph, v: Var) -> Tensor {
    Tensor::new(g.shape(v).to_vec(), g.value(v).to_vec()).expect("graph shapes are consistent")
}

/// Segment-B weights over an overlap of `k` rows.
pub fn overlap_weights(k: usize, mode: Interpolation) -> Vec<f64> {
    match (mode, k) {
        (_, 0) => Vec::new(),
        (Interpolation::Average, _) | (_, 1) => vec![0.5; k],
        (Interpolation::Ramp, _) => (0..k).map(|j| j as f64 / (k - 1) as f64).collect(),
    }
}

/// Overlap size of the two MSTR segments for an article of `len` tokens.
pub fn mstr_overlap(len: usize, segment_len: usize) -> usize {
    if len <= segment_len {
        0
    } else {
        (2 * segment_len).saturating_sub(len)
    }
}

/// Per-mention entity features: the table vector when linked and known,
/// else the text vector of a window around the mention.
pub fn entity_features(article: &Article, table: &JointEmbeddingTable) -> Result<Vec<Vec<f64>>> {
    article
        .entities
        .iter()
        .map(|m| {
            let ctx = fallback_context(&article.tokens, m.start, m.end, FALLBACK_CONTEXT_LEN);
            lookup_entity(m.entity_id.as_deref(), ctx, table)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::seeded;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_image: 5,
            d_text: 8,
            d_entity: 6,
            num_heads: 2,
            encoder_layers: 1,
            ff_width: 12,
            vocab_size: 20,
            segment_len: 6,
            max_article_len: 10,
            head_hidden: 7,
            ..Default::default()
        }
    }

    fn build(cfg: &ModelConfig) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, cfg, &mut seeded(4)).unwrap();
        (store, enc)
    }

    fn text_rows(enc: &Encoder, store: &ParamStore, ids: &[usize]) -> Vec<f64> {
        let mut g = Graph::new();
        let v = enc.mstr_encode(&mut g, store, ids, &mut Dropout::off()).unwrap();
        g.value(v).to_vec()
    }

    #[test]
    fn config_checks_heads_and_coverage() {
        assert!(ModelConfig { vocab_size: 10, ..Default::default() }.validate().is_ok());
        let bad = ModelConfig { vocab_size: 10, num_heads: 5, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { vocab_size: 10, max_article_len: 200, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn image_projection_shapes_and_zero_input() {
        let (mut store, enc) = build(&small());
        let b = store.id("encoder.image_proj.bias").unwrap();
        store.get_mut(b).values_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let mut g = Graph::new();
        let x = enc.encode_image(&mut g, &store, &[0.0; 5]).unwrap();
        assert_eq!(g.shape(x), &[1, 8]);
        // layer norm of the bias row 1..=8
        let mean = 4.5;
        let var: f64 = (1..=8).map(|i| (i as f64 - mean).powi(2)).sum::<f64>() / 8.0;
        for (i, v) in g.value(x).iter().enumerate() {
            let want = (i as f64 + 1.0 - mean) / (var + 1e-5).sqrt();
            assert!((v - want).abs() < 1e-12);
        }
        assert!(matches!(enc.encode_image(&mut g, &store, &[0.0; 4]), Err(Error::Dimension(_))));
    }

    #[test]
    fn image_projection_gradient() {
        let (store, enc) = build(&small());
        let w = store.id("encoder.image_proj.weight").unwrap();
        let image = [0.3, -1.2, 0.5, 2.0, -0.7];
        let probe: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let x = enc.encode_image(&mut g, store, &image).unwrap();
            let p = g.constant(&Tensor::new(vec![1, 8], probe.clone()).unwrap());
            let y = g.mul(x, p).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            let mut st = store.clone();
            st.zero_grad();
            g.accumulate_param_grads(&mut st).unwrap();
            (g.scalar(s), st.get(w).grad().unwrap().to_vec())
        };
        let (_, analytic) = loss(&store);
        let base = store.get(w).values().to_vec();
        let r = gradcheck::check(&base, &analytic, 1e-5, 1e-5, None, |x| {
            let mut st = store.clone();
            st.get_mut(w).values_mut().copy_from_slice(x);
            loss(&st).0
        });
        assert_eq!(r.passed, r.checked, "{r:?}");
    }

    #[test]
    fn segment_rejects_overlong_input_and_positions_matter() {
        let (store, enc) = build(&small());
        let mut g = Graph::new();
        let ids: Vec<usize> = (0..7).collect();
        let err = enc.encode_text_segment(&mut g, &store, &ids, 0, &mut Dropout::off());
        assert!(matches!(err, Err(Error::Contract(_))));
        let a = enc.encode_text_segment(&mut g, &store, &[4, 5], 0, &mut Dropout::off()).unwrap();
        let b = enc.encode_text_segment(&mut g, &store, &[4, 5], 3, &mut Dropout::off()).unwrap();
        assert_ne!(g.value(a), g.value(b));
    }

    #[test]
    fn short_article_is_single_segment() {
        let (store, enc) = build(&small());
        let ids = [3, 9, 4, 1];
        let mut g = Graph::new();
        let seg = enc.encode_text_segment(&mut g, &store, &ids, 0, &mut Dropout::off()).unwrap();
        let proj = enc.text_proj.forward(&mut g, &store, seg).unwrap();
        assert_eq!(g.value(proj), text_rows(&enc, &store, &ids).as_slice());
    }

    #[test]
    fn ramp_endpoints_are_exact() {
        let (store, enc) = build(&small());
        let ids: Vec<usize> = (0..10).map(|i| (i * 7) % 20).collect();
        let (l, s) = (10, 6);
        let merged = text_rows(&enc, &store, &ids);
        let mut g = Graph::new();
        let a = enc.encode_text_segment(&mut g, &store, &ids[..s], 0, &mut Dropout::off()).unwrap();
        let a = enc.text_proj.forward(&mut g, &store, a).unwrap();
        let b = enc.encode_text_segment(&mut g, &store, &ids[l - s..], l - s, &mut Dropout::off()).unwrap();
        let b = enc.text_proj.forward(&mut g, &store, b).unwrap();
        let d = 8;
        let row = |v: &[f64], r: usize| v[r * d..(r + 1) * d].to_vec();
        let (av, bv) = (g.value(a).to_vec(), g.value(b).to_vec());
        assert_eq!(merged.len(), l * d);
        // overlap is positions 4 and 5: first from A, last from B
        assert_eq!(row(&merged, 4), row(&av, 4));
        assert_eq!(row(&merged, 5), row(&bv, 1));
        assert_eq!(row(&merged, 0), row(&av, 0));
        assert_eq!(row(&merged, 9), row(&bv, 5));
    }

    #[test]
    fn article_of_two_full_segments_has_no_overlap() {
        let cfg = ModelConfig { max_article_len: 12, ..small() };
        let (store, enc) = build(&cfg);
        let ids: Vec<usize> = (0..12).map(|i| (i * 3) % 20).collect();
        let merged = text_rows(&enc, &store, &ids);
        let mut g = Graph::new();
        let a = enc.encode_text_segment(&mut g, &store, &ids[..6], 0, &mut Dropout::off()).unwrap();
        let a = enc.text_proj.forward(&mut g, &store, a).unwrap();
        let b = enc.encode_text_segment(&mut g, &store, &ids[6..], 6, &mut Dropout::off()).unwrap();
        let b = enc.text_proj.forward(&mut g, &store, b).unwrap();
        let mut expected = g.value(a).to_vec();
        expected.extend_from_slice(g.value(b));
        assert_eq!(merged, expected);
    }

    #[test]
    fn truncates_to_max_article_len() {
        let (store, enc) = build(&small());
        let ids: Vec<usize> = (0..15).collect();
        assert_eq!(text_rows(&enc, &store, &ids).len(), 10 * 8);
    }

    #[test]
    fn overlap_geometry_at_published_scale() {
        assert_eq!(mstr_overlap(1000, 512), 24);
        assert_eq!(mstr_overlap(513, 512), 511);
        assert_eq!(mstr_overlap(512, 512), 0);
        let w = overlap_weights(5, Interpolation::Ramp);
        assert_eq!(w, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(overlap_weights(1, Interpolation::Ramp), vec![0.5]);
        assert_eq!(overlap_weights(3, Interpolation::Average), vec![0.5; 3]);
    }

    #[test]
    fn entity_stream_null_row_and_ablation() {
        let (store, enc) = build(&small());
        let mut g = Graph::new();
        let none = enc.encode_entities(&mut g, &store, &[]).unwrap();
        assert_eq!(g.shape(none), &[1, 8]);
        let f1 = vec![vec![0.1; 6], vec![0.5, -0.2, 0.0, 1.0, 0.3, 0.2]];
        let mut f2 = f1.clone();
        f2[1] = vec![-1.0; 6];
        let a = enc.encode_entities(&mut g, &store, &f1).unwrap();
        let b = enc.encode_entities(&mut g, &store, &f2).unwrap();
        assert_eq!(g.shape(a), &[2, 8]);
        assert_eq!(g.value(a)[..8], g.value(b)[..8]);
        assert_ne!(g.value(a)[8..], g.value(b)[8..]);
    }

    #[test]
    fn head_outputs_probabilities_and_half_at_zero_weights() {
        let (mut store, enc) = build(&small());
        let input = EncoderInput {
            image: vec![0.2; 5],
            article_ids: vec![1, 2, 3],
            entity_features: vec![vec![0.3; 6]],
        };
        let e = enc.encode_sample(&store, &input, ZeroOut::None).unwrap();
        assert!(e.alpha_pred.0.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(e, enc.encode_sample(&store, &input, ZeroOut::None).unwrap());
        for name in ["head.out.weight", "head.out.bias"] {
            let id = store.id(name).unwrap();
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = enc.encode_sample(&store, &input, ZeroOut::None).unwrap();
        assert_eq!(e.alpha_pred.0, [0.5; 5]);
    }

    #[test]
    fn zero_out_replaces_streams() {
        let (store, enc) = build(&small());
        let input = EncoderInput { image: vec![0.2; 5], article_ids: vec![1, 2], entity_features: vec![] };
        let e = enc.encode_sample(&store, &input, ZeroOut::Text).unwrap();
        assert!(e.x_text.values().iter().chain(e.x_entities.values()).all(|v| *v == 0.0));
        assert_eq!(e.x_text.shape(), &[2, 8]);
        let e = enc.encode_sample(&store, &input, ZeroOut::Image).unwrap();
        assert!(e.x_image.values().iter().all(|v| *v == 0.0));
    }
}
