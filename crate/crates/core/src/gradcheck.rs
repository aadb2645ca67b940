//! Central finite-difference checks for tests.
//!
//! Only forward evaluations are used here, so the comparison stays
//! independent of the backward rules it validates.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Tensor, Var};
use crate::decoder::{joint_loss, CaptionModel, PreparedSample, TrainConfig};
use crate::encoder::{Dropout, EncoderInput, ModelConfig};
use crate::{rng, Result};

/// Central-difference step used by the suites below.
pub const STEP: f64 = 1e-5;
/// Relative error a coordinate must stay under to pass.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
    }
}

/// Relative error with an absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        // both effectively zero: fall back to the absolute gap
        diff
    } else {
        diff / scale
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
///
/// `indices` limits which coordinates are perturbed; `None` checks all.
pub fn check(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    tolerance: f64,
    indices: Option<&[usize]>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut result = GradCheck { checked: 0, passed: 0, max_rel_error: 0.0 };
    for &i in idx {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        result.checked += 1;
        if err < tolerance {
            result.passed += 1;
        }
        result.max_rel_error = result.max_rel_error.max(err);
    }
    result
}

/// One graph operation checked on random inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub result: GradCheck,
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Every differentiable graph operation, each on random inputs with a
/// random upstream weighting `sum(out * R)` so no gradient is trivially one.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let cases: [(&'static str, &[[usize; 2]], Build); 27] = [
        ("matmul", &[[3, 4], [4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("transpose", &[[3, 4]], |g, x| g.transpose(x[0])),
        ("add", &[[3, 4], [3, 4]], |g, x| g.add(x[0], x[1])),
        ("sub", &[[3, 4], [3, 4]], |g, x| g.sub(x[0], x[1])),
        ("mul", &[[3, 4], [3, 4]], |g, x| g.mul(x[0], x[1])),
        ("add_row", &[[3, 4], [1, 4]], |g, x| g.add_row(x[0], x[1])),
        ("mul_row", &[[3, 4], [1, 4]], |g, x| g.mul_row(x[0], x[1])),
        ("scale", &[[3, 4]], |g, x| Ok(g.scale(x[0], -1.7))),
        ("scale_rows", &[[3, 4]], |g, x| g.scale_rows(x[0], vec![0.5, -2.0, 1.25])),
        ("softmax_rows", &[[3, 5]], |g, x| g.softmax(x[0], 1)),
        ("softmax_cols", &[[3, 5]], |g, x| g.softmax(x[0], 0)),
        ("layer_norm", &[[3, 5]], |g, x| Ok(g.layer_norm(x[0]))),
        ("gelu", &[[3, 4]], |g, x| Ok(g.gelu(x[0]))),
        ("sigmoid", &[[3, 4]], |g, x| Ok(g.sigmoid(x[0]))),
        ("relu", &[[3, 4]], |g, x| Ok(g.relu(x[0]))),
        ("gather_rows", &[[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])),
        ("concat_cols", &[[3, 2], [3, 4]], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("concat_rows", &[[2, 3], [4, 3]], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("slice_cols", &[[3, 5]], |g, x| g.slice_cols(x[0], 1, 3)),
        ("slice_rows", &[[5, 3]], |g, x| g.slice_rows(x[0], 2, 2)),
        ("mean_rows", &[[4, 3]], |g, x| Ok(g.mean_rows(x[0]))),
        ("sum", &[[3, 4]], |g, x| Ok(g.sum(x[0]))),
        ("mean", &[[3, 4]], |g, x| Ok(g.mean(x[0]))),
        ("dropout", &[[3, 4]], |g, x| Ok(g.dropout(x[0], 0.4, &mut rng::seeded(9)))),
        ("cross_entropy", &[[4, 5]], |g, x| g.cross_entropy(x[0], &[Some(1), None, Some(4), Some(0)])),
        ("cross_entropy_sum", &[[4, 5]], |g, x| g.cross_entropy_sum(x[0], &[Some(1), None, Some(4), Some(0)])),
        ("binary_cross_entropy", &[[1, 5]], |g, x| {
            let p = g.sigmoid(x[0]);
            g.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0, 1.0])
        }),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, shapes, build))| {
            Ok(OpCheck { name, result: check_op(shapes, *build, seed.wrapping_add(i as u64))? })
        })
        .collect()
}

fn check_op(shapes: &[[usize; 2]], build: Build, seed: u64) -> Result<GradCheck> {
    let mut r = rng::seeded(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s[0] * s[1]).collect();
    let x: Vec<f64> = (0..sizes.iter().sum()).map(|_| rng::normal(&mut r)).collect();
    let forward = |x: &[f64], r: &mut rng::SeededRng| -> Result<(Graph, Vec<Var>, Var, Vec<f64>)> {
        let mut g = Graph::new();
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for (s, n) in shapes.iter().zip(&sizes) {
            let t = Tensor::new(s.to_vec(), x[at..at + n].to_vec())?.with_requires_grad(true);
            inputs.push(g.input(&t));
            at += n;
        }
        let out = build(&mut g, &inputs)?;
        let weights: Vec<f64> = (0..g.value(out).len()).map(|_| rng::normal(r)).collect();
        let w = g.constant(&Tensor::new(g.shape(out).to_vec(), weights.clone())?);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        Ok((g, inputs, loss, weights))
    };
    let weight_seed = seed ^ 0x5eed;
    let (mut g, inputs, loss, _) = forward(&x, &mut rng::seeded(weight_seed))?;
    g.backward(loss)?;
    let analytic: Vec<f64> = inputs.iter().flat_map(|&v| g.grad(v)).collect();
    Ok(check(&x, &analytic, STEP, TOLERANCE, None, |probe| {
        let (g, _, loss, _) = forward(probe, &mut rng::seeded(weight_seed)).expect("forward succeeded at the base point");
        g.scalar(loss)
    }))
}

/// Small captioner whose article spans two overlapping segments.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_image: 4,
        d_text: 8,
        d_entity: 3,
        num_heads: 2,
        encoder_layers: 1,
        shared_blocks: 1,
        ff_width: 10,
        vocab_size: 12,
        segment_len: 4,
        max_article_len: 6,
        max_caption_len: 6,
        head_hidden: 6,
        ..Default::default()
    }
}

pub fn tiny_sample() -> PreparedSample {
    PreparedSample {
        id: "tiny".into(),
        input: EncoderInput {
            image: vec![0.5, -0.3, 0.1, 0.9],
            article_ids: vec![4, 5, 6, 7, 8, 9],
            entity_features: vec![vec![0.2, -0.1, 0.4], vec![1.0, 0.0, -0.5]],
        },
        caption_ids: vec![5, 7, 9],
        gold: [true, false, true, false, true],
    }
}

/// Full training objective (caption NLL plus component loss) of a tiny
/// captioner against every parameter tensor, probing up to `per_tensor`
/// evenly spaced coordinates of each.
pub fn model_check(seed: u64, per_tensor: usize) -> Result<GradCheck> {
    let cfg = TrainConfig { lambda_c: 0.7, ..Default::default() };
    let model = CaptionModel::new(&tiny_model_config(), seed)?;
    let sample = tiny_sample();
    let mut store = model.store.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let (loss, _, _) = joint_loss(&mut g, &model, &sample, &cfg, &mut Dropout::off())?;
    g.backward(loss)?;
    g.accumulate_param_grads(&mut store)?;

    let mut x = Vec::new();
    let mut analytic = Vec::new();
    let mut indices = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        let n = t.len();
        let take = per_tensor.min(n).max(1);
        indices.extend((0..take).map(|k| x.len() + k * n / take));
        x.extend_from_slice(t.values());
        analytic.extend(t.grad().map_or_else(|| vec![0.0; n], <[f64]>::to_vec));
    }
    let mut probe_model = model.clone();
    Ok(check(&x, &analytic, STEP, TOLERANCE, Some(&indices), |probe| {
        let mut at = 0;
        for t in probe_model.store.tensors_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&probe[at..at + n]);
            at += n;
        }
        let mut g = Graph::new();
        let (loss, _, _) = joint_loss(&mut g, &probe_model, &sample, &cfg, &mut Dropout::off()).expect("forward succeeded at the base point");
        g.scalar(loss)
    }))
}
