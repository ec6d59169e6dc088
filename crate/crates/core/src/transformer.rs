//! A post-layer-norm transformer encoder whose forward pass exposes every
//! intermediate behavior used for distillation: embeddings, per-layer
//! pre-softmax attention scores, per-layer hidden states and logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
/// Added to scores of padded key positions before the softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Adds a vocabulary-sized output projection for masked-token prediction.
    #[serde(default)]
    pub mlm_head: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers < 1 {
            return fail("num_layers must be at least 1".into());
        }
        if self.heads < 1 || self.hidden < self.heads || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn < 1 {
            return fail("ffn must be at least 1".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} leaves no room for reserved tokens", self.vocab_size));
        }
        if self.max_len < 1 {
            return fail("max_len must be positive".into());
        }
        if self.num_classes < 1 {
            return fail("num_classes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Number of learnable parameters implied by `config`.
///
/// Pure arithmetic, so it also answers for degenerate shapes (no layers, no
/// classifier) that [`TransformerConfig::validate`] rejects.
pub fn parameter_count(config: &TransformerConfig) -> usize {
    let (v, d, di, c) = (config.vocab_size, config.hidden, config.ffn, config.num_classes);
    let embeddings = v * d + config.max_len * d;
    let attention = 4 * d * d;
    let ffn = d * di + di + di * d + d;
    let norms = 2 * 2 * d;
    let per_layer = attention + ffn + norms;
    let classifier = d * c + c;
    let mlm = if config.mlm_head { d * v + v } else { 0 };
    embeddings + config.num_layers * per_layer + classifier + mlm
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub attn_norm_gain: Tensor,
    pub attn_norm_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ffn_norm_gain: Tensor,
    pub ffn_norm_bias: Tensor,
}

impl LayerWeights {
    fn init(config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, di) = (config.hidden, config.ffn);
        let mut w = |r: usize, c: usize| Tensor::truncated_normal([r, c], INIT_STD, rng);
        LayerWeights {
            w_q: w(d, d),
            w_k: w(d, d),
            w_v: w(d, d),
            w_o: w(d, d),
            w1: w(d, di),
            w2: w(di, d),
            attn_norm_gain: Tensor::ones([d]),
            attn_norm_bias: Tensor::zeros([d]),
            b1: Tensor::zeros([di]),
            b2: Tensor::zeros([d]),
            ffn_norm_gain: Tensor::ones([d]),
            ffn_norm_bias: Tensor::zeros([d]),
        }
    }

    const NAMES: [&'static str; 12] = [
        "w_q",
        "w_k",
        "w_v",
        "w_o",
        "attn_norm_gain",
        "attn_norm_bias",
        "w1",
        "b1",
        "w2",
        "b2",
        "ffn_norm_gain",
        "ffn_norm_bias",
    ];

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }
}

/// A layer's weights bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ffn_norm_gain: Var,
    pub ffn_norm_bias: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: TransformerConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
    pub mlm: Option<MlmHead>,
}

/// All model parameters bound to one tape, in [`TransformerModel::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<LayerVars>,
    pub classifier_weight: Var,
    pub classifier_bias: Var,
    pub mlm: Option<(Var, Var)>,
    params: Vec<Var>,
}

impl BoundModel {
    /// Parameter handles in [`TransformerModel::named_params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.params
    }
}

/// Behavior outputs of one forward pass, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelActivations {
    /// `[b, l, d]`
    pub embeddings: Tensor,
    /// Per layer, `[b, h, l, l]` pre-softmax scores `QKᵀ/√d_k`.
    pub attentions: Vec<Tensor>,
    /// Per layer, `[b, l, d]`.
    pub hiddens: Vec<Tensor>,
    /// `[b, c]`
    pub logits: Tensor,
}

/// Behavior outputs of one forward pass, still attached to the tape.
#[derive(Clone, Debug)]
pub struct TapeActivations {
    pub embeddings: Var,
    pub attentions: Vec<Var>,
    pub hiddens: Vec<Var>,
    pub logits: Var,
    /// `[b, l, V]`, only when requested and the model has an MLM head.
    pub mlm_logits: Option<Var>,
}

impl TapeActivations {
    pub fn to_tensors(&self, tape: &Tape) -> ModelActivations {
        ModelActivations {
            embeddings: tape.value(self.embeddings).clone(),
            attentions: self.attentions.iter().map(|&v| tape.value(v).clone()).collect(),
            hiddens: self.hiddens.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(self.logits).clone(),
        }
    }
}

/// Knobs for [`TransformerModel::forward`].
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Source of dropout masks; dropout is only applied when this is set.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Also compute per-position vocabulary logits.
    pub mlm_logits: bool,
}

/// Token ids and padding mask of a rectangular batch.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub tokens: &'a [Vec<u32>],
    pub pad_mask: &'a [Vec<bool>],
}

impl Input<'_> {
    fn dims(&self) -> Result<(usize, usize)> {
        let b = self.tokens.len();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let l = self.tokens[0].len();
        if l == 0 {
            return Err(Error::Shape("zero-length sequences".into()));
        }
        if self.pad_mask.len() != b
            || self.tokens.iter().any(|r| r.len() != l)
            || self.pad_mask.iter().any(|r| r.len() != l)
        {
            return Err(Error::Shape("tokens and pad_mask must be rectangular and agree".into()));
        }
        Ok((b, l))
    }
}

impl TransformerModel {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: TransformerConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    /// Weights ~ N(0, 0.02²) truncated at ±2σ, biases 0, norm gains 1.
    pub fn with_rng(config: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden);
        let token_embedding = Tensor::truncated_normal([v, d], INIT_STD, rng);
        let position_embedding = Tensor::truncated_normal([config.max_len, d], INIT_STD, rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights::init(&config, rng))
            .collect();
        let classifier_weight = Tensor::truncated_normal([d, config.num_classes], INIT_STD, rng);
        let classifier_bias = Tensor::zeros([config.num_classes]);
        let mlm = config.mlm_head.then(|| MlmHead {
            weight: Tensor::truncated_normal([d, v], INIT_STD, rng),
            bias: Tensor::zeros([v]),
        });
        Ok(TransformerModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            classifier_weight,
            classifier_bias,
            mlm,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Replaces the classifier with a fresh one for `num_classes` outputs.
    pub fn reset_classifier(&mut self, num_classes: usize, rng: &mut ChaCha8Rng) {
        self.config.num_classes = num_classes;
        self.classifier_weight = Tensor::truncated_normal([self.config.hidden, num_classes], INIT_STD, rng);
        self.classifier_bias = Tensor::zeros([num_classes]);
    }

    /// Drops the MLM head, if any.
    pub fn without_mlm_head(mut self) -> Self {
        self.mlm = None;
        self.config.mlm_head = false;
        self
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("classifier_weight".into(), &self.classifier_weight));
        out.push(("classifier_bias".into(), &self.classifier_bias));
        if let Some(m) = &self.mlm {
            out.push(("mlm_weight".into(), &m.weight));
            out.push(("mlm_bias".into(), &m.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        if let Some(m) = &mut self.mlm {
            out.push(&mut m.weight);
            out.push(&mut m.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape`, as gradient-receiving leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut params = Vec::new();
        let mut leaf = |t: &Tensor| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            params.push(v);
            v
        };
        let token_embedding = leaf(&self.token_embedding);
        let position_embedding = leaf(&self.position_embedding);
        let layers = self
            .layers
            .iter()
            .map(|lw| {
                let [w_q, w_k, w_v, w_o, ang, anb, w1, b1, w2, b2, fng, fnb] = lw.tensors().map(&mut leaf);
                LayerVars {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    attn_norm_gain: ang,
                    attn_norm_bias: anb,
                    w1,
                    b1,
                    w2,
                    b2,
                    ffn_norm_gain: fng,
                    ffn_norm_bias: fnb,
                }
            })
            .collect();
        let classifier_weight = leaf(&self.classifier_weight);
        let classifier_bias = leaf(&self.classifier_bias);
        let mlm = self.mlm.as_ref().map(|m| (leaf(&m.weight), leaf(&m.bias)));
        BoundModel {
            token_embedding,
            position_embedding,
            layers,
            classifier_weight,
            classifier_bias,
            mlm,
            params,
        }
    }

    /// Full forward pass recording on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        input: Input<'_>,
        mut opts: ForwardOptions<'_>,
    ) -> Result<TapeActivations> {
        let (b, l) = input.dims()?;
        let cfg = &self.config;
        if l > cfg.max_len {
            return Err(Error::Param(format!(
                "sequence length {l} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let ids: Vec<usize> = input.tokens.iter().flatten().map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Param(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.hidden;

        let tok = tape.gather_rows(bound.token_embedding, &ids)?;
        let tok = tape.reshape(tok, [b, l, d])?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = tape.gather_rows(bound.position_embedding, &positions)?;
        let embeddings = tape.add(tok, pos)?;

        let mask_bias = key_mask_bias(input.pad_mask, b, l);
        let mask_bias = tape.constant(mask_bias);

        let dropout = cfg.dropout;
        let mut x = embeddings;
        let mut attentions = Vec::with_capacity(cfg.num_layers);
        let mut hiddens = Vec::with_capacity(cfg.num_layers);
        for layer in &bound.layers {
            let (attn_out, scores) = mha(tape, x, layer, mask_bias, cfg.heads)?;
            let attn_out = match opts.dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(attn_out, dropout, rng)?,
                None => attn_out,
            };
            let res = tape.add(x, attn_out)?;
            let x1 = tape.layer_norm(res, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
            let f = ffn(tape, x1, layer)?;
            let f = match opts.dropout_rng.as_deref_mut() {
                Some(rng) => tape.dropout(f, dropout, rng)?,
                None => f,
            };
            let res = tape.add(x1, f)?;
            x = tape.layer_norm(res, layer.ffn_norm_gain, layer.ffn_norm_bias, LAYER_NORM_EPS)?;
            attentions.push(scores);
            hiddens.push(x);
        }

        let cls = tape.select_axis1(x, 0)?;
        let logits = tape.matmul(cls, bound.classifier_weight)?;
        let logits = tape.add(logits, bound.classifier_bias)?;

        let mlm_logits = match (opts.mlm_logits, bound.mlm) {
            (true, Some((w, bias))) => {
                let z = tape.matmul(x, w)?;
                Some(tape.add(z, bias)?)
            }
            _ => None,
        };

        Ok(TapeActivations {
            embeddings,
            attentions,
            hiddens,
            logits,
            mlm_logits,
        })
    }

    /// Forward pass without gradients, returning plain tensors.
    pub fn infer(&self, tokens: &[Vec<u32>], pad_mask: &[Vec<bool>]) -> Result<ModelActivations> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let acts = self.forward(
            &mut tape,
            &bound,
            Input { tokens, pad_mask },
            ForwardOptions::default(),
        )?;
        Ok(acts.to_tensors(&tape))
    }

    /// Per-position vocabulary logits `[b, l, V]`.
    pub fn mlm_logits(&self, tokens: &[Vec<u32>], pad_mask: &[Vec<bool>]) -> Result<Tensor> {
        if self.mlm.is_none() {
            return Err(Error::Capability("model has no masked-language-model head".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let acts = self.forward(
            &mut tape,
            &bound,
            Input { tokens, pad_mask },
            ForwardOptions {
                dropout_rng: None,
                mlm_logits: true,
            },
        )?;
        Ok(tape.value(acts.mlm_logits.expect("mlm head present")).clone())
    }
}

/// `[b, 1, l]` additive bias: 0 on real keys, [`MASK_BIAS`] on padding.
fn key_mask_bias(pad_mask: &[Vec<bool>], b: usize, l: usize) -> Tensor {
    let data = pad_mask
        .iter()
        .flat_map(|row| row.iter().map(|&real| if real { 0.0 } else { MASK_BIAS }))
        .collect();
    Tensor::new([b, 1, l], data).expect("mask shape")
}

/// `QKᵀ / √d_k` for `q, k` shaped `[.., l, d_k]`.
pub fn attention_scores(tape: &mut Tape, q: Var, k: Var, head_dim: usize) -> Result<Var> {
    if tape.shape(q) != tape.shape(k) {
        return Err(Error::dim("attention_scores", tape.shape(q), tape.shape(k)));
    }
    if tape.shape(q).last() != Some(&head_dim) {
        return Err(Error::dim("attention_scores", tape.shape(q), &[head_dim]));
    }
    let kt = tape.transpose_last(k)?;
    let s = tape.matmul(q, kt)?;
    tape.scale(s, 1.0 / (head_dim as f64).sqrt())
}

/// Multi-head self-attention. Returns the mixed output `[b, l, d]` and the
/// unmasked pre-softmax scores `[b, h, l, l]`.
///
/// `mask_bias` is added to the scores before the softmax only.
pub fn mha(tape: &mut Tape, x: Var, w: &LayerVars, mask_bias: Var, heads: usize) -> Result<(Var, Var)> {
    let d = *tape.shape(x).last().ok_or_else(|| Error::Shape("mha on scalar".into()))?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Shape(format!("hidden {d} not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let q = tape.matmul(x, w.w_q)?;
    let k = tape.matmul(x, w.w_k)?;
    let v = tape.matmul(x, w.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut scores = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_last(q, i * dk, dk)?;
        let ki = tape.slice_last(k, i * dk, dk)?;
        let vi = tape.slice_last(v, i * dk, dk)?;
        let a = attention_scores(tape, qi, ki, dk)?;
        let masked = tape.add(a, mask_bias)?;
        let p = tape.softmax_rows(masked)?;
        outs.push(tape.matmul(p, vi)?);
        scores.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_last(&outs)? };
    let out = tape.matmul(cat, w.w_o)?;
    let scores = tape.stack_axis1(&scores)?;
    Ok((out, scores))
}

/// `max(0, x W1 + b1) W2 + b2`
pub fn ffn(tape: &mut Tape, x: Var, w: &LayerVars) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add(h, w.b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w.w2)?;
    tape.add(o, w.b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            num_layers: 2,
            hidden: 8,
            ffn: 12,
            heads: 2,
            vocab_size: 11,
            max_len: 8,
            num_classes: 2,
            dropout: 0.0,
            mlm_head: false,
            seed: 5,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn parameter_count_matches_model() {
        for mlm in [false, true] {
            let mut c = tiny_config();
            c.mlm_head = mlm;
            let m = TransformerModel::new(c.clone()).unwrap();
            assert_eq!(m.parameter_count(), parameter_count(&c));
        }
    }

    #[test]
    fn parameter_count_by_hand() {
        // V=11, d=8, di=12, max_len=8, c=2, M=2
        // embeddings 88 + 64; layer 4*64 + (96+12+96+8) + 32 = 500; head 18
        assert_eq!(parameter_count(&tiny_config()), 88 + 64 + 2 * 500 + 18);
    }

    #[test]
    fn parameter_count_degenerate_and_vocab_growth() {
        let mut c = tiny_config();
        c.num_layers = 0;
        c.num_classes = 0;
        assert_eq!(parameter_count(&c), 11 * 8 + 8 * 8);
        let base = parameter_count(&tiny_config());
        let mut c = tiny_config();
        c.vocab_size *= 2;
        assert_eq!(parameter_count(&c), base + 11 * 8);
    }

    #[test]
    fn forward_shapes() {
        let c = TransformerConfig {
            num_layers: 2,
            hidden: 8,
            ffn: 16,
            heads: 2,
            vocab_size: 20,
            max_len: 10,
            num_classes: 2,
            dropout: 0.0,
            mlm_head: false,
            seed: 1,
        };
        let m = TransformerModel::new(c).unwrap();
        let tokens = vec![vec![2, 5, 6, 7, 3]; 3];
        let mask = vec![vec![true; 5]; 3];
        let a = m.infer(&tokens, &mask).unwrap();
        assert_eq!(a.embeddings.shape(), &[3, 5, 8]);
        assert_eq!(a.attentions.len(), 2);
        assert!(a.attentions.iter().all(|t| t.shape() == [3, 2, 5, 5]));
        assert!(a.hiddens.iter().all(|t| t.shape() == [3, 5, 8]));
        assert_eq!(a.logits.shape(), &[3, 2]);
    }

    #[test]
    fn forward_errors() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        let err = m.infer(&[vec![2, 11]], &[vec![true, true]]).unwrap_err();
        assert!(matches!(err, Error::Param(_)));
        let long = vec![vec![2u32; 9]];
        let mask = vec![vec![true; 9]];
        assert!(m.infer(&long, &mask).is_err());
    }

    #[test]
    fn mlm_logits_need_head() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        assert!(matches!(
            m.mlm_logits(&[vec![2, 1]], &[vec![true, true]]),
            Err(Error::Capability(_))
        ));
        let mut c = tiny_config();
        c.mlm_head = true;
        let m = TransformerModel::new(c).unwrap();
        let z = m.mlm_logits(&[vec![2, 1]], &[vec![true, true]]).unwrap();
        assert_eq!(z.shape(), &[1, 2, 11]);
    }
}
