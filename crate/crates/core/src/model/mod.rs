//! Encoder-decoder with fused text/image embeddings and layout-aware attention bias.

pub mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::layout::{quantize_center, BBox, GRID_H, GRID_W};
use crate::numerics::{Bound, ParamStore, Real, Tape, Tensor, Var};
use crate::objectives::{Role, Seq2SeqExample};
use crate::spatial_bias::{build_bias_var, BiasIndices, BiasParams, BiasVars, BucketConfig, HORIZ_TABLE, SEQ_TABLE, VERT_TABLE};
use crate::vision::{image_embeddings, init_vision, prepare_raster, VisionConfig};

pub use vocab::{decode_ids, encode_text, BOS, EOS, PAD, SENTINEL_0, SPACE, VOCAB_SIZE};

pub const EMBED: &str = "shared.embed";
pub const DEC_SEQ_TABLE: &str = "bias.dec_seq";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionDivisor {
    /// `√d_head`.
    #[default]
    HeadDim,
    /// `√n` with `n` the number of keys.
    SeqLen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiltConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub dropout: f64,
    pub attention_divisor: AttentionDivisor,
    pub vision: VisionConfig,
    /// Drops the horizontal and vertical bias terms; the sequential term stays.
    pub disable_spatial_bias: bool,
    /// Image embeddings are zero.
    pub disable_vision: bool,
}

impl Default for TiltConfig {
    fn default() -> Self {
        TiltConfig {
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            vocab_size: VOCAB_SIZE,
            max_src_len: 256,
            max_tgt_len: 32,
            dropout: 0.0,
            attention_divisor: AttentionDivisor::HeadDim,
            vision: VisionConfig::tiny(),
            disable_spatial_bias: false,
            disable_vision: false,
        }
    }
}

impl TiltConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TiltError::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_ff == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("d_ff and layer counts must be positive".into());
        }
        if self.max_src_len == 0 || self.max_tgt_len < 2 {
            return bad("max_src_len must be positive and max_tgt_len at least 2".into());
        }
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!("vocab_size must be {VOCAB_SIZE} for the byte vocabulary"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.vision.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    fn attention_scale(&self, keys: usize) -> f64 {
        match self.attention_divisor {
            AttentionDivisor::HeadDim => 1.0 / (self.head_dim() as f64).sqrt(),
            AttentionDivisor::SeqLen => 1.0 / (keys.max(1) as f64).sqrt(),
        }
    }
}

/// Token-level encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSource {
    pub ids: Vec<usize>,
    /// Quantized centers on the bias grid.
    pub centers: Vec<(usize, usize)>,
    /// Boxes that read image features; `None` for prompt and separator positions.
    pub boxes: Vec<Option<BBox>>,
    pub page_w: f64,
    pub page_h: f64,
    /// Set when document tokens were dropped to fit `max_src_len`.
    pub truncated: bool,
}

/// Bytes of each source item followed by a space, all sharing the item's box;
/// the separator is a single `EOS`. Only the document tail is truncated.
pub fn encode_source(ex: &Seq2SeqExample, max_len: usize) -> Result<EncodedSource> {
    let (pw, ph) = (ex.page.width as f64, ex.page.height as f64);
    let mut out = EncodedSource {
        ids: Vec::new(),
        centers: Vec::new(),
        boxes: Vec::new(),
        page_w: pw,
        page_h: ph,
        truncated: false,
    };
    for item in &ex.source {
        let ids = match item.role {
            Role::Separator => vec![EOS],
            _ => {
                let mut ids = encode_text(&item.text);
                ids.push(SPACE);
                ids
            }
        };
        let room = max_len.saturating_sub(out.ids.len());
        if ids.len() > room {
            if item.role != Role::Document {
                return Err(TiltError::Validation(format!(
                    "example `{}`: prompt does not fit in {max_len} source tokens",
                    ex.id
                )));
            }
            out.truncated = true;
            break;
        }
        let center = quantize_center(&item.bbox, pw, ph, GRID_W, GRID_H);
        let bbox = item.has_image().then_some(item.bbox);
        for id in ids {
            out.ids.push(id);
            out.centers.push(center);
            out.boxes.push(bbox);
        }
    }
    if out.truncated {
        log::warn!("example `{}` truncated to {max_len} source tokens", ex.id);
    }
    if out.ids.is_empty() {
        return Err(TiltError::Validation(format!("example `{}` has an empty source", ex.id)));
    }
    Ok(out)
}

/// Target bytes plus `EOS`, cut to `max_len`.
pub fn encode_target(target: &str, max_len: usize) -> Result<Vec<usize>> {
    if target.is_empty() {
        return Err(TiltError::Validation("empty target".into()));
    }
    let mut ids = encode_text(target);
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    Ok(ids)
}

/// Everything one forward pass needs, independent of the parameters.
#[derive(Clone, Debug)]
pub struct Prepared<T: Real> {
    pub source: EncodedSource,
    pub bias: BiasIndices,
    pub raster: Tensor<T>,
    pub target: Option<Vec<usize>>,
}

impl<T: Real> Prepared<T> {
    pub fn new(cfg: &TiltConfig, ex: &Seq2SeqExample, with_target: bool) -> Result<Self> {
        let source = encode_source(ex, cfg.max_src_len)?;
        let bias = BiasIndices::new(&source.centers);
        let raster = if cfg.disable_vision {
            Tensor::zeros(&[1, cfg.vision.input_h, cfg.vision.input_w])
        } else {
            prepare_raster(&ex.page, &cfg.vision)
        };
        let target = if with_target {
            Some(encode_target(&ex.target, cfg.max_tgt_len)?)
        } else {
            None
        };
        Ok(Prepared {
            source,
            bias,
            raster,
            target,
        })
    }
}

fn linear_init<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, cols], (1.0 / rows as f64).sqrt(), rng)
}

fn insert_attention<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) {
    for w in ["q", "k", "v", "o"] {
        store.insert(format!("{prefix}.{w}"), linear_init(d, d, rng));
    }
}

fn insert_ffn<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, d: usize, dff: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w1"), linear_init(d, dff, rng));
    store.insert(format!("{prefix}.w2"), linear_init(dff, d, rng));
}

/// Fresh parameters for `cfg`, drawn from a generator seeded with `seed`.
pub fn init_params<T: Real>(cfg: &TiltConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    store.insert(EMBED, Tensor::randn(&[cfg.vocab_size, d], 1.0, &mut rng));
    for l in 0..cfg.enc_layers {
        store.insert(format!("enc.{l}.ln1"), Tensor::full(&[d], T::one()));
        insert_attention(&mut store, &format!("enc.{l}.attn"), d, &mut rng);
        store.insert(format!("enc.{l}.ln2"), Tensor::full(&[d], T::one()));
        insert_ffn(&mut store, &format!("enc.{l}.ff"), d, cfg.d_ff, &mut rng);
    }
    store.insert("enc.final_ln", Tensor::full(&[d], T::one()));
    for l in 0..cfg.dec_layers {
        store.insert(format!("dec.{l}.ln1"), Tensor::full(&[d], T::one()));
        insert_attention(&mut store, &format!("dec.{l}.self"), d, &mut rng);
        store.insert(format!("dec.{l}.ln2"), Tensor::full(&[d], T::one()));
        insert_attention(&mut store, &format!("dec.{l}.cross"), d, &mut rng);
        store.insert(format!("dec.{l}.ln3"), Tensor::full(&[d], T::one()));
        insert_ffn(&mut store, &format!("dec.{l}.ff"), d, cfg.d_ff, &mut rng);
    }
    store.insert("dec.final_ln", Tensor::full(&[d], T::one()));
    BiasParams::<T>::random(cfg.num_heads, 0.1, &mut rng).insert_into(&mut store);
    store.insert(
        DEC_SEQ_TABLE,
        Tensor::randn(&[BucketConfig::SEQ.num_buckets, cfg.num_heads], 0.1, &mut rng),
    );
    init_vision(&cfg.vision, d, &mut store, &mut rng)?;
    Ok(store)
}

/// Training-time randomness; `None` runs deterministically with dropout off.
pub type DropoutRng<'r> = Option<&'r mut ChaCha8Rng>;

fn dropout<T: Real>(tape: &mut Tape<'_, T>, x: Var, rate: f64, rng: &mut DropoutRng<'_>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - rate));
            let mask = (0..tape.value(x).len())
                .map(|_| if rng.random_bool(rate) { T::zero() } else { keep })
                .collect();
            tape.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_sublayer<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TiltConfig,
    prefix: &str,
    xq: Var,
    xkv: Var,
    bias: Option<Var>,
    causal: bool,
) -> Result<Var> {
    let w = |n: &str| p.try_get(&format!("{prefix}.{n}"));
    let q = tape.matmul(xq, w("q")?)?;
    let k = tape.matmul(xkv, w("k")?)?;
    let v = tape.matmul(xkv, w("v")?)?;
    let keys = tape.value(xkv).shape()[0];
    let scale = T::lit(cfg.attention_scale(keys));
    let a = tape.attention(q, k, v, bias, cfg.num_heads, scale, causal)?;
    tape.matmul(a, w("o")?)
}

fn ffn_sublayer<T: Real>(tape: &mut Tape<'_, T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = tape.matmul(x, p.try_get(&format!("{prefix}.w1"))?)?;
    let h = tape.relu(h);
    tape.matmul(h, p.try_get(&format!("{prefix}.w2"))?)
}

/// Encoder memory `[n, d_model]`.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TiltConfig,
    prep: &Prepared<T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let src = &prep.source;
    let mut x = tape.embed(p.try_get(EMBED)?, &src.ids)?;
    if !cfg.disable_vision {
        let raster = tape.constant(prep.raster.clone());
        let u = image_embeddings(tape, p, &cfg.vision, raster, &src.boxes, src.page_w, src.page_h)?;
        x = tape.add(x, u)?;
    }
    let tables = BiasVars {
        seq: p.try_get(SEQ_TABLE)?,
        spatial: if cfg.disable_spatial_bias {
            None
        } else {
            Some((p.try_get(HORIZ_TABLE)?, p.try_get(VERT_TABLE)?))
        },
    };
    let bias = build_bias_var(tape, tables, &prep.bias)?;
    x = dropout(tape, x, cfg.dropout, rng)?;
    for l in 0..cfg.enc_layers {
        let h = tape.rms_norm(x, p.try_get(&format!("enc.{l}.ln1"))?)?;
        let a = attention_sublayer(tape, p, cfg, &format!("enc.{l}.attn"), h, h, Some(bias), false)?;
        let a = dropout(tape, a, cfg.dropout, rng)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, p.try_get(&format!("enc.{l}.ln2"))?)?;
        let f = ffn_sublayer(tape, p, &format!("enc.{l}.ff"), h)?;
        let f = dropout(tape, f, cfg.dropout, rng)?;
        x = tape.add(x, f)?;
    }
    tape.rms_norm(x, p.try_get("enc.final_ln")?)
}

/// Next-token logits `[t, vocab]` for decoder inputs `inputs` (starting with `BOS`).
pub fn decoder_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TiltConfig,
    memory: Var,
    inputs: &[usize],
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let t = inputs.len();
    let table = p.try_get(EMBED)?;
    let mut y = tape.embed(table, inputs)?;
    let bias = tape.gather_bias(p.try_get(DEC_SEQ_TABLE)?, BiasIndices::sequential(t), t, t)?;
    y = dropout(tape, y, cfg.dropout, rng)?;
    for l in 0..cfg.dec_layers {
        let h = tape.rms_norm(y, p.try_get(&format!("dec.{l}.ln1"))?)?;
        let a = attention_sublayer(tape, p, cfg, &format!("dec.{l}.self"), h, h, Some(bias), true)?;
        let a = dropout(tape, a, cfg.dropout, rng)?;
        y = tape.add(y, a)?;
        let h = tape.rms_norm(y, p.try_get(&format!("dec.{l}.ln2"))?)?;
        let c = attention_sublayer(tape, p, cfg, &format!("dec.{l}.cross"), h, memory, None, false)?;
        let c = dropout(tape, c, cfg.dropout, rng)?;
        y = tape.add(y, c)?;
        let h = tape.rms_norm(y, p.try_get(&format!("dec.{l}.ln3"))?)?;
        let f = ffn_sublayer(tape, p, &format!("dec.{l}.ff"), h)?;
        let f = dropout(tape, f, cfg.dropout, rng)?;
        y = tape.add(y, f)?;
    }
    let h = tape.rms_norm(y, p.try_get("dec.final_ln")?)?;
    let h = tape.scale(h, T::lit(1.0 / (cfg.d_model as f64).sqrt()));
    tape.matmul_t(h, table)
}

/// Teacher-forced mean cross-entropy of `target` (ending in `EOS`).
pub fn decode_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TiltConfig,
    memory: Var,
    target: &[usize],
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    if target.is_empty() {
        return Err(TiltError::Validation("empty target".into()));
    }
    let mut inputs = Vec::with_capacity(target.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&target[..target.len() - 1]);
    let logits = decoder_logits(tape, p, cfg, memory, &inputs, rng)?;
    tape.cross_entropy(logits, target)
}

/// Full loss graph for one prepared example.
pub fn loss_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound,
    cfg: &TiltConfig,
    prep: &Prepared<T>,
    rng: &mut DropoutRng<'_>,
) -> Result<Var> {
    let target = prep
        .target
        .as_ref()
        .ok_or_else(|| TiltError::Contract("example prepared without a target".into()))?;
    let memory = encode(tape, p, cfg, prep, rng)?;
    decode_loss(tape, p, cfg, memory, target, rng)
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Tilt<T: Real = f32> {
    pub config: TiltConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Tilt<T> {
    pub fn new(config: TiltConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Tilt { config, params })
    }

    /// Checks `params` against the layout `config` implies.
    pub fn from_params(config: TiltConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = init_params::<T>(&config, 0)?;
        for (name, t) in reference.iter() {
            match params.get(name) {
                None => return Err(TiltError::CheckpointMissing(name.to_string())),
                Some(p) if p.shape() != t.shape() => {
                    return Err(TiltError::CheckpointShape {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: p.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| reference.get(n).is_none()) {
            return Err(TiltError::CheckpointUnknown(extra.to_string()));
        }
        // keep the canonical order so checkpoints are byte-stable
        let mut ordered = ParamStore::new();
        for name in reference.names() {
            ordered.insert(name, params.get(name).expect("checked above").clone());
        }
        Ok(Tilt {
            config,
            params: ordered,
        })
    }

    pub fn cast<U: Real>(&self) -> Tilt<U> {
        Tilt {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn prepare(&self, ex: &Seq2SeqExample, with_target: bool) -> Result<Prepared<T>> {
        Prepared::new(&self.config, ex, with_target)
    }

    /// Loss and per-parameter gradients (store order) for one example.
    pub fn loss_and_grads(&self, prep: &Prepared<T>, mut rng: DropoutRng<'_>) -> Result<(T, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let loss = loss_graph(&mut tape, &p, &self.config, prep, &mut rng)?;
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss)?;
        Ok((value, p.collect(&self.params, &mut grads)))
    }

    pub fn loss(&self, prep: &Prepared<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let loss = loss_graph(&mut tape, &p, &self.config, prep, &mut None)?;
        tape.value(loss).item()
    }

    pub fn memory(&self, prep: &Prepared<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let m = encode(&mut tape, &p, &self.config, prep, &mut None)?;
        Ok(tape.value(m).clone())
    }

    /// Greedy decoding from precomputed encoder memory.
    pub fn generate_from_memory(&self, memory: &Tensor<T>, max_len: usize) -> Result<String> {
        let mut ids = vec![BOS];
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let m = tape.constant(memory.clone());
            let logits = decoder_logits(&mut tape, &p, &self.config, m, &ids, &mut None)?;
            let next = argmax(tape.value(logits).row(ids.len() - 1));
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(decode_ids(&ids[1..]))
    }

    pub fn generate(&self, ex: &Seq2SeqExample, max_len: usize) -> Result<String> {
        let prep = self.prepare(ex, false)?;
        let memory = self.memory(&prep)?;
        self.generate_from_memory(&memory, max_len)
    }
}
