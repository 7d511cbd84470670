//! Parameter storage and initialization.
//!
//! All tensors live in named groups reachable through `groups` and
//! `groups_mut`, which walk the model in a fixed order. The optimizer, the
//! gradient accumulator, checkpointing and the checksum helper all share
//! that walk, so parameters and their gradients always line up by position.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    fn identity(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> LayerNormParams {
        LayerNormParams {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl AttentionParams {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            w_q: xavier(d, d, rng),
            b_q: Array1::zeros(d),
            w_k: xavier(d, d, rng),
            b_k: Array1::zeros(d),
            w_v: xavier(d, d, rng),
            b_v: Array1::zeros(d),
            w_o: xavier(d, d, rng),
            b_o: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> AttentionParams {
        AttentionParams {
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl FfnParams {
    fn init(d: usize, width: usize, rng: &mut ChaCha8Rng) -> FfnParams {
        FfnParams {
            w1: xavier(d, width, rng),
            b1: Array1::zeros(width),
            w2: xavier(width, d, rng),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(d: usize, width: usize) -> FfnParams {
        FfnParams {
            w1: Array2::zeros((d, width)),
            b1: Array1::zeros(width),
            w2: Array2::zeros((width, d)),
            b2: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FfnParams,
}

/// Every learnable tensor of one model, plus the config that shaped it.
/// The complexity embedding matrix is present only for the CE variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub token_embeddings: Array2<f64>,
    pub position_embeddings: Array2<f64>,
    pub complexity_embeddings: Option<Array2<f64>>,
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_norm: LayerNormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: LayerNormParams,
    pub output_weight: Array2<f64>,
    pub output_bias: Array1<f64>,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

/// Per-group checksums over the exact f64 bit patterns, for freeze checks.
pub type GroupChecksums = BTreeMap<String, u64>;

impl Parameters {
    /// Seeded initialization: embeddings uniform in (-0.1, 0.1), weight
    /// matrices Xavier-uniform, biases and layer-norm offsets zero, gains
    /// one. The complexity embedding starts at exactly zero, so a fresh CE
    /// model computes the same function as a fresh prompt model from the
    /// same seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Parameters> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb = |rows: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, d), |_| rng.random_range(-0.1..0.1))
        };
        let token_embeddings = emb(config.vocab_size, &mut rng);
        let position_embeddings = emb(config.max_positions, &mut rng);
        // Zero rows consume no randomness, keeping the other tensors
        // bit-identical across variants for a given seed.
        let complexity_embeddings = match config.variant {
            Variant::Ce => Some(Array2::zeros((config.num_complexity_ids, d))),
            _ => None,
        };
        let encoder = (0..config.n_layers)
            .map(|_| EncoderLayerParams {
                ln1: LayerNormParams::identity(d),
                attn: AttentionParams::init(d, &mut rng),
                ln2: LayerNormParams::identity(d),
                ffn: FfnParams::init(d, config.ffn_width, &mut rng),
            })
            .collect();
        let decoder = (0..config.n_layers)
            .map(|_| DecoderLayerParams {
                ln1: LayerNormParams::identity(d),
                self_attn: AttentionParams::init(d, &mut rng),
                ln2: LayerNormParams::identity(d),
                cross_attn: AttentionParams::init(d, &mut rng),
                ln3: LayerNormParams::identity(d),
                ffn: FfnParams::init(d, config.ffn_width, &mut rng),
            })
            .collect();
        Ok(Parameters {
            token_embeddings,
            position_embeddings,
            complexity_embeddings,
            encoder,
            encoder_norm: LayerNormParams::identity(d),
            decoder,
            decoder_norm: LayerNormParams::identity(d),
            output_weight: xavier(d, config.vocab_size, &mut rng),
            output_bias: Array1::zeros(config.vocab_size),
            config: config.clone(),
        })
    }

    /// All-zero parameters for a validated config; the shape checkpoint
    /// loading fills in.
    pub fn zeros(config: &ModelConfig) -> Result<Parameters> {
        config.validate()?;
        Ok(Self::zeros_unchecked(config))
    }

    /// Same shapes, all zeros. The gradient accumulator and Adam moments.
    pub fn zeros_like(&self) -> Parameters {
        Self::zeros_unchecked(&self.config)
    }

    fn zeros_unchecked(c: &ModelConfig) -> Parameters {
        let d = c.d_model;
        Parameters {
            config: c.clone(),
            token_embeddings: Array2::zeros((c.vocab_size, d)),
            position_embeddings: Array2::zeros((c.max_positions, d)),
            complexity_embeddings: match c.variant {
                Variant::Ce => Some(Array2::zeros((c.num_complexity_ids, d))),
                _ => None,
            },
            encoder: (0..c.n_layers)
                .map(|_| EncoderLayerParams {
                    ln1: LayerNormParams::zeros(d),
                    attn: AttentionParams::zeros(d),
                    ln2: LayerNormParams::zeros(d),
                    ffn: FfnParams::zeros(d, c.ffn_width),
                })
                .collect(),
            encoder_norm: LayerNormParams::zeros(d),
            decoder: (0..c.n_layers)
                .map(|_| DecoderLayerParams {
                    ln1: LayerNormParams::zeros(d),
                    self_attn: AttentionParams::zeros(d),
                    ln2: LayerNormParams::zeros(d),
                    cross_attn: AttentionParams::zeros(d),
                    ln3: LayerNormParams::zeros(d),
                    ffn: FfnParams::zeros(d, c.ffn_width),
                })
                .collect(),
            decoder_norm: LayerNormParams::zeros(d),
            output_weight: Array2::zeros((d, c.vocab_size)),
            output_bias: Array1::zeros(c.vocab_size),
        }
    }

    /// Re-targets these parameters at another variant, attaching a zero
    /// complexity embedding when the target needs one and dropping it
    /// otherwise. Everything else is copied bit for bit. This is how a
    /// trained prompt model becomes the starting point for CE fine-tuning.
    pub fn to_variant(&self, variant: Variant) -> Parameters {
        let mut out = self.clone();
        out.config.variant = variant;
        out.complexity_embeddings = match variant {
            Variant::Ce => Some(self.complexity_embeddings.clone().unwrap_or_else(|| {
                Array2::zeros((self.config.num_complexity_ids, self.config.d_model))
            })),
            _ => None,
        };
        out
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|(_, s)| s.len()).sum()
    }

    /// Named views of every tensor, in a fixed walk order.
    pub fn groups(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        out.push(("token_embeddings".into(), slice2(&self.token_embeddings)));
        out.push((
            "position_embeddings".into(),
            slice2(&self.position_embeddings),
        ));
        if let Some(m) = &self.complexity_embeddings {
            out.push(("complexity_embeddings".into(), slice2(m)));
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            push_ln(&mut out, format!("encoder.{i}.ln1"), &layer.ln1);
            push_attn(&mut out, format!("encoder.{i}.attn"), &layer.attn);
            push_ln(&mut out, format!("encoder.{i}.ln2"), &layer.ln2);
            push_ffn(&mut out, format!("encoder.{i}.ffn"), &layer.ffn);
        }
        push_ln(&mut out, "encoder_norm".into(), &self.encoder_norm);
        for (i, layer) in self.decoder.iter().enumerate() {
            push_ln(&mut out, format!("decoder.{i}.ln1"), &layer.ln1);
            push_attn(&mut out, format!("decoder.{i}.self_attn"), &layer.self_attn);
            push_ln(&mut out, format!("decoder.{i}.ln2"), &layer.ln2);
            push_attn(
                &mut out,
                format!("decoder.{i}.cross_attn"),
                &layer.cross_attn,
            );
            push_ln(&mut out, format!("decoder.{i}.ln3"), &layer.ln3);
            push_ffn(&mut out, format!("decoder.{i}.ffn"), &layer.ffn);
        }
        push_ln(&mut out, "decoder_norm".into(), &self.decoder_norm);
        out.push(("output.weight".into(), slice2(&self.output_weight)));
        out.push(("output.bias".into(), self.output_bias.as_slice().unwrap()));
        out
    }

    /// Mutable twin of `groups`, same names and order.
    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push((
            "token_embeddings".into(),
            slice2_mut(&mut self.token_embeddings),
        ));
        out.push((
            "position_embeddings".into(),
            slice2_mut(&mut self.position_embeddings),
        ));
        if let Some(m) = &mut self.complexity_embeddings {
            out.push(("complexity_embeddings".into(), slice2_mut(m)));
        }
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            push_ln_mut(&mut out, format!("encoder.{i}.ln1"), &mut layer.ln1);
            push_attn_mut(&mut out, format!("encoder.{i}.attn"), &mut layer.attn);
            push_ln_mut(&mut out, format!("encoder.{i}.ln2"), &mut layer.ln2);
            push_ffn_mut(&mut out, format!("encoder.{i}.ffn"), &mut layer.ffn);
        }
        push_ln_mut(&mut out, "encoder_norm".into(), &mut self.encoder_norm);
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            push_ln_mut(&mut out, format!("decoder.{i}.ln1"), &mut layer.ln1);
            push_attn_mut(
                &mut out,
                format!("decoder.{i}.self_attn"),
                &mut layer.self_attn,
            );
            push_ln_mut(&mut out, format!("decoder.{i}.ln2"), &mut layer.ln2);
            push_attn_mut(
                &mut out,
                format!("decoder.{i}.cross_attn"),
                &mut layer.cross_attn,
            );
            push_ln_mut(&mut out, format!("decoder.{i}.ln3"), &mut layer.ln3);
            push_ffn_mut(&mut out, format!("decoder.{i}.ffn"), &mut layer.ffn);
        }
        push_ln_mut(&mut out, "decoder_norm".into(), &mut self.decoder_norm);
        out.push(("output.weight".into(), slice2_mut(&mut self.output_weight)));
        out.push((
            "output.bias".into(),
            self.output_bias.as_slice_mut().unwrap(),
        ));
        out
    }

    /// Group shapes for serialization, in walk order.
    pub fn group_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        shapes.insert(
            "token_embeddings".into(),
            self.token_embeddings.shape().to_vec(),
        );
        shapes.insert(
            "position_embeddings".into(),
            self.position_embeddings.shape().to_vec(),
        );
        if let Some(m) = &self.complexity_embeddings {
            shapes.insert("complexity_embeddings".into(), m.shape().to_vec());
        }
        shapes.insert("output.weight".into(), self.output_weight.shape().to_vec());
        self.groups()
            .into_iter()
            .map(|(name, data)| {
                let shape = shapes
                    .get(&name)
                    .cloned()
                    .unwrap_or_else(|| infer_shape(&name, data.len(), &self.config));
                (name, shape)
            })
            .collect()
    }

    /// Checksums every group's exact bit pattern. Two parameter sets with
    /// equal checksums for a group hold bit-identical values there.
    pub fn checksums(&self) -> GroupChecksums {
        self.groups()
            .into_iter()
            .map(|(name, data)| {
                let mut h = DefaultHasher::new();
                for v in data {
                    h.write_u64(v.to_bits());
                }
                (name, h.finish())
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|(_, data)| data.iter().all(|v| v.is_finite()))
    }
}

fn infer_shape(name: &str, len: usize, config: &ModelConfig) -> Vec<usize> {
    let d = config.d_model;
    if name.ends_with(".w1") {
        vec![d, config.ffn_width]
    } else if name.ends_with(".w2") {
        vec![config.ffn_width, d]
    } else if name.contains(".w_") {
        vec![d, d]
    } else {
        // Gains, biases and other vectors.
        vec![len]
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

fn push_ln<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: String, ln: &'a LayerNormParams) {
    out.push((format!("{prefix}.gain"), ln.gain.as_slice().unwrap()));
    out.push((format!("{prefix}.bias"), ln.bias.as_slice().unwrap()));
}

fn push_ln_mut<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    prefix: String,
    ln: &'a mut LayerNormParams,
) {
    out.push((format!("{prefix}.gain"), ln.gain.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.bias"), ln.bias.as_slice_mut().unwrap()));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: String, attn: &'a AttentionParams) {
    out.push((format!("{prefix}.w_q"), slice2(&attn.w_q)));
    out.push((format!("{prefix}.b_q"), attn.b_q.as_slice().unwrap()));
    out.push((format!("{prefix}.w_k"), slice2(&attn.w_k)));
    out.push((format!("{prefix}.b_k"), attn.b_k.as_slice().unwrap()));
    out.push((format!("{prefix}.w_v"), slice2(&attn.w_v)));
    out.push((format!("{prefix}.b_v"), attn.b_v.as_slice().unwrap()));
    out.push((format!("{prefix}.w_o"), slice2(&attn.w_o)));
    out.push((format!("{prefix}.b_o"), attn.b_o.as_slice().unwrap()));
}

fn push_attn_mut<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    prefix: String,
    attn: &'a mut AttentionParams,
) {
    out.push((format!("{prefix}.w_q"), slice2_mut(&mut attn.w_q)));
    out.push((format!("{prefix}.b_q"), attn.b_q.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.w_k"), slice2_mut(&mut attn.w_k)));
    out.push((format!("{prefix}.b_k"), attn.b_k.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.w_v"), slice2_mut(&mut attn.w_v)));
    out.push((format!("{prefix}.b_v"), attn.b_v.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.w_o"), slice2_mut(&mut attn.w_o)));
    out.push((format!("{prefix}.b_o"), attn.b_o.as_slice_mut().unwrap()));
}

fn push_ffn<'a>(out: &mut Vec<(String, &'a [f64])>, prefix: String, ffn: &'a FfnParams) {
    out.push((format!("{prefix}.w1"), slice2(&ffn.w1)));
    out.push((format!("{prefix}.b1"), ffn.b1.as_slice().unwrap()));
    out.push((format!("{prefix}.w2"), slice2(&ffn.w2)));
    out.push((format!("{prefix}.b2"), ffn.b2.as_slice().unwrap()));
}

fn push_ffn_mut<'a>(
    out: &mut Vec<(String, &'a mut [f64])>,
    prefix: String,
    ffn: &'a mut FfnParams,
) {
    out.push((format!("{prefix}.w1"), slice2_mut(&mut ffn.w1)));
    out.push((format!("{prefix}.b1"), ffn.b1.as_slice_mut().unwrap()));
    out.push((format!("{prefix}.w2"), slice2_mut(&mut ffn.w2)));
    out.push((format!("{prefix}.b2"), ffn.b2.as_slice_mut().unwrap()));
}
