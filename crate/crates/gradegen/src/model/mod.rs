//! Encoder-decoder transformer with a complexity-embedding input channel.
//!
//! Every input position carries a token id and a complexity id. The input
//! representation is the elementwise sum of a token embedding, a learned
//! position embedding and, in the CE variant, a row of the complexity
//! embedding matrix M. M starts at zero, so an untrained CE model computes
//! exactly the same function as the prompt variant with the same remaining
//! parameters; training then moves M away from zero.
//!
//! Three variants share one architecture and differ only in input
//! construction:
//!
//! * `K2s`: the source is just the encoded keywords.
//! * `Prompt`: keywords, then `<sep>`, then one level token per requested
//!   level; levels travel as ordinary tokens.
//! * `Ce`: the prompt layout plus the complexity-embedding channel.
//!
//! Everything runs in f64 on the CPU and is deterministic given a seed:
//! initialization, batch order and the training loop all draw from seeded
//! generators, and forward passes process samples independently so batch
//! composition cannot perturb per-sample results.

mod checkpoint;
mod net;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use net::{batch_loss, embed, forward, gradients, loss, next_token_logits, Batch};
pub use params::{GroupChecksums, Parameters};
pub use train::{
    make_batches, train, train_from, train_two_stage, AdamState, TrainConfig, TrainResult,
    Trainable, TwoStageResult,
};

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::decode::GenerationRequest;
use crate::error::{Error, Result};
use crate::lexicon::ComplexityLexicon;
use crate::tokenizer::{word_context_complexity_ids, BpeVocab};

/// Which input channels the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Keywords-only input, no level information at all.
    K2s,
    /// Keywords plus level tokens in the source.
    Prompt,
    /// Level tokens plus the complexity-embedding channel.
    Ce,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::K2s => "K2S",
            Variant::Prompt => "PROMPT",
            Variant::Ce => "CE",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        match name.to_lowercase().as_str() {
            "k2s" => Ok(Variant::K2s),
            "prompt" => Ok(Variant::Prompt),
            "ce" => Ok(Variant::Ce),
            other => Err(Error::BadModelConfig {
                reason: format!("unknown variant {other:?} (expected k2s, prompt or ce)"),
            }),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Architecture hyperparameters. `num_complexity_ids` counts every id the
/// complexity channel can carry: punctuation, the lexical levels, out and
/// the special id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub num_complexity_ids: usize,
    pub max_positions: usize,
    pub variant: Variant,
}

impl ModelConfig {
    /// Desk-scale defaults sized for minutes of CPU training.
    pub fn for_vocab(vocab: &BpeVocab, lex: &ComplexityLexicon, variant: Variant) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 256,
            vocab_size: vocab.len(),
            num_complexity_ids: lex.num_complexity_ids() as usize,
            max_positions: 64,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ffn_width == 0
            || self.max_positions == 0
        {
            return Err(Error::BadModelConfig {
                reason: "every dimension must be at least 1".to_string(),
            });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::BadModelConfig {
                reason: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        if self.vocab_size < 5 {
            return Err(Error::BadModelConfig {
                reason: format!("vocab_size {} cannot hold the special tokens", self.vocab_size),
            });
        }
        // Punctuation, at least one lexical level, out, special.
        if self.num_complexity_ids < 4 {
            return Err(Error::BadModelConfig {
                reason: format!("num_complexity_ids {} below minimum 4", self.num_complexity_ids),
            });
        }
        Ok(())
    }
}

/// Builds the source sequence for a request: encoded keywords, then `<sep>`,
/// then one level token per requested level in ascending order. The K2s
/// variant stops after the keywords. Complexity ids: keyword sub-words get
/// the keyword's lexicon level, `<sep>` the special id, and each level token
/// its own level id.
pub fn build_input_sequence(
    request: &GenerationRequest,
    vocab: &BpeVocab,
    lex: &ComplexityLexicon,
    variant: Variant,
) -> Result<(Vec<u32>, Vec<u16>)> {
    if request.keywords.is_empty() {
        return Err(Error::BadRequest {
            reason: "a request needs at least one keyword".to_string(),
        });
    }
    let mut ids = Vec::new();
    let mut cids = Vec::new();
    for keyword in &request.keywords {
        let level = lex.level_of_word(keyword);
        for id in vocab.encode_word(keyword) {
            ids.push(id);
            cids.push(level);
        }
    }
    if variant != Variant::K2s {
        if request.levels.is_empty() {
            return Err(Error::BadRequest {
                reason: format!("the {} variant needs at least one requested level", variant),
            });
        }
        ids.push(vocab.specials().sep);
        cids.push(lex.special_id());
        let mut levels = request.levels.clone();
        levels.sort_unstable();
        levels.dedup();
        for level_id in levels {
            let token = vocab.specials().level_token(level_id).ok_or_else(|| {
                Error::BadRequest {
                    reason: format!("no level token for complexity id {level_id}"),
                }
            })?;
            ids.push(token);
            cids.push(level_id);
        }
    }
    Ok((ids, cids))
}

/// One training sample in tensor-ready form. `tgt_ids` is the decoder input
/// (`<s>` plus the sentence tokens), `labels` the same tokens shifted left
/// with `</s>` appended. `tgt_cids[t]` is the complexity id of the token at
/// decoder input position t, which during training is the exact word-context
/// id rather than the lookup-table majority used at inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub src_ids: Vec<u32>,
    pub src_cids: Vec<u16>,
    pub tgt_ids: Vec<u32>,
    pub tgt_cids: Vec<u16>,
    pub labels: Vec<u32>,
}

/// Encodes one dataset example for a given variant.
pub fn encode_example(
    example: &Example,
    vocab: &BpeVocab,
    lex: &ComplexityLexicon,
    variant: Variant,
) -> Result<EncodedExample> {
    let request = GenerationRequest {
        keywords: example.keywords.clone(),
        levels: lex.level_ids(&example.levels)?,
        max_len: 0,
    };
    let (src_ids, src_cids) = build_input_sequence(&request, vocab, lex, variant)?;
    let encoding = vocab.encode(&example.sentence);
    if encoding.ids.is_empty() {
        return Err(Error::BadRequest {
            reason: format!("example sentence encodes to nothing: {:?}", example.sentence),
        });
    }
    let word_cids = word_context_complexity_ids(&encoding, lex);
    let mut tgt_ids = Vec::with_capacity(encoding.ids.len() + 1);
    let mut tgt_cids = Vec::with_capacity(encoding.ids.len() + 1);
    tgt_ids.push(vocab.specials().bos);
    tgt_cids.push(lex.special_id());
    tgt_ids.extend_from_slice(&encoding.ids);
    tgt_cids.extend_from_slice(&word_cids);
    let mut labels = encoding.ids.clone();
    labels.push(vocab.specials().eos);
    Ok(EncodedExample {
        src_ids,
        src_cids,
        tgt_ids,
        tgt_cids,
        labels,
    })
}

/// Encodes a whole example list, failing on the first bad example.
pub fn encode_examples(
    examples: &[Example],
    vocab: &BpeVocab,
    lex: &ComplexityLexicon,
    variant: Variant,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| encode_example(e, vocab, lex, variant))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (BpeVocab, ComplexityLexicon) {
        let lex = ComplexityLexicon::from_entries(
            &["A", "B"],
            &[
                ("tree", "A"),
                ("need", "A"),
                ("water", "A"),
                ("the", "A"),
                ("peach", "B"),
                ("light", "B"),
            ],
        )
        .unwrap();
        let corpus: Vec<String> = vec![
            "the tree need water .".to_string(),
            "the peach light .".to_string(),
            "the tree need water .".to_string(),
        ];
        let vocab = train_bpe(&corpus, 50, &lex).unwrap();
        (vocab, lex)
    }

    #[test]
    fn prompt_input_is_keywords_sep_then_levels_ascending() {
        let (vocab, lex) = fixture();
        let request = GenerationRequest {
            keywords: vec!["tree".to_string(), "need".to_string()],
            // Deliberately unsorted with a duplicate.
            levels: vec![2, 1, 2],
            max_len: 16,
        };
        let (ids, cids) = build_input_sequence(&request, &vocab, &lex, Variant::Prompt).unwrap();
        let tree = vocab.encode_word("tree");
        let need = vocab.encode_word("need");
        let mut want_ids = Vec::new();
        want_ids.extend_from_slice(&tree);
        want_ids.extend_from_slice(&need);
        want_ids.push(vocab.specials().sep);
        want_ids.push(vocab.specials().level_token(1).unwrap());
        want_ids.push(vocab.specials().level_token(2).unwrap());
        assert_eq!(ids, want_ids);

        let mut want_cids = vec![1u16; tree.len() + need.len()];
        want_cids.push(lex.special_id());
        want_cids.push(1);
        want_cids.push(2);
        assert_eq!(cids, want_cids);
    }

    #[test]
    fn k2s_input_omits_separator_and_level_tokens() {
        let (vocab, lex) = fixture();
        let request = GenerationRequest {
            keywords: vec!["tree".to_string()],
            levels: vec![],
            max_len: 16,
        };
        let (ids, cids) = build_input_sequence(&request, &vocab, &lex, Variant::K2s).unwrap();
        assert_eq!(ids, vocab.encode_word("tree"));
        assert!(cids.iter().all(|&c| c == 1));
        // The same empty level set is an error for the other variants.
        assert!(build_input_sequence(&request, &vocab, &lex, Variant::Prompt).is_err());
        assert!(build_input_sequence(&request, &vocab, &lex, Variant::Ce).is_err());
    }

    // Oracle: output length must equal the sum of keyword sub-word counts,
    // plus separator and level tokens for the variants that use them.
    #[test]
    fn input_length_matches_arithmetic_oracle() {
        let (vocab, lex) = fixture();
        let pool = ["tree", "need", "water", "peach", "light", "the"];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..200 {
            let k = rng.random_range(1..=5);
            let keywords: Vec<String> = (0..k)
                .map(|_| pool[rng.random_range(0..pool.len())].to_string())
                .collect();
            let n_levels = rng.random_range(1..=2);
            let mut levels: Vec<u16> = vec![1, 2];
            levels.shuffle(&mut rng);
            levels.truncate(n_levels);
            let request = GenerationRequest {
                keywords: keywords.clone(),
                levels: levels.clone(),
                max_len: 32,
            };
            let subwords: usize = keywords.iter().map(|w| vocab.encode_word(w).len()).sum();
            for variant in [Variant::K2s, Variant::Prompt, Variant::Ce] {
                let (ids, cids) =
                    build_input_sequence(&request, &vocab, &lex, variant).unwrap();
                let want = match variant {
                    Variant::K2s => subwords,
                    _ => subwords + 1 + levels.len(),
                };
                assert_eq!(ids.len(), want);
                assert_eq!(cids.len(), ids.len());
            }
        }
    }

    #[test]
    fn unknown_keyword_characters_become_unk_not_errors() {
        let (vocab, lex) = fixture();
        let request = GenerationRequest {
            keywords: vec!["Ω".to_string()],
            levels: vec![1],
            max_len: 8,
        };
        let (ids, cids) = build_input_sequence(&request, &vocab, &lex, Variant::Prompt).unwrap();
        assert_eq!(ids[0], vocab.specials().unk);
        // An unknown word has no lexicon level, so its sub-words carry out.
        assert_eq!(cids[0], lex.out_id());
        // No keywords at all is an error.
        let empty = GenerationRequest {
            keywords: vec![],
            levels: vec![1],
            max_len: 8,
        };
        assert!(build_input_sequence(&empty, &vocab, &lex, Variant::Prompt).is_err());
    }

    #[test]
    fn encoded_examples_align_inputs_labels_and_complexity_ids() {
        let (vocab, lex) = fixture();
        let example = Example {
            keywords: vec!["tree".to_string()],
            levels: vec!["A".to_string()],
            sentence: "the tree need water .".to_string(),
            token_levels: vec![1, 1, 1, 1, 0],
        };
        let enc = encode_example(&example, &vocab, &lex, Variant::Ce).unwrap();
        assert_eq!(enc.tgt_ids.len(), enc.tgt_cids.len());
        assert_eq!(enc.tgt_ids.len(), enc.labels.len());
        assert_eq!(enc.tgt_ids[0], vocab.specials().bos);
        assert_eq!(enc.tgt_cids[0], lex.special_id());
        // Labels are the decoder input shifted left, closed by eos.
        assert_eq!(enc.labels[..enc.labels.len() - 1], enc.tgt_ids[1..]);
        assert_eq!(*enc.labels.last().unwrap(), vocab.specials().eos);
        // Teacher-forced complexity ids come from the word context.
        let encoding = vocab.encode(&example.sentence);
        let want = word_context_complexity_ids(&encoding, &lex);
        assert_eq!(enc.tgt_cids[1..], want);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let (vocab, lex) = fixture();
        let mut config = ModelConfig::for_vocab(&vocab, &lex, Variant::Ce);
        assert!(config.validate().is_ok());
        config.n_heads = 3;
        assert!(config.validate().is_err());
        config.n_heads = 0;
        assert!(config.validate().is_err());
        config = ModelConfig::for_vocab(&vocab, &lex, Variant::Ce);
        config.num_complexity_ids = 2;
        assert!(config.validate().is_err());
    }
}
