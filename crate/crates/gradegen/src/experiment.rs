//! The end-to-end comparison: three input variants, three decoders, one
//! shared synthetic dataset.
//!
//! One experiment builds a language and dataset from its seed, trains every
//! variant under identical hyperparameters for each training seed, decodes
//! a held-out slice with greedy, masked and beam-plus-rerank decoding, and
//! scores everything with the constraint and quality metrics. The report
//! embeds the configuration and is a pure function of it: running the same
//! experiment twice yields byte-identical JSON.
//!
//! Generations without a single non-punctuation word cannot be scored (the
//! corpus accuracy metric rejects them), so such outputs are dropped from
//! the evaluation pairs and surfaced as a `degenerate` count instead of
//! silently inflating or crashing the run. Trained models rarely hit this;
//! the count keeps it honest when they do.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_dataset, Dataset, Example, LanguageConfig, SyntheticGrammar};
use crate::decode::{Generator, GenerationRequest};
use crate::error::{Error, Result};
use crate::lexicon::{ComplexityLexicon, PUNCTUATION_ID};
use crate::metrics::evaluate;
use crate::model::{encode_examples, train, ModelConfig, Parameters, TrainConfig, Variant};
use crate::rerank::rerank;
use crate::tokenizer::{build_complexity_table, train_bpe, BpeVocab, ComplexityTable};
use crate::words;

/// Everything an experiment depends on. Defaults give the desk-scale run:
/// a 10k-sentence corpus and a small model that trains in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed: language, dataset split and the base training seed.
    pub seed: u64,
    pub num_levels: usize,
    pub entries_per_level: usize,
    /// Sentences drawn from the grammar before selection.
    pub corpus_size: usize,
    /// Minimum in-lexicon fraction for a sentence to be kept.
    pub select_threshold: f64,
    /// Train and valid fractions; the rest is the test split.
    pub split: (f64, f64),
    pub merges: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    /// Desk-scale schedule: short warmup, higher peak than the full-scale
    /// default, because runs last hundreds of steps rather than tens of
    /// thousands.
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub max_tokens_per_batch: usize,
    /// Training seeds used: `seed`, `seed + 1`, ... `seed + num_seeds - 1`.
    pub num_seeds: usize,
    pub beam_width: usize,
    pub max_len: usize,
    /// Test examples scored per cell (decoding dominates the cost).
    pub eval_limit: usize,
    pub stem_matching: bool,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            seed: 7,
            num_levels: 4,
            entries_per_level: 100,
            corpus_size: 10_000,
            select_threshold: 0.9,
            split: (0.9, 0.05),
            merges: 300,
            d_model: 32,
            n_layers: 1,
            n_heads: 4,
            ffn_width: 64,
            max_positions: 64,
            peak_lr: 3e-3,
            warmup_steps: 40,
            epochs: 2,
            max_tokens_per_batch: 2048,
            num_seeds: 3,
            beam_width: 4,
            max_len: 32,
            eval_limit: 60,
            stem_matching: false,
        }
    }
}

/// The decoding strategies an experiment compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Greedy,
    Masked,
    BeamRerank,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [
        DecoderKind::Greedy,
        DecoderKind::Masked,
        DecoderKind::BeamRerank,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DecoderKind::Greedy => "greedy",
            DecoderKind::Masked => "masked",
            DecoderKind::BeamRerank => "beam+rerank",
        }
    }
}

/// One row of metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub keyword_coverage: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub entropy2: f64,
    pub entropy4: f64,
}

impl MetricRow {
    fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        MetricRow {
            keyword_coverage: avg(|r| r.keyword_coverage),
            accuracy: avg(|r| r.accuracy),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            f1: avg(|r| r.f1),
            bleu2: avg(|r| r.bleu2),
            bleu4: avg(|r| r.bleu4),
            distinct1: avg(|r| r.distinct1),
            distinct2: avg(|r| r.distinct2),
            entropy2: avg(|r| r.entropy2),
            entropy4: avg(|r| r.entropy4),
        }
    }
}

/// One (variant, decoder, training seed) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub train_seed: u64,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    pub metrics: MetricRow,
    /// Generations dropped for having no non-punctuation word.
    pub degenerate: usize,
    /// Pairs actually scored.
    pub evaluated: usize,
}

/// One (variant, decoder) cell: per-seed runs and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub decoder: String,
    pub runs: Vec<SeedOutcome>,
    pub mean: MetricRow,
}

/// Sizes of the shared dataset, for the report header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub lexicon_entries: usize,
    pub vocab_size: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub evaluated: usize,
}

/// The full experiment result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_seeds: Vec<u64>,
    pub dataset: DatasetSummary,
    /// References scored against their own requests: the 1.0 sanity row.
    pub reference: MetricRow,
    /// Variant-major, decoder-minor; 9 cells.
    pub cells: Vec<Cell>,
}

impl ExperimentReport {
    /// Mean row of one cell, looked up by labels.
    pub fn mean_row(&self, variant: &str, decoder: &str) -> Option<&MetricRow> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.decoder == decoder)
            .map(|c| &c.mean)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ExperimentReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Renders the comparison as a fixed-width text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "experiment seed {} | dataset train/valid/test {}/{}/{} | {} test examples scored",
            self.config.seed,
            self.dataset.train,
            self.dataset.valid,
            self.dataset.test,
            self.dataset.evaluated,
        );
        let _ = writeln!(
            out,
            "{:<8} {:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>5}",
            "variant", "decoder", "K-C", "ACC", "P", "R", "F1", "BLEU-2", "Dist-2", "degen"
        );
        let row = |out: &mut String, variant: &str, decoder: &str, m: &MetricRow, degen: String| {
            let _ = writeln!(
                out,
                "{:<8} {:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>5}",
                variant,
                decoder,
                m.keyword_coverage,
                m.accuracy,
                m.precision,
                m.recall,
                m.f1,
                m.bleu2,
                m.distinct2,
                degen,
            );
        };
        row(&mut out, "refs", "-", &self.reference, "-".to_string());
        for cell in &self.cells {
            let degen: usize = cell.runs.iter().map(|r| r.degenerate).sum();
            row(&mut out, &cell.variant, &cell.decoder, &cell.mean, degen.to_string());
        }
        out
    }
}

/// Text of one decoded generation for an example's request.
fn generate_one(
    generator: &Generator<'_, Parameters>,
    decoder: DecoderKind,
    request: &GenerationRequest,
    beam_width: usize,
    lex: &ComplexityLexicon,
) -> Result<String> {
    match decoder {
        DecoderKind::Greedy => Ok(generator.greedy(request)?.text),
        DecoderKind::Masked => Ok(generator.masked(request)?.text),
        DecoderKind::BeamRerank => {
            let candidates = generator.beam(request, beam_width)?;
            Ok(rerank(&candidates, request, lex)?.text.clone())
        }
    }
}

fn has_content_word(text: &str, lex: &ComplexityLexicon) -> bool {
    words::split_words(text)
        .iter()
        .any(|w| lex.level_of_word(w) != PUNCTUATION_ID)
}

/// Scores generations against the eval slice, dropping degenerate pairs.
fn score_generations(
    examples: &[Example],
    generations: &[String],
    lex: &ComplexityLexicon,
    stem_matching: bool,
) -> Result<(MetricRow, usize, usize)> {
    let mut kept_examples: Vec<Example> = Vec::with_capacity(examples.len());
    let mut kept_texts: Vec<String> = Vec::with_capacity(examples.len());
    for (ex, text) in examples.iter().zip(generations) {
        if has_content_word(text, lex) {
            kept_examples.push(ex.clone());
            kept_texts.push(text.clone());
        }
    }
    if kept_examples.is_empty() {
        return Err(Error::BadMetricInput {
            reason: "every generation was degenerate (no content words)".to_string(),
        });
    }
    let report = evaluate(&kept_examples, &kept_texts, lex, stem_matching)?;
    let row = MetricRow {
        keyword_coverage: report.constraint.keyword_coverage,
        accuracy: report.constraint.accuracy,
        precision: report.constraint.precision,
        recall: report.constraint.recall,
        f1: report.constraint.f1,
        bleu2: report.quality.bleu2,
        bleu4: report.quality.bleu4,
        distinct1: report.quality.distinct1,
        distinct2: report.quality.distinct2,
        entropy2: report.quality.entropy2,
        entropy4: report.quality.entropy4,
    };
    let degenerate = examples.len() - kept_examples.len();
    Ok((row, degenerate, kept_examples.len()))
}

/// One training run plus its three decoder evaluations.
struct RunResult {
    train_seed: u64,
    final_train_loss: f64,
    final_valid_loss: f64,
    by_decoder: Vec<(MetricRow, usize, usize)>,
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    config: &ExperimentConfig,
    model_config: &ModelConfig,
    train_seed: u64,
    encoded_train: &[crate::model::EncodedExample],
    encoded_valid: &[crate::model::EncodedExample],
    eval_examples: &[Example],
    requests: &[GenerationRequest],
    vocab: &BpeVocab,
    table: &ComplexityTable,
    lex: &ComplexityLexicon,
) -> Result<RunResult> {
    let train_cfg = TrainConfig {
        peak_lr: config.peak_lr,
        warmup_steps: config.warmup_steps,
        epochs: config.epochs,
        max_tokens_per_batch: config.max_tokens_per_batch,
        seed: train_seed,
        ..TrainConfig::default()
    };
    let result = train(
        model_config,
        &train_cfg,
        encoded_train,
        encoded_valid,
        vocab.specials().pad,
        lex.special_id(),
    )?;
    let generator = Generator::new(&result.params, vocab, table, lex, model_config.variant);
    let mut by_decoder = Vec::with_capacity(DecoderKind::ALL.len());
    for decoder in DecoderKind::ALL {
        let mut generations = Vec::with_capacity(requests.len());
        for request in requests {
            generations.push(generate_one(
                &generator,
                decoder,
                request,
                config.beam_width,
                lex,
            )?);
        }
        by_decoder.push(score_generations(
            eval_examples,
            &generations,
            lex,
            config.stem_matching,
        )?);
    }
    Ok(RunResult {
        train_seed,
        // Zero stands in when a loss list is empty (no steps, no valid
        // split); JSON cannot carry a NaN marker.
        final_train_loss: result.train_losses.last().copied().unwrap_or(0.0),
        final_valid_loss: result.valid_losses.last().copied().unwrap_or(0.0),
        by_decoder,
    })
}

/// Runs the whole grid. Independent (variant, seed) runs execute on their
/// own threads; results are assembled in a fixed order, so the report does
/// not depend on scheduling.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    if config.num_seeds == 0 {
        return Err(Error::BadRequest {
            reason: "an experiment needs at least one training seed".to_string(),
        });
    }
    let grammar = SyntheticGrammar::new(&LanguageConfig {
        num_levels: config.num_levels,
        entries_per_level: config.entries_per_level,
        seed: config.seed,
    })?;
    let lex = grammar.lexicon()?;
    let dataset: Dataset = build_dataset(
        &grammar,
        &lex,
        config.corpus_size,
        config.select_threshold,
        config.split,
    )?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_sentences: Vec<String> = dataset.train.iter().map(|e| e.sentence.clone()).collect();
    let vocab = train_bpe(&train_sentences, config.merges, &lex)?;
    let table = build_complexity_table(&vocab, &lex)?;

    let eval_examples = &dataset.test[..config.eval_limit.min(dataset.test.len())];
    let requests: Vec<GenerationRequest> = eval_examples
        .iter()
        .map(|ex| {
            Ok(GenerationRequest {
                keywords: ex.keywords.clone(),
                levels: lex.level_ids(&ex.levels)?,
                max_len: config.max_len,
            })
        })
        .collect::<Result<_>>()?;

    let variants = [Variant::K2s, Variant::Prompt, Variant::Ce];
    let model_configs: Vec<ModelConfig> = variants
        .iter()
        .map(|&variant| ModelConfig {
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            ffn_width: config.ffn_width,
            vocab_size: vocab.len(),
            num_complexity_ids: lex.num_complexity_ids(),
            max_positions: config.max_positions,
            variant,
        })
        .collect();
    let encoded: Vec<(Vec<_>, Vec<_>)> = variants
        .iter()
        .map(|&variant| {
            Ok((
                encode_examples(&dataset.train, &vocab, &lex, variant)?,
                encode_examples(&dataset.valid, &vocab, &lex, variant)?,
            ))
        })
        .collect::<Result<_>>()?;
    let train_seeds: Vec<u64> = (0..config.num_seeds as u64)
        .map(|i| config.seed.wrapping_add(i))
        .collect();

    // Train and evaluate the 3 x num_seeds grid, one thread per run.
    let mut slots: Vec<Vec<Option<Result<RunResult>>>> = Vec::new();
    for _ in &variants {
        slots.push((0..train_seeds.len()).map(|_| None).collect());
    }
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (vi, model_config) in model_configs.iter().enumerate() {
            for &train_seed in &train_seeds {
                let (encoded_train, encoded_valid) = (&encoded[vi].0, &encoded[vi].1);
                let (vocab, table, lex) = (&vocab, &table, &lex);
                let requests = &requests;
                handles.push((
                    vi,
                    scope.spawn(move || {
                        run_one(
                            config,
                            model_config,
                            train_seed,
                            encoded_train,
                            encoded_valid,
                            eval_examples,
                            requests,
                            vocab,
                            table,
                            lex,
                        )
                    }),
                ));
            }
        }
        let mut next_seed_slot = vec![0usize; variants.len()];
        for (vi, handle) in handles {
            let si = next_seed_slot[vi];
            next_seed_slot[vi] += 1;
            slots[vi][si] = Some(handle.join().unwrap_or_else(|_| {
                Err(Error::BadRequest {
                    reason: "a training thread panicked".to_string(),
                })
            }));
        }
    });

    let mut cells = Vec::with_capacity(variants.len() * DecoderKind::ALL.len());
    for (vi, &variant) in variants.iter().enumerate() {
        let runs: Vec<RunResult> = std::mem::take(&mut slots[vi])
            .into_iter()
            .map(|r| r.expect("every slot is filled"))
            .collect::<Result<_>>()?;
        for (di, decoder) in DecoderKind::ALL.iter().enumerate() {
            let outcomes: Vec<SeedOutcome> = runs
                .iter()
                .map(|run| {
                    let (metrics, degenerate, evaluated) = run.by_decoder[di].clone();
                    SeedOutcome {
                        train_seed: run.train_seed,
                        final_train_loss: run.final_train_loss,
                        final_valid_loss: run.final_valid_loss,
                        metrics,
                        degenerate,
                        evaluated,
                    }
                })
                .collect();
            let mean =
                MetricRow::mean(&outcomes.iter().map(|o| o.metrics.clone()).collect::<Vec<_>>());
            cells.push(Cell {
                variant: variant.label().to_string(),
                decoder: decoder.label().to_string(),
                runs: outcomes,
                mean,
            });
        }
    }

    // References answer their own requests perfectly by construction.
    let reference_texts: Vec<String> =
        eval_examples.iter().map(|e| e.sentence.clone()).collect();
    let (reference, _, _) =
        score_generations(eval_examples, &reference_texts, &lex, config.stem_matching)?;

    Ok(ExperimentReport {
        config: config.clone(),
        train_seeds,
        dataset: DatasetSummary {
            lexicon_entries: lex.len(),
            vocab_size: vocab.len(),
            train: dataset.train.len(),
            valid: dataset.valid.len(),
            test: dataset.test.len(),
            evaluated: eval_examples.len(),
        },
        reference,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 5,
            num_levels: 2,
            entries_per_level: 20,
            corpus_size: 260,
            merges: 80,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            max_positions: 64,
            peak_lr: 3e-3,
            warmup_steps: 5,
            epochs: 1,
            max_tokens_per_batch: 512,
            num_seeds: 2,
            beam_width: 2,
            max_len: 16,
            eval_limit: 6,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn micro_experiment_is_deterministic_and_well_formed() {
        let config = micro_config();
        let report = run_experiment(&config).unwrap();

        // Shape: 3 variants x 3 decoders, variant-major, num_seeds runs each.
        assert_eq!(report.cells.len(), 9);
        let labels: Vec<(String, String)> = report
            .cells
            .iter()
            .map(|c| (c.variant.clone(), c.decoder.clone()))
            .collect();
        assert_eq!(labels[0], ("k2s".to_string(), "greedy".to_string()));
        assert_eq!(labels[4], ("prompt".to_string(), "masked".to_string()));
        assert_eq!(labels[8], ("ce".to_string(), "beam+rerank".to_string()));
        for cell in &report.cells {
            assert_eq!(cell.runs.len(), 2);
            for run in &cell.runs {
                assert!(run.final_train_loss.is_finite());
                assert!(run.evaluated + run.degenerate == report.dataset.evaluated);
            }
            // The recorded mean is the arithmetic mean of the runs.
            let rows: Vec<MetricRow> = cell.runs.iter().map(|r| r.metrics.clone()).collect();
            assert_eq!(cell.mean, MetricRow::mean(&rows));
        }
        assert_eq!(report.train_seeds, vec![5, 6]);

        // References satisfy their own constraints exactly.
        assert_eq!(report.reference.keyword_coverage, 1.0);
        assert_eq!(report.reference.accuracy, 1.0);
        assert_eq!(report.reference.precision, 1.0);
        assert_eq!(report.reference.recall, 1.0);
        assert_eq!(report.reference.f1, 1.0);

        // Masked decoding satisfies the level constraint by construction.
        for cell in &report.cells {
            if cell.decoder == "masked" {
                for run in &cell.runs {
                    assert_eq!(run.degenerate, 0);
                    assert!(
                        run.metrics.accuracy == 1.0,
                        "masked {} accuracy {}",
                        cell.variant,
                        run.metrics.accuracy
                    );
                }
            }
        }

        // Byte-identical on a second run, and the JSON round-trips.
        let again = run_experiment(&config).unwrap();
        let a = report.to_json().unwrap();
        let b = again.to_json().unwrap();
        assert_eq!(a, b);
        assert_eq!(ExperimentReport::from_json(&a).unwrap(), report);

        // The table mentions every cell and the reference row.
        let table = report.render_table();
        for needle in ["refs", "k2s", "prompt", "ce", "greedy", "masked", "beam+rerank"] {
            assert!(table.contains(needle), "table lacks {needle}:\n{table}");
        }
        assert!(report.mean_row("ce", "greedy").is_some());
        assert!(report.mean_row("ce", "nope").is_none());
    }

    #[test]
    fn zero_seeds_is_rejected() {
        let config = ExperimentConfig {
            num_seeds: 0,
            ..micro_config()
        };
        assert!(run_experiment(&config).is_err());
    }
}
