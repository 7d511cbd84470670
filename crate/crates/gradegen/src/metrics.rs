//! Constraint metrics and text-quality metrics.
//!
//! Constraint metrics score a generated sentence against its request:
//! keyword coverage (did the keywords make it in), level accuracy (are all
//! words inside the requested levels) and level precision/recall/F1 (is
//! every requested level represented, and nothing else). All three average
//! per-sample ratios over the evaluation set. Quality metrics are corpus
//! BLEU with uniform weights and clipping, Distinct-n and Entropy-n.
//!
//! Keyword matching is case-insensitive and whole-word, with an optional
//! suffix-stemming mode (strip one of ing/ed/es/s) that is on by default so
//! "needs" satisfies the keyword "need".

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::lexicon::{ComplexityLexicon, PUNCTUATION_ID};
use crate::words;

/// Strips one inflection suffix (ing, ed, es, s), keeping at least two
/// characters of stem.
pub fn stem(word: &str) -> &str {
    for suffix in ["ing", "ed", "es", "s"] {
        if let Some(rest) = word.strip_suffix(suffix) {
            if rest.chars().count() >= 2 {
                return rest;
            }
        }
    }
    word
}

/// Case-insensitive whole-word keyword match, optionally up to stemming.
fn keyword_matches(word_lower: &str, keyword_lower: &str, stem_mode: bool) -> bool {
    word_lower == keyword_lower
        || (stem_mode && stem(word_lower) == stem(keyword_lower))
}

/// Per-sample counts behind every constraint metric.
///
/// `count_c1` of `m` keywords occur in the sentence; `count_c2` of `t`
/// non-punctuation words lie inside the requested levels; `count_c3` of the
/// `n` requested levels appear among the `g` distinct levels present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBreakdown {
    pub count_c1: usize,
    pub m: usize,
    pub count_c2: usize,
    pub t: usize,
    pub count_c3: usize,
    pub n: usize,
    pub g: usize,
}

/// Computes the counts for one (keywords, levels, sentence) triple.
pub fn sample_breakdown(
    keywords: &[String],
    level_ids: &[u16],
    sentence: &str,
    lex: &ComplexityLexicon,
    stem_mode: bool,
) -> SampleBreakdown {
    let ws = words::split_words(sentence);
    let lower: Vec<String> = ws.iter().map(|w| w.to_lowercase()).collect();

    let count_c1 = keywords
        .iter()
        .filter(|k| {
            let k = k.to_lowercase();
            lower.iter().any(|w| keyword_matches(w, &k, stem_mode))
        })
        .count();

    let mut requested: Vec<u16> = level_ids.to_vec();
    requested.sort_unstable();
    requested.dedup();

    let mut t = 0usize;
    let mut count_c2 = 0usize;
    let mut present: Vec<u16> = Vec::new();
    for w in &ws {
        let id = lex.level_of_word(w);
        if id == PUNCTUATION_ID {
            continue;
        }
        t += 1;
        if requested.binary_search(&id).is_ok() {
            count_c2 += 1;
        }
        if lex.is_lexical_id(id) && !present.contains(&id) {
            present.push(id);
        }
    }
    let g = present.len();
    let count_c3 = present
        .iter()
        .filter(|id| requested.binary_search(id).is_ok())
        .count();

    SampleBreakdown {
        count_c1,
        m: keywords.len(),
        count_c2,
        t,
        count_c3,
        n: requested.len(),
        g,
    }
}

/// Per-sentence accuracy for reranking: fraction of non-punctuation words
/// inside the requested levels, 0 when the sentence has none.
pub fn sentence_accuracy(b: &SampleBreakdown) -> f64 {
    if b.t == 0 {
        0.0
    } else {
        b.count_c2 as f64 / b.t as f64
    }
}

/// Per-sentence level F1 for reranking: 0 when no level is requested or
/// present.
pub fn sentence_f1(b: &SampleBreakdown) -> f64 {
    if b.n + b.g == 0 {
        0.0
    } else {
        2.0 * b.count_c3 as f64 / (b.n + b.g) as f64
    }
}

// ----------------------------------------------------------------------
// Corpus-level constraint metrics
// ----------------------------------------------------------------------

/// Keyword coverage: mean fraction of requested keywords present.
pub fn keyword_metric(samples: &[(Vec<String>, String)], stem_mode: bool) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::BadMetricInput {
            reason: "keyword metric over zero samples".to_string(),
        });
    }
    let mut sum = 0.0;
    for (i, (keywords, sentence)) in samples.iter().enumerate() {
        if keywords.is_empty() {
            return Err(Error::BadMetricInput {
                reason: format!("sample {i} has no keywords"),
            });
        }
        let lower: Vec<String> = words::split_words(sentence)
            .iter()
            .map(|w| w.to_lowercase())
            .collect();
        let count = keywords
            .iter()
            .filter(|k| {
                let k = k.to_lowercase();
                lower.iter().any(|w| keyword_matches(w, &k, stem_mode))
            })
            .count();
        sum += count as f64 / keywords.len() as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Level accuracy: mean fraction of non-punctuation words inside the
/// requested levels. Errors when any sentence has no non-punctuation word.
pub fn accuracy_metric(samples: &[(Vec<u16>, String)], lex: &ComplexityLexicon) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::BadMetricInput {
            reason: "accuracy metric over zero samples".to_string(),
        });
    }
    let mut sum = 0.0;
    for (i, (levels, sentence)) in samples.iter().enumerate() {
        let b = sample_breakdown(&[], levels, sentence, lex, false);
        if b.t == 0 {
            return Err(Error::BadMetricInput {
                reason: format!("sample {i} has no non-punctuation word"),
            });
        }
        sum += b.count_c2 as f64 / b.t as f64;
    }
    Ok(sum / samples.len() as f64)
}

/// Level precision, recall and F1 between requested and realized level
/// sets. Samples with no realized level contribute 0 to precision and F1.
pub fn level_prf_metric(
    samples: &[(Vec<u16>, String)],
    lex: &ComplexityLexicon,
) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(Error::BadMetricInput {
            reason: "level P/R/F1 over zero samples".to_string(),
        });
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (i, (levels, sentence)) in samples.iter().enumerate() {
        let b = sample_breakdown(&[], levels, sentence, lex, false);
        if b.n == 0 {
            return Err(Error::BadMetricInput {
                reason: format!("sample {i} requests no level"),
            });
        }
        if b.g > 0 {
            p_sum += b.count_c3 as f64 / b.g as f64;
        }
        r_sum += b.count_c3 as f64 / b.n as f64;
        f_sum += 2.0 * b.count_c3 as f64 / (b.n + b.g) as f64;
    }
    let n = samples.len() as f64;
    Ok((p_sum / n, r_sum / n, f_sum / n))
}

// ----------------------------------------------------------------------
// Quality metrics
// ----------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut counts: BTreeMap<&[String], u64> = BTreeMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n: uniform weights over orders 1..=n, clipped counts, and a
/// brevity penalty. Any vanishing order makes the score 0 (no smoothing).
pub fn bleu_n(candidates: &[String], references: &[String], n: usize) -> Result<f64> {
    if n != 2 && n != 4 {
        return Err(Error::BadMetricInput {
            reason: format!("BLEU order {n} (only 2 and 4 are supported)"),
        });
    }
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::BadMetricInput {
            reason: format!(
                "BLEU over {} candidates and {} references",
                candidates.len(),
                references.len()
            ),
        });
    }
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|s| words::split_words(s)).collect();
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|s| words::split_words(s)).collect();

    let cand_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let ref_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut clipped = 0u64;
        let mut total = 0u64;
        for (cand, reference) in cand_tokens.iter().zip(&ref_tokens) {
            let cand_counts = ngram_counts(cand, order);
            let ref_counts = ngram_counts(reference, order);
            for (gram, count) in &cand_counts {
                let cap = ref_counts.get(gram).copied().unwrap_or(0);
                clipped += (*count).min(cap);
            }
            total += cand_counts.values().sum::<u64>();
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_sum / n as f64).exp())
}

/// Distinct-n: unique n-grams over total n-grams, pooled over all
/// candidates.
pub fn distinct_n(candidates: &[String], n: usize) -> Result<f64> {
    let (counts, total) = pooled_ngrams(candidates, n)?;
    Ok(counts.len() as f64 / total as f64)
}

/// Entropy-n of the pooled n-gram frequency distribution (natural log).
pub fn entropy_n(candidates: &[String], n: usize) -> Result<f64> {
    let (counts, total) = pooled_ngrams(candidates, n)?;
    let total = total as f64;
    let mut h = 0.0;
    for &count in counts.values() {
        let p = count as f64 / total;
        h -= p * p.ln();
    }
    Ok(h)
}

fn pooled_ngrams(candidates: &[String], n: usize) -> Result<(BTreeMap<Vec<String>, u64>, u64)> {
    if n == 0 {
        return Err(Error::BadMetricInput {
            reason: "n-gram order 0".to_string(),
        });
    }
    let mut counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    let mut total = 0u64;
    for sentence in candidates {
        let tokens = words::split_words(sentence);
        if tokens.len() < n {
            continue;
        }
        for gram in tokens.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::BadMetricInput {
            reason: format!("no {n}-grams in the candidate set"),
        });
    }
    Ok((counts, total))
}

// ----------------------------------------------------------------------
// Whole-set evaluation
// ----------------------------------------------------------------------

/// Constraint side of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConstraintReport {
    pub keyword_coverage: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub stem_matching: bool,
    pub samples: Vec<SampleBreakdown>,
}

/// Quality side of an evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QualityReport {
    pub bleu2: f64,
    pub bleu4: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub entropy2: f64,
    pub entropy4: f64,
}

/// Everything `evaluate` measures, serializable with a fixed key order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub num_samples: usize,
    pub constraint: ConstraintReport,
    pub quality: QualityReport,
}

/// Scores generations against their references.
///
/// `generations[i]` answers `examples[i]`'s request; the reference sentence
/// is the BLEU reference. Lengths must match and every generation must
/// contain at least one non-punctuation word.
pub fn evaluate(
    examples: &[Example],
    generations: &[String],
    lex: &ComplexityLexicon,
    stem_mode: bool,
) -> Result<EvalReport> {
    if examples.is_empty() || examples.len() != generations.len() {
        return Err(Error::BadMetricInput {
            reason: format!(
                "{} examples but {} generations",
                examples.len(),
                generations.len()
            ),
        });
    }
    let mut kc_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    let mut samples = Vec::with_capacity(examples.len());
    for (i, (ex, gen)) in examples.iter().zip(generations).enumerate() {
        let level_ids = lex.level_ids(&ex.levels)?;
        let b = sample_breakdown(&ex.keywords, &level_ids, gen, lex, stem_mode);
        if b.m == 0 {
            return Err(Error::BadMetricInput {
                reason: format!("sample {i} has no keywords"),
            });
        }
        if b.n == 0 {
            return Err(Error::BadMetricInput {
                reason: format!("sample {i} requests no level"),
            });
        }
        if b.t == 0 {
            return Err(Error::BadMetricInput {
                reason: format!("generation {i} has no non-punctuation word: {gen:?}"),
            });
        }
        kc_sum += b.count_c1 as f64 / b.m as f64;
        acc_sum += b.count_c2 as f64 / b.t as f64;
        if b.g > 0 {
            p_sum += b.count_c3 as f64 / b.g as f64;
        }
        r_sum += b.count_c3 as f64 / b.n as f64;
        f_sum += 2.0 * b.count_c3 as f64 / (b.n + b.g) as f64;
        samples.push(b);
    }
    let count = examples.len() as f64;
    let references: Vec<String> = examples.iter().map(|e| e.sentence.clone()).collect();
    let quality = QualityReport {
        bleu2: bleu_n(generations, &references, 2)?,
        bleu4: bleu_n(generations, &references, 4)?,
        distinct1: distinct_n(generations, 1)?,
        distinct2: distinct_n(generations, 2)?,
        entropy2: entropy_n(generations, 2)?,
        entropy4: entropy_n(generations, 4)?,
    };
    Ok(EvalReport {
        num_samples: examples.len(),
        constraint: ConstraintReport {
            keyword_coverage: kc_sum / count,
            accuracy: acc_sum / count,
            precision: p_sum / count,
            recall: r_sum / count,
            f1: f_sum / count,
            stem_matching: stem_mode,
            samples,
        },
        quality,
    })
}
