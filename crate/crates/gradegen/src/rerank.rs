//! Constraint-based reranking of generation candidates.
//!
//! Beam search orders candidates by model likelihood. Reranking re-scores
//! them against the request instead: per-sentence accuracy (fraction of
//! non-punctuation words inside the requested levels) plus per-sentence
//! level F1 (coverage of the requested level set). The earliest candidate
//! with the strictly highest score wins, so the likelihood order decides
//! ties. When every candidate scores zero the first one wins by the same
//! rule, which keeps the choice deterministic instead of arbitrary.

use crate::decode::{Candidate, GenerationRequest};
use crate::error::{Error, Result};
use crate::lexicon::ComplexityLexicon;
use crate::metrics::{sample_breakdown, sentence_accuracy, sentence_f1};

/// Constraint score of one sentence: accuracy plus level F1, in [0, 2].
pub fn constraint_score(
    sentence: &str,
    request: &GenerationRequest,
    lex: &ComplexityLexicon,
) -> f64 {
    let b = sample_breakdown(&request.keywords, &request.levels, sentence, lex, false);
    sentence_accuracy(&b) + sentence_f1(&b)
}

/// Index of the first sentence with the maximal constraint score.
pub fn rerank_texts<S: AsRef<str>>(
    sentences: &[S],
    request: &GenerationRequest,
    lex: &ComplexityLexicon,
) -> Result<usize> {
    if sentences.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0usize;
    let mut best_score = constraint_score(sentences[0].as_ref(), request, lex);
    for (i, sentence) in sentences.iter().enumerate().skip(1) {
        let score = constraint_score(sentence.as_ref(), request, lex);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Picks the winning candidate from a beam result.
pub fn rerank<'a>(
    candidates: &'a [Candidate],
    request: &GenerationRequest,
    lex: &ComplexityLexicon,
) -> Result<&'a Candidate> {
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    Ok(&candidates[rerank_texts(&texts, request, lex)?])
}
