//! Decoding strategies: greedy, vocabulary-masked, and beam search.
//!
//! All three share the complexity-id feedback loop: each emitted token id is
//! mapped through the static lookup table and the resulting complexity id
//! rides along as the decoder input for the next step, mirroring how
//! token/complexity pairs are teacher-forced during training.
//!
//! Masked decoding walks a prefix trie over the canonical sub-word
//! encodings of the allowed words (the requested levels' words, the
//! request's keywords, and punctuation), so only completable in-set words
//! can ever be emitted. A mask over single token ids would be weaker: two
//! individually-allowed sub-words can concatenate into a word outside the
//! set. The trie also tracks the cheapest completion under the remaining
//! token budget, which makes mid-word truncation impossible: every started
//! word can and must finish within the budget.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lexicon::ComplexityLexicon;
use crate::model::{next_token_logits, Parameters, Variant};
use crate::tokenizer::{BpeVocab, ComplexityTable};

/// What to generate: keywords that must appear and levels the output must
/// stay within. `max_len` caps emitted tokens, end-of-sequence included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationRequest {
    pub keywords: Vec<String>,
    pub levels: Vec<u16>,
    pub max_len: usize,
}

/// Anything that can score the next token given a source and the decoded
/// prefix. The real transformer implements this; tests use rigged stand-ins.
pub trait StepDecoder {
    fn vocab_size(&self) -> usize;

    /// Logits over the vocabulary for the position following the prefix.
    /// `tgt_ids` starts with the begin-of-sequence token.
    fn next_logits(
        &self,
        src_ids: &[u32],
        src_cids: &[u16],
        tgt_ids: &[u32],
        tgt_cids: &[u16],
    ) -> Result<Vec<f64>>;

    /// Hard cap on emitted tokens, if the model has one (position table).
    fn step_limit(&self) -> Option<usize> {
        None
    }
}

impl StepDecoder for Parameters {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn next_logits(
        &self,
        src_ids: &[u32],
        src_cids: &[u16],
        tgt_ids: &[u32],
        tgt_cids: &[u16],
    ) -> Result<Vec<f64>> {
        next_token_logits(self, src_ids, src_cids, tgt_ids, tgt_cids)
    }

    fn step_limit(&self) -> Option<usize> {
        // One position is spent on begin-of-sequence.
        Some(self.config.max_positions.saturating_sub(1))
    }
}

/// One finished hypothesis. `score` sums the model's per-token
/// log-probabilities (before any masking); `normalized_score` divides by
/// the token count and is what beam search ranks by.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub token_ids: Vec<u32>,
    pub complexity_ids: Vec<u16>,
    pub text: String,
    pub score: f64,
    pub normalized_score: f64,
}

impl Candidate {
    fn assemble(ids: Vec<u32>, cids: Vec<u16>, score: f64, vocab: &BpeVocab) -> Candidate {
        let text = vocab.decode(&ids);
        let normalized_score = score / ids.len().max(1) as f64;
        Candidate {
            token_ids: ids,
            complexity_ids: cids,
            text,
            score,
            normalized_score,
        }
    }
}

// ----------------------------------------------------------------------
// Prefix trie over canonical word encodings
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    /// End of a complete word. In canonical encodings only the last
    /// sub-word carries the end-of-word marker, so final nodes are leaves.
    word_final: bool,
    /// Fewest further tokens needed to reach a word-final node (0 there).
    min_to_final: usize,
}

#[derive(Debug, Clone)]
struct WordTrie {
    nodes: Vec<TrieNode>,
}

impl WordTrie {
    fn new() -> WordTrie {
        WordTrie {
            nodes: vec![TrieNode {
                children: BTreeMap::new(),
                word_final: false,
                min_to_final: usize::MAX,
            }],
        }
    }

    fn insert(&mut self, ids: &[u32]) {
        if ids.is_empty() {
            return;
        }
        let mut node = 0usize;
        for &id in ids {
            node = match self.nodes[node].children.get(&id) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode {
                        children: BTreeMap::new(),
                        word_final: false,
                        min_to_final: usize::MAX,
                    });
                    self.nodes[node].children.insert(id, next);
                    next
                }
            };
        }
        self.nodes[node].word_final = true;
    }

    fn is_empty(&self) -> bool {
        self.nodes[0].children.is_empty()
    }

    /// Fills `min_to_final` bottom-up. Nodes were appended parent-first, so
    /// a reverse index walk sees every child before its parent.
    fn seal(&mut self) {
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].word_final {
                self.nodes[i].min_to_final = 0;
                continue;
            }
            let best = self.nodes[i]
                .children
                .values()
                .map(|&c| self.nodes[c].min_to_final.saturating_add(1))
                .min()
                .unwrap_or(usize::MAX);
            self.nodes[i].min_to_final = best;
        }
    }

    /// Children of `node` whose subtree still completes a word within
    /// `budget` further tokens (the child's own token already spent).
    fn viable_children(&self, node: usize, budget: usize) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.nodes[node]
            .children
            .iter()
            .filter(move |(_, &child)| {
                budget >= 1 && self.nodes[child].min_to_final <= budget - 1
            })
            .map(|(&id, &child)| (id, child))
    }
}

// ----------------------------------------------------------------------
// Generator
// ----------------------------------------------------------------------

/// Bundles a model with the tokenizer-side context decoding needs.
pub struct Generator<'a, M: StepDecoder> {
    model: &'a M,
    vocab: &'a BpeVocab,
    table: &'a ComplexityTable,
    lex: &'a ComplexityLexicon,
    variant: Variant,
}

impl<'a, M: StepDecoder> Generator<'a, M> {
    pub fn new(
        model: &'a M,
        vocab: &'a BpeVocab,
        table: &'a ComplexityTable,
        lex: &'a ComplexityLexicon,
        variant: Variant,
    ) -> Generator<'a, M> {
        Generator {
            model,
            vocab,
            table,
            lex,
            variant,
        }
    }

    /// Token budget after the model's own position cap.
    fn budget(&self, request: &GenerationRequest) -> Result<usize> {
        let limit = self.model.step_limit().unwrap_or(usize::MAX);
        let budget = request.max_len.min(limit);
        let keyword_tokens: usize = request
            .keywords
            .iter()
            .map(|k| self.vocab.encode_word(k).len())
            .sum();
        if budget < keyword_tokens.max(1) {
            return Err(Error::BadRequest {
                reason: format!(
                    "token budget {budget} cannot hold the keywords ({keyword_tokens} sub-words)"
                ),
            });
        }
        Ok(budget)
    }

    fn validate(&self, request: &GenerationRequest) -> Result<()> {
        if request.keywords.is_empty() || request.keywords.len() > 5 {
            return Err(Error::BadRequest {
                reason: format!(
                    "{} keywords (between 1 and 5 are supported)",
                    request.keywords.len()
                ),
            });
        }
        Ok(())
    }

    /// Ids a decoder may never emit: padding, begin-of-sequence, the
    /// separator, unknown, and the level tokens. End-of-sequence is legal
    /// except as the very first emission.
    fn banned(&self, id: u32, step: usize) -> bool {
        let sp = self.vocab.specials();
        id == sp.pad
            || id == sp.bos
            || id == sp.sep
            || id == sp.unk
            || sp.levels.iter().any(|&(_, t)| t == id)
            || (id == sp.eos && step == 0)
    }

    /// Greedy decoding with complexity feedback: argmax each step, lowest
    /// id on ties, stop at end-of-sequence or the budget.
    pub fn greedy(&self, request: &GenerationRequest) -> Result<Candidate> {
        self.validate(request)?;
        let budget = self.budget(request)?;
        let (src_ids, src_cids) =
            crate::model::build_input_sequence(request, self.vocab, self.lex, self.variant)?;
        let sp = self.vocab.specials();
        let mut tgt_ids = vec![sp.bos];
        let mut tgt_cids = vec![self.lex.special_id()];
        let mut score = 0.0;
        for step in 0..budget {
            let logits = self
                .model
                .next_logits(&src_ids, &src_cids, &tgt_ids, &tgt_cids)?;
            let logprobs = log_softmax(&logits, self.model.vocab_size())?;
            let mut best: Option<u32> = None;
            for (id, &lp) in logprobs.iter().enumerate() {
                let id = id as u32;
                if self.banned(id, step) {
                    continue;
                }
                if best.is_none() || lp > logprobs[best.unwrap() as usize] {
                    best = Some(id);
                }
            }
            let id = best.ok_or(Error::EmptyAllowedSet)?;
            score += logprobs[id as usize];
            tgt_ids.push(id);
            tgt_cids.push(self.table.get(id)?);
            if id == sp.eos {
                break;
            }
        }
        Ok(Candidate::assemble(
            tgt_ids[1..].to_vec(),
            tgt_cids[1..].to_vec(),
            score,
            self.vocab,
        ))
    }

    fn build_tries(&self, request: &GenerationRequest) -> Result<(WordTrie, WordTrie)> {
        // A word whose canonical encoding needs the unknown token cannot be
        // emitted faithfully, so it stays out of the tries. For a keyword
        // that is a hard error: the output could never contain it.
        let unk = self.vocab.specials().unk;
        let allowed = self.lex.allowed_word_set(&request.levels)?;
        let mut content = WordTrie::new();
        for word in allowed.words() {
            let ids = self.vocab.encode_word(word);
            if !ids.contains(&unk) {
                content.insert(&ids);
            }
        }
        for keyword in &request.keywords {
            let ids = self.vocab.encode_word(&keyword.to_lowercase());
            if ids.contains(&unk) {
                return Err(Error::BadRequest {
                    reason: format!("keyword {keyword:?} contains untokenizable characters"),
                });
            }
            content.insert(&ids);
        }
        content.seal();
        let mut punct = WordTrie::new();
        for mark in self.lex.punctuation_words() {
            let ids = self.vocab.encode_word(mark);
            if !ids.contains(&unk) {
                punct.insert(&ids);
            }
        }
        punct.seal();
        if content.is_empty() {
            return Err(Error::EmptyAllowedSet);
        }
        Ok((content, punct))
    }

    /// Masked decoding: each step's argmax runs over the tokens that keep
    /// the output inside the allowed words. End-of-sequence and punctuation
    /// become legal once one content word is complete, end-of-sequence only
    /// at a word boundary. Scores are the unmasked log-probabilities of the
    /// chosen tokens.
    pub fn masked(&self, request: &GenerationRequest) -> Result<Candidate> {
        self.validate(request)?;
        let budget = self.budget(request)?;
        let (src_ids, src_cids) =
            crate::model::build_input_sequence(request, self.vocab, self.lex, self.variant)?;
        let (content, punct) = self.build_tries(request)?;
        let sp = self.vocab.specials();

        let mut tgt_ids = vec![sp.bos];
        let mut tgt_cids = vec![self.lex.special_id()];
        let mut score = 0.0;
        // Which trie the unfinished word lives in, and where.
        let mut state: Option<(bool, usize)> = None;
        let mut content_words = 0usize;

        for step in 0..budget {
            let remaining = budget - step;
            let logits = self
                .model
                .next_logits(&src_ids, &src_cids, &tgt_ids, &tgt_cids)?;
            let logprobs = log_softmax(&logits, self.model.vocab_size())?;

            let mut allowed: Vec<(u32, Option<(bool, usize)>)> = Vec::new();
            match state {
                Some((in_content, node)) => {
                    let trie = if in_content { &content } else { &punct };
                    for (id, child) in trie.viable_children(node, remaining) {
                        allowed.push((id, Some((in_content, child))));
                    }
                }
                None => {
                    for (id, child) in content.viable_children(0, remaining) {
                        allowed.push((id, Some((true, child))));
                    }
                    if content_words > 0 {
                        for (id, child) in punct.viable_children(0, remaining) {
                            allowed.push((id, Some((false, child))));
                        }
                        allowed.push((sp.eos, None));
                    }
                }
            }
            if allowed.is_empty() {
                return Err(Error::EmptyAllowedSet);
            }

            let mut best = 0usize;
            for i in 1..allowed.len() {
                if logprobs[allowed[i].0 as usize] > logprobs[allowed[best].0 as usize] {
                    best = i;
                }
            }
            let (id, next) = allowed[best];
            score += logprobs[id as usize];
            tgt_ids.push(id);
            tgt_cids.push(self.table.get(id)?);
            if id == sp.eos {
                state = None;
                break;
            }
            state = match next {
                Some((in_content, node)) => {
                    let trie = if in_content { &content } else { &punct };
                    if trie.nodes[node].word_final {
                        if in_content {
                            content_words += 1;
                        }
                        None
                    } else {
                        Some((in_content, node))
                    }
                }
                None => None,
            };
        }
        // The budget gating only admits words that can finish in time, so
        // the loop always ends at a word boundary.
        debug_assert!(state.is_none(), "masked decode stopped mid-word");
        Ok(Candidate::assemble(
            tgt_ids[1..].to_vec(),
            tgt_cids[1..].to_vec(),
            score,
            self.vocab,
        ))
    }

    /// Length-normalized beam search. Hypotheses are pruned by raw score;
    /// the returned list is sorted by `score / length` descending. Width 1
    /// reproduces greedy decoding exactly.
    pub fn beam(&self, request: &GenerationRequest, width: usize) -> Result<Vec<Candidate>> {
        if width == 0 {
            return Err(Error::ZeroBeamWidth);
        }
        self.validate(request)?;
        let budget = self.budget(request)?;
        let (src_ids, src_cids) =
            crate::model::build_input_sequence(request, self.vocab, self.lex, self.variant)?;
        let sp = self.vocab.specials();

        struct Hyp {
            ids: Vec<u32>,
            cids: Vec<u16>,
            score: f64,
        }
        let mut active = vec![Hyp {
            ids: vec![sp.bos],
            cids: vec![self.lex.special_id()],
            score: 0.0,
        }];
        let mut finished: Vec<Candidate> = Vec::new();

        for step in 0..budget {
            if active.is_empty() {
                break;
            }
            // (score, hyp index, token id): deterministic order for ties.
            let mut expansions: Vec<(f64, usize, u32)> = Vec::new();
            for (hi, hyp) in active.iter().enumerate() {
                let logits = self
                    .model
                    .next_logits(&src_ids, &src_cids, &hyp.ids, &hyp.cids)?;
                let logprobs = log_softmax(&logits, self.model.vocab_size())?;
                for (id, &lp) in logprobs.iter().enumerate() {
                    let id = id as u32;
                    if self.banned(id, step) {
                        continue;
                    }
                    expansions.push((hyp.score + lp, hi, id));
                }
            }
            expansions.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            expansions.truncate(width);

            let mut next_active = Vec::new();
            for (score, hi, id) in expansions {
                let hyp = &active[hi];
                let mut ids = hyp.ids.clone();
                let mut cids = hyp.cids.clone();
                ids.push(id);
                cids.push(self.table.get(id)?);
                if id == sp.eos || step + 1 == budget {
                    finished.push(Candidate::assemble(
                        ids[1..].to_vec(),
                        cids[1..].to_vec(),
                        score,
                        self.vocab,
                    ));
                } else {
                    next_active.push(Hyp { ids, cids, score });
                }
            }
            active = next_active;
        }

        finished.sort_by(|a, b| {
            b.normalized_score
                .partial_cmp(&a.normalized_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.token_ids.cmp(&b.token_ids))
        });
        finished.truncate(width);
        if finished.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        Ok(finished)
    }
}

fn log_softmax(logits: &[f64], expected_len: usize) -> Result<Vec<f64>> {
    if logits.len() != expected_len {
        return Err(Error::ShapeMismatch {
            reason: format!("{} logits for a vocabulary of {expected_len}", logits.len()),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

// ----------------------------------------------------------------------
// Rigged models for tests
// ----------------------------------------------------------------------

#[cfg(test)]
use std::cell::RefCell;

/// Emits a fixed token sequence regardless of input, then end-of-sequence.
#[cfg(test)]
pub(crate) struct FixedSequence {
    pub seq: Vec<u32>,
    pub eos: u32,
    pub vocab: usize,
}

#[cfg(test)]
impl StepDecoder for FixedSequence {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logits(&self, _: &[u32], _: &[u16], tgt_ids: &[u32], _: &[u16]) -> Result<Vec<f64>> {
        let step = tgt_ids.len() - 1;
        let want = self.seq.get(step).copied().unwrap_or(self.eos);
        Ok((0..self.vocab)
            .map(|id| if id as u32 == want { 8.0 } else { -(id as f64) * 1e-3 })
            .collect())
    }
}

/// The same static preference vector at every step.
#[cfg(test)]
pub(crate) struct ConstantPreference {
    pub prefs: Vec<f64>,
}

#[cfg(test)]
impl StepDecoder for ConstantPreference {
    fn vocab_size(&self) -> usize {
        self.prefs.len()
    }

    fn next_logits(&self, _: &[u32], _: &[u16], _: &[u32], _: &[u16]) -> Result<Vec<f64>> {
        Ok(self.prefs.clone())
    }
}

/// Wraps another model and records the complexity-id stream of every call.
#[cfg(test)]
pub(crate) struct Recording<'m, M: StepDecoder> {
    pub inner: &'m M,
    pub seen_cids: RefCell<Vec<Vec<u16>>>,
}

#[cfg(test)]
impl<M: StepDecoder> StepDecoder for Recording<'_, M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_logits(
        &self,
        src_ids: &[u32],
        src_cids: &[u16],
        tgt_ids: &[u32],
        tgt_cids: &[u16],
    ) -> Result<Vec<f64>> {
        self.seen_cids.borrow_mut().push(tgt_cids.to_vec());
        self.inner.next_logits(src_ids, src_cids, tgt_ids, tgt_cids)
    }

    fn step_limit(&self) -> Option<usize> {
        self.inner.step_limit()
    }
}
