//! Synthetic graded corpus: a template language whose every word has a
//! known complexity level, plus dataset assembly around it.
//!
//! The language is generated, not hand-written: pronounceable pseudo-words
//! are synthesized per part of speech and per level (with noun and verb
//! inflections enumerated explicitly), sentences come from part-of-speech
//! templates, and the matching lexicon is derived from the same word lists.
//! Everything is a pure function of the seed, so corpora are reproducible.
//!
//! Dataset examples pair a sentence with sampled keywords and its realized
//! level set, which makes references satisfy the generation constraints by
//! construction: keywords occur verbatim (C1), every word is classifiable
//! under the sentence's own levels (C2), and the recorded level set is
//! exactly the set present (C3).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::ComplexityLexicon;
use crate::words;

/// Bounds for the keyword count: between 1 and 5 keywords per sentence.
pub const MIN_KEYWORDS: usize = 1;
pub const MAX_KEYWORDS: usize = 5;

/// Sentence length divided by this gives the keyword count before clamping.
const WORDS_PER_KEYWORD: usize = 5;

/// Part-of-speech slots a template can ask for. `End` is the closing mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slot {
    Det,
    Pron,
    Noun,
    Verb,
    Adj,
    Adv,
    Prep,
    Conj,
    End,
}

/// Shape of the synthetic language.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LanguageConfig {
    /// Number of lexical levels, named "A", "B", ... (at most 26).
    pub num_levels: usize,
    /// Lexicon entries per level, inflected forms included.
    pub entries_per_level: usize,
    /// Seed for word synthesis and sentence generation.
    pub seed: u64,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        LanguageConfig {
            num_levels: 4,
            entries_per_level: 100,
            seed: 7,
        }
    }
}

/// A generated template grammar with per-slot, per-level word lists.
#[derive(Debug, Clone)]
pub struct SyntheticGrammar {
    level_names: Vec<String>,
    templates: Vec<Vec<Slot>>,
    /// `slot_words[slot][level_index]` lists the usable forms.
    slot_words: BTreeMap<Slot, Vec<Vec<String>>>,
    end_marks: Vec<(String, u32)>,
    seed: u64,
}

const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// Content and function slot kinds with sampling weights and the inflected
/// forms one lemma contributes.
const KIND_WEIGHTS: &[(Slot, u32)] = &[
    (Slot::Noun, 30),
    (Slot::Verb, 22),
    (Slot::Adj, 18),
    (Slot::Adv, 10),
    (Slot::Det, 6),
    (Slot::Pron, 5),
    (Slot::Prep, 6),
    (Slot::Conj, 3),
];

fn inflect(slot: Slot, lemma: &str) -> Vec<String> {
    match slot {
        Slot::Noun => vec![lemma.to_string(), format!("{lemma}s")],
        Slot::Verb => vec![
            lemma.to_string(),
            format!("{lemma}s"),
            format!("{lemma}ed"),
            format!("{lemma}ing"),
        ],
        _ => vec![lemma.to_string()],
    }
}

fn syllable(rng: &mut ChaCha8Rng) -> String {
    let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
    let v = VOWELS[rng.random_range(0..VOWELS.len())];
    format!("{c}{v}")
}

/// Synthesizes a lemma whose inflected forms are all unused so far.
fn fresh_lemma(
    rng: &mut ChaCha8Rng,
    used: &mut BTreeSet<String>,
    slot: Slot,
    min_syl: usize,
    max_syl: usize,
) -> String {
    let mut max_syl = max_syl;
    for attempt in 0.. {
        if attempt > 0 && attempt % 40 == 0 {
            max_syl += 1; // tiny alphabets eventually need longer words
        }
        let n = rng.random_range(min_syl..=max_syl);
        let lemma: String = (0..n).map(|_| syllable(rng)).collect();
        let forms = inflect(slot, &lemma);
        if forms.iter().all(|f| !used.contains(f)) {
            used.extend(forms);
            return lemma;
        }
    }
    unreachable!("the search space grows every 40 attempts");
}

impl SyntheticGrammar {
    /// Generates the language for a config. Deterministic per seed.
    pub fn new(config: &LanguageConfig) -> Result<Self> {
        if config.num_levels == 0 || config.num_levels > 26 {
            return Err(Error::BadGrammar {
                reason: format!("num_levels {} not in 1..=26", config.num_levels),
            });
        }
        if config.entries_per_level < 15 {
            return Err(Error::BadGrammar {
                reason: format!(
                    "entries_per_level {} too small to populate every slot",
                    config.entries_per_level
                ),
            });
        }
        let level_names: Vec<String> = (0..config.num_levels)
            .map(|i| ((b'A' + i as u8) as char).to_string())
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut used: BTreeSet<String> = BTreeSet::new();
        let mut slot_words: BTreeMap<Slot, Vec<Vec<String>>> = KIND_WEIGHTS
            .iter()
            .map(|(slot, _)| (*slot, vec![Vec::new(); config.num_levels]))
            .collect();

        let total_weight: u32 = KIND_WEIGHTS.iter().map(|(_, w)| w).sum();
        for level in 0..config.num_levels {
            // Harder levels get slightly longer stems.
            let min_syl = 1 + level / 2;
            let max_syl = 2 + level.div_ceil(2);
            let mut entries = 0usize;
            // Seed every slot kind once so no list is empty.
            for (slot, _) in KIND_WEIGHTS {
                let forms = match slot {
                    Slot::Det | Slot::Pron | Slot::Prep | Slot::Conj => {
                        let lemma = fresh_lemma(&mut rng, &mut used, *slot, 1, 1.max(min_syl));
                        inflect(*slot, &lemma)
                    }
                    _ => {
                        let lemma = fresh_lemma(&mut rng, &mut used, *slot, min_syl, max_syl);
                        inflect(*slot, &lemma)
                    }
                };
                entries += forms.len();
                slot_words.get_mut(slot).expect("seeded above")[level].extend(forms);
            }
            // Fill the rest by weighted sampling.
            while entries < config.entries_per_level {
                let mut pick = rng.random_range(0..total_weight);
                let slot = KIND_WEIGHTS
                    .iter()
                    .find(|(_, w)| {
                        if pick < *w {
                            true
                        } else {
                            pick -= w;
                            false
                        }
                    })
                    .map(|(s, _)| *s)
                    .expect("weights cover the range");
                let (lo, hi) = match slot {
                    Slot::Det | Slot::Pron | Slot::Prep | Slot::Conj => (1, 1.max(min_syl)),
                    _ => (min_syl, max_syl),
                };
                let lemma = fresh_lemma(&mut rng, &mut used, slot, lo, hi);
                let forms = inflect(slot, &lemma);
                entries += forms.len();
                slot_words.get_mut(&slot).expect("seeded above")[level].extend(forms);
            }
        }

        let templates: Vec<Vec<Slot>> = vec![
            vec![Slot::Det, Slot::Noun, Slot::Verb, Slot::End],
            vec![Slot::Det, Slot::Noun, Slot::Verb, Slot::Det, Slot::Noun, Slot::End],
            vec![Slot::Det, Slot::Adj, Slot::Noun, Slot::Verb, Slot::Adv, Slot::End],
            vec![Slot::Pron, Slot::Verb, Slot::Det, Slot::Adj, Slot::Noun, Slot::End],
            vec![
                Slot::Det, Slot::Noun, Slot::Prep, Slot::Det, Slot::Noun, Slot::Verb, Slot::End,
            ],
            vec![
                Slot::Pron, Slot::Adv, Slot::Verb, Slot::Det, Slot::Noun, Slot::Prep, Slot::Det,
                Slot::Adj, Slot::Noun, Slot::End,
            ],
            vec![
                Slot::Det, Slot::Adj, Slot::Noun, Slot::Prep, Slot::Det, Slot::Noun, Slot::Verb,
                Slot::Adv, Slot::End,
            ],
            vec![
                Slot::Det, Slot::Noun, Slot::Verb, Slot::Det, Slot::Noun, Slot::Conj, Slot::Pron,
                Slot::Verb, Slot::Det, Slot::Adj, Slot::Noun, Slot::End,
            ],
            vec![
                Slot::Pron, Slot::Verb, Slot::Adv, Slot::Conj, Slot::Det, Slot::Noun, Slot::Verb,
                Slot::Det, Slot::Noun, Slot::End,
            ],
            vec![
                Slot::Det, Slot::Adj, Slot::Adj, Slot::Noun, Slot::Verb, Slot::Det, Slot::Noun,
                Slot::Prep, Slot::Det, Slot::Noun, Slot::Conj, Slot::Det, Slot::Noun, Slot::Verb,
                Slot::Adv, Slot::End,
            ],
        ];
        for t in &templates {
            debug_assert!((4..=20).contains(&t.len()), "template length {}", t.len());
        }

        Ok(SyntheticGrammar {
            level_names,
            templates,
            slot_words,
            end_marks: vec![
                (".".to_string(), 8),
                ("!".to_string(), 1),
                ("?".to_string(), 1),
            ],
            seed: config.seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn level_names(&self) -> &[String] {
        &self.level_names
    }

    pub fn templates(&self) -> &[Vec<Slot>] {
        &self.templates
    }

    /// Derives the lexicon: every slot word at its level.
    pub fn lexicon(&self) -> Result<ComplexityLexicon> {
        let mut lex = ComplexityLexicon::new(&self.level_names)?;
        for lists in self.slot_words.values() {
            for (level, list) in lists.iter().enumerate() {
                for word in list {
                    lex.insert(word, &self.level_names[level])?;
                }
            }
        }
        Ok(lex)
    }

    fn pick_end_mark(&self, rng: &mut ChaCha8Rng) -> &str {
        let total: u32 = self.end_marks.iter().map(|(_, w)| w).sum();
        let mut pick = rng.random_range(0..total);
        for (mark, w) in &self.end_marks {
            if pick < *w {
                return mark;
            }
            pick -= w;
        }
        unreachable!("weights cover the range")
    }

    /// Draws one sentence: a random template filled with words drawn from a
    /// random non-empty subset of levels.
    fn sentence(&self, rng: &mut ChaCha8Rng) -> Result<String> {
        if self.templates.is_empty() {
            return Err(Error::BadGrammar {
                reason: "no templates".to_string(),
            });
        }
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let num_levels = self.level_names.len();
        // Small level subsets are more common than large ones.
        let size_weights = [4u32, 3, 2, 1];
        let max_size = num_levels.min(size_weights.len());
        let total: u32 = size_weights[..max_size].iter().sum();
        let mut pick = rng.random_range(0..total);
        let mut size = max_size;
        for (i, w) in size_weights[..max_size].iter().enumerate() {
            if pick < *w {
                size = i + 1;
                break;
            }
            pick -= w;
        }
        let mut levels: Vec<usize> = (0..num_levels).collect();
        levels.shuffle(rng);
        levels.truncate(size);

        let mut out: Vec<&str> = Vec::with_capacity(template.len());
        for slot in template {
            if *slot == Slot::End {
                out.push(self.pick_end_mark(rng));
                continue;
            }
            let lists = self.slot_words.get(slot).ok_or_else(|| Error::BadGrammar {
                reason: format!("no word lists for slot {slot:?}"),
            })?;
            let level = levels[rng.random_range(0..levels.len())];
            let list = &lists[level];
            if list.is_empty() {
                return Err(Error::BadGrammar {
                    reason: format!("empty word list for slot {slot:?} at level index {level}"),
                });
            }
            out.push(&list[rng.random_range(0..list.len())]);
        }
        Ok(out.join(" "))
    }
}

/// Draws `n` sentences from the grammar. Pure function of the grammar seed.
pub fn generate_corpus(grammar: &SyntheticGrammar, n: usize) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(grammar.seed);
    (0..n).map(|_| grammar.sentence(&mut rng)).collect()
}

/// Keeps sentences whose in-lexicon fraction over non-punctuation words is
/// at least `threshold`. Sentences with no non-punctuation words pass
/// vacuously.
pub fn select_sentences(
    sentences: &[String],
    lex: &ComplexityLexicon,
    threshold: f64,
) -> Vec<String> {
    sentences
        .iter()
        .filter(|s| {
            let ws = words::split_words(s);
            let mut total = 0usize;
            let mut known = 0usize;
            for w in &ws {
                let id = lex.level_of_word(w);
                if id == crate::lexicon::PUNCTUATION_ID {
                    continue;
                }
                total += 1;
                if lex.is_lexical_id(id) {
                    known += 1;
                }
            }
            total == 0 || (known as f64 / total as f64) >= threshold
        })
        .cloned()
        .collect()
}

/// Number of keywords for a sentence of `content_words` non-punctuation
/// words: one per five words, clamped to 1..=5.
pub fn keyword_count(content_words: usize) -> usize {
    content_words
        .div_ceil(WORDS_PER_KEYWORD)
        .clamp(MIN_KEYWORDS, MAX_KEYWORDS)
}

/// Samples keywords for a sentence: distinct in-lexicon words, drawn
/// uniformly without replacement, returned in sentence order.
pub fn extract_keywords(
    sentence: &str,
    lex: &ComplexityLexicon,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    let ws = words::split_words(sentence);
    let mut content = 0usize;
    let mut eligible: Vec<String> = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for w in &ws {
        let id = lex.level_of_word(w);
        if id == crate::lexicon::PUNCTUATION_ID {
            continue;
        }
        content += 1;
        if lex.is_lexical_id(id) {
            let key = w.to_lowercase();
            if seen.insert(key.clone()) {
                eligible.push(key);
            }
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoEligibleKeyword {
            sentence: sentence.to_string(),
        });
    }
    let k = keyword_count(content).min(eligible.len());
    // Partial Fisher-Yates over indices, then restore sentence order.
    let mut idx: Vec<usize> = (0..eligible.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| eligible[i].clone()).collect())
}

/// The distinct lexical level ids present in a sentence, ascending.
pub fn annotate_levels(sentence: &str, lex: &ComplexityLexicon) -> BTreeSet<u16> {
    words::split_words(sentence)
        .iter()
        .map(|w| lex.level_of_word(w))
        .filter(|id| lex.is_lexical_id(*id))
        .collect()
}

/// One reference pair: a sentence with its sampled keywords, realized level
/// set (as inventory names) and per-word level ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub keywords: Vec<String>,
    pub levels: Vec<String>,
    pub sentence: String,
    pub token_levels: Vec<u16>,
}

/// Builds examples from sentences. Sentences without an in-lexicon content
/// word (nothing to sample a keyword from, no level set) are dropped; the
/// synthetic grammar never produces such sentences, arbitrary text can.
pub fn make_examples(
    sentences: &[String],
    lex: &ComplexityLexicon,
    seed: u64,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(sentences.len());
    for (i, sentence) in sentences.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let keywords = match extract_keywords(sentence, lex, &mut rng) {
            Ok(k) => k,
            Err(Error::NoEligibleKeyword { .. }) => continue,
            Err(e) => return Err(e),
        };
        let level_ids = annotate_levels(sentence, lex);
        if level_ids.is_empty() {
            continue;
        }
        let levels = level_ids
            .iter()
            .map(|&id| lex.level_display_name(id))
            .collect();
        let token_levels = words::split_words(sentence)
            .iter()
            .map(|w| lex.level_of_word(w))
            .collect();
        out.push(Example {
            keywords,
            levels,
            sentence: sentence.clone(),
            token_levels,
        });
    }
    Ok(out)
}

/// Train/valid/test portions of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Shuffles and splits examples. `ratios` are the train and valid fractions;
/// the remainder is the test split.
pub fn split_dataset(mut examples: Vec<Example>, ratios: (f64, f64), seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples.shuffle(&mut rng);
    let n = examples.len();
    let n_train = ((n as f64) * ratios.0).floor() as usize;
    let n_valid = ((n as f64) * ratios.1).floor() as usize;
    let rest = examples.split_off(n_train.min(n));
    let (valid, test) = {
        let mut rest = rest;
        let tail = rest.split_off(n_valid.min(rest.len()));
        (rest, tail)
    };
    Dataset {
        train: examples,
        valid,
        test,
    }
}

/// End-to-end dataset assembly: generate, select, annotate, split.
pub fn build_dataset(
    grammar: &SyntheticGrammar,
    lex: &ComplexityLexicon,
    n: usize,
    threshold: f64,
    ratios: (f64, f64),
) -> Result<Dataset> {
    let sentences = generate_corpus(grammar, n)?;
    let selected = select_sentences(&sentences, lex, threshold);
    let examples = make_examples(&selected, lex, grammar.seed.wrapping_add(1))?;
    Ok(split_dataset(examples, ratios, grammar.seed.wrapping_add(2)))
}

// ----------------------------------------------------------------------
// JSON-lines dataset files
// ----------------------------------------------------------------------

/// Renders examples as JSON lines.
pub fn render_examples(examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a JSON-lines dataset, reporting the line of any malformed record.
pub fn parse_examples(text: &str, path: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            path: path.to_string(),
            line: no + 1,
            reason: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes one split to a JSON-lines file.
pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    std::fs::write(path, render_examples(examples)?)?;
    Ok(())
}

/// Reads one split from a JSON-lines file.
pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    parse_examples(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lexicon::PUNCTUATION_ID;

    fn grammar() -> (SyntheticGrammar, ComplexityLexicon) {
        let g = SyntheticGrammar::new(&LanguageConfig::default()).unwrap();
        let lex = g.lexicon().unwrap();
        (g, lex)
    }

    #[test]
    fn language_has_the_configured_shape() {
        let (g, lex) = grammar();
        assert_eq!(g.level_names(), &["A", "B", "C", "D"]);
        assert_eq!(lex.level_count(), 4);
        // entries_per_level is a floor; inflection bundles may overshoot.
        assert!(lex.len() >= 400, "lexicon has {} entries", lex.len());
        assert!(lex.len() < 440, "lexicon has {} entries", lex.len());
        for t in g.templates() {
            assert!((4..=20).contains(&t.len()));
        }
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let (g, _) = grammar();
        let a = generate_corpus(&g, 50).unwrap();
        let b = generate_corpus(&g, 50).unwrap();
        assert_eq!(a, b);
        let other = SyntheticGrammar::new(&LanguageConfig {
            seed: 8,
            ..LanguageConfig::default()
        })
        .unwrap();
        assert_ne!(a, generate_corpus(&other, 50).unwrap());
    }

    #[test]
    fn generated_sentences_are_fully_in_lexicon() {
        let (g, lex) = grammar();
        for s in generate_corpus(&g, 200).unwrap() {
            for w in words::split_words(&s) {
                let id = lex.level_of_word(&w);
                assert!(
                    id == PUNCTUATION_ID || lex.is_lexical_id(id),
                    "word {w:?} in {s:?} got id {id}"
                );
            }
        }
    }

    #[test]
    fn select_sentences_matches_fraction_oracle() {
        let (g, lex) = grammar();
        let mut sentences = generate_corpus(&g, 60).unwrap();
        // Inject out-of-lexicon words to create fractions below 1.
        sentences.push("xyzzy qwerty wub .".to_string());
        let mut half = sentences[0].clone();
        half.push_str(" xyzzy");
        sentences.push(half);
        let kept = select_sentences(&sentences, &lex, 0.9);
        for s in &sentences {
            let ws = words::split_words(s);
            let total = ws.iter().filter(|w| !lex.is_punctuation(w)).count();
            let known = ws
                .iter()
                .filter(|w| lex.is_lexical_id(lex.level_of_word(w)))
                .count();
            let frac = if total == 0 {
                1.0
            } else {
                known as f64 / total as f64
            };
            assert_eq!(
                kept.contains(s),
                frac >= 0.9,
                "sentence {s:?} fraction {frac}"
            );
        }
        assert!(!kept.contains(&sentences[sentences.len() - 2]));
    }

    #[test]
    fn keyword_count_follows_length() {
        assert_eq!(keyword_count(4), 1);
        assert_eq!(keyword_count(5), 1);
        assert_eq!(keyword_count(6), 2);
        assert_eq!(keyword_count(12), 3);
        assert_eq!(keyword_count(40), 5);
        assert_eq!(keyword_count(0), 1);
    }

    #[test]
    fn extracted_keywords_are_distinct_in_order_and_in_sentence() {
        let (g, lex) = grammar();
        let sentences = generate_corpus(&g, 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in &sentences {
            let ks = extract_keywords(s, &lex, &mut rng).unwrap();
            let ws = words::split_words(s);
            let content = ws.iter().filter(|w| !lex.is_punctuation(w)).count();
            let distinct: BTreeSet<&String> = ks.iter().collect();
            assert_eq!(distinct.len(), ks.len(), "duplicates in {ks:?}");
            assert!(!ks.is_empty() && ks.len() <= keyword_count(content));
            // Sentence order: positions of first occurrences are increasing.
            let pos: Vec<usize> = ks
                .iter()
                .map(|k| ws.iter().position(|w| w.to_lowercase() == *k).unwrap())
                .collect();
            assert!(pos.windows(2).all(|p| p[0] < p[1]), "order {pos:?}");
        }
    }

    #[test]
    fn four_word_sentence_gets_exactly_one_keyword() {
        let lex = ComplexityLexicon::from_entries(
            &["A"],
            &[("the", "A"), ("tree", "A"), ("needs", "A"), ("water", "A")],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ks = extract_keywords("the tree needs water .", &lex, &mut rng).unwrap();
        assert_eq!(ks.len(), 1);
    }

    #[test]
    fn forty_word_sentence_gets_five_keywords() {
        let lex = ComplexityLexicon::from_entries(
            &["A"],
            &(0..40)
                .map(|i| (format!("w{i}"), "A".to_string()))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let sentence = (0..40).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ks = extract_keywords(&sentence, &lex, &mut rng).unwrap();
        assert_eq!(ks.len(), 5);
    }

    #[test]
    fn no_eligible_keyword_is_an_error() {
        let lex = ComplexityLexicon::from_entries(&["A"], &[("tree", "A")]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(matches!(
            extract_keywords("zebra crossing .", &lex, &mut rng),
            Err(Error::NoEligibleKeyword { .. })
        ));
    }

    #[test]
    fn references_satisfy_all_three_constraints() {
        let (g, lex) = grammar();
        let ds = build_dataset(&g, &lex, 300, 0.9, (0.9, 0.08)).unwrap();
        let all: Vec<&Example> = ds
            .train
            .iter()
            .chain(&ds.valid)
            .chain(&ds.test)
            .collect();
        assert!(!all.is_empty());
        for ex in all {
            let ws = words::split_words(&ex.sentence);
            let lower: Vec<String> = ws.iter().map(|w| w.to_lowercase()).collect();
            // C1: keywords occur verbatim.
            for k in &ex.keywords {
                assert!(lower.contains(k), "keyword {k:?} not in {:?}", ex.sentence);
            }
            // C3: recorded levels equal the realized set, non-empty.
            let realized: Vec<String> = annotate_levels(&ex.sentence, &lex)
                .iter()
                .map(|&id| lex.level_display_name(id))
                .collect();
            assert_eq!(ex.levels, realized);
            assert!(!ex.levels.is_empty());
            // C2: every non-punctuation word is inside the allowed set.
            let ids = lex.level_ids(&ex.levels).unwrap();
            let allowed = lex.allowed_word_set(&ids).unwrap();
            for w in &ws {
                if lex.is_punctuation(w) {
                    continue;
                }
                assert!(allowed.contains(w), "word {w:?} outside {:?}", ex.levels);
            }
            // token_levels aligns with the word split.
            assert_eq!(ex.token_levels.len(), ws.len());
            for (w, &id) in ws.iter().zip(&ex.token_levels) {
                assert_eq!(lex.level_of_word(w), id);
            }
        }
    }

    #[test]
    fn split_has_requested_proportions_and_loses_nothing() {
        let (g, lex) = grammar();
        let sentences = generate_corpus(&g, 500).unwrap();
        let examples = make_examples(&sentences, &lex, 9).unwrap();
        let n = examples.len();
        let ds = split_dataset(examples.clone(), (0.9, 0.08), 10);
        assert_eq!(ds.train.len(), (n as f64 * 0.9).floor() as usize);
        assert_eq!(ds.valid.len(), (n as f64 * 0.08).floor() as usize);
        assert_eq!(ds.train.len() + ds.valid.len() + ds.test.len(), n);
        // Same multiset of sentences, just reordered and partitioned.
        let mut before: Vec<&str> = examples.iter().map(|e| e.sentence.as_str()).collect();
        let mut after: Vec<&str> = ds
            .train
            .iter()
            .chain(&ds.valid)
            .chain(&ds.test)
            .map(|e| e.sentence.as_str())
            .collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
    }

    #[test]
    fn dataset_file_round_trips_byte_exactly() {
        let (g, lex) = grammar();
        let sentences = generate_corpus(&g, 50).unwrap();
        let examples = make_examples(&sentences, &lex, 11).unwrap();
        let text = render_examples(&examples).unwrap();
        let back = parse_examples(&text, "<mem>").unwrap();
        assert_eq!(back, examples);
        assert_eq!(render_examples(&back).unwrap(), text);
    }

    #[test]
    fn malformed_dataset_lines_name_the_line() {
        let err = parse_examples("{\"keywords\": []\n", "data.jsonl").unwrap_err();
        match err {
            Error::MalformedLine { path, line, .. } => {
                assert_eq!(path, "data.jsonl");
                assert_eq!(line, 1);
            }
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn bad_language_configs_are_rejected() {
        assert!(SyntheticGrammar::new(&LanguageConfig {
            num_levels: 0,
            ..LanguageConfig::default()
        })
        .is_err());
        assert!(SyntheticGrammar::new(&LanguageConfig {
            num_levels: 27,
            ..LanguageConfig::default()
        })
        .is_err());
        assert!(SyntheticGrammar::new(&LanguageConfig {
            entries_per_level: 3,
            ..LanguageConfig::default()
        })
        .is_err());
    }
}
