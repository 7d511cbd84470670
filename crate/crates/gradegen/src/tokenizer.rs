//! Byte-pair tokenization with a token-to-complexity lookup table.
//!
//! Merges are learned within word boundaries, most frequent pair first with
//! lexicographic tie-breaks, so training is deterministic. The final
//! character of every word carries a `</w>` marker, which lets `decode`
//! rebuild word boundaries from a flat id stream. Encoding is word-aligned:
//! every produced id remembers which source word it came from, because a
//! sub-word's complexity is defined by the word it was split from.
//!
//! Two complexity views exist side by side. At training time the aligned
//! word context is available and sub-word levels are exact. At inference
//! time a predicted id has no word context yet, so a static
//! [`ComplexityTable`] maps every token id to the majority level over the
//! training corpus, falling back to the out-of-lexicon id on ties.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lexicon::ComplexityLexicon;
use crate::words;

/// Marker appended to the word-final symbol of every word.
pub const END_OF_WORD: &str = "</w>";

/// Surface form used when decoding an unknown-character token.
pub const UNK_SURFACE: &str = "⁇";

const PAD_TOKEN: &str = "<pad>";
const BOS_TOKEN: &str = "<s>";
const EOS_TOKEN: &str = "</s>";
const UNK_TOKEN: &str = "<unk>";
const SEP_TOKEN: &str = "<sep>";

/// Ids of the fixed special tokens plus one level token per lexical level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub sep: u32,
    /// `(complexity id, token id)` per lexical level, ascending by level.
    pub levels: Vec<(u16, u32)>,
}

impl SpecialTokens {
    /// Token id of the level token for a lexical complexity id.
    pub fn level_token(&self, level_id: u16) -> Option<u32> {
        self.levels
            .iter()
            .find(|(lid, _)| *lid == level_id)
            .map(|(_, tid)| *tid)
    }

    /// True for pad/bos/eos/unk/sep and every level token.
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad
            || id == self.bos
            || id == self.eos
            || id == self.unk
            || id == self.sep
            || self.levels.iter().any(|(_, tid)| *tid == id)
    }
}

/// A word-aligned encoding: flat ids plus the index of the source word each
/// id was split from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub word_index: Vec<usize>,
    pub words: Vec<String>,
}

/// A trained byte-pair vocabulary.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    tokens: Vec<String>,
    token_ids: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
    specials: SpecialTokens,
    /// Word frequencies of the training corpus, kept so the complexity
    /// table can be built later. Dropped by file round trips; the table
    /// travels in the file instead.
    word_counts: BTreeMap<String, u64>,
}

impl BpeVocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The token string for an id.
    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// The id for a token string.
    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Rank of a merge rule (lower is earlier), if the pair was learned.
    pub fn merge_rank(&self, left: &str, right: &str) -> Option<usize> {
        self.merge_ranks
            .get(&(left.to_string(), right.to_string()))
            .copied()
    }

    /// True when the token closes a word (carries the `</w>` marker).
    pub fn is_word_final(&self, id: u32) -> bool {
        self.token(id)
            .is_some_and(|t| t.ends_with(END_OF_WORD) && !self.specials.contains(id))
    }
}

// ----------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------

/// Initial symbol sequence of a word: its characters, the last one marked.
fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len() - 1;
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Merges every non-overlapping occurrence of `(left, right)`, left to right.
fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns `num_merges` byte-pair merges over the corpus.
///
/// The vocabulary is specials, then one level token per lexical level of
/// `lex`, then the base character symbols (sorted), then merge outputs in
/// rule order. Ids are dense. Stops early when no pair occurs twice.
pub fn train_bpe(
    corpus: &[String],
    num_merges: usize,
    lex: &ComplexityLexicon,
) -> Result<BpeVocab> {
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for word in words::split_words(sentence) {
            *word_counts.entry(word).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Deterministic order: BTreeMap iteration is sorted by word.
    let mut table: Vec<(Vec<String>, u64)> = word_counts
        .iter()
        .map(|(w, &c)| (word_symbols(w), c))
        .collect();

    // Base symbols, before any merge.
    let mut base: Vec<String> = table
        .iter()
        .flat_map(|(syms, _)| syms.iter().cloned())
        .collect();
    base.sort();
    base.dedup();

    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..num_merges {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, count) in &table {
            for w in syms.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_insert(0) += count;
            }
        }
        // Most frequent pair; lexicographically smallest on ties.
        let best = pair_counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((left, right), count)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let (left, right) = (left.to_string(), right.to_string());
        for (syms, _) in &mut table {
            *syms = merge_pair(syms, &left, &right);
        }
        merges.push((left, right));
    }

    // Assemble the id space.
    let mut tokens: Vec<String> = vec![
        PAD_TOKEN.to_string(),
        BOS_TOKEN.to_string(),
        EOS_TOKEN.to_string(),
        UNK_TOKEN.to_string(),
        SEP_TOKEN.to_string(),
    ];
    let mut levels = Vec::new();
    for level in lex.lexical_levels() {
        levels.push((level.id, tokens.len() as u32));
        tokens.push(format!("<z:{}>", level.name));
    }
    let mut token_ids: HashMap<String, u32> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    // Base symbols first, then merge outputs; duplicates keep their first id.
    for sym in &base {
        if !token_ids.contains_key(sym) {
            token_ids.insert(sym.clone(), tokens.len() as u32);
            tokens.push(sym.clone());
        }
    }
    for (l, r) in &merges {
        let merged = format!("{l}{r}");
        if !token_ids.contains_key(&merged) {
            token_ids.insert(merged.clone(), tokens.len() as u32);
            tokens.push(merged);
        }
    }

    let specials = SpecialTokens {
        pad: 0,
        bos: 1,
        eos: 2,
        unk: 3,
        sep: 4,
        levels,
    };
    let merge_ranks = merges
        .iter()
        .enumerate()
        .map(|(i, (l, r))| ((l.clone(), r.clone()), i))
        .collect();
    Ok(BpeVocab {
        tokens,
        token_ids,
        merges,
        merge_ranks,
        specials,
        word_counts,
    })
}

// ----------------------------------------------------------------------
// Encoding and decoding
// ----------------------------------------------------------------------

impl BpeVocab {
    /// Applies the learned merges to one word and maps symbols to ids.
    /// Symbols outside the vocabulary (unknown characters) become unk.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut syms = word_symbols(word);
        loop {
            let mut best: Option<(usize, (&str, &str))> = None;
            for w in syms.windows(2) {
                if let Some(&rank) = self.merge_ranks.get(&(w[0].clone(), w[1].clone())) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, (&w[0], &w[1])));
                    }
                }
            }
            let Some((_, (left, right))) = best else {
                break;
            };
            let (left, right) = (left.to_string(), right.to_string());
            syms = merge_pair(&syms, &left, &right);
        }
        syms.iter()
            .map(|s| self.token_ids.get(s).copied().unwrap_or(self.specials.unk))
            .collect()
    }

    /// Word-aligned encoding of a sentence.
    pub fn encode(&self, sentence: &str) -> Encoding {
        let words = words::split_words(sentence);
        let mut ids = Vec::new();
        let mut word_index = Vec::new();
        for (wi, word) in words.iter().enumerate() {
            for id in self.encode_word(word) {
                ids.push(id);
                word_index.push(wi);
            }
        }
        Encoding {
            ids,
            word_index,
            words,
        }
    }

    /// Rebuilds text from a flat id stream.
    ///
    /// Pad, bos, eos, sep and level tokens are dropped; unk renders as
    /// [`UNK_SURFACE`]. Words end at `</w>` markers and are joined by single
    /// spaces, so `decode(encode(s)) == s` for single-spaced text over the
    /// training characters.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut sentence = String::new();
        let mut word = String::new();
        for &id in ids {
            if id == self.specials.unk {
                word.push_str(UNK_SURFACE);
                continue;
            }
            if self.specials.contains(id) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                word.push_str(stem);
                if !sentence.is_empty() {
                    sentence.push(' ');
                }
                sentence.push_str(&word);
                word.clear();
            } else {
                word.push_str(tok);
            }
        }
        if !word.is_empty() {
            if !sentence.is_empty() {
                sentence.push(' ');
            }
            sentence.push_str(&word);
        }
        sentence
    }
}

// ----------------------------------------------------------------------
// Complexity table
// ----------------------------------------------------------------------

/// Static token-id-to-complexity-id lookup used at inference time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityTable {
    ids: Vec<u16>,
}

impl ComplexityTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Complexity id of one token id.
    pub fn get(&self, id: u32) -> Result<u16> {
        self.ids
            .get(id as usize)
            .copied()
            .ok_or(Error::TokenIdOutOfRange {
                id,
                size: self.ids.len(),
            })
    }

    /// Complexity ids of a whole id sequence.
    pub fn lookup(&self, ids: &[u32]) -> Result<Vec<u16>> {
        ids.iter().map(|&id| self.get(id)).collect()
    }
}

/// Builds the static complexity table from a freshly trained vocabulary.
///
/// Every training word is re-encoded and votes, weighted by its corpus
/// frequency, for its own level on each of its sub-words. A token's entry is
/// the level with the strictly largest vote; ties and tokens that never
/// appear in a training word fall back to the out-of-lexicon id. Specials
/// map to the special id, level tokens to their level.
pub fn build_complexity_table(vocab: &BpeVocab, lex: &ComplexityLexicon) -> Result<ComplexityTable> {
    if vocab.word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tallies: Vec<BTreeMap<u16, u64>> = vec![BTreeMap::new(); vocab.len()];
    for (word, &count) in &vocab.word_counts {
        let level = lex.level_of_word(word);
        for id in vocab.encode_word(word) {
            *tallies[id as usize].entry(level).or_insert(0) += count;
        }
    }
    let mut ids = Vec::with_capacity(vocab.len());
    for (token_id, tally) in tallies.iter().enumerate() {
        let token_id = token_id as u32;
        let s = &vocab.specials;
        let cid = if token_id == s.pad
            || token_id == s.bos
            || token_id == s.eos
            || token_id == s.unk
            || token_id == s.sep
        {
            lex.special_id()
        } else if let Some((lid, _)) = s.levels.iter().find(|(_, tid)| *tid == token_id) {
            *lid
        } else {
            let best = tally.iter().max_by_key(|(_, c)| **c);
            match best {
                None => lex.out_id(),
                Some((&level, &count)) => {
                    let winners = tally.values().filter(|&&c| c == count).count();
                    if winners == 1 {
                        level
                    } else {
                        lex.out_id()
                    }
                }
            }
        };
        ids.push(cid);
    }
    Ok(ComplexityTable { ids })
}

/// Exact per-token complexity ids using the aligned word context.
///
/// This is the training-time view: a sub-word inherits the level of the word
/// it was split from, so ambiguity never arises.
pub fn word_context_complexity_ids(encoding: &Encoding, lex: &ComplexityLexicon) -> Vec<u16> {
    encoding
        .word_index
        .iter()
        .map(|&wi| lex.level_of_word(&encoding.words[wi]))
        .collect()
}

// ----------------------------------------------------------------------
// File format
// ----------------------------------------------------------------------

impl BpeVocab {
    /// Renders the vocabulary file: specials header, `token<TAB>id` lines,
    /// ordered merge rules, and (when given) the complexity table.
    pub fn render(&self, table: Option<&ComplexityTable>) -> String {
        let mut out = String::new();
        let s = &self.specials;
        let _ = writeln!(out, "#gradegen-vocab: v1");
        let _ = writeln!(
            out,
            "#specials: {PAD_TOKEN}={} {BOS_TOKEN}={} {EOS_TOKEN}={} {UNK_TOKEN}={} {SEP_TOKEN}={}",
            s.pad, s.bos, s.eos, s.unk, s.sep
        );
        let levels: Vec<String> = s
            .levels
            .iter()
            .map(|(lid, tid)| format!("{}={tid}:{lid}", self.tokens[*tid as usize]))
            .collect();
        let _ = writeln!(out, "#levels: {}", levels.join(" "));
        let _ = writeln!(out, "#tokens: {}", self.tokens.len());
        for (id, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{tok}\t{id}");
        }
        let _ = writeln!(out, "#merges: {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        if let Some(table) = table {
            let _ = writeln!(out, "#complexity: {}", table.ids.len());
            for (id, cid) in table.ids.iter().enumerate() {
                let _ = writeln!(out, "{id}\t{cid}");
            }
        }
        out
    }

    /// Parses the vocabulary file format.
    pub fn parse(text: &str, path: &str) -> Result<(Self, Option<ComplexityTable>)> {
        let bad = |line: usize, reason: String| Error::MalformedLine {
            path: path.to_string(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate();

        let (_, magic) = lines
            .next()
            .ok_or_else(|| Error::BadFile {
                path: path.to_string(),
                reason: "empty file".to_string(),
            })?;
        if magic.trim_end() != "#gradegen-vocab: v1" {
            return Err(Error::BadFile {
                path: path.to_string(),
                reason: format!("unsupported header {magic:?}"),
            });
        }

        let mut specials_line = None;
        let mut levels_line = None;
        let mut tokens: Vec<String> = Vec::new();
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut table: Option<Vec<u16>> = None;
        #[derive(PartialEq)]
        enum Section {
            Head,
            Tokens(usize),
            Merges(usize),
            Complexity(usize),
        }
        let mut section = Section::Head;
        for (no, raw) in lines {
            let line = raw.trim_end_matches('\r');
            if let Some(rest) = line.strip_prefix("#specials:") {
                specials_line = Some((no + 1, rest.trim().to_string()));
                continue;
            }
            if let Some(rest) = line.strip_prefix("#levels:") {
                levels_line = Some((no + 1, rest.trim().to_string()));
                continue;
            }
            if let Some(rest) = line.strip_prefix("#tokens:") {
                let n = rest.trim().parse().map_err(|_| {
                    bad(no + 1, format!("bad token count {rest:?}"))
                })?;
                section = Section::Tokens(n);
                continue;
            }
            if let Some(rest) = line.strip_prefix("#merges:") {
                let n = rest.trim().parse().map_err(|_| {
                    bad(no + 1, format!("bad merge count {rest:?}"))
                })?;
                section = Section::Merges(n);
                continue;
            }
            if let Some(rest) = line.strip_prefix("#complexity:") {
                let n = rest.trim().parse().map_err(|_| {
                    bad(no + 1, format!("bad table length {rest:?}"))
                })?;
                section = Section::Complexity(n);
                table = Some(Vec::new());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (a, b) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(bad(no + 1, format!("expected two tab fields, got {line:?}"))),
            };
            match section {
                Section::Head => return Err(bad(no + 1, "entry before a section header".into())),
                Section::Tokens(_) => {
                    let id: usize = b
                        .parse()
                        .map_err(|_| bad(no + 1, format!("bad token id {b:?}")))?;
                    if id != tokens.len() {
                        return Err(bad(no + 1, format!("token ids not dense at id {id}")));
                    }
                    tokens.push(a.to_string());
                }
                Section::Merges(_) => merges.push((a.to_string(), b.to_string())),
                Section::Complexity(_) => {
                    let id: usize = a
                        .parse()
                        .map_err(|_| bad(no + 1, format!("bad token id {a:?}")))?;
                    let cid: u16 = b
                        .parse()
                        .map_err(|_| bad(no + 1, format!("bad complexity id {b:?}")))?;
                    let t = table.as_mut().expect("section implies table");
                    if id != t.len() {
                        return Err(bad(no + 1, format!("table ids not dense at id {id}")));
                    }
                    t.push(cid);
                }
            }
        }

        let structural = |reason: String| Error::BadFile {
            path: path.to_string(),
            reason,
        };
        let (line_no, specials_text) =
            specials_line.ok_or_else(|| structural("missing #specials: header".into()))?;
        let token_ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if token_ids.len() != tokens.len() {
            return Err(structural("duplicate token strings".into()));
        }
        let mut named: HashMap<&str, u32> = HashMap::new();
        for part in specials_text.split_whitespace() {
            let (name, id) = part
                .rsplit_once('=')
                .ok_or_else(|| bad(line_no, format!("bad special {part:?}")))?;
            let id = id
                .parse()
                .map_err(|_| bad(line_no, format!("bad special id in {part:?}")))?;
            named.insert(name, id);
        }
        let need = |name: &str| {
            named
                .get(name)
                .copied()
                .ok_or_else(|| structural(format!("missing special {name}")))
        };
        let mut levels = Vec::new();
        if let Some((line_no, text)) = levels_line {
            for part in text.split_whitespace() {
                let (rest, lid) = part
                    .rsplit_once(':')
                    .ok_or_else(|| bad(line_no, format!("bad level token {part:?}")))?;
                let (_, tid) = rest
                    .rsplit_once('=')
                    .ok_or_else(|| bad(line_no, format!("bad level token {part:?}")))?;
                let tid: u32 = tid
                    .parse()
                    .map_err(|_| bad(line_no, format!("bad token id in {part:?}")))?;
                let lid: u16 = lid
                    .parse()
                    .map_err(|_| bad(line_no, format!("bad level id in {part:?}")))?;
                levels.push((lid, tid));
            }
        }
        let specials = SpecialTokens {
            pad: need(PAD_TOKEN)?,
            bos: need(BOS_TOKEN)?,
            eos: need(EOS_TOKEN)?,
            unk: need(UNK_TOKEN)?,
            sep: need(SEP_TOKEN)?,
            levels,
        };
        for (l, r) in &merges {
            let merged = format!("{l}{r}");
            if !token_ids.contains_key(&merged) {
                return Err(structural(format!(
                    "merge output {merged:?} is not in the token list"
                )));
            }
        }
        let table = match table {
            None => None,
            Some(ids) => {
                if ids.len() != tokens.len() {
                    return Err(structural(format!(
                        "complexity table length {} != vocab size {}",
                        ids.len(),
                        tokens.len()
                    )));
                }
                Some(ComplexityTable { ids })
            }
        };
        let merge_ranks = merges
            .iter()
            .enumerate()
            .map(|(i, (l, r))| ((l.clone(), r.clone()), i))
            .collect();
        Ok((
            BpeVocab {
                tokens,
                token_ids,
                merges,
                merge_ranks,
                specials,
                word_counts: BTreeMap::new(),
            },
            table,
        ))
    }

    /// Writes the vocabulary (and table, when given) to a file.
    pub fn save(&self, path: &Path, table: Option<&ComplexityTable>) -> Result<()> {
        std::fs::write(path, self.render(table))?;
        Ok(())
    }

    /// Loads a vocabulary file.
    pub fn load(path: &Path) -> Result<(Self, Option<ComplexityTable>)> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_lexicon() -> ComplexityLexicon {
        ComplexityLexicon::from_entries(
            &["A", "B"],
            &[("tree", "A"), ("need", "A"), ("peach", "B"), ("light", "B")],
        )
        .unwrap()
    }

    fn tiny_corpus() -> Vec<String> {
        vec![
            "tree need light .".to_string(),
            "peach light tree .".to_string(),
            "need tree peach .".to_string(),
        ]
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        let lex = ComplexityLexicon::new(&["A"]).unwrap();
        // "aaab": pairs (a,a) twice, (a,b</w>) once.
        let vocab = train_bpe(&["aaab".to_string()], 1, &lex).unwrap();
        assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn merge_ties_break_lexicographically() {
        let lex = ComplexityLexicon::new(&["A"]).unwrap();
        // Both words appear twice; pair counts tie at 2.
        let corpus = vec!["cd ab".to_string(), "ab cd".to_string()];
        let vocab = train_bpe(&corpus, 1, &lex).unwrap();
        assert_eq!(
            vocab.merges(),
            &[("a".to_string(), format!("b{END_OF_WORD}"))]
        );
    }

    #[test]
    fn vocabulary_ids_are_dense_and_unique() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 10, &lex).unwrap();
        for id in 0..vocab.len() as u32 {
            let tok = vocab.token(id).unwrap();
            assert_eq!(vocab.id_of(tok), Some(id));
        }
        // One level token per lexical level, resolvable by level id.
        assert_eq!(vocab.specials().levels.len(), 2);
        assert!(vocab.specials().level_token(1).is_some());
        assert!(vocab.specials().level_token(2).is_some());
        assert_eq!(vocab.specials().level_token(9), None);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let lex = tiny_lexicon();
        assert!(matches!(
            train_bpe(&[], 5, &lex),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(
            train_bpe(&["   ".to_string()], 5, &lex),
            Err(Error::EmptyCorpus)
        ));
    }

    // Reference implementation: at each step, re-scan all adjacent pairs,
    // take the one whose merge rule is earliest, merge only its leftmost
    // occurrence. Slower but obviously faithful to rule order.
    fn slow_encode_word(vocab: &BpeVocab, word: &str) -> Vec<u32> {
        if word.is_empty() {
            return Vec::new();
        }
        let mut syms = word_symbols(word);
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..syms.len().saturating_sub(1) {
                if let Some(rank) = vocab.merge_rank(&syms[i], &syms[i + 1]) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                None => break,
                Some((_, i)) => {
                    let merged = format!("{}{}", syms[i], syms[i + 1]);
                    syms.splice(i..=i + 1, [merged]);
                }
            }
        }
        syms.iter()
            .map(|s| vocab.id_of(s).unwrap_or(vocab.specials().unk))
            .collect()
    }

    #[test]
    fn encode_agrees_with_slow_reference() {
        let lex = tiny_lexicon();
        let mut corpus = tiny_corpus();
        corpus.push("lightly needed treehouse preach".to_string());
        let vocab = train_bpe(&corpus, 40, &lex).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let alphabet: Vec<char> = "acdeghilnprstu".chars().collect();
        for _ in 0..300 {
            let len = rng.random_range(1..=12);
            let word: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            assert_eq!(
                vocab.encode_word(&word),
                slow_encode_word(&vocab, &word),
                "word {word:?}"
            );
        }
        for sentence in &corpus {
            for word in words::split_words(sentence) {
                assert_eq!(vocab.encode_word(&word), slow_encode_word(&vocab, &word));
            }
        }
    }

    #[test]
    fn decode_inverts_encode_on_training_characters() {
        let lex = tiny_lexicon();
        let corpus = tiny_corpus();
        let vocab = train_bpe(&corpus, 25, &lex).unwrap();
        for sentence in &corpus {
            let enc = vocab.encode(sentence);
            assert_eq!(vocab.decode(&enc.ids), *sentence);
        }
        // Random sentences over the training characters round-trip too.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let words = ["tree", "need", "peach", "light", "la", "pe", "."];
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let sentence = (0..n)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect::<Vec<_>>()
                .join(" ");
            let enc = vocab.encode(&sentence);
            assert_eq!(vocab.decode(&enc.ids), sentence, "sentence {sentence:?}");
        }
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 10, &lex).unwrap();
        let enc = vocab.encode("treeX");
        assert!(enc.ids.contains(&vocab.specials().unk));
        let text = vocab.decode(&enc.ids);
        assert!(text.contains(UNK_SURFACE), "decoded {text:?}");
    }

    #[test]
    fn encoding_is_word_aligned() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 15, &lex).unwrap();
        let enc = vocab.encode("peach tree needs light .");
        assert_eq!(enc.ids.len(), enc.word_index.len());
        // Group ids by source word and decode each group back to its word.
        for (wi, word) in enc.words.iter().enumerate() {
            let group: Vec<u32> = enc
                .ids
                .iter()
                .zip(&enc.word_index)
                .filter(|(_, &w)| w == wi)
                .map(|(&id, _)| id)
                .collect();
            assert!(!group.is_empty(), "word {word:?} produced no ids");
            assert_eq!(vocab.decode(&group), *word);
            // Exactly the last id of the group closes the word.
            for (k, id) in group.iter().enumerate() {
                assert_eq!(vocab.is_word_final(*id), k == group.len() - 1);
            }
        }
    }

    #[test]
    fn word_context_ids_follow_the_source_word() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 15, &lex).unwrap();
        let enc = vocab.encode("peach tree .");
        let cids = word_context_complexity_ids(&enc, &lex);
        for (i, &wi) in enc.word_index.iter().enumerate() {
            let want = lex.level_of_word(&enc.words[wi]);
            assert_eq!(cids[i], want);
        }
        assert!(cids.contains(&2), "peach sub-words carry level B");
        assert!(cids.contains(&1), "tree sub-words carry level A");
        assert!(cids.contains(&0), "punctuation carries id 0");
    }

    #[test]
    fn table_gives_unambiguous_subwords_their_word_level() {
        let lex = tiny_lexicon();
        // Only level-B words (and punctuation) occur, so every sub-word of
        // peach votes for exactly one level.
        let corpus = vec!["peach light .".to_string(), "peach light .".to_string()];
        let vocab = train_bpe(&corpus, 8, &lex).unwrap();
        let table = build_complexity_table(&vocab, &lex).unwrap();
        for id in vocab.encode_word("peach") {
            assert_eq!(table.get(id).unwrap(), 2, "token {:?}", vocab.token(id));
        }
        let dot = vocab.encode_word(".");
        assert_eq!(table.get(dot[0]).unwrap(), 0);
        assert_eq!(table.get(vocab.specials().bos).unwrap(), lex.special_id());
        let z = vocab.specials().level_token(2).unwrap();
        assert_eq!(table.get(z).unwrap(), 2);
    }

    #[test]
    fn ambiguous_token_takes_majority_level_or_out_on_tie() {
        let lex = ComplexityLexicon::from_entries(
            &["A", "B"],
            &[("ax", "A"), ("ay", "B"), ("az", "B")],
        )
        .unwrap();
        // No merges: every token is a bare character. "a" occurs in one A
        // word (count 2) and two B words (counts 1 + 1): a tie, so out.
        let corpus = vec!["ax ax ay az".to_string()];
        let vocab = train_bpe(&corpus, 0, &lex).unwrap();
        let table = build_complexity_table(&vocab, &lex).unwrap();
        let a = vocab.id_of("a").unwrap();
        assert_eq!(table.get(a).unwrap(), lex.out_id());

        // Tip the balance toward A: majority wins.
        let corpus = vec!["ax ax ax ay az".to_string()];
        let vocab = train_bpe(&corpus, 0, &lex).unwrap();
        let table = build_complexity_table(&vocab, &lex).unwrap();
        let a = vocab.id_of("a").unwrap();
        assert_eq!(table.get(a).unwrap(), 1);
    }

    #[test]
    fn table_rebuild_is_identical_and_total() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 20, &lex).unwrap();
        let t1 = build_complexity_table(&vocab, &lex).unwrap();
        let t2 = build_complexity_table(&vocab, &lex).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), vocab.len());
        let max = lex.num_complexity_ids() as u16;
        for id in 0..vocab.len() as u32 {
            assert!(t1.get(id).unwrap() < max);
        }
        assert!(matches!(
            t1.get(vocab.len() as u32),
            Err(Error::TokenIdOutOfRange { .. })
        ));
    }

    #[test]
    fn vocab_file_round_trips_byte_exactly() {
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 20, &lex).unwrap();
        let table = build_complexity_table(&vocab, &lex).unwrap();
        let text = vocab.render(Some(&table));
        let (back, back_table) = BpeVocab::parse(&text, "<mem>").unwrap();
        assert_eq!(back.render(back_table.as_ref()), text);
        assert_eq!(back_table.as_ref(), Some(&table));
        // The reloaded vocabulary encodes identically.
        for sentence in tiny_corpus() {
            assert_eq!(back.encode(&sentence), vocab.encode(&sentence));
        }
        // Training statistics are gone, so table building now fails.
        assert!(matches!(
            build_complexity_table(&back, &lex),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_parse_rejects_garbage() {
        assert!(BpeVocab::parse("", "<mem>").is_err());
        assert!(BpeVocab::parse("#something-else\n", "<mem>").is_err());
        let lex = tiny_lexicon();
        let vocab = train_bpe(&tiny_corpus(), 5, &lex).unwrap();
        let mut text = vocab.render(None);
        text.push_str("stray line without tab\n");
        assert!(BpeVocab::parse(&text, "<mem>").is_err());
    }
}
