//! Graded lexicons: words mapped to lexical complexity levels.
//!
//! A lexicon owns the level inventory and assigns every possible word a
//! complexity id from one fixed layout: punctuation is id 0, the lexical
//! levels are ids 1..=n in inventory order, unmapped words share the
//! out-of-lexicon id n+1, and model-internal special tokens share id n+2.
//! The lookup is total: any string classifies to exactly one id.
//!
//! On disk a lexicon is a UTF-8 text file with a `#levels:` header naming
//! the inventory, optional `#`-prefixed comments, and one `word<TAB>level`
//! entry per line.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::words;

/// Complexity id of punctuation words.
pub const PUNCTUATION_ID: u16 = 0;

/// One lexical level: its complexity id and its inventory name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityLevel {
    pub id: u16,
    pub name: String,
}

/// Words of the requested levels, plus the ids the set was built from.
#[derive(Debug, Clone)]
pub struct AllowedWordSet {
    level_ids: Vec<u16>,
    words: BTreeSet<String>,
}

impl AllowedWordSet {
    /// The lexical level ids this set covers, ascending.
    pub fn level_ids(&self) -> &[u16] {
        &self.level_ids
    }

    /// Membership test on the lowercased word.
    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    /// All words in the set, sorted.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// A graded lexicon: level inventory, word entries and a punctuation set.
#[derive(Debug, Clone)]
pub struct ComplexityLexicon {
    /// Lexical levels in inventory order; `lexical[i].id == i + 1`.
    lexical: Vec<ComplexityLevel>,
    /// Lowercased word to lexical level id.
    entries: HashMap<String, u16>,
    /// Words classified as punctuation (id 0).
    punctuation: BTreeSet<String>,
}

impl ComplexityLexicon {
    /// Creates an empty lexicon over the given level inventory.
    ///
    /// Level names must be unique, non-empty and free of whitespace, commas,
    /// colons and equals signs (they appear in file headers and entry lines).
    pub fn new<S: AsRef<str>>(level_names: &[S]) -> Result<Self> {
        let mut lexical = Vec::with_capacity(level_names.len());
        let mut seen = BTreeSet::new();
        for (i, name) in level_names.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty()
                || name.contains([',', ':', '='])
                || name.contains(char::is_whitespace)
            {
                return Err(Error::BadLevelInventory {
                    reason: format!(
                        "level name {name:?} is empty or contains ',', ':', '=' or whitespace"
                    ),
                });
            }
            if !seen.insert(name.to_string()) {
                return Err(Error::BadLevelInventory {
                    reason: format!("duplicate level name {name:?}"),
                });
            }
            lexical.push(ComplexityLevel {
                id: (i + 1) as u16,
                name: name.to_string(),
            });
        }
        Ok(ComplexityLexicon {
            lexical,
            entries: HashMap::new(),
            punctuation: words::default_punctuation_words().into_iter().collect(),
        })
    }

    /// Builds a lexicon from `(word, level_name)` pairs.
    pub fn from_entries<S: AsRef<str>, W: AsRef<str>, L: AsRef<str>>(
        level_names: &[S],
        entries: &[(W, L)],
    ) -> Result<Self> {
        let mut lex = Self::new(level_names)?;
        for (word, level) in entries {
            lex.insert(word.as_ref(), level.as_ref())?;
        }
        Ok(lex)
    }

    /// Replaces the punctuation word set.
    pub fn set_punctuation<I: IntoIterator<Item = String>>(&mut self, words: I) {
        self.punctuation = words.into_iter().collect();
    }

    /// Maps a word to a level. Re-inserting with the same level is a no-op;
    /// a different level is rejected so the mapping stays a function.
    pub fn insert(&mut self, word: &str, level_name: &str) -> Result<()> {
        let level = self
            .level_by_name(level_name)
            .ok_or_else(|| Error::UnknownLevel {
                name: level_name.to_string(),
            })?
            .id;
        let key = word.to_lowercase();
        if key.is_empty() {
            return Err(Error::BadLevelInventory {
                reason: "cannot map an empty word".to_string(),
            });
        }
        match self.entries.get(&key) {
            Some(&existing) if existing != level => Err(Error::ConflictingLevel {
                word: key,
                existing: self.level_display_name(existing),
                requested: level_name.to_string(),
            }),
            _ => {
                self.entries.insert(key, level);
                Ok(())
            }
        }
    }

    // ------------------------------------------------------------------
    // Inventory and id layout
    // ------------------------------------------------------------------

    /// Lexical levels in inventory order.
    pub fn lexical_levels(&self) -> &[ComplexityLevel] {
        &self.lexical
    }

    /// Number of lexical levels.
    pub fn level_count(&self) -> usize {
        self.lexical.len()
    }

    /// Total number of complexity ids: punctuation + lexical + out + special.
    pub fn num_complexity_ids(&self) -> usize {
        self.lexical.len() + 3
    }

    /// Id shared by all out-of-lexicon words.
    pub fn out_id(&self) -> u16 {
        self.lexical.len() as u16 + 1
    }

    /// Id shared by all model-internal special tokens.
    pub fn special_id(&self) -> u16 {
        self.lexical.len() as u16 + 2
    }

    /// Looks a lexical level up by name.
    pub fn level_by_name(&self, name: &str) -> Option<&ComplexityLevel> {
        self.lexical.iter().find(|l| l.name == name)
    }

    /// Resolves level names to ids, rejecting unknown names.
    pub fn level_ids<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<u16>> {
        names
            .iter()
            .map(|n| {
                self.level_by_name(n.as_ref())
                    .map(|l| l.id)
                    .ok_or_else(|| Error::UnknownLevel {
                        name: n.as_ref().to_string(),
                    })
            })
            .collect()
    }

    /// Human-readable name for any complexity id ("P", level names, "<out>", "S").
    pub fn level_display_name(&self, id: u16) -> String {
        if id == PUNCTUATION_ID {
            "P".to_string()
        } else if let Some(level) = self.lexical.get(id as usize - 1) {
            level.name.clone()
        } else if id == self.out_id() {
            "<out>".to_string()
        } else if id == self.special_id() {
            "S".to_string()
        } else {
            format!("<id:{id}>")
        }
    }

    /// True when `id` denotes one of the lexical levels.
    pub fn is_lexical_id(&self, id: u16) -> bool {
        id >= 1 && (id as usize) <= self.lexical.len()
    }

    // ------------------------------------------------------------------
    // Classification
    // ------------------------------------------------------------------

    /// Total lookup: mapped word to its level id, punctuation to 0,
    /// everything else to the out id. Case-insensitive.
    pub fn level_of_word(&self, word: &str) -> u16 {
        let key = word.to_lowercase();
        if let Some(&id) = self.entries.get(&key) {
            id
        } else if self.punctuation.contains(&key) {
            PUNCTUATION_ID
        } else {
            self.out_id()
        }
    }

    /// True when the word is in the punctuation set (and not a mapped entry).
    pub fn is_punctuation(&self, word: &str) -> bool {
        self.level_of_word(word) == PUNCTUATION_ID
    }

    /// Number of mapped word entries.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All mapped words with their level ids, sorted by word.
    pub fn entries(&self) -> Vec<(&str, u16)> {
        let mut list: Vec<(&str, u16)> = self
            .entries
            .iter()
            .map(|(w, &id)| (w.as_str(), id))
            .collect();
        list.sort();
        list
    }

    /// The punctuation word set.
    pub fn punctuation_words(&self) -> impl Iterator<Item = &str> {
        self.punctuation.iter().map(String::as_str)
    }

    /// Union of the word sets of the requested lexical levels.
    ///
    /// Rejects ids that are not lexical levels of this lexicon, so callers
    /// cannot silently ask for punctuation or out-of-lexicon "levels".
    pub fn allowed_word_set(&self, level_ids: &[u16]) -> Result<AllowedWordSet> {
        let mut ids: Vec<u16> = level_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        for &id in &ids {
            if !self.is_lexical_id(id) {
                return Err(Error::NotALexicalLevel { id });
            }
        }
        let words = self
            .entries
            .iter()
            .filter(|(_, id)| ids.contains(id))
            .map(|(w, _)| w.clone())
            .collect();
        Ok(AllowedWordSet {
            level_ids: ids,
            words,
        })
    }

    /// Fraction of mapped words that occur at least once in the corpus.
    pub fn coverage(&self, corpus: &[String]) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::EmptyLexicon);
        }
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for sentence in corpus {
            for word in words::split_words(sentence) {
                let key = word.to_lowercase();
                if self.entries.contains_key(&key) {
                    seen.insert(key);
                }
            }
        }
        Ok(seen.len() as f64 / self.entries.len() as f64)
    }

    // ------------------------------------------------------------------
    // File format
    // ------------------------------------------------------------------

    /// Parses the text lexicon format.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_named(text, "<string>")
    }

    /// Like [`ComplexityLexicon::parse`] with a path for error messages.
    pub fn parse_named(text: &str, path: &str) -> Result<Self> {
        let mut lex: Option<ComplexityLexicon> = None;
        let mut punctuation: Option<Vec<String>> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#levels:") {
                if lex.is_some() {
                    return Err(Error::MalformedLine {
                        path: path.to_string(),
                        line: no + 1,
                        reason: "duplicate #levels: header".to_string(),
                    });
                }
                let names: Vec<String> = rest
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
                lex = Some(ComplexityLexicon::new(&names)?);
                continue;
            }
            if let Some(rest) = line.strip_prefix("#punctuation:") {
                punctuation = Some(rest.split_whitespace().map(str::to_string).collect());
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let lex = lex.as_mut().ok_or_else(|| Error::MalformedLine {
                path: path.to_string(),
                line: no + 1,
                reason: "entry before the #levels: header".to_string(),
            })?;
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(word), Some(level), None) if !word.is_empty() => {
                    lex.insert(word, level.trim())?;
                }
                _ => {
                    return Err(Error::MalformedLine {
                        path: path.to_string(),
                        line: no + 1,
                        reason: format!("expected word<TAB>level, got {line:?}"),
                    });
                }
            }
        }
        let mut lex = lex.ok_or_else(|| Error::BadFile {
            path: path.to_string(),
            reason: "missing #levels: header".to_string(),
        })?;
        if let Some(p) = punctuation {
            lex.set_punctuation(p);
        }
        Ok(lex)
    }

    /// Renders the lexicon in its text format (header, then sorted entries).
    pub fn render(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.lexical.iter().map(|l| l.name.as_str()).collect();
        let _ = writeln!(out, "#levels: {}", names.join(","));
        let default: BTreeSet<String> = words::default_punctuation_words().into_iter().collect();
        if self.punctuation != default {
            let puncts: Vec<&str> = self.punctuation.iter().map(String::as_str).collect();
            let _ = writeln!(out, "#punctuation: {}", puncts.join(" "));
        }
        for (word, id) in self.entries() {
            let _ = writeln!(out, "{word}\t{}", self.level_display_name(id));
        }
        out
    }

    /// Loads a lexicon file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_named(&text, &path.display().to_string())
    }

    /// Writes the lexicon file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
