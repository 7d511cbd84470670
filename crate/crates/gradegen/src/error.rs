//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

/// Alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All the ways this crate can fail.
#[derive(Debug, Error)]
pub enum Error {
    // ------------------------------------------------------------------
    // Lexicon
    // ------------------------------------------------------------------
    /// A word was mapped to two different levels.
    #[error("word {word:?} is already mapped to level {existing:?}, refusing level {requested:?}")]
    ConflictingLevel {
        word: String,
        existing: String,
        requested: String,
    },

    /// A level name was referenced that is not in the inventory.
    #[error("unknown complexity level {name:?}")]
    UnknownLevel { name: String },

    /// The level inventory itself is invalid.
    #[error("invalid level inventory: {reason}")]
    BadLevelInventory { reason: String },

    /// An operation that needs lexicon entries got an empty lexicon.
    #[error("lexicon has no entries")]
    EmptyLexicon,

    /// A requested complexity id does not denote a lexical level.
    #[error("complexity id {id} is not a lexical level of this lexicon")]
    NotALexicalLevel { id: u16 },

    // ------------------------------------------------------------------
    // File formats
    // ------------------------------------------------------------------
    /// A line in a text format could not be parsed.
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    /// A file-level structural problem (missing header, bad version, ...).
    #[error("{path}: {reason}")]
    BadFile { path: String, reason: String },

    // ------------------------------------------------------------------
    // Tokenizer
    // ------------------------------------------------------------------
    /// BPE training needs at least one word.
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,

    /// A token id fell outside the vocabulary or complexity table.
    #[error("token id {id} out of range (size {size})")]
    TokenIdOutOfRange { id: u32, size: usize },

    // ------------------------------------------------------------------
    // Corpus generation
    // ------------------------------------------------------------------
    /// The grammar has no templates or an empty slot word list.
    #[error("grammar is unusable: {reason}")]
    BadGrammar { reason: String },

    /// Keyword extraction found no in-lexicon word to sample.
    #[error("no in-lexicon word to pick a keyword from in {sentence:?}")]
    NoEligibleKeyword { sentence: String },

    // ------------------------------------------------------------------
    // Requests and decoding
    // ------------------------------------------------------------------
    /// A generation request violated its invariants.
    #[error("invalid generation request: {reason}")]
    BadRequest { reason: String },

    /// Vocabulary masking removed every token.
    #[error("allowed token set is empty for the requested levels")]
    EmptyAllowedSet,

    /// Beam search needs a positive width.
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,

    /// Reranking needs at least one candidate.
    #[error("candidate list is empty")]
    EmptyCandidates,

    // ------------------------------------------------------------------
    // Model
    // ------------------------------------------------------------------
    /// A model configuration field is out of range or inconsistent.
    #[error("invalid model config: {reason}")]
    BadModelConfig { reason: String },

    /// A sequence exceeded the learned position table.
    #[error("sequence length {len} exceeds max_positions {max}")]
    PositionOverflow { len: usize, max: usize },

    /// Tensor shapes disagreed.
    #[error("shape mismatch: {reason}")]
    ShapeMismatch { reason: String },

    /// A batch contained no unpadded target position.
    #[error("batch has no unpadded target position")]
    AllPositionsPadded,

    /// Training needs at least one example.
    #[error("training set is empty")]
    EmptyDataset,

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    /// A checkpoint could not be interpreted.
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },

    // ------------------------------------------------------------------
    // Metrics
    // ------------------------------------------------------------------
    /// Metric inputs were empty or misaligned.
    #[error("invalid metric input: {reason}")]
    BadMetricInput { reason: String },

    // ------------------------------------------------------------------
    // Wrapped std/serde failures
    // ------------------------------------------------------------------
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("bad config file: {0}")]
    Toml(#[from] toml::de::Error),
}
