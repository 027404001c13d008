//! Tokenization and sentence embedding.
//!
//! Text is lowercased, split on whitespace and punctuation, then segmented
//! by greedy longest-match against the vocabulary (continuation pieces carry
//! a `##` prefix). Sequences are framed as `[CLS] ... [SEP]`, and embeddings
//! are the layer-normalized sum of token, segment, and learned position
//! embeddings.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Embedding, LayerNorm, ParamGroup, ParamStore};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Special tokens, in the fixed order they occupy at the head of every
/// vocabulary file (line index = id).
pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]", "[EOS]"];

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const BOS: usize = 5;
pub const EOS: usize = 6;

/// Dense token -> id map with stable special ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from the non-special tokens; specials are prepended.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for w in words {
            tokens.push(w);
        }
        Self::from_token_list(tokens)
    }

    fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Vocab("vocabulary shorter than the special-token block".into()));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Vocab(format!(
                    "special token {i} must be {want}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {i}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the special block is always present
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Newline-delimited serialization; first seven lines are the specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            let _ = writeln!(out, "{t}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Self::from_token_list(tokens)
    }
}

/// Tokenized text with framing, segments, positions, and padding mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of real (non-pad) positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Extend with `[PAD]` up to `len`; padded positions are mask-false.
    pub fn pad_to(&mut self, len: usize) {
        while self.token_ids.len() < len {
            self.token_ids.push(PAD);
            self.segment_ids.push(0);
            self.position_ids.push(self.position_ids.len());
            self.attention_mask.push(false);
        }
    }

    fn validate(&self) -> Result<()> {
        if self.token_ids.first() != Some(&CLS) {
            return Err(Error::contract("TokenSequence", "must start with [CLS]"));
        }
        let last_active = self
            .attention_mask
            .iter()
            .rposition(|&m| m)
            .ok_or_else(|| Error::contract("TokenSequence", "no active positions"))?;
        if self.token_ids[last_active] != SEP {
            return Err(Error::contract("TokenSequence", "last non-pad token must be [SEP]"));
        }
        Ok(())
    }
}

/// Split into lowercase word and punctuation chunks.
fn pre_tokenize(text: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                chunks.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() {
            if !word.is_empty() {
                chunks.push(std::mem::take(&mut word));
            }
            chunks.push(ch.to_string());
        } else {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        }
    }
    if !word.is_empty() {
        chunks.push(word);
    }
    chunks
}

/// Greedy longest-match sub-word split of one chunk; `None` means the whole
/// chunk maps to `[UNK]`.
fn wordpiece(vocab: &Vocabulary, chunk: &str) -> Option<Vec<usize>> {
    let chars: Vec<char> = chunk.chars().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        for end in (start + 1..=chars.len()).rev() {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start == 0 { body } else { format!("##{body}") };
            if let Some(id) = vocab.id(&candidate) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return None,
        }
    }
    Some(pieces)
}

/// Tokenize into a `[CLS] ... [SEP]` framed sequence of at most `max_len`
/// ids. Unknown spans collapse to `[UNK]`; truncation keeps the framing.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len must be >= 3, got {max_len}")));
    }
    let mut ids = vec![CLS];
    'chunks: for chunk in pre_tokenize(text) {
        let piece_ids = wordpiece(vocab, &chunk).unwrap_or_else(|| vec![UNK]);
        for id in piece_ids {
            if ids.len() == max_len - 1 {
                break 'chunks;
            }
            ids.push(id);
        }
    }
    ids.push(SEP);
    let n = ids.len();
    let seq = TokenSequence {
        token_ids: ids,
        segment_ids: vec![0; n],
        position_ids: (0..n).collect(),
        attention_mask: vec![true; n],
    };
    seq.validate()?;
    Ok(seq)
}

/// Inverse of `tokenize` for display: merges `##` continuations, drops the
/// frame and padding.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for &id in ids {
        if id < SPECIAL_TOKENS.len() {
            continue;
        }
        let Some(tok) = vocab.token(id) else { continue };
        if let Some(cont) = tok.strip_prefix("##") {
            out.push_str(cont);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

/// Token + segment + learned-position embeddings, summed and layer-normalized.
///
/// The token table is shared (tying with the MLM head and the caption
/// decoder input); segment and position tables are this embedder's own.
pub struct TextEmbedder {
    pub token: Embedding,
    pub segment: Embedding,
    pub position: Embedding,
    pub norm: LayerNorm,
    pub dropout: f64,
    pub max_len: usize,
}

impl TextEmbedder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        token: Embedding,
        max_len: usize,
        dropout: f64,
    ) -> Self {
        let d = token.dim;
        TextEmbedder {
            token,
            segment: Embedding::new(store, rng, "text.segment", 2, d, ParamGroup::Transformer),
            position: Embedding::new(store, rng, "text.position", max_len, d, ParamGroup::Transformer),
            norm: LayerNorm::new(store, "text.emb_norm", d, ParamGroup::Transformer),
            dropout,
            max_len,
        }
    }

    /// Sentence embedding rows aligned with the sequence.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSequence) -> Result<NodeId> {
        if seq.len() > self.max_len {
            return Err(Error::contract(
                "TextEmbedder::embed",
                format!("sequence length {} exceeds max {}", seq.len(), self.max_len),
            ));
        }
        let tok = self.token.forward(g, store, &seq.token_ids)?;
        let seg = self.segment.forward(g, store, &seq.segment_ids)?;
        let pos = self.position.forward(g, store, &seq.position_ids)?;
        let sum = g.add(tok, seg)?;
        let sum = g.add(sum, pos)?;
        let normed = self.norm.forward(g, store, sum)?;
        g.dropout(normed, self.dropout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(
            ["a", "red", "blue", "circle", "square", "left", "of", "##s", "x"]
                .iter()
                .map(|s| s.to_string()),
        )
        .unwrap()
    }

    #[test]
    fn empty_text_is_cls_sep() {
        let seq = tokenize("", &vocab(), 40).unwrap();
        assert_eq!(seq.token_ids, vec![CLS, SEP]);
        assert!(seq.attention_mask.iter().all(|&m| m));
    }

    #[test]
    fn in_vocab_words_tokenize_directly() {
        let v = vocab();
        let seq = tokenize("red circle", &v, 40).unwrap();
        assert_eq!(
            seq.token_ids,
            vec![CLS, v.id("red").unwrap(), v.id("circle").unwrap(), SEP]
        );
        assert_eq!(seq.segment_ids, vec![0; 4]);
        assert_eq!(seq.position_ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn long_sentence_truncates_to_max_len_with_sep() {
        let text = vec!["red"; 60].join(" ");
        let seq = tokenize(&text, &vocab(), 40).unwrap();
        assert_eq!(seq.len(), 40);
        assert_eq!(*seq.token_ids.last().unwrap(), SEP);
        assert_eq!(seq.token_ids[0], CLS);
    }

    #[test]
    fn unknown_chunk_becomes_unk() {
        let seq = tokenize("red zzz circle", &vocab(), 40).unwrap();
        let v = vocab();
        assert_eq!(
            seq.token_ids,
            vec![CLS, v.id("red").unwrap(), UNK, v.id("circle").unwrap(), SEP]
        );
    }

    #[test]
    fn continuation_pieces_merge_on_longest_match() {
        let v = vocab();
        // "circles" = circle + ##s
        let seq = tokenize("circles", &v, 40).unwrap();
        assert_eq!(
            seq.token_ids,
            vec![CLS, v.id("circle").unwrap(), v.id("##s").unwrap(), SEP]
        );
        assert_eq!(detokenize(&seq.token_ids, &v), "circles");
    }

    #[test]
    fn detokenize_round_trips_grammar_text() {
        let v = vocab();
        for text in ["a red circle", "a red circle left of a blue square", ""] {
            let seq = tokenize(text, &v, 40).unwrap();
            assert_eq!(detokenize(&seq.token_ids, &v), text);
            let again = tokenize(&detokenize(&seq.token_ids, &v), &v, 40).unwrap();
            assert_eq!(again.token_ids, seq.token_ids);
        }
    }

    #[test]
    fn tokenize_rejects_tiny_max_len() {
        assert!(tokenize("hi", &vocab(), 2).is_err());
    }

    #[test]
    fn padding_extends_with_masked_pads() {
        let mut seq = tokenize("red", &vocab(), 40).unwrap();
        seq.pad_to(8);
        assert_eq!(seq.len(), 8);
        assert_eq!(seq.active_len(), 3);
        assert!(seq.token_ids[3..].iter().all(|&t| t == PAD));
        assert!(seq.attention_mask[3..].iter().all(|&m| !m));
    }

    #[test]
    fn vocab_file_round_trip_keeps_ids_dense_and_stable() {
        let v = vocab();
        let dir = std::env::temp_dir().join(format!("gridvlp-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(loaded.token(id), v.token(id));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(loaded.id(s), Some(i));
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn vocab_load_rejects_reordered_specials() {
        let dir = std::env::temp_dir().join(format!("gridvlp-vocab-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        std::fs::write(&path, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n[BOS]\n[EOS]\nword\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn embedding_is_deterministic_and_row_local() {
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let token = Embedding::new(&mut store, &mut rng, "tok", v.len(), 8, ParamGroup::Transformer);
        let emb = TextEmbedder::new(&mut store, &mut rng, token, 16, 0.0);

        let seq_a = tokenize("a red circle", &v, 16).unwrap();
        let seq_b = tokenize("a blue circle", &v, 16).unwrap();

        let run = |seq: &TokenSequence| {
            let mut g = Graph::inference();
            let e = emb.embed(&mut g, &store, seq).unwrap();
            g.value(e).data().to_vec()
        };
        // purity: identical sequences embed bit-identically
        assert_eq!(run(&seq_a), run(&seq_a));

        // locality: differing only at position 2 changes only row 2
        let ea = run(&seq_a);
        let eb = run(&seq_b);
        let d = 8;
        for row in 0..seq_a.len() {
            let same = ea[row * d..(row + 1) * d] == eb[row * d..(row + 1) * d];
            if row == 2 {
                assert!(!same, "differing token row must change");
            } else {
                assert!(same, "row {row} must be untouched");
            }
        }
    }
}
