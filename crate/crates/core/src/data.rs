//! Corpus ingestion: whitespace tokenization, capped vocabulary with
//! reserved `<UNK>`/`<BOS>`/`<EOS>`, sentence encoding, and mini-batch
//! assembly of whole sentences with materialized context windows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<UNK>";
pub const BOS_TOKEN: &str = "<BOS>";
pub const EOS_TOKEN: &str = "<EOS>";

pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const RESERVED: usize = 3;

/// Word <-> id map with a capped size. Reserved tokens occupy the first
/// three ids. `<UNK>` is a regular softmax item; `<BOS>` is input-only.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let id_to_word: Vec<String> = [UNK_TOKEN, BOS_TOKEN, EOS_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary {
            word_to_id,
            id_to_word,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.word_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.id_to_word[id]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    /// All words in id order, reserved tokens first. This is the
    /// vocabulary file layout: one word per line.
    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }

    pub fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut vocab = Vocabulary {
            word_to_id: HashMap::new(),
            id_to_word: Vec::new(),
        };
        for (i, w) in words.into_iter().enumerate() {
            if vocab.word_to_id.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            vocab.id_to_word.push(w);
        }
        for (tok, id) in [(UNK_TOKEN, UNK_ID), (BOS_TOKEN, BOS_ID), (EOS_TOKEN, EOS_ID)] {
            if vocab.word_to_id.get(tok) != Some(&id) {
                return Err(Error::Config(format!(
                    "vocabulary file must start with the reserved tokens, {tok} misplaced"
                )));
            }
        }
        Ok(vocab)
    }
}

/// Keeps the most frequent `max_size - 3` words; frequency ties break by
/// first occurrence in the stream.
pub fn build_vocab<'a>(
    tokens: impl IntoIterator<Item = &'a str>,
    max_size: usize,
) -> Result<Vocabulary> {
    if max_size < RESERVED + 1 {
        return Err(Error::Config(format!(
            "max vocabulary size must be at least {}",
            RESERVED + 1
        )));
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // word -> (count, first_pos)
    let mut seen_any = false;
    for (pos, tok) in tokens.into_iter().enumerate() {
        seen_any = true;
        let entry = counts.entry(tok).or_insert((0, pos));
        entry.0 += 1;
    }
    if !seen_any {
        return Err(Error::Empty("token stream"));
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .map(|(w, (c, p))| (w, c, p))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_size - RESERVED);

    let mut vocab = Vocabulary::with_reserved();
    for (w, _, _) in ranked {
        let id = vocab.id_to_word.len();
        vocab.word_to_id.insert(w.to_string(), id);
        vocab.id_to_word.push(w.to_string());
    }
    Ok(vocab)
}

/// One sentence per line, whitespace tokens, OOV mapped to `<UNK>`, EOS
/// appended. Empty lines are dropped.
pub fn encode_corpus(text: &str, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    text.lines()
        .filter_map(|line| {
            let ids: Vec<usize> = line.split_whitespace().map(|w| vocab.id(w)).collect();
            if ids.is_empty() {
                None
            } else {
                let mut ids = ids;
                ids.push(EOS_ID);
                Some(ids)
            }
        })
        .collect()
}

/// A mini-batch of whole sentences with context windows materialized.
///
/// Prediction positions run over each sentence's tokens including the
/// trailing EOS; the context at position t holds the `context_window`
/// previous tokens, oldest first, BOS-padded at the sentence start.
#[derive(Debug, Clone)]
pub struct SentenceBatch {
    /// Token ids per sentence, EOS included.
    pub sentences: Vec<Vec<usize>>,
    /// T_k per sentence (== sentences[k].len()).
    pub lengths: Vec<usize>,
    /// Flattened context ids, `context_window` per position, sentences in order.
    pub contexts: Vec<usize>,
    /// Flattened prediction targets, one per position.
    pub targets: Vec<usize>,
    pub context_window: usize,
}

impl SentenceBatch {
    pub fn new(sentences: Vec<Vec<usize>>, context_window: usize) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::Empty("sentence batch"));
        }
        if sentences.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("sentence in batch"));
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let total: usize = lengths.iter().sum();
        let mut contexts = Vec::with_capacity(total * context_window);
        let mut targets = Vec::with_capacity(total);
        for sent in &sentences {
            for t in 0..sent.len() {
                for back in (1..=context_window).rev() {
                    contexts.push(if t >= back { sent[t - back] } else { BOS_ID });
                }
                targets.push(sent[t]);
            }
        }
        Ok(SentenceBatch {
            sentences,
            lengths,
            contexts,
            targets,
            context_window,
        })
    }

    /// Total prediction positions in the batch.
    pub fn positions(&self) -> usize {
        self.targets.len()
    }

    pub fn max_id(&self) -> usize {
        self.targets
            .iter()
            .chain(self.contexts.iter())
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// Shuffles sentences deterministically and groups consecutive runs of at
/// most `batch_size` into batches. Every sentence appears exactly once.
pub fn make_batches(
    sentences: &[Vec<usize>],
    batch_size: usize,
    context_window: usize,
    seed: u64,
) -> Result<Vec<SentenceBatch>> {
    if sentences.is_empty() {
        return Err(Error::Empty("sentence list"));
    }
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let group: Vec<Vec<usize>> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            SentenceBatch::new(group, context_window)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_caps_by_frequency() {
        let vocab = build_vocab("a a b".split_whitespace(), 4).unwrap();
        assert_eq!(vocab.size(), 4);
        assert!(vocab.contains("a"));
        assert!(!vocab.contains("b"));
        assert_eq!(vocab.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_no_eviction_when_room() {
        let vocab = build_vocab("c b a b c c".split_whitespace(), 100).unwrap();
        assert_eq!(vocab.size(), RESERVED + 3);
        // frequency order, ties by first occurrence
        assert_eq!(vocab.word(RESERVED), "c");
        assert_eq!(vocab.word(RESERVED + 1), "b");
        assert_eq!(vocab.word(RESERVED + 2), "a");
    }

    #[test]
    fn vocab_tie_break_by_first_occurrence() {
        let vocab = build_vocab("x y x y z".split_whitespace(), RESERVED + 2).unwrap();
        assert!(vocab.contains("x") && vocab.contains("y"));
        assert!(!vocab.contains("z"));
    }

    #[test]
    fn vocab_rejects_empty_stream() {
        assert!(build_vocab(std::iter::empty::<&str>(), 10).is_err());
    }

    #[test]
    fn encode_basics() {
        let vocab = build_vocab("a b".split_whitespace(), 10).unwrap();
        let enc = encode_corpus("a b\n\nz\n", &vocab);
        assert_eq!(enc.len(), 2);
        assert_eq!(enc[0], vec![vocab.id("a"), vocab.id("b"), EOS_ID]);
        assert_eq!(enc[1], vec![UNK_ID, EOS_ID]);
        assert!(encode_corpus("", &vocab).is_empty());
    }

    #[test]
    fn encode_decode_roundtrip_in_vocab() {
        let vocab = build_vocab("alpha beta gamma".split_whitespace(), 10).unwrap();
        for w in ["alpha", "beta", "gamma"] {
            assert_eq!(vocab.word(vocab.id(w)), w);
        }
    }

    #[test]
    fn vocab_file_roundtrip() {
        let vocab = build_vocab("a b a".split_whitespace(), 10).unwrap();
        let rebuilt = Vocabulary::from_words(vocab.words().to_vec()).unwrap();
        assert_eq!(rebuilt.size(), vocab.size());
        assert_eq!(rebuilt.id("b"), vocab.id("b"));
        assert!(Vocabulary::from_words(vec!["a".to_string()]).is_err());
    }

    #[test]
    fn context_windows_bos_padded() {
        // sentence [w1, w2, EOS], window 2:
        // (BOS,BOS)->w1, (BOS,w1)->w2, (w1,w2)->EOS
        let (w1, w2) = (5usize, 6usize);
        let batch = SentenceBatch::new(vec![vec![w1, w2, EOS_ID]], 2).unwrap();
        assert_eq!(batch.positions(), 3);
        assert_eq!(batch.contexts, vec![BOS_ID, BOS_ID, BOS_ID, w1, w1, w2]);
        assert_eq!(batch.targets, vec![w1, w2, EOS_ID]);
    }

    #[test]
    fn context_never_references_future() {
        let sent: Vec<usize> = (10..20).collect();
        let batch = SentenceBatch::new(vec![sent.clone()], 3).unwrap();
        for (pos, ctx) in batch.contexts.chunks(3).enumerate() {
            for &c in ctx {
                assert!(c == BOS_ID || sent[..pos].contains(&c), "position {pos} leaks");
            }
        }
    }

    #[test]
    fn batching_partitions_and_is_deterministic() {
        let sentences: Vec<Vec<usize>> = (0..5).map(|i| vec![RESERVED + i, EOS_ID]).collect();
        let batches = make_batches(&sentences, 2, 2, 42).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.sentences.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        // union of batches == sentence multiset
        let mut seen: Vec<Vec<usize>> = batches
            .iter()
            .flat_map(|b| b.sentences.iter().cloned())
            .collect();
        seen.sort();
        let mut expect = sentences.clone();
        expect.sort();
        assert_eq!(seen, expect);

        let again = make_batches(&sentences, 2, 2, 42).unwrap();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.sentences, b.sentences);
        }
        let other_seed = make_batches(&sentences, 2, 2, 43).unwrap();
        let flat_a: Vec<_> = batches.iter().flat_map(|b| b.sentences.clone()).collect();
        let flat_b: Vec<_> = other_seed.iter().flat_map(|b| b.sentences.clone()).collect();
        assert_ne!(flat_a, flat_b, "different seeds should reshuffle");

        assert!(make_batches(&[], 2, 2, 0).is_err());
    }

    #[test]
    fn batch_size_one_is_per_sentence() {
        let sentences: Vec<Vec<usize>> = (0..3).map(|i| vec![RESERVED + i, EOS_ID]).collect();
        let batches = make_batches(&sentences, 1, 2, 7).unwrap();
        assert_eq!(batches.len(), 3);
        assert!(batches.iter().all(|b| b.sentences.len() == 1));
    }
}
