//! Unigram language-model subword tokenizer.
//!
//! Text is split on spaces into chunks, each prefixed with [`BOUNDARY`], so
//! that pieces never cross a word start and decoding restores the exact
//! spacing. Training seeds a large candidate set of substrings, then
//! alternates EM re-estimation of piece probabilities with likelihood-based
//! pruning until the target size is reached. Encoding is Viterbi over the
//! segmentation lattice of each chunk.

mod lattice;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::RawCorpus;

pub use lattice::{Edge, SegmentationLattice};
pub use vocab::{Segmentation, UnigramVocab, VOCAB_MAGIC, VOCAB_VERSION};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Word-boundary marker prefixed to every space-separated chunk.
pub const BOUNDARY: char = '\u{2581}';

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("character {ch:?} at position {position} is not covered by the vocabulary")]
    Coverage { ch: char, position: usize },
    #[error("cannot prune to {requested} pieces: {required} are required (characters and specials)")]
    Prune { requested: usize, required: usize },
    #[error("token id {id} outside vocabulary of {size}")]
    Decode { id: u32, size: usize },
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
    #[error("vocabulary file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Final number of pieces, specials included.
    pub target_size: usize,
    /// Seed candidate count as a multiple of `target_size`.
    pub seed_factor: usize,
    pub shrink_factor: f64,
    pub em_iters_per_round: usize,
    pub max_piece_len: usize,
    pub character_coverage: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            target_size: 32_000,
            seed_factor: 8,
            shrink_factor: 0.75,
            em_iters_per_round: 2,
            max_piece_len: 16,
            character_coverage: 0.9995,
        }
    }
}

impl TrainerConfig {
    pub fn with_target(target_size: usize) -> Self {
        Self {
            target_size,
            ..Self::default()
        }
    }

    pub fn max_seed_size(&self) -> usize {
        self.target_size.saturating_mul(self.seed_factor)
    }
}

/// Splits text into boundary-prefixed chunks: `"a  b"` becomes
/// `["▁a", "▁", "▁b"]`.
pub fn pretokenize(text: &str) -> Vec<String> {
    if text.is_empty() {
        return Vec::new();
    }
    text.split(' ')
        .map(|w| {
            let mut s = String::with_capacity(w.len() + 3);
            s.push(BOUNDARY);
            s.push_str(w);
            s
        })
        .collect()
}

/// Chunk frequencies of a corpus plus its covered character set.
#[derive(Clone, Debug)]
pub struct TrainingCorpus {
    /// Distinct chunks (sorted) and how often each occurs.
    chunks: Vec<(Vec<char>, f64)>,
    covered: Vec<char>,
}

impl TrainingCorpus {
    /// Counts chunks and keeps the most frequent characters until
    /// `character_coverage` of all character occurrences is reached. Chunks
    /// are cut at uncovered characters.
    pub fn from_raw(corpus: &RawCorpus, character_coverage: f64) -> Result<Self, TokenizerError> {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for doc in &corpus.documents {
            for chunk in pretokenize(doc) {
                *counts.entry(chunk).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut char_freq: HashMap<char, u64> = HashMap::new();
        for (chunk, &n) in &counts {
            for c in chunk.chars() {
                *char_freq.entry(c).or_default() += n;
            }
        }
        let total: u64 = char_freq.values().sum();
        let mut by_freq: Vec<(char, u64)> = char_freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut covered = Vec::new();
        let mut acc = 0u64;
        for (c, n) in by_freq {
            if !covered.is_empty() && acc as f64 >= character_coverage * total as f64 {
                break;
            }
            covered.push(c);
            acc += n;
        }
        covered.sort_unstable();
        let covered_set: HashSet<char> = covered.iter().copied().collect();

        let mut pieces: BTreeMap<Vec<char>, f64> = BTreeMap::new();
        for (chunk, n) in counts {
            let chars: Vec<char> = chunk.chars().collect();
            for part in chars.split(|c| !covered_set.contains(c)) {
                if !part.is_empty() {
                    *pieces.entry(part.to_vec()).or_default() += n as f64;
                }
            }
        }
        Ok(Self {
            chunks: pieces.into_iter().collect(),
            covered,
        })
    }

    /// A corpus given directly as (chunk, count) pairs; every character counts
    /// as covered.
    pub fn from_chunks<S: AsRef<str>>(chunks: &[(S, f64)]) -> Self {
        let mut map: BTreeMap<Vec<char>, f64> = BTreeMap::new();
        for (s, n) in chunks {
            *map.entry(s.as_ref().chars().collect()).or_default() += n;
        }
        let mut covered: Vec<char> = map.keys().flatten().copied().collect();
        covered.sort_unstable();
        covered.dedup();
        Self {
            chunks: map.into_iter().collect(),
            covered,
        }
    }

    pub fn covered_chars(&self) -> &[char] {
        &self.covered
    }

    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunks(&self) -> impl Iterator<Item = (&[char], f64)> {
        self.chunks.iter().map(|(c, n)| (c.as_slice(), *n))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedPiece {
    pub surface: String,
    pub count: f64,
}

/// Candidate pieces: every substring of at most `max_piece_len` characters,
/// ranked by `frequency × length`, truncated to `max_seed_size`. Every covered
/// character is always kept.
pub fn seed_vocabulary(
    corpus: &RawCorpus,
    max_seed_size: usize,
    config: &TrainerConfig,
) -> Result<Vec<SeedPiece>, TokenizerError> {
    let tc = TrainingCorpus::from_raw(corpus, config.character_coverage)?;
    Ok(seed_from_chunks(&tc, max_seed_size, config.max_piece_len))
}

pub(crate) fn seed_from_chunks(tc: &TrainingCorpus, max_seed_size: usize, max_piece_len: usize) -> Vec<SeedPiece> {
    let mut freq: HashMap<&[char], f64> = HashMap::new();
    for (chunk, n) in &tc.chunks {
        for start in 0..chunk.len() {
            for end in start + 2..=(start + max_piece_len).min(chunk.len()) {
                *freq.entry(&chunk[start..end]).or_default() += n;
            }
        }
    }
    let mut char_freq: HashMap<char, f64> = HashMap::new();
    for (chunk, n) in &tc.chunks {
        for &c in chunk {
            *char_freq.entry(c).or_default() += n;
        }
    }
    let mut out: Vec<SeedPiece> = tc
        .covered
        .iter()
        .map(|&c| SeedPiece {
            surface: c.to_string(),
            count: char_freq.get(&c).copied().unwrap_or(0.0),
        })
        .collect();
    let mut multi: Vec<(String, f64, f64)> = freq
        .into_iter()
        .map(|(s, n)| (s.iter().collect::<String>(), n, n * s.len() as f64))
        .filter(|(s, _, _)| !SPECIAL_SURFACES.contains(&s.as_str()))
        .collect();
    multi.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    let room = max_seed_size.saturating_sub(out.len());
    out.extend(multi.into_iter().take(room).map(|(surface, count, score)| SeedPiece {
        surface,
        // initial weight is the frequency × length score
        count: score.max(count),
    }));
    out
}

/// Corpus log-likelihood under `vocab` (marginal over segmentations).
pub fn corpus_log_likelihood(vocab: &UnigramVocab, corpus: &TrainingCorpus) -> Result<f64, TokenizerError> {
    let mut total = 0.0;
    for (chunk, n) in &corpus.chunks {
        let lattice = vocab.training_lattice(chunk, None)?;
        total += n * lattice.log_partition();
    }
    Ok(total)
}

/// One EM step: expected piece counts by forward-backward, then
/// `log p = log(count / total)`. Counts that underflow to zero are floored at
/// the smallest positive double so every log-probability stays finite.
pub fn em_iterate(vocab: &UnigramVocab, corpus: &TrainingCorpus) -> Result<UnigramVocab, TokenizerError> {
    let mut counts = vec![0.0; vocab.len()];
    for (chunk, n) in &corpus.chunks {
        let lattice = vocab.training_lattice(chunk, None)?;
        lattice.expected_counts(*n, &mut counts);
    }
    let kept: Vec<(String, f64)> = vocab
        .pieces()
        .iter()
        .enumerate()
        .skip(NUM_SPECIALS)
        .map(|(id, piece)| (piece.0.clone(), counts[id].max(f64::MIN_POSITIVE)))
        .collect();
    let total: f64 = kept.iter().map(|(_, c)| c).sum();
    let pieces = kept
        .into_iter()
        .map(|(s, c)| (s, (c / total).ln()))
        .collect();
    UnigramVocab::from_pieces_with_config(pieces, vocab.config().clone())
}

/// Likelihood lost by removing each removable piece while all other
/// probabilities stay fixed. Returned in piece-id order; single characters
/// and specials are absent.
pub fn removal_losses(vocab: &UnigramVocab, corpus: &TrainingCorpus) -> Result<Vec<(u32, f64)>, TokenizerError> {
    let mut containing: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut base = Vec::with_capacity(corpus.chunks.len());
    for (ci, (chunk, _)) in corpus.chunks.iter().enumerate() {
        let lattice = vocab.training_lattice(chunk, None)?;
        base.push(lattice.log_partition());
        let mut seen = HashSet::new();
        for pos in 0..lattice.len() {
            for e in lattice.edges_from(pos) {
                if vocab.is_removable(e.piece) && seen.insert(e.piece) {
                    containing.entry(e.piece).or_default().push(ci);
                }
            }
        }
    }
    let mut losses = Vec::new();
    for id in NUM_SPECIALS as u32..vocab.len() as u32 {
        if !vocab.is_removable(id) {
            continue;
        }
        let mut loss = 0.0;
        for &ci in containing.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
            let (chunk, n) = &corpus.chunks[ci];
            let without = vocab.training_lattice(chunk, Some(id))?.log_partition();
            loss += n * (base[ci] - without);
        }
        losses.push((id, loss));
    }
    Ok(losses)
}

/// Removes the pieces whose removal costs the least likelihood until at most
/// `size` pieces (specials included) remain, then renormalizes.
pub fn prune_to_size(vocab: &UnigramVocab, corpus: &TrainingCorpus, size: usize) -> Result<UnigramVocab, TokenizerError> {
    let required = vocab.required_count();
    if size < required {
        return Err(TokenizerError::Prune {
            requested: size,
            required,
        });
    }
    if vocab.len() <= size {
        return Ok(vocab.clone());
    }
    let mut losses = removal_losses(vocab, corpus)?;
    losses.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| vocab.surface(b.0).chars().count().cmp(&vocab.surface(a.0).chars().count()))
            .then_with(|| vocab.surface(a.0).cmp(vocab.surface(b.0)))
    });
    let excess = vocab.len() - size;
    let removed: HashSet<u32> = losses.iter().take(excess).map(|(id, _)| *id).collect();
    let kept: Vec<(String, f64)> = vocab
        .pieces()
        .iter()
        .enumerate()
        .skip(NUM_SPECIALS)
        .filter(|(id, _)| !removed.contains(&(*id as u32)))
        .map(|(_, p)| p.clone())
        .collect();
    let log_total = kept.iter().map(|p| p.1).fold(f64::NEG_INFINITY, lattice::log_add);
    let pieces = kept.into_iter().map(|(s, lp)| (s, lp - log_total)).collect();
    UnigramVocab::from_pieces_with_config(pieces, vocab.config().clone())
}

/// Shrinks the vocabulary to `ceil(size × shrink_factor)` pieces.
pub fn prune_vocabulary(
    vocab: &UnigramVocab,
    corpus: &TrainingCorpus,
    shrink_factor: f64,
) -> Result<UnigramVocab, TokenizerError> {
    if !(shrink_factor > 0.0 && shrink_factor <= 1.0) {
        return Err(TokenizerError::Invalid(format!(
            "shrink factor {shrink_factor} outside (0, 1]"
        )));
    }
    let size = (vocab.len() as f64 * shrink_factor).ceil() as usize;
    prune_to_size(vocab, corpus, size)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub vocab: UnigramVocab,
    /// Set when the corpus could not support the requested size.
    pub warning: Option<String>,
}

pub fn train_unigram(corpus: &RawCorpus, config: &TrainerConfig) -> Result<TrainOutcome, TokenizerError> {
    let tc = TrainingCorpus::from_raw(corpus, config.character_coverage)?;
    train_on_chunks(&tc, config)
}

pub fn train_on_chunks(tc: &TrainingCorpus, config: &TrainerConfig) -> Result<TrainOutcome, TokenizerError> {
    if config.target_size <= NUM_SPECIALS {
        return Err(TokenizerError::Invalid(format!(
            "target size {} leaves no room beyond the specials",
            config.target_size
        )));
    }
    let seeds = seed_from_chunks(tc, config.max_seed_size(), config.max_piece_len);
    let total: f64 = seeds.iter().map(|s| s.count).sum();
    let pieces = seeds
        .into_iter()
        .map(|s| (s.surface, (s.count / total).ln()))
        .collect();
    let mut vocab = UnigramVocab::from_pieces_with_config(pieces, config.clone())?;
    let mut warning = None;
    let required = vocab.required_count();
    let target = if required > config.target_size {
        warning = Some(format!(
            "{required} required pieces exceed target size {}",
            config.target_size
        ));
        required
    } else {
        config.target_size
    };
    loop {
        for _ in 0..config.em_iters_per_round.max(1) {
            vocab = em_iterate(&vocab, tc)?;
        }
        if vocab.len() <= target {
            break;
        }
        let next = ((vocab.len() as f64 * config.shrink_factor).ceil() as usize).max(target);
        let next = next.min(vocab.len() - 1);
        vocab = prune_to_size(&vocab, tc, next)?;
    }
    vocab = em_iterate(&vocab, tc)?;
    if vocab.len() > target {
        vocab = prune_to_size(&vocab, tc, target)?;
    }
    if vocab.len() < config.target_size && warning.is_none() {
        warning = Some(format!(
            "corpus supports only {} pieces (target {})",
            vocab.len(),
            config.target_size
        ));
    }
    Ok(TrainOutcome { vocab, warning })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(pieces: &[(&str, f64)]) -> UnigramVocab {
        UnigramVocab::from_pieces(pieces.iter().map(|(s, p)| (s.to_string(), p.ln())).collect()).unwrap()
    }

    #[test]
    fn pretokenize_marks_every_space() {
        assert_eq!(pretokenize("a  b"), vec!["▁a", "▁", "▁b"]);
        assert!(pretokenize("").is_empty());
    }

    #[test]
    fn seed_contains_all_substrings_of_small_corpus() {
        let corpus = RawCorpus::from_documents(["aaa"]);
        let seeds = seed_vocabulary(&corpus, 10, &TrainerConfig::default()).unwrap();
        let surfaces: Vec<&str> = seeds.iter().map(|s| s.surface.as_str()).collect();
        for s in ["a", "aa", "aaa", "▁"] {
            assert!(surfaces.contains(&s), "{s} missing from {surfaces:?}");
        }
    }

    #[test]
    fn seed_always_keeps_characters() {
        let corpus = RawCorpus::from_documents(["ab ab"]);
        let seeds = seed_vocabulary(&corpus, 2, &TrainerConfig::default()).unwrap();
        let surfaces: HashSet<&str> = seeds.iter().map(|s| s.surface.as_str()).collect();
        assert_eq!(surfaces, HashSet::from(["a", "b", "▁"]));
        assert_eq!(
            seed_vocabulary(&RawCorpus::default(), 2, &TrainerConfig::default()),
            Err(TokenizerError::EmptyCorpus)
        );
    }

    #[test]
    fn em_symmetric_vocab_is_fixed_point() {
        let v = vocab(&[("a", 0.5), ("b", 0.5)]);
        let tc = TrainingCorpus::from_chunks(&[("ab", 1.0)]);
        let next = em_iterate(&v, &tc).unwrap();
        assert!((next.log_prob(next.id("a").unwrap()) - 0.5f64.ln()).abs() < 1e-12);
        assert!((next.log_prob(next.id("b").unwrap()) - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn em_counts_match_two_path_enumeration() {
        // "ab" segments as [ab] (prob pab) or [a, b] (prob pa*pb).
        let (pa, pb, pab) = (0.3, 0.2, 0.5);
        let v = vocab(&[("a", pa), ("b", pb), ("ab", pab)]);
        let tc = TrainingCorpus::from_chunks(&[("ab", 1.0)]);
        let z = pab + pa * pb;
        let w_ab = pab / z;
        let w_split = pa * pb / z;
        // expected counts: a = b = w_split, ab = w_ab; total = 2 w_split + w_ab
        let total = 2.0 * w_split + w_ab;
        let next = em_iterate(&v, &tc).unwrap();
        assert!((next.log_prob(next.id("a").unwrap()) - (w_split / total).ln()).abs() < 1e-12);
        assert!((next.log_prob(next.id("ab").unwrap()) - (w_ab / total).ln()).abs() < 1e-12);
    }

    #[test]
    fn em_reports_uncovered_character() {
        let v = vocab(&[("a", 1.0)]);
        let tc = TrainingCorpus::from_chunks(&[("ab", 1.0)]);
        assert_eq!(
            em_iterate(&v, &tc).unwrap_err(),
            TokenizerError::Coverage { ch: 'b', position: 1 }
        );
    }

    #[test]
    fn prune_identity_and_precondition() {
        let v = vocab(&[("a", 0.3), ("b", 0.2), ("ab", 0.5)]);
        let tc = TrainingCorpus::from_chunks(&[("ab", 1.0)]);
        assert_eq!(prune_vocabulary(&v, &tc, 1.0).unwrap(), v);
        let err = prune_to_size(&v, &tc, NUM_SPECIALS + 1).unwrap_err();
        assert_eq!(
            err,
            TokenizerError::Prune {
                requested: 5,
                required: 6
            }
        );
        let pruned = prune_to_size(&v, &tc, NUM_SPECIALS + 2).unwrap();
        assert_eq!(pruned.id("ab"), None);
        assert_eq!(pruned.len(), 6);
    }

    #[test]
    fn training_covers_every_character() {
        let corpus = RawCorpus::from_documents(["the cat sat"]);
        let out = train_unigram(&corpus, &TrainerConfig::with_target(30)).unwrap();
        for c in "thecas▁".chars() {
            assert!(out.vocab.id(&c.to_string()).is_some(), "{c}");
        }
        assert!(out.vocab.len() <= 30);
    }

    #[test]
    fn training_hits_target_exactly_when_attainable() {
        let docs: Vec<String> = (0..50)
            .map(|i| format!("the tribunal finds that claim {} was {}", i % 7, ["upheld", "rejected", "dismissed"][i % 3]))
            .collect();
        let corpus = RawCorpus::from_documents(&docs);
        let out = train_unigram(&corpus, &TrainerConfig::with_target(40)).unwrap();
        assert_eq!(out.vocab.len(), 40);
        assert!(out.warning.is_none());
        let text = "the tribunal finds that claim 0 was upheld";
        assert_eq!(out.vocab.decode(&out.vocab.encode(text, true)).unwrap(), text);
    }

    #[test]
    fn small_corpus_warns() {
        let corpus = RawCorpus::from_documents(["ab"]);
        let out = train_unigram(&corpus, &TrainerConfig::with_target(100)).unwrap();
        assert!(out.warning.is_some());
        assert!(out.vocab.len() < 100);
    }
}
