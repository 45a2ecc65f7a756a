use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::lattice::{Edge, SegmentationLattice, Trie};
use super::{
    pretokenize, TokenizerError, TrainerConfig, BOS_ID, BOUNDARY, EOS_ID, NUM_SPECIALS,
    SPECIAL_SURFACES, UNK_ID,
};

pub const VOCAB_MAGIC: &[u8; 8] = b"LMFT-VOC";
pub const VOCAB_VERSION: u32 = 1;

/// Penalty (in nats, relative to the least likely piece) for an unknown character.
const UNK_PENALTY: f64 = 10.0;

/// A trained unigram model: pieces with log-probabilities, specials at ids 0–3.
#[derive(Clone, Debug)]
pub struct UnigramVocab {
    pieces: Vec<(String, f64)>,
    index: HashMap<String, u32>,
    trie: Trie,
    config: TrainerConfig,
    single_chars: usize,
    unk_log_prob: f64,
}

impl PartialEq for UnigramVocab {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces && self.config == other.config
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub ids: Vec<u32>,
    pub log_prob: f64,
}

impl UnigramVocab {
    /// Builds a vocabulary from non-special pieces; specials are prepended.
    pub fn from_pieces(pieces: Vec<(String, f64)>) -> Result<Self, TokenizerError> {
        Self::from_pieces_with_config(pieces, TrainerConfig::default())
    }

    pub fn from_pieces_with_config(
        pieces: Vec<(String, f64)>,
        config: TrainerConfig,
    ) -> Result<Self, TokenizerError> {
        let mut all: Vec<(String, f64)> = SPECIAL_SURFACES.iter().map(|s| (s.to_string(), 0.0)).collect();
        all.extend(pieces);
        Self::from_all(all, config)
    }

    fn from_all(pieces: Vec<(String, f64)>, config: TrainerConfig) -> Result<Self, TokenizerError> {
        let mut index = HashMap::with_capacity(pieces.len());
        let mut trie = Trie::new();
        let mut single_chars = 0;
        let mut min_lp = 0.0f64;
        for (id, (surface, lp)) in pieces.iter().enumerate() {
            if id < NUM_SPECIALS {
                if surface != SPECIAL_SURFACES[id] {
                    return Err(TokenizerError::Invalid(format!(
                        "id {id} must be the special {}",
                        SPECIAL_SURFACES[id]
                    )));
                }
            } else {
                if surface.is_empty() {
                    return Err(TokenizerError::Invalid("empty piece".into()));
                }
                if !lp.is_finite() || *lp > 0.0 {
                    return Err(TokenizerError::Invalid(format!(
                        "piece {surface:?} has log-probability {lp}"
                    )));
                }
                trie.insert(surface, id as u32);
                if surface.chars().count() == 1 {
                    single_chars += 1;
                }
                min_lp = min_lp.min(*lp);
            }
            if index.insert(surface.clone(), id as u32).is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate piece {surface:?}")));
            }
        }
        Ok(Self {
            pieces,
            index,
            trie,
            config,
            single_chars,
            unk_log_prob: min_lp - UNK_PENALTY,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// All pieces including the specials.
    pub fn pieces(&self) -> &[(String, f64)] {
        &self.pieces
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn id(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.pieces[id as usize].0
    }

    pub fn log_prob(&self, id: u32) -> f64 {
        self.pieces[id as usize].1
    }

    pub(crate) fn is_removable(&self, id: u32) -> bool {
        id as usize >= NUM_SPECIALS && self.pieces[id as usize].0.chars().count() > 1
    }

    /// Pieces that pruning never removes: specials and single characters.
    pub fn required_count(&self) -> usize {
        NUM_SPECIALS + self.single_chars
    }

    fn char_id(&self, c: char) -> Option<u32> {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf))
    }

    fn edges(&self, chars: &[char], exclude: Option<u32>) -> Vec<Vec<Edge>> {
        (0..chars.len())
            .map(|i| {
                let mut out = Vec::new();
                self.trie.prefixes(chars, i, |end, piece| {
                    if Some(piece) != exclude {
                        out.push(Edge {
                            end,
                            piece,
                            log_prob: self.pieces[piece as usize].1,
                        });
                    }
                });
                out
            })
            .collect()
    }

    /// Lattice used during training: every character must have its own piece.
    pub fn training_lattice(&self, chars: &[char], exclude: Option<u32>) -> Result<SegmentationLattice, TokenizerError> {
        if let Some((position, &ch)) = chars.iter().enumerate().find(|(_, &c)| self.char_id(c).is_none()) {
            return Err(TokenizerError::Coverage { ch, position });
        }
        Ok(SegmentationLattice::new(chars.len(), self.edges(chars, exclude)))
    }

    /// Lattice used for encoding: characters without a piece get an UNK edge.
    pub fn lattice(&self, text: &str) -> SegmentationLattice {
        let chars: Vec<char> = text.chars().collect();
        let mut edges = self.edges(&chars, None);
        for (i, &c) in chars.iter().enumerate() {
            if self.char_id(c).is_none() {
                edges[i].push(Edge {
                    end: i + 1,
                    piece: UNK_ID,
                    log_prob: self.unk_log_prob,
                });
            }
        }
        SegmentationLattice::new(chars.len(), edges)
    }

    /// Viterbi segmentation of a raw string (no boundary handling).
    pub fn segment(&self, text: &str) -> Segmentation {
        let (path, log_prob) = self
            .lattice(text)
            .viterbi()
            .expect("every position has at least a character or UNK edge");
        Segmentation {
            ids: path.iter().map(|e| e.piece).collect(),
            log_prob,
        }
    }

    /// Token ids of `text`, optionally wrapped in BOS/EOS.
    pub fn encode(&self, text: &str, markers: bool) -> Vec<u32> {
        let mut ids = Vec::new();
        if markers {
            ids.push(BOS_ID);
        }
        for chunk in pretokenize(text) {
            ids.extend(self.segment(&chunk).ids);
        }
        if markers {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Inverse of [`encode`](Self::encode) on covered text. Specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            if id as usize >= self.pieces.len() {
                return Err(TokenizerError::Decode {
                    id,
                    size: self.pieces.len(),
                });
            }
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            out.push_str(&self.pieces[id as usize].0);
        }
        let text = out.replace(BOUNDARY, " ");
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }

    fn header_text(&self) -> String {
        let c = &self.config;
        format!(
            "target_size={}\nseed_factor={}\nshrink_factor={}\nem_iters_per_round={}\nmax_piece_len={}\ncharacter_coverage={}\n",
            c.target_size, c.seed_factor, c.shrink_factor, c.em_iters_per_round, c.max_piece_len, c.character_coverage
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_text();
        let mut out = Vec::new();
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.pieces.len() as u32).to_le_bytes());
        for (surface, lp) in &self.pieces {
            out.extend_from_slice(&(surface.len() as u32).to_le_bytes());
            out.extend_from_slice(surface.as_bytes());
            out.extend_from_slice(&lp.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TokenizerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != VOCAB_MAGIC {
            return Err(TokenizerError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VOCAB_VERSION {
            return Err(TokenizerError::Format(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(header_len)?)
            .map_err(|_| TokenizerError::Format("header is not UTF-8".into()))?;
        let config = parse_header(header)?;
        let count = r.u32()? as usize;
        let mut pieces = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let surface = std::str::from_utf8(r.take(len)?)
                .map_err(|_| TokenizerError::Format(format!("piece at offset {} is not UTF-8", r.pos - len)))?
                .to_string();
            let lp = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            pieces.push((surface, lp));
        }
        if r.pos != bytes.len() {
            return Err(TokenizerError::Format(format!("trailing bytes at offset {}", r.pos)));
        }
        Self::from_all(pieces, config)
    }

    /// Writes the vocabulary file atomically.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&self.to_bytes())?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let bytes = std::fs::read(path).map_err(|e| TokenizerError::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized file, hex encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_header(text: &str) -> Result<TrainerConfig, TokenizerError> {
    let mut c = TrainerConfig::default();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TokenizerError::Format(format!("bad header line {line:?}")))?;
        let bad = |_| TokenizerError::Format(format!("bad value for {k}: {v}"));
        match k {
            "target_size" => c.target_size = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "seed_factor" => c.seed_factor = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "shrink_factor" => c.shrink_factor = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "em_iters_per_round" => {
                c.em_iters_per_round = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "max_piece_len" => c.max_piece_len = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "character_coverage" => {
                c.character_coverage = v.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            _ => {}
        }
    }
    Ok(c)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TokenizerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TokenizerError::Format(format!("truncated at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TokenizerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
