use std::cmp::Ordering;

/// Prefix tree over piece surfaces, keyed by `char`.
#[derive(Clone, Debug, Default)]
pub(crate) struct Trie {
    nodes: Vec<TrieNode>,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(char, u32)>,
    piece: Option<u32>,
}

impl Trie {
    pub(crate) fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
        }
    }

    pub(crate) fn insert(&mut self, surface: &str, piece: u32) {
        let mut node = 0usize;
        for c in surface.chars() {
            node = match self.nodes[node].children.binary_search_by(|(k, _)| k.cmp(&c)) {
                Ok(i) => self.nodes[node].children[i].1 as usize,
                Err(i) => {
                    self.nodes.push(TrieNode::default());
                    let child = (self.nodes.len() - 1) as u32;
                    self.nodes[node].children.insert(i, (c, child));
                    child as usize
                }
            };
        }
        self.nodes[node].piece = Some(piece);
    }

    /// Calls `f(end, piece)` for every piece that is a prefix of `chars[start..]`.
    pub(crate) fn prefixes(&self, chars: &[char], start: usize, mut f: impl FnMut(usize, u32)) {
        let mut node = 0usize;
        for (offset, c) in chars[start..].iter().enumerate() {
            match self.nodes[node].children.binary_search_by(|(k, _)| k.cmp(c)) {
                Ok(i) => node = self.nodes[node].children[i].1 as usize,
                Err(_) => return,
            }
            if let Some(p) = self.nodes[node].piece {
                f(start + offset + 1, p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub end: usize,
    pub piece: u32,
    pub log_prob: f64,
}

/// All candidate pieces over a character sequence: `edges[i]` holds the
/// pieces starting at character position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationLattice {
    len: usize,
    edges: Vec<Vec<Edge>>,
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

impl SegmentationLattice {
    pub(crate) fn new(len: usize, edges: Vec<Vec<Edge>>) -> Self {
        debug_assert_eq!(edges.len(), len);
        Self { len, edges }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn edges_from(&self, pos: usize) -> &[Edge] {
        &self.edges[pos]
    }

    /// Log of the summed probability of all segmentations (`-inf` when none).
    pub fn log_partition(&self) -> f64 {
        self.forward()[self.len]
    }

    fn forward(&self) -> Vec<f64> {
        let mut alpha = vec![f64::NEG_INFINITY; self.len + 1];
        alpha[0] = 0.0;
        for i in 0..self.len {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for e in &self.edges[i] {
                alpha[e.end] = log_add(alpha[e.end], alpha[i] + e.log_prob);
            }
        }
        alpha
    }

    fn backward(&self) -> Vec<f64> {
        let mut beta = vec![f64::NEG_INFINITY; self.len + 1];
        beta[self.len] = 0.0;
        for i in (0..self.len).rev() {
            for e in &self.edges[i] {
                beta[i] = log_add(beta[i], e.log_prob + beta[e.end]);
            }
        }
        beta
    }

    /// Forward-backward: adds `weight * P(edge | text)` into `counts[piece]`
    /// and returns the log partition.
    pub fn expected_counts(&self, weight: f64, counts: &mut [f64]) -> f64 {
        let alpha = self.forward();
        let z = alpha[self.len];
        if z == f64::NEG_INFINITY {
            return z;
        }
        let beta = self.backward();
        for i in 0..self.len {
            if alpha[i] == f64::NEG_INFINITY {
                continue;
            }
            for e in &self.edges[i] {
                let post = (alpha[i] + e.log_prob + beta[e.end] - z).exp();
                counts[e.piece as usize] += weight * post;
            }
        }
        z
    }

    /// Maximum-probability path. Ties are broken by fewer pieces, then by
    /// preferring longer pieces from the left. Log-probabilities are summed
    /// left to right.
    pub fn viterbi(&self) -> Option<(Vec<Edge>, f64)> {
        if self.len == 0 {
            return Some((Vec::new(), 0.0));
        }
        // best[j] = (score, pieces, start of the last edge, that edge)
        let mut best: Vec<Option<(f64, usize, usize, Edge)>> = vec![None; self.len + 1];
        let score_at = |best: &Vec<Option<(f64, usize, usize, Edge)>>, i: usize| -> Option<(f64, usize)> {
            if i == 0 {
                Some((0.0, 0))
            } else {
                best[i].map(|(s, n, _, _)| (s, n))
            }
        };
        for i in 0..self.len {
            let Some((si, ni)) = score_at(&best, i) else {
                continue;
            };
            for e in &self.edges[i] {
                let cand = (si + e.log_prob, ni + 1, i, *e);
                let replace = match &best[e.end] {
                    None => true,
                    Some(cur) => match cand.0.partial_cmp(&cur.0) {
                        Some(Ordering::Greater) => true,
                        Some(Ordering::Less) | None => false,
                        Some(Ordering::Equal) => match cand.1.cmp(&cur.1) {
                            Ordering::Less => true,
                            Ordering::Greater => false,
                            Ordering::Equal => {
                                self.left_longer(&best, i, *e, cur.2, cur.3) == Ordering::Greater
                            }
                        },
                    },
                };
                if replace {
                    best[e.end] = Some(cand);
                }
            }
        }
        let (score, _, _, _) = best[self.len]?;
        let mut path = Vec::new();
        let mut pos = self.len;
        while pos > 0 {
            let (_, _, start, edge) = best[pos].expect("viterbi backpointer");
            path.push(edge);
            pos = start;
        }
        path.reverse();
        Some((path, score))
    }

    /// Compares two candidate paths ending at the same position by their
    /// piece lengths read from the left.
    fn left_longer(
        &self,
        best: &[Option<(f64, usize, usize, Edge)>],
        start_a: usize,
        last_a: Edge,
        start_b: usize,
        last_b: Edge,
    ) -> Ordering {
        let lengths = |start: usize, last: Edge| {
            let mut out = vec![last.end - start];
            let mut pos = start;
            while pos > 0 {
                let (_, _, s, e) = best[pos].expect("viterbi backpointer");
                out.push(e.end - s);
                pos = s;
            }
            out.reverse();
            out
        };
        lengths(start_a, last_a).cmp(&lengths(start_b, last_b))
    }
}
