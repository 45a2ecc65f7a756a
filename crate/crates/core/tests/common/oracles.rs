//! Reference computations written independently of the library code.

use lmft::tokenizer::UnigramVocab;

/// Best segmentation score by enumerating every split of `text` into pieces
/// of `vocab`. Scores are summed left to right.
pub fn brute_force_best(vocab: &UnigramVocab, text: &str) -> Option<f64> {
    let chars: Vec<char> = text.chars().collect();
    fn go(vocab: &UnigramVocab, chars: &[char], at: usize, acc: f64, best: &mut Option<f64>) {
        if at == chars.len() {
            if best.is_none_or(|b| acc > b) {
                *best = Some(acc);
            }
            return;
        }
        for end in at + 1..=chars.len() {
            let s: String = chars[at..end].iter().collect();
            if let Some(id) = vocab.id(&s) {
                if id as usize >= lmft::tokenizer::NUM_SPECIALS {
                    go(vocab, chars, end, acc + vocab.log_prob(id), best);
                }
            }
        }
    }
    let mut best = None;
    go(vocab, &chars, 0, 0.0, &mut best);
    if chars.is_empty() {
        best = Some(0.0);
    }
    best
}

/// Constants of the reference optimizer trace.
#[derive(Clone, Copy, Debug)]
pub struct RangerRef {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub k: u64,
    pub alpha: f64,
}

impl Default for RangerRef {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-5,
            k: 6,
            alpha: 0.5,
        }
    }
}

/// Scalar RAdam + Lookahead. `grad(t, p)` is the gradient at step `t` given
/// the current parameter. Returns the parameter after each step.
pub fn ranger_trace(c: RangerRef, p0: f64, steps: u64, grad: impl Fn(u64, f64) -> f64) -> Vec<f64> {
    let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut p = p0;
    let mut slow = p0;
    let mut out = Vec::new();
    for t in 1..=steps {
        let g = grad(t, p);
        m = c.beta1 * m + (1.0 - c.beta1) * g;
        v = c.beta2 * v + (1.0 - c.beta2) * g * g;
        let b1t = c.beta1.powi(t as i32);
        let b2t = c.beta2.powi(t as i32);
        let m_hat = m / (1.0 - b1t);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        if rho > 4.0 {
            let r = (((rho - 4.0) / (rho_inf - 4.0)) * ((rho - 2.0) / (rho_inf - 2.0)) * (rho_inf / rho)).sqrt();
            let v_hat = (v / (1.0 - b2t)).sqrt();
            p -= c.lr * r * m_hat / (v_hat + c.eps);
        } else {
            p -= c.lr * m_hat;
        }
        if t % c.k == 0 {
            slow = slow + c.alpha * (p - slow);
            p = slow;
        }
        out.push(p);
    }
    out
}

/// Confusion counts for class 1 by direct counting.
pub fn counts(preds: &[usize], gold: &[usize], positive: usize) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in preds.iter().zip(gold) {
        if p == positive && g == positive {
            tp += 1.0;
        } else if p == positive {
            fp += 1.0;
        } else if g == positive {
            fn_ += 1.0;
        }
    }
    (tp, fp, fn_)
}

pub fn f1_from_counts(tp: f64, fp: f64, fn_: f64) -> f64 {
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn dcg(order: &[usize], gold: &[usize], k: usize) -> f64 {
    order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, l)| gold.contains(l))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

fn permutations(items: &mut Vec<usize>, at: usize, visit: &mut dyn FnMut(&[usize])) {
    if at == items.len() {
        visit(items);
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permutations(items, at + 1, visit);
        items.swap(at, i);
    }
}

/// nDCG@k of one example with the ideal DCG found by trying every ranking.
pub fn ndcg_exhaustive(scores: &[f64], gold: &[usize], k: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let actual = dcg(&order, gold, k);
    let mut ideal = 0.0f64;
    let mut all: Vec<usize> = (0..scores.len()).collect();
    permutations(&mut all, 0, &mut |perm| ideal = ideal.max(dcg(perm, gold, k)));
    if ideal == 0.0 {
        0.0
    } else {
        actual / ideal
    }
}
