//! Graph recovery and clustering metrics: structural Hamming distance,
//! directed edge F1, adjusted Rand index, and normalized mutual
//! information.

use std::collections::HashMap;

use crate::learn::Digraph;

/// Structural Hamming distance between digraphs. Per unordered node pair,
/// a missing or extra edge costs 1 and a reversed edge costs 1 (not 2).
pub fn shd(a: &Digraph, b: &Digraph) -> usize {
    assert_eq!(a.k, b.k);
    let mut total = 0;
    for u in 0..a.k {
        for v in (u + 1)..a.k {
            let fa = (a.has_edge(u, v), a.has_edge(v, u));
            let fb = (b.has_edge(u, v), b.has_edge(v, u));
            if fa == fb {
                continue;
            }
            let reversal = matches!(
                (fa, fb),
                ((true, false), (false, true)) | ((false, true), (true, false))
            );
            if reversal {
                total += 1;
            } else {
                total += (fa.0 != fb.0) as usize + (fa.1 != fb.1) as usize;
            }
        }
    }
    total
}

/// F1 score over directed edge sets, with 1.0 when both graphs are empty.
pub fn edge_f1(truth: &Digraph, predicted: &Digraph) -> f64 {
    assert_eq!(truth.k, predicted.k);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fngt = 0usize;
    for u in 0..truth.k {
        for v in 0..truth.k {
            if u == v {
                continue;
            }
            match (truth.has_edge(u, v), predicted.has_edge(u, v)) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fngt += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fngt == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fngt) as f64;
    2.0 * precision * recall / (precision + recall)
}

fn contingency(a: &[usize], b: &[usize]) -> (HashMap<(usize, usize), usize>, HashMap<usize, usize>, HashMap<usize, usize>) {
    let mut joint = HashMap::new();
    let mut rows = HashMap::new();
    let mut cols = HashMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    (joint, rows, cols)
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
/// Degenerate cases where the expected index equals the maximum index
/// (e.g. both labelings constant) return 1.0.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let (joint, rows, cols) = contingency(a, b);
    let index: f64 = joint.values().map(|&n| choose2(n)).sum();
    let sum_rows: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_cols: f64 = cols.values().map(|&n| choose2(n)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Normalized mutual information with arithmetic-mean entropy
/// normalization; 0/0 is defined as 0.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (joint, rows, cols) = contingency(a, b);
    let entropy = |counts: &HashMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&rows);
    let hb = entropy(&cols);
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let pxy = c as f64 / n;
        let px = rows[&x] as f64 / n;
        let py = cols[&y] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    let denom = 0.5 * (ha + hb);
    if denom <= 0.0 {
        return 0.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}
