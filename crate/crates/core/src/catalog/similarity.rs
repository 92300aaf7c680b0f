//! Structural near-duplicate detection between functions by subtree hashing.

use std::collections::HashSet;
use std::hash::{DefaultHasher, Hash, Hasher};

use tree_sitter::Node;

/// Subtrees smaller than this are too common to say anything about clones.
const MIN_SUBTREE_NODES: usize = 4;

/// Set of structural hashes (node kinds only, names and literals ignored)
/// of every subtree with at least [`MIN_SUBTREE_NODES`] nodes.
pub(crate) fn fingerprint(node: Node) -> HashSet<u64> {
    let mut out = HashSet::new();
    subtree_hash(node, &mut out);
    out
}

fn subtree_hash(node: Node, out: &mut HashSet<u64>) -> (u64, usize) {
    let mut hasher = DefaultHasher::new();
    node.kind().hash(&mut hasher);
    let mut size = 1;
    let mut cursor = node.walk();
    for child in node.children(&mut cursor) {
        let (h, n) = subtree_hash(child, out);
        h.hash(&mut hasher);
        size += n;
    }
    let h = hasher.finish();
    if size >= MIN_SUBTREE_NODES {
        out.insert(h);
    }
    (h, size)
}

pub(crate) fn jaccard(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// For each fingerprint, whether some other fingerprint reaches `threshold`.
pub(crate) fn has_near_duplicate(prints: &[HashSet<u64>], threshold: f64) -> Vec<bool> {
    (0..prints.len())
        .map(|i| {
            (0..prints.len())
                .filter(|&j| j != i)
                .any(|j| jaccard(&prints[i], &prints[j]) >= threshold)
        })
        .collect()
}
