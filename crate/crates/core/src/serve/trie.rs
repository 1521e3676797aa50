//! Prefix tree over the token-id paths of every catalog SID.

use crate::catalog::PoiId;
use crate::corpus::Vocab;
use crate::sid::SidMap;

use super::ServeError;

#[derive(Debug, Clone, Default, PartialEq)]
struct Node {
    /// Sorted by token id.
    children: Vec<(u32, usize)>,
    poi: Option<PoiId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidTrie {
    nodes: Vec<Node>,
    leaves: usize,
    max_depth: usize,
}

/// Node index; the root is [`SidTrie::ROOT`].
pub type TrieNode = usize;

impl SidTrie {
    pub const ROOT: TrieNode = 0;

    pub fn build(sid_map: &SidMap, vocab: &Vocab) -> Result<SidTrie, ServeError> {
        let mut t = SidTrie { nodes: vec![Node::default()], leaves: 0, max_depth: 0 };
        for (poi, sid) in sid_map.iter() {
            let path = vocab.encode_sid(sid)?;
            t.insert(&path, poi.clone())?;
        }
        Ok(t)
    }

    pub fn from_paths<'a>(paths: impl IntoIterator<Item = (&'a [u32], PoiId)>) -> Result<SidTrie, ServeError> {
        let mut t = SidTrie { nodes: vec![Node::default()], leaves: 0, max_depth: 0 };
        for (path, poi) in paths {
            t.insert(path, poi)?;
        }
        Ok(t)
    }

    fn insert(&mut self, path: &[u32], poi: PoiId) -> Result<(), ServeError> {
        if path.is_empty() {
            return Err(ServeError::DuplicatePath(format!("empty path for {poi}")));
        }
        let mut cur = Self::ROOT;
        for &tok in path {
            if self.nodes[cur].poi.is_some() {
                return Err(ServeError::DuplicatePath(format!("{poi} extends a leaf")));
            }
            cur = match self.nodes[cur].children.binary_search_by_key(&tok, |c| c.0) {
                Ok(i) => self.nodes[cur].children[i].1,
                Err(i) => {
                    self.nodes.push(Node::default());
                    let id = self.nodes.len() - 1;
                    self.nodes[cur].children.insert(i, (tok, id));
                    id
                }
            };
        }
        if self.nodes[cur].poi.is_some() || !self.nodes[cur].children.is_empty() {
            return Err(ServeError::DuplicatePath(format!("{poi} collides with an existing path")));
        }
        self.nodes[cur].poi = Some(poi);
        self.leaves += 1;
        self.max_depth = self.max_depth.max(path.len());
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    /// Longest path length (L, or L + 1 with collision tokens).
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn children(&self, node: TrieNode) -> impl Iterator<Item = u32> + '_ {
        self.nodes[node].children.iter().map(|c| c.0)
    }

    pub fn is_child(&self, node: TrieNode, tok: u32) -> bool {
        self.nodes[node].children.binary_search_by_key(&tok, |c| c.0).is_ok()
    }

    pub fn advance(&self, node: TrieNode, tok: u32) -> Option<TrieNode> {
        let c = &self.nodes[node].children;
        c.binary_search_by_key(&tok, |c| c.0).ok().map(|i| c[i].1)
    }

    pub fn poi(&self, node: TrieNode) -> Option<&PoiId> {
        self.nodes[node].poi.as_ref()
    }

    pub fn is_leaf(&self, node: TrieNode) -> bool {
        self.nodes[node].poi.is_some()
    }

    /// Follows `path` from the root.
    pub fn walk(&self, path: &[u32]) -> Option<TrieNode> {
        path.iter().try_fold(Self::ROOT, |n, &t| self.advance(n, t))
    }

    pub fn resolve(&self, path: &[u32]) -> Option<&PoiId> {
        self.walk(path).and_then(|n| self.poi(n))
    }
}

/// Argmax of `logits` over the children of `node`; ties go to the lower token id.
pub fn constrained_greedy(logits: &[f64], trie: &SidTrie, node: TrieNode) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for tok in trie.children(node) {
        let v = logits[tok as usize];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((tok, v));
        }
    }
    best.expect("trie node below a leaf has children").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trie(paths: &[&[u32]]) -> SidTrie {
        SidTrie::from_paths(paths.iter().enumerate().map(|(i, p)| (*p, PoiId(format!("p{i}"))))).unwrap()
    }

    #[test]
    fn single_path() {
        let t = trie(&[&[6, 9, 12]]);
        assert_eq!(t.leaf_count(), 1);
        assert_eq!(t.resolve(&[6, 9, 12]), Some(&PoiId::from("p0")));
        assert_eq!(t.resolve(&[6, 9]), None);
        // Forced move regardless of logits.
        let mut logits = vec![0.0; 20];
        logits[7] = 100.0;
        assert_eq!(constrained_greedy(&logits, &t, SidTrie::ROOT), 6);
    }

    #[test]
    fn greedy_respects_children_and_ties() {
        let t = trie(&[&[3, 10], &[7, 10]]);
        let mut logits = vec![0.0; 12];
        logits[7] = 1.0;
        assert_eq!(constrained_greedy(&logits, &t, SidTrie::ROOT), 7);
        logits[7] = 0.0;
        assert_eq!(constrained_greedy(&logits, &t, SidTrie::ROOT), 3);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let r = SidTrie::from_paths([(&[1u32, 2][..], PoiId::from("a")), (&[1, 2][..], PoiId::from("b"))]);
        assert!(matches!(r, Err(ServeError::DuplicatePath(_))));
        let r = SidTrie::from_paths([(&[1u32, 2][..], PoiId::from("a")), (&[1, 2, 3][..], PoiId::from("b"))]);
        assert!(r.is_err());
    }

    #[test]
    fn every_walk_ends_at_a_poi() {
        // Exhaustive walk over a small trie with a collision level.
        let t = trie(&[&[1, 4, 8], &[1, 4, 9], &[1, 5, 8, 20], &[1, 5, 8, 21], &[2, 4, 8]]);
        let mut stack = vec![SidTrie::ROOT];
        let mut leaves = 0;
        while let Some(n) = stack.pop() {
            if t.is_leaf(n) {
                leaves += 1;
                assert_eq!(t.children(n).count(), 0);
            } else {
                assert!(t.children(n).count() > 0);
                stack.extend(t.children(n).map(|c| t.advance(n, c).unwrap()));
            }
        }
        assert_eq!(leaves, t.leaf_count());
        assert_eq!(t.max_depth(), 4);
    }
}
