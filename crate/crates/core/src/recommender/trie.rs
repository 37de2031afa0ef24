use super::tokens::Catalog;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
struct Node {
    /// Sorted by token id.
    children: Vec<(usize, usize)>,
    item: Option<String>,
}

/// Prefix tree over the token sequences of every catalog item.
#[derive(Clone, Debug)]
pub struct SemanticTrie {
    nodes: Vec<Node>,
    depth: usize,
    leaves: usize,
}

impl SemanticTrie {
    pub const ROOT: usize = 0;

    pub fn build(catalog: &Catalog) -> Result<Self> {
        let mut trie = SemanticTrie {
            nodes: vec![Node::default()],
            depth: catalog.vocab.item_len(),
            leaves: 0,
        };
        for (item, tokens) in catalog.iter() {
            let mut node = Self::ROOT;
            for &t in tokens {
                node = match trie.child(node, t) {
                    Some(n) => n,
                    None => {
                        let n = trie.nodes.len();
                        trie.nodes.push(Node::default());
                        let ch = &mut trie.nodes[node].children;
                        let pos = ch.partition_point(|&(tok, _)| tok < t);
                        ch.insert(pos, (t, n));
                        n
                    }
                };
            }
            if trie.nodes[node].item.is_some() {
                return Err(Error::DuplicateId(tokens.to_vec()));
            }
            trie.nodes[node].item = Some(item.to_string());
            trie.leaves += 1;
        }
        Ok(trie)
    }

    /// Tokens per item path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves
    }

    /// `(token, child node)` pairs in ascending token order.
    pub fn children(&self, node: usize) -> &[(usize, usize)] {
        &self.nodes[node].children
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        let ch = &self.nodes[node].children;
        ch.binary_search_by_key(&token, |&(t, _)| t).ok().map(|i| ch[i].1)
    }

    pub fn item(&self, node: usize) -> Option<&str> {
        self.nodes[node].item.as_deref()
    }

    pub fn lookup(&self, tokens: &[usize]) -> Option<&str> {
        let mut node = Self::ROOT;
        for &t in tokens {
            node = self.child(node, t)?;
        }
        self.item(node)
    }

    /// Item ids of a flattened token sequence of whole items.
    pub fn decode_items(&self, tokens: &[usize]) -> Option<Vec<String>> {
        tokens
            .chunks(self.depth)
            .map(|c| self.lookup(c).map(str::to_string))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::decor_embedding::Vocab;
    use crate::recommender::tokens::build_inputs;
    use crate::semantic_indexer::SemanticId;

    fn sid(codes: &[usize], collision: usize) -> SemanticId {
        SemanticId {
            codes: codes.to_vec(),
            collision,
        }
    }

    #[test]
    fn shared_prefix_branches_at_level_three() {
        let mut sids = BTreeMap::new();
        sids.insert("a".to_string(), sid(&[1, 2, 0], 0));
        sids.insert("b".to_string(), sid(&[1, 2, 3], 0));
        let vocab = Vocab::new(3, 4, 2);
        let cat = Catalog::new(&sids, vocab).unwrap();
        let trie = SemanticTrie::build(&cat).unwrap();
        let n1 = trie.child(SemanticTrie::ROOT, 1).unwrap();
        let n2 = trie.child(n1, vocab.code(1, 2)).unwrap();
        assert_eq!(trie.children(SemanticTrie::ROOT).len(), 1);
        assert_eq!(trie.children(n1).len(), 1);
        assert_eq!(trie.children(n2).len(), 2);
        assert_eq!(trie.num_leaves(), 2);
        assert_eq!(trie.lookup(cat.tokens("b").unwrap()), Some("b"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut sids = BTreeMap::new();
        sids.insert("a".to_string(), sid(&[1, 2], 0));
        sids.insert("b".to_string(), sid(&[1, 2], 0));
        let cat = Catalog::new(&sids, Vocab::new(2, 4, 2)).unwrap();
        assert!(matches!(SemanticTrie::build(&cat), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn every_item_found_and_histories_round_trip() {
        let vocab = Vocab::new(3, 5, 4);
        let mut sids = BTreeMap::new();
        for i in 0..200usize {
            sids.insert(format!("it{i}"), sid(&[i % 5, (i / 5) % 5, (i / 25) % 5], i / 125));
        }
        let cat = Catalog::new(&sids, vocab).unwrap();
        let trie = SemanticTrie::build(&cat).unwrap();
        assert_eq!(trie.num_leaves(), 200);
        for (item, tokens) in cat.iter() {
            assert_eq!(trie.lookup(tokens), Some(item));
        }
        let hist: Vec<String> = (0..25).map(|i| format!("it{}", i * 7)).collect();
        let toks = build_inputs(&hist, &cat, 20).unwrap();
        assert_eq!(trie.decode_items(&toks).unwrap(), hist[5..].to_vec());
        for node in 0..trie.nodes.len() {
            assert!(trie.children(node).windows(2).all(|w| w[0].0 < w[1].0));
        }
    }
}
