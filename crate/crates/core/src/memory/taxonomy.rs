//! Tag taxonomy: a forest of normalized tags with parent links discovered
//! incrementally. Levels count edges from a root; acyclicity is enforced on
//! every mutation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::memory::MemoryError;

/// Lowercase, trim, and collapse internal whitespace. No stemming.
/// Idempotent: normalizing twice gives the same string.
pub fn normalize_tag(tag: &str) -> String {
    tag.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagNode {
    pub name: String,
    pub parent: Option<String>,
    pub level: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Taxonomy {
    nodes: BTreeMap<String, TagNode>,
}

impl Taxonomy {
    pub fn new() -> Self {
        Taxonomy::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.nodes.contains_key(&normalize_tag(tag))
    }

    pub fn get(&self, tag: &str) -> Option<&TagNode> {
        self.nodes.get(&normalize_tag(tag))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TagNode> {
        self.nodes.values()
    }

    /// Inserts `tag` as a root if absent; returns the normalized name.
    pub fn insert(&mut self, tag: &str) -> String {
        let name = normalize_tag(tag);
        self.nodes.entry(name.clone()).or_insert_with(|| TagNode {
            name: name.clone(),
            parent: None,
            level: 0,
        });
        name
    }

    pub fn parent_of(&self, tag: &str) -> Option<&str> {
        self.get(tag).and_then(|n| n.parent.as_deref())
    }

    /// Ancestors of `tag` from parent upward.
    pub fn ancestors(&self, tag: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut current = normalize_tag(tag);
        while let Some(node) = self.nodes.get(&current) {
            match &node.parent {
                Some(p) => {
                    out.push(p.clone());
                    current = p.clone();
                }
                None => break,
            }
        }
        out
    }

    /// Links `child` under `parent`, creating the parent as a root when it
    /// is new. Rejects self-links and any link whose ancestor chain would
    /// reach back to the child. Levels of the whole forest are recomputed.
    pub fn set_parent(&mut self, child: &str, parent: &str) -> Result<(), MemoryError> {
        let child_n = normalize_tag(child);
        let parent_n = normalize_tag(parent);
        if !self.nodes.contains_key(&child_n) {
            return Err(MemoryError::UnknownTag(child_n));
        }
        if child_n == parent_n {
            return Err(MemoryError::CycleRejected {
                tag: child_n,
                parent: parent_n,
            });
        }
        // Walking up from the proposed parent must never reach the child.
        let mut cursor = Some(parent_n.clone());
        while let Some(name) = cursor {
            if name == child_n {
                return Err(MemoryError::CycleRejected {
                    tag: child_n,
                    parent: parent_n,
                });
            }
            cursor = self.nodes.get(&name).and_then(|n| n.parent.clone());
        }
        self.insert(&parent_n);
        self.nodes
            .get_mut(&child_n)
            .expect("checked above")
            .parent = Some(parent_n);
        self.recompute_levels();
        Ok(())
    }

    fn recompute_levels(&mut self) {
        let names: Vec<String> = self.nodes.keys().cloned().collect();
        for name in names {
            let mut level = 0usize;
            let mut cursor = self.nodes.get(&name).and_then(|n| n.parent.clone());
            while let Some(p) = cursor {
                level += 1;
                cursor = self.nodes.get(&p).and_then(|n| n.parent.clone());
            }
            self.nodes.get_mut(&name).expect("iterating own keys").level = level;
        }
    }

    /// Full structural check: parents exist, no cycles, child level is
    /// parent level plus one, roots are level zero.
    pub fn check_invariants(&self) -> Result<(), MemoryError> {
        for node in self.nodes.values() {
            match &node.parent {
                None => {
                    if node.level != 0 {
                        return Err(MemoryError::BrokenTaxonomy(format!(
                            "root `{}` has level {}",
                            node.name, node.level
                        )));
                    }
                }
                Some(p) => {
                    let parent = self.nodes.get(p).ok_or_else(|| {
                        MemoryError::BrokenTaxonomy(format!(
                            "`{}` points at missing parent `{p}`",
                            node.name
                        ))
                    })?;
                    if node.level != parent.level + 1 {
                        return Err(MemoryError::BrokenTaxonomy(format!(
                            "`{}` level {} but parent `{}` level {}",
                            node.name, node.level, parent.name, parent.level
                        )));
                    }
                }
            }
            // Cycle walk bounded by node count.
            let mut cursor = node.parent.clone();
            let mut steps = 0usize;
            while let Some(p) = cursor {
                steps += 1;
                if p == node.name || steps > self.nodes.len() {
                    return Err(MemoryError::BrokenTaxonomy(format!(
                        "cycle through `{}`",
                        node.name
                    )));
                }
                cursor = self.nodes.get(&p).and_then(|n| n.parent.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_is_idempotent() {
        for raw in ["  Michael   Jordan ", "NBA", "basket ball", "a\tb\nc"] {
            let once = normalize_tag(raw);
            assert_eq!(normalize_tag(&once), once);
        }
        assert_eq!(normalize_tag(" Michael  Jordan "), "michael jordan");
    }

    #[test]
    fn linking_builds_levels() {
        let mut t = Taxonomy::new();
        t.insert("Michael Jordan");
        t.set_parent("michael jordan", "NBA").unwrap();
        t.set_parent("nba", "Basketball").unwrap();
        assert_eq!(t.get("michael jordan").unwrap().level, 2);
        assert_eq!(t.get("nba").unwrap().level, 1);
        assert_eq!(t.get("basketball").unwrap().level, 0);
        t.check_invariants().unwrap();
        assert_eq!(
            t.ancestors("michael jordan"),
            vec!["nba".to_string(), "basketball".to_string()]
        );
    }

    #[test]
    fn cycles_are_rejected() {
        let mut t = Taxonomy::new();
        t.insert("nba");
        t.set_parent("nba", "basketball").unwrap();
        // basketball -> nba would close the loop
        let err = t.set_parent("basketball", "nba").unwrap_err();
        assert!(matches!(err, MemoryError::CycleRejected { .. }));
        // self link
        t.insert("tennis");
        assert!(matches!(
            t.set_parent("tennis", "Tennis"),
            Err(MemoryError::CycleRejected { .. })
        ));
        t.check_invariants().unwrap();
    }
}
