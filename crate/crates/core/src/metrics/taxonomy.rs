use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::normalize_answer;
use crate::error::{Error, Result};

/// Rooted tree of answer terms, read from `parent<TAB>child` lines. The root
/// has depth 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

impl Taxonomy {
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut node = |name: String, names: &mut Vec<String>, parent: &mut Vec<Option<usize>>| {
            *index.entry(name.clone()).or_insert_with(|| {
                names.push(name);
                parent.push(None);
                names.len() - 1
            })
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let Some((p, c)) = line.split_once('\t') else {
                return Err(err("expected `parent<TAB>child`".into()));
            };
            let (p, c) = (normalize_answer(p), normalize_answer(c));
            if p.is_empty() || c.is_empty() {
                return Err(err("empty term".into()));
            }
            if p == c {
                return Err(err(format!("`{c}` is its own parent")));
            }
            let pi = node(p, &mut names, &mut parent);
            let ci = node(c.clone(), &mut names, &mut parent);
            if let Some(old) = parent[ci] {
                if old != pi {
                    return Err(err(format!("`{c}` has two parents")));
                }
            }
            parent[ci] = Some(pi);
        }
        let roots: Vec<usize> = (0..names.len()).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Validation(format!(
                "taxonomy must have exactly one root, found {}",
                roots.len()
            )));
        }
        let mut depth = vec![0usize; names.len()];
        for start in 0..names.len() {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == 0 {
                if chain.len() > names.len() {
                    return Err(Error::Validation(format!(
                        "cycle through `{}`",
                        names[start]
                    )));
                }
                chain.push(cur);
                match parent[cur] {
                    Some(p) => cur = p,
                    None => {
                        depth[cur] = 1;
                        chain.pop();
                        break;
                    }
                }
            }
            let mut d = depth[cur];
            for &n in chain.iter().rev() {
                d += 1;
                depth[n] = d;
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Taxonomy {
            names,
            index,
            parent,
            depth,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(&normalize_answer(term))
    }

    pub fn depth(&self, term: &str) -> Option<usize> {
        self.index
            .get(&normalize_answer(term))
            .map(|&i| self.depth[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn lca(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root has a parent");
            b = self.parent[b].expect("non-root has a parent");
        }
        a
    }
}

/// `2·depth(lca) / (depth(a) + depth(b))`. A term absent from the taxonomy
/// scores 1 against an identical string and 0 otherwise.
pub fn wup_similarity(a: &str, b: &str, taxonomy: &Taxonomy) -> f64 {
    let (na, nb) = (normalize_answer(a), normalize_answer(b));
    match (taxonomy.index.get(&na), taxonomy.index.get(&nb)) {
        (Some(&x), Some(&y)) => {
            let l = taxonomy.lca(x, y);
            2.0 * taxonomy.depth[l] as f64 / (taxonomy.depth[x] + taxonomy.depth[y]) as f64
        }
        _ => {
            if na == nb {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn siblings_under_root() {
        let t = Taxonomy::parse("animal\tcat\nanimal\tdog\n").unwrap();
        assert_eq!(wup_similarity("cat", "dog", &t), 0.5);
        assert_eq!(wup_similarity("cat", "cat", &t), 1.0);
        assert_eq!(
            wup_similarity("Dog ", "cat", &t),
            wup_similarity("cat", "dog", &t)
        );
        assert_eq!(t.depth("animal"), Some(1));
    }

    #[test]
    fn deeper_ancestor_scores_higher() {
        let shallow = Taxonomy::parse("r\ta\nr\tb\na\tx\nb\ty\n").unwrap();
        let deep = Taxonomy::parse("r\tm\nm\tx\nm\ty\n").unwrap();
        // same leaf depths (3), lca depth 1 vs 2
        assert!(wup_similarity("x", "y", &deep) > wup_similarity("x", "y", &shallow));
    }

    #[test]
    fn unknown_terms() {
        let t = Taxonomy::parse("r\ta\n").unwrap();
        assert_eq!(wup_similarity("zebra", "zebra", &t), 1.0);
        assert_eq!(wup_similarity("zebra", "a", &t), 0.0);
    }

    #[test]
    fn malformed_taxonomies() {
        assert!(Taxonomy::parse("r\ta\nq\tb\n").is_err());
        assert!(Taxonomy::parse("r\ta\nx\ta\n").is_err());
        assert!(Taxonomy::parse("r\ta\na\tb\nb\tc\nc\ta\n").is_err());
        assert!(Taxonomy::parse("r a\n").is_err());
    }
}
