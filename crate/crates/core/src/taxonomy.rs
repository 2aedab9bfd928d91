//! Label domains, the knowledge relations between their labels, and label
//! word embeddings.
//!
//! A taxonomy file is JSON:
//!
//! ```json
//! {
//!   "domains": [{"name": "medium", "labels": ["background", "head"]},
//!               {"name": "fine", "labels": ["background", "hair", "face"]}],
//!   "adjacency": {"fine": [["hair", "face"]]},
//!   "subordinate": [["hair", "head"], ["fine:face", "medium:head"]]
//! }
//! ```
//!
//! Labels in `subordinate` pairs are either bare names, which must be unique
//! across all domains, or `domain:label`. Labels that carry the same name in
//! two domains denote the same concept: they map onto each other when
//! relabeling and count as related in the handcraft transfer.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TaxonomyFile {
    pub domains: Vec<DomainFile>,
    #[serde(default)]
    pub adjacency: BTreeMap<String, Vec<[String; 2]>>,
    #[serde(default)]
    pub subordinate: Vec<[String; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainFile {
    pub name: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub name: String,
    pub labels: Vec<String>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A label identified by domain index and label index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelRef {
    pub domain: usize,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct LabelTaxonomy {
    domains: Vec<Domain>,
    /// Per domain, ordered pairs `(i, j)`; always contains `(j, i)` too.
    adjacency: Vec<BTreeSet<(usize, usize)>>,
    /// Directed `(fine, coarse)` pairs.
    subordinate: BTreeSet<(LabelRef, LabelRef)>,
}

impl LabelTaxonomy {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: TaxonomyFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_file(file)
    }

    pub fn from_file(file: TaxonomyFile) -> Result<Self> {
        let mut domains: Vec<Domain> = Vec::new();
        for d in file.domains {
            if domains.iter().any(|x| x.name == d.name) {
                return Err(Error::Taxonomy(format!("duplicate domain '{}'", d.name)));
            }
            let mut seen = BTreeSet::new();
            for l in &d.labels {
                if !seen.insert(l.as_str()) {
                    return Err(Error::Taxonomy(format!(
                        "duplicate label '{l}' in domain '{}'",
                        d.name
                    )));
                }
            }
            domains.push(Domain {
                name: d.name,
                labels: d.labels,
            });
        }

        let mut adjacency = vec![BTreeSet::new(); domains.len()];
        for (dname, pairs) in &file.adjacency {
            let di = domains
                .iter()
                .position(|d| &d.name == dname)
                .ok_or_else(|| {
                    Error::Taxonomy(format!("adjacency for unknown domain '{dname}'"))
                })?;
            for [a, b] in pairs {
                let ia = domains[di].index_of(a).ok_or_else(|| {
                    Error::Taxonomy(format!("unknown label '{a}' in domain '{dname}'"))
                })?;
                let ib = domains[di].index_of(b).ok_or_else(|| {
                    Error::Taxonomy(format!("unknown label '{b}' in domain '{dname}'"))
                })?;
                if ia == ib {
                    return Err(Error::Taxonomy(format!(
                        "self-pair ('{a}', '{b}') in domain '{dname}'"
                    )));
                }
                adjacency[di].insert((ia, ib));
                adjacency[di].insert((ib, ia));
            }
        }

        let mut tax = Self {
            domains,
            adjacency,
            subordinate: BTreeSet::new(),
        };
        for [fine, coarse] in &file.subordinate {
            let f = tax.resolve(fine)?;
            let c = tax.resolve(coarse)?;
            if f.domain == c.domain {
                return Err(Error::Taxonomy(format!(
                    "subordinate pair ('{fine}', '{coarse}') stays within one domain"
                )));
            }
            tax.subordinate.insert((f, c));
        }
        Ok(tax)
    }

    /// Resolves `label` or `domain:label`.
    pub fn resolve(&self, name: &str) -> Result<LabelRef> {
        if let Some((d, l)) = name.split_once(':') {
            let di = self.domain_index(d)?;
            let li = self.domains[di]
                .index_of(l)
                .ok_or_else(|| Error::Taxonomy(format!("unknown label '{l}' in domain '{d}'")))?;
            return Ok(LabelRef {
                domain: di,
                label: li,
            });
        }
        let hits: Vec<LabelRef> = self
            .domains
            .iter()
            .enumerate()
            .filter_map(|(di, d)| {
                d.index_of(name).map(|li| LabelRef {
                    domain: di,
                    label: li,
                })
            })
            .collect();
        match hits.as_slice() {
            [one] => Ok(*one),
            [] => Err(Error::Taxonomy(format!("unknown label '{name}'"))),
            _ => Err(Error::Taxonomy(format!(
                "label '{name}' is ambiguous across domains; qualify it as domain:label"
            ))),
        }
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Input(format!("unknown domain '{name}'")))
    }

    pub fn domain(&self, name: &str) -> Result<&Domain> {
        Ok(&self.domains[self.domain_index(name)?])
    }

    pub fn label_name(&self, r: LabelRef) -> &str {
        &self.domains[r.domain].labels[r.label]
    }

    pub fn subordinate_pairs(&self) -> impl Iterator<Item = (LabelRef, LabelRef)> + '_ {
        self.subordinate.iter().copied()
    }

    pub fn adjacency_pairs(&self, domain: &str) -> Result<Vec<(usize, usize)>> {
        let di = self.domain_index(domain)?;
        Ok(self.adjacency[di].iter().copied().collect())
    }

    /// Binary symmetric `N×N` adjacency with zero diagonal.
    pub fn intra_adjacency(&self, domain: &str) -> Result<Tensor> {
        let di = self.domain_index(domain)?;
        let n = self.domains[di].len();
        let mut a = Tensor::zeros(&[n, n]);
        for &(i, j) in &self.adjacency[di] {
            a.set(i, j, 1.0);
        }
        Ok(a)
    }

    fn related(&self, a: LabelRef, b: LabelRef) -> bool {
        self.subordinate.contains(&(a, b))
            || self.subordinate.contains(&(b, a))
            || (a.domain != b.domain && self.label_name(a) == self.label_name(b))
    }

    /// `N_t×N_s` indicator of subordination (either direction) between target
    /// and source labels.
    pub fn handcraft_transfer(&self, source: &str, target: &str) -> Result<Tensor> {
        let si = self.domain_index(source)?;
        let ti = self.domain_index(target)?;
        let (ns, nt) = (self.domains[si].len(), self.domains[ti].len());
        let mut m = Tensor::zeros(&[nt, ns]);
        for i in 0..nt {
            for j in 0..ns {
                let t = LabelRef {
                    domain: ti,
                    label: i,
                };
                let s = LabelRef {
                    domain: si,
                    label: j,
                };
                if self.related(t, s) {
                    m.set(i, j, 1.0);
                }
            }
        }
        Ok(m)
    }

    /// For every label of `from`, its ancestor label index in `to`, following
    /// subordinate pairs upward through any intermediate domains.
    pub fn ancestor_map(&self, from: &str, to: &str) -> Result<Vec<usize>> {
        let fi = self.domain_index(from)?;
        let ti = self.domain_index(to)?;
        if fi == ti {
            return Ok((0..self.domains[fi].len()).collect());
        }
        let mut parents: HashMap<LabelRef, Vec<LabelRef>> = HashMap::new();
        for &(f, c) in &self.subordinate {
            parents.entry(f).or_default().push(c);
        }
        let to_domain = &self.domains[ti];
        let mut out = Vec::with_capacity(self.domains[fi].len());
        for (li, name) in self.domains[fi].labels.iter().enumerate() {
            if let Some(same) = to_domain.index_of(name) {
                out.push(same);
                continue;
            }
            let start = LabelRef {
                domain: fi,
                label: li,
            };
            let mut queue = VecDeque::from([start]);
            let mut seen = BTreeSet::from([start]);
            let mut found = None;
            while let Some(cur) = queue.pop_front() {
                if cur.domain == ti {
                    found = Some(cur.label);
                    break;
                }
                for &p in parents.get(&cur).map(Vec::as_slice).unwrap_or(&[]) {
                    if seen.insert(p) {
                        queue.push_back(p);
                    }
                }
            }
            match found {
                Some(a) => out.push(a),
                None => {
                    return Err(Error::Taxonomy(format!(
                        "label '{name}' of domain '{from}' has no ancestor in domain '{to}'"
                    )))
                }
            }
        }
        Ok(out)
    }
}

/// Word vectors for label names, all of one dimension.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `<label> <v1> ... <vd>` lines. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = EmbeddingTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(label) = parts.next() else { continue };
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::Input(format!("embedding line {}: bad number '{p}'", lineno + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            table.insert(label, values)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, label: &str, v: Vec<f64>) -> Result<()> {
        if v.is_empty() {
            return Err(Error::Input(format!("embedding for '{label}' is empty")));
        }
        if self.vectors.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::Input(format!(
                "embedding for '{label}' has dimension {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().all(|&x| x == 0.0) || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input(format!(
                "embedding for '{label}' must be finite and nonzero"
            )));
        }
        self.vectors.insert(label.to_string(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, label: &str) -> Result<&[f64]> {
        self.vectors
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("no embedding for label '{label}'")))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Row-stochastic `N_t×N_s` matrix: softmax over sources of the cosine
/// similarity between label embeddings.
pub fn semantic_transfer(
    table: &EmbeddingTable,
    target_labels: &[String],
    source_labels: &[String],
) -> Result<Tensor> {
    let targets = target_labels
        .iter()
        .map(|l| table.get(l))
        .collect::<Result<Vec<_>>>()?;
    let sources = source_labels
        .iter()
        .map(|l| table.get(l))
        .collect::<Result<Vec<_>>>()?;
    let (nt, ns) = (targets.len(), sources.len());
    let mut out = Tensor::zeros(&[nt, ns]);
    for (i, t) in targets.iter().enumerate() {
        let sims: Vec<f64> = sources.iter().map(|s| cosine(t, s)).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaxonomyFile {
        serde_json::from_str(
            r#"{
              "domains": [
                {"name": "coarse", "labels": ["background", "head", "body"]},
                {"name": "fine", "labels": ["background", "hat", "hair", "face", "leg"]}
              ],
              "adjacency": {"fine": [["hair", "face"]]},
              "subordinate": [["hat", "head"], ["hair", "head"], ["face", "head"], ["leg", "body"]]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn self_pair_rejected() {
        let mut f = small();
        f.adjacency
            .insert("fine".into(), vec![["hair".into(), "hair".into()]]);
        let err = LabelTaxonomy::from_file(f).unwrap_err();
        assert!(err.to_string().contains("self-pair"), "{err}");
    }

    #[test]
    fn unknown_label_names_the_label() {
        let mut f = small();
        f.subordinate.push(["tail".into(), "body".into()]);
        let err = LabelTaxonomy::from_file(f).unwrap_err();
        assert!(err.to_string().contains("'tail'"), "{err}");
    }

    #[test]
    fn duplicate_label_rejected() {
        let mut f = small();
        f.domains[1].labels.push("hat".into());
        assert!(LabelTaxonomy::from_file(f).is_err());
    }

    #[test]
    fn ambiguous_bare_label_requires_qualification() {
        let mut f = small();
        f.subordinate
            .push(["background".into(), "background".into()]);
        assert!(LabelTaxonomy::from_file(f.clone()).is_err());
        f.subordinate.pop();
        f.subordinate
            .push(["fine:background".into(), "coarse:background".into()]);
        assert!(LabelTaxonomy::from_file(f).is_ok());
    }

    #[test]
    fn subordinate_pair_is_directed() {
        let t = LabelTaxonomy::from_file(small()).unwrap();
        let hair = t.resolve("hair").unwrap();
        let head = t.resolve("head").unwrap();
        let pairs: Vec<_> = t.subordinate_pairs().collect();
        assert!(pairs.contains(&(hair, head)));
        assert!(!pairs.contains(&(head, hair)));
    }

    #[test]
    fn intra_adjacency_examples() {
        let f: TaxonomyFile = serde_json::from_str(
            r#"{"domains": [{"name": "d", "labels": ["hat", "hair", "face"]},
                            {"name": "e", "labels": ["a", "b", "c"]},
                            {"name": "k", "labels": ["a", "b", "c"]}],
                "adjacency": {"d": [["hair", "face"]],
                              "k": [["a", "b"], ["b", "c"], ["c", "a"]]}}"#,
        )
        .unwrap();
        let t = LabelTaxonomy::from_file(f).unwrap();
        let a = t.intra_adjacency("d").unwrap();
        assert_eq!(a.data(), &[0., 0., 0., 0., 0., 1., 0., 1., 0.]);
        assert!(t
            .intra_adjacency("e")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let full = t.intra_adjacency("k").unwrap();
        assert_eq!(full.data(), &[0., 1., 1., 1., 0., 1., 1., 1., 0.]);
        assert!(matches!(t.intra_adjacency("zzz"), Err(Error::Input(_))));
    }

    #[test]
    fn handcraft_examples() {
        let t = LabelTaxonomy::from_file(small()).unwrap();
        // Target fine, source coarse.
        let m = t.handcraft_transfer("coarse", "fine").unwrap();
        assert_eq!(m.shape(), &[5, 3]);
        assert_eq!(m.get(2, 1), 1.0); // hair ↔ head
        assert_eq!(m.get(1, 2), 0.0); // hat ↔ body
        assert_eq!(m.get(0, 0), 1.0); // same-name background
        let back = t.handcraft_transfer("fine", "coarse").unwrap();
        assert!(back.bit_eq(&m.transpose().unwrap()));
    }

    #[test]
    fn handcraft_without_subordination_is_zero() {
        let f: TaxonomyFile = serde_json::from_str(
            r#"{"domains": [{"name": "a", "labels": ["x", "y"]},
                            {"name": "b", "labels": ["z"]}]}"#,
        )
        .unwrap();
        let t = LabelTaxonomy::from_file(f).unwrap();
        assert!(t
            .handcraft_transfer("a", "b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn ancestor_map_coarsens_and_rejects_orphans() {
        let t = LabelTaxonomy::from_file(small()).unwrap();
        assert_eq!(
            t.ancestor_map("fine", "coarse").unwrap(),
            vec![0, 1, 1, 1, 2]
        );
        assert_eq!(t.ancestor_map("fine", "fine").unwrap(), vec![0, 1, 2, 3, 4]);

        let mut f = small();
        f.subordinate.pop();
        let t = LabelTaxonomy::from_file(f).unwrap();
        let err = t.ancestor_map("fine", "coarse").unwrap_err();
        assert!(err.to_string().contains("'leg'"), "{err}");
    }

    #[test]
    fn embeddings_validate() {
        assert!(EmbeddingTable::parse("a 1 0\nb 0 1 2\n").is_err());
        assert!(EmbeddingTable::parse("a 0 0\n").is_err());
        assert!(EmbeddingTable::parse("a 1 x\n").is_err());
        let e = EmbeddingTable::parse("a 1 0\n\nb 0 2\n").unwrap();
        assert_eq!(e.dim(), 2);
        let err = e.get("c").unwrap_err();
        assert!(err.to_string().contains("'c'"));
    }

    #[test]
    fn semantic_transfer_examples() {
        let e = EmbeddingTable::parse("t 1 0\ns0 1 0\ns1 0 1\nu 3 3\nv 3 3\n").unwrap();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

        let m = semantic_transfer(&e, &s(&["t"]), &s(&["s0", "s1"])).unwrap();
        let en = std::f64::consts::E;
        assert!((m.get(0, 0) - en / (en + 1.0)).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.0 / (en + 1.0)).abs() < 1e-15);

        let m = semantic_transfer(&e, &s(&["t", "s1"]), &s(&["u", "v"])).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));

        let m = semantic_transfer(&e, &s(&["t", "u"]), &s(&["s1"])).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0]);

        assert!(semantic_transfer(&e, &s(&["nope"]), &s(&["t"])).is_err());
    }
}
