//! The class hierarchy: agglomerative construction from class centroids,
//! import of externally authored trees, tree queries, and export.
//!
//! Node ids are dense. Leaves occupy `0..K` in class-name order, internal
//! nodes follow, and the root is always the last node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Node<T> {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub class: Option<String>,
    pub merge_distance: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy<T> {
    nodes: Vec<Node<T>>,
    root: NodeId,
    leaf_index: BTreeMap<String, NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassCentroid<T> {
    pub class: String,
    pub vector: Vec<T>,
    pub count: usize,
}

/// Mean feature vector per class, in the order of `classes`.
pub fn class_centroids<T: Scalar>(
    features: &[Vec<T>],
    labels: &[String],
    classes: &[String],
) -> Result<Vec<ClassCentroid<T>>> {
    if features.len() != labels.len() {
        return Err(Error::arg("features and labels differ in length"));
    }
    let width = features.first().map_or(0, Vec::len);
    let mut acc: BTreeMap<&str, (Vec<T>, usize)> = classes
        .iter()
        .map(|c| (c.as_str(), (vec![T::zero(); width], 0)))
        .collect();
    for (x, y) in features.iter().zip(labels) {
        if x.len() != width {
            return Err(Error::arg("feature vectors differ in length"));
        }
        if let Some((sum, n)) = acc.get_mut(y.as_str()) {
            sum.iter_mut().zip(x).for_each(|(s, &v)| *s += v);
            *n += 1;
        }
    }
    classes
        .iter()
        .map(|c| {
            let (sum, count) = &acc[c.as_str()];
            if *count == 0 {
                return Err(Error::arg(format!("class `{c}` has no feature vectors")));
            }
            let n = T::from_usize_lossy(*count);
            Ok(ClassCentroid {
                class: c.clone(),
                vector: sum.iter().map(|&s| s / n).collect(),
                count: *count,
            })
        })
        .collect()
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::arg("cosine distance of vectors with different lengths"));
    }
    let (na, nb) = (norm(a), norm(b));
    if !(na > T::zero() && nb > T::zero()) {
        return Err(Error::arg("cosine distance of a zero vector"));
    }
    let d = T::one() - dot(a, b) / (na * nb);
    Ok(d.max(T::zero()).min(T::lit(2.0)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct JsonNode<T> {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merge_distance: Option<T>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    children: Vec<JsonNode<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    JsonTree,
    Dot,
}

impl<T: Scalar> Hierarchy<T> {
    /// Validates and indexes a node table.
    pub fn from_nodes(nodes: Vec<Node<T>>, root: NodeId) -> Result<Self> {
        let n = nodes.len();
        if root >= n {
            return Err(Error::format("root id out of range"));
        }
        if nodes[root].parent.is_some() {
            return Err(Error::format("root has a parent"));
        }
        let mut leaf_index = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if id != root {
                let p = node
                    .parent
                    .ok_or_else(|| Error::format(format!("node {id} is a second root")))?;
                if p >= n || !nodes[p].children.contains(&id) {
                    return Err(Error::format(format!("node {id} has inconsistent parent")));
                }
            }
            for &c in &node.children {
                if c >= n || nodes[c].parent != Some(id) {
                    return Err(Error::format(format!("node {id} has inconsistent child")));
                }
            }
            match (&node.class, node.children.len()) {
                (Some(class), 0) => {
                    if leaf_index.insert(class.clone(), id).is_some() {
                        return Err(Error::format(format!("duplicate leaf `{class}`")));
                    }
                }
                (None, k) if k >= 2 => {}
                (Some(_), _) => return Err(Error::format(format!("leaf {id} has children"))),
                (None, _) => {
                    return Err(Error::format(format!(
                        "internal node {id} needs at least two children"
                    )))
                }
            }
        }
        let h = Hierarchy {
            nodes,
            root,
            leaf_index,
        };
        // Every node reachable from the root exactly once rules out cycles.
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::format("cycle in hierarchy"));
            }
            stack.extend(&h.nodes[id].children);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::format("hierarchy has nodes unreachable from the root"));
        }
        Ok(h)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].children
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].children.is_empty()
    }

    pub fn class_of(&self, id: NodeId) -> Option<&str> {
        self.nodes[id].class.as_deref()
    }

    pub fn leaf_of(&self, class: &str) -> Option<NodeId> {
        self.leaf_index.get(class).copied()
    }

    pub fn merge_distance(&self, id: NodeId) -> Option<T> {
        self.nodes[id].merge_distance
    }

    /// Class names in sorted order.
    pub fn classes(&self) -> Vec<String> {
        self.leaf_index.keys().cloned().collect()
    }

    pub fn class_count(&self) -> usize {
        self.leaf_index.len()
    }

    /// Leaf ids, in class-name order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.leaf_index.values().copied().collect()
    }

    pub fn internal_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&n| !self.is_leaf(n))
    }

    pub fn is_binary(&self) -> bool {
        self.nodes.iter().all(|n| n.children.is_empty() || n.children.len() == 2)
    }

    /// True when every internal node carries a merge distance.
    pub fn has_merge_distances(&self) -> bool {
        self.internal_nodes()
            .all(|n| self.nodes[n].merge_distance.is_some())
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::arg(format!(
                "node {id} out of range for hierarchy of {} nodes",
                self.nodes.len()
            )))
        }
    }

    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            d += 1;
            cur = p;
        }
        d
    }

    /// Ancestors of `id` from the root down to its parent.
    pub fn anc(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.check(id)?;
        let mut path = Vec::new();
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Ok(path)
    }

    /// Root-to-node path including the node itself.
    pub fn path_to(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut path = self.anc(id)?;
        path.push(id);
        Ok(path)
    }

    pub fn lca(&self, s: NodeId, t: NodeId) -> Result<NodeId> {
        self.check(s)?;
        self.check(t)?;
        let (mut a, mut b) = (s, t);
        let (mut da, mut db) = (self.depth(a), self.depth(b));
        while da > db {
            a = self.nodes[a].parent.expect("deeper node has a parent");
            da -= 1;
        }
        while db > da {
            b = self.nodes[b].parent.expect("deeper node has a parent");
            db -= 1;
        }
        while a != b {
            a = self.nodes[a].parent.expect("common root");
            b = self.nodes[b].parent.expect("common root");
        }
        Ok(a)
    }

    /// Tree distance where the edge from a child to its parent weighs the
    /// parent's merge distance.
    pub fn cumulative_cosine_distance(&self, s: NodeId, t: NodeId) -> Result<T> {
        if !self.has_merge_distances() {
            return Err(Error::Capability(
                "cumulative cosine distance needs merge distances; this hierarchy has none".into(),
            ));
        }
        let q = self.lca(s, t)?;
        let climb = |mut n: NodeId| {
            let mut total = T::zero();
            while n != q {
                let p = self.nodes[n].parent.expect("below lca");
                total += self.nodes[p].merge_distance.expect("checked");
                n = p;
            }
            total
        };
        Ok(climb(s) + climb(t))
    }

    /// Class names under `id`.
    pub fn leaf_set(&self, id: NodeId) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            match &self.nodes[n].class {
                Some(c) => {
                    out.insert(c.clone());
                }
                None => stack.extend(&self.nodes[n].children),
            }
        }
        out
    }

    /// One root over all classes: the flat-softmax ablation.
    pub fn flat(classes: &[String]) -> Result<Self> {
        let mut classes = classes.to_vec();
        classes.sort();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::arg("a hierarchy needs at least two classes"));
        }
        let k = classes.len();
        let mut nodes: Vec<Node<T>> = classes
            .into_iter()
            .map(|c| Node {
                parent: Some(k),
                children: vec![],
                class: Some(c),
                merge_distance: None,
            })
            .collect();
        nodes.push(Node {
            parent: None,
            children: (0..k).collect(),
            class: None,
            merge_distance: None,
        });
        Self::from_nodes(nodes, k)
    }

    /// Agglomerative build from class centroids with cosine distance and
    /// average linkage.
    pub fn build(centroids: &[ClassCentroid<T>]) -> Result<Self> {
        if centroids.len() < 2 {
            return Err(Error::arg("hierarchy construction needs at least two centroids"));
        }
        let mut sorted: Vec<&ClassCentroid<T>> = centroids.iter().collect();
        sorted.sort_by(|a, b| a.class.cmp(&b.class));
        let k = sorted.len();
        let mut dist = vec![vec![T::zero(); k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let d = cosine_distance(&sorted[i].vector, &sorted[j].vector)?;
                dist[i][j] = d;
                dist[j][i] = d;
            }
        }
        let names: Vec<String> = sorted.iter().map(|c| c.class.clone()).collect();
        Self::build_from_distances(&names, &dist)
    }

    /// Agglomerative build from a symmetric class distance matrix. Cluster
    /// distances follow the size-weighted (average linkage) update; exact
    /// ties go to the pair whose sorted member lists compare smallest.
    pub fn build_from_distances(classes: &[String], dist: &[Vec<T>]) -> Result<Self> {
        let k = classes.len();
        if k < 2 {
            return Err(Error::arg("hierarchy construction needs at least two classes"));
        }
        if dist.len() != k || dist.iter().any(|r| r.len() != k) {
            return Err(Error::arg("distance matrix shape does not match classes"));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| classes[a].cmp(&classes[b]));
        if order.windows(2).any(|w| classes[w[0]] == classes[w[1]]) {
            return Err(Error::arg("duplicate class names"));
        }

        let total = 2 * k - 1;
        let mut nodes: Vec<Node<T>> = order
            .iter()
            .map(|&i| Node {
                parent: None,
                children: vec![],
                class: Some(classes[i].clone()),
                merge_distance: None,
            })
            .collect();
        // Distances indexed by node id; rows grow as clusters form.
        let mut d = vec![vec![T::zero(); total]; total];
        for a in 0..k {
            for b in 0..k {
                d[a][b] = dist[order[a]][order[b]];
            }
        }
        let mut members: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
        let mut active: Vec<NodeId> = (0..k).collect();

        while active.len() > 1 {
            let mut best: Option<(T, usize, usize)> = None;
            for (x, &a) in active.iter().enumerate() {
                for &b in &active[x + 1..] {
                    let (lo, hi) = if members[a] < members[b] { (a, b) } else { (b, a) };
                    let dd = d[a][b];
                    let better = match best {
                        None => true,
                        Some((bd, bl, bh)) => {
                            dd < bd
                                || (dd == bd
                                    && (&members[lo], &members[hi]) < (&members[bl], &members[bh]))
                        }
                    };
                    if better {
                        best = Some((dd, lo, hi));
                    }
                }
            }
            let (dd, left, right) = best.expect("at least one pair");
            let id = nodes.len();
            let (nl, nr) = (
                T::from_usize_lossy(members[left].len()),
                T::from_usize_lossy(members[right].len()),
            );
            active.retain(|&c| c != left && c != right);
            for &c in &active {
                let v = (nl * d[left][c] + nr * d[right][c]) / (nl + nr);
                d[id][c] = v;
                d[c][id] = v;
            }
            let mut m = members[left].clone();
            m.extend(&members[right]);
            m.sort_unstable();
            members.push(m);
            nodes[left].parent = Some(id);
            nodes[right].parent = Some(id);
            nodes.push(Node {
                parent: None,
                children: vec![left, right],
                class: None,
                merge_distance: Some(dd),
            });
            active.push(id);
        }
        Self::from_nodes(nodes, total - 1)
    }

    /// Internal nodes in creation order as (left leaf set, right leaf set,
    /// merge distance).
    pub fn merge_sequence(&self) -> Vec<(BTreeSet<String>, BTreeSet<String>, Option<T>)> {
        self.internal_nodes()
            .map(|n| {
                let ch = &self.nodes[n].children;
                (
                    self.leaf_set(ch[0]),
                    self.leaf_set(ch[1]),
                    self.nodes[n].merge_distance,
                )
            })
            .collect()
    }

    /// Order-sensitive comparison of shape, leaf classes and merge distances,
    /// ignoring node numbering.
    pub fn structurally_eq(&self, other: &Hierarchy<T>) -> bool {
        fn eq<T: Scalar>(a: &Hierarchy<T>, x: NodeId, b: &Hierarchy<T>, y: NodeId) -> bool {
            let (nx, ny) = (&a.nodes[x], &b.nodes[y]);
            nx.class == ny.class
                && nx.merge_distance == ny.merge_distance
                && nx.children.len() == ny.children.len()
                && nx
                    .children
                    .iter()
                    .zip(&ny.children)
                    .all(|(&cx, &cy)| eq(a, cx, b, cy))
        }
        eq(self, self.root, other, other.root)
    }

    fn node_name(&self, id: NodeId) -> String {
        match &self.nodes[id].class {
            Some(c) => c.clone(),
            None => format!("n{id}"),
        }
    }

    fn to_json_node(&self, id: NodeId) -> JsonNode<T> {
        JsonNode {
            name: self.node_name(id),
            merge_distance: self.nodes[id].merge_distance,
            children: self.nodes[id]
                .children
                .iter()
                .map(|&c| self.to_json_node(c))
                .collect(),
        }
    }

    pub fn to_json_tree(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json_node(self.root))
            .expect("hierarchy serializes");
        s.push('\n');
        s
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph hierarchy {\n  node [shape=box];\n");
        for id in 0..self.nodes.len() {
            let shape = if self.is_leaf(id) { "" } else { ", shape=ellipse" };
            let _ = writeln!(
                out,
                "  n{id} [label=\"{}\"{shape}];",
                self.node_name(id).replace('"', "\\\"")
            );
        }
        for id in 0..self.nodes.len() {
            for &c in &self.nodes[id].children {
                match self.nodes[id].merge_distance {
                    Some(d) => {
                        let _ = writeln!(out, "  n{id} -> n{c} [label=\"{d}\"];");
                    }
                    None => {
                        let _ = writeln!(out, "  n{id} -> n{c};");
                    }
                }
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn export(&self, format: ExportFormat) -> String {
        match format {
            ExportFormat::JsonTree => self.to_json_tree(),
            ExportFormat::Dot => self.to_dot(),
        }
    }

    /// SHA-256 of the json-tree export, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_tree().as_bytes()))
    }

    /// Parses a json-tree document, or an edge list of `parent,child` lines.
    /// Nodes with more than two children are chained left-leaning.
    pub fn import_str(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let root = if trimmed.starts_with('{') || trimmed.starts_with('[') {
            let value: serde_json::Value = serde_json::from_str(trimmed)
                .map_err(|e| Error::format(format!("hierarchy json: {e}")))?;
            let value = match value {
                serde_json::Value::Array(mut roots) => {
                    if roots.len() != 1 {
                        return Err(Error::format(format!(
                            "hierarchy must have one root, found {}",
                            roots.len()
                        )));
                    }
                    roots.remove(0)
                }
                v => v,
            };
            serde_json::from_value::<JsonNode<T>>(value)
                .map_err(|e| Error::format(format!("hierarchy json: {e}")))?
        } else {
            parse_edge_list(text)?
        };
        Self::from_json_node(root)
    }

    pub fn import(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::import_str(&text)
    }

    /// Subtree over `classes` only: other leaves are dropped and internal
    /// nodes left with a single child are spliced out.
    pub fn restrict(&self, classes: &[String]) -> Result<Self> {
        if let Some(c) = classes.iter().find(|c| self.leaf_of(c).is_none()) {
            return Err(Error::arg(format!("class `{c}` is not in the hierarchy")));
        }
        let keep: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
        fn prune<T: Scalar>(
            h: &Hierarchy<T>,
            id: NodeId,
            keep: &BTreeSet<&str>,
        ) -> Option<JsonNode<T>> {
            if let Some(c) = h.class_of(id) {
                return keep.contains(c).then(|| h.to_json_node(id));
            }
            let mut kids: Vec<JsonNode<T>> = h
                .children(id)
                .iter()
                .filter_map(|&c| prune(h, c, keep))
                .collect();
            match kids.len() {
                0 => None,
                1 => kids.pop(),
                _ => Some(JsonNode {
                    name: h.node_name(id),
                    merge_distance: h.merge_distance(id),
                    children: kids,
                }),
            }
        }
        let root = prune(self, self.root, &keep)
            .ok_or_else(|| Error::arg("restriction keeps no classes"))?;
        Self::from_json_node(root)
    }

    fn from_json_node(root: JsonNode<T>) -> Result<Self> {
        enum Tmp<T> {
            Leaf(String),
            Inner(Box<Tmp<T>>, Box<Tmp<T>>, Option<T>),
        }
        fn convert<T: Scalar>(node: JsonNode<T>, depth: usize) -> Result<Tmp<T>> {
            if depth > 10_000 {
                return Err(Error::format("hierarchy nesting too deep"));
            }
            let m = node.children.len();
            if m == 0 {
                if node.name.is_empty() {
                    return Err(Error::format("leaf without a name"));
                }
                return Ok(Tmp::Leaf(node.name));
            }
            let distance = if m == 2 { node.merge_distance } else { None };
            let mut kids = node
                .children
                .into_iter()
                .map(|c| convert(c, depth + 1))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let mut acc = kids.next().expect("m > 0");
            for (i, next) in kids.enumerate() {
                let d = if i + 2 == m { distance } else { None };
                acc = Tmp::Inner(Box::new(acc), Box::new(next), d);
            }
            Ok(acc)
        }
        let tmp = convert(root, 0)?;

        let mut leaves = Vec::new();
        fn collect<T>(t: &Tmp<T>, out: &mut Vec<String>) {
            match t {
                Tmp::Leaf(n) => out.push(n.clone()),
                Tmp::Inner(a, b, _) => {
                    collect(a, out);
                    collect(b, out);
                }
            }
        }
        collect(&tmp, &mut leaves);
        let mut sorted = leaves.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::format(format!("duplicate leaf `{}`", w[0])));
        }
        if sorted.len() < 2 {
            return Err(Error::format("hierarchy needs at least two leaves"));
        }
        let leaf_id: BTreeMap<String, NodeId> =
            sorted.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mut nodes: Vec<Node<T>> = sorted
            .iter()
            .map(|c| Node {
                parent: None,
                children: vec![],
                class: Some(c.clone()),
                merge_distance: None,
            })
            .collect();
        fn place<T: Scalar>(
            t: Tmp<T>,
            nodes: &mut Vec<Node<T>>,
            leaf_id: &BTreeMap<String, NodeId>,
        ) -> NodeId {
            match t {
                Tmp::Leaf(n) => leaf_id[&n],
                Tmp::Inner(a, b, d) => {
                    let l = place(*a, nodes, leaf_id);
                    let r = place(*b, nodes, leaf_id);
                    let id = nodes.len();
                    nodes[l].parent = Some(id);
                    nodes[r].parent = Some(id);
                    nodes.push(Node {
                        parent: None,
                        children: vec![l, r],
                        class: None,
                        merge_distance: d,
                    });
                    id
                }
            }
        }
        let root = place(tmp, &mut nodes, &leaf_id);
        // Distances are all-or-nothing.
        if nodes.iter().any(|n| !n.children.is_empty() && n.merge_distance.is_none()) {
            nodes.iter_mut().for_each(|n| n.merge_distance = None);
        }
        Self::from_nodes(nodes, root)
    }
}

fn parse_edge_list<T>(text: &str) -> Result<JsonNode<T>> {
    let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut parent: BTreeMap<String, String> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (p, c) = line
            .split_once(',')
            .ok_or_else(|| Error::format(format!("line {}: expected `parent,child`", lineno + 1)))?;
        let (p, c) = (p.trim().to_string(), c.trim().to_string());
        if p == c {
            return Err(Error::format(format!("cycle: `{p}` is its own parent")));
        }
        if let Some(prev) = parent.insert(c.clone(), p.clone()) {
            return Err(Error::format(format!(
                "`{c}` has two parents (`{prev}`, `{p}`)"
            )));
        }
        names.insert(p.clone());
        names.insert(c.clone());
        children.entry(p).or_default().push(c);
    }
    let roots: Vec<&String> = names.iter().filter(|n| !parent.contains_key(*n)).collect();
    match roots.len() {
        0 => return Err(Error::format("cycle: no root in edge list")),
        1 => {}
        k => {
            return Err(Error::format(format!(
                "multiple roots ({k}): {}",
                roots.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
    fn build<T>(
        name: &str,
        children: &BTreeMap<String, Vec<String>>,
        seen: &mut usize,
    ) -> JsonNode<T> {
        *seen += 1;
        let kids = children
            .get(name)
            .map(|cs| cs.iter().map(|c| build(c, children, seen)).collect())
            .unwrap_or_default();
        JsonNode {
            name: name.to_string(),
            merge_distance: None,
            children: kids,
        }
    }
    let mut seen = 0;
    let tree = build(roots[0], &children, &mut seen);
    if seen != names.len() {
        return Err(Error::format("cycle: some nodes are unreachable from the root"));
    }
    Ok(tree)
}
