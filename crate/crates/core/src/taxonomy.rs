//! Hyponymy graphs and abstracted-label evasion tasks.
//!
//! An edge `child → parent` says that `parent` is a hypernym of `child`.
//! Abstracted labels are the lowest usable hypernyms of the base labels;
//! each yields tasks that ask for an image of the abstracted concept while
//! the classifier must answer with a base label outside it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::diffusion::Conditioning;
use crate::error::{Error, Result};
use crate::models::{SHAPE_FAMILIES, SHAPE_LEAVES};
use crate::resadv::AttackTask;

/// Root of the built-in shape taxonomy.
pub const SHAPE_ROOT: &str = "shape";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HyponymyGraph {
    nodes: Vec<String>,
    index: BTreeMap<String, usize>,
    /// `parents[v]`: hypernyms of `v`.
    parents: Vec<Vec<usize>>,
    /// `children[v]`: hyponyms of `v`.
    children: Vec<Vec<usize>>,
    leaves: Vec<usize>,
}

impl HyponymyGraph {
    /// Builds a graph from `(child, parent)` pairs; leaves absent from every
    /// edge become isolated nodes. Duplicate edges collapse.
    pub fn new<S: AsRef<str>>(edges: &[(S, S)], leaves: &[S]) -> Result<Self> {
        let mut g = Self {
            nodes: Vec::new(),
            index: BTreeMap::new(),
            parents: Vec::new(),
            children: Vec::new(),
            leaves: Vec::new(),
        };
        for (c, p) in edges {
            let c = g.intern(c.as_ref())?;
            let p = g.intern(p.as_ref())?;
            if !g.parents[c].contains(&p) {
                g.parents[c].push(p);
                g.children[p].push(c);
            }
        }
        for l in leaves {
            let l = g.intern(l.as_ref())?;
            if g.leaves.contains(&l) {
                return Err(Error::Graph(format!("leaf `{}` listed twice", g.nodes[l])));
            }
            g.leaves.push(l);
        }
        Ok(g)
    }

    fn intern(&mut self, name: &str) -> Result<usize> {
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Graph("empty label".into()));
        }
        if let Some(&i) = self.index.get(name) {
            return Ok(i);
        }
        self.nodes.push(name.to_string());
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        self.index.insert(name.to_string(), self.nodes.len() - 1);
        Ok(self.nodes.len() - 1)
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn leaves(&self) -> Vec<&str> {
        self.leaves.iter().map(|&l| self.nodes[l].as_str()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// `(child, parent)` pairs in insertion order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::new();
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((self.nodes[c].as_str(), self.nodes[p].as_str()));
            }
        }
        out
    }

    pub fn children_of(&self, name: &str) -> Vec<&str> {
        self.index
            .get(name)
            .map(|&v| self.children[v].iter().map(|&c| self.nodes[c].as_str()).collect())
            .unwrap_or_default()
    }

    /// Proper ancestors of `v` as a membership vector.
    fn ancestors(&self, v: usize) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue: VecDeque<usize> = self.parents[v].iter().copied().collect();
        while let Some(u) = queue.pop_front() {
            if !seen[u] {
                seen[u] = true;
                queue.extend(self.parents[u].iter().copied());
            }
        }
        seen
    }

    /// Proper ancestors of `name`, sorted.
    pub fn ancestors_of(&self, name: &str) -> Vec<&str> {
        let Some(&v) = self.index.get(name) else {
            return Vec::new();
        };
        let mut out: Vec<&str> = self
            .ancestors(v)
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(u, _)| self.nodes[u].as_str())
            .collect();
        out.sort();
        out
    }

    /// An edge on a directed cycle, if there is one.
    fn find_cycle_edge(&self) -> Option<(usize, usize)> {
        // 0 = unvisited, 1 = on the stack, 2 = done.
        let mut state = vec![0u8; self.nodes.len()];
        for start in 0..self.nodes.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack = vec![(start, 0usize)];
            state[start] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&p) = self.parents[v].get(*next) {
                    *next += 1;
                    match state[p] {
                        0 => {
                            state[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => return Some((v, p)),
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        None
    }
}

/// Parses `child<TAB>parent` lines. Blank lines and `#` comments are skipped.
pub fn parse_edges(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (c, p) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: expected child<TAB>parent", no + 1)))?;
        if p.contains('\t') {
            return Err(Error::Format(format!("line {}: more than two fields", no + 1)));
        }
        out.push((c.trim().to_string(), p.trim().to_string()));
    }
    Ok(out)
}

/// One label per line; blank lines and `#` comments are skipped.
pub fn parse_labels(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Restricts `graph` to its leaves and everything reachable upward from
/// them, keeping the induced edges.
pub fn closure_subgraph(graph: &HyponymyGraph) -> Result<HyponymyGraph> {
    if let Some((c, p)) = graph.find_cycle_edge() {
        return Err(Error::Graph(format!(
            "cycle through edge {} -> {}",
            graph.nodes[c], graph.nodes[p]
        )));
    }
    let mut keep = vec![false; graph.nodes.len()];
    let mut queue: VecDeque<usize> = graph.leaves.iter().copied().collect();
    while let Some(v) = queue.pop_front() {
        if !keep[v] {
            keep[v] = true;
            queue.extend(graph.parents[v].iter().copied());
        }
    }
    let edges: Vec<(&str, &str)> = graph
        .edges()
        .into_iter()
        .filter(|(c, p)| keep[graph.index[*c]] && keep[graph.index[*p]])
        .collect();
    let leaves: Vec<&str> = graph.leaves();
    HyponymyGraph::new(&edges, &leaves)
}

/// Abstracted labels plus a note when none survive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    /// Sorted label names.
    pub labels: Vec<String>,
    pub warning: Option<String>,
}

/// Nodes that may serve as abstracted labels: not blocked, not a base label,
/// with at least one hyponym.
fn eligible(graph: &HyponymyGraph, blocked: &BTreeSet<&str>) -> Vec<bool> {
    (0..graph.nodes.len())
        .map(|v| {
            !blocked.contains(graph.nodes[v].as_str()) && !graph.leaves.contains(&v) && !graph.children[v].is_empty()
        })
        .collect()
}

/// Three-step selection: drop blocked labels, take the lowest eligible node
/// above each base label along every upward path, then keep only candidates
/// that are not ancestors of other candidates.
pub fn select_abstracted<S: AsRef<str>>(graph: &HyponymyGraph, blocklist: &[S]) -> Selection {
    let blocked: BTreeSet<&str> = blocklist.iter().map(AsRef::as_ref).collect();
    let ok = eligible(graph, &blocked);
    // A node is a candidate when some upward path from a base label reaches
    // it through ineligible nodes only.
    let mut candidate = vec![false; graph.nodes.len()];
    let mut seen = vec![false; graph.nodes.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &l in &graph.leaves {
        queue.extend(graph.parents[l].iter().copied());
    }
    while let Some(v) = queue.pop_front() {
        if seen[v] {
            continue;
        }
        seen[v] = true;
        if ok[v] {
            candidate[v] = true;
        } else {
            queue.extend(graph.parents[v].iter().copied());
        }
    }
    let cands: Vec<usize> = (0..graph.nodes.len()).filter(|&v| candidate[v]).collect();
    let mut dominated = vec![false; graph.nodes.len()];
    for &c in &cands {
        for (a, is_anc) in graph.ancestors(c).into_iter().enumerate() {
            if is_anc {
                dominated[a] = true;
            }
        }
    }
    let mut labels: Vec<String> = cands
        .into_iter()
        .filter(|&c| !dominated[c])
        .map(|c| graph.nodes[c].clone())
        .collect();
    labels.sort();
    let warning = labels
        .is_empty()
        .then(|| "no abstracted labels remain; no tasks can be constructed".to_string());
    Selection { labels, warning }
}

/// Prompt for an abstracted-label task.
pub fn task_prompt(abstracted: &str, leaf: &str) -> String {
    format!("Realistic image of {abstracted}, specifically, {leaf}")
}

/// One generation request and the labels that count as evasion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvasionTask {
    pub prompt: String,
    pub abstracted: String,
    pub leaf: String,
    /// Base labels outside the abstracted concept, in leaf order.
    pub a_text: Vec<String>,
}

impl EvasionTask {
    /// Maps labels to classifier indices; the leaf's index is the generator token.
    pub fn resolve<S: AsRef<str>>(&self, labels: &[S]) -> Result<AttackTask> {
        let find = |name: &str| {
            labels
                .iter()
                .position(|l| l.as_ref() == name)
                .ok_or_else(|| Error::Config(format!("label `{name}` is not a classifier class")))
        };
        let token = find(&self.leaf)?;
        let mut a_text = self.a_text.iter().map(|l| find(l)).collect::<Result<Vec<_>>>()?;
        a_text.sort_unstable();
        a_text.dedup();
        Ok(AttackTask {
            cond: Conditioning::new(token, &self.prompt),
            a_text,
        })
    }

    /// Tab-separated record: prompt, abstracted label, leaf, then A_Text members.
    pub fn to_line(&self) -> String {
        let mut fields = vec![self.prompt.as_str(), self.abstracted.as_str(), self.leaf.as_str()];
        fields.extend(self.a_text.iter().map(String::as_str));
        fields.join("\t")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::Format(format!(
                "task record needs prompt, abstracted, leaf and at least one A_Text label: `{line}`"
            )));
        }
        Ok(Self {
            prompt: fields[0].to_string(),
            abstracted: fields[1].to_string(),
            leaf: fields[2].to_string(),
            a_text: fields[3..].iter().map(|s| s.to_string()).collect(),
        })
    }
}

pub fn write_tasks(tasks: &[EvasionTask]) -> String {
    tasks.iter().map(|t| t.to_line() + "\n").collect()
}

pub fn read_tasks(text: &str) -> Result<Vec<EvasionTask>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(EvasionTask::from_line)
        .collect()
}

/// One task per (abstracted label with at least `min_children` base labels
/// below it) × (base label below it). Tasks whose A_Text would be empty are
/// dropped.
pub fn build_tasks<S: AsRef<str>>(
    abstracted: &[S],
    graph: &HyponymyGraph,
    min_children: usize,
) -> Result<Vec<EvasionTask>> {
    let mut tasks = Vec::new();
    let ancestors: Vec<Vec<bool>> = graph.leaves.iter().map(|&l| graph.ancestors(l)).collect();
    for a in abstracted {
        let a = a.as_ref();
        let &av = graph
            .index
            .get(a)
            .ok_or_else(|| Error::Graph(format!("abstracted label `{a}` is not in the graph")))?;
        let (below, outside): (Vec<usize>, Vec<usize>) = (0..graph.leaves.len()).partition(|&i| ancestors[i][av]);
        if below.len() < min_children || outside.is_empty() {
            continue;
        }
        let a_text: Vec<String> = outside.iter().map(|&i| graph.nodes[graph.leaves[i]].clone()).collect();
        for &i in &below {
            let leaf = &graph.nodes[graph.leaves[i]];
            tasks.push(EvasionTask {
                prompt: task_prompt(a, leaf),
                abstracted: a.to_string(),
                leaf: leaf.clone(),
                a_text: a_text.clone(),
            });
        }
    }
    Ok(tasks)
}

/// Plain-label tasks: every other base label counts as evasion.
pub fn original_label_tasks<S: AsRef<str>>(leaves: &[S]) -> Vec<EvasionTask> {
    leaves
        .iter()
        .map(|l| {
            let l = l.as_ref();
            EvasionTask {
                prompt: format!("Realistic image of {l}"),
                abstracted: l.to_string(),
                leaf: l.to_string(),
                a_text: leaves
                    .iter()
                    .map(AsRef::as_ref)
                    .filter(|o| *o != l)
                    .map(str::to_string)
                    .collect(),
            }
        })
        .filter(|t| !t.a_text.is_empty())
        .collect()
}

/// The shape corpus taxonomy: each shape under its family, families under
/// [`SHAPE_ROOT`].
pub fn shape_taxonomy() -> HyponymyGraph {
    let mut edges: Vec<(&str, &str)> = SHAPE_LEAVES.iter().copied().zip(SHAPE_FAMILIES.iter().copied()).collect();
    let families: BTreeSet<&str> = SHAPE_FAMILIES.iter().copied().collect();
    edges.extend(families.into_iter().map(|f| (f, SHAPE_ROOT)));
    HyponymyGraph::new(&edges, &SHAPE_LEAVES).expect("built-in taxonomy is well formed")
}

/// Abstracted-label tasks of the built-in shape taxonomy.
pub fn shape_tasks() -> Vec<EvasionTask> {
    let graph = shape_taxonomy();
    let sel = select_abstracted(&graph, &[SHAPE_ROOT]);
    build_tasks(&sel.labels, &graph, 1).expect("labels come from the graph")
}

#[cfg(test)]
mod tests;
