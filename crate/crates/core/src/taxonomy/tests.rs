use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn animals() -> HyponymyGraph {
    let edges = [
        ("poodle", "dog"),
        ("beagle", "dog"),
        ("tabby", "cat"),
        ("dog", "mammal"),
        ("cat", "mammal"),
    ];
    HyponymyGraph::new(&edges, &["poodle", "beagle", "tabby"]).unwrap()
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn parses_edges_and_labels() {
    let edges = parse_edges("# header\npoodle\tdog\n\nbeagle\tdog\r\n").unwrap();
    assert_eq!(edges, vec![("poodle".into(), "dog".into()), ("beagle".into(), "dog".into())]);
    assert!(matches!(parse_edges("poodle dog"), Err(Error::Format(_))));
    assert!(matches!(parse_edges("a\tb\tc"), Err(Error::Format(_))));
    assert_eq!(parse_labels("a\n# c\n\n b \n"), strings(&["a", "b"]));
}

#[test]
fn duplicate_leaves_and_empty_labels_are_rejected() {
    assert!(matches!(HyponymyGraph::new(&[("a", "b")], &["a", "a"]), Err(Error::Graph(_))));
    assert!(matches!(HyponymyGraph::new(&[("a", " ")], &["a"]), Err(Error::Graph(_))));
}

#[test]
fn closure_drops_unreachable_nodes() {
    let edges = [("a", "b"), ("b", "c"), ("x", "y"), ("y", "c")];
    let g = HyponymyGraph::new(&edges, &["a"]).unwrap();
    let c = closure_subgraph(&g).unwrap();
    let nodes: BTreeSet<&str> = c.nodes().iter().map(String::as_str).collect();
    assert_eq!(nodes, BTreeSet::from(["a", "b", "c"]));
    assert_eq!(c.edges(), vec![("a", "b"), ("b", "c")]);
}

#[test]
fn closure_without_edges_is_the_leaves() {
    let g = HyponymyGraph::new::<&str>(&[], &["a", "b"]).unwrap();
    let c = closure_subgraph(&g).unwrap();
    assert_eq!(c.nodes(), &strings(&["a", "b"])[..]);
    assert!(c.edges().is_empty());
}

#[test]
fn cycles_are_reported_with_an_edge() {
    let g = HyponymyGraph::new(&[("a", "b"), ("b", "c"), ("c", "a")], &["a"]).unwrap();
    match closure_subgraph(&g) {
        Err(Error::Graph(msg)) => assert!(msg.contains("->"), "{msg}"),
        other => panic!("expected a graph error, got {other:?}"),
    }
    let g = HyponymyGraph::new(&[("a", "a")], &["a"]).unwrap();
    assert!(matches!(closure_subgraph(&g), Err(Error::Graph(_))));
}

#[test]
fn animals_select_dog_and_cat() {
    let g = closure_subgraph(&animals()).unwrap();
    let sel = select_abstracted(&g, &["mammal"]);
    assert_eq!(sel.labels, strings(&["cat", "dog"]));
    assert!(sel.warning.is_none());
    // Without the block, mammal is still dominated by dog and cat.
    assert_eq!(select_abstracted(&g, &[] as &[&str]).labels, strings(&["cat", "dog"]));
}

#[test]
fn chain_selects_the_lowest_hypernym() {
    let g = HyponymyGraph::new(&[("a", "b"), ("b", "c")], &["a"]).unwrap();
    assert_eq!(select_abstracted(&g, &[] as &[&str]).labels, strings(&["b"]));
    assert_eq!(select_abstracted(&g, &["b"]).labels, strings(&["c"]));
}

#[test]
fn empty_selection_warns() {
    let g = HyponymyGraph::new(&[("a", "b")], &["a"]).unwrap();
    let sel = select_abstracted(&g, &["b"]);
    assert!(sel.labels.is_empty());
    assert!(sel.warning.is_some());
}

#[test]
fn animal_tasks() {
    let g = closure_subgraph(&animals()).unwrap();
    let sel = select_abstracted(&g, &["mammal"]);
    let tasks = build_tasks(&sel.labels, &g, 1).unwrap();
    let got: Vec<(&str, &str, Vec<&str>)> = tasks
        .iter()
        .map(|t| (t.abstracted.as_str(), t.leaf.as_str(), t.a_text.iter().map(String::as_str).collect()))
        .collect();
    assert_eq!(
        got,
        vec![
            ("cat", "tabby", vec!["poodle", "beagle"]),
            ("dog", "poodle", vec!["tabby"]),
            ("dog", "beagle", vec!["tabby"]),
        ]
    );
    assert_eq!(tasks[1].prompt, "Realistic image of dog, specifically, poodle");
    assert!(build_tasks(&sel.labels, &g, 3).unwrap().is_empty());
    assert_eq!(build_tasks(&sel.labels, &g, 2).unwrap().len(), 2);
    assert!(matches!(build_tasks(&["wolf"], &g, 1), Err(Error::Graph(_))));
}

#[test]
fn shape_taxonomy_yields_one_task_per_leaf() {
    let tasks = shape_tasks();
    assert_eq!(tasks.len(), SHAPE_LEAVES.len());
    let leaves: BTreeSet<&str> = tasks.iter().map(|t| t.leaf.as_str()).collect();
    assert_eq!(leaves, SHAPE_LEAVES.iter().copied().collect());
    for t in &tasks {
        assert!(!t.a_text.is_empty());
        assert!(!t.a_text.contains(&t.leaf));
        let resolved = t.resolve(&SHAPE_LEAVES).unwrap();
        assert_eq!(SHAPE_LEAVES[resolved.cond.token], t.leaf);
        assert!(resolved.a_text.windows(2).all(|w| w[0] < w[1]));
        for &a in &resolved.a_text {
            let fam = SHAPE_FAMILIES[a];
            assert_ne!(fam, t.abstracted);
        }
    }
}

#[test]
fn resolve_rejects_unknown_labels() {
    let t = EvasionTask {
        prompt: "p".into(),
        abstracted: "dog".into(),
        leaf: "poodle".into(),
        a_text: strings(&["wolf"]),
    };
    assert!(matches!(t.resolve(&["poodle"]), Err(Error::Config(_))));
}

#[test]
fn original_label_family_excludes_only_the_leaf() {
    let tasks = original_label_tasks(&["a", "b", "c"]);
    assert_eq!(tasks.len(), 3);
    assert_eq!(tasks[1].a_text, strings(&["a", "c"]));
    assert_eq!(tasks[1].prompt, "Realistic image of b");
    assert!(original_label_tasks(&["a"]).is_empty());
}

#[test]
fn task_files_round_trip() {
    let tasks = shape_tasks();
    let text = write_tasks(&tasks);
    assert_eq!(read_tasks(&text).unwrap(), tasks);
    assert!(matches!(read_tasks("p\tdog\tpoodle\n"), Err(Error::Format(_))));
}

// Exhaustive oracle: enumerate every maximal upward path explicitly and
// apply the three selection steps as literal set operations.

struct Oracle {
    n: usize,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    leaves: Vec<usize>,
}

impl Oracle {
    fn upward_paths(&self, from: usize) -> Vec<Vec<usize>> {
        if self.parents[from].is_empty() {
            return vec![vec![from]];
        }
        let mut out = Vec::new();
        for &p in &self.parents[from] {
            for tail in self.upward_paths(p) {
                let mut path = vec![from];
                path.extend(tail);
                out.push(path);
            }
        }
        out
    }

    fn is_proper_ancestor(&self, a: usize, of: usize) -> bool {
        self.upward_paths(of).iter().any(|p| p[1..].contains(&a))
    }

    fn select(&self, blocked: &BTreeSet<usize>) -> BTreeSet<usize> {
        let usable: BTreeSet<usize> = (0..self.n)
            .filter(|v| !blocked.contains(v) && !self.leaves.contains(v) && !self.children[*v].is_empty())
            .collect();
        let mut cands = BTreeSet::new();
        for &l in &self.leaves {
            for path in self.upward_paths(l) {
                if let Some(&v) = path[1..].iter().find(|v| usable.contains(v)) {
                    cands.insert(v);
                }
            }
        }
        cands
            .iter()
            .copied()
            .filter(|&c| !cands.iter().any(|&d| d != c && self.is_proper_ancestor(c, d)))
            .collect()
    }

    fn reachable_from_leaves(&self) -> BTreeSet<usize> {
        self.leaves
            .iter()
            .flat_map(|&l| self.upward_paths(l))
            .flatten()
            .collect()
    }
}

fn random_dag(rng: &mut ChaCha8Rng) -> (Oracle, Vec<String>) {
    let n = rng.random_range(2..=12);
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    let density = rng.random_range(0.1..0.5);
    // Parents always have a larger index, so the graph is acyclic.
    for c in 0..n {
        for p in c + 1..n {
            if rng.random_bool(density) {
                parents[c].push(p);
                children[p].push(c);
            }
        }
    }
    let mut leaves: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.4)).collect();
    if leaves.is_empty() {
        leaves.push(0);
    }
    (Oracle { n, parents, children, leaves }, names)
}

#[test]
fn selection_matches_the_exhaustive_oracle_on_random_dags() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut nonempty = 0;
    for _ in 0..100 {
        let (full, names) = random_dag(&mut rng);
        let edges: Vec<(&str, &str)> = (0..full.n)
            .flat_map(|c| full.parents[c].iter().map(move |&p| (c, p)))
            .map(|(c, p)| (names[c].as_str(), names[p].as_str()))
            .collect();
        let leaf_names: Vec<&str> = full.leaves.iter().map(|&l| names[l].as_str()).collect();
        let graph = HyponymyGraph::new(&edges, &leaf_names).unwrap();
        let closed = closure_subgraph(&graph).unwrap();

        let kept: BTreeSet<&str> = closed.nodes().iter().map(String::as_str).collect();
        let expect_kept: BTreeSet<&str> = full.reachable_from_leaves().iter().map(|&v| names[v].as_str()).collect();
        assert_eq!(kept, expect_kept);

        // The oracle runs on the closure as well, rebuilt by index.
        let idx = |s: &str| closed.nodes().iter().position(|x| x == s).unwrap();
        let m = closed.nodes().len();
        let mut parents = vec![Vec::new(); m];
        let mut children = vec![Vec::new(); m];
        for (c, p) in closed.edges() {
            parents[idx(c)].push(idx(p));
            children[idx(p)].push(idx(c));
        }
        let oracle = Oracle {
            n: m,
            parents,
            children,
            leaves: leaf_names.iter().map(|l| idx(l)).collect(),
        };
        let blocked: BTreeSet<usize> = (0..m).filter(|_| rng.random_bool(0.25)).collect();
        let block_names: Vec<&str> = blocked.iter().map(|&v| closed.nodes()[v].as_str()).collect();

        let sel = select_abstracted(&closed, &block_names);
        let expect: Vec<String> = {
            let mut v: Vec<String> = oracle.select(&blocked).iter().map(|&v| closed.nodes()[v].clone()).collect();
            v.sort();
            v
        };
        assert_eq!(sel.labels, expect);
        assert_eq!(sel.warning.is_some(), sel.labels.is_empty());
        if !sel.labels.is_empty() {
            nonempty += 1;
        }

        // Antichain, and every member sits above some base label.
        let members: Vec<usize> = sel.labels.iter().map(|s| idx(s)).collect();
        for &a in &members {
            assert!(!blocked.contains(&a));
            for &b in &members {
                assert!(a == b || !oracle.is_proper_ancestor(a, b));
            }
            assert!(oracle.leaves.iter().any(|&l| oracle.is_proper_ancestor(a, l)));
        }

        for t in build_tasks(&sel.labels, &closed, 1).unwrap() {
            let a = idx(&t.abstracted);
            assert!(oracle.is_proper_ancestor(a, idx(&t.leaf)));
            for o in &t.a_text {
                assert!(!oracle.is_proper_ancestor(a, idx(o)));
            }
            assert!(!t.a_text.is_empty());
        }
    }
    assert!(nonempty > 30, "random graphs too sparse to exercise selection: {nonempty}");
}
