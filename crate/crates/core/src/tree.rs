//! Taxonomic-tree typology: exhaustive enumeration of binary question
//! trees under a minimum group size, constraint filters, and selection by
//! leaf-size variance.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryAnswers, SurveyDataset};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_LEAF_GROW: usize = 40;
pub const DEFAULT_MIN_LEAF_FILTER: usize = 51;
pub const DEFAULT_TREE_CAP: usize = 1_000_000;

/// Preorder token; a split is followed by its No subtree, then its Yes
/// subtree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Token {
    Split(u8),
    Leaf(u32),
}

/// Nested form used for reports: `{question, no, yes}` or `{leaf, count}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        question: String,
        no: Box<TreeNode>,
        yes: Box<TreeNode>,
    },
    Leaf {
        leaf: String,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TaxonomicTree {
    questions: Arc<Vec<String>>,
    tokens: Vec<Token>,
}

impl TaxonomicTree {
    /// Build from a nested description; leaf counts are taken as given.
    pub fn from_node(questions: &[String], node: &TreeNode) -> Result<Self> {
        fn walk(q: &[String], node: &TreeNode, out: &mut Vec<Token>) -> Result<()> {
            match node {
                TreeNode::Leaf { count, .. } => out.push(Token::Leaf(*count as u32)),
                TreeNode::Split { question, no, yes } => {
                    let i = q
                        .iter()
                        .position(|x| x == question)
                        .ok_or_else(|| Error::UnknownQuestion(question.clone()))?;
                    out.push(Token::Split(i as u8));
                    walk(q, no, out)?;
                    walk(q, yes, out)?;
                }
            }
            Ok(())
        }
        let mut tokens = Vec::new();
        walk(questions, node, &mut tokens)?;
        let tree = TaxonomicTree {
            questions: Arc::new(questions.to_vec()),
            tokens,
        };
        if tree.has_repeated_path_question() {
            return Err(Error::InvalidInput("a question repeats on a root-to-leaf path".into()));
        }
        Ok(tree)
    }

    /// Single-leaf tree holding all `n` respondents.
    pub fn trivial(questions: &[String], n: usize) -> Self {
        TaxonomicTree {
            questions: Arc::new(questions.to_vec()),
            tokens: vec![Token::Leaf(n as u32)],
        }
    }

    /// Recount leaves by routing every respondent of `ds`.
    pub fn recount(&self, ds: &SurveyDataset) -> Result<Self> {
        let mut counts = vec![0u32; self.leaf_count()];
        for r in ds.records() {
            counts[self.route_index(&r)?] += 1;
        }
        let mut it = counts.into_iter();
        let tokens = self
            .tokens
            .iter()
            .map(|t| match t {
                Token::Leaf(_) => Token::Leaf(it.next().unwrap()),
                s => *s,
            })
            .collect();
        Ok(TaxonomicTree {
            questions: self.questions.clone(),
            tokens,
        })
    }

    pub fn questions(&self) -> &[String] {
        &self.questions
    }

    pub fn leaf_count(&self) -> usize {
        self.tokens.iter().filter(|t| matches!(t, Token::Leaf(_))).count()
    }

    /// Leaf member counts in preorder (No before Yes); leaf `i` is `T{i+1}`.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Leaf(c) => Some(*c as usize),
                _ => None,
            })
            .collect()
    }

    pub fn leaf_labels(&self) -> Vec<String> {
        (1..=self.leaf_count()).map(|i| format!("T{i}")).collect()
    }

    /// Split question ids in preorder.
    pub fn split_questions(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Token::Split(q) => Some(self.questions[*q as usize].as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.leaf_counts().iter().sum()
    }

    /// Population variance of leaf counts.
    pub fn leaf_variance(&self) -> f64 {
        let (num, den) = self.variance_ratio();
        num as f64 / den as f64
    }

    /// Variance as the exact ratio `(m Σc² - (Σc)²) / m²`.
    fn variance_ratio(&self) -> (u128, u128) {
        let counts = self.leaf_counts();
        let m = counts.len() as u128;
        let s: u128 = counts.iter().map(|&c| c as u128).sum();
        let s2: u128 = counts.iter().map(|&c| (c as u128) * (c as u128)).sum();
        (m * s2 - s * s, m * m)
    }

    pub fn to_node(&self) -> TreeNode {
        fn build(t: &TaxonomicTree, pos: &mut usize, leaf: &mut usize) -> TreeNode {
            let tok = t.tokens[*pos];
            *pos += 1;
            match tok {
                Token::Leaf(c) => {
                    *leaf += 1;
                    TreeNode::Leaf {
                        leaf: format!("T{leaf}"),
                        count: c as usize,
                    }
                }
                Token::Split(q) => {
                    let no = build(t, pos, leaf);
                    let yes = build(t, pos, leaf);
                    TreeNode::Split {
                        question: t.questions[q as usize].clone(),
                        no: Box::new(no),
                        yes: Box::new(yes),
                    }
                }
            }
        }
        build(self, &mut 0, &mut 0)
    }

    /// Canonical one-line serialization, e.g. `(q1 [40] (q2 [30] [30]))`.
    pub fn canonical(&self) -> String {
        fn write(t: &TaxonomicTree, pos: &mut usize, out: &mut String) {
            let tok = t.tokens[*pos];
            *pos += 1;
            match tok {
                Token::Leaf(c) => out.push_str(&format!("[{c}]")),
                Token::Split(q) => {
                    out.push('(');
                    out.push_str(&t.questions[q as usize]);
                    out.push(' ');
                    write(t, pos, out);
                    out.push(' ');
                    write(t, pos, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        write(self, &mut 0, &mut s);
        s
    }

    fn subtree_end(&self, start: usize) -> usize {
        let mut need = 1usize;
        let mut pos = start;
        while need > 0 {
            match self.tokens[pos] {
                Token::Split(_) => need += 1,
                Token::Leaf(_) => need -= 1,
            }
            pos += 1;
        }
        pos
    }

    /// Zero-based preorder index of the leaf a respondent routes to.
    pub fn route_index<A: BinaryAnswers + ?Sized>(&self, respondent: &A) -> Result<usize> {
        let mut pos = 0;
        let mut leaf_index = 0;
        loop {
            match self.tokens[pos] {
                Token::Leaf(_) => return Ok(leaf_index),
                Token::Split(q) => {
                    let qid = &self.questions[q as usize];
                    let ans = respondent.binary(qid).ok_or_else(|| Error::UnknownQuestion(qid.clone()))?;
                    if ans {
                        let no_end = self.subtree_end(pos + 1);
                        leaf_index += self.tokens[pos + 1..no_end]
                            .iter()
                            .filter(|t| matches!(t, Token::Leaf(_)))
                            .count();
                        pos = no_end;
                    } else {
                        pos += 1;
                    }
                }
            }
        }
    }

    fn has_repeated_path_question(&self) -> bool {
        fn check(t: &TaxonomicTree, pos: &mut usize, path: &mut Vec<u8>) -> bool {
            let tok = t.tokens[*pos];
            *pos += 1;
            match tok {
                Token::Leaf(_) => false,
                Token::Split(q) => {
                    if path.contains(&q) {
                        return true;
                    }
                    path.push(q);
                    let bad = check(t, pos, path) || check(t, pos, path);
                    path.pop();
                    bad
                }
            }
        }
        check(self, &mut 0, &mut Vec::new())
    }

    /// True when every root-to-leaf path uses distinct questions.
    pub fn paths_are_simple(&self) -> bool {
        !self.has_repeated_path_question()
    }
}

/// Route a respondent from the root to a leaf label `T{i}`.
pub fn assign_tree_class<A: BinaryAnswers + ?Sized>(respondent: &A, tree: &TaxonomicTree) -> Result<String> {
    Ok(format!("T{}", tree.route_index(respondent)? + 1))
}

pub fn assign_all(ds: &SurveyDataset, tree: &TaxonomicTree) -> Result<Vec<(String, String)>> {
    ds.records()
        .map(|r| Ok((r.id().to_string(), assign_tree_class(&r, tree)?)))
        .collect()
}

pub fn assignments_csv(rows: &[(String, String)]) -> String {
    let mut out = String::from("respondent_id,leaf\n");
    for (id, l) in rows {
        out.push_str(&format!("{id},{l}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConstraints {
    pub min_leaf_grow: usize,
    pub min_leaf_filter: usize,
    pub max_leaf_filter: usize,
    #[serde(default)]
    pub excluded_questions: Vec<String>,
}

impl TreeConstraints {
    /// 40 / 51 / ceil(n/3), no exclusions.
    pub fn defaults_for(n: usize) -> Self {
        TreeConstraints {
            min_leaf_grow: DEFAULT_MIN_LEAF_GROW,
            min_leaf_filter: DEFAULT_MIN_LEAF_FILTER,
            max_leaf_filter: n.div_ceil(3),
            excluded_questions: Vec::new(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.min_leaf_grow < 1 {
            return Err(Error::Config("min_leaf_grow must be at least 1".into()));
        }
        if self.min_leaf_filter < self.min_leaf_grow {
            return Err(Error::Config("min_leaf_filter must be at least min_leaf_grow".into()));
        }
        if self.max_leaf_filter > n {
            return Err(Error::Config(format!("max_leaf_filter {} exceeds n = {n}", self.max_leaf_filter)));
        }
        Ok(())
    }
}

/// Number of candidates left after each pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub enumerated: usize,
    pub min_leaf: Option<usize>,
    pub max_leaf: Option<usize>,
    pub exclusion: Option<usize>,
}

impl StageCounts {
    pub fn as_vec(&self) -> Vec<usize> {
        std::iter::once(Some(self.enumerated))
            .chain([self.min_leaf, self.max_leaf, self.exclusion])
            .flatten()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeCandidateSet {
    pub trees: Vec<TaxonomicTree>,
    pub stage_counts: StageCounts,
}

#[derive(Debug, Clone)]
pub struct EnumerateOptions {
    pub cap: usize,
}

impl Default for EnumerateOptions {
    fn default() -> Self {
        EnumerateOptions { cap: DEFAULT_TREE_CAP }
    }
}

type Group = (u32, u32); // (used question mask, fixed answer bits)

struct Enumerator<'a> {
    bits: &'a [u32],
    k: usize,
    min_leaf: usize,
    sizes: HashMap<Group, usize>,
    counts: HashMap<Group, u128>,
    trees: HashMap<Group, Arc<Vec<Vec<Token>>>>,
}

impl<'a> Enumerator<'a> {
    fn size(&mut self, g: Group) -> usize {
        if let Some(&s) = self.sizes.get(&g) {
            return s;
        }
        let s = self.bits.iter().filter(|&&b| b & g.0 == g.1).count();
        self.sizes.insert(g, s);
        s
    }

    fn children(&mut self, g: Group, q: usize) -> Option<(Group, Group)> {
        let bit = 1u32 << q;
        if g.0 & bit != 0 {
            return None;
        }
        let no = (g.0 | bit, g.1);
        let yes = (g.0 | bit, g.1 | bit);
        (self.size(no) >= self.min_leaf && self.size(yes) >= self.min_leaf).then_some((no, yes))
    }

    fn count(&mut self, g: Group) -> u128 {
        if let Some(&c) = self.counts.get(&g) {
            return c;
        }
        let mut total: u128 = 1;
        for q in 0..self.k {
            if let Some((no, yes)) = self.children(g, q) {
                total = total.saturating_add(self.count(no).saturating_mul(self.count(yes)));
            }
        }
        self.counts.insert(g, total);
        total
    }

    fn trees(&mut self, g: Group) -> Arc<Vec<Vec<Token>>> {
        if let Some(t) = self.trees.get(&g) {
            return t.clone();
        }
        let mut out = vec![vec![Token::Leaf(self.size(g) as u32)]];
        for q in 0..self.k {
            if let Some((no, yes)) = self.children(g, q) {
                let (nt, yt) = (self.trees(no), self.trees(yes));
                out.extend(product(q, &nt, &yt));
            }
        }
        let out = Arc::new(out);
        self.trees.insert(g, out.clone());
        out
    }
}

fn product(q: usize, no: &[Vec<Token>], yes: &[Vec<Token>]) -> Vec<Vec<Token>> {
    let mut out = Vec::with_capacity(no.len() * yes.len());
    for a in no {
        for b in yes {
            let mut t = Vec::with_capacity(1 + a.len() + b.len());
            t.push(Token::Split(q as u8));
            t.extend_from_slice(a);
            t.extend_from_slice(b);
            out.push(t);
        }
    }
    out
}

/// Every distinct tree obtained by recursively stopping or splitting a
/// group on an unused question, where a split is admissible only if both
/// parts have at least `min_leaf_grow` members. The single-leaf tree is
/// included. Output order is canonical: trivial tree first, then by root
/// question, No subtree, Yes subtree.
pub fn enumerate_trees(
    ds: &SurveyDataset,
    questions: &[String],
    min_leaf_grow: usize,
    opts: &EnumerateOptions,
) -> Result<TreeCandidateSet> {
    if questions.is_empty() {
        return Err(Error::InvalidInput("tree enumeration needs at least one question".into()));
    }
    if questions.len() > 32 {
        return Err(Error::InvalidInput("tree enumeration supports at most 32 questions".into()));
    }
    if min_leaf_grow < 1 {
        return Err(Error::InvalidInput("min_leaf_grow must be at least 1".into()));
    }
    let cols: Vec<&[bool]> = questions.iter().map(|q| ds.binary_column(q)).collect::<Result<_>>()?;
    let bits: Vec<u32> = (0..ds.n())
        .map(|r| cols.iter().enumerate().fold(0u32, |acc, (i, c)| acc | ((c[r] as u32) << i)))
        .collect();
    let mut en = Enumerator {
        bits: &bits,
        k: questions.len(),
        min_leaf: min_leaf_grow,
        sizes: HashMap::new(),
        counts: HashMap::new(),
        trees: HashMap::new(),
    };
    let root: Group = (0, 0);
    let total = en.count(root);
    if total > opts.cap as u128 {
        return Err(Error::TooManyTrees {
            count: total.to_string(),
            cap: opts.cap,
        });
    }

    // child tree lists are built once, the root products fan out per question
    let mut root_parts = Vec::new();
    for q in 0..questions.len() {
        if let Some((no, yes)) = en.children(root, q) {
            root_parts.push((q, en.trees(no), en.trees(yes)));
        }
    }
    let qarc = Arc::new(questions.to_vec());
    let mut trees = vec![TaxonomicTree {
        questions: qarc.clone(),
        tokens: vec![Token::Leaf(ds.n() as u32)],
    }];
    let products: Vec<Vec<Vec<Token>>> = root_parts
        .par_iter()
        .map(|(q, no, yes)| product(*q, no, yes))
        .collect();
    trees.extend(products.into_iter().flatten().map(|tokens| TaxonomicTree {
        questions: qarc.clone(),
        tokens,
    }));
    debug_assert_eq!(trees.len() as u128, total);
    let enumerated = trees.len();
    Ok(TreeCandidateSet {
        trees,
        stage_counts: StageCounts {
            enumerated,
            ..Default::default()
        },
    })
}

/// Apply, in order: minimum leaf size, maximum leaf size, question
/// exclusion. Stage counts are recorded after each.
pub fn filter_trees(cands: &TreeCandidateSet, c: &TreeConstraints) -> Result<TreeCandidateSet> {
    let after_min: Vec<&TaxonomicTree> = cands
        .trees
        .iter()
        .filter(|t| t.leaf_counts().iter().all(|&x| x >= c.min_leaf_filter))
        .collect();
    let after_max: Vec<&TaxonomicTree> = after_min
        .iter()
        .copied()
        .filter(|t| t.leaf_counts().iter().all(|&x| x <= c.max_leaf_filter))
        .collect();
    let excluded: BTreeSet<&str> = c.excluded_questions.iter().map(String::as_str).collect();
    let survivors: Vec<TaxonomicTree> = after_max
        .iter()
        .filter(|t| t.split_questions().iter().all(|q| !excluded.contains(q)))
        .map(|t| (*t).clone())
        .collect();
    let stage_counts = StageCounts {
        enumerated: cands.stage_counts.enumerated,
        min_leaf: Some(after_min.len()),
        max_leaf: Some(after_max.len()),
        exclusion: Some(survivors.len()),
    };
    log::info!("tree filter stage counts: {:?}", stage_counts.as_vec());
    if survivors.is_empty() {
        return Err(Error::NoSurvivingTrees {
            stage_counts: stage_counts.as_vec(),
        });
    }
    Ok(TreeCandidateSet {
        trees: survivors,
        stage_counts,
    })
}

fn selection_order(a: &TaxonomicTree, b: &TaxonomicTree) -> Ordering {
    let (an, ad) = a.variance_ratio();
    let (bn, bd) = b.variance_ratio();
    (an * bd)
        .cmp(&(bn * ad))
        .then_with(|| a.leaf_count().cmp(&b.leaf_count()))
        .then_with(|| a.split_questions().cmp(&b.split_questions()))
        .then_with(|| a.canonical().cmp(&b.canonical()))
}

/// Candidate with the smallest leaf-count variance; ties go to fewer
/// leaves, then the smaller preorder sequence of split question ids.
pub fn select_tree(cands: &TreeCandidateSet) -> Result<TaxonomicTree> {
    cands
        .trees
        .iter()
        .min_by(|a, b| selection_order(a, b))
        .cloned()
        .ok_or_else(|| Error::InvalidInput("no candidate trees".into()))
}

/// Candidates sorted by the selection order (best first).
pub fn rank_trees(cands: &TreeCandidateSet) -> Vec<&TaxonomicTree> {
    let mut v: Vec<&TaxonomicTree> = cands.trees.iter().collect();
    v.sort_by(|a, b| selection_order(a, b));
    v
}

#[derive(Serialize)]
struct TreeReport {
    rank: usize,
    leaf_counts: Vec<usize>,
    leaf_variance: f64,
    tree: TreeNode,
}

/// trees.json body: ranked candidates plus stage counts.
pub fn trees_json(cands: &TreeCandidateSet) -> serde_json::Value {
    let trees: Vec<TreeReport> = rank_trees(cands)
        .into_iter()
        .enumerate()
        .map(|(i, t)| TreeReport {
            rank: i + 1,
            leaf_counts: t.leaf_counts(),
            leaf_variance: t.leaf_variance(),
            tree: t.to_node(),
        })
        .collect();
    serde_json::json!({
        "stage_counts": cands.stage_counts,
        "trees": trees,
    })
}

pub fn tree_json(tree: &TaxonomicTree) -> serde_json::Value {
    serde_json::json!({
        "leaf_labels": tree.leaf_labels(),
        "leaf_counts": tree.leaf_counts(),
        "leaf_variance": tree.leaf_variance(),
        "tree": tree.to_node(),
    })
}
