#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use typogen::dataset::{Answer, QuestionDef, QuestionRole, SurveyDataset};
use typogen::fixture::{survey_fixture_spec, FixtureSpec};
use typogen::modeling::Outcome;
use typogen::psychometrics::PredictorTable;
use typogen::tree::TreeNode;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn workspace_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// The reference head only: fifteen patterns, 435 respondents.
pub fn head_fixture_spec() -> FixtureSpec {
    let full = survey_fixture_spec();
    FixtureSpec {
        seed: full.seed,
        id_prefix: full.id_prefix,
        questions: full.questions,
        head: full.head,
        tail: None,
        extra_binary: vec![],
        latent: vec![],
        items: vec![],
        numeric: vec![],
        categorical: vec![],
    }
}

pub fn qnames(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("q{i}")).collect()
}

/// Dataset of typology questions q1..qk from answer bitmasks (bit i = q{i+1}).
pub fn dataset_from_bits(k: usize, rows: &[u32]) -> SurveyDataset {
    let questions: Vec<QuestionDef> = qnames(k).iter().map(|q| QuestionDef::typology(q)).collect();
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, &b)| (format!("r{r}"), (0..k).map(|i| Answer::Binary(b >> i & 1 == 1)).collect()))
        .collect();
    SurveyDataset::from_rows(questions, rows).unwrap()
}

pub fn random_bits(rng: &mut ChaCha8Rng, k: usize, n: usize) -> Vec<u32> {
    let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.15..0.85)).collect();
    (0..n)
        .map(|_| (0..k).fold(0u32, |acc, i| acc | (u32::from(rng.random_bool(p[i])) << i)))
        .collect()
}

/// Tree as found by the oracle: canonical string, leaf counts in preorder,
/// split question indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleTree {
    pub repr: String,
    pub leaves: Vec<usize>,
    pub splits: Vec<usize>,
}

/// Every tree reachable by stopping or splitting on an unused question
/// where both parts have at least `min` rows. Plain recursion, no sharing.
pub fn oracle_trees(rows: &[u32], used: u32, k: usize, min: usize) -> Vec<OracleTree> {
    let mut out = vec![OracleTree {
        repr: format!("L{}", rows.len()),
        leaves: vec![rows.len()],
        splits: vec![],
    }];
    for q in 0..k {
        if used >> q & 1 == 1 {
            continue;
        }
        let no: Vec<u32> = rows.iter().copied().filter(|r| r >> q & 1 == 0).collect();
        let yes: Vec<u32> = rows.iter().copied().filter(|r| r >> q & 1 == 1).collect();
        if no.len() < min || yes.len() < min {
            continue;
        }
        let used = used | 1 << q;
        let left = oracle_trees(&no, used, k, min);
        let right = oracle_trees(&yes, used, k, min);
        for a in &left {
            for b in &right {
                let mut splits = vec![q];
                splits.extend(&a.splits);
                splits.extend(&b.splits);
                out.push(OracleTree {
                    repr: format!("S{q}({})({})", a.repr, b.repr),
                    leaves: a.leaves.iter().chain(&b.leaves).copied().collect(),
                    splits,
                });
            }
        }
    }
    out
}

pub struct OracleFiltered {
    pub trees: Vec<OracleTree>,
    pub stage_counts: [usize; 4],
}

pub fn oracle_filter(all: &[OracleTree], min: usize, max: usize, excluded: &[usize]) -> OracleFiltered {
    let a: Vec<&OracleTree> = all.iter().filter(|t| t.leaves.iter().all(|&c| c >= min)).collect();
    let b: Vec<&OracleTree> = a.iter().copied().filter(|t| t.leaves.iter().all(|&c| c <= max)).collect();
    let c: Vec<OracleTree> = b
        .iter()
        .filter(|t| t.splits.iter().all(|s| !excluded.contains(s)))
        .map(|t| (*t).clone())
        .collect();
    OracleFiltered {
        stage_counts: [all.len(), a.len(), b.len(), c.len()],
        trees: c,
    }
}

/// Same canonical string as the oracle, from the library's nested form.
pub fn node_repr(node: &TreeNode, questions: &[String]) -> String {
    match node {
        TreeNode::Leaf { count, .. } => format!("L{count}"),
        TreeNode::Split { question, no, yes } => {
            let q = questions.iter().position(|x| x == question).unwrap();
            format!("S{q}({})({})", node_repr(no, questions), node_repr(yes, questions))
        }
    }
}

pub fn population_variance(xs: &[usize]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<usize>() as f64 / n;
    xs.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n
}

/// Synthetic multinomial data: `informative` predictors with nonzero
/// effects, `noise` predictors with none, classes A (reference), B, C.
pub struct LogitData {
    pub table: PredictorTable,
    pub outcome: Outcome,
    pub informative: Vec<String>,
    pub noise: Vec<String>,
}

pub fn logit_data(seed: u64, n: usize) -> LogitData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let informative: Vec<String> = (1..=5).map(|i| format!("x{i}")).collect();
    let noise: Vec<String> = (1..=5).map(|i| format!("z{i}")).collect();
    // class B and C effects per informative predictor
    let beta = [[0.9, -0.6], [-0.8, 0.5], [0.7, 0.9], [0.0, -1.0], [0.6, 0.0]];
    let x: Vec<Vec<f64>> = (0..10).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut eta = [0.0, 0.2, -0.1];
        for (j, b) in beta.iter().enumerate() {
            eta[1] += b[0] * x[j][i];
            eta[2] += b[1] * x[j][i];
        }
        let e: Vec<f64> = eta.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let u: f64 = rng.random::<f64>() * s;
        let c = if u < e[0] {
            "A"
        } else if u < e[0] + e[1] {
            "B"
        } else {
            "C"
        };
        labels.push(Some(c));
    }
    let mut table = PredictorTable::new((0..n).map(|i| format!("r{i}")).collect());
    for (name, col) in informative.iter().chain(&noise).zip(x) {
        table.push(name, col).unwrap();
    }
    let outcome = Outcome::new("cls", vec!["A".into(), "B".into(), "C".into()], &labels).unwrap();
    LogitData {
        table,
        outcome,
        informative,
        noise,
    }
}

/// Generator loadings for the two-factor recovery check (6 items).
pub const TWO_FACTOR_LOADINGS: [[f64; 2]; 6] = [[0.8, 0.0], [0.7, 0.1], [0.75, 0.0], [0.0, 0.8], [0.1, 0.7], [0.0, 0.65]];

/// Numeric items i1..i6 drawn from two independent standard-normal factors.
pub fn two_factor_dataset(seed: u64, n: usize) -> SurveyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<String> = (1..=6).map(|i| format!("i{i}")).collect();
    let questions: Vec<QuestionDef> = items.iter().map(|i| QuestionDef::numeric(i, QuestionRole::ScaleItem)).collect();
    let rows = (0..n)
        .map(|r| {
            let f: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let answers = TWO_FACTOR_LOADINGS
                .iter()
                .map(|l| {
                    let h2 = l[0] * l[0] + l[1] * l[1];
                    let e: f64 = rng.sample(StandardNormal);
                    Answer::Num(l[0] * f[0] + l[1] * f[1] + (1.0 - h2).sqrt() * e)
                })
                .collect();
            (format!("r{r}"), answers)
        })
        .collect();
    SurveyDataset::from_rows(questions, rows).unwrap()
}

/// Hand formula: (k/(k-1)) * (1 - sum of item variances / variance of total).
pub fn hand_alpha(cols: &[Vec<f64>]) -> f64 {
    fn var(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    }
    let k = cols.len() as f64;
    let n = cols[0].len();
    let total: Vec<f64> = (0..n).map(|i| cols.iter().map(|c| c[i]).sum()).collect();
    let items: f64 = cols.iter().map(|c| var(c)).sum();
    k / (k - 1.0) * (1.0 - items / var(&total))
}

/// Count of (pattern code -> respondents) for a list of answer vectors.
pub fn pattern_counts(rows: &[Vec<bool>]) -> BTreeMap<Vec<bool>, usize> {
    let mut m = BTreeMap::new();
    for r in rows {
        *m.entry(r.clone()).or_insert(0) += 1;
    }
    m
}
