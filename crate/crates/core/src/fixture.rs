//! Seeded synthesis of survey datasets that reproduce reference
//! aggregates: exact head-pattern counts, tree leaf totals filled from the
//! long tail, a target correlation structure among the typology questions,
//! and latent-factor driven Likert items and demographics.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Answer, QuestionDef, QuestionRole, SurveyDataset};
use crate::error::{Error, Result};
use crate::pattern::parse_pattern_code;
use crate::tree::{TaxonomicTree, TreeNode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPattern {
    /// Y/N code over `FixtureSpec::questions`.
    pub pattern: String,
    pub count: usize,
}

/// Long-tail respondents routed through a tree so that leaf totals hit the
/// counts written on the tree's leaves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSpec {
    pub tree: TreeNode,
    #[serde(default = "default_max_per_pattern")]
    pub max_per_pattern: usize,
    /// Target number of distinct patterns over head and tail.
    #[serde(default)]
    pub distinct_patterns: Option<usize>,
    /// Target phi matrix over `FixtureSpec::questions`.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_search_iterations")]
    pub search_iterations: usize,
    /// Extra weight on selected correlation entries.
    #[serde(default)]
    pub emphasis: Vec<Emphasis>,
    /// Tail patterns with fixed counts; the search fills the rest.
    #[serde(default)]
    pub pinned: Vec<HeadPattern>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emphasis {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

fn default_max_per_pattern() -> usize {
    5
}

fn default_search_iterations() -> usize {
    40_000
}

/// A binary question outside the pattern set with a fixed Yes count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraBinary {
    pub id: String,
    pub yes: usize,
    #[serde(default)]
    pub text: String,
}

/// Standard-normal latent trait, shifted per tree leaf label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub name: String,
    #[serde(default)]
    pub shifts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSpec {
    pub id: String,
    pub min: i64,
    pub max: i64,
    pub loadings: BTreeMap<String, f64>,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericSpec {
    pub id: String,
    pub mean: f64,
    pub sd: f64,
    #[serde(default)]
    pub loadings: BTreeMap<String, f64>,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub round: bool,
    #[serde(default = "default_numeric_role")]
    pub role: QuestionRole,
}

fn default_numeric_role() -> QuestionRole {
    QuestionRole::Demographic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub id: String,
    pub levels: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
    pub questions: Vec<String>,
    pub head: Vec<HeadPattern>,
    #[serde(default)]
    pub tail: Option<TailSpec>,
    #[serde(default)]
    pub extra_binary: Vec<ExtraBinary>,
    #[serde(default)]
    pub latent: Vec<LatentSpec>,
    #[serde(default)]
    pub items: Vec<ItemSpec>,
    #[serde(default)]
    pub numeric: Vec<NumericSpec>,
    #[serde(default)]
    pub categorical: Vec<CategoricalSpec>,
}

fn default_id_prefix() -> String {
    "R".into()
}

const SURVEY_FIXTURE: &str = include_str!("../fixtures/survey_fixture.toml");

/// Bundled spec for the social-media non-use survey fixture.
pub fn survey_fixture_spec() -> FixtureSpec {
    toml::from_str(SURVEY_FIXTURE).expect("bundled fixture spec parses")
}

fn bits(answers: &[bool]) -> u32 {
    answers.iter().enumerate().fold(0, |acc, (i, &a)| acc | (u32::from(a) << i))
}

/// Pattern counts and running phi statistics for the tail search.
struct PhiState {
    q: usize,
    n: f64,
    yes: Vec<f64>,
    joint: Vec<f64>,
}

impl PhiState {
    fn new(q: usize, counts: &HashMap<u32, usize>) -> Self {
        let mut s = PhiState {
            q,
            n: 0.0,
            yes: vec![0.0; q],
            joint: vec![0.0; q * q],
        };
        for (&p, &c) in counts {
            s.add(p, c as f64);
        }
        s
    }

    fn add(&mut self, p: u32, w: f64) {
        self.n += w;
        for i in 0..self.q {
            if p >> i & 1 == 1 {
                self.yes[i] += w;
                for j in 0..self.q {
                    if p >> j & 1 == 1 {
                        self.joint[i * self.q + j] += w;
                    }
                }
            }
        }
    }

    fn cost(&self, target: &[Vec<f64>], weight: &[Vec<f64>]) -> f64 {
        let mut c = 0.0;
        for i in 0..self.q {
            for j in i + 1..self.q {
                let (yi, yj) = (self.yes[i], self.yes[j]);
                let den = (yi * (self.n - yi) * yj * (self.n - yj)).sqrt();
                if den == 0.0 || !target[i][j].is_finite() {
                    continue;
                }
                let phi = (self.n * self.joint[i * self.q + j] - yi * yj) / den;
                c += weight[i][j] * (phi - target[i][j]).powi(2);
            }
        }
        c
    }
}

/// Distribute the tail: every leaf's deficit is filled with non-head
/// patterns that route to it, at most `max_per_pattern` respondents each,
/// then a seeded local search moves respondents between same-leaf patterns
/// to approach the correlation and distinct-pattern targets.
fn synthesize_tail(
    spec: &FixtureSpec,
    tail: &TailSpec,
    head: &HashMap<u32, usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(u32, usize)>> {
    let q = spec.questions.len();
    let tree = TaxonomicTree::from_node(&spec.questions, &tail.tree)
        .map_err(|e| Error::Config(format!("fixture tree: {e}")))?;
    let targets = tree.leaf_counts();
    let route = |p: u32| -> Result<usize> {
        let answers: HashMap<String, bool> =
            spec.questions.iter().enumerate().map(|(i, id)| (id.clone(), p >> i & 1 == 1)).collect();
        tree.route_index(&answers)
    };
    let min_head = head.values().copied().min().unwrap_or(usize::MAX);
    if tail.max_per_pattern == 0 || tail.max_per_pattern >= min_head {
        return Err(Error::Config(format!(
            "max_per_pattern {} must be in 1..{min_head} so tail patterns stay below the head",
            tail.max_per_pattern
        )));
    }

    let mut from_head = vec![0usize; targets.len()];
    for (&p, &c) in head {
        from_head[route(p)?] += c;
    }
    let mut candidates: Vec<Vec<u32>> = vec![Vec::new(); targets.len()];
    for p in 0..(1u32 << q) {
        if !head.contains_key(&p) {
            candidates[route(p)?].push(p);
        }
    }
    let mut pinned: HashMap<u32, usize> = HashMap::new();
    for pin in &tail.pinned {
        let answers = parse_pattern_code(&pin.pattern)?;
        if answers.len() != q {
            return Err(Error::Config(format!("pinned pattern `{}` does not have {q} answers", pin.pattern)));
        }
        let p = bits(&answers);
        if head.contains_key(&p) || pin.count > tail.max_per_pattern || pinned.insert(p, pin.count).is_some() {
            return Err(Error::Config(format!(
                "pinned pattern `{}` must be a non-head pattern listed once with at most {} respondents",
                pin.pattern, tail.max_per_pattern
            )));
        }
        from_head[route(p)?] += pin.count;
    }
    let used = |p: u32, tc: &HashMap<u32, usize>| pinned.get(&p).copied().unwrap_or(0) + tc.get(&p).copied().unwrap_or(0);
    let mut deficit = Vec::with_capacity(targets.len());
    for (leaf, (&t, &h)) in targets.iter().zip(&from_head).enumerate() {
        if h > t {
            return Err(Error::Config(format!(
                "inconsistent aggregates: head and pinned patterns already put {h} respondents in T{} (target {t})",
                leaf + 1
            )));
        }
        let cap: usize = candidates[leaf].iter().map(|p| tail.max_per_pattern - pinned.get(p).copied().unwrap_or(0)).sum();
        if t - h > cap {
            return Err(Error::Config(format!(
                "inconsistent aggregates: T{} needs {} tail respondents but only {cap} fit",
                leaf + 1,
                t - h
            )));
        }
        deficit.push(t - h);
    }

    // initial fill: spread each deficit over shuffled candidates
    let mut tail_counts: HashMap<u32, usize> = HashMap::new();
    for (leaf, &d) in deficit.iter().enumerate() {
        let mut cands = candidates[leaf].clone();
        cands.shuffle(rng);
        let mut left = d;
        'fill: loop {
            for &p in &cands {
                if left == 0 {
                    break 'fill;
                }
                if used(p, &tail_counts) < tail.max_per_pattern {
                    *tail_counts.entry(p).or_insert(0) += 1;
                    left -= 1;
                }
            }
        }
    }

    if tail.correlation.is_some() || tail.distinct_patterns.is_some() {
        let target = tail.correlation.clone().unwrap_or_default();
        if tail.correlation.is_some() && (target.len() != q || target.iter().any(|r| r.len() != q)) {
            return Err(Error::Config(format!("correlation target must be {q} x {q}")));
        }
        let mut all = head.clone();
        for (&p, &c) in tail_counts.iter().chain(&pinned) {
            *all.entry(p).or_insert(0) += c;
        }
        let mut weight = vec![vec![1.0; q]; q];
        for e in &tail.emphasis {
            let pos = |id: &str| {
                spec.questions
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Config(format!("emphasis names unknown question `{id}`")))
            };
            let (i, j) = (pos(&e.a)?, pos(&e.b)?);
            if !(e.weight >= 0.0) {
                return Err(Error::Config("emphasis weight must be nonnegative".into()));
            }
            weight[i][j] = e.weight;
            weight[j][i] = e.weight;
        }
        let mut state = PhiState::new(q, &all);
        let distinct = |tc: &HashMap<u32, usize>| {
            head.len() + pinned.len() + tc.iter().filter(|&(p, &c)| c > 0 && !pinned.contains_key(p)).count()
        };
        let score = |state: &PhiState, d: usize| {
            let phi = if target.is_empty() { 0.0 } else { state.cost(&target, &weight) };
            let dp = tail.distinct_patterns.map_or(0.0, |t| (d as f64 - t as f64).powi(2) * 1e-3);
            phi + dp
        };
        let mut cur = score(&state, distinct(&tail_counts));
        let leaf_of: HashMap<u32, usize> = candidates
            .iter()
            .enumerate()
            .flat_map(|(l, ps)| ps.iter().map(move |&p| (p, l)))
            .collect();
        // annealing with a geometric temperature schedule; the best state
        // seen is kept
        let (t0, t1) = (1e-3f64, 1e-7f64);
        let iters = tail.search_iterations.max(1);
        let mut best = (cur, tail_counts.clone());
        for it in 0..iters {
            let temp = t0 * (t1 / t0).powf(it as f64 / iters as f64);
            let mut occupied: Vec<u32> = tail_counts.iter().filter(|(_, &c)| c > 0).map(|(&p, _)| p).collect();
            if occupied.is_empty() {
                break;
            }
            occupied.sort_unstable();
            let from = occupied[rng.random_range(0..occupied.len())];
            let cands = &candidates[leaf_of[&from]];
            let to = cands[rng.random_range(0..cands.len())];
            if to == from || used(to, &tail_counts) >= tail.max_per_pattern {
                continue;
            }
            state.add(from, -1.0);
            state.add(to, 1.0);
            *tail_counts.get_mut(&from).unwrap() -= 1;
            *tail_counts.entry(to).or_insert(0) += 1;
            let next = score(&state, distinct(&tail_counts));
            let u: f64 = rng.random();
            if next <= cur || u < ((cur - next) / temp).exp() {
                cur = next;
                if cur < best.0 {
                    best = (cur, tail_counts.clone());
                }
            } else {
                state.add(to, -1.0);
                state.add(from, 1.0);
                *tail_counts.get_mut(&to).unwrap() -= 1;
                *tail_counts.get_mut(&from).unwrap() += 1;
            }
        }
        cur = best.0;
        tail_counts = best.1;
        log::debug!("fixture tail search finished at cost {cur:.6}");
    }

    for (p, c) in pinned {
        *tail_counts.entry(p).or_insert(0) += c;
    }
    let mut out: Vec<(u32, usize)> = tail_counts.into_iter().filter(|&(_, c)| c > 0).collect();
    out.sort_unstable();
    Ok(out)
}

fn check_spec(spec: &FixtureSpec) -> Result<()> {
    let q = spec.questions.len();
    if q == 0 || q > 16 {
        return Err(Error::Config(format!("fixture needs 1..=16 pattern questions, got {q}")));
    }
    let mut ids = HashSet::new();
    let all_ids = spec
        .questions
        .iter()
        .chain(spec.extra_binary.iter().map(|e| &e.id))
        .chain(spec.items.iter().map(|i| &i.id))
        .chain(spec.numeric.iter().map(|i| &i.id))
        .chain(spec.categorical.iter().map(|i| &i.id));
    for id in all_ids {
        if !ids.insert(id.as_str()) {
            return Err(Error::Config(format!("fixture column `{id}` declared twice")));
        }
    }
    let latents: HashSet<&str> = spec.latent.iter().map(|l| l.name.as_str()).collect();
    for (id, loadings) in spec
        .items
        .iter()
        .map(|i| (&i.id, &i.loadings))
        .chain(spec.numeric.iter().map(|i| (&i.id, &i.loadings)))
    {
        if let Some(bad) = loadings.keys().find(|k| !latents.contains(k.as_str())) {
            return Err(Error::Config(format!("`{id}` loads on unknown latent `{bad}`")));
        }
        if loadings.values().map(|l| l * l).sum::<f64>() > 1.0 {
            return Err(Error::Config(format!("`{id}` has squared loadings above 1")));
        }
    }
    for item in &spec.items {
        if item.min >= item.max {
            return Err(Error::Config(format!("item `{}` needs min < max", item.id)));
        }
    }
    for c in &spec.categorical {
        if c.levels.is_empty() || c.levels.len() != c.weights.len() || c.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("categorical `{}` needs one nonnegative weight per level", c.id)));
        }
    }
    Ok(())
}

/// Schema of the synthesized file.
pub fn fixture_schema(spec: &FixtureSpec) -> Vec<QuestionDef> {
    let mut out: Vec<QuestionDef> = spec.questions.iter().map(|q| QuestionDef::typology(q)).collect();
    for e in &spec.extra_binary {
        let mut d = QuestionDef::typology(&e.id);
        d.text = e.text.clone();
        out.push(d);
    }
    for i in &spec.items {
        let mut d = QuestionDef::likert(&i.id, i.min, i.max);
        d.text = i.text.clone();
        out.push(d);
    }
    out.extend(spec.numeric.iter().map(|n| QuestionDef::numeric(&n.id, n.role)));
    out.extend(spec.categorical.iter().map(|c| QuestionDef::categorical(&c.id, QuestionRole::Demographic)));
    out
}

/// Build the dataset described by `spec`. Rows are shuffled with the
/// spec's seed; ids are `<prefix><row number>`.
pub fn synthesize_fixture(spec: &FixtureSpec) -> Result<SurveyDataset> {
    check_spec(spec)?;
    let q = spec.questions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut head: HashMap<u32, usize> = HashMap::new();
    let mut head_rows = Vec::new();
    for h in &spec.head {
        let answers = parse_pattern_code(&h.pattern)?;
        if answers.len() != q {
            return Err(Error::Config(format!("pattern `{}` does not have {q} answers", h.pattern)));
        }
        if h.count == 0 {
            return Err(Error::Config(format!("pattern `{}` has zero count", h.pattern)));
        }
        let p = bits(&answers);
        if head.insert(p, h.count).is_some() {
            return Err(Error::Config(format!("pattern `{}` listed twice", h.pattern)));
        }
        head_rows.push((p, h.count));
    }

    let mut patterns: Vec<u32> = Vec::new();
    for &(p, c) in &head_rows {
        patterns.extend(std::iter::repeat_n(p, c));
    }
    let tree = match &spec.tail {
        Some(t) => {
            for (p, c) in synthesize_tail(spec, t, &head, &mut rng)? {
                patterns.extend(std::iter::repeat_n(p, c));
            }
            Some(TaxonomicTree::from_node(&spec.questions, &t.tree)?)
        }
        None => None,
    };
    patterns.shuffle(&mut rng);
    let n = patterns.len();
    if n == 0 {
        return Err(Error::NoRespondents);
    }

    let leaf_labels: Vec<Option<String>> = patterns
        .iter()
        .map(|&p| {
            tree.as_ref()
                .map(|t| {
                    let answers: HashMap<String, bool> =
                        spec.questions.iter().enumerate().map(|(i, id)| (id.clone(), p >> i & 1 == 1)).collect();
                    t.route_index(&answers).map(|i| format!("T{}", i + 1))
                })
                .transpose()
        })
        .collect::<Result<_>>()?;

    let mut extra = Vec::with_capacity(spec.extra_binary.len());
    for e in &spec.extra_binary {
        if e.yes > n {
            return Err(Error::Config(format!("`{}` wants {} Yes answers from {n} respondents", e.id, e.yes)));
        }
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        let mut col = vec![false; n];
        for &r in &rows[..e.yes] {
            col[r] = true;
        }
        extra.push(col);
    }

    // latent traits per respondent
    let latent: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            spec.latent
                .iter()
                .map(|l| {
                    let shift = leaf_labels[r].as_ref().and_then(|lab| l.shifts.get(lab)).copied().unwrap_or(0.0);
                    shift + rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect();
    let latent_index: HashMap<&str, usize> = spec.latent.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let draw = |r: usize, loadings: &BTreeMap<String, f64>, rng: &mut ChaCha8Rng| -> f64 {
        let common: f64 = loadings.iter().map(|(k, l)| l * latent[r][latent_index[k.as_str()]]).sum();
        let ss: f64 = loadings.values().map(|l| l * l).sum();
        common + (1.0 - ss).max(0.0).sqrt() * rng.sample::<f64, _>(StandardNormal)
    };
    let items: Vec<Vec<i64>> = spec
        .items
        .iter()
        .map(|it| {
            let mid = (it.min + it.max) as f64 / 2.0;
            let spread = (it.max - it.min) as f64 / 4.0;
            (0..n)
                .map(|r| ((mid + spread * draw(r, &it.loadings, &mut rng)).round() as i64).clamp(it.min, it.max))
                .collect()
        })
        .collect();
    let numeric: Vec<Vec<f64>> = spec
        .numeric
        .iter()
        .map(|s| {
            (0..n)
                .map(|r| {
                    let mut v = s.mean + s.sd * draw(r, &s.loadings, &mut rng);
                    if s.round {
                        v = v.round();
                    }
                    if let Some(lo) = s.min {
                        v = v.max(lo);
                    }
                    if let Some(hi) = s.max {
                        v = v.min(hi);
                    }
                    v
                })
                .collect()
        })
        .collect();
    let categorical: Vec<Vec<String>> = spec
        .categorical
        .iter()
        .map(|c| {
            let total: f64 = c.weights.iter().sum();
            (0..n)
                .map(|_| {
                    let mut u = rng.random::<f64>() * total;
                    for (level, w) in c.levels.iter().zip(&c.weights) {
                        if u < *w {
                            return level.clone();
                        }
                        u -= w;
                    }
                    c.levels.last().unwrap().clone()
                })
                .collect()
        })
        .collect();

    let width = n.to_string().len().max(4);
    let rows = (0..n)
        .map(|r| {
            let mut answers: Vec<Answer> = (0..q).map(|i| Answer::Binary(patterns[r] >> i & 1 == 1)).collect();
            answers.extend(extra.iter().map(|c| Answer::Binary(c[r])));
            answers.extend(items.iter().map(|c| Answer::Int(c[r])));
            answers.extend(numeric.iter().map(|c| Answer::Num(c[r])));
            answers.extend(categorical.iter().map(|c| Answer::Cat(c[r].clone())));
            (format!("{}{:0width$}", spec.id_prefix, r + 1), answers)
        })
        .collect();
    SurveyDataset::from_rows(fixture_schema(spec), rows)
}
