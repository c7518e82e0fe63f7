//! Cross-typology comparison: class mapping from pattern classes to tree
//! leaves, rule-based typologies, and alignment of two reduced models'
//! odds ratios.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryAnswers, SurveyDataset};
use crate::error::{Error, Result};
use crate::modeling::{odds_ratios, MlogitFit};
use crate::pattern::PatternTypology;
use crate::tree::{assign_tree_class, TaxonomicTree};

/// Half-width of the band around 1 in which an odds ratio has no direction.
pub const NEUTRAL_BAND: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedClass {
    pub class: String,
    pub leaf: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypologyMapping {
    pub pairs: Vec<MappedClass>,
    /// Leaves that no pattern class routes to.
    pub unmapped_leaves: Vec<String>,
}

impl TypologyMapping {
    pub fn leaf_of(&self, class: &str) -> Option<&str> {
        self.pairs.iter().find(|p| p.class == class).map(|p| p.leaf.as_str())
    }

    pub fn classes_of(&self, leaf: &str) -> Vec<&str> {
        self.pairs.iter().filter(|p| p.leaf == leaf).map(|p| p.class.as_str()).collect()
    }
}

/// Route every class's answer vector through the tree.
pub fn map_typologies(pt: &PatternTypology, tree: &TaxonomicTree) -> Result<TypologyMapping> {
    for q in tree.split_questions() {
        if !pt.questions.iter().any(|p| p == q) {
            return Err(Error::InvalidInput(format!(
                "tree splits on `{q}`, which is not a pattern question"
            )));
        }
    }
    let pairs: Vec<MappedClass> = pt
        .classes
        .iter()
        .map(|c| {
            let answers: HashMap<String, bool> =
                pt.questions.iter().cloned().zip(c.pattern.answers.iter().copied()).collect();
            Ok(MappedClass {
                class: c.label.clone(),
                leaf: assign_tree_class(&answers, tree)?,
            })
        })
        .collect::<Result<_>>()?;
    let used: HashSet<&str> = pairs.iter().map(|p| p.leaf.as_str()).collect();
    let unmapped_leaves = tree.leaf_labels().into_iter().filter(|l| !used.contains(l.as_str())).collect();
    Ok(TypologyMapping { pairs, unmapped_leaves })
}

/// One ordered rule: a conjunction of `question = answer` literals. An
/// empty conjunction matches everyone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub label: String,
    #[serde(default)]
    pub when: BTreeMap<String, bool>,
}

impl Rule {
    pub fn is_catch_all(&self) -> bool {
        self.when.is_empty()
    }

    fn matches<A: BinaryAnswers + ?Sized>(&self, respondent: &A) -> Result<bool> {
        for (q, want) in &self.when {
            let got = respondent.binary(q).ok_or_else(|| Error::UnknownQuestion(q.clone()))?;
            if got != *want {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RuleList")]
pub struct RuleTypology {
    rules: Vec<Rule>,
}

#[derive(Deserialize)]
struct RuleList {
    rules: Vec<Rule>,
}

impl TryFrom<RuleList> for RuleTypology {
    type Error = Error;

    fn try_from(r: RuleList) -> Result<Self> {
        RuleTypology::new(r.rules)
    }
}

impl RuleTypology {
    /// First match wins; the last rule must be a catch-all and labels must
    /// be unique.
    pub fn new(rules: Vec<Rule>) -> Result<Self> {
        match rules.last() {
            Some(r) if r.is_catch_all() => {}
            _ => return Err(Error::Config("rule typology needs a final catch-all rule".into())),
        }
        let mut seen = HashSet::new();
        for r in &rules {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::Config(format!("duplicate rule label `{}`", r.label)));
            }
        }
        Ok(RuleTypology { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn labels(&self) -> Vec<String> {
        self.rules.iter().map(|r| r.label.clone()).collect()
    }

    /// Questions referenced by any rule.
    pub fn questions(&self) -> Vec<String> {
        let mut qs: Vec<String> = self.rules.iter().flat_map(|r| r.when.keys().cloned()).collect();
        qs.sort();
        qs.dedup();
        qs
    }
}

pub fn assign_rule_class<A: BinaryAnswers + ?Sized>(respondent: &A, rt: &RuleTypology) -> Result<String> {
    for r in &rt.rules {
        if r.matches(respondent)? {
            return Ok(r.label.clone());
        }
    }
    unreachable!("validated rule typologies end in a catch-all")
}

pub fn assign_all_rules(ds: &SurveyDataset, rt: &RuleTypology) -> Result<Vec<(String, String)>> {
    ds.records()
        .map(|r| Ok((r.id().to_string(), assign_rule_class(&r, rt)?)))
        .collect()
}

/// Odds ratios of one reduced model: `values[predictor][class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioTable {
    pub classes: Vec<String>,
    pub predictors: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl OddsRatioTable {
    pub fn from_fit(fit: &MlogitFit) -> Self {
        let or = odds_ratios(fit);
        OddsRatioTable {
            classes: fit.classes.clone(),
            predictors: fit.predictors.clone(),
            values: (0..fit.predictors.len())
                .map(|j| (0..fit.classes.len()).map(|c| or[(c, j)]).collect())
                .collect(),
        }
    }

    /// Parse the odds-ratio CSV layout: `predictor,<class>...[,significance]`.
    /// Significance markers attached to values (`1.38*`) are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("predictor") {
            return Err(Error::InvalidInput("odds-ratio table must start with a `predictor` column".into()));
        }
        let classes: Vec<String> = header.iter().skip(1).filter(|h| *h != "significance").map(String::from).collect();
        let mut predictors = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let name = rec.get(0).unwrap_or_default().to_string();
            let vals = (0..classes.len())
                .map(|c| {
                    let raw = rec.get(c + 1).unwrap_or_default();
                    raw.trim_end_matches('*').parse::<f64>().map_err(|_| Error::ParseCell {
                        row: row + 2,
                        column: classes[c].clone(),
                        value: raw.to_string(),
                        expected: "odds ratio".into(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            predictors.push(name);
            values.push(vals);
        }
        Ok(OddsRatioTable {
            classes,
            predictors,
            values,
        })
    }

    fn row(&self, predictor: &str) -> Option<&[f64]> {
        self.predictors.iter().position(|p| p == predictor).map(|i| self.values[i].as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionStatus {
    BothRetained,
    AOnly,
    BOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Every non-neutral OR above 1.
    Above,
    Below,
    Mixed,
    /// All ORs within the neutral band.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSide {
    pub direction: Direction,
    pub min_or: f64,
    pub max_or: f64,
    /// Count of ORs within the neutral band around 1.
    pub neutral: usize,
}

fn side(values: &[f64]) -> ModelSide {
    let neutral = values.iter().filter(|v| (*v - 1.0).abs() <= NEUTRAL_BAND).count();
    let above = values.iter().filter(|v| **v > 1.0 + NEUTRAL_BAND).count();
    let below = values.iter().filter(|v| **v < 1.0 - NEUTRAL_BAND).count();
    let direction = if neutral == values.len() {
        Direction::Neutral
    } else if above == values.len() {
        Direction::Above
    } else if below == values.len() {
        Direction::Below
    } else {
        Direction::Mixed
    };
    ModelSide {
        direction,
        min_or: values.iter().copied().fold(f64::INFINITY, f64::min),
        max_or: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        neutral,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorAlignment {
    pub predictor: String,
    pub status: RetentionStatus,
    pub a: Option<ModelSide>,
    pub b: Option<ModelSide>,
    /// Both retained and every OR in both models strictly on the same side
    /// of 1. `None` unless both retained.
    pub direction_agrees: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub model_a: String,
    pub model_b: String,
    pub predictors: Vec<PredictorAlignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping: Option<TypologyMapping>,
}

/// Classify every predictor of either model. Entries follow A's predictor
/// order, then B-only predictors in B's order.
pub fn alignment_report(
    name_a: &str,
    a: &OddsRatioTable,
    name_b: &str,
    b: &OddsRatioTable,
    mapping: Option<&TypologyMapping>,
) -> AlignmentReport {
    let mut predictors = Vec::new();
    for p in &a.predictors {
        let sa = side(a.row(p).unwrap());
        let entry = match b.row(p) {
            Some(rb) => {
                let sb = side(rb);
                let agrees = matches!(
                    (sa.direction, sb.direction),
                    (Direction::Above, Direction::Above) | (Direction::Below, Direction::Below)
                ) && sa.neutral == 0
                    && sb.neutral == 0;
                PredictorAlignment {
                    predictor: p.clone(),
                    status: RetentionStatus::BothRetained,
                    a: Some(sa),
                    b: Some(sb),
                    direction_agrees: Some(agrees),
                }
            }
            None => PredictorAlignment {
                predictor: p.clone(),
                status: RetentionStatus::AOnly,
                a: Some(sa),
                b: None,
                direction_agrees: None,
            },
        };
        predictors.push(entry);
    }
    for p in b.predictors.iter().filter(|p| a.row(p).is_none()) {
        predictors.push(PredictorAlignment {
            predictor: p.clone(),
            status: RetentionStatus::BOnly,
            a: None,
            b: Some(side(b.row(p).unwrap())),
            direction_agrees: None,
        });
    }
    AlignmentReport {
        model_a: name_a.to_string(),
        model_b: name_b.to_string(),
        predictors,
        mapping: mapping.cloned(),
    }
}

pub fn alignment_report_for_fits(
    name_a: &str,
    a: &MlogitFit,
    name_b: &str,
    b: &MlogitFit,
    mapping: Option<&TypologyMapping>,
) -> AlignmentReport {
    alignment_report(name_a, &OddsRatioTable::from_fit(a), name_b, &OddsRatioTable::from_fit(b), mapping)
}

impl AlignmentReport {
    pub fn entry(&self, predictor: &str) -> Option<&PredictorAlignment> {
        self.predictors.iter().find(|p| p.predictor == predictor)
    }

    /// Same comparison with the models' roles exchanged.
    pub fn swapped(&self) -> AlignmentReport {
        let mut predictors: Vec<PredictorAlignment> = self
            .predictors
            .iter()
            .map(|p| PredictorAlignment {
                predictor: p.predictor.clone(),
                status: match p.status {
                    RetentionStatus::AOnly => RetentionStatus::BOnly,
                    RetentionStatus::BOnly => RetentionStatus::AOnly,
                    s => s,
                },
                a: p.b.clone(),
                b: p.a.clone(),
                direction_agrees: p.direction_agrees,
            })
            .collect();
        predictors.sort_by_key(|p| p.status == RetentionStatus::BOnly);
        AlignmentReport {
            model_a: self.model_b.clone(),
            model_b: self.model_a.clone(),
            predictors,
            mapping: None,
        }
    }

    fn names(&self, f: impl Fn(&PredictorAlignment) -> bool) -> Vec<&str> {
        self.predictors.iter().filter(|p| f(p)).map(|p| p.predictor.as_str()).collect()
    }

    /// Markdown narrative: class mapping, alignments, divergences in
    /// direction, and predictors retained by only one model.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let (a, b) = (&self.model_a, &self.model_b);
        let _ = writeln!(s, "# Model comparison: {a} vs {b}\n");
        if let Some(m) = &self.mapping {
            let _ = writeln!(s, "## Class mapping\n\n| {a} class | {b} leaf |\n|---|---|");
            for p in &m.pairs {
                let _ = writeln!(s, "| {} | {} |", p.class, p.leaf);
            }
            if !m.unmapped_leaves.is_empty() {
                let _ = writeln!(s, "\nLeaves with no mapped class: {}.", m.unmapped_leaves.join(", "));
            }
            s.push('\n');
        }
        let fmt_side = |x: &Option<ModelSide>| {
            x.as_ref()
                .map(|v| format!("{:.2}–{:.2}", v.min_or, v.max_or))
                .unwrap_or_else(|| "—".into())
        };
        let list = |v: Vec<&str>| if v.is_empty() { "none".to_string() } else { v.join(", ") };

        let _ = writeln!(s, "## Alignments\n");
        let agree = self.names(|p| p.direction_agrees == Some(true));
        let _ = writeln!(s, "Retained in both models with the same direction: {}.\n", list(agree.clone()));
        for p in self.predictors.iter().filter(|p| p.direction_agrees == Some(true)) {
            let dir = match p.a.as_ref().unwrap().direction {
                Direction::Above => "raises",
                _ => "lowers",
            };
            let _ = writeln!(
                s,
                "- {}: {dir} the odds of every non-reference class in both models (OR {a} {}, {b} {}).",
                p.predictor,
                fmt_side(&p.a),
                fmt_side(&p.b)
            );
        }

        let _ = writeln!(s, "\n## Divergences\n");
        let opposite = self.names(|p| p.direction_agrees == Some(false));
        let _ = writeln!(s, "Retained in both models without a shared direction: {}.\n", list(opposite));
        for p in self.predictors.iter().filter(|p| p.direction_agrees == Some(false)) {
            let describe = |x: &ModelSide| match x.direction {
                Direction::Above => "above 1",
                Direction::Below => "below 1",
                Direction::Mixed => "on both sides of 1",
                Direction::Neutral => "at 1",
            };
            let _ = writeln!(
                s,
                "- {}: {a} ORs {} ({}), {b} ORs {} ({}).",
                p.predictor,
                describe(p.a.as_ref().unwrap()),
                fmt_side(&p.a),
                describe(p.b.as_ref().unwrap()),
                fmt_side(&p.b)
            );
        }
        let _ = writeln!(
            s,
            "\nRetained only with {a}: {}.\n\nRetained only with {b}: {}.",
            list(self.names(|p| p.status == RetentionStatus::AOnly)),
            list(self.names(|p| p.status == RetentionStatus::BOnly))
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(classes: &[&str], rows: &[(&str, &[f64])]) -> OddsRatioTable {
        OddsRatioTable {
            classes: classes.iter().map(|s| s.to_string()).collect(),
            predictors: rows.iter().map(|r| r.0.to_string()).collect(),
            values: rows.iter().map(|r| r.1.to_vec()).collect(),
        }
    }

    #[test]
    fn rule_order_and_catch_all() {
        let rt: RuleTypology = toml::from_str(
            r#"[[rules]]
label = "B2"
when = { deactivated = true }
[[rules]]
label = "B3"
when = { takenBreak = true }
[[rules]]
label = "B1""#,
        )
        .unwrap();
        let r = |d: bool, t: bool| {
            let m: HashMap<String, bool> = [("deactivated".to_string(), d), ("takenBreak".to_string(), t)].into();
            assign_rule_class(&m, &rt).unwrap()
        };
        assert_eq!(r(true, true), "B2");
        assert_eq!(r(false, true), "B3");
        assert_eq!(r(false, false), "B1");
    }

    #[test]
    fn rule_typology_validation() {
        let rule = |l: &str, q: Option<&str>| Rule {
            label: l.into(),
            when: q.map(|q| [(q.to_string(), true)].into()).unwrap_or_default(),
        };
        assert!(RuleTypology::new(vec![rule("A", Some("q"))]).is_err());
        assert!(RuleTypology::new(vec![rule("A", Some("q")), rule("A", None)]).is_err());
        assert!(RuleTypology::new(vec![]).is_err());
        let rt = RuleTypology::new(vec![rule("A", Some("q")), rule("B", None)]).unwrap();
        let empty: HashMap<String, bool> = HashMap::new();
        assert!(matches!(assign_rule_class(&empty, &rt), Err(Error::UnknownQuestion(_))));
    }

    #[test]
    fn reflexive_and_disjoint() {
        let a = table(&["C2", "C3"], &[("x", &[1.2, 1.5]), ("y", &[0.8, 1.1])]);
        let r = alignment_report("A", &a, "B", &a, None);
        assert!(r.predictors.iter().all(|p| p.status == RetentionStatus::BothRetained));
        assert_eq!(r.entry("x").unwrap().direction_agrees, Some(true));
        // mixed within a model never agrees
        assert_eq!(r.entry("y").unwrap().direction_agrees, Some(false));
        let b = table(&["T2"], &[("z", &[2.0])]);
        let r = alignment_report("A", &a, "B", &b, None);
        assert!(r.predictors.iter().all(|p| p.status != RetentionStatus::BothRetained));
        assert_eq!(r.predictors.len(), 3);
    }

    #[test]
    fn neutral_ratios_reported_separately() {
        let a = table(&["C2", "C3"], &[("x", &[1.0, 1.5])]);
        let b = table(&["T2"], &[("x", &[1.3])]);
        let r = alignment_report("A", &a, "B", &b, None);
        let e = r.entry("x").unwrap();
        assert_eq!(e.a.as_ref().unwrap().neutral, 1);
        assert_eq!(e.direction_agrees, Some(false));
    }

    #[test]
    fn csv_ingest_strips_stars() {
        let t = OddsRatioTable::from_csv("predictor,C2,C3,significance\nRelapse,1.38*,1.63*,*\nAge,0.98***,0.95***,***\n")
            .unwrap();
        assert_eq!(t.classes, ["C2", "C3"]);
        assert_eq!(t.values[1], [0.98, 0.95]);
        assert!(OddsRatioTable::from_csv("predictor,C2\nx,---\n").is_err());
    }

    #[test]
    fn swap_exchanges_one_sided_statuses() {
        let a = table(&["C2"], &[("x", &[1.2]), ("y", &[0.5])]);
        let b = table(&["T2"], &[("x", &[1.4]), ("z", &[0.9])]);
        let r = alignment_report("A", &a, "B", &b, None);
        let s = r.swapped();
        assert_eq!(s.entry("y").unwrap().status, RetentionStatus::BOnly);
        assert_eq!(s.entry("z").unwrap().status, RetentionStatus::AOnly);
        assert_eq!(s.entry("x").unwrap().direction_agrees, Some(true));
        let md = r.to_markdown();
        assert!(md.contains("Retained only with A: y."));
    }
}
