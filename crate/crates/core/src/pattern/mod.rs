//! Curve-fitting typology: unique Yes/No response patterns ranked by
//! frequency, a rank-frequency curve, and head classes chosen by coverage.

mod count_dist;
mod curve;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{BinaryAnswers, SurveyDataset};
use crate::error::{Error, Result};

pub use count_dist::{fit_count_distribution, NegBinomialFit};
pub use curve::{fit_rank_frequency_curve, CurveFit, CurveOptions, OFFSET_GAUSSIAN};

/// Default number of top patterns forming the coverage pool.
pub const DEFAULT_POOL_SIZE: usize = 15;
/// Default coverage threshold for head selection.
pub const DEFAULT_THRESHOLD: f64 = 0.79;

/// One distinct answer vector and how many respondents gave it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePattern {
    pub answers: Vec<bool>,
    pub count: usize,
    pub rank: usize,
}

impl ResponsePattern {
    /// `Y`/`N` string in question order.
    pub fn code(&self) -> String {
        pattern_code(&self.answers)
    }
}

pub fn pattern_code(answers: &[bool]) -> String {
    answers.iter().map(|&b| if b { 'Y' } else { 'N' }).collect()
}

pub fn parse_pattern_code(code: &str) -> Result<Vec<bool>> {
    code.chars()
        .map(|c| match c {
            'Y' | 'y' | '1' => Ok(true),
            'N' | 'n' | '0' => Ok(false),
            _ => Err(Error::InvalidInput(format!("bad pattern code {code:?}"))),
        })
        .collect()
}

/// All distinct patterns over a fixed question list, ranked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTable {
    pub questions: Vec<String>,
    pub n: usize,
    pub patterns: Vec<ResponsePattern>,
}

impl PatternTable {
    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    /// `(rank, count)` points for curve fitting.
    pub fn rank_frequency_points(&self) -> Vec<(f64, f64)> {
        self.patterns.iter().map(|p| (p.rank as f64, p.count as f64)).collect()
    }

    pub fn counts(&self) -> Vec<u64> {
        self.patterns.iter().map(|p| p.count as u64).collect()
    }

    /// patterns.csv: rank, Y/N answer string, count, cumulative share of n.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,pattern,count,cumulative_share\n");
        let mut cum = 0usize;
        for p in &self.patterns {
            cum += p.count;
            out.push_str(&format!("{},{},{},{:.6}\n", p.rank, p.code(), p.count, cum as f64 / self.n as f64));
        }
        out
    }
}

/// Count every distinct answer vector over `included`. Sorted by
/// descending count; equal counts are ordered by answer vector with No
/// before Yes at the first differing question.
pub fn enumerate_patterns(ds: &SurveyDataset, included: &[String]) -> Result<PatternTable> {
    if included.is_empty() {
        return Err(Error::InvalidInput("no questions included".into()));
    }
    let vectors = ds.answer_vectors(included)?;
    let mut counts: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    for v in vectors {
        *counts.entry(v).or_default() += 1;
    }
    let mut patterns: Vec<ResponsePattern> = counts
        .into_iter()
        .map(|(answers, count)| ResponsePattern { answers, count, rank: 0 })
        .collect();
    patterns.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.answers.cmp(&b.answers)));
    for (i, p) in patterns.iter_mut().enumerate() {
        p.rank = i + 1;
    }
    Ok(PatternTable {
        questions: included.to_vec(),
        n: ds.n(),
        patterns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    AllRespondents,
    TopNPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternClass {
    pub label: String,
    pub pattern: ResponsePattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTypology {
    pub questions: Vec<String>,
    pub classes: Vec<PatternClass>,
    pub covered: usize,
    pub denominator: usize,
    pub coverage: f64,
    pub denominator_mode: DenominatorMode,
    pub threshold: f64,
}

impl PatternTypology {
    pub fn labels(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.label.clone()).collect()
    }

    pub fn average_class_size(&self) -> f64 {
        self.covered as f64 / self.classes.len() as f64
    }
}

/// Smallest head of the ranked patterns whose cumulative count reaches
/// `threshold` of the denominator. Classes are labeled C1..Ck.
pub fn select_head_classes(
    table: &PatternTable,
    threshold: f64,
    mode: DenominatorMode,
    pool_size: usize,
) -> Result<PatternTypology> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("threshold {threshold} outside (0, 1]")));
    }
    let patterns = &table.patterns;
    let denominator = match mode {
        DenominatorMode::AllRespondents => patterns.iter().map(|p| p.count).sum::<usize>(),
        DenominatorMode::TopNPool => {
            if pool_size == 0 || pool_size > patterns.len() {
                return Err(Error::InvalidInput(format!(
                    "pool size {pool_size} outside 1..={}",
                    patterns.len()
                )));
            }
            patterns[..pool_size].iter().map(|p| p.count).sum()
        }
    };
    let mut covered = 0usize;
    for (k, p) in patterns.iter().enumerate() {
        covered += p.count;
        let coverage = covered as f64 / denominator as f64;
        if coverage >= threshold {
            let classes = patterns[..=k]
                .iter()
                .enumerate()
                .map(|(i, p)| PatternClass {
                    label: format!("C{}", i + 1),
                    pattern: p.clone(),
                })
                .collect();
            return Ok(PatternTypology {
                questions: table.questions.clone(),
                classes,
                covered,
                denominator,
                coverage,
                denominator_mode: mode,
                threshold,
            });
        }
    }
    Err(Error::ThresholdUnreachable { threshold })
}

/// Outcome of matching a respondent against a pattern typology.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Assignment {
    Class(String),
    Excluded,
}

impl Assignment {
    pub fn label(&self) -> Option<&str> {
        match self {
            Assignment::Class(l) => Some(l),
            Assignment::Excluded => None,
        }
    }
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Class(l) => f.write_str(l),
            Assignment::Excluded => f.write_str("EXCLUDED"),
        }
    }
}

/// Exact-match lookup of a respondent's answers against the class patterns.
pub fn assign_pattern_class<A: BinaryAnswers + ?Sized>(respondent: &A, typ: &PatternTypology) -> Result<Assignment> {
    let answers: Vec<bool> = typ
        .questions
        .iter()
        .map(|q| respondent.binary(q).ok_or_else(|| Error::UnknownQuestion(q.clone())))
        .collect::<Result<_>>()?;
    Ok(typ
        .classes
        .iter()
        .find(|c| c.pattern.answers == answers)
        .map(|c| Assignment::Class(c.label.clone()))
        .unwrap_or(Assignment::Excluded))
}

/// Assign every respondent; returns `(respondent id, assignment)` pairs in
/// dataset order.
pub fn assign_all(ds: &SurveyDataset, typ: &PatternTypology) -> Result<Vec<(String, Assignment)>> {
    ds.records()
        .map(|r| Ok((r.id().to_string(), assign_pattern_class(&r, typ)?)))
        .collect()
}

pub fn assignments_csv(rows: &[(String, Assignment)]) -> String {
    let mut out = String::from("respondent_id,class\n");
    for (id, a) in rows {
        out.push_str(&format!("{id},{a}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Answer, QuestionDef};

    fn ds_from_codes(codes: &[&str]) -> SurveyDataset {
        let k = codes[0].len();
        let questions = (0..k).map(|i| QuestionDef::typology(&format!("q{i}"))).collect();
        let rows = codes
            .iter()
            .enumerate()
            .map(|(r, c)| {
                (
                    format!("r{r}"),
                    parse_pattern_code(c).unwrap().into_iter().map(Answer::Binary).collect(),
                )
            })
            .collect();
        SurveyDataset::from_rows(questions, rows).unwrap()
    }

    fn qs(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("q{i}")).collect()
    }

    #[test]
    fn hand_enumeration() {
        let ds = ds_from_codes(&["YYN", "YYN", "NYY"]);
        let t = enumerate_patterns(&ds, &qs(3)).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t.patterns[0].code().as_str(), t.patterns[0].count, t.patterns[0].rank), ("YYN", 2, 1));
        assert_eq!((t.patterns[1].code().as_str(), t.patterns[1].count, t.patterns[1].rank), ("NYY", 1, 2));
    }

    #[test]
    fn identical_respondents_single_pattern() {
        let ds = ds_from_codes(&["YN"; 7]);
        let t = enumerate_patterns(&ds, &qs(2)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.patterns[0].count, 7);
    }

    #[test]
    fn ties_order_no_before_yes() {
        let ds = ds_from_codes(&["YN", "NY", "YY", "NN"]);
        let t = enumerate_patterns(&ds, &qs(2)).unwrap();
        let codes: Vec<String> = t.patterns.iter().map(|p| p.code()).collect();
        assert_eq!(codes, ["NN", "NY", "YN", "YY"]);
    }

    fn table(counts: &[usize]) -> PatternTable {
        let patterns = counts
            .iter()
            .enumerate()
            .map(|(i, &count)| ResponsePattern {
                answers: (0..5).map(|b| (i >> b) & 1 == 1).collect(),
                count,
                rank: i + 1,
            })
            .collect();
        PatternTable {
            questions: qs(5),
            n: counts.iter().sum(),
            patterns,
        }
    }

    #[test]
    fn full_coverage_takes_all_patterns() {
        let t = table(&[10, 5, 3, 1, 1]);
        let typ = select_head_classes(&t, 1.0, DenominatorMode::AllRespondents, 0).unwrap();
        assert_eq!(typ.classes.len(), 5);
        assert_eq!(typ.coverage, 1.0);
        assert_eq!(typ.labels(), ["C1", "C2", "C3", "C4", "C5"]);
    }

    #[test]
    fn invalid_threshold_and_pool() {
        let t = table(&[10, 5]);
        assert!(select_head_classes(&t, 0.0, DenominatorMode::AllRespondents, 0).is_err());
        assert!(select_head_classes(&t, 1.5, DenominatorMode::AllRespondents, 0).is_err());
        assert!(select_head_classes(&t, 0.5, DenominatorMode::TopNPool, 3).is_err());
    }

    #[test]
    fn long_tail_is_excluded() {
        let ds = ds_from_codes(&["YN", "YN", "YN", "NY"]);
        let t = enumerate_patterns(&ds, &qs(2)).unwrap();
        let typ = select_head_classes(&t, 0.7, DenominatorMode::AllRespondents, 0).unwrap();
        let a = assign_all(&ds, &typ).unwrap();
        assert_eq!(a[0].1, Assignment::Class("C1".into()));
        assert_eq!(a[3].1, Assignment::Excluded);
        assert_eq!(assignments_csv(&a[2..]), "respondent_id,class\nr2,C1\nr3,EXCLUDED\n");
    }
}
