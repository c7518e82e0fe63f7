//! Survey data: question schema, respondent records, loading, and
//! question-level summaries of the binary typology items.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minority-share cutoff below which a typology question is
/// treated as near-constant.
pub const DEFAULT_MIN_MINORITY_SHARE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QuestionKind {
    Binary,
    Likert { min: i64, max: i64 },
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionRole {
    Typology,
    ScaleItem,
    Demographic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionDef {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(flatten)]
    pub kind: QuestionKind,
    pub role: QuestionRole,
}

impl QuestionDef {
    pub fn binary(id: &str, role: QuestionRole) -> Self {
        QuestionDef {
            id: id.to_string(),
            text: String::new(),
            kind: QuestionKind::Binary,
            role,
        }
    }

    pub fn typology(id: &str) -> Self {
        Self::binary(id, QuestionRole::Typology)
    }

    pub fn likert(id: &str, min: i64, max: i64) -> Self {
        QuestionDef {
            id: id.to_string(),
            text: String::new(),
            kind: QuestionKind::Likert { min, max },
            role: QuestionRole::ScaleItem,
        }
    }

    pub fn numeric(id: &str, role: QuestionRole) -> Self {
        QuestionDef {
            id: id.to_string(),
            text: String::new(),
            kind: QuestionKind::Numeric,
            role,
        }
    }

    pub fn categorical(id: &str, role: QuestionRole) -> Self {
        QuestionDef {
            id: id.to_string(),
            text: String::new(),
            kind: QuestionKind::Categorical,
            role,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.kind, QuestionKind::Binary)
    }

    fn validate(&self) -> Result<()> {
        if let QuestionKind::Likert { min, max } = self.kind {
            if min >= max {
                return Err(Error::Config(format!(
                    "question `{}`: likert min {} must be below max {}",
                    self.id, min, max
                )));
            }
        }
        Ok(())
    }
}

/// One column of answers, stored by question kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Binary(Vec<bool>),
    Int(Vec<i64>),
    Num(Vec<f64>),
    Cat(Vec<String>),
}

impl Column {
    fn empty_for(kind: &QuestionKind) -> Column {
        match kind {
            QuestionKind::Binary => Column::Binary(Vec::new()),
            QuestionKind::Likert { .. } => Column::Int(Vec::new()),
            QuestionKind::Numeric => Column::Num(Vec::new()),
            QuestionKind::Categorical => Column::Cat(Vec::new()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Column::Binary(v) => v.len(),
            Column::Int(v) => v.len(),
            Column::Num(v) => v.len(),
            Column::Cat(v) => v.len(),
        }
    }

    fn render(&self, row: usize) -> String {
        match self {
            Column::Binary(v) => if v[row] { "Y" } else { "N" }.to_string(),
            Column::Int(v) => v[row].to_string(),
            Column::Num(v) => v[row].to_string(),
            Column::Cat(v) => v[row].clone(),
        }
    }
}

/// A single answer value, used when building datasets programmatically.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Binary(bool),
    Int(i64),
    Num(f64),
    Cat(String),
}

/// Read access to a respondent's Yes/No answers.
pub trait BinaryAnswers {
    fn binary(&self, question: &str) -> Option<bool>;
}

impl BinaryAnswers for HashMap<String, bool> {
    fn binary(&self, question: &str) -> Option<bool> {
        self.get(question).copied()
    }
}

impl BinaryAnswers for BTreeMap<String, bool> {
    fn binary(&self, question: &str) -> Option<bool> {
        self.get(question).copied()
    }
}

/// Borrowed view of one respondent.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    ds: &'a SurveyDataset,
    row: usize,
}

impl<'a> Record<'a> {
    pub fn id(&self) -> &'a str {
        &self.ds.ids[self.row]
    }

    pub fn row(&self) -> usize {
        self.row
    }

    pub fn numeric(&self, question: &str) -> Option<f64> {
        self.ds.numeric_value(question, self.row)
    }
}

impl BinaryAnswers for Record<'_> {
    fn binary(&self, question: &str) -> Option<bool> {
        match self.ds.column(question) {
            Some(Column::Binary(v)) => Some(v[self.row]),
            _ => None,
        }
    }
}

/// Loading options for delimited survey files.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub id_column: String,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            delimiter: b',',
            id_column: "respondent_id".to_string(),
        }
    }
}

/// Validated, immutable survey responses.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    questions: Vec<QuestionDef>,
    index: HashMap<String, usize>,
    ids: Vec<String>,
    columns: Vec<Column>,
}

impl SurveyDataset {
    /// Build a dataset from in-memory rows. Each row is `(respondent id,
    /// answers in schema order)`.
    pub fn from_rows(
        questions: Vec<QuestionDef>,
        rows: Vec<(String, Vec<Answer>)>,
    ) -> Result<Self> {
        let index = build_index(&questions)?;
        let mut columns: Vec<Column> = questions.iter().map(|q| Column::empty_for(&q.kind)).collect();
        let mut ids = Vec::with_capacity(rows.len());
        for (r, (id, answers)) in rows.into_iter().enumerate() {
            if answers.len() != questions.len() {
                return Err(Error::InvalidInput(format!(
                    "row {} has {} answers, schema has {} questions",
                    r + 1,
                    answers.len(),
                    questions.len()
                )));
            }
            for ((q, col), a) in questions.iter().zip(columns.iter_mut()).zip(answers) {
                push_answer(col, q, a, r + 1)?;
            }
            ids.push(id);
        }
        Self::assemble(questions, index, ids, columns)
    }

    fn assemble(
        questions: Vec<QuestionDef>,
        index: HashMap<String, usize>,
        ids: Vec<String>,
        columns: Vec<Column>,
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::NoRespondents);
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateRespondent(id.clone()));
            }
        }
        debug_assert!(columns.iter().all(|c| c.len() == ids.len()));
        Ok(SurveyDataset {
            questions,
            index,
            ids,
            columns,
        })
    }

    /// Load a delimited file whose header names the id column plus every
    /// schema question.
    pub fn load(path: impl AsRef<Path>, schema: &[QuestionDef], opts: &LoadOptions) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(file, schema, opts)
    }

    pub fn read<R: Read>(reader: R, schema: &[QuestionDef], opts: &LoadOptions) -> Result<Self> {
        let index = build_index(schema)?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(opts.delimiter)
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let position = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let id_pos = position(&opts.id_column)?;
        let positions: Vec<usize> = schema.iter().map(|q| position(&q.id)).collect::<Result<_>>()?;
        for h in headers.iter() {
            let h = h.trim();
            if h != opts.id_column && !index.contains_key(h) {
                log::warn!("ignoring column `{h}` not declared in schema");
            }
        }

        let mut columns: Vec<Column> = schema.iter().map(|q| Column::empty_for(&q.kind)).collect();
        let mut ids = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = r + 1;
            let id = rec.get(id_pos).unwrap_or("").trim();
            if id.is_empty() {
                return Err(Error::MissingAnswer {
                    row,
                    column: opts.id_column.clone(),
                });
            }
            ids.push(id.to_string());
            for ((q, col), &pos) in schema.iter().zip(columns.iter_mut()).zip(&positions) {
                let cell = rec.get(pos).unwrap_or("").trim();
                let answer = parse_cell(q, cell, row)?;
                push_answer(col, q, answer, row)?;
            }
        }
        Self::assemble(schema.to_vec(), index, ids, columns)
    }

    /// Write the dataset in canonical form: binary answers as `Y`/`N`.
    pub fn write<W: Write>(&self, writer: W, delimiter: u8, id_column: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
        let mut header = vec![id_column.to_string()];
        header.extend(self.questions.iter().map(|q| q.id.clone()));
        w.write_record(&header)?;
        for row in 0..self.n() {
            let mut rec = vec![self.ids[row].clone()];
            rec.extend(self.columns.iter().map(|c| c.render(row)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, opts: &LoadOptions) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file), opts.delimiter, &opts.id_column)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn questions(&self) -> &[QuestionDef] {
        &self.questions
    }

    pub fn question(&self, id: &str) -> Option<&QuestionDef> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn record(&self, row: usize) -> Record<'_> {
        Record { ds: self, row }
    }

    pub fn records(&self) -> impl Iterator<Item = Record<'_>> {
        (0..self.n()).map(move |row| Record { ds: self, row })
    }

    pub fn column(&self, id: &str) -> Option<&Column> {
        self.index.get(id).map(|&i| &self.columns[i])
    }

    pub fn binary_column(&self, id: &str) -> Result<&[bool]> {
        match self.column(id) {
            Some(Column::Binary(v)) => Ok(v),
            Some(_) => Err(Error::NotBinary(id.to_string())),
            None => Err(Error::UnknownQuestion(id.to_string())),
        }
    }

    /// Numeric view of a likert, numeric, or binary column.
    pub fn numeric_column(&self, id: &str) -> Result<Vec<f64>> {
        match self.column(id) {
            Some(Column::Int(v)) => Ok(v.iter().map(|&x| x as f64).collect()),
            Some(Column::Num(v)) => Ok(v.clone()),
            Some(Column::Binary(v)) => Ok(v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
            Some(Column::Cat(_)) => Err(Error::InvalidInput(format!(
                "question `{id}` is categorical, not numeric"
            ))),
            None => Err(Error::UnknownQuestion(id.to_string())),
        }
    }

    pub fn categorical_column(&self, id: &str) -> Result<&[String]> {
        match self.column(id) {
            Some(Column::Cat(v)) => Ok(v),
            Some(_) => Err(Error::InvalidInput(format!("question `{id}` is not categorical"))),
            None => Err(Error::UnknownQuestion(id.to_string())),
        }
    }

    fn numeric_value(&self, id: &str, row: usize) -> Option<f64> {
        match self.column(id)? {
            Column::Int(v) => Some(v[row] as f64),
            Column::Num(v) => Some(v[row]),
            Column::Binary(v) => Some(if v[row] { 1.0 } else { 0.0 }),
            Column::Cat(_) => None,
        }
    }

    /// Binary questions with the typology role, in schema order.
    pub fn typology_questions(&self) -> Vec<String> {
        self.questions
            .iter()
            .filter(|q| q.is_binary() && q.role == crate::dataset::QuestionRole::Typology)
            .map(|q| q.id.clone())
            .collect()
    }

    /// Answer vectors over `questions`, one per respondent.
    pub fn answer_vectors(&self, questions: &[String]) -> Result<Vec<Vec<bool>>> {
        let cols: Vec<&[bool]> = questions.iter().map(|q| self.binary_column(q)).collect::<Result<_>>()?;
        Ok((0..self.n()).map(|r| cols.iter().map(|c| c[r]).collect()).collect())
    }
}

fn build_index(questions: &[QuestionDef]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(questions.len());
    for (i, q) in questions.iter().enumerate() {
        q.validate()?;
        if index.insert(q.id.clone(), i).is_some() {
            return Err(Error::DuplicateQuestion(q.id.clone()));
        }
    }
    Ok(index)
}

pub(crate) fn parse_binary_token(token: &str) -> Option<bool> {
    match token.to_ascii_lowercase().as_str() {
        "y" | "yes" | "1" => Some(true),
        "n" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_cell(q: &QuestionDef, cell: &str, row: usize) -> Result<Answer> {
    if cell.is_empty() {
        return Err(Error::MissingAnswer {
            row,
            column: q.id.clone(),
        });
    }
    let bad = |expected: &str| Error::ParseCell {
        row,
        column: q.id.clone(),
        value: cell.to_string(),
        expected: expected.to_string(),
    };
    Ok(match &q.kind {
        QuestionKind::Binary => Answer::Binary(parse_binary_token(cell).ok_or_else(|| bad("Yes/No"))?),
        QuestionKind::Likert { .. } => Answer::Int(cell.parse().map_err(|_| bad("integer"))?),
        QuestionKind::Numeric => {
            let v: f64 = cell.parse().map_err(|_| bad("number"))?;
            if !v.is_finite() {
                return Err(bad("finite number"));
            }
            Answer::Num(v)
        }
        QuestionKind::Categorical => Answer::Cat(cell.to_string()),
    })
}

fn push_answer(col: &mut Column, q: &QuestionDef, a: Answer, row: usize) -> Result<()> {
    let mismatch = |a: &Answer| Error::InvalidInput(format!("row {row}, column `{}`: answer {a:?} does not match kind", q.id));
    match (col, a) {
        (Column::Binary(v), Answer::Binary(b)) => v.push(b),
        (Column::Int(v), Answer::Int(x)) => {
            if let QuestionKind::Likert { min, max } = q.kind {
                if x < min || x > max {
                    return Err(Error::ParseCell {
                        row,
                        column: q.id.clone(),
                        value: x.to_string(),
                        expected: format!("integer in {min}..={max}"),
                    });
                }
            }
            v.push(x)
        }
        (Column::Num(v), Answer::Num(x)) => v.push(x),
        (Column::Num(v), Answer::Int(x)) => v.push(x as f64),
        (Column::Cat(v), Answer::Cat(s)) => v.push(s),
        (_, a) => return Err(mismatch(&a)),
    }
    Ok(())
}

/// Yes-share summary of one binary question.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionStats {
    pub question: String,
    pub yes_count: usize,
    pub n: usize,
    pub yes_share: f64,
    pub minority_share: f64,
}

impl QuestionStats {
    pub fn no_count(&self) -> usize {
        self.n - self.yes_count
    }

    pub fn no_share(&self) -> f64 {
        self.no_count() as f64 / self.n as f64
    }
}

pub fn question_stats(ds: &SurveyDataset, question: &str) -> Result<QuestionStats> {
    let col = ds.binary_column(question)?;
    let yes_count = col.iter().filter(|&&b| b).count();
    let n = ds.n();
    let yes_share = yes_count as f64 / n as f64;
    let minority = yes_count.min(n - yes_count);
    Ok(QuestionStats {
        question: question.to_string(),
        yes_count,
        n,
        yes_share,
        minority_share: minority as f64 / n as f64,
    })
}

/// Typology questions whose minority share reaches `min_minority_share`,
/// in schema order.
pub fn drop_degenerate_questions(ds: &SurveyDataset, min_minority_share: f64) -> Result<Vec<String>> {
    if !(0.0..0.5).contains(&min_minority_share) {
        return Err(Error::InvalidInput(format!(
            "minority-share threshold {min_minority_share} outside [0, 0.5)"
        )));
    }
    let mut kept = Vec::new();
    for q in ds.typology_questions() {
        let stats = question_stats(ds, &q)?;
        if stats.minority_share >= min_minority_share {
            kept.push(q);
        } else {
            log::info!(
                "dropping near-constant question `{}` (minority share {:.4})",
                q,
                stats.minority_share
            );
        }
    }
    Ok(kept)
}

/// Labeled square matrix of correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub ids: Vec<String>,
    pub values: DMatrix<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == a)?;
        let j = self.ids.iter().position(|x| x == b)?;
        Some(self.values[(i, j)])
    }

    /// CSV with a header row and column of ids, values to six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("question");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            out.push_str(id);
            for j in 0..self.ids.len() {
                out.push_str(&format!(",{:.6}", self.values[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

/// Phi coefficients (Pearson correlation of the Yes=1/No=0 encodings).
pub fn binary_correlation_matrix(ds: &SurveyDataset, questions: &[String]) -> Result<CorrelationMatrix> {
    let cols: Vec<&[bool]> = questions.iter().map(|q| ds.binary_column(q)).collect::<Result<_>>()?;
    let n = ds.n() as f64;
    let yes: Vec<f64> = cols.iter().map(|c| c.iter().filter(|&&b| b).count() as f64).collect();
    for (q, &y) in questions.iter().zip(&yes) {
        if y == 0.0 || y == n {
            return Err(Error::ConstantQuestion(q.clone()));
        }
    }
    let k = questions.len();
    let mut m = DMatrix::identity(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let both = cols[i].iter().zip(cols[j]).filter(|(&a, &b)| a && b).count() as f64;
            // phi = (n * n11 - n1. * n.1) / sqrt(n1. n0. n.1 n.0)
            let num = n * both - yes[i] * yes[j];
            let den = (yes[i] * (n - yes[i]) * yes[j] * (n - yes[j])).sqrt();
            let r = num / den;
            m[(i, j)] = r;
            m[(j, i)] = r;
        }
    }
    Ok(CorrelationMatrix {
        ids: questions.to_vec(),
        values: m,
    })
}

/// Pearson correlation matrix of numeric columns.
pub fn pearson_correlation_matrix(ds: &SurveyDataset, items: &[String]) -> Result<CorrelationMatrix> {
    let cols: Vec<Vec<f64>> = items.iter().map(|q| ds.numeric_column(q)).collect::<Result<_>>()?;
    let values = crate::stats::correlation_of_columns(&cols).map_err(|i| Error::ConstantQuestion(items[i].clone()))?;
    Ok(CorrelationMatrix {
        ids: items.to_vec(),
        values,
    })
}
