//! Config-driven end-to-end run: dataset, both typologies, predictors,
//! full and reduced models, comparison, and a manifest of everything
//! written.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comparison::{
    alignment_report_for_fits, assign_all_rules, map_typologies, AlignmentReport, Rule, RuleTypology, TypologyMapping,
};
use crate::dataset::{
    binary_correlation_matrix, drop_degenerate_questions, question_stats, LoadOptions, QuestionDef, SurveyDataset,
    DEFAULT_MIN_MINORITY_SHARE,
};
use crate::error::{Error, ErrorKind, Result};
use crate::modeling::{
    backward_stepwise, fit_mlogit, lrt_for_fit, model_report, odds_ratio_csv, LrtResult, MlogitFit, ModelSpec, Outcome,
    StepwiseResult,
};
use crate::pattern::{
    self, enumerate_patterns, fit_count_distribution, fit_rank_frequency_curve, select_head_classes, CurveOptions,
    DenominatorMode, PatternTable, PatternTypology, DEFAULT_POOL_SIZE, DEFAULT_THRESHOLD,
};
use crate::psychometrics::{build_predictor_table, EfaOptions, PredictorBuild, PredictorConfig};
use crate::tree::{
    self, enumerate_trees, filter_trees, select_tree, trees_json, tree_json, EnumerateOptions, TaxonomicTree,
    TreeConstraints, DEFAULT_TREE_CAP,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// TOML file with a `[[questions]]` array; alternative to inline
    /// `questions`.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub questions: Vec<QuestionDef>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_min_share")]
    pub min_minority_share: f64,
}

fn default_delimiter() -> char {
    ','
}

fn default_id_column() -> String {
    LoadOptions::default().id_column
}

fn default_min_share() -> f64 {
    DEFAULT_MIN_MINORITY_SHARE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_denominator")]
    pub denominator: DenominatorMode,
}

fn default_pool() -> usize {
    DEFAULT_POOL_SIZE
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_denominator() -> DenominatorMode {
    DenominatorMode::TopNPool
}

impl Default for PatternConfig {
    fn default() -> Self {
        PatternConfig {
            pool_size: default_pool(),
            threshold: default_threshold(),
            denominator: default_denominator(),
        }
    }
}

/// Tree settings; unset sizes fall back to 40 / 51 / ceil(n/3).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    #[serde(default)]
    pub min_leaf_grow: Option<usize>,
    #[serde(default)]
    pub min_leaf_filter: Option<usize>,
    #[serde(default)]
    pub max_leaf_filter: Option<usize>,
    #[serde(default)]
    pub exclude_questions: Vec<String>,
    #[serde(default)]
    pub cap: Option<usize>,
}

impl TreeConfig {
    pub fn constraints(&self, n: usize) -> TreeConstraints {
        let d = TreeConstraints::defaults_for(n);
        TreeConstraints {
            min_leaf_grow: self.min_leaf_grow.unwrap_or(d.min_leaf_grow),
            min_leaf_filter: self.min_leaf_filter.unwrap_or(d.min_leaf_filter),
            max_leaf_filter: self.max_leaf_filter.unwrap_or(d.max_leaf_filter),
            excluded_questions: self.exclude_questions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub reference_class: Option<String>,
    /// Defaults to every predictor column.
    #[serde(default)]
    pub predictors: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub stepwise: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            reference_class: None,
            predictors: None,
            stepwise: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    #[serde(default)]
    pub curve: ModelConfig,
    #[serde(default)]
    pub tree: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleTypologyConfig {
    pub name: String,
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub patterns: PatternConfig,
    #[serde(default)]
    pub trees: TreeConfig,
    #[serde(default)]
    pub predictors: PredictorConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub rule_typologies: Vec<RuleTypologyConfig>,
    /// Fixture spec used by `synth-fixture`.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Deserialize)]
struct SchemaFile {
    questions: Vec<QuestionDef>,
}

/// A parsed config together with its source bytes and directory, against
/// which relative paths resolve.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
    pub sha256: String,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Config("config is not UTF-8".into()))?;
        let config: PipelineConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(LoadedConfig {
            config,
            base_dir,
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }

    pub fn from_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(LoadedConfig {
            config,
            base_dir: base_dir.into(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn schema(&self) -> Result<Vec<QuestionDef>> {
        let d = &self.config.dataset;
        match (&d.schema, d.questions.is_empty()) {
            (Some(_), false) => Err(Error::Config("give either dataset.schema or dataset.questions, not both".into())),
            (None, true) => Err(Error::Config("dataset needs a schema file or inline questions".into())),
            (None, false) => Ok(d.questions.clone()),
            (Some(p), true) => {
                let path = self.resolve(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let s: SchemaFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Ok(s.questions)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if !c.dataset.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be a single ASCII character".into()));
        }
        if !(0.0..0.5).contains(&c.dataset.min_minority_share) {
            return Err(Error::Config("min_minority_share must be in [0, 0.5)".into()));
        }
        if !(c.patterns.threshold > 0.0 && c.patterns.threshold <= 1.0) {
            return Err(Error::Config("patterns.threshold must be in (0, 1]".into()));
        }
        let mut names = std::collections::HashSet::new();
        for r in &c.rule_typologies {
            if !names.insert(r.name.as_str()) || r.name == "curve" || r.name == "tree" {
                return Err(Error::Config(format!("rule typology name `{}` is reserved or repeated", r.name)));
            }
            RuleTypology::new(r.rules.clone())?;
        }
        Ok(())
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Dataset,
    Patterns,
    Curve,
    Trees,
    Predictors,
    Models,
    Comparison,
    Manifest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap())
    }
}

/// A module error tagged with the stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.kind().exit_code()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self.error.kind() {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        };
        serde_json::json!({
            "stage": self.stage,
            "kind": kind,
            "exit_code": self.exit_code(),
            "message": self.error.to_string(),
        })
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

fn to_pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One fitted typology model.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub name: String,
    pub full: MlogitFit,
    pub stepwise: Option<StepwiseResult>,
    pub lrt: Vec<LrtResult>,
}

impl ModelRun {
    pub fn reduced(&self) -> &MlogitFit {
        self.stepwise.as_ref().map_or(&self.full, |s| &s.fit)
    }
}

/// Staged pipeline state. Each step writes its outputs into the output
/// directory and records them for the manifest.
#[derive(Debug)]
pub struct Pipeline {
    pub cfg: LoadedConfig,
    out_dir: PathBuf,
    outputs: BTreeMap<String, String>,
    timings: BTreeMap<String, f64>,
    pub dataset: Option<SurveyDataset>,
    dataset_sha256: Option<String>,
    pub retained: Vec<String>,
    pub dropped: Vec<String>,
    pub pattern_table: Option<PatternTable>,
    pub pattern_typology: Option<PatternTypology>,
    pub curve_converged: Option<bool>,
    pub tree_stage_counts: Option<tree::StageCounts>,
    pub tree: Option<TaxonomicTree>,
    pub predictors: Option<PredictorBuild>,
    pub models: Vec<ModelRun>,
    pub skipped_models: BTreeMap<String, String>,
    pub mapping: Option<TypologyMapping>,
    pub alignment: Option<AlignmentReport>,
}

impl Pipeline {
    pub fn new(cfg: LoadedConfig, out_dir: Option<PathBuf>) -> StageResult<Self> {
        cfg.validate().at(Stage::Config)?;
        let out_dir = out_dir.unwrap_or_else(|| cfg.output_dir());
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e)).at(Stage::Config)?;
        // a report from an earlier failed run would contradict this one
        let stale = out_dir.join("error.json");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e)).at(Stage::Config)?;
        }
        Ok(Pipeline {
            cfg,
            out_dir,
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            dataset: None,
            dataset_sha256: None,
            retained: Vec::new(),
            dropped: Vec::new(),
            pattern_table: None,
            pattern_typology: None,
            curve_converged: None,
            tree_stage_counts: None,
            tree: None,
            predictors: None,
            models: Vec::new(),
            skipped_models: BTreeMap::new(),
            mapping: None,
            alignment: None,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(name.to_string(), hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(())
    }

    fn timed<T>(&mut self, stage: Stage, f: impl FnOnce(&mut Self) -> Result<T>) -> StageResult<T> {
        let start = Instant::now();
        let r = f(self).at(stage);
        *self.timings.entry(stage.to_string()).or_insert(0.0) += start.elapsed().as_secs_f64();
        r
    }

    fn ds(&self) -> &SurveyDataset {
        self.dataset.as_ref().expect("dataset stage ran")
    }

    /// Load, drop near-constant typology questions, write question stats
    /// and the binary correlation matrix.
    pub fn load_dataset(&mut self) -> StageResult<()> {
        if self.dataset.is_some() {
            return Ok(());
        }
        self.timed(Stage::Dataset, |p| {
            let d = &p.cfg.config.dataset;
            let schema = p.cfg.schema()?;
            let path = p.cfg.resolve(&d.path);
            let opts = LoadOptions {
                delimiter: d.delimiter as u8,
                id_column: d.id_column.clone(),
            };
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let ds = SurveyDataset::read(bytes.as_slice(), &schema, &opts)?;
            let retained = drop_degenerate_questions(&ds, d.min_minority_share)?;
            let all = ds.typology_questions();
            p.dropped = all.iter().filter(|q| !retained.contains(q)).cloned().collect();
            if retained.is_empty() {
                return Err(Error::InvalidInput("every typology question is near-constant".into()));
            }
            let stats = all.iter().map(|q| question_stats(&ds, q)).collect::<Result<Vec<_>>>()?;
            let corr = binary_correlation_matrix(&ds, &retained)?;
            p.dataset_sha256 = Some(hex::encode(Sha256::digest(&bytes)));
            p.retained = retained;
            p.write(
                "question_stats.json",
                &to_pretty(&serde_json::json!({
                    "n": ds.n(),
                    "min_minority_share": d.min_minority_share,
                    "retained": p.retained,
                    "dropped": p.dropped,
                    "questions": stats,
                }))?,
            )?;
            p.write("correlation.csv", &corr.to_csv())?;
            p.dataset = Some(ds);
            Ok(())
        })
    }

    /// Rank patterns, cut the head, assign respondents.
    pub fn patterns(&mut self) -> StageResult<()> {
        self.load_dataset()?;
        if self.pattern_typology.is_some() {
            return Ok(());
        }
        self.timed(Stage::Patterns, |p| {
            let table = enumerate_patterns(p.ds(), &p.retained)?;
            let pc = &p.cfg.config.patterns;
            let typ = select_head_classes(&table, pc.threshold, pc.denominator, pc.pool_size)?;
            let rows = pattern::assign_all(p.ds(), &typ)?;
            p.write("patterns.csv", &table.to_csv())?;
            p.write("pattern_typology.json", &to_pretty(&typ)?)?;
            p.write("assignments.csv", &pattern::assignments_csv(&rows))?;
            p.pattern_table = Some(table);
            p.pattern_typology = Some(typ);
            Ok(())
        })
    }

    /// Fit the rank-frequency curve over the head pool plus the
    /// count-distribution diagnostic over all patterns.
    pub fn curve(&mut self) -> StageResult<()> {
        self.patterns()?;
        if self.curve_converged.is_some() {
            return Ok(());
        }
        self.timed(Stage::Curve, |p| {
            let table = p.pattern_table.as_ref().unwrap();
            let pool = p.cfg.config.patterns.pool_size.min(table.len());
            let points = table.rank_frequency_points()[..pool].to_vec();
            let fit = fit_rank_frequency_curve(&points, None, &CurveOptions::default())?;
            let nb = match fit_count_distribution(&table.counts()) {
                Ok(f) => serde_json::to_value(f).map_err(|e| Error::Serialization(e.to_string()))?,
                Err(e) => serde_json::json!({"error": e.to_string()}),
            };
            let mut v = serde_json::to_value(&fit).map_err(|e| Error::Serialization(e.to_string()))?;
            v["points"] = serde_json::json!(points.iter().map(|(x, y)| [x, y]).collect::<Vec<_>>());
            v["count_distribution"] = nb;
            p.curve_converged = Some(fit.converged);
            p.write("curve_fit.json", &to_pretty(&v)?)
        })
    }

    /// Enumerate, filter and select the taxonomic tree.
    pub fn trees(&mut self, overrides: Option<&TreeConfig>) -> StageResult<()> {
        self.load_dataset()?;
        if self.tree.is_some() {
            return Ok(());
        }
        self.timed(Stage::Trees, |p| {
            let tc = overrides.unwrap_or(&p.cfg.config.trees).clone();
            let n = p.ds().n();
            let c = tc.constraints(n);
            c.validate(n)?;
            let opts = EnumerateOptions {
                cap: tc.cap.unwrap_or(DEFAULT_TREE_CAP),
            };
            let cands = enumerate_trees(p.ds(), &p.retained, c.min_leaf_grow, &opts)?;
            let survivors = filter_trees(&cands, &c)?;
            let tree = select_tree(&survivors)?;
            let rows = tree::assign_all(p.ds(), &tree)?;
            let mut report = trees_json(&survivors);
            report["constraints"] = serde_json::to_value(&c).map_err(|e| Error::Serialization(e.to_string()))?;
            p.write("trees.json", &to_pretty(&report)?)?;
            p.write("selected_tree.json", &to_pretty(&tree_json(&tree))?)?;
            p.write("tree_assignments.csv", &tree::assignments_csv(&rows))?;
            p.tree_stage_counts = Some(survivors.stage_counts);
            p.tree = Some(tree);
            Ok(())
        })
    }

    /// Factor analyses, fixed-key scores, direct items and demographics.
    pub fn predictors(&mut self) -> StageResult<()> {
        self.load_dataset()?;
        if self.predictors.is_some() {
            return Ok(());
        }
        self.timed(Stage::Predictors, |p| {
            let build = build_predictor_table(p.ds(), &p.cfg.config.predictors, &EfaOptions::default())?;
            for a in &build.analyses {
                let name = format!("efa_{}.json", file_stem(&a.scale));
                p.write(&name, &to_pretty(&a.report_json())?)?;
            }
            p.write("predictors.csv", &build.table.to_csv())?;
            p.predictors = Some(build);
            Ok(())
        })
    }

    fn fit_one(&self, name: &str, outcome: &Outcome, mc: &ModelConfig, stepwise: bool) -> Result<ModelRun> {
        let table = &self.predictors.as_ref().unwrap().table;
        let spec = ModelSpec {
            reference_class: mc.reference_class.clone(),
            predictors: mc.predictors.clone().unwrap_or_else(|| table.names.clone()),
        };
        let full = fit_mlogit(table, outcome, &spec)?;
        let sw = if stepwise && mc.stepwise {
            Some(backward_stepwise(table, outcome, &spec)?)
        } else {
            None
        };
        let reduced = sw.as_ref().map_or(&full, |s| &s.fit);
        let lrt = reduced
            .predictors
            .par_iter()
            .map(|pr| lrt_for_fit(table, outcome, reduced, pr))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelRun {
            name: name.to_string(),
            full,
            stepwise: sw,
            lrt,
        })
    }

    /// Outcomes of every configured typology, in model order.
    fn outcomes(&self) -> Result<Vec<(String, Outcome, ModelConfig)>> {
        let mut v = Vec::new();
        if let Some(typ) = &self.pattern_typology {
            let rows = pattern::assign_all(self.ds(), typ)?;
            v.push((
                "curve".to_string(),
                Outcome::from_assignments("curve", typ.labels(), &rows)?,
                self.cfg.config.models.curve.clone(),
            ));
        }
        if let Some(tree) = &self.tree {
            let rows = tree::assign_all(self.ds(), tree)?;
            v.push((
                "tree".to_string(),
                Outcome::from_leaves("tree", tree.leaf_labels(), &rows)?,
                self.cfg.config.models.tree.clone(),
            ));
        }
        for r in &self.cfg.config.rule_typologies {
            let rt = RuleTypology::new(r.rules.clone())?;
            let rows = assign_all_rules(self.ds(), &rt)?;
            v.push((r.name.clone(), Outcome::from_leaves(&r.name, rt.labels(), &rows)?, r.model.clone()));
        }
        Ok(v)
    }

    /// Fit every typology model; with `stepwise`, also reduce by AIC.
    /// Typologies with fewer than two populated classes are skipped.
    pub fn models(&mut self, stepwise: bool) -> StageResult<()> {
        self.patterns()?;
        self.trees(None)?;
        self.predictors()?;
        if !self.models.is_empty() || !self.skipped_models.is_empty() {
            return Ok(());
        }
        self.timed(Stage::Models, |p| {
            for r in p.cfg.config.rule_typologies.clone() {
                let rt = RuleTypology::new(r.rules.clone())?;
                let rows = assign_all_rules(p.ds(), &rt)?;
                let mut csv = String::from("respondent_id,class\n");
                for (id, l) in &rows {
                    csv.push_str(&format!("{id},{l}\n"));
                }
                p.write(&format!("rule_assignments_{}.csv", file_stem(&r.name)), &csv)?;
            }
            for (name, outcome, mc) in p.outcomes()? {
                let populated = outcome.counts().iter().filter(|&&c| c > 0).count();
                if populated < 2 {
                    let why = format!("{populated} populated class(es)");
                    log::warn!("skipping `{name}` model: {why}");
                    p.skipped_models.insert(name, why);
                    continue;
                }
                let run = p.fit_one(&name, &outcome, &mc, stepwise)?;
                let report = model_report(run.reduced(), &run.lrt, run.stepwise.as_ref());
                let mut report = report;
                report["full_model"] = serde_json::json!({
                    "predictors": run.full.predictors,
                    "log_likelihood": run.full.log_likelihood,
                    "aic": run.full.aic,
                });
                let stem = file_stem(&name);
                p.write(&format!("model_{stem}.json"), &to_pretty(&report)?)?;
                p.write(&format!("odds_ratios_{stem}.csv"), &odds_ratio_csv(run.reduced(), Some(&run.lrt)))?;
                p.models.push(run);
            }
            Ok(())
        })
    }

    pub fn model(&self, name: &str) -> Option<&ModelRun> {
        self.models.iter().find(|m| m.name == name)
    }

    /// Class mapping and odds-ratio alignment of the reduced models.
    pub fn compare(&mut self) -> StageResult<()> {
        self.models(true)?;
        self.timed(Stage::Comparison, |p| {
            let typ = p.pattern_typology.as_ref().unwrap();
            let tree = p.tree.as_ref().unwrap();
            let mapping = map_typologies(typ, tree)?;
            // every classified respondent's leaf must be its class's leaf
            let ds = p.ds();
            let classes = pattern::assign_all(ds, typ)?;
            let leaves = tree::assign_all(ds, tree)?;
            let nested = classes.iter().zip(&leaves).all(|((_, a), (_, leaf))| {
                a.label().is_none_or(|c| mapping.leaf_of(c) == Some(leaf.as_str()))
            });
            let alignment = match (p.model("curve"), p.model("tree")) {
                (Some(a), Some(b)) => Some(alignment_report_for_fits("curve", a.reduced(), "tree", b.reduced(), Some(&mapping))),
                _ => None,
            };
            let mut rules = Vec::new();
            for r in &p.cfg.config.rule_typologies {
                let Some(m) = p.model(&r.name) else { continue };
                let mut vs = serde_json::Map::new();
                for other in ["curve", "tree"] {
                    if let Some(o) = p.model(other) {
                        let rep = alignment_report_for_fits(other, o.reduced(), &r.name, m.reduced(), None);
                        vs.insert(other.to_string(), serde_json::to_value(&rep).unwrap());
                    }
                }
                rules.push(serde_json::json!({"name": r.name, "alignment": vs}));
            }
            let json = serde_json::json!({
                "mapping": mapping,
                "classes_nested_in_leaves": nested,
                "alignment": alignment,
                "rule_typologies": rules,
                "skipped_models": p.skipped_models,
            });
            p.write("comparison.json", &to_pretty(&json)?)?;
            let mut md = match &alignment {
                Some(a) => a.to_markdown(),
                None => {
                    let mut s = String::from("# Model comparison\n\nOdds-ratio alignment needs fitted curve and tree models; ");
                    s.push_str("at least one was skipped.\n\n## Class mapping\n\n| class | leaf |\n|---|---|\n");
                    for m in &mapping.pairs {
                        s.push_str(&format!("| {} | {} |\n", m.class, m.leaf));
                    }
                    s
                }
            };
            for r in &p.cfg.config.rule_typologies {
                let Some(m) = p.model(&r.name) else { continue };
                for other in ["curve", "tree"] {
                    if let Some(o) = p.model(other) {
                        let rep = alignment_report_for_fits(other, o.reduced(), &r.name, m.reduced(), None);
                        md.push('\n');
                        md.push_str(&rep.to_markdown().replacen("# ", "## ", 1).replace("\n## ", "\n### "));
                    }
                }
            }
            p.write("comparison.md", &md)?;
            p.mapping = Some(mapping);
            p.alignment = alignment;
            Ok(())
        })
    }

    /// Stage counts gathered from the state, mirroring what each output
    /// file records.
    pub fn stage_counts(&self) -> serde_json::Value {
        let mut v = serde_json::Map::new();
        if let Some(ds) = &self.dataset {
            v.insert(
                "dataset".into(),
                serde_json::json!({"n": ds.n(), "retained_questions": self.retained, "dropped_questions": self.dropped}),
            );
        }
        if let (Some(t), Some(typ)) = (&self.pattern_table, &self.pattern_typology) {
            v.insert(
                "patterns".into(),
                serde_json::json!({
                    "distinct_patterns": t.len(),
                    "classes": typ.classes.len(),
                    "covered": typ.covered,
                    "denominator": typ.denominator,
                    "average_class_size": typ.average_class_size(),
                }),
            );
        }
        if let Some(c) = self.curve_converged {
            v.insert("curve".into(), serde_json::json!({"converged": c}));
        }
        if let (Some(sc), Some(tree)) = (&self.tree_stage_counts, &self.tree) {
            v.insert(
                "trees".into(),
                serde_json::json!({
                    "stage_counts": sc,
                    "leaves": tree.leaf_count(),
                    "leaf_counts": tree.leaf_counts(),
                }),
            );
        }
        if let Some(b) = &self.predictors {
            v.insert(
                "predictors".into(),
                serde_json::json!({"count": b.table.names.len(), "names": b.table.names}),
            );
        }
        if !self.models.is_empty() || !self.skipped_models.is_empty() {
            let mut m = serde_json::Map::new();
            for run in &self.models {
                let r = run.reduced();
                m.insert(
                    run.name.clone(),
                    serde_json::json!({
                        "n_used": r.n_used,
                        "classes": r.classes.len() + 1,
                        "initial_predictors": run.full.predictors.len(),
                        "retained_predictors": r.predictors,
                        "aic": r.aic,
                    }),
                );
            }
            for (name, why) in &self.skipped_models {
                m.insert(name.clone(), serde_json::json!({"skipped": why}));
            }
            v.insert("models".into(), m.into());
        }
        if let Some(a) = &self.alignment {
            let count = |s: crate::comparison::RetentionStatus| a.predictors.iter().filter(|p| p.status == s).count();
            v.insert(
                "comparison".into(),
                serde_json::json!({
                    "both_retained": count(crate::comparison::RetentionStatus::BothRetained),
                    "curve_only": count(crate::comparison::RetentionStatus::AOnly),
                    "tree_only": count(crate::comparison::RetentionStatus::BOnly),
                }),
            );
        }
        serde_json::Value::Object(v)
    }

    /// Write manifest.json (deterministic) and timings.json (wall-clock).
    pub fn finish(&mut self) -> StageResult<serde_json::Value> {
        let manifest = serde_json::json!({
            "tool": "typogen",
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.cfg.sha256,
            "seed": self.cfg.config.seed,
            "dataset_sha256": self.dataset_sha256,
            "stage_counts": self.stage_counts(),
            "outputs": self.outputs,
        });
        let text = to_pretty(&manifest).at(Stage::Manifest)?;
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e)).at(Stage::Manifest)?;
        let timings = to_pretty(&serde_json::json!({"seconds": self.timings})).at(Stage::Manifest)?;
        let path = self.out_dir.join("timings.json");
        fs::write(&path, timings).map_err(|e| Error::io(&path, e)).at(Stage::Manifest)?;
        Ok(manifest)
    }

    /// Record a failure as error.json in the output directory.
    pub fn write_error(out_dir: &Path, err: &StageError) {
        let path = out_dir.join("error.json");
        if fs::create_dir_all(out_dir).is_ok() {
            let _ = fs::write(&path, to_pretty(&err.to_json()).unwrap_or_default());
        }
    }
}

/// Lowercase file-name form of a label.
pub fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

/// Full run: every stage, then the manifest.
pub fn run_pipeline(cfg: LoadedConfig, out_dir: Option<PathBuf>) -> StageResult<Pipeline> {
    let mut p = Pipeline::new(cfg, out_dir)?;
    p.curve()?;
    p.compare()?;
    p.finish()?;
    Ok(p)
}

/// Load a config file and run everything; failures are written to
/// error.json in the output directory.
pub fn run_config_file(path: impl AsRef<Path>, out_dir: Option<PathBuf>) -> StageResult<Pipeline> {
    let cfg = LoadedConfig::load(path).at(Stage::Config)?;
    let dir = out_dir.clone().unwrap_or_else(|| cfg.output_dir());
    run_pipeline(cfg, out_dir).inspect_err(|e| Pipeline::write_error(&dir, e))
}
