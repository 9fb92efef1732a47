//! Command-line orchestration. Every command resolves a flat JSON config
//! (file values overridden by flags), validates it, snapshots it as
//! `config.json` in the output directory, then runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    compute_thresholds, train_toy_backbone, BackboneConfig, BackboneHandle, FeatureBank, LabelMode,
    ThresholdTable, DEFAULT_QUANTILE_P, DEFAULT_SAMPLE_CAP,
};
use crate::bias::{annotation_ratios, audit, GroupedDataset};
use crate::data::{split_concepts, AnnotatedImage, DatasetManifest};
use crate::embedding::{write_text_rows, EmbeddingTable};
use crate::eval::{
    assign_pairs, novel_concept_recall, score_model, GroundTruth, NovelRecall, ScoreReport,
    DEFAULT_IOU_THRESHOLD, DEFAULT_X_SWEEP,
};
use crate::explainer::{train_explainer, ExplainerModel, TrainConfig};
use crate::probe::{Probe, ProbeParams, Strategy};
use crate::synth::{generate, generate_vocabulary, SynthSpec, VocabularySpec};
use crate::{plot, Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "semfilter", version, about = "Explain CNN filters with words")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes corpus with masks and a matching vocabulary.
    Synth,
    /// Train the toy CNN backbone on a manifest.
    TrainBackbone,
    /// Train the feature explainer on masked features of annotated concepts.
    TrainExplainer,
    /// Explain every filter of the probed layer.
    Explain,
    /// Score explanations against IoU-matched concepts for each strategy.
    Evaluate,
    /// Sweep the annotated-concept fraction and measure novel-concept recall.
    Discover,
    /// Rank filters by group disparity and aggregate per-concept group ratios.
    BiasAudit,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainBackbone => "train-backbone",
            Command::TrainExplainer => "train-explainer",
            Command::Explain => "explain",
            Command::Evaluate => "evaluate",
            Command::Discover => "discover",
            Command::BiasAudit => "bias-audit",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub layer: Option<String>,
    /// attention | original | image-mask | act-mask
    #[arg(long, global = true)]
    pub strategy: Option<Strategy>,
    #[arg(long, global = true)]
    pub s: Option<usize>,
    #[arg(long, global = true)]
    pub p_images: Option<usize>,
    #[arg(long, global = true)]
    pub top_x: Option<usize>,
    #[arg(long, global = true)]
    pub quantile_p: Option<f64>,
    #[arg(long, global = true)]
    pub iou_threshold: Option<f64>,
    /// Worker thread cap; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    /// Toy CNN checkpoint or feature dump.
    #[arg(long, global = true)]
    pub backbone: Option<PathBuf>,
    #[arg(long, global = true)]
    pub explainer: Option<PathBuf>,
}

/// Flat run configuration; this exact structure is what `config.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub explainer: Option<PathBuf>,
    /// Defaults to the backbone's last layer.
    pub layer: Option<String>,
    pub jobs: Option<usize>,

    /// `SynthSpec` JSON; when absent `synth_preset` and `n_images` are used.
    pub synth_spec: Option<PathBuf>,
    /// `shapes` or `planted_bias`.
    pub synth_preset: String,
    pub n_images: usize,

    pub labels: LabelMode,
    pub backbone_epochs: usize,
    pub backbone_learning_rate: f64,
    pub backbone_batch_size: usize,
    pub val_fraction: f64,

    pub explainer_epochs: usize,
    pub explainer_learning_rate: f64,
    pub explainer_batch_size: usize,
    /// Negatives per hinge term; 0 uses every other training concept.
    pub negatives: usize,
    pub margin: f64,
    pub hidden: Option<usize>,
    pub monitor_fraction: f64,
    /// Fraction of manifest concepts the explainer is trained on.
    pub train_fraction: f64,

    pub strategy: Strategy,
    /// Strategies compared by `evaluate`.
    pub strategies: Vec<Strategy>,
    pub s: usize,
    pub p_images: usize,
    pub top_x: usize,
    pub clamp_attention: bool,
    pub quantile_p: f64,
    pub sample_cap: usize,
    pub iou_threshold: f64,
    pub x_sweep: Vec<usize>,
    pub fractions: Vec<f64>,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let tc = TrainConfig::default();
        let pp = ProbeParams::default();
        Self {
            out: PathBuf::from("run"),
            seed: 0,
            manifest: None,
            embeddings: None,
            backbone: None,
            explainer: None,
            layer: None,
            jobs: None,
            synth_spec: None,
            synth_preset: "shapes".into(),
            n_images: 2000,
            labels: bb.labels,
            backbone_epochs: bb.epochs,
            backbone_learning_rate: bb.learning_rate,
            backbone_batch_size: bb.batch_size,
            val_fraction: bb.val_fraction,
            explainer_epochs: tc.epochs,
            explainer_learning_rate: tc.learning_rate,
            explainer_batch_size: tc.batch_size,
            negatives: tc.negatives,
            margin: tc.margin,
            hidden: tc.hidden,
            monitor_fraction: tc.monitor_fraction,
            train_fraction: 1.0,
            strategy: pp.strategy,
            strategies: Strategy::ALL.to_vec(),
            s: pp.s,
            p_images: pp.p_images,
            top_x: pp.top_x,
            clamp_attention: pp.clamp_attention,
            quantile_p: DEFAULT_QUANTILE_P,
            sample_cap: DEFAULT_SAMPLE_CAP,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            x_sweep: DEFAULT_X_SWEEP.to_vec(),
            fractions: vec![0.4, 0.6, 0.8],
            top_k: 10,
        }
    }
}

fn required<'a>(field: &str, v: &'a Option<PathBuf>) -> Result<&'a Path> {
    let p = v
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("`{field}` path is required for this command")))?;
    if !p.exists() {
        return Err(Error::NotFound(format!("{field} `{}`", p.display())));
    }
    Ok(p)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// File values (if any) with flags applied on top.
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut c = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &flags.$f { c.$f = v.clone().into(); } )*};
        }
        set!(seed, strategy, s, p_images, top_x, quantile_p, iou_threshold, out);
        if let Some(v) = &flags.layer {
            c.layer = Some(v.clone());
        }
        if let Some(v) = flags.jobs {
            c.jobs = Some(v);
        }
        for (slot, v) in [
            (&mut c.manifest, &flags.manifest),
            (&mut c.embeddings, &flags.embeddings),
            (&mut c.backbone, &flags.backbone),
            (&mut c.explainer, &flags.explainer),
        ] {
            if v.is_some() {
                *slot = v.clone();
            }
        }
        Ok(c)
    }

    pub fn probe_params(&self) -> ProbeParams {
        ProbeParams {
            strategy: self.strategy,
            s: self.s,
            p_images: self.p_images,
            top_x: self.top_x,
            clamp_attention: self.clamp_attention,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            epochs: self.backbone_epochs,
            learning_rate: self.backbone_learning_rate,
            batch_size: self.backbone_batch_size,
            val_fraction: self.val_fraction,
            labels: self.labels,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.explainer_epochs,
            learning_rate: self.explainer_learning_rate,
            batch_size: self.explainer_batch_size,
            negatives: self.negatives,
            margin: self.margin,
            hidden: self.hidden,
            monitor_fraction: self.monitor_fraction,
            seed: self.seed,
        }
    }

    /// Range checks plus the inputs `command` needs; runs before any compute.
    pub fn validate(&self, command: Command) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.probe_params().validate()?;
        self.train_config().validate()?;
        if !(self.quantile_p > 0.0 && self.quantile_p < 1.0) {
            return bad(format!("quantile_p = {} must lie in (0, 1)", self.quantile_p));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return bad(format!("iou_threshold = {} must lie in [0, 1)", self.iou_threshold));
        }
        if self.x_sweep.is_empty() || self.x_sweep.contains(&0) {
            return bad("x_sweep must be nonempty with entries ≥ 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction = {} must lie in (0, 1]", self.train_fraction));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("fractions must be nonempty, each in (0, 1)".into());
        }
        if self.strategies.is_empty() {
            return bad("strategies must be nonempty".into());
        }
        if self.backbone_batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("backbone_batch_size must be ≥ 1 and val_fraction in [0, 1)".into());
        }
        if self.backbone_learning_rate.is_nan() || self.backbone_learning_rate <= 0.0 {
            return bad("backbone_learning_rate must be positive".into());
        }
        if self.sample_cap == 0 || self.top_k == 0 || self.jobs == Some(0) {
            return bad("sample_cap, top_k and jobs must be ≥ 1".into());
        }
        match command {
            Command::Synth => {
                if let Some(p) = &self.synth_spec {
                    required("synth_spec", &Some(p.clone()))?;
                } else if !matches!(self.synth_preset.as_str(), "shapes" | "planted_bias") {
                    return bad(format!(
                        "synth_preset `{}` is not one of shapes, planted_bias",
                        self.synth_preset
                    ));
                } else if self.n_images == 0 {
                    return bad("n_images must be ≥ 1".into());
                }
            }
            Command::TrainBackbone => {
                required("manifest", &self.manifest)?;
            }
            Command::TrainExplainer | Command::Discover => {
                required("manifest", &self.manifest)?;
                required("embeddings", &self.embeddings)?;
                required("backbone", &self.backbone)?;
            }
            Command::Explain | Command::Evaluate | Command::BiasAudit => {
                required("manifest", &self.manifest)?;
                required("embeddings", &self.embeddings)?;
                required("backbone", &self.backbone)?;
                required("explainer", &self.explainer)?;
            }
        }
        Ok(())
    }
}

/// Files written by one command, relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub out: PathBuf,
    pub outputs: Vec<String>,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        if dir.join(CONFIG_SNAPSHOT).exists() {
            return Err(Error::InvalidArgument(format!(
                "`{}` already holds a run; choose a fresh --out",
                dir.display()
            )));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }
}

/// Inputs shared by the commands that probe a trained backbone.
struct Loaded {
    images: Vec<AnnotatedImage>,
    manifest: DatasetManifest,
    table: EmbeddingTable,
    handle: BackboneHandle,
    bank: FeatureBank,
    thresholds: ThresholdTable,
}

impl Loaded {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(required("manifest", &cfg.manifest)?)?;
        let images = manifest.load_all()?;
        let table = EmbeddingTable::load(required("embeddings", &cfg.embeddings)?, None)?;
        let handle = BackboneHandle::open(required("backbone", &cfg.backbone)?)?;
        let layer = cfg.layer.clone().unwrap_or_else(|| handle.default_layer());
        let bank = FeatureBank::build(&handle, &images, &layer)?;
        let thresholds = compute_thresholds(&bank, cfg.quantile_p, cfg.sample_cap)?;
        Ok(Self {
            images,
            manifest,
            table,
            handle,
            bank,
            thresholds,
        })
    }

    fn probe<'a>(&'a self, explainer: &'a ExplainerModel) -> Probe<'a> {
        Probe {
            backbone: &self.handle,
            explainer,
            table: &self.table,
            images: &self.images,
            bank: &self.bank,
            thresholds: Some(&self.thresholds),
        }
    }

    fn ground_truth(&self, cfg: &RunConfig) -> Result<Vec<GroundTruth>> {
        let filters: Vec<usize> = (0..self.bank.n_filters()).collect();
        assign_pairs(
            &self.bank,
            &self.images,
            &self.thresholds,
            &filters,
            cfg.p_images,
            cfg.iou_threshold,
        )
    }

    fn explainer(&self, cfg: &RunConfig) -> Result<ExplainerModel> {
        let model = ExplainerModel::load(required("explainer", &cfg.explainer)?)?;
        model.check_table(&self.table)?;
        Ok(model)
    }
}

#[derive(Debug, Serialize)]
struct StrategyScore<'a> {
    strategy: Strategy,
    report: &'a ScoreReport,
    novel: Option<NovelRecall>,
}

#[derive(Debug, Serialize)]
struct DiscoverRow {
    fraction: f64,
    train: Vec<String>,
    heldout: Vec<String>,
    novel: NovelRecall,
    recall: Vec<f64>,
}

/// Runs one command with an already resolved config.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate(command)?;
    let mut out = Outputs::create(&cfg.out)?;
    out.json(CONFIG_SNAPSHOT, cfg)?;
    match command {
        Command::Synth => {
            let spec = match &cfg.synth_spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Format {
                        path: p.clone(),
                        message: e.to_string(),
                    })?
                }
                None if cfg.synth_preset == "planted_bias" => SynthSpec::planted_bias(cfg.n_images, cfg.seed),
                None => SynthSpec::default_shapes(cfg.n_images, cfg.seed),
            };
            generate(&spec, &out.dir)?;
            out.written.extend(["manifest.jsonl".to_string(), "images/".into(), "masks/".into()]);
            out.json("spec.json", &spec)?;
            // the vocabulary stays fixed across corpus seeds, like a pretrained table
            let rows = generate_vocabulary(&spec.concepts, &VocabularySpec::default())?;
            let p = out.path("embeddings.txt");
            write_text_rows(&p, rows.iter().map(|(t, v)| (t.as_str(), v.clone())))?;
        }
        Command::TrainBackbone => {
            let manifest = DatasetManifest::load(required("manifest", &cfg.manifest)?)?;
            let images = manifest.load_all()?;
            let (net, report) = train_toy_backbone(&images, &cfg.backbone_config())?;
            let p = out.path("backbone.json");
            net.save(&p)?;
            out.json("training_report.json", &report)?;
        }
        Command::TrainExplainer => {
            let manifest = DatasetManifest::load(required("manifest", &cfg.manifest)?)?;
            let images = manifest.load_all()?;
            let table = EmbeddingTable::load(required("embeddings", &cfg.embeddings)?, None)?;
            let handle = BackboneHandle::open(required("backbone", &cfg.backbone)?)?;
            let layer = cfg.layer.clone().unwrap_or_else(|| handle.default_layer());
            let bank = FeatureBank::build(&handle, &images, &layer)?;
            let split = if cfg.train_fraction < 1.0 {
                split_concepts(manifest.concepts(), cfg.train_fraction, cfg.seed)?
            } else {
                crate::data::ConceptSplit {
                    train: manifest.concepts().to_vec(),
                    heldout: vec![],
                }
            };
            let (model, log) = train_explainer(&bank, &images, &table, &split.train, &cfg.train_config())?;
            let p = out.path("explainer.json");
            model.save(&p)?;
            out.json("train_log.json", &log)?;
            out.json("split.json", &split)?;
        }
        Command::Explain => {
            let l = Loaded::open(cfg)?;
            let model = l.explainer(cfg)?;
            let outcome = l.probe(&model).explain_model(None, &cfg.probe_params());
            out.text("explanations.jsonl", &outcome.to_jsonl()?)?;
            out.json("thresholds.json", &l.thresholds)?;
        }
        Command::Evaluate => {
            let l = Loaded::open(cfg)?;
            let model = l.explainer(cfg)?;
            let gt = l.ground_truth(cfg)?;
            let novel: Vec<String> = l
                .manifest
                .concepts()
                .iter()
                .filter(|c| !model.concepts().contains(c))
                .cloned()
                .collect();
            let mut reports = Vec::new();
            for &strategy in &cfg.strategies {
                if strategy == Strategy::ImageMasking && !l.handle.supports_extraction() {
                    log::warn!("skipping image_masking: the backbone cannot re-extract features");
                    continue;
                }
                let params = ProbeParams {
                    strategy,
                    ..cfg.probe_params()
                };
                let outcome = l.probe(&model).explain_model(None, &params);
                let report = score_model(&outcome.explanations, &gt, &cfg.x_sweep)?;
                let nr = (!novel.is_empty())
                    .then(|| novel_concept_recall(&outcome.explanations, &gt, &novel, cfg.top_x));
                reports.push((strategy, report, nr));
            }
            let rows: Vec<StrategyScore> = reports
                .iter()
                .map(|(s, r, n)| StrategyScore {
                    strategy: *s,
                    report: r,
                    novel: n.clone(),
                })
                .collect();
            out.json("scores.json", &rows)?;
            let mut csv = String::from("strategy");
            for x in &cfg.x_sweep {
                csv.push_str(&format!(",recall@{x},precision@{x}"));
            }
            csv.push_str(",pairs_scored,pairs_skipped\n");
            for (s, r, _) in &reports {
                csv.push_str(s.name());
                for (rc, pr) in r.recall.iter().zip(&r.precision) {
                    csv.push_str(&format!(",{rc:.6},{pr:.6}"));
                }
                csv.push_str(&format!(",{},{}\n", r.pairs_scored, r.pairs_skipped));
            }
            out.text("scores.csv", &csv)?;
            for (s, r, _) in &reports {
                out.text(&format!("scores_{}.csv", s.name()), &r.to_csv())?;
            }
            let series: Vec<(String, Vec<(usize, f64)>)> = reports
                .iter()
                .map(|(s, r, _)| {
                    (
                        s.name().to_string(),
                        r.x_sweep.iter().copied().zip(r.recall.iter().copied()).collect(),
                    )
                })
                .collect();
            if !series.is_empty() {
                let p = out.path("recall_vs_x.svg");
                plot::recall_vs_x(&p, &series)?;
            }
        }
        Command::Discover => {
            let l = Loaded::open(cfg)?;
            let gt = l.ground_truth(cfg)?;
            let mut rows = Vec::new();
            for &fraction in &cfg.fractions {
                let split = split_concepts(l.manifest.concepts(), fraction, cfg.seed)?;
                let (model, _) = train_explainer(&l.bank, &l.images, &l.table, &split.train, &cfg.train_config())?;
                let outcome = l.probe(&model).explain_model(None, &cfg.probe_params());
                let novel = novel_concept_recall(&outcome.explanations, &gt, &split.heldout, cfg.top_x);
                let report = score_model(&outcome.explanations, &gt, &cfg.x_sweep)?;
                rows.push(DiscoverRow {
                    fraction,
                    train: split.train,
                    heldout: split.heldout,
                    novel,
                    recall: report.recall,
                });
            }
            out.json("discover.json", &rows)?;
        }
        Command::BiasAudit => {
            let l = Loaded::open(cfg)?;
            let model = l.explainer(cfg)?;
            let groups = GroupedDataset::from_images(&l.images)?;
            let mut report = audit(&l.probe(&model), &groups, &cfg.probe_params(), cfg.top_k)?;
            let reference: BTreeMap<String, f64> = annotation_ratios(&l.images, &groups);
            if let Err(e) = report.validate_against(&reference) {
                log::warn!("no correlation against annotation ratios: {e}");
            }
            out.json("bias_report.json", &report)?;
            out.text("bias_filters.csv", &report.filters_csv())?;
            out.text("bias_concepts.csv", &report.concepts_csv())?;
            if let (Some(csv), Some(v)) = (report.scatter_csv(), report.validation.as_ref()) {
                out.text("bias_scatter.csv", &csv)?;
                let p = out.path("bias_scatter.svg");
                plot::ratio_scatter(&p, &v.points, v.pearson)?;
            }
        }
    }
    Ok(RunSummary {
        command: command.name().to_string(),
        out: cfg.out.clone(),
        outputs: out.written,
    })
}

/// Resolves flags and runs, inside a thread pool capped by `jobs` when set.
pub fn run(cli: &Cli) -> Result<RunSummary> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    cfg.validate(cli.command)?;
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(|| execute(cli.command, &cfg)),
        None => execute(cli.command, &cfg),
    }
}

/// Machine-readable failure record printed by the binary.
pub fn error_record(command: Option<Command>, err: &Error) -> serde_json::Value {
    serde_json::json!({
        "command": command.map(Command::name),
        "error": err.kind(),
        "message": err.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("semfilter").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"seed": 4, "s": 3, "strategy": "activation_masking"}"#).unwrap();
        let cli = parse(&["explain", "--config", path.to_str().unwrap(), "--s", "7", "--strategy", "image-mask"]);
        let cfg = RunConfig::resolve(&cli.flags).unwrap();
        assert_eq!((cfg.seed, cfg.s, cfg.strategy), (4, 7, Strategy::ImageMasking));
        assert_eq!(cfg.quantile_p, 0.005);
        assert_eq!(cfg.iou_threshold, 0.04);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig {
            hidden: Some(16),
            layer: Some("conv3".into()),
            ..Default::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"sead": 4}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn validation_runs_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().join("o"),
            quantile_p: 1.5,
            ..Default::default()
        };
        assert!(matches!(execute(Command::Synth, &cfg), Err(Error::InvalidArgument(_))));
        assert!(!cfg.out.exists());
        let cfg = RunConfig {
            out: dir.path().join("o"),
            manifest: Some(dir.path().join("missing.jsonl")),
            ..Default::default()
        };
        let err = execute(Command::TrainBackbone, &cfg).unwrap_err();
        assert!(err.to_string().contains("missing.jsonl"));
        assert_eq!(error_record(Some(Command::TrainBackbone), &err)["error"], "not_found");
    }
}
