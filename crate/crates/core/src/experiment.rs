//! End-to-end experiment: dataset → imputation and splits → both models →
//! thresholds → evaluation → threshold sweeps. Every stage reads its inputs
//! from, and writes its outputs to, one output directory, so stages can run
//! one at a time or all together with identical results.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    carry_forward_impute, chained_impute, encode, impute_categorical_modes, load_table, make_splits, parse_table,
    synth_generate, ChainedImputeConfig, ColumnKind, EncodedDataset, RawTable, Schema, SplitBundle, SynthConfig,
};
use crate::decision::{
    f1_vs_tau_curve, select_threshold_or_fallback, sweep_thresholds, uncertainty, OpenLabel, SweepRequest, SweepRule,
    ThresholdChoice, ThresholdCurve, ThresholdSelectionConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, incremental_novel_curve, open_set_universe, scored_set, ConfusionLayout, EvalReport, PipelineScores,
    ThresholdSummary,
};
use crate::gmvae::{pretrain_phi_z, train_gmvae, GmvaeCheckpoint, GmvaeConfig, GmvaeEpoch, GmvaeModel, PretrainConfig, PretrainLog};
use crate::iiloss::{fit_contamination_threshold, train_iiloss, ContaminationConfig, IiLossCheckpoint, IiLossConfig, IiLossEpoch, IiLossModel};
use crate::nn::AdamConfig;
use crate::training::{derive_seed, stage_rng, StoppingConfig};

pub const DATA_CSV: &str = "data.csv";
pub const SCHEMA_JSON: &str = "schema.json";
pub const GROUND_TRUTH_JSON: &str = "ground_truth.json";
pub const IMPUTED_CSV: &str = "imputed.csv";
pub const SPLITS_JSON: &str = "splits.json";
pub const GMVAE_JSON: &str = "gmvae.json";
pub const GMVAE_LOG_JSON: &str = "gmvae_log.json";
pub const IILOSS_JSON: &str = "iiloss.json";
pub const IILOSS_LOG_JSON: &str = "iiloss_log.json";
pub const THRESHOLD_JSON: &str = "threshold.json";
pub const THRESHOLD_CSV: &str = "threshold_curve.csv";
pub const CONTAMINATION_JSON: &str = "contamination.json";
pub const SCORES_JSON: &str = "scores.json";
pub const REPORT_JSON: &str = "report.json";
pub const CURVES_CSV: &str = "curves.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

pub const GMVAE_PIPELINE: &str = "gmvae+uncertainty";
pub const IILOSS_PIPELINE: &str = "iiloss+outlier_score";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Csv { csv: PathBuf, schema: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputationConfig {
    /// Carry values forward within each patient before chained imputation.
    /// Skipped when the table has no patient and encounter columns.
    pub carry_forward: bool,
    pub chained: ChainedImputeConfig,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            carry_forward: true,
            chained: ChainedImputeConfig::default(),
        }
    }
}

/// GMVAE hyperparameters; the class count and likelihood layout come from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmvaeSettings {
    pub dim_z: usize,
    pub dim_w: usize,
    pub phi_z_hidden: Vec<usize>,
    pub beta_hidden: Vec<usize>,
    pub mc_samples: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub stopping: StoppingConfig,
    pub pretrain: PretrainConfig,
}

impl Default for GmvaeSettings {
    fn default() -> Self {
        let c = GmvaeConfig::with_defaults(2, 1);
        Self {
            dim_z: c.dim_z,
            dim_w: c.dim_w,
            phi_z_hidden: c.phi_z_hidden,
            beta_hidden: c.beta_hidden,
            mc_samples: c.mc_samples,
            batch_size: c.batch_size,
            adam: c.adam,
            stopping: c.stopping,
            pretrain: c.pretrain,
        }
    }
}

impl GmvaeSettings {
    pub fn to_config(&self, num_classes: usize, data: &EncodedDataset) -> GmvaeConfig {
        GmvaeConfig {
            components: vec![1; num_classes],
            dim_z: self.dim_z,
            dim_w: self.dim_w,
            class_prior: None,
            reconstruction: data.reconstruction_blocks(),
            phi_z_hidden: self.phi_z_hidden.clone(),
            beta_hidden: self.beta_hidden.clone(),
            mc_samples: self.mc_samples,
            batch_size: self.batch_size,
            adam: self.adam,
            stopping: self.stopping,
            pretrain: self.pretrain.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub rule: SweepRule,
    /// Defaults to the selected τ* or the configured α.
    #[serde(default)]
    pub center: Option<f64>,
    #[serde(default = "default_halfwidth")]
    pub halfwidth: f64,
    #[serde(default = "default_sweep_step")]
    pub step: f64,
}

fn default_halfwidth() -> f64 {
    0.05
}

fn default_sweep_step() -> f64 {
    0.01
}

fn default_sweeps() -> Vec<SweepSettings> {
    [SweepRule::Uncertainty, SweepRule::OutlierScore]
        .into_iter()
        .map(|rule| SweepSettings {
            rule,
            center: None,
            halfwidth: default_halfwidth(),
            step: default_sweep_step(),
        })
        .collect()
}

fn default_test_sets() -> usize {
    100
}

fn default_alpha() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub known_classes: Vec<String>,
    /// In the order novel classes are introduced during evaluation.
    pub novel_classes: Vec<String>,
    #[serde(default)]
    pub imputation: ImputationConfig,
    #[serde(default = "default_test_sets")]
    pub n_test_sets: usize,
    #[serde(default)]
    pub gmvae: GmvaeSettings,
    #[serde(default)]
    pub iiloss: IiLossConfig,
    #[serde(default)]
    pub threshold: ThresholdSelectionConfig,
    /// Contamination ratio α of the outlier-score threshold.
    #[serde(default = "default_alpha")]
    pub contamination: f64,
    #[serde(default = "default_sweeps")]
    pub sweeps: Vec<SweepSettings>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative dataset paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut config: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if let DatasetSource::Csv { csv, schema } = &mut config.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [csv, schema] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let known: HashSet<&String> = self.known_classes.iter().collect();
        let novel: HashSet<&String> = self.novel_classes.iter().collect();
        if known.len() != self.known_classes.len() || novel.len() != self.novel_classes.len() {
            return Err(Error::InvalidConfig("duplicate class name in known or novel list".into()));
        }
        if let Some(c) = known.intersection(&novel).next() {
            return Err(Error::InvalidConfig(format!("class `{c}` is both known and novel")));
        }
        if known.len() < 2 {
            return Err(Error::InvalidConfig("at least two known classes".into()));
        }
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return Err(Error::InvalidConfig("contamination ratio outside (0, 1)".into()));
        }
        if self.n_test_sets == 0 {
            return Err(Error::InvalidConfig("at least one test set".into()));
        }
        self.threshold.validate()?;
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.validate()?;
                self.check_label_cover(&s.class_names)?;
            }
            DatasetSource::Csv { csv, schema } => {
                for p in [csv, schema] {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("dataset path `{}` does not exist", p.display())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Known and novel classes together are exactly the label set.
    pub fn check_label_cover(&self, class_names: &[String]) -> Result<()> {
        let labels: HashSet<&String> = class_names.iter().collect();
        let assigned: HashSet<&String> = self.known_classes.iter().chain(&self.novel_classes).collect();
        if labels != assigned {
            return Err(Error::InvalidConfig(format!(
                "known ∪ novel classes {:?} differ from the dataset's classes {:?}",
                assigned, labels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Impute,
    TrainGmvae,
    TrainIiloss,
    SelectThreshold,
    FitThreshold,
    Evaluate,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Impute,
        Stage::TrainGmvae,
        Stage::TrainIiloss,
        Stage::SelectThreshold,
        Stage::FitThreshold,
        Stage::Evaluate,
        Stage::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Impute => "impute",
            Stage::TrainGmvae => "train-gmvae",
            Stage::TrainIiloss => "train-iiloss",
            Stage::SelectThreshold => "select-threshold",
            Stage::FitThreshold => "fit-threshold",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// External input files with their hashes.
    pub inputs: Vec<ArtifactEntry>,
    pub completed_stages: Vec<String>,
    pub failure: Option<StageFailure>,
    pub artifacts: Vec<ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn entry(path: &Path, label: String) -> Result<ArtifactEntry> {
    let bytes = fs::read(path)?;
    Ok(ArtifactEntry {
        path: label,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl Manifest {
    /// Hashes every file in `out` except the manifest itself.
    fn build(config: &ExperimentConfig, out: &Path, completed: Vec<String>, failure: Option<StageFailure>) -> Result<Self> {
        let mut names: Vec<String> = fs::read_dir(out)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_JSON)
            .collect();
        names.sort();
        let artifacts = names
            .into_iter()
            .map(|n| entry(&out.join(&n), n))
            .collect::<Result<Vec<_>>>()?;
        let inputs = match &config.dataset {
            DatasetSource::Csv { csv, schema } => vec![
                entry(csv, csv.display().to_string())?,
                entry(schema, schema.display().to_string())?,
            ],
            DatasetSource::Synthetic(_) => Vec::new(),
        };
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config_sha256: sha256_hex(&serde_json::to_vec(config)?),
            inputs,
            completed_stages: completed,
            failure,
            artifacts,
        })
    }

    /// Confirms every listed artifact exists with the recorded hash.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for a in &self.artifacts {
            let path = out.join(&a.path);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            if sha256_hex(&fs::read(&path)?) != a.sha256 {
                return Err(Error::InvalidDataset(format!("artifact `{}` does not match its hash", a.path)));
            }
        }
        Ok(())
    }
}

/// Reads and writes artifacts in the output directory.
struct Artifacts<'a> {
    dir: &'a Path,
}

impl Artifacts<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read_string(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
        Ok(fs::read_to_string(p)?)
    }

    fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_str(&self.read_string(name)?)?)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.path(name), contents)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn schema(&self) -> Result<Schema> {
        let s: Schema = self.read_json(SCHEMA_JSON)?;
        s.validate()?;
        Ok(s)
    }

    fn imputed(&self) -> Result<RawTable> {
        parse_table(&self.read_string(IMPUTED_CSV)?, &self.schema()?)
    }

    fn splits(&self) -> Result<SplitBundle> {
        self.read_json(SPLITS_JSON)
    }

    /// The imputed table encoded with training-split statistics.
    fn encoded(&self) -> Result<(EncodedDataset, SplitBundle)> {
        let table = self.imputed()?;
        let splits = self.splits()?;
        Ok((encode(&table, &splits.train)?, splits))
    }

    fn gmvae(&self) -> Result<GmvaeModel> {
        GmvaeModel::from_checkpoint(&self.read_json::<GmvaeCheckpoint>(GMVAE_JSON)?)
    }

    fn iiloss(&self) -> Result<IiLossModel> {
        IiLossModel::from_checkpoint(&self.read_json::<IiLossCheckpoint>(IILOSS_JSON)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmvaeTrainingLog {
    pub pretrain: PretrainLog,
    pub epochs: Vec<GmvaeEpoch>,
    /// `φ_z` checksum right after pretraining and after training.
    pub phi_z_checksum_pretrained: u64,
    pub phi_z_checksum_trained: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdArtifact {
    pub choice: ThresholdChoice,
    pub curve: ThresholdCurve,
    pub epsilon1: f64,
    pub epsilon2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScoresArtifact {
    pub gmvae: PipelineScores,
    pub iiloss: PipelineScores,
}

fn stage_synth(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    match &config.dataset {
        DatasetSource::Synthetic(s) => {
            let synth = synth_generate(s, config.seed)?;
            a.write(DATA_CSV, synth.table.to_csv()?)?;
            a.write_json(SCHEMA_JSON, &synth.table.schema)?;
            a.write_json(GROUND_TRUTH_JSON, &synth.truth)?;
        }
        DatasetSource::Csv { csv, schema } => {
            let table = load_table(csv, schema)?;
            a.write(DATA_CSV, table.to_csv()?)?;
            a.write_json(SCHEMA_JSON, &table.schema)?;
        }
    }
    Ok(())
}

fn class_ids(names: &[String], table: &RawTable) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            table
                .class_id(n)
                .ok_or_else(|| Error::InvalidConfig(format!("class `{n}` is not in the dataset")))
        })
        .collect()
}

fn stage_impute(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    let table = parse_table(&a.read_string(DATA_CSV)?, &a.schema()?)?;
    config.check_label_cover(&table.class_names)?;
    let has_history = table.schema.column_of_kind(ColumnKind::PatientId).is_some()
        && table.schema.column_of_kind(ColumnKind::EncounterOrder).is_some();
    let mut t = table;
    if config.imputation.carry_forward && has_history {
        t = carry_forward_impute(&t)?;
    }
    t = impute_categorical_modes(&t)?;
    t = chained_impute(&t, &config.imputation.chained)?;
    let known = class_ids(&config.known_classes, &t)?;
    let novel = class_ids(&config.novel_classes, &t)?;
    let splits = make_splits(t.labels(), &known, &novel, config.n_test_sets, derive_seed(config.seed, "splits"))?;
    splits.verify(t.labels())?;
    a.write(IMPUTED_CSV, t.to_csv()?)?;
    a.write_json(SPLITS_JSON, &splits)?;
    Ok(())
}

fn stage_train_gmvae(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    let (data, splits) = a.encoded()?;
    let train = data.subset(&splits.train);
    let validation = data.subset(&splits.validation);
    let gcfg = config.gmvae.to_config(splits.known_classes.len(), &data);
    let mut model = GmvaeModel::new(gcfg, splits.known_classes.clone(), &mut stage_rng(config.seed, "gmvae-init"))?;
    let pretrain = pretrain_phi_z(&mut model, &train, config.seed)?;
    let before = model.phi_z.checksum();
    let trained = train_gmvae(model, &train, &validation, config.seed)?;
    a.write_json(GMVAE_JSON, &trained.model.to_checkpoint())?;
    a.write_json(
        GMVAE_LOG_JSON,
        &GmvaeTrainingLog {
            pretrain,
            epochs: trained.log,
            phi_z_checksum_pretrained: before,
            phi_z_checksum_trained: trained.model.phi_z.checksum(),
        },
    )
}

fn stage_train_iiloss(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    let (data, splits) = a.encoded()?;
    let trained = train_iiloss(
        &config.iiloss,
        &data.subset(&splits.train),
        &data.subset(&splits.validation),
        &splits.known_classes,
        derive_seed(config.seed, "iiloss"),
    )?;
    a.write_json(IILOSS_JSON, &trained.model.to_checkpoint())?;
    a.write_json::<Vec<IiLossEpoch>>(IILOSS_LOG_JSON, &trained.log)
}

fn stage_select_threshold(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    let (data, splits) = a.encoded()?;
    let model = a.gmvae()?;
    let centroids = model.class_centroids(&data.subset(&splits.train))?;
    let validation = data.subset(&splits.validation);
    let curve = f1_vs_tau_curve(&model.embed(&validation.features)?, &validation.labels, &centroids, &config.threshold)?;
    let choice = select_threshold_or_fallback(&curve, &config.threshold);
    a.write(THRESHOLD_CSV, curve.to_csv())?;
    a.write_json(
        THRESHOLD_JSON,
        &ThresholdArtifact {
            choice,
            curve,
            epsilon1: config.threshold.epsilon1,
            epsilon2: config.threshold.epsilon2,
        },
    )
}

fn stage_fit_threshold(config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    let (data, splits) = a.encoded()?;
    let model = a.iiloss()?;
    let scores = model.outlier_scores(&data.subset(&splits.train).features)?;
    let fitted = fit_contamination_threshold(&scores, config.contamination)?;
    a.write_json::<ContaminationConfig>(CONTAMINATION_JSON, &fitted)
}

fn split_name(splits: &SplitBundle, labels: &[usize]) -> Vec<&'static str> {
    let mut names = vec!["unused"; labels.len()];
    for (rows, name) in [
        (&splits.train, "train"),
        (&splits.validation, "validation"),
        (&splits.known_test, "known_test"),
    ] {
        for &r in rows {
            names[r] = name;
        }
    }
    for (r, &l) in labels.iter().enumerate() {
        if splits.novel_classes.contains(&l) {
            names[r] = "novel";
        }
    }
    names
}

fn embeddings_csv(z: &ndarray::Array2<f64>, data: &EncodedDataset, splits: &SplitBundle) -> String {
    let mut out = String::from("row,class,split");
    for j in 0..z.ncols() {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    let splits_of = split_name(splits, &data.labels);
    for (r, row) in z.axis_iter(Axis(0)).enumerate() {
        out.push_str(&format!("{r},{},{}", data.class_names[data.labels[r]], splits_of[r]));
        for v in row {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

fn stage_evaluate(config: &ExperimentConfig, a: &Artifacts) -> Result<EvalReport> {
    let (data, splits) = a.encoded()?;
    let gmvae = a.gmvae()?;
    let iiloss = a.iiloss()?;
    let threshold: ThresholdArtifact = a.read_json(THRESHOLD_JSON)?;
    let contamination: ContaminationConfig = a.read_json(CONTAMINATION_JSON)?;

    let gmvae_centroids = gmvae.class_centroids(&data.subset(&splits.train))?;
    let z_gmvae = gmvae.embed(&data.features)?;
    let mut u_values = Vec::with_capacity(data.len());
    let mut u_nearest = Vec::with_capacity(data.len());
    for e in z_gmvae.axis_iter(Axis(0)) {
        let u = uncertainty(e, &gmvae_centroids)?;
        u_values.push(u.value);
        u_nearest.push(gmvae_centroids.class_ids[u.nearest]);
    }
    let z_iiloss = iiloss.embed(&data.features)?;
    let mut os_values = Vec::with_capacity(data.len());
    let mut os_nearest = Vec::with_capacity(data.len());
    for e in z_iiloss.axis_iter(Axis(0)) {
        let (i, d) = iiloss.centroids.nearest(e);
        os_values.push(d);
        os_nearest.push(iiloss.centroids.class_ids[i]);
    }
    let scores = PipelineScoresArtifact {
        gmvae: PipelineScores {
            name: GMVAE_PIPELINE.into(),
            threshold: threshold.choice.tau,
            rule_values: u_values,
            nearest: u_nearest,
        },
        iiloss: PipelineScores {
            name: IILOSS_PIPELINE.into(),
            threshold: contamination.threshold,
            rule_values: os_values,
            nearest: os_nearest,
        },
    };
    let pipelines = [scores.gmvae.clone(), scores.iiloss.clone()];
    let curves = incremental_novel_curve(&pipelines, &splits, &data.labels)?;

    let layout = ConfusionLayout {
        known: splits.known_classes.clone(),
        novel: splits.novel_classes.clone(),
    };
    let rows = splits.novel_test_sets[0].rows_with_first(splits.novel_classes.len(), &splits.known_test);
    let truth: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
    let mut matrices = Vec::new();
    for p in &pipelines {
        let set = scored_set(&rows, &data.labels, &splits.known_classes, p);
        let m = confusion(&truth, &set.predict(p.threshold), &layout)?;
        a.write(format!("confusion_{}.csv", file_stem(&p.name)).as_str(), m.to_csv(&data.class_names))?;
        matrices.push((p.name.clone(), m));
    }

    let mut report = EvalReport {
        curves,
        relative_change: Vec::new(),
        mean_relative_change: None,
        thresholds: ThresholdSummary {
            tau_star: threshold.choice.tau,
            tau_star_fallback: threshold.choice.fallback,
            alpha: contamination.alpha,
            outlier_threshold: contamination.threshold,
        },
        confusion: matrices,
        sweeps: Vec::new(),
    };
    report.fill_relative_change();
    a.write_json(SCORES_JSON, &scores)?;
    a.write(CURVES_CSV, report.curves_csv())?;
    a.write("embeddings_gmvae.csv", embeddings_csv(&z_gmvae, &data, &splits))?;
    a.write("embeddings_iiloss.csv", embeddings_csv(&z_iiloss, &data, &splits))?;
    a.write_json(REPORT_JSON, &report)?;
    let _ = config;
    Ok(report)
}

fn file_stem(pipeline: &str) -> &str {
    pipeline.split('+').next().unwrap_or(pipeline)
}

fn rule_stem(rule: SweepRule) -> &'static str {
    match rule {
        SweepRule::Uncertainty => "uncertainty",
        SweepRule::OutlierScore => "outlier_score",
    }
}

fn stage_sweep(config: &ExperimentConfig, a: &Artifacts) -> Result<EvalReport> {
    let splits = a.splits()?;
    let scores: PipelineScoresArtifact = a.read_json(SCORES_JSON)?;
    let mut report: EvalReport = a.read_json(REPORT_JSON)?;
    let labels = a.imputed()?.labels().to_vec();
    let universe: Vec<OpenLabel> = open_set_universe(&splits.known_classes);
    let k = splits.novel_classes.len();
    let sets_for = |p: &PipelineScores| {
        splits
            .novel_test_sets
            .iter()
            .map(|s| scored_set(&s.rows_with_first(k, &splits.known_test), &labels, &splits.known_classes, p))
            .collect::<Vec<_>>()
    };
    let training_scores: Vec<f64> = splits.train.iter().map(|&r| scores.iiloss.rule_values[r]).collect();
    report.sweeps.clear();
    for s in &config.sweeps {
        let (pipeline, center) = match s.rule {
            SweepRule::Uncertainty => (&scores.gmvae, s.center.unwrap_or(report.thresholds.tau_star)),
            SweepRule::OutlierScore => (&scores.iiloss, s.center.unwrap_or(report.thresholds.alpha)),
        };
        let table = sweep_thresholds(
            &sets_for(pipeline),
            &universe,
            &SweepRequest {
                rule: s.rule,
                center,
                halfwidth: s.halfwidth,
                step: s.step,
                training_scores: Some(&training_scores),
            },
        )?;
        a.write(format!("sweep_{}.csv", rule_stem(s.rule)).as_str(), table.to_csv())?;
        report.sweeps.push(table);
    }
    a.write_json(REPORT_JSON, &report)?;
    Ok(report)
}

fn dispatch(stage: Stage, config: &ExperimentConfig, a: &Artifacts) -> Result<()> {
    match stage {
        Stage::Synth => stage_synth(config, a),
        Stage::Impute => stage_impute(config, a),
        Stage::TrainGmvae => stage_train_gmvae(config, a),
        Stage::TrainIiloss => stage_train_iiloss(config, a),
        Stage::SelectThreshold => stage_select_threshold(config, a),
        Stage::FitThreshold => stage_fit_threshold(config, a),
        Stage::Evaluate => stage_evaluate(config, a).map(|_| ()),
        Stage::Sweep => stage_sweep(config, a).map(|_| ()),
    }
}

/// Runs one stage against the artifacts already in `out`, then rewrites the
/// manifest. A failure is recorded in the manifest and returned with the
/// stage name attached; artifacts of earlier stages are kept.
pub fn run_stage(stage: Stage, config: &ExperimentConfig, out: &Path) -> Result<()> {
    let wrap = |e: Error| Error::Stage {
        stage: stage.name(),
        source: Box::new(e),
    };
    config.validate().map_err(wrap)?;
    fs::create_dir_all(out).map_err(|e| wrap(e.into()))?;
    let a = Artifacts { dir: out };
    let mut completed: Vec<String> = a
        .read_json::<Manifest>(MANIFEST_JSON)
        .map(|m| m.completed_stages)
        .unwrap_or_default();
    completed.retain(|s| s != stage.name());
    let result = dispatch(stage, config, &a);
    let failure = match &result {
        Ok(()) => {
            completed.push(stage.name().into());
            None
        }
        Err(e) => Some(StageFailure {
            stage: stage.name().into(),
            error: e.to_string(),
        }),
    };
    let manifest = Manifest::build(config, out, completed, failure).map_err(wrap)?;
    a.write_json(MANIFEST_JSON, &manifest).map_err(wrap)?;
    result.map_err(wrap)
}

/// Every stage in order. Returns the final report.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let _ = fs::remove_file(out.join(MANIFEST_JSON));
    for stage in Stage::ALL {
        run_stage(stage, config, out)?;
    }
    Artifacts { dir: out }.read_json(REPORT_JSON)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth() -> SynthConfig {
        SynthConfig {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            samples_per_class: 30,
            dim: 3,
            separation: 10.0,
            sigma: 1.0,
            means: None,
            covariances: None,
            categorical: Vec::new(),
            missing_rate: 0.0,
            encounters_per_patient: None,
        }
    }

    fn config() -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "dataset": {"source": "synthetic", "class_names": ["a", "b", "c"], "samples_per_class": 30, "dim": 3},
            "known_classes": ["a", "b"],
            "novel_classes": ["c"],
        }))
        .unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = config();
        assert_eq!(c.dataset, DatasetSource::Synthetic(synth()));
        assert_eq!(c.n_test_sets, 100);
        assert_eq!(c.contamination, 0.01);
        assert_eq!(c.gmvae.dim_z, 10);
        assert_eq!(c.sweeps.len(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn overlapping_classes_rejected_before_any_stage() {
        let mut c = config();
        c.novel_classes = vec!["b".into(), "c".into()];
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let dir = tempfile::tempdir().unwrap();
        let e = run_stage(Stage::Synth, &c, dir.path()).unwrap_err();
        assert!(matches!(e, Error::Stage { stage: "synth", .. }));
        assert!(!dir.path().join(DATA_CSV).exists());
    }

    #[test]
    fn uncovered_class_rejected() {
        let mut c = config();
        c.novel_classes.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn evaluate_without_checkpoint_names_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let c = config();
        run_stage(Stage::Synth, &c, dir.path()).unwrap();
        run_stage(Stage::Impute, &c, dir.path()).unwrap();
        let e = run_stage(Stage::Evaluate, &c, dir.path()).unwrap_err();
        let Error::Stage { stage, source } = e else { panic!() };
        assert_eq!(stage, "evaluate");
        assert!(matches!(*source, Error::MissingArtifact(ref p) if p.ends_with(GMVAE_JSON)));
        let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_JSON)).unwrap()).unwrap();
        assert_eq!(m.failure.as_ref().unwrap().stage, "evaluate");
        assert_eq!(m.completed_stages, vec!["synth", "impute"]);
        m.verify(dir.path()).unwrap();
    }
}
