//! Stage runner behind the command-line front end. Every stage reads its
//! inputs from the output directory, writes its artifacts there, and is a
//! pure function of those inputs, the config and the run seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path as FsPath, PathBuf};

use serde::Serialize;

use crate::crediting::{self, Level};
use crate::error::{Error, Result};
use crate::imputation::{impute, write_audit, ImputeConfig, ImputeMode};
use crate::journey::{
    read_jsonl, read_paths, write_jsonl, write_paths, AttributionResult, Channel, ChannelAggregates, Method, Path,
    PathLimits,
};
use crate::kvconf::KvConfig;
use crate::metrics::{median, roc_auc};
use crate::model::{split_indices, Ablation, AttentionModel, CalibrationMode, MmmTargets, ModelConfig};
use crate::pathproc::{process, redistribute_credit, ProcessTrace, SamplingPolicy};
use crate::seeds;
use crate::synthgen::{generate_dataset, generate_experiment, Campaign, Dataset, ExperimentRecord, ExperimentTruth, GeneratorConfig, PathTruth};
use crate::validate::{self, Estimate};

pub const RAW_PATHS: &str = "paths_raw.jsonl";
pub const AGGREGATES: &str = "aggregates.csv";
pub const CAMPAIGNS: &str = "campaigns.jsonl";
pub const TRUTH: &str = "ground_truth.jsonl";
pub const MMM_TARGETS: &str = "mmm_targets.csv";
pub const EXP_RECORDS: &str = "experiment_records.jsonl";
pub const EXP_PATHS: &str = "experiment_paths.jsonl";
pub const EXP_TRUTH: &str = "experiment_truth.json";
pub const IMPUTED_PATHS: &str = "paths_imputed.jsonl";
pub const IMPUTE_AUDIT: &str = "impute_audit.csv";
pub const IMPUTE_DAYS: &str = "impute_days.csv";
pub const PATHS: &str = "paths.jsonl";
pub const TRACES: &str = "traces.jsonl";
pub const MODEL: &str = "model";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VALIDATION: &str = "validation.json";
pub const REPORT: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    Impute,
    Preprocess,
    Train,
    Attribute,
    Validate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Generate,
        Stage::Impute,
        Stage::Preprocess,
        Stage::Train,
        Stage::Attribute,
        Stage::Validate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Impute => "impute",
            Stage::Preprocess => "preprocess",
            Stage::Train => "train",
            Stage::Attribute => "attribute",
            Stage::Validate => "validate",
            Stage::Report => "report",
        }
    }
}

/// Everything a run needs. Section files default to the run file itself,
/// so a single file can hold every key.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub policy: SamplingPolicy,
    pub mmm: Option<PathBuf>,
    pub model: ModelConfig,
    pub impute_mode: ImputeMode,
    pub preclick_window_days: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub bootstrap_reps: usize,
    pub weight_reps: usize,
    pub permutation_trials: usize,
    pub permutation_passes: usize,
    pub retrain_subsets: usize,
    pub ablation: Vec<Ablation>,
}

fn section(kv: &KvConfig, key: &str) -> Result<KvConfig> {
    match kv.path(key) {
        None => Ok(kv.clone()),
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("`{key}` file {} does not exist", p.display())));
            }
            KvConfig::load(&p)
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let generator = GeneratorConfig::from_kv(&section(kv, "generator")?)?;
        let policy = SamplingPolicy::from_kv(&section(kv, "policy")?)?;
        let model = ModelConfig::from_kv(&section(kv, "model")?)?;
        let mmm = kv.path("mmm");
        if let Some(m) = &mmm {
            if !m.exists() {
                return Err(Error::Config(format!("`mmm` file {} does not exist", m.display())));
            }
        }
        let impute_mode = match kv.get("impute.mode") {
            None => ImputeMode::Stochastic,
            Some(s) => ImputeMode::parse(s).ok_or_else(|| Error::Config(format!("unknown imputation mode `{s}`")))?,
        };
        let ablation = kv
            .list::<String>("validate.ablation")?
            .unwrap_or_default()
            .iter()
            .map(|s| Ablation::parse(s).ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`"))))
            .collect::<Result<_>>()?;
        let preclick_window_days: f64 = kv.or("impute.preclick_window_days", ImputeConfig::default().preclick_window_days)?;
        if !(preclick_window_days > 0.0 && preclick_window_days.is_finite()) {
            return Err(Error::Config("impute.preclick_window_days must be positive".into()));
        }
        Ok(Self {
            generator,
            policy,
            mmm,
            model,
            impute_mode,
            preclick_window_days,
            seed: kv.or("seed", 0)?,
            out: kv.path("out").unwrap_or_else(|| PathBuf::from("out")),
            bootstrap_reps: kv.or("validate.bootstrap_reps", validate::DEFAULT_BOOTSTRAP_REPS)?,
            weight_reps: kv.or("validate.weight_reps", 100)?,
            permutation_trials: kv.or("validate.permutation_trials", 0)?,
            permutation_passes: kv.or("validate.permutation_passes", 10)?,
            retrain_subsets: kv.or("validate.retrain_subsets", 0)?,
            ablation,
        })
    }

    pub fn load(file: &FsPath) -> Result<Self> {
        Self::from_kv(&KvConfig::load(file)?)
    }

    pub fn sub_seed(&self, module: &str) -> u64 {
        seeds::derive(self.seed, module)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.file(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingStageInput { path: p, producer })
        }
    }
}

fn write_json<T: Serialize>(value: &T, file: &FsPath) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(file, text).map_err(|e| Error::io(file, e))
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(file: &FsPath) -> Result<T> {
    let text = fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_rows<T: Serialize>(rows: &[T], file: &FsPath) -> Result<()> {
    let mut w = csv::Writer::from_path(file)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(file, e))
}

pub fn run_stage(cfg: &RunConfig, stage: Stage, method: Method) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    log::info!("stage {}", stage.name());
    match stage {
        Stage::Generate => generate(cfg),
        Stage::Impute => impute_stage(cfg),
        Stage::Preprocess => preprocess(cfg),
        Stage::Train => train_stage(cfg),
        Stage::Attribute => attribute_stage(cfg, method),
        Stage::Validate => validate_stage(cfg),
        Stage::Report => report(cfg),
    }
}

/// Runs every stage in order, attributing with all three methods.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    for stage in Stage::ALL {
        if stage == Stage::Attribute {
            for m in [Method::Attention, Method::Incremental, Method::LastTouch] {
                run_stage(cfg, stage, m)?;
            }
        } else {
            run_stage(cfg, stage, Method::Attention)?;
        }
    }
    Ok(())
}

fn raw_limits(g: &GeneratorConfig) -> PathLimits {
    PathLimits {
        max_len: None,
        campaign_dim: Some(g.dim_campaign),
        member_dim: Some(g.dim_member),
        company_dim: Some(g.dim_company),
    }
}

/// Stand-in media-mix targets for a synthetic dataset: the true channel
/// shares as `a_mmm` and the observed touch mix as `pi_mmm`. `None` when
/// nothing converted or no touch was observed.
pub fn stand_in_mmm_targets(ds: &Dataset) -> Result<Option<MmmTargets>> {
    let mut touches: BTreeMap<Channel, f64> = BTreeMap::new();
    for p in &ds.paths {
        for t in &p.touchpoints {
            *touches.entry(t.channel.clone()).or_default() += 1.0;
        }
    }
    let n_touch: f64 = touches.values().sum();
    if n_touch == 0.0 || ds.truth.channel_shares.is_empty() {
        return Ok(None);
    }
    let rows: Vec<(Channel, f64, f64)> = touches
        .iter()
        .map(|(c, n)| (c.clone(), ds.truth.channel_shares.get(c).copied().unwrap_or(0.0), n / n_touch))
        .collect();
    MmmTargets::new(rows).map(Some)
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let mut g = cfg.generator.clone();
    g.seed = cfg.sub_seed("generate");
    let ds = generate_dataset(&g)?;
    let limits = raw_limits(&g);
    write_paths(&ds.paths, &cfg.file(RAW_PATHS), &limits)?;
    ds.aggregates.write_csv(&cfg.file(AGGREGATES))?;
    write_jsonl(&ds.campaigns, &cfg.file(CAMPAIGNS))?;
    write_jsonl(&ds.truth.paths, &cfg.file(TRUTH))?;

    if let Some(t) = stand_in_mmm_targets(&ds)? {
        t.write_csv(&cfg.file(MMM_TARGETS))?;
    }

    if !g.holdout_campaigns.is_empty() {
        let mut ge = g.clone();
        ge.seed = cfg.sub_seed("experiment");
        let exp = generate_experiment(&ge, &g.holdout_campaigns)?;
        write_jsonl(&exp.records, &cfg.file(EXP_RECORDS))?;
        write_paths(&exp.paths, &cfg.file(EXP_PATHS), &limits)?;
        write_json(&exp.truth, &cfg.file(EXP_TRUTH))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DayRow {
    day: i64,
    budget: f64,
    clicks: usize,
    paths: usize,
    allocated: f64,
    overdraw: f64,
    unallocated: f64,
}

fn impute_stage(cfg: &RunConfig) -> Result<()> {
    let paths = read_paths(&cfg.input(RAW_PATHS, "generate")?)?;
    let agg = ChannelAggregates::read_csv(&cfg.input(AGGREGATES, "generate")?)?;
    let catalog: Vec<Campaign> = read_jsonl(&cfg.input(CAMPAIGNS, "generate")?)?;
    let icfg = ImputeConfig {
        mode: cfg.impute_mode,
        seed: cfg.sub_seed("impute"),
        preclick_window_days: cfg.preclick_window_days,
    };
    let out = impute(&paths, &agg, &catalog, &icfg)?;
    write_paths(&out.paths, &cfg.file(IMPUTED_PATHS), &raw_limits(&cfg.generator))?;
    write_audit(&out.audit, &cfg.file(IMPUTE_AUDIT))?;
    let days: Vec<DayRow> = out
        .days
        .iter()
        .map(|d| DayRow {
            day: d.day,
            budget: d.budget,
            clicks: d.clicks,
            paths: d.paths,
            allocated: d.allocated,
            overdraw: d.overdraw,
            unallocated: d.unallocated,
        })
        .collect();
    write_rows(&days, &cfg.file(IMPUTE_DAYS))
}

fn preprocess(cfg: &RunConfig) -> Result<()> {
    let paths = read_paths(&cfg.input(IMPUTED_PATHS, "impute")?)?;
    let seed = cfg.sub_seed("preprocess");
    let (processed, traces): (Vec<Path>, Vec<ProcessTrace>) = paths
        .iter()
        .map(|p| process(p, &cfg.policy, cfg.model.max_len, seed))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let mut limits = raw_limits(&cfg.generator);
    limits.max_len = Some(cfg.model.max_len);
    write_paths(&processed, &cfg.file(PATHS), &limits)?;
    write_jsonl(&traces, &cfg.file(TRACES))
}

fn mmm_targets(cfg: &RunConfig) -> Result<Option<MmmTargets>> {
    if cfg.model.calibration == CalibrationMode::None {
        return Ok(None);
    }
    let file = match &cfg.mmm {
        Some(p) => p.clone(),
        None => cfg.input(MMM_TARGETS, "generate")?,
    };
    Ok(Some(MmmTargets::read_csv(&file)?))
}

fn train_stage(cfg: &RunConfig) -> Result<()> {
    let paths = read_paths(&cfg.input(PATHS, "preprocess")?)?;
    let mut mc = cfg.model.clone();
    mc.seed = cfg.sub_seed("train");
    let targets = mmm_targets(cfg)?;
    let (model, log) = crate::model::train(&paths, mc, targets.as_ref())?;
    model.save(&cfg.file(MODEL))?;
    log.write_csv(&cfg.file(TRAIN_LOG))
}

fn load_model(cfg: &RunConfig) -> Result<AttentionModel> {
    let stem = cfg.file(MODEL);
    let manifest = stem.with_extension("json");
    if !manifest.exists() {
        return Err(Error::MissingStageInput {
            path: manifest,
            producer: "train",
        });
    }
    AttentionModel::load(&stem)
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Attention => "attention",
        Method::Incremental => "incremental",
        Method::LastTouch => "last_touch",
        Method::GroundTruth => "ground_truth",
    }
}

fn attribute_stage(cfg: &RunConfig, method: Method) -> Result<()> {
    let processed = read_paths(&cfg.input(PATHS, "preprocess")?)?;
    let raw = read_paths(&cfg.input(IMPUTED_PATHS, "impute")?)?;
    let traces: Vec<ProcessTrace> = read_jsonl(&cfg.input(TRACES, "preprocess")?)?;
    let model = match method {
        Method::LastTouch => None,
        _ => Some(load_model(cfg)?),
    };
    let results = crediting::attribute(model.as_ref(), &processed, method)?;
    let expanded = results
        .iter()
        .zip(&processed)
        .zip(raw.iter().zip(&traces))
        .map(|((r, p), (o, t))| redistribute_credit(r, p, o, t))
        .collect::<Result<Vec<_>>>()?;
    let name = method_name(method);
    write_jsonl(&results, &cfg.file(&format!("attribution_{name}.jsonl")))?;
    write_jsonl(&expanded, &cfg.file(&format!("attribution_{name}_raw.jsonl")))?;

    // rollups over converting raw paths
    let (conv_r, conv_p): (Vec<AttributionResult>, Vec<Path>) = expanded
        .into_iter()
        .zip(raw)
        .filter(|(_, p)| p.converted)
        .unzip();
    for (level, tag) in [
        (Level::Channel, "channel"),
        (Level::Campaign, "campaign"),
        (Level::Kind, "kind"),
        (Level::DayGap, "day_gap"),
    ] {
        crediting::rollup(&conv_r, &conv_p, level)?.write_csv(&cfg.file(&format!("rollup_{name}_{tag}.csv")))?;
    }
    write_rows(&crediting::day_gap_decay(&conv_r, &conv_p)?, &cfg.file(&format!("decay_{name}.csv")))
}

#[derive(Clone, Debug, Serialize)]
struct KindStability {
    kind: String,
    n: usize,
    mean: f64,
    mean_bias: f64,
    ci_low: f64,
    ci_high: f64,
}

#[derive(Clone, Debug, Serialize)]
struct DriftRow {
    day: i64,
    reference_day: i64,
    n: usize,
    n_reference: usize,
    statistic: f64,
    standardized: f64,
    flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
struct ExperimentReport {
    truth: f64,
    ipw: Estimate,
    raw: Estimate,
    dda: validate::DdaEstimates,
    propensity_auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
struct ValidationReport {
    seed: u64,
    validate_seed: u64,
    holdout_auc: Option<f64>,
    weight_stability: Vec<KindStability>,
    drift_days: usize,
    drift_flagged: usize,
    experiment: Option<ExperimentReport>,
    retrain: Option<validate::RetrainReport>,
    permutation: Option<validate::PermutationReport>,
    ablation: Option<validate::AblationReport>,
}

fn validate_stage(cfg: &RunConfig) -> Result<()> {
    let paths = read_paths(&cfg.input(PATHS, "preprocess")?)?;
    let model = load_model(cfg)?;
    let vseed = cfg.sub_seed("validate");
    let enc = model.encode_all(&paths)?;
    let probs = model.predict_encoded(&enc)?;

    // the split used for training, so the holdout AUC is honest
    let (train_idx, val_idx) = split_indices(enc.len(), model.config.val_fraction, model.config.seed);
    let y: Vec<bool> = val_idx.iter().map(|&i| paths[i].converted).collect();
    let holdout_auc = roc_auc(&val_idx.iter().map(|&i| probs[i]).collect::<Vec<_>>(), &y);

    let credits = model.attention_credits(&enc)?;
    let results: Vec<AttributionResult> = paths
        .iter()
        .zip(credits)
        .map(|(p, c)| AttributionResult {
            path_id: p.path_id,
            method: Method::Attention,
            credits: c,
        })
        .collect();
    let stab = validate::bootstrap_weight_stability(&validate::weights_by_kind(&results, &paths), cfg.weight_reps, vseed)?;
    let mut bias_rows = Vec::new();
    let mut weight_stability = Vec::new();
    for (kind, s) in &stab {
        for (b, bias) in s.biases.iter().enumerate() {
            bias_rows.push((kind.clone(), b, *bias));
        }
        weight_stability.push(KindStability {
            kind: kind.clone(),
            n: s.n,
            mean: s.mean,
            mean_bias: s.mean_bias,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        });
    }
    write_rows(&bias_rows, &cfg.file("weight_bias.csv"))?;

    // predicted propensity per anchor day against the same weekday a week earlier
    let mut by_day: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (p, pr) in paths.iter().zip(&probs) {
        by_day.entry(p.anchor_time.div_euclid(crate::journey::SECONDS_PER_DAY)).or_default().push(*pr);
    }
    let mut drift = Vec::new();
    for (&day, cur) in &by_day {
        let Some(prev) = by_day.get(&(day - 7)) else { continue };
        if cur.len() < 5 || prev.len() < 5 {
            continue;
        }
        let t = validate::anderson_darling(cur, prev)?;
        drift.push(DriftRow {
            day,
            reference_day: day - 7,
            n: cur.len(),
            n_reference: prev.len(),
            statistic: t.statistic,
            standardized: t.standardized,
            flagged: t.flagged,
        });
    }
    write_rows(&drift, &cfg.file("drift.csv"))?;

    let experiment = if cfg.file(EXP_RECORDS).exists() {
        let records: Vec<ExperimentRecord> = read_jsonl(&cfg.file(EXP_RECORDS))?;
        let exp_paths = read_paths(&cfg.input(EXP_PATHS, "generate")?)?;
        let truth: ExperimentTruth = read_json(&cfg.input(EXP_TRUTH, "generate")?)?;
        let pm = validate::fit_propensity(&records)?;
        let e = pm.predict_all(&records);
        let z: Vec<bool> = records.iter().map(|r| r.z == 1).collect();
        let ipw = validate::ipw_attribution(&records, &e, cfg.bootstrap_reps, vseed)?;
        let raw = validate::raw_attribution(&records, cfg.bootstrap_reps, vseed)?;
        let dda = validate::dda_attribution_estimates(
            &model,
            &records,
            &exp_paths,
            Some(&e),
            &cfg.policy,
            cfg.sub_seed("preprocess"),
            cfg.bootstrap_reps,
            vseed,
        )?;
        Some(ExperimentReport {
            truth: truth.attribution,
            ipw,
            raw,
            dda,
            propensity_auc: roc_auc(&e, &z),
        })
    } else {
        None
    };

    let vocab = model.vocab.clone();
    let retrain = if cfg.retrain_subsets > 0 {
        Some(validate::retrain_stability(&enc, &vocab, &model.config, cfg.retrain_subsets, 0.1, vseed)?)
    } else {
        None
    };
    let train_set: Vec<_> = train_idx.iter().map(|&i| enc[i].clone()).collect();
    let val_set: Vec<_> = val_idx.iter().map(|&i| enc[i].clone()).collect();
    let permutation = if cfg.permutation_trials > 0 {
        Some(validate::permutation_test(
            &train_set,
            &val_set,
            &vocab,
            &model.config,
            cfg.permutation_trials,
            cfg.permutation_passes,
            true,
            vseed,
        )?)
    } else {
        None
    };
    let ablation = if cfg.ablation.is_empty() {
        None
    } else {
        Some(validate::ablation_run(&train_set, &val_set, &val_set, &vocab, &model.config, &cfg.ablation)?)
    };

    let report = ValidationReport {
        seed: cfg.seed,
        validate_seed: vseed,
        holdout_auc,
        weight_stability,
        drift_days: drift.len(),
        drift_flagged: drift.iter().filter(|d| d.flagged).count(),
        experiment,
        retrain,
        permutation,
        ablation,
    };
    write_json(&report, &cfg.file(VALIDATION))
}

#[derive(Serialize, serde::Deserialize)]
struct ShareRow {
    key: String,
    share: f64,
}

#[derive(Serialize, serde::Deserialize)]
struct DecayCsvRow {
    days_before: i64,
    touches: usize,
    mean_credit: f64,
}

fn read_rows<T: for<'de> serde::Deserialize<'de>>(file: &FsPath) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(file)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

fn report(cfg: &RunConfig) -> Result<()> {
    let validation: serde_json::Value = read_json(&cfg.input(VALIDATION, "validate")?)?;
    let mut channel = BTreeMap::new();
    let mut decay = BTreeMap::new();
    for m in [Method::Attention, Method::Incremental, Method::LastTouch] {
        let name = method_name(m);
        let f = cfg.file(&format!("rollup_{name}_channel.csv"));
        if !f.exists() {
            continue;
        }
        let rows: Vec<ShareRow> = read_rows(&f)?;
        channel.insert(name, rows.into_iter().map(|r| (r.key, r.share)).collect::<BTreeMap<_, _>>());
        let d: Vec<DecayCsvRow> = read_rows(&cfg.input(&format!("decay_{name}.csv"), "attribute")?)?;
        decay.insert(name, d);
    }
    if channel.is_empty() {
        return Err(Error::MissingStageInput {
            path: cfg.file("rollup_attention_channel.csv"),
            producer: "attribute",
        });
    }
    let truth: Vec<PathTruth> = read_jsonl(&cfg.input(TRUTH, "generate")?)?;
    let raw = read_paths(&cfg.input(RAW_PATHS, "generate")?)?;
    let mut true_shares: BTreeMap<String, f64> = BTreeMap::new();
    for (p, t) in raw.iter().zip(&truth) {
        if let Some(c) = &t.credits {
            for (tp, v) in p.touchpoints.iter().zip(c) {
                *true_shares.entry(tp.channel.to_string()).or_default() += v;
            }
        }
    }
    let tot: f64 = true_shares.values().sum();
    if tot > 0.0 {
        true_shares.values_mut().for_each(|v| *v /= tot);
    }
    let log_file = cfg.input(TRAIN_LOG, "train")?;
    let epochs: Vec<crate::model::EpochLog> = read_rows(&log_file)?;
    let val_aucs: Vec<f64> = epochs.iter().filter_map(|e| e.val_auc).collect();

    // share of attention credit within the last three days before conversion
    let recent: BTreeMap<&str, f64> = decay
        .iter()
        .map(|(m, rows)| {
            let total: f64 = rows.iter().map(|r| r.mean_credit * r.touches as f64).sum();
            let near: f64 = rows.iter().filter(|r| r.days_before < 3).map(|r| r.mean_credit * r.touches as f64).sum();
            (*m, if total > 0.0 { near / total } else { 0.0 })
        })
        .collect();
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "channel_shares": channel,
        "true_channel_shares": true_shares,
        "credit_share_last_3_days": recent,
        "day_gap_decay": decay.iter().map(|(m, rows)| (m.to_string(), rows.iter().map(|r| (r.days_before, r.mean_credit)).collect::<Vec<_>>())).collect::<BTreeMap<_, _>>(),
        "final_val_auc": val_aucs.last(),
        "median_val_auc": if val_aucs.is_empty() { None } else { Some(median(&val_aucs)) },
        "train_log": epochs,
        "validation": validation,
    });
    write_json(&summary, &cfg.file(REPORT))
}

/// Names of the artifacts a full run leaves behind, for determinism checks.
pub fn artifact_names(out: &FsPath) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        if entry.path().is_file() {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}
