//! Experiment driver: stage-by-stage orchestration of dataset preparation,
//! preliminary training, trigger extraction, poisoning, victim evaluation,
//! and the defense battery, with every artifact persisted under one output
//! directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use threes_core::datasets::{DatasetManifest, LabeledImageSet, write_idx};
use threes_core::defenses::{self, write_csv};
use threes_core::image::{write_comparison_strip, Image};
use threes_core::metrics;
use threes_core::nn::{train, ConvBlockConfig, Model, ModelConfig, TrainConfig};
use threes_core::poison::{poison_dataset, poison_sample, PoisonConfig};
use threes_core::report::{self, EvalReport, SweepPoint, SweepResult};
use threes_core::saliency::grad_cam;
use threes_core::spectral::FrequencyMap;
use threes_core::synth;
use threes_core::trigger::{extract_trigger, ThresholdMode, TriggerSpec};

// ---------------------------------------------------------------- errors

#[derive(Debug)]
enum CliError {
    /// Bad or missing configuration → exit 2.
    Config(String),
    /// A required upstream artifact is absent → exit 3.
    MissingArtifact(String),
    /// Anything that failed at run time → exit 4.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingArtifact(m) => write!(f, "missing artifact: {m}"),
            CliError::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

macro_rules! rt {
    ($e:expr) => {
        $e.map_err(|err| CliError::Runtime(err.to_string()))?
    };
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetSection {
    manifest: PathBuf,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelSection {
    conv_filters: Vec<usize>,
    dense_hidden: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
}

impl ModelSection {
    fn model_config(&self, shape: (usize, usize, usize), classes: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_shape: shape,
            conv_blocks: self.conv_filters.iter().map(|&f| ConvBlockConfig { filters: f }).collect(),
            dense_hidden: self.dense_hidden,
            class_count: classes,
            seed,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TriggerSection {
    #[serde(default = "default_delta")]
    delta: f64,
    #[serde(default = "default_mode")]
    mode: ThresholdMode,
    /// Explicit train-set indices to extract from; overrides `sample_count`.
    sample_ids: Option<Vec<usize>>,
    /// Number of target-class samples to use when `sample_ids` is absent.
    #[serde(default = "default_sample_count")]
    sample_count: usize,
}

fn default_sample_count() -> usize {
    1
}

fn default_delta() -> f64 {
    threes_core::trigger::DEFAULT_DELTA
}

fn default_mode() -> ThresholdMode {
    ThresholdMode::Relative
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DefenseSection {
    #[serde(default = "yes")]
    strip: bool,
    #[serde(default = "yes")]
    gradcam: bool,
    #[serde(default = "yes")]
    fine_prune: bool,
    #[serde(default = "yes")]
    activation_clustering: bool,
    #[serde(default = "yes")]
    neural_cleanse: bool,
    #[serde(default = "yes")]
    ftd: bool,
    #[serde(default = "default_overlays")]
    strip_overlays: usize,
    #[serde(default = "default_nc_budget")]
    nc_budget: usize,
    #[serde(default = "default_nc_batch")]
    nc_batch: usize,
    #[serde(default = "default_prune_steps")]
    prune_steps: usize,
    /// Cap on the number of samples each defense evaluates.
    #[serde(default = "default_defense_samples")]
    sample_cap: usize,
}

fn yes() -> bool {
    true
}
fn default_overlays() -> usize {
    64
}
fn default_nc_budget() -> usize {
    1000
}
fn default_nc_batch() -> usize {
    16
}
fn default_prune_steps() -> usize {
    11
}
fn default_defense_samples() -> usize {
    100
}

impl Default for DefenseSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SweepSection {
    poison_rate: Option<Vec<f64>>,
    rho: Option<Vec<f64>>,
    tau: Option<Vec<f64>>,
    delta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExperimentConfig {
    dataset: DatasetSection,
    model: ModelSection,
    /// Victim architecture/training; defaults to `model` when omitted.
    victim: Option<ModelSection>,
    trigger: TriggerSection,
    poison: PoisonConfig,
    #[serde(default)]
    defenses: DefenseSection,
    #[serde(default)]
    sweeps: SweepSection,
    seed: u64,
    out_dir: PathBuf,
}

impl ExperimentConfig {
    fn victim_section(&self) -> &ModelSection {
        self.victim.as_ref().unwrap_or(&self.model)
    }
}

// ---------------------------------------------------------------- CLI

#[derive(Parser)]
#[command(name = "threes", version, about = "Spectral backdoor attack & defense toolkit")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Force bit-exact single-threaded execution (already the default mode;
    /// accepted for compatibility with scripted runs).
    #[arg(long, global = true)]
    determinism: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic digit dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the preliminary (attacker-side) model on the clean train set.
    Train,
    /// Extract the spectral trigger from target-class samples.
    Extract,
    /// Assemble the poisoned training set.
    Poison,
    /// Train the victim and a clean control; measure BA/ASR/PSNR/SSIM.
    Eval,
    /// Run the enabled defenses against the victim.
    Defend,
    /// Summarize all artifacts in the output directory.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Synth { out, train, test, seed } = &cli.command {
        synth::write_dataset(out, *train, *test, *seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("wrote {train} train / {test} test samples under {}", out.display());
        return Ok(());
    }

    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let raw = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config_path.display())))?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    validate(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    // hash everything that shapes the results; the output location does not
    let hash = {
        let mut keyed = cfg.clone();
        keyed.out_dir = PathBuf::new();
        report::config_hash(&serde_json::to_string(&keyed).unwrap())
    };
    let result = match cli.command {
        Command::Synth { .. } => unreachable!(),
        Command::Train => cmd_train(&cfg),
        Command::Extract => cmd_extract(&cfg),
        Command::Poison => cmd_poison(&cfg),
        Command::Eval => cmd_eval(&cfg, &hash),
        Command::Defend => cmd_defend(&cfg),
        Command::Report => cmd_report(&cfg),
    };
    if result.is_ok() {
        log_run(&cfg.out_dir);
    }
    result
}

fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if !cfg.dataset.manifest.exists() {
        return Err(CliError::Config(format!(
            "dataset manifest {} does not exist",
            cfg.dataset.manifest.display()
        )));
    }
    if cfg.poison.validate().is_err() || !(0.0..=1.0).contains(&cfg.poison.poison_rate) {
        return Err(CliError::Config("poison parameters out of range".into()));
    }
    if cfg.trigger.delta < 0.0 {
        return Err(CliError::Config("trigger delta must be non-negative".into()));
    }
    if cfg.model.conv_filters.is_empty() {
        return Err(CliError::Config("model needs at least one conv block".into()));
    }
    Ok(())
}

/// Timestamps live here and nowhere else; every other artifact is
/// byte-reproducible.
fn log_run(out_dir: &Path) {
    use std::io::Write;
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(out_dir.join("run.log")) {
        let _ = writeln!(f, "{stamp} command completed");
    }
}

// ---------------------------------------------------------------- stages

fn load_sets(cfg: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet), CliError> {
    let manifest = DatasetManifest::load(&cfg.dataset.manifest)
        .map_err(|e| CliError::MissingArtifact(format!("dataset: {e}")))?;
    let mut train_set = manifest
        .load_train()
        .map_err(|e| CliError::MissingArtifact(format!("train data: {e}")))?;
    let mut test_set = manifest
        .load_test()
        .map_err(|e| CliError::MissingArtifact(format!("test data: {e}")))?;
    if let Some(n) = cfg.dataset.train_limit {
        train_set = train_set.take(n);
    }
    if let Some(n) = cfg.dataset.test_limit {
        test_set = test_set.take(n);
    }
    Ok((train_set, test_set))
}

fn ckpt_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(format!("{name}.ckpt"))
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(format!(
            "{} (run `threes {produced_by}` first)",
            path.display()
        )))
    }
}

fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (train_set, test_set) = load_sets(cfg)?;
    let shape = train_set.image_shape().ok_or_else(|| CliError::Runtime("empty train set".into()))?;
    let model_cfg = cfg.model.model_config(shape, train_set.class_count, cfg.seed);
    let (model, log) = rt!(train(&Model::init(model_cfg), &train_set, &cfg.model.train_config(cfg.seed)));

    let path = ckpt_path(cfg, "preliminary");
    rt!(model.save_checkpoint(&path));
    let rows: Vec<Vec<String>> = log
        .epochs
        .iter()
        .map(|e| vec![format!("{}", e.epoch), format!("{}", e.mean_loss), format!("{}", e.train_accuracy)])
        .collect();
    rt!(write_csv(&cfg.out_dir.join("train_log.csv"), &["epoch", "mean_loss", "train_accuracy"], &rows));

    let acc = rt!(metrics::benign_accuracy(&model, &test_set));
    // reload sanity: the persisted artifact must reproduce the same score
    let reloaded = rt!(Model::load_checkpoint(&path));
    let acc2 = rt!(metrics::benign_accuracy(&reloaded, &test_set));
    if acc != acc2 {
        return Err(CliError::Runtime(format!(
            "checkpoint reload drift: {acc} vs {acc2}"
        )));
    }
    println!("test accuracy: {acc:.4}");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn cmd_extract(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let path = ckpt_path(cfg, "preliminary");
    require(&path, "train")?;
    let model = rt!(Model::load_checkpoint(&path));
    let (train_set, _) = load_sets(cfg)?;

    let ids: Vec<usize> = match &cfg.trigger.sample_ids {
        Some(ids) => ids.clone(),
        None => train_set
            .indices_of_class(cfg.poison.target_class)
            .into_iter()
            .take(cfg.trigger.sample_count)
            .collect(),
    };
    if ids.is_empty() {
        return Err(CliError::Config("no extraction samples for the target class".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= train_set.len()) {
        return Err(CliError::Config(format!("sample id {bad} out of range")));
    }
    let samples: Vec<Image> = ids.iter().map(|&i| train_set.images[i].clone()).collect();

    let (spec, misclassified) = extract_trigger(
        &model,
        &samples,
        &ids,
        cfg.poison.target_class,
        cfg.trigger.delta,
        cfg.trigger.mode,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    if !misclassified.is_empty() {
        eprintln!("warning: preliminary model misclassifies extraction samples {misclassified:?}");
    }

    rt!(spec.save(&cfg.out_dir.join("trigger.json")));
    // inspection dumps: saliency per sample + trigger footprint spectrum
    for (&id, img) in ids.iter().zip(&samples) {
        let map = rt!(grad_cam(&model, img, cfg.poison.target_class));
        rt!(map.write_pgm(&cfg.out_dir.join(format!("saliency_{id}.pgm"))));
    }
    let (h, w, c) = spec.shape;
    let mut footprint = FrequencyMap { height: h, width: w, channels: c, coefficients: vec![0.0; h * w * c] };
    for e in &spec.entries {
        footprint.set(e.u, e.v, e.channel, e.amplitude);
    }
    rt!(footprint.write_log_magnitude(&cfg.out_dir.join("trigger_spectrum.pgm")));
    println!(
        "trigger: {} frequencies ({:.2}% of the map)",
        spec.entries.len(),
        100.0 * spec.selected_fraction
    );
    Ok(())
}

fn poisoned_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("poisoned")
}

fn cmd_poison(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let trigger_path = cfg.out_dir.join("trigger.json");
    require(&trigger_path, "extract")?;
    let spec = rt!(TriggerSpec::load(&trigger_path));
    let (train_set, _) = load_sets(cfg)?;

    let poisoned = rt!(poison_dataset(&train_set, &spec, &cfg.poison));
    let dir = poisoned_dir(cfg);
    rt!(std::fs::create_dir_all(&dir));
    let ti = dir.join("train-images.idx");
    let tl = dir.join("train-labels.idx");
    rt!(write_idx(&poisoned.set, &ti, &tl));
    rt!(poisoned.write_provenance(&dir.join("provenance.json")));

    let base_manifest = rt!(DatasetManifest::load(&cfg.dataset.manifest));
    let manifest = DatasetManifest {
        name: format!("{}-poisoned", base_manifest.name),
        train_images: ti,
        train_labels: tl,
        test_images: base_manifest.test_images,
        test_labels: base_manifest.test_labels,
        shape: base_manifest.shape,
        class_count: base_manifest.class_count,
    };
    rt!(manifest.save(&dir.join("manifest.json")));

    for p in poisoned.provenance.iter().take(5) {
        rt!(write_comparison_strip(
            &train_set.images[p.source_index],
            &poisoned.set.images[p.index],
            &dir.join(format!("strip_{}.pgm", p.source_index)),
        ));
    }
    println!(
        "poisoned {} of {} samples → {}",
        poisoned.poisoned_indices.len(),
        train_set.len(),
        dir.display()
    );
    Ok(())
}

/// All non-target test samples carrying the trigger, paired with the target
/// class — the standard ASR evaluation set.
fn poisoned_test_pairs(
    test_set: &LabeledImageSet,
    spec: &TriggerSpec,
    cfg: &PoisonConfig,
) -> Result<Vec<(Image, usize)>, CliError> {
    let mut pairs = Vec::new();
    for (img, &label) in test_set.images.iter().zip(&test_set.labels) {
        if label == cfg.target_class {
            continue;
        }
        let p = rt!(poison_sample(img, spec, cfg));
        pairs.push((p, cfg.target_class));
    }
    Ok(pairs)
}

struct PipelineRun {
    victim_ba: f64,
    asr: f64,
}

/// Poison → train victim → measure, for one parameter setting. Used by the
/// sweep loop; the main eval run persists its own artifacts separately.
fn run_pipeline_once(
    cfg: &ExperimentConfig,
    train_set: &LabeledImageSet,
    test_set: &LabeledImageSet,
    spec: &TriggerSpec,
    poison_cfg: &PoisonConfig,
) -> Result<PipelineRun, CliError> {
    let poisoned = rt!(poison_dataset(train_set, spec, poison_cfg));
    let shape = train_set.image_shape().unwrap();
    let vs = cfg.victim_section();
    let model_cfg = vs.model_config(shape, train_set.class_count, cfg.seed ^ 0xA11C0DE);
    let (victim, _) = rt!(train(&Model::init(model_cfg), &poisoned.set, &vs.train_config(cfg.seed)));
    let pairs = poisoned_test_pairs(test_set, spec, poison_cfg)?;
    Ok(PipelineRun {
        victim_ba: rt!(metrics::benign_accuracy(&victim, test_set)),
        asr: rt!(metrics::attack_success_rate(&victim, &pairs)),
    })
}

fn cmd_eval(cfg: &ExperimentConfig, config_hash: &str) -> Result<(), CliError> {
    let trigger_path = cfg.out_dir.join("trigger.json");
    require(&trigger_path, "extract")?;
    let poisoned_manifest = poisoned_dir(cfg).join("manifest.json");
    require(&poisoned_manifest, "poison")?;

    let spec = rt!(TriggerSpec::load(&trigger_path));
    let (train_set, test_set) = load_sets(cfg)?;
    let pm = rt!(DatasetManifest::load(&poisoned_manifest));
    let mut poisoned_train = rt!(pm.load_train());
    if let Some(n) = cfg.dataset.train_limit {
        poisoned_train = poisoned_train.take(n);
    }

    let shape = train_set.image_shape().unwrap();
    let vs = cfg.victim_section();
    let victim_cfg = vs.model_config(shape, train_set.class_count, cfg.seed ^ 0xA11C0DE);
    let (victim, _) = rt!(train(&Model::init(victim_cfg.clone()), &poisoned_train, &vs.train_config(cfg.seed)));
    rt!(victim.save_checkpoint(&ckpt_path(cfg, "victim")));
    let (control, _) = rt!(train(&Model::init(victim_cfg), &train_set, &vs.train_config(cfg.seed)));
    rt!(control.save_checkpoint(&ckpt_path(cfg, "control")));

    let benign_accuracy = rt!(metrics::benign_accuracy(&victim, &test_set));
    let control_accuracy = rt!(metrics::benign_accuracy(&control, &test_set));

    let (asr, psnr_stats, ssim_stats, ssim_windowed_mean) = if cfg.poison.poison_rate > 0.0 {
        let pairs = poisoned_test_pairs(&test_set, &spec, &cfg.poison)?;
        let asr = rt!(metrics::attack_success_rate(&victim, &pairs));
        let originals: Vec<&Image> = test_set
            .images
            .iter()
            .zip(&test_set.labels)
            .filter(|(_, &l)| l != cfg.poison.target_class)
            .map(|(i, _)| i)
            .collect();
        let ref_pairs: Vec<(&Image, &Image)> =
            originals.iter().zip(&pairs).map(|(&o, (p, _))| (o, p)).collect();
        let (ps, ss) = rt!(metrics::quality_stats(&ref_pairs, 255.0));
        let wmean = {
            let mut acc = 0.0;
            for (o, (p, _)) in originals.iter().zip(&pairs) {
                acc += rt!(metrics::ssim_windowed(o, p, 255.0));
            }
            acc / originals.len() as f64
        };
        (Some(asr), Some(ps), Some(ss), Some(wmean))
    } else {
        (None, None, None, None)
    };

    let mut sweeps = Vec::new();
    let grids: [(&str, &Option<Vec<f64>>); 4] = [
        ("poison_rate", &cfg.sweeps.poison_rate),
        ("rho", &cfg.sweeps.rho),
        ("tau", &cfg.sweeps.tau),
        ("delta", &cfg.sweeps.delta),
    ];
    for (name, grid) in grids {
        let Some(values) = grid else { continue };
        let mut points = Vec::new();
        for &v in values {
            let mut pc = cfg.poison.clone();
            let mut trig = spec.clone();
            match name {
                "poison_rate" => pc.poison_rate = v,
                "rho" => pc.rho = v,
                "tau" => pc.tau = v,
                "delta" => {
                    // re-extract at the new threshold with the stored sources
                    let prelim = rt!(Model::load_checkpoint(&ckpt_path(cfg, "preliminary")));
                    let samples: Vec<Image> =
                        spec.source.iter().map(|&i| train_set.images[i].clone()).collect();
                    match extract_trigger(&prelim, &samples, &spec.source, pc.target_class, v, cfg.trigger.mode) {
                        Ok((t, _)) => trig = t,
                        Err(e) => {
                            eprintln!("delta={v}: {e}; skipping point");
                            continue;
                        }
                    }
                }
                _ => unreachable!(),
            }
            let run = run_pipeline_once(cfg, &train_set, &test_set, &trig, &pc)?;
            points.push(SweepPoint { value: v, asr: run.asr, benign_accuracy: run.victim_ba });
        }
        if points.is_empty() {
            continue;
        }
        let sweep_dir = cfg.out_dir.join("sweeps");
        rt!(std::fs::create_dir_all(&sweep_dir));
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| vec![format!("{}", p.value), format!("{}", p.asr), format!("{}", p.benign_accuracy)])
            .collect();
        rt!(write_csv(&sweep_dir.join(format!("{name}.csv")), &[name, "asr", "benign_accuracy"], &rows));
        rt!(report::write_line_svg(
            &sweep_dir.join(format!("{name}.svg")),
            &format!("ASR / BA vs {name}"),
            &[
                ("asr", points.iter().map(|p| (p.value, p.asr)).collect()),
                ("ba", points.iter().map(|p| (p.value, p.benign_accuracy)).collect()),
            ],
        ));
        sweeps.push(SweepResult { parameter: name.to_string(), points });
    }

    let eval = EvalReport {
        config_hash: config_hash.to_string(),
        code_version: report::code_version(),
        dataset: train_set.name.clone(),
        benign_accuracy,
        clean_control_accuracy: Some(control_accuracy),
        asr,
        psnr_stats,
        ssim_stats,
        ssim_windowed_mean,
        sweeps,
    };
    rt!(eval.save(&cfg.out_dir.join("eval.json")));
    let (header, row) = eval.csv_row();
    rt!(write_csv(&cfg.out_dir.join("eval.csv"), &header, &[row]));
    println!(
        "victim BA {benign_accuracy:.4} (control {control_accuracy:.4}), ASR {}",
        asr.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    Ok(())
}

fn cmd_defend(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let victim_path = ckpt_path(cfg, "victim");
    require(&victim_path, "eval")?;
    let trigger_path = cfg.out_dir.join("trigger.json");
    require(&trigger_path, "extract")?;
    let poisoned_manifest = poisoned_dir(cfg).join("manifest.json");
    require(&poisoned_manifest, "poison")?;

    let victim = rt!(Model::load_checkpoint(&victim_path));
    let spec = rt!(TriggerSpec::load(&trigger_path));
    let (train_set, test_set) = load_sets(cfg)?;
    let pm = rt!(DatasetManifest::load(&poisoned_manifest));
    let mut poisoned_train = rt!(pm.load_train());
    if let Some(n) = cfg.dataset.train_limit {
        poisoned_train = poisoned_train.take(n);
    }

    let dir = cfg.out_dir.join("defend");
    rt!(std::fs::create_dir_all(&dir));
    let d = &cfg.defenses;
    let cap = d.sample_cap.max(1);

    // shared evaluation material
    let benign_eval = test_set.take(cap);
    let eval_pairs = poisoned_test_pairs(&benign_eval, &spec, &cfg.poison)?;
    let poisoned_images: Vec<Image> = eval_pairs.iter().map(|(i, _)| i.clone()).collect();
    let originals: Vec<Image> = benign_eval
        .images
        .iter()
        .zip(&benign_eval.labels)
        .filter(|(_, &l)| l != cfg.poison.target_class)
        .map(|(i, _)| i.clone())
        .collect();

    if d.strip {
        let r = rt!(defenses::strip::strip_evaluate(
            &victim,
            &originals,
            &poisoned_images,
            &train_set.images[..train_set.len().min(200)],
            d.strip_overlays,
            0.01,
            cfg.seed,
        ));
        rt!(r.to_report().write_json(&dir.join("strip.json")));
        let (h, rows) = r.csv_rows();
        rt!(write_csv(&dir.join("strip.csv"), &h, &rows));
        println!("strip: detection {:.3} at FAR 1%", r.detection_rate);
    }
    if d.gradcam {
        let r = rt!(defenses::gradcam::gradcam_overlap(&victim, &originals, &poisoned_images, 0.1));
        rt!(r.to_report().write_json(&dir.join("gradcam.json")));
        println!("gradcam overlap: mean IoU {:.3}", r.mean_iou);
    }
    if d.fine_prune {
        let r = rt!(defenses::fine_prune::fine_prune_sweep(
            &victim,
            &train_set.take(cap),
            &benign_eval,
            &eval_pairs,
            d.prune_steps,
        ));
        rt!(r.to_report().write_json(&dir.join("fine_prune.json")));
        let (h, rows) = r.csv_rows();
        rt!(write_csv(&dir.join("fine_prune.csv"), &h, &rows));
        rt!(report::write_line_svg(
            &dir.join("fine_prune.svg"),
            "pruning sweep",
            &[
                ("ba", r.steps.iter().map(|s| (s.fraction, s.benign_accuracy)).collect()),
                ("asr", r.steps.iter().map(|s| (s.fraction, s.asr)).collect()),
            ],
        ));
        println!("fine-pruning: {} steps", r.steps.len());
    }
    if d.activation_clustering {
        let r = rt!(defenses::activation_clustering::activation_clustering(
            &victim,
            &poisoned_train.take(cap * train_set.class_count),
            cfg.seed,
        ));
        rt!(r.to_report().write_json(&dir.join("activation_clustering.json")));
        let (h, rows) = r.csv_rows();
        rt!(write_csv(&dir.join("activation_clustering.csv"), &h, &rows));
        let bars: Vec<(String, f64)> = r
            .scores
            .iter()
            .map(|s| (format!("c{}", s.class), s.silhouette.unwrap_or(0.0)))
            .collect();
        rt!(report::write_bar_svg(&dir.join("activation_clustering.svg"), "per-class silhouette", &bars));
        println!("activation clustering: top class {:?}", r.top_class());
    }
    if d.neural_cleanse {
        let r = rt!(defenses::neural_cleanse::neural_cleanse(
            &victim,
            &test_set.take(cap),
            d.nc_budget,
            d.nc_batch,
            cfg.seed,
        ));
        rt!(r.to_report().write_json(&dir.join("neural_cleanse.json")));
        let (h, rows) = r.csv_rows();
        rt!(write_csv(&dir.join("neural_cleanse.csv"), &h, &rows));
        let bars: Vec<(String, f64)> = r
            .per_class
            .iter()
            .map(|c| (format!("c{}", c.class), c.mask_norm.unwrap_or(0.0)))
            .collect();
        rt!(report::write_bar_svg(&dir.join("neural_cleanse.svg"), "per-class mask norm", &bars));
        println!("neural cleanse: flagged {:?}", r.flagged);
    }
    if d.ftd {
        let detector = rt!(defenses::ftd::ftd_train(
            &train_set.take(300),
            &defenses::ftd::default_corpus(),
            cfg.seed,
            &defenses::ftd::default_train_config(),
        ));
        let clean_r = rt!(defenses::ftd::ftd_detect(&detector, &benign_eval.images));
        let poison_r = rt!(defenses::ftd::ftd_detect(&detector, &poisoned_images));
        rt!(poison_r.to_report().write_json(&dir.join("ftd.json")));
        rt!(write_csv(
            &dir.join("ftd.csv"),
            &["set", "detection_rate"],
            &[
                vec!["clean".into(), format!("{}", clean_r.detection_rate)],
                vec!["poisoned".into(), format!("{}", poison_r.detection_rate)],
            ],
        ));
        println!(
            "ftd: clean FPR {:.3}, poisoned detection {:.3}",
            clean_r.detection_rate, poison_r.detection_rate
        );
    }
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let eval_path = cfg.out_dir.join("eval.json");
    require(&eval_path, "eval")?;
    let eval = rt!(EvalReport::load(&eval_path));
    let (header, row) = eval.csv_row();
    let rows = vec![row];
    let mut verdicts = Vec::new();
    let defend = cfg.out_dir.join("defend");
    if defend.is_dir() {
        let mut entries: Vec<PathBuf> = rt!(std::fs::read_dir(&defend))
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for p in entries {
            let v: serde_json::Value = rt!(serde_json::from_str(&rt!(std::fs::read_to_string(&p))));
            verdicts.push(format!(
                "{}: {}",
                v["defense"].as_str().unwrap_or("?"),
                v["verdict"].as_str().unwrap_or("?")
            ));
        }
    }
    rt!(write_csv(&cfg.out_dir.join("report.csv"), &header, &rows));
    println!("== evaluation ==");
    println!(
        "dataset {} | BA {:.4} | ASR {}",
        eval.dataset,
        eval.benign_accuracy,
        eval.asr.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    for v in verdicts {
        println!("{v}");
    }
    println!("summary: {}", cfg.out_dir.join("report.csv").display());
    Ok(())
}
