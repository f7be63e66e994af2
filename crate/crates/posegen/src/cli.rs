//! Command-line entry points: toy dataset generation, training the three
//! stages, inference grids, metric reports, and the lambda sweep.
//!
//! Every command takes its hyperparameters from a single TOML config file
//! (flags override individual fields), writes all outputs under a per-run
//! `--out` directory, and finishes by atomically writing a `manifest.json`
//! holding the exact config snapshot, seed, and output list, so a run can
//! be reproduced from its manifest alone.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure (non-finite loss).

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage};
use crate::data::{self, Dataset, Split, ToySpec};
use crate::error::{Error, Result};
use crate::img::ImageTensor;
use crate::metrics::{inception_score, mask_is, mask_ssim, oracle_by_name, ssim};
use crate::pose::{compute_pose_mask, encode_heatmaps, KeypointSet};
use crate::train::{self, generate as run_generate, LogRow};
use crate::viz::{assemble_grid, render_pose};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.tsv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.tsv";

#[derive(Parser)]
#[command(
    name = "posegen",
    version,
    about = "Two-stage pose-conditioned person image synthesis on CPU"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic stick-figure dataset.
    MakeToyDataset(MakeToyArgs),
    /// Train stage one, stage two, or the one-stage baseline.
    Train(TrainArgs),
    /// Run inference for one condition image and one or more target poses.
    Generate(GenerateArgs),
    /// Emit the metric report (SSIM, IS, mask-SSIM, mask-IS).
    Evaluate(EvaluateArgs),
    /// Train stage two once per lambda and compare.
    SweepLambda(SweepArgs),
}

#[derive(Args)]
struct MakeToyArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Identities held out into the test split.
    #[arg(long, default_value_t = 2)]
    test_identities: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config TOML; the single source of hyperparameters.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints, the loss log, and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Override train.stage from the config.
    #[arg(long)]
    stage: Option<String>,
    /// Override train.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override data.root from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resume from a checkpoint produced under the identical config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-one checkpoint to refine (stage two only).
    #[arg(long)]
    g1: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Stage-one checkpoint.
    #[arg(long)]
    g1: PathBuf,
    /// Optional stage-two checkpoint for refined outputs.
    #[arg(long)]
    g2: Option<PathBuf>,
    /// Condition image (PNG at the model resolution).
    #[arg(long)]
    condition: PathBuf,
    /// Target poses: keypoint annotation file, one record per pose.
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Stage-one checkpoint.
    #[arg(long)]
    g1: PathBuf,
    /// Optional stage-two checkpoint; adds the refined variant rows.
    #[arg(long)]
    g2: Option<PathBuf>,
    /// Dataset root (defaults to data.root of the checkpoint config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of test pairs to sample.
    #[arg(long, default_value_t = 32)]
    pairs: usize,
    /// Sampling seed for the test-pair selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classifier oracle: uniform | color-octant.
    #[arg(long, default_value = "color-octant")]
    oracle: String,
    /// Inception-score splits.
    #[arg(long, default_value_t = 4)]
    splits: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Base stage-two config; loss.lambda is replaced per run.
    #[arg(long)]
    config: PathBuf,
    /// Stage-one checkpoint to refine.
    #[arg(long)]
    g1: PathBuf,
    /// Comma-separated lambda values, e.g. `0,1,100`.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run lambda points on parallel threads (independent output dirs).
    #[arg(long, default_value_t = false)]
    parallel: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Parse and execute; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::MakeToyDataset(a) => cmd_make_toy_dataset(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::SweepLambda(a) => cmd_sweep_lambda(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reproducibility record written at the end of every run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full config snapshot: run-config TOML, or the toy-spec JSON for
    /// dataset generation.
    pub config_snapshot: String,
    pub seed: u64,
    pub build: String,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
    pub created_unix: u64,
}

impl RunManifest {
    fn write_atomic(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, body + "\n")?;
        std::fs::rename(tmp, dir.join(MANIFEST))?;
        Ok(())
    }
}

fn manifest(
    command: &str,
    snapshot: String,
    seed: u64,
    outputs: Vec<String>,
    started: Instant,
) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        config_snapshot: snapshot,
        seed,
        build: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        outputs,
        duration_seconds: started.elapsed().as_secs_f64(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    }
}

fn cmd_make_toy_dataset(args: &MakeToyArgs) -> Result<()> {
    let started = Instant::now();
    let spec = ToySpec {
        num_identities: args.identities,
        images_per_identity: args.images_per_identity,
        image_size: args.image_size,
        seed: args.seed,
        test_identities: args.test_identities,
    };
    data::make_toy_dataset(&spec, &args.out)?;
    let snapshot =
        serde_json::to_string_pretty(&spec).map_err(|e| Error::Data(format!("spec: {e}")))?;
    let outputs = vec![
        data::IMAGE_DIR.to_string(),
        data::KEYPOINT_FILE.to_string(),
        data::INDEX_TRAIN.to_string(),
        data::INDEX_TEST.to_string(),
        data::TOY_MANIFEST.to_string(),
    ];
    manifest("make-toy-dataset", snapshot, args.seed, outputs, started)
        .write_atomic(&args.out)?;
    println!(
        "toy dataset: {} identities x {} images at {}px -> {}",
        spec.num_identities,
        spec.images_per_identity,
        spec.image_size,
        args.out.display()
    );
    Ok(())
}

fn load_config_with_overrides(
    config: &Path,
    seed: Option<u64>,
    stage: Option<&str>,
    data_root: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(stage) = stage {
        cfg.train.stage = stage.parse()?;
    }
    if let Some(root) = data_root {
        cfg.data.root = root.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config_with_overrides(
        &args.config,
        args.seed,
        args.stage.as_deref(),
        args.data.as_deref(),
    )?;
    if cfg.data.root.is_empty() {
        return Err(Error::Config("data.root is not set (config or --data)".into()));
    }
    let dataset = Dataset::load(Path::new(&cfg.data.root), Split::Train)?;

    let resume = match &args.resume {
        None => None,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            // refuse before any training step runs
            ckpt.check_resume_compatible(&cfg)?;
            Some(ckpt)
        }
    };

    let outcome = match cfg.train.stage {
        Stage::Stage1 => train::train_stage1(&cfg, &dataset, Some(&args.out), resume.as_ref())?,
        Stage::OneStage => {
            train::train_one_stage(&cfg, &dataset, Some(&args.out), resume.as_ref())?
        }
        Stage::Stage2 => {
            let g1_path = args
                .g1
                .as_ref()
                .ok_or_else(|| Error::Config("stage2 needs --g1 <stage-one checkpoint>".into()))?;
            let g1_ckpt = Checkpoint::load(g1_path)?;
            train::train_stage2(&cfg, &dataset, &g1_ckpt, Some(&args.out), resume.as_ref())?
        }
    };

    let last = outcome.log.last();
    match last {
        Some(LogRow::Stage1 { iteration, masked_l1 }) => {
            println!("stage1 done: iteration {iteration}, masked_l1 {masked_l1:.6}")
        }
        Some(LogRow::Adversarial { iteration, d_loss, g_adv, masked_l1 }) => println!(
            "{} done: iteration {iteration}, d_loss {d_loss:.6}, g_adv {g_adv:.6}, masked_l1 {masked_l1:.6}",
            cfg.train.stage
        ),
        None => {}
    }

    let outputs = vec![train::FINAL_CKPT.to_string(), train::LOSS_LOG.to_string()];
    manifest("train", cfg.to_toml_string()?, cfg.train.seed, outputs, started)
        .write_atomic(&args.out)?;
    Ok(())
}

/// Parse the keypoint annotation format into (id, keypoints) rows.
fn load_pose_list(path: &Path) -> Result<Vec<(String, KeypointSet)>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::DataFile {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let coords: Vec<i32> = cols[1..]
            .iter()
            .map(|s| s.parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::DataFile {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", lineno + 1),
            })?;
        out.push((cols[0].to_string(), KeypointSet::from_flat(&coords)?));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds no poses", path.display())));
    }
    Ok(out)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let g1_ckpt = Checkpoint::load(&args.g1)?;
    let g2_ckpt = args.g2.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    let condition = ImageTensor::load_png(&args.condition)?;
    let poses = load_pose_list(&args.keypoints)?;
    std::fs::create_dir_all(&args.out)?;

    let cfg = &g1_ckpt.config;
    let (h, w) = (cfg.data.image_height, cfg.data.image_width);
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for (i, (id, kp)) in poses.iter().enumerate() {
        let (coarse, refined) = run_generate(&g1_ckpt, g2_ckpt.as_ref(), &condition, kp)?;
        let coarse_name = format!("coarse_{i:03}_{id}.png");
        coarse.save_png(&args.out.join(&coarse_name))?;
        outputs.push(coarse_name);

        let pose_tensor = encode_heatmaps(kp, h, w, cfg.data.heatmap_radius)?;
        let mut row = vec![condition.clone(), render_pose(kp, &pose_tensor), coarse];
        if let Some(refined) = refined {
            let refined_name = format!("refined_{i:03}_{id}.png");
            refined.save_png(&args.out.join(&refined_name))?;
            outputs.push(refined_name);
            row.push(refined);
        }
        rows.push(row);
    }
    let grid = assemble_grid(&rows)?;
    grid.save_png(&args.out.join("grid.png"))?;
    outputs.push("grid.png".to_string());

    println!("generated {} pose(s) -> {}", poses.len(), args.out.display());
    manifest(
        "generate",
        g1_ckpt.config.to_toml_string()?,
        g1_ckpt.seed,
        outputs,
        started,
    )
    .write_atomic(&args.out)?;
    Ok(())
}

/// One metric-report row: a model variant with its four scores.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub model: String,
    pub ssim: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub mask_ssim: f64,
    pub mask_is_mean: f64,
    pub mask_is_std: f64,
}

impl ReportRow {
    fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.model,
            self.ssim,
            self.is_mean,
            self.is_std,
            self.mask_ssim,
            self.mask_is_mean,
            self.mask_is_std
        )
    }
}

/// Evaluate checkpoints over sampled test pairs; returns one row per model
/// variant ("coarse", and "refined" when a stage-two checkpoint is given).
pub fn evaluate_report(
    g1_ckpt: &Checkpoint,
    g2_ckpt: Option<&Checkpoint>,
    data_root: &Path,
    pair_count: usize,
    sample_seed: u64,
    oracle_name: &str,
    splits: usize,
) -> Result<Vec<ReportRow>> {
    let cfg = &g1_ckpt.config;
    let dataset = Dataset::load(data_root, Split::Test)?;
    let all_pairs = dataset.build_pairs(0);
    if all_pairs.is_empty() {
        return Err(Error::Data("test split has no pairs".into()));
    }
    let pairs = data::sample_pairs(&all_pairs, pair_count, sample_seed);
    let oracle = oracle_by_name(oracle_name)?;
    let splits = splits.min(pairs.len()).max(1);

    struct VariantAcc {
        model: String,
        images: Vec<ImageTensor>,
        ssim_sum: f64,
        mask_ssim_sum: f64,
    }
    let mut variants = vec![VariantAcc {
        model: "coarse".into(),
        images: Vec::new(),
        ssim_sum: 0.0,
        mask_ssim_sum: 0.0,
    }];
    if g2_ckpt.is_some() {
        variants.push(VariantAcc {
            model: "refined".into(),
            images: Vec::new(),
            ssim_sum: 0.0,
            mask_ssim_sum: 0.0,
        });
    }
    let mut masks = Vec::new();

    for pair in &pairs {
        let sample = dataset.load_pair(*pair, false, &cfg.data, &cfg.morphology)?;
        let (coarse, refined) =
            run_generate(g1_ckpt, g2_ckpt, &sample.condition_image, &sample.target_keypoints)?;
        let target = &sample.target_image;
        let mask = compute_pose_mask(
            &sample.target_keypoints,
            cfg.data.image_height,
            cfg.data.image_width,
            &cfg.morphology,
        );

        variants[0].ssim_sum += ssim(&coarse, target)?;
        variants[0].mask_ssim_sum += mask_ssim(&coarse, target, &mask)?;
        variants[0].images.push(coarse);
        if let Some(refined) = refined {
            variants[1].ssim_sum += ssim(&refined, target)?;
            variants[1].mask_ssim_sum += mask_ssim(&refined, target, &mask)?;
            variants[1].images.push(refined);
        }
        masks.push(mask);
    }

    let n = pairs.len() as f64;
    let mut rows = Vec::new();
    for v in variants {
        let (is_mean, is_std) = inception_score(&v.images, oracle.as_ref(), splits)?;
        let (mis_mean, mis_std) = mask_is(&v.images, &masks, oracle.as_ref(), splits)?;
        rows.push(ReportRow {
            model: v.model,
            ssim: v.ssim_sum / n,
            is_mean,
            is_std,
            mask_ssim: v.mask_ssim_sum / n,
            mask_is_mean: mis_mean,
            mask_is_std: mis_std,
        });
    }
    Ok(rows)
}

pub const REPORT_HEADER: &str = "model\tssim\tis\tis_std\tmask_ssim\tmask_is\tmask_is_std";

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let g1_ckpt = Checkpoint::load(&args.g1)?;
    let g2_ckpt = args.g2.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
    if let Some(ckpt) = &g2_ckpt {
        ckpt.check_geometry_compatible(&g1_ckpt.config)?;
    }
    let data_root = args
        .data
        .clone()
        .unwrap_or_else(|| PathBuf::from(&g1_ckpt.config.data.root));

    let rows = evaluate_report(
        &g1_ckpt,
        g2_ckpt.as_ref(),
        &data_root,
        args.pairs,
        args.seed,
        &args.oracle,
        args.splits,
    )?;

    std::fs::create_dir_all(&args.out)?;
    let mut body = String::from(REPORT_HEADER);
    for row in &rows {
        body.push('\n');
        body.push_str(&row.tsv());
        println!("{}", row.tsv());
    }
    std::fs::write(args.out.join(REPORT), body + "\n")?;

    manifest(
        "evaluate",
        g1_ckpt.config.to_toml_string()?,
        args.seed,
        vec![REPORT.to_string()],
        started,
    )
    .write_atomic(&args.out)?;
    Ok(())
}

/// Outcome of one lambda point in the sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_d_loss: f64,
    pub final_g_adv: f64,
    pub final_masked_l1: f64,
}

/// Train stage two once per lambda from a shared stage-one checkpoint.
/// Returns rows in the given lambda order.
pub fn sweep_lambda(
    cfg: &RunConfig,
    g1_ckpt: &Checkpoint,
    lambdas: &[f64],
    out_dir: &Path,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    let dataset = Dataset::load(Path::new(&cfg.data.root), Split::Train)?;

    let run_one = |lambda: f64| -> Result<SweepRow> {
        let mut c = cfg.clone();
        c.train.stage = Stage::Stage2;
        c.loss.lambda = lambda;
        let dir = out_dir.join(format!("lambda_{lambda}"));
        let outcome = train::train_stage2(&c, &dataset, g1_ckpt, Some(&dir), None)?;
        let last = outcome
            .log
            .last()
            .ok_or_else(|| Error::Data("sweep run produced no log rows".into()))?;
        match last {
            LogRow::Adversarial { d_loss, g_adv, masked_l1, .. } => Ok(SweepRow {
                lambda,
                final_d_loss: *d_loss,
                final_g_adv: *g_adv,
                final_masked_l1: *masked_l1,
            }),
            _ => unreachable!("stage two logs adversarial rows"),
        }
    };

    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                lambdas.iter().map(|&l| scope.spawn(move || run_one(l))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
        })
    } else {
        lambdas.iter().map(|&l| run_one(l)).collect()
    }
}

fn cmd_sweep_lambda(args: &SweepArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config_with_overrides(
        &args.config,
        args.seed,
        Some("stage2"),
        args.data.as_deref(),
    )?;
    if cfg.data.root.is_empty() {
        return Err(Error::Config("data.root is not set (config or --data)".into()));
    }
    let g1_ckpt = Checkpoint::load(&args.g1)?;
    g1_ckpt.check_geometry_compatible(&cfg)?;

    let rows = sweep_lambda(&cfg, &g1_ckpt, &args.lambdas, &args.out, args.parallel)?;

    std::fs::create_dir_all(&args.out)?;
    let mut body = String::from("lambda\td_loss\tg_adv\tmasked_l1");
    for row in &rows {
        body.push_str(&format!(
            "\n{}\t{:.9}\t{:.9}\t{:.9}",
            row.lambda, row.final_d_loss, row.final_g_adv, row.final_masked_l1
        ));
        println!(
            "lambda {}: d_loss {:.6}, g_adv {:.6}, masked_l1 {:.6}",
            row.lambda, row.final_d_loss, row.final_g_adv, row.final_masked_l1
        );
    }
    std::fs::write(args.out.join(SWEEP_SUMMARY), body + "\n")?;

    // side-by-side refinement comparison for a few held-out samples
    write_sweep_grid(&cfg, &g1_ckpt, &args.lambdas, &args.out)?;

    let mut outputs = vec![SWEEP_SUMMARY.to_string(), "sweep_grid.png".to_string()];
    for l in &args.lambdas {
        outputs.push(format!("lambda_{l}/"));
    }
    manifest("sweep-lambda", cfg.to_toml_string()?, cfg.train.seed, outputs, started)
        .write_atomic(&args.out)?;
    Ok(())
}

/// Rows = samples, columns = condition, pose, target, coarse, then one
/// refined column per lambda.
fn write_sweep_grid(
    cfg: &RunConfig,
    g1_ckpt: &Checkpoint,
    lambdas: &[f64],
    out_dir: &Path,
) -> Result<()> {
    let root = Path::new(&cfg.data.root);
    let dataset = match Dataset::load(root, Split::Test) {
        Ok(ds) if !ds.build_pairs(0).is_empty() => ds,
        _ => Dataset::load(root, Split::Train)?,
    };
    let pairs = dataset.build_pairs(0);
    let chosen = data::sample_pairs(&pairs, 3.min(pairs.len()), cfg.train.seed);

    let ckpts: Vec<Checkpoint> = lambdas
        .iter()
        .map(|l| Checkpoint::load(&out_dir.join(format!("lambda_{l}")).join(train::FINAL_CKPT)))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for pair in &chosen {
        let sample = dataset.load_pair(*pair, false, &cfg.data, &cfg.morphology)?;
        let (coarse, _) = run_generate(g1_ckpt, None, &sample.condition_image, &sample.target_keypoints)?;
        let mut row = vec![
            sample.condition_image.clone(),
            render_pose(&sample.target_keypoints, &sample.pose),
            sample.target_image.clone(),
            coarse,
        ];
        for ckpt in &ckpts {
            let (_, refined) =
                run_generate(g1_ckpt, Some(ckpt), &sample.condition_image, &sample.target_keypoints)?;
            row.push(refined.expect("stage-two checkpoint present"));
        }
        rows.push(row);
    }
    assemble_grid(&rows)?.save_png(&out_dir.join("sweep_grid.png"))?;
    Ok(())
}
