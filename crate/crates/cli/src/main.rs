//! `iqt`: phantom generation, simulation, normalisation, training,
//! enhancement, evaluation and the acceptance self-test.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use iqt_core::acceptance::{run_criterion, LearningConfig, CRITERIA};
use iqt_core::metrics::{psnr, rve, ssim, LabelVolume};
use iqt_core::network::{enhance_volume, load_checkpoint, save_checkpoint, EnhanceOptions, ModelSpec};
use iqt_core::normalizer::{fit_normalizer, LandmarkTable, DEFAULT_PERCENTILES};
use iqt_core::pipeline::{assemble_dataset, simulate_subject, synth_subject, DatasetConfig, Subject};
use iqt_core::simulator::SnrDistribution;
use iqt_core::training::{train, write_history_csv, TrainConfig};
use iqt_core::volume::{generate_phantom, load_volume, save_volume, Geometry, PhantomConfig, TissueMasks, Volume3D};

#[derive(Parser)]
#[command(name = "iqt", version, about = "Image quality transfer for low-field MRI")]
struct Cli {
    /// Worker threads for stage-internal parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic high-field phantoms with tissue masks.
    Phantom(PhantomArgs),
    /// Degrade a high-field volume into a synthetic low-field volume.
    Simulate(SimulateArgs),
    /// Fit a landmark table over low-field volumes.
    FitNorm(FitNormArgs),
    /// Train an anisotropic U-Net on simulated patch pairs.
    Train(TrainArgs),
    /// Enhance a low-field volume with a trained model.
    Enhance(EnhanceArgs),
    /// PSNR, SSIM and optional volumetric errors against a reference.
    Evaluate(EvaluateArgs),
    /// Run the acceptance criteria.
    Selftest(SelftestArgs),
}

#[derive(Args, Serialize)]
struct PhantomArgs {
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_dims, default_value = "48,48,48")]
    dims: [usize; 3],
    /// Isotropic voxel size in mm.
    #[arg(long, default_value_t = 0.7)]
    voxel: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// High-field volume; masks default to `<stem>_wm.nii`, `_gm`, `_oth`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    wm: Option<PathBuf>,
    #[arg(long)]
    gm: Option<PathBuf>,
    #[arg(long)]
    oth: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    r: usize,
    /// t1w, t2w or flair.
    #[arg(long, default_value = "t1w")]
    contrast: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep the simulated background instead of zeroing it.
    #[arg(long)]
    keep_background: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FitNormArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Train on this many generated phantoms.
    #[arg(long, conflicts_with = "data")]
    phantoms: Option<usize>,
    /// Train on the high-field volumes (with mask files) in this directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    contrast: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    /// JSON with optional `dataset`, `train` and `model` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the fitted landmark table here.
    #[arg(long)]
    save_norm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EnhanceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Landmark table from `fit-norm` or `train --save-norm`.
    #[arg(long, alias = "load-norm")]
    norm: Option<PathBuf>,
    #[arg(long)]
    uncertainty: Option<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_dims)]
    step: Option<[usize; 3]>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, requires = "labels_gold")]
    labels_est: Option<PathBuf>,
    #[arg(long, requires = "labels_est")]
    labels_gold: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    structures: Vec<u32>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SelftestArgs {
    /// Criteria to run, e.g. `1,2,10`; all when omitted.
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<usize>,
    /// Override the epochs of the training criterion.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok([*a, *b, *c]),
        _ => Err(format!("expected three positive integers, got `{s}`")),
    }
}

/// Argument problems found after parsing; reported before any output exists.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Stage(&'static str, anyhow::Error),
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

trait StageExt<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage(name, e.into()))
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    threads: usize,
    parameters: Value,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    timings_secs: BTreeMap<String, f64>,
}

struct Run {
    command: &'static str,
    threads: usize,
    parameters: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    timings: BTreeMap<String, f64>,
    clock: Instant,
}

impl Run {
    fn new(command: &'static str, threads: usize, parameters: Value) -> Self {
        Run {
            command,
            threads,
            parameters,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            clock: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        self.timings.insert(stage.to_string(), self.clock.elapsed().as_secs_f64());
        self.clock = Instant::now();
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn write(self, path: &Path) -> Result<(), Failure> {
        let digests = |ps: &[PathBuf]| -> Result<Vec<FileDigest>, Failure> {
            ps.iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p).stage("manifest")?,
                    })
                })
                .collect()
        };
        let m = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            threads: self.threads,
            parameters: self.parameters,
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            timings_secs: self.timings,
        };
        fs::write(path, serde_json::to_vec_pretty(&m).stage("manifest")?).stage("manifest")
    }
}

fn sha256_file(p: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `dir/name.nii` -> `dir/name.<suffix>`.
fn beside(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii")
        .or_else(|| name.strip_suffix(".ckpt"))
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn mask_path(hf: &Path, class: &str) -> PathBuf {
    let name = hf.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    let stem = name.strip_suffix(".nii").unwrap_or(&name);
    hf.with_file_name(format!("{stem}_{class}.nii"))
}

fn contrast(name: &str) -> Result<SnrDistribution, Usage> {
    SnrDistribution::preset(name).ok_or_else(|| Usage(format!("unknown contrast `{name}` (expected t1w, t2w or flair)")))
}

fn check_r(r: usize) -> Result<(), Usage> {
    if [2, 4, 8].contains(&r) {
        Ok(())
    } else {
        Err(Usage(format!("--r must be 2, 4 or 8, got {r}")))
    }
}

fn save(vol: &Volume3D<f64>, path: &Path, run: &mut Run) -> Result<(), Failure> {
    save_volume(vol, path).stage("write")?;
    run.output(path);
    Ok(())
}

fn load(path: &Path, run: &mut Run, stage: &'static str) -> Result<Volume3D<f64>, Failure> {
    let v = load_volume(path, None)
        .with_context(|| format!("reading {}", path.display()))
        .stage(stage)?;
    run.input(path);
    Ok(v)
}

fn write_masks(masks: &TissueMasks<f64>, hf: &Path, run: &mut Run) -> Result<(), Failure> {
    for (class, v) in [("wm", &masks.wm), ("gm", &masks.gm), ("oth", &masks.oth)] {
        save(v, &mask_path(hf, class), run)?;
    }
    Ok(())
}

fn load_masks(
    hf: &Path,
    wm: Option<&PathBuf>,
    gm: Option<&PathBuf>,
    oth: Option<&PathBuf>,
    run: &mut Run,
) -> Result<TissueMasks<f64>, Failure> {
    let pick = |given: Option<&PathBuf>, class| given.cloned().unwrap_or_else(|| mask_path(hf, class));
    let wm = load(&pick(wm, "wm"), run, "load masks")?;
    let gm = load(&pick(gm, "gm"), run, "load masks")?;
    let oth = load(&pick(oth, "oth"), run, "load masks")?;
    TissueMasks::new(wm, gm, oth).stage("load masks")
}

fn phantom(a: &PhantomArgs, threads: usize) -> Result<(), Failure> {
    if a.n == 0 {
        return Err(Usage("--n must be >= 1".into()).into());
    }
    if !(a.voxel.is_finite() && a.voxel > 0.0) {
        return Err(Usage(format!("--voxel must be positive, got {}", a.voxel)).into());
    }
    let mut run = Run::new("phantom", threads, json!(a));
    fs::create_dir_all(&a.out).stage("write")?;
    for i in 0..a.n {
        let cfg = PhantomConfig {
            dims: a.dims,
            geometry: Geometry::isotropic(a.voxel),
            seed: a.seed.wrapping_add(i as u64),
            ..Default::default()
        };
        let (hf, masks) = generate_phantom(&cfg).stage("phantom")?;
        let path = a.out.join(format!("phantom_{i:03}.nii"));
        save(&hf, &path, &mut run)?;
        write_masks(&masks, &path, &mut run)?;
    }
    run.lap("phantom");
    run.write(&a.out.join("manifest.json"))
}

fn simulate(a: &SimulateArgs, threads: usize) -> Result<(), Failure> {
    check_r(a.r)?;
    let p = contrast(&a.contrast)?;
    let mut run = Run::new("simulate", threads, json!(a));
    let hf = load(&a.input, &mut run, "load input")?;
    let masks = load_masks(&a.input, a.wm.as_ref(), a.gm.as_ref(), a.oth.as_ref(), &mut run)?;
    run.lap("load");
    let sim = iqt_core::simulator::simulate(&hf, &masks, a.r, &p, Default::default(), a.seed).stage("simulate")?;
    let image = if a.keep_background {
        sim.image.clone()
    } else {
        iqt_core::pipeline::strip_background(&sim.image, &sim.background).stage("simulate")?
    };
    run.lap("simulate");
    save(&image, &a.out, &mut run)?;
    let sample = beside(&a.out, "contrast.json");
    let body = json!({ "sample": sim.sample, "multipliers": sim.multipliers });
    fs::write(&sample, serde_json::to_vec_pretty(&body).stage("write")?).stage("write")?;
    run.output(&sample);
    run.write(&beside(&a.out, "manifest.json"))
}

fn fit_norm(a: &FitNormArgs, threads: usize) -> Result<(), Failure> {
    let mut run = Run::new("fit-norm", threads, json!(a));
    let vols = a
        .inputs
        .iter()
        .map(|p| load(p, &mut run, "load input"))
        .collect::<Result<Vec<_>, _>>()?;
    let table = fit_normalizer(&vols, &DEFAULT_PERCENTILES).stage("fit-norm")?;
    table.save(&a.out).stage("write")?;
    run.output(&a.out);
    run.lap("fit-norm");
    run.write(&beside(&a.out, "manifest.json"))
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct TrainFile {
    dataset: Option<DatasetConfig>,
    train: Option<TrainConfig>,
    model: Option<ModelSpec>,
}

/// High-field volumes in `dir`, excluding mask files, sorted by name.
fn list_volumes(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        let name = p.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let is_mask = ["_wm.nii", "_gm.nii", "_oth.nii"].iter().any(|s| name.ends_with(s));
        if name.ends_with(".nii") && !is_mask {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn train_cmd(a: &TrainArgs, threads: usize) -> Result<(), Failure> {
    if a.phantoms.is_none() && a.data.is_none() {
        return Err(Usage("one of --phantoms or --data is required".into()).into());
    }
    let file: TrainFile = match &a.config {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| Usage(format!("reading {}: {e}", p.display())))?;
            serde_json::from_slice(&bytes).map_err(|e| Usage(format!("parsing {}: {e}", p.display())))?
        }
        None => TrainFile::default(),
    };
    let mut dataset = file.dataset.unwrap_or_default();
    let mut tc = file.train.unwrap_or(TrainConfig {
        batch_size: 8,
        epochs: 30,
        ..Default::default()
    });
    if let Some(n) = a.phantoms {
        dataset.subjects = n;
    }
    if let Some(c) = &a.contrast {
        dataset.contrast = contrast(c)?;
    }
    if let Some(r) = a.r {
        dataset.r = r;
    }
    check_r(dataset.r)?;
    let spec = match file.model {
        Some(m) => ModelSpec { r: dataset.r, ..m },
        None => ModelSpec::toy(dataset.r),
    };
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
        dataset.seed = s;
    }
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    tc.validate(&spec).map_err(|e| Usage(e.to_string()))?;

    let params = json!({ "args": a, "dataset": dataset, "train": tc, "model": spec });
    let mut run = Run::new("train", threads, params);
    let subjects: Vec<Subject> = match &a.data {
        None => (0..dataset.subjects)
            .map(|i| synth_subject(&dataset, i))
            .collect::<iqt_core::Result<_>>()
            .stage("simulate")?,
        Some(dir) => {
            let files = list_volumes(dir).stage("load input")?;
            if files.is_empty() {
                return Err(Failure::Stage("load input", anyhow::anyhow!("no volumes in {}", dir.display())));
            }
            let mut out = Vec::new();
            for (i, f) in files.iter().enumerate() {
                let hf = load(f, &mut run, "load input")?;
                let masks = load_masks(f, None, None, None, &mut run)?;
                out.push(simulate_subject(&dataset, i, hf, masks).stage("simulate")?);
            }
            out
        }
    };
    run.lap("simulate");
    let ds = assemble_dataset(&dataset, subjects).stage("patches")?;
    run.lap("patches");
    let outcome = train::<f32>(&spec, &ds.patches, &tc).stage("train")?;
    run.lap("train");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).stage("write")?;
    }
    save_checkpoint(&a.out, &spec, &outcome.weights).stage("write")?;
    run.output(&a.out);
    let history = beside(&a.out, "history.csv");
    write_history_csv(&outcome.history, &history).stage("write")?;
    run.output(&history);
    if let Some(p) = &a.save_norm {
        let table = ds
            .table
            .as_ref()
            .ok_or_else(|| Failure::Stage("write", anyhow::anyhow!("normalisation is disabled in the dataset config")))?;
        table.save(p).stage("write")?;
        run.output(p);
    }
    run.write(&beside(&a.out, "manifest.json"))
}

fn enhance(a: &EnhanceArgs, threads: usize) -> Result<(), Failure> {
    let mut run = Run::new("enhance", threads, json!(a));
    let (spec, weights) = load_checkpoint::<f32>(&a.model).stage("load model")?;
    run.input(&a.model);
    let lf = load(&a.input, &mut run, "load input")?;
    let table = match &a.norm {
        Some(p) => {
            run.input(p);
            Some(LandmarkTable::load(p).stage("load norm")?)
        }
        None => None,
    };
    let mut opts = EnhanceOptions::for_r(spec.r);
    if let Some(p) = a.patch {
        opts.patch = p;
        opts.step = [(p[0] / 2).max(1), (p[1] / 2).max(1), (p[2] / 2).max(1)];
    }
    if let Some(s) = a.step {
        opts.step = s;
    }
    run.lap("load");
    let e = enhance_volume(&weights, &spec, &lf, table.as_ref(), &opts).stage("enhance")?;
    run.lap("enhance");
    save(&e.volume, &a.out, &mut run)?;
    if let Some(u) = &a.uncertainty {
        let var = e
            .variance
            .ok_or_else(|| Failure::Stage("enhance", anyhow::anyhow!("model has no Masksembles layers, so no uncertainty map")))?;
        save(&var, u, &mut run)?;
    }
    run.write(&beside(&a.out, "manifest.json"))
}

fn evaluate(a: &EvaluateArgs, threads: usize) -> Result<(), Failure> {
    let mut run = Run::new("evaluate", threads, json!(a));
    let est = load(&a.est, &mut run, "load input")?;
    let reference = load(&a.reference, &mut run, "load input")?;
    let mut report = json!({
        "psnr_db": psnr(&est, &reference).stage("evaluate")?,
        "ssim": ssim(&est, &reference).stage("evaluate")?,
    });
    if let (Some(le), Some(lg)) = (&a.labels_est, &a.labels_gold) {
        let le = LabelVolume::from_volume(&load(le, &mut run, "load labels")?).stage("load labels")?;
        let lg = LabelVolume::from_volume(&load(lg, &mut run, "load labels")?).stage("load labels")?;
        let mut rves = BTreeMap::new();
        for &s in &a.structures {
            rves.insert(s.to_string(), rve(&le, &lg, s).stage("evaluate")?);
        }
        report["rve"] = json!(rves);
    }
    run.lap("evaluate");
    let text = serde_json::to_string_pretty(&report).stage("evaluate")?;
    println!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).stage("write")?;
        run.output(out);
        run.write(&beside(out, "manifest.json"))?;
    }
    Ok(())
}

fn selftest(a: &SelftestArgs, threads: usize) -> Result<bool, Failure> {
    let known: Vec<usize> = CRITERIA.iter().map(|c| c.0).collect();
    if let Some(bad) = a.criteria.iter().find(|c| !known.contains(c)) {
        return Err(Usage(format!("no criterion {bad}; expected 1 to {}", known.len())).into());
    }
    let ids = if a.criteria.is_empty() { known } else { a.criteria.clone() };
    let mut learning = LearningConfig::default();
    if let Some(e) = a.epochs {
        learning.train.epochs = e;
    }
    let mut run = Run::new("selftest", threads, json!({ "args": a, "learning": learning }));
    let mut reports = Vec::new();
    for id in ids {
        let report = run_criterion(id, &learning);
        println!("{report}");
        run.lap(&format!("criterion {id}"));
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_vec_pretty(&reports).stage("write")?).stage("write")?;
        run.output(out);
        run.write(&beside(out, "manifest.json"))?;
    }
    Ok(passed)
}

fn dispatch(cli: &Cli) -> Result<bool, Failure> {
    let t = cli.threads;
    match &cli.command {
        Command::Phantom(a) => phantom(a, t).map(|_| true),
        Command::Simulate(a) => simulate(a, t).map(|_| true),
        Command::FitNorm(a) => fit_norm(a, t).map(|_| true),
        Command::Train(a) => train_cmd(a, t).map(|_| true),
        Command::Enhance(a) => enhance(a, t).map(|_| true),
        Command::Evaluate(a) => evaluate(a, t).map(|_| true),
        Command::Selftest(a) => selftest(a, t),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error in stage setup: {e}");
        return ExitCode::from(1);
    }
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(Usage(msg))) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Stage(stage, e)) => {
            eprintln!("error in stage {stage}: {e:#}");
            ExitCode::from(1)
        }
    }
}
