use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use stonecrack::cam;
use stonecrack::dataset::{self, CaseId, DatasetManifest, Label, TestCaseSplit};
use stonecrack::eval::{self, EvalReport, RunInfo};
use stonecrack::model::{digest_of, BuildOptions, Regime};
use stonecrack::scan;
use stonecrack::train::{self, TrainRecord};
use stonecrack::zoo::{Backbone, ZooOptions};
use stonecrack::{charts, Classifier, Error, Result};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const REPORT_JSON: &str = "report.json";
pub const RECORD_JSON: &str = "record.json";
pub const SPLIT_JSON: &str = "split.json";
pub const ERROR_JSON: &str = "error.json";
pub const MODEL_DIR: &str = "model";

/// Output directory of one invocation.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<runs_dir>/<timestamp>-<command>`, suffixed when the name is taken.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        let base = format!("{stamp}-{}", cfg.command);
        std::fs::create_dir_all(&cfg.runs_dir).map_err(|e| Error::io(&cfg.runs_dir, e))?;
        let mut n = 1;
        let path = loop {
            let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
            let candidate = cfg.runs_dir.join(name);
            match std::fs::create_dir(&candidate) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(Error::io(candidate, e)),
            }
        };
        let snapshot = path.join(RESOLVED_CONFIG);
        std::fs::write(&snapshot, cfg.to_flat_json()?).map_err(|e| Error::io(&snapshot, e))?;
        Ok(Self { path })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn backbone(cfg: &RunConfig) -> Result<Backbone> {
    cfg.backbone
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{}` needs a backbone (--backbone)", cfg.command)))?
        .parse()
}

fn regime(cfg: &RunConfig) -> Result<Regime> {
    cfg.regime.parse()
}

fn model_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.model
        .path
        .as_deref()
        .ok_or_else(|| Error::Config(format!("`{}` needs a model artifact (--model)", cfg.command)))
}

fn build_options(cfg: &RunConfig, regime: Regime) -> BuildOptions {
    let mut opts = BuildOptions::new(regime);
    if let Some(p) = cfg.model.pretrained {
        opts.pretrained = p;
    }
    opts.weights_dir = cfg.model.weights_dir.clone();
    opts.seed = cfg.seed;
    opts.zoo = ZooOptions {
        width: cfg.model.width,
        input_size: cfg.model.input_size,
    };
    opts.sample_wise = cfg.model.sample_wise;
    opts
}

fn draw_split(cfg: &RunConfig, case: CaseId) -> Result<TestCaseSplit> {
    let manifest = DatasetManifest::load(cfg.data_root()?)?;
    dataset::make_split_with(&manifest, case, cfg.seed, cfg.shortfall)
}

/// A saved split when one is configured, otherwise a fresh draw for `case_id`.
fn split_for(cfg: &RunConfig) -> Result<TestCaseSplit> {
    if let Some(path) = &cfg.split {
        return TestCaseSplit::load(path);
    }
    let id = cfg
        .case_id
        .ok_or_else(|| Error::Config(format!("`{}` needs --case or --split", cfg.command)))?;
    draw_split(cfg, CaseId::new(id)?)
}

fn run_info(record: &TrainRecord) -> RunInfo {
    RunInfo {
        regime: record.regime.to_string(),
        epochs: record.epochs.len(),
        lr: record.epochs.first().map_or(0.0, |e| e.lr),
        training_seconds: record.wall_time_seconds,
        seed: record.seed,
    }
}

#[derive(Debug, Serialize)]
struct SiteCount {
    site: dataset::Site,
    label: Label,
    count: usize,
}

#[derive(Debug, Serialize)]
struct CaseSummary {
    case_id: u8,
    file: Option<String>,
    train: Option<(usize, usize)>,
    test: Option<(usize, usize)>,
    mismatches: Vec<String>,
    error: Option<String>,
}

pub fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let root = cfg.data_root()?;
    let manifest = DatasetManifest::load(root)?;
    if manifest.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", root.display())));
    }
    let cases: Vec<CaseId> = match cfg.case_id {
        Some(id) => vec![CaseId::new(id)?],
        None => CaseId::ALL.to_vec(),
    };
    let mut drawn = Vec::new();
    for &case in &cases {
        match dataset::make_split_with(&manifest, case, cfg.seed, cfg.shortfall) {
            Ok(split) => drawn.push((case, Ok(split))),
            Err(e) if cfg.case_id.is_some() => return Err(e),
            Err(e @ Error::InsufficientSamples { .. }) => {
                log::warn!("{e}");
                drawn.push((case, Err(e)));
            }
            Err(e) => return Err(e),
        }
    }

    let run = RunDir::create(cfg)?;
    let counts: Vec<SiteCount> = manifest
        .counts
        .iter()
        .map(|(&(site, label), &count)| SiteCount { site, label, count })
        .collect();
    let mut summary = Vec::new();
    for (case, outcome) in drawn {
        let id = case.get();
        summary.push(match outcome {
            Ok(split) => {
                let file = format!("split_case{id}.json");
                split.save(&run.join(&file))?;
                let [train, test] = split.counts();
                let mismatches = split.count_mismatches();
                for m in &mismatches {
                    log::warn!("case {id}: {m}");
                }
                CaseSummary { case_id: id, file: Some(file), train: Some(train), test: Some(test), mismatches, error: None }
            }
            Err(e) => CaseSummary { case_id: id, file: None, train: None, test: None, mismatches: vec![], error: Some(e.to_string()) },
        });
    }
    write_json(
        &run.join("manifest.json"),
        &serde_json::json!({
            "root": root,
            "total": manifest.len(),
            "crack": manifest.label_count(Label::Crack),
            "no_crack": manifest.label_count(Label::NoCrack),
            "counts": counts,
            "reference_mismatches": manifest.reference_mismatches(),
            "skipped": manifest.skipped.len(),
            "cases": summary,
        }),
    )?;
    if !manifest.skipped.is_empty() {
        manifest.write_skip_report(&run.join("ingest_skipped.txt"))?;
    }
    Ok(run.path)
}

fn fit(cfg: &RunConfig, model: Classifier, split: &TestCaseSplit, dir: &Path) -> Result<(Classifier, TrainRecord)> {
    let (mut trained, record) = train::train(model, split, &cfg.train)?;
    trained.training_config_digest = Some(digest_of(&cfg.train)?);
    trained.save(&dir.join(MODEL_DIR))?;
    split.save(&dir.join(SPLIT_JSON))?;
    write_json(&dir.join(RECORD_JSON), &record)?;
    charts::training_curves(&record, &dir.join("curves.png"))?;
    Ok((trained, record))
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.train.validate()?;
    let backbone = backbone(cfg)?;
    let regime = regime(cfg)?;
    let model = Classifier::build(backbone, &build_options(cfg, regime))?;
    let split = split_for(cfg)?;
    let run = RunDir::create(cfg)?;
    let (_, record) = fit(cfg, model, &split, &run.path)?;
    log::info!(
        "{backbone} case {} trained in {:.1}s, best epoch {}",
        split.case_id,
        record.wall_time_seconds,
        record.best_epoch
    );
    Ok(run.path)
}

/// Split next to a model trained by this tool, if there is one.
fn sibling(model_dir: &Path, name: &str) -> Option<PathBuf> {
    let p = model_dir.parent()?.join(name);
    p.is_file().then_some(p)
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    write_json(&dir.join(REPORT_JSON), report)?;
    report.write_confusion(dir)?;
    eval::render_tables(std::slice::from_ref(report))?.write(dir)
}

pub fn evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let path = model_path(cfg)?;
    let model = Classifier::load(path)?;
    let split = match (&cfg.split, cfg.case_id, sibling(path, SPLIT_JSON)) {
        (None, None, Some(saved)) => TestCaseSplit::load(&saved)?,
        _ => split_for(cfg)?,
    };
    let run = RunDir::create(cfg)?;
    let mut report = eval::evaluate(&model, &split.test, Some(split.case_id.get()), cfg.eval.batch_size)?;
    if let Some(rec) = sibling(path, RECORD_JSON) {
        report.run = run_info(&read_json(&rec)?);
    }
    write_report(&report, &run.path)?;
    log::info!("accuracy {:.4} on {} test patches", report.accuracy(), split.test.len());
    Ok(run.path)
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn expand_images(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in &cfg.images {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("`{}` needs at least one image (--image)", cfg.command)));
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
}

#[derive(Debug, Serialize)]
struct Sidecar {
    image: PathBuf,
    label: Label,
    prob_crack: f64,
    cam_class: Label,
}

pub fn localize(cfg: &RunConfig) -> Result<PathBuf> {
    let model = Classifier::load(model_path(cfg)?)?;
    let images = expand_images(cfg)?;
    let run = RunDir::create(cfg)?;
    for path in images {
        let img = dataset::decode(&path)?;
        let (pred, map) = cam::localize(&model, &img, cfg.cam.options())?;
        let s = stem(&path);
        let png = run.join(&format!("{s}_cam.png"));
        let overlay = cam::overlay(&img, map.full.view(), cfg.cam.overlay)?;
        overlay.save(&png).map_err(|e| Error::Image { path: png, source: e })?;
        cam::write_field(&run.join(&format!("{s}_cam.npy")), map.full.view())?;
        let sidecar = Sidecar {
            image: path.clone(),
            label: pred.label,
            prob_crack: pred.prob_crack() as f64,
            cam_class: map.class_index,
        };
        write_json(&run.join(&format!("{s}_cam.json")), &sidecar)?;
        log::info!("{}: {:?} (p_crack {:.3})", path.display(), pred.label, sidecar.prob_crack);
    }
    Ok(run.path)
}

#[derive(Debug, Serialize)]
struct ScanSummary {
    image: PathBuf,
    width: u32,
    height: u32,
    windows: usize,
    crack_windows: usize,
    seconds: f64,
}

pub fn scan(cfg: &RunConfig) -> Result<PathBuf> {
    let model = Classifier::load(model_path(cfg)?)?;
    let images = expand_images(cfg)?;
    let run = RunDir::create(cfg)?;
    let single = images.len() == 1;
    for path in images {
        let img = dataset::decode(&path)?;
        let start = std::time::Instant::now();
        let result = scan::scan_image(&model, &img, &cfg.scan)?;
        let dir = if single { run.path.clone() } else { run.join(&stem(&path)) };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        result.write(&dir)?;
        let summary = ScanSummary {
            image: path.clone(),
            width: img.width(),
            height: img.height(),
            windows: result.per_window.len(),
            crack_windows: result.per_window.iter().filter(|w| w.label == Label::Crack).count(),
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("scan.json"), &summary)?;
        log::info!("{}: {} of {} windows crack", path.display(), summary.crack_windows, summary.windows);
    }
    Ok(run.path)
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        if p.is_file() {
            out.push(p.to_path_buf());
            return Ok(());
        }
        let entries = std::fs::read_dir(p).map_err(|e| Error::io(p, e))?;
        for e in entries {
            let e = e.map_err(|e| Error::io(p, e))?.path();
            if e.is_dir() {
                walk(&e, out)?;
            } else if e.file_name().is_some_and(|n| n == REPORT_JSON) {
                out.push(e);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        walk(p, &mut out)?;
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn aggregate(reports: &[EvalReport], dir: &Path) -> Result<()> {
    eval::render_tables(reports)?.write(dir)?;
    eval::render_comparison_charts(reports, dir)?;
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.reports.is_empty() {
        return Err(Error::Config("`report` needs run directories or report files".into()));
    }
    let files = collect_reports(&cfg.reports)?;
    if files.is_empty() {
        return Err(Error::Precondition(format!("no {REPORT_JSON} found")));
    }
    let reports = files.iter().map(|f| read_json(f)).collect::<Result<Vec<EvalReport>>>()?;
    let run = RunDir::create(cfg)?;
    aggregate(&reports, &run.path)?;
    log::info!("{} reports aggregated", reports.len());
    Ok(run.path)
}

/// Trains and evaluates one grid cell into `dir`.
pub fn run_cell(cfg: &RunConfig, backbone: Backbone, case: CaseId, dir: &Path) -> Result<EvalReport> {
    let regime = regime(cfg)?;
    let model = Classifier::build(backbone, &build_options(cfg, regime))?;
    let split = draw_split(cfg, case)?;
    let (trained, record) = fit(cfg, model, &split, dir)?;
    let mut report = eval::evaluate(&trained, &split.test, Some(case.get()), cfg.eval.batch_size)?;
    report.run = run_info(&record);
    write_report(&report, dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub backbone: String,
    pub case_id: u8,
    pub category: String,
    pub message: String,
}

pub fn cell_name(backbone: Backbone, case: CaseId) -> String {
    format!("{}_case{}", backbone.name(), case.get())
}

pub fn record_failure(dir: &Path, backbone: Backbone, case: CaseId, err: &Error) -> CellFailure {
    let failure = CellFailure {
        backbone: backbone.name().into(),
        case_id: case.get(),
        category: err.category().as_str().into(),
        message: err.to_string(),
    };
    if let Err(e) = write_json(&dir.join(ERROR_JSON), &failure) {
        log::warn!("could not record the failure: {e}");
    }
    failure
}

fn grid(cfg: &RunConfig) -> Result<Vec<(Backbone, CaseId)>> {
    let backbones: Vec<Backbone> = if cfg.matrix.backbones.is_empty() {
        Backbone::ALL.to_vec()
    } else {
        cfg.matrix.backbones.iter().map(|b| b.parse()).collect::<Result<_>>()?
    };
    let cases: Vec<CaseId> = if cfg.matrix.cases.is_empty() {
        CaseId::ALL.to_vec()
    } else {
        cfg.matrix.cases.iter().map(|&c| CaseId::new(c)).collect::<Result<_>>()?
    };
    Ok(cases.iter().flat_map(|&c| backbones.iter().map(move |&b| (b, c))).collect())
}

fn spawn_cell(config: &Path, backbone: Backbone, case: CaseId, dir: &Path) -> Result<Child> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    Process::new(exe)
        .arg("--config")
        .arg(config)
        .arg("cell")
        .args(["--backbone", backbone.name(), "--case", &case.get().to_string(), "--dir"])
        .arg(dir)
        .stdout(Stdio::null())
        .spawn()
        .map_err(|e| Error::io(dir, e))
}

fn collect_cell(dir: &Path, backbone: Backbone, case: CaseId) -> std::result::Result<EvalReport, CellFailure> {
    match read_json::<EvalReport>(&dir.join(REPORT_JSON)) {
        Ok(r) => Ok(r),
        Err(_) => Err(read_json(&dir.join(ERROR_JSON)).unwrap_or_else(|_| CellFailure {
            backbone: backbone.name().into(),
            case_id: case.get(),
            category: "io".into(),
            message: "worker exited without a report".into(),
        })),
    }
}

pub fn matrix(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.train.validate()?;
    let cells = grid(cfg)?;
    regime(cfg)?;
    cfg.data_root()?;
    if cfg.matrix.jobs == 0 {
        return Err(Error::Config("matrix.jobs must be at least 1".into()));
    }
    let run = RunDir::create(cfg)?;
    let mut outcomes = Vec::with_capacity(cells.len());
    if cfg.matrix.jobs == 1 {
        for &(b, c) in &cells {
            let dir = run.join(&cell_name(b, c));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            log::info!("cell {}", cell_name(b, c));
            outcomes.push(run_cell(cfg, b, c, &dir).map_err(|e| {
                log::warn!("cell {} failed: {e}", cell_name(b, c));
                record_failure(&dir, b, c, &e)
            }));
        }
    } else {
        let config = run.join(RESOLVED_CONFIG);
        let mut pending = cells.iter().copied();
        let mut active: Vec<Child> = Vec::new();
        loop {
            while active.len() < cfg.matrix.jobs {
                let Some((b, c)) = pending.next() else { break };
                let dir = run.join(&cell_name(b, c));
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                active.push(spawn_cell(&config, b, c, &dir)?);
            }
            if active.is_empty() {
                break;
            }
            active.retain_mut(|child| !matches!(child.try_wait(), Ok(Some(_)) | Err(_)));
            std::thread::sleep(Duration::from_millis(100));
        }
        for &(b, c) in &cells {
            outcomes.push(collect_cell(&run.join(&cell_name(b, c)), b, c));
        }
    }
    let (reports, failures): (Vec<_>, Vec<_>) = outcomes.into_iter().partition(|o| o.is_ok());
    let reports: Vec<EvalReport> = reports.into_iter().map(|r| r.unwrap()).collect();
    let failures: Vec<CellFailure> = failures.into_iter().map(|f| f.unwrap_err()).collect();
    write_json(&run.join("failures.json"), &failures)?;
    if reports.is_empty() {
        return Err(Error::Precondition(format!("all {} cells failed; see failures.json", cells.len())));
    }
    aggregate(&reports, &run.path)?;
    log::info!("{} cells done, {} failed", reports.len(), failures.len());
    Ok(run.path)
}

/// One matrix cell in a worker process; writes into `dir` instead of a new run directory.
pub fn cell(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let backbone = backbone(cfg)?;
    let case = CaseId::new(
        cfg.case_id
            .ok_or_else(|| Error::Config("`cell` needs --case".into()))?,
    )?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match run_cell(cfg, backbone, case, dir) {
        Ok(_) => Ok(dir.to_path_buf()),
        Err(e) => {
            record_failure(dir, backbone, case, &e);
            Err(e)
        }
    }
}
