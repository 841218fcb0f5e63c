//! The commands behind the `cineseg` binary.

mod config;
pub mod selftest;

pub use config::{parse_entries, DataConfig, DataSource, Entry, RunConfig, SECTIONS};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::augmentation::augment_batch;
use crate::dataio::{
    gen_phantom, load_checkpoint, load_mask_pgm, load_pgm, save_checkpoint, save_mask_pgm, save_pgm, split_by_patient,
    DatasetManifest, ManifestEntry, PhantomParams, Split,
};
use crate::error::{Error, Result};
use crate::image::{Grayscale2D, MaskImage, Spacing};
use crate::metrics::{extract_contour, EvalReport, REPORT_CSV_HEADER};
use crate::network::{Network, Variant};
use crate::seed;
use crate::training::{evaluate_model, predict_masks, train, TrainData, TrainLog};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "CINESEG_THREADS";

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::ConfigSyntax { .. } | Error::Shape(_) | Error::Contract(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::DegenerateStatistics(_) | Error::UndefinedMetric(_) | Error::State(_) => {
            EXIT_NUMERIC
        }
        Error::Io { .. } | Error::Parse { .. } | Error::Integrity(_) => EXIT_IO,
    }
}

/// Worker count: `CINESEG_THREADS` if set, else the available parallelism.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(
                THREADS_ENV,
                format!("must be a positive integer, got `{v}`"),
            )),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Train / val / test image-mask pairs.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<(Grayscale2D, MaskImage)>,
    pub val: Vec<(Grayscale2D, MaskImage)>,
    pub test: Vec<(Grayscale2D, MaskImage)>,
}

impl Dataset {
    /// The split reports are computed on: test, or val when test is empty.
    pub fn eval_split(&self) -> Result<&[(Grayscale2D, MaskImage)]> {
        match (self.test.is_empty(), self.val.is_empty()) {
            (false, _) => Ok(&self.test),
            (true, false) => Ok(&self.val),
            (true, true) => Err(Error::config("data.split", "no test or val cases to evaluate on")),
        }
    }
}

fn normalized(w: [f64; 3]) -> [f64; 3] {
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let data = match cfg.source()? {
        DataSource::Phantom { count, height, width } => {
            let samples = gen_phantom(*count, *height, *width, cfg.data.data_seed, &PhantomParams::default())?;
            let mut pairs: Vec<_> = samples.into_iter().map(|s| (s.image, s.mask)).collect();
            let w = normalized(cfg.data.split.unwrap_or([5.0, 0.0, 2.0]));
            let n = pairs.len();
            let a = ((n as f64) * w[0]).round() as usize;
            let b = (((n as f64) * (w[0] + w[1])).round() as usize).clamp(a, n);
            let test = pairs.split_off(b);
            let val = pairs.split_off(a);
            Dataset {
                train: pairs,
                val,
                test,
            }
        }
        DataSource::Manifest(path) => {
            let mut manifest = DatasetManifest::load(path)?;
            if let Some(w) = cfg.data.split {
                manifest = split_by_patient(&manifest, normalized(w), cfg.data.data_seed)
                    .map_err(|e| Error::config("data.split", e))?;
            }
            let spacing = cfg.data.spacing_mm.map(Spacing::isotropic).transpose()?;
            let load = |split| -> Result<Vec<_>> {
                let pairs = manifest.load_split(split)?;
                match spacing {
                    None => Ok(pairs),
                    Some(s) => pairs
                        .into_iter()
                        .map(|(img, mask)| {
                            let (h, w) = (img.height(), img.width());
                            Ok((Grayscale2D::new(h, w, img.pixels().to_vec(), s)?, mask))
                        })
                        .collect(),
                }
            };
            Dataset {
                train: load(Split::Train)?,
                val: load(Split::Val)?,
                test: load(Split::Test)?,
            }
        }
    };
    let (h, w) = (cfg.network.input_height, cfg.network.input_width);
    for (img, _) in data.train.iter().chain(&data.val).chain(&data.test) {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::config(
                "network.input_height",
                format!(
                    "network expects {h}x{w} images, data has {}x{}",
                    img.height(),
                    img.width()
                ),
            ));
        }
    }
    if data.train.is_empty() {
        return Err(Error::config("data.split", "the train split is empty"));
    }
    Ok(data)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// What `train` produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: EvalReport,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.cseg";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.cseg";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const COMPARE_CSV_FILE: &str = "compare.csv";

/// Trains one network and writes the checkpoint, train log and report.
///
/// On divergence the last finite network and the partial log are still
/// written before the error is returned.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    create_dir(&cfg.out_dir)?;
    let data = load_dataset(cfg)?;
    let eval_on = data.eval_split()?;
    let net = Network::build(cfg.network.clone(), cfg.train.seed)?;
    let tdata = TrainData {
        train: data.train.clone(),
        val: data.val.clone(),
    };
    let (mut net, log) = match train(net, &tdata, &cfg.train_config(cfg.augment)) {
        Ok(done) => done,
        Err(failure) => {
            write_file(&cfg.out_dir.join(TRAIN_LOG_FILE), failure.log.to_csv())?;
            if let Some(net) = &failure.network {
                save_checkpoint(net, cfg.out_dir.join(LAST_GOOD_FILE))?;
            }
            return Err(failure.error);
        }
    };
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&net, &checkpoint)?;
    write_file(&cfg.out_dir.join(TRAIN_LOG_FILE), log.to_csv())?;
    let report = evaluate_model(&mut net, eval_on, cfg.train.threshold, cfg.eval_batch_size)?;
    let model = Variant::ALL
        .into_iter()
        .find(|v| v.norm_scheme() == cfg.network.norm_scheme)
        .map_or("network".to_string(), |v| v.to_string());
    write_file(&cfg.out_dir.join(REPORT_TEXT_FILE), report.to_string())?;
    write_file(
        &cfg.out_dir.join(REPORT_CSV_FILE),
        csv_text(&REPORT_CSV_HEADER, &[report.csv_row(&model, cfg.augment)]),
    )?;
    Ok(TrainOutcome {
        report,
        log,
        checkpoint,
    })
}

/// Which augmentation settings `compare` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugSetting {
    Both,
    On,
    Off,
}

impl AugSetting {
    pub fn settings(self) -> &'static [bool] {
        match self {
            AugSetting::Both => &[true, false],
            AugSetting::On => &[true],
            AugSetting::Off => &[false],
        }
    }
}

impl fmt::Display for AugSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugSetting::Both => "both",
            AugSetting::On => "on",
            AugSetting::Off => "off",
        })
    }
}

impl FromStr for AugSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "both" => Ok(AugSetting::Both),
            "on" => Ok(AugSetting::On),
            "off" => Ok(AugSetting::Off),
            other => Err(format!("unknown augmentation setting `{other}` (expected both|on|off)")),
        }
    }
}

/// One row of a comparison.
#[derive(Clone, Debug)]
pub struct CompareCell {
    pub variant: Variant,
    pub augmented: bool,
    pub outcome: std::result::Result<EvalReport, String>,
    pub exit_code: u8,
}

pub const COMPARE_STATUS_COLUMN: &str = "status";

impl CompareCell {
    fn csv_row(&self) -> Vec<String> {
        let model = self.variant.to_string();
        match &self.outcome {
            Ok(report) => {
                let mut row = report.csv_row(&model, self.augmented);
                row.push("ok".into());
                row
            }
            Err(message) => {
                let nan = "nan".to_string();
                vec![
                    model,
                    self.augmented.to_string(),
                    nan.clone(),
                    nan.clone(),
                    nan.clone(),
                    nan,
                    "0".into(),
                    format!("failed: {message}"),
                ]
            }
        }
    }
}

fn run_cell(cfg: &RunConfig, data: &Dataset, variant: Variant, augmented: bool) -> Result<EvalReport> {
    let net_cfg = cfg.network.clone().with_variant(variant);
    let net = Network::build(net_cfg, cfg.train.seed)?;
    let tdata = TrainData {
        train: data.train.clone(),
        val: data.val.clone(),
    };
    let (mut net, _) = train(net, &tdata, &cfg.train_config(augmented)).map_err(|f| f.error)?;
    evaluate_model(&mut net, data.eval_split()?, cfg.train.threshold, cfg.eval_batch_size)
}

/// Trains every (variant × augmentation) cell with the shared seed and writes
/// one CSV row per cell. A failed cell becomes a row with its status; the
/// remaining cells still run.
pub fn cmd_compare(cfg: &RunConfig, variants: &[Variant], aug: AugSetting, workers: usize) -> Result<Vec<CompareCell>> {
    if variants.is_empty() {
        return Err(Error::config("variants", "at least one variant is required"));
    }
    create_dir(&cfg.out_dir)?;
    let data = load_dataset(cfg)?;
    data.eval_split()?;
    let mut jobs = Vec::new();
    for &v in variants {
        if !jobs.iter().any(|&(u, _)| u == v) {
            jobs.extend(aug.settings().iter().map(|&a| (v, a)));
        }
    }

    let slots: Vec<Mutex<Option<CompareCell>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(variant, augmented)) = jobs.get(i) else {
                    break;
                };
                let result = run_cell(cfg, &data, variant, augmented);
                let cell = CompareCell {
                    variant,
                    augmented,
                    exit_code: result.as_ref().err().map_or(EXIT_OK, exit_code),
                    outcome: result.map_err(|e| e.to_string()),
                };
                *slots[i].lock().expect("no panics while holding the slot") = Some(cell);
            });
        }
    });
    let cells: Vec<CompareCell> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every job ran"))
        .collect();

    let mut header = REPORT_CSV_HEADER.to_vec();
    header.push(COMPARE_STATUS_COLUMN);
    let rows: Vec<Vec<String>> = cells.iter().map(CompareCell::csv_row).collect();
    write_file(&cfg.out_dir.join(COMPARE_CSV_FILE), csv_text(&header, &rows))?;
    Ok(cells)
}

/// Result of `predict` over one or more images.
#[derive(Debug, Default)]
pub struct PredictOutcome {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// The PGM files to predict on: `input` itself, or the `.pgm` files directly
/// inside it in name order.
pub fn predict_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Places `mask` centered in an `h × w` frame, matching the network's crop.
pub fn embed_center(mask: &MaskImage, h: usize, w: usize) -> Result<MaskImage> {
    let (mh, mw) = (mask.height(), mask.width());
    if mh > h || mw > w {
        return Err(Error::shape(format!("cannot embed {mh}x{mw} mask in {h}x{w}")));
    }
    let (top, left) = ((h - mh) / 2, (w - mw) / 2);
    MaskImage::from_fn(h, w, |y, x| {
        y >= top && x >= left && y < top + mh && x < left + mw && mask.get(y - top, x - left)
    })
}

/// The image with the mask's boundary pixels set to full intensity.
pub fn overlay(image: &Grayscale2D, mask: &MaskImage) -> Result<Grayscale2D> {
    let mut pixels = image.pixels().to_vec();
    for &(y, x) in extract_contour(mask, image.spacing()).points() {
        pixels[y * image.width() + x] = 1.0;
    }
    Grayscale2D::new(image.height(), image.width(), pixels, image.spacing())
}

fn predict_one(net: &mut Network, path: &Path, out_dir: &Path, threshold: f64) -> Result<[PathBuf; 2]> {
    let image = load_pgm(path)?;
    let (h, w) = (net.config().input_height, net.config().input_width);
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::config(
            "network.input_height",
            format!(
                "{}: checkpoint expects {h}x{w} images, got {}x{}",
                path.display(),
                image.height(),
                image.width()
            ),
        ));
    }
    let mask = predict_masks(net, std::slice::from_ref(&image), threshold, 1)?.remove(0);
    let mask = embed_center(&mask, h, w)?;
    let stem = path
        .file_stem()
        .map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let mask_path = out_dir.join(format!("{stem}_mask.pgm"));
    let overlay_path = out_dir.join(format!("{stem}_overlay.pgm"));
    save_mask_pgm(&mask, &mask_path)?;
    save_pgm(&overlay(&image, &mask)?, &overlay_path)?;
    Ok([mask_path, overlay_path])
}

/// Writes `<stem>_mask.pgm` and `<stem>_overlay.pgm` for every input image.
/// Unreadable or mis-sized images are collected as failures.
pub fn cmd_predict(checkpoint: &Path, input: &Path, out_dir: &Path, threshold: f64) -> Result<PredictOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(
            "threshold",
            format!("must lie in (0, 1), got {threshold}"),
        ));
    }
    let mut net = load_checkpoint(checkpoint)?;
    create_dir(out_dir)?;
    let mut outcome = PredictOutcome::default();
    for path in predict_inputs(input)? {
        match predict_one(&mut net, &path, out_dir, threshold) {
            Ok(files) => outcome.written.extend(files),
            Err(e) => outcome.failures.push((path, e)),
        }
    }
    Ok(outcome)
}

pub const AUGMENTED_MANIFEST_FILE: &str = "manifest.csv";

/// Augments every manifest entry with the configured policy and writes the
/// image / mask pairs plus a manifest listing originals first, then each
/// round of copies. Patient ids and splits carry over to the copies.
pub fn cmd_augment(cfg: &RunConfig, manifest_path: &Path, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let pairs = manifest
        .entries
        .iter()
        .map(|e| Ok((load_pgm(&e.image)?, load_mask_pgm(&e.mask)?)))
        .collect::<Result<Vec<_>>>()?;
    let augmented = augment_batch(&pairs, &cfg.policy, seed::derive(cfg.train.seed, 0, 0))?;
    let (images, masks) = (out_dir.join("images"), out_dir.join("masks"));
    create_dir(&images)?;
    create_dir(&masks)?;
    let n = pairs.len().max(1);
    let mut entries = Vec::with_capacity(augmented.len());
    for (k, (image, mask)) in augmented.iter().enumerate() {
        let src = &manifest.entries[k % n];
        let name = format!("{:04}_{}.pgm", k % n, k / n);
        let (ip, mp) = (images.join(&name), masks.join(&name));
        save_pgm(image, &ip)?;
        save_mask_pgm(mask, &mp)?;
        entries.push(ManifestEntry {
            patient_id: src.patient_id.clone(),
            split: src.split,
            image: ip,
            mask: mp,
        });
    }
    let out = DatasetManifest::new(entries);
    out.save(out_dir.join(AUGMENTED_MANIFEST_FILE))?;
    Ok(out)
}
