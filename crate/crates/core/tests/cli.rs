use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cineseg::cli::{self, AugSetting, RunConfig};
use cineseg::dataio::{
    gen_phantom, load_mask_pgm, load_pgm, save_checkpoint, save_mask_pgm, save_pgm, DatasetManifest, ManifestEntry,
    PhantomParams, Split,
};
use cineseg::image::Spacing;
use cineseg::metrics::dice;
use cineseg::network::{Network, NetworkConfig, NormScheme, ParamRole, Variant};
use cineseg::Error;
use tempfile::TempDir;

const SMALL: &str = "\
[data]
phantom = 12, 32, 32
split = 8, 0, 4
seed = 3

[network]
variant = ibu
depth = 1
base_channels = 4
input_height = 32
input_width = 32

[train]
epochs = 3
batch_size = 4
learning_rate = 0.003
";

fn cineseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cineseg"))
        .args(args)
        .env("CINESEG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_parser_sections_and_paths() {
    let cfg = RunConfig::from_text(
        "[run]\nout = results\n[data]\nmanifest = data/m.csv\n[train]\nepochs = 7 # trailing comment\n",
        Path::new("/base"),
    )
    .unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("/base/results"));
    assert_eq!(
        cfg.data.source,
        Some(cli::DataSource::Manifest("/base/data/m.csv".into()))
    );
    assert_eq!(cfg.train.epochs, 7);

    type Case = (&'static str, fn(&Error) -> bool);
    let cases: [Case; 6] = [
        ("epochs = 3\n", |e| matches!(e, Error::ConfigSyntax { line: 1, .. })),
        ("[train]\nepochs 3\n", |e| {
            matches!(e, Error::ConfigSyntax { line: 2, .. })
        }),
        ("[bogus]\n", |e| matches!(e, Error::ConfigSyntax { line: 1, .. })),
        ("[train]\nseed = 1\n\nseed = 2\n", |e| {
            matches!(e, Error::ConfigSyntax { line: 4, .. })
        }),
        (
            "[train]\nepochs = many\n",
            |e| matches!(e, Error::Config { field, .. } if field == "train.epochs"),
        ),
        (
            "[data]\nphantom = 4, 32, 32\nmanifest = m.csv\n",
            |e| matches!(e, Error::Config { field, .. } if field == "data"),
        ),
    ];
    for (text, check) in cases {
        let err = RunConfig::from_text(text, Path::new(".")).unwrap_err();
        assert!(check(&err), "{text:?}: {err}");
    }
    let err = RunConfig::from_text("[network]\ndepth = 0\n", Path::new(".")).unwrap_err();
    assert!(matches!(err, Error::Config { field, .. } if field.contains("depth")));
    let err = RunConfig::from_text("[augmentation]\nalpha = -1\n", Path::new(".")).unwrap_err();
    assert!(matches!(err, Error::Config { field, .. } if field.contains("alpha")));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["quickstart.cfg", "phantom_benchmark.cfg"] {
        let cfg = RunConfig::load(root.join(name)).unwrap();
        assert!(cfg.data.source.is_some(), "{name}");
    }
}

#[test]
fn missing_or_malformed_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let o = cineseg(&["train", "--config", s(&dir.path().join("nope.cfg"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let bad = write_config(dir.path(), "bad.cfg", "[train]\nepochs = 2\nlearning_rate\n");
    let o = cineseg(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let bad = write_config(dir.path(), "field.cfg", "[train]\nbatch_size = 0\n");
    let o = cineseg(&["train", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let no_data = write_config(dir.path(), "nodata.cfg", "[train]\nepochs = 1\n");
    assert_eq!(cineseg(&["train", "--config", s(&no_data)]).status.code(), Some(2));
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = cineseg(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        for f in [
            cli::CHECKPOINT_FILE,
            cli::TRAIN_LOG_FILE,
            cli::REPORT_TEXT_FILE,
            cli::REPORT_CSV_FILE,
        ] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let log = fs::read_to_string(out.join(cli::TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 4);
        reports.push((
            fs::read(out.join(cli::REPORT_CSV_FILE)).unwrap(),
            fs::read(out.join(cli::CHECKPOINT_FILE)).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
    let csv = String::from_utf8(reports[0].0.clone()).unwrap();
    assert!(csv.starts_with("model,augmented,dice_mean,dice_std,sensitivity,apd_mm,n_cases\nIBU-Net,false,"));

    let other = dir.path().join("c");
    assert_eq!(
        cineseg(&["train", "--config", s(&cfg), "--out", s(&other), "--seed", "9"])
            .status
            .code(),
        Some(0)
    );
    assert_ne!(fs::read(other.join(cli::CHECKPOINT_FILE)).unwrap(), reports[0].1);
}

#[test]
fn divergence_exits_3_and_keeps_last_good_network() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace(
        "learning_rate = 0.003",
        "learning_rate = 1e300\noptimizer = sgd_momentum",
    );
    let text = text.replace("variant = ibu", "variant = unet");
    let cfg = write_config(dir.path(), "div.cfg", &text);
    let out = dir.path().join("out");
    let o = cineseg(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("NaN"));
    let last = cineseg::dataio::load_checkpoint(out.join(cli::LAST_GOOD_FILE)).unwrap();
    assert!(last.parameters().iter().all(|p| p.value.is_finite()));
    assert!(!out.join(cli::CHECKPOINT_FILE).exists());
}

#[test]
fn io_failures_exit_4() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let o = cineseg(&["train", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let manifest = write_config(
        dir.path(),
        "m.csv",
        "patient_id,split,image,mask\np1,train,missing.pgm,missing.pgm\n",
    );
    let text = SMALL.replace("phantom = 12, 32, 32", &format!("manifest = {}", s(&manifest)));
    let text = text.replace("split = 8, 0, 4\n", "");
    let cfg = write_config(dir.path(), "man.cfg", &text);
    let o = cineseg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn compare_single_cell_and_row_order() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let out = dir.path().join("one");
    let o = cineseg(&[
        "compare",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--variants",
        "bnu",
        "--aug",
        "off",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join(cli::COMPARE_CSV_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "model,augmented,dice_mean,dice_std,sensitivity,apd_mm,n_cases,status"
    );
    assert_eq!(lines.len(), 2);
    assert!(
        lines[1].starts_with("BNU-Net,false,") && lines[1].ends_with(",4,ok"),
        "{}",
        lines[1]
    );

    let mut run = RunConfig::load(&cfg).unwrap();
    run.out_dir = dir.path().join("two");
    let cells = cli::cmd_compare(&run, &[Variant::UNet, Variant::LnuNet], AugSetting::Both, 1).unwrap();
    let order: Vec<(Variant, bool)> = cells.iter().map(|c| (c.variant, c.augmented)).collect();
    assert_eq!(
        order,
        [
            (Variant::UNet, true),
            (Variant::UNet, false),
            (Variant::LnuNet, true),
            (Variant::LnuNet, false)
        ]
    );
    // thread count does not change the table
    run.out_dir = dir.path().join("three");
    cli::cmd_compare(&run, &[Variant::UNet, Variant::LnuNet], AugSetting::Both, 3).unwrap();
    assert_eq!(
        fs::read(dir.path().join("two").join(cli::COMPARE_CSV_FILE)).unwrap(),
        fs::read(dir.path().join("three").join(cli::COMPARE_CSV_FILE)).unwrap()
    );
    assert!(matches!(
        cli::cmd_compare(&run, &[], AugSetting::Both, 1),
        Err(Error::Config { .. })
    ));
}

#[test]
fn compare_records_failed_cells_and_continues() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace(
        "learning_rate = 0.003",
        "learning_rate = 1e300\noptimizer = sgd_momentum",
    );
    let cfg = write_config(dir.path(), "div.cfg", &text);
    let out = dir.path().join("out");
    let o = cineseg(&[
        "compare",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--variants",
        "unet,ibu",
        "--aug",
        "off",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join(cli::COMPARE_CSV_FILE)).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(
        rows[0].starts_with("U-Net,false,nan,nan,nan,nan,0,\"failed: numeric failure"),
        "{}",
        rows[0]
    );
}

/// A depth-1 U-Net wired so that the logit is `20·x − 10`: every conv passes
/// channel 0 through its centre tap and the head rescales it.
fn identity_network() -> Network {
    let cfg = NetworkConfig {
        depth: 1,
        base_channels: 2,
        norm_scheme: NormScheme::None,
        ..NetworkConfig::desk()
    };
    let mut net = Network::build(cfg, 0).unwrap();
    for p in net.parameters_mut() {
        p.value.data_mut().fill(0.0);
        let passes = [
            "enc0.0.conv.weight",
            "enc0.1.conv.weight",
            "dec0.0.conv.weight",
            "dec0.1.conv.weight",
        ];
        if passes.contains(&p.name.as_str()) {
            let d = p.value.dims();
            let centre = p.value.index(0, 0, d.h / 2, d.w / 2);
            p.value.data_mut()[centre] = 1.0;
        } else if p.name == "head.weight" {
            p.value.data_mut()[0] = 20.0;
        } else if p.name == "head.bias" {
            p.value.data_mut()[0] = -10.0;
        }
        assert!(p.role != ParamRole::Gate);
    }
    net
}

#[test]
fn predict_with_oracle_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = dir.path().join("oracle.cseg");
    save_checkpoint(&identity_network(), &ckpt).unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    let samples = gen_phantom(5, 32, 32, 8, &PhantomParams::default()).unwrap();
    for (i, sample) in samples.iter().enumerate() {
        save_pgm(
            &sample.mask.to_image(Spacing::default()),
            inputs.join(format!("case{i}.pgm")),
        )
        .unwrap();
    }
    fs::write(inputs.join("notes.txt"), "ignored").unwrap();

    let out = dir.path().join("pred");
    let o = cineseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&inputs),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 10);
    for (i, sample) in samples.iter().enumerate() {
        let mask = load_mask_pgm(out.join(format!("case{i}_mask.pgm"))).unwrap();
        assert_eq!(dice(&mask, &sample.mask).unwrap(), 1.0);
        let overlay = load_pgm(out.join(format!("case{i}_overlay.pgm"))).unwrap();
        let boundary = cineseg::metrics::extract_contour(&sample.mask, Spacing::default());
        for &(y, x) in boundary.points() {
            assert_eq!(overlay.get(y, x), 1.0);
        }
    }

    let again = dir.path().join("pred2");
    cineseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&inputs),
        "--out",
        s(&again),
    ]);
    for i in 0..5 {
        for suffix in ["mask", "overlay"] {
            let name = format!("case{i}_{suffix}.pgm");
            assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
        }
    }

    // one unreadable file fails on its own; the rest are still written
    fs::write(inputs.join("broken.pgm"), b"P5\n32 32\n255\nshort").unwrap();
    let mixed = dir.path().join("pred3");
    let o = cineseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&inputs),
        "--out",
        s(&mixed),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("broken.pgm"));
    assert_eq!(fs::read_dir(&mixed).unwrap().count(), 10);
}

fn write_manifest(dir: &Path, n: usize) -> PathBuf {
    let samples = gen_phantom(n, 32, 32, 2, &PhantomParams::default()).unwrap();
    let mut entries = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let (img, mask) = (dir.join(format!("img{i}.pgm")), dir.join(format!("mask{i}.pgm")));
        save_pgm(&sample.image, &img).unwrap();
        save_mask_pgm(&sample.mask, &mask).unwrap();
        entries.push(ManifestEntry {
            patient_id: format!("p{i}"),
            split: if i % 2 == 0 { Split::Train } else { Split::Test },
            image: img,
            mask,
        });
    }
    let path = dir.join("manifest.csv");
    DatasetManifest::new(entries).save(&path).unwrap();
    path
}

#[test]
fn augment_passthrough_and_multiplicity() {
    let dir = TempDir::new().unwrap();
    let manifest = write_manifest(dir.path(), 4);
    let input = DatasetManifest::load(&manifest).unwrap();

    let plain = write_config(
        dir.path(),
        "plain.cfg",
        "[augmentation]\nmultiplicity = 1\naffine = false\nelastic = false\n",
    );
    let out = dir.path().join("plain");
    let o = cineseg(&[
        "augment",
        "--config",
        s(&plain),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let copy = DatasetManifest::load(out.join(cli::AUGMENTED_MANIFEST_FILE)).unwrap();
    assert_eq!(copy.entries.len(), 4);
    for (a, b) in input.entries.iter().zip(&copy.entries) {
        assert_eq!((&a.patient_id, a.split), (&b.patient_id, b.split));
        assert_ne!(a.image, b.image);
        assert_eq!(load_pgm(&a.image).unwrap(), load_pgm(&b.image).unwrap());
        assert_eq!(load_mask_pgm(&a.mask).unwrap(), load_mask_pgm(&b.mask).unwrap());
    }

    let triple = write_config(dir.path(), "triple.cfg", "[augmentation]\nmultiplicity = 3\n");
    let out = dir.path().join("triple");
    let o = cineseg(&[
        "augment",
        "--config",
        s(&triple),
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let grown = DatasetManifest::load(out.join(cli::AUGMENTED_MANIFEST_FILE)).unwrap();
    assert_eq!(grown.entries.len(), 12);
    for (k, e) in grown.entries.iter().enumerate() {
        assert_eq!(e.patient_id, input.entries[k % 4].patient_id);
        // masks were written as 0 / 255 and reload as binary
        let raw = load_pgm(&e.mask).unwrap();
        assert!(raw.pixels().iter().all(|&p| p == 0.0 || p == 1.0));
    }

    let again = dir.path().join("triple2");
    cineseg(&[
        "augment",
        "--config",
        s(&triple),
        "--manifest",
        s(&manifest),
        "--out",
        s(&again),
    ]);
    for k in 0..12 {
        let name = format!("images/{:04}_{}.pgm", k % 4, k / 4);
        assert_eq!(fs::read(out.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }

    let o = cineseg(&[
        "augment",
        "--config",
        s(&triple),
        "--manifest",
        s(&dir.path().join("none.csv")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn selftest_passes() {
    let o = cineseg(&["selftest"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() >= 15);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn thread_env_must_be_positive() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_cineseg"))
        .args([
            "compare",
            "--config",
            s(&cfg),
            "--out",
            s(dir.path()),
            "--variants",
            "unet",
            "--aug",
            "off",
        ])
        .env("CINESEG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CINESEG_THREADS"));
}
