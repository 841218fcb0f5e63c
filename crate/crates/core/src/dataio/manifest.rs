//! Dataset manifests: a CSV listing `patient_id,split,image,mask`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pgm::{load_mask_pgm, load_pgm};
use crate::error::{Error, Result};
use crate::image::{Grayscale2D, MaskImage};

pub const MANIFEST_HEADER: [&str; 4] = ["patient_id", "split", "image", "mask"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

/// Manifest entries with paths resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest { entries }
    }

    /// Reads a manifest CSV. Relative paths are taken relative to the
    /// manifest's own directory, and every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(&text[..]);
        let position = |e: &csv::Error| e.position().map_or(0, |p| p.byte() as usize);
        let header = reader.headers().map_err(|e| Error::Parse {
            offset: position(&e),
            message: format!("{}: {e}", path.display()),
        })?;
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "{}: header must be `{}`, got `{}`",
                    path.display(),
                    MANIFEST_HEADER.join(","),
                    header.iter().collect::<Vec<_>>().join(",")
                ),
            });
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                offset: position(&e),
                message: format!("{}: {e}", path.display()),
            })?;
            let offset = record.position().map_or(0, |p| p.byte() as usize);
            let bad = |message: String| Error::Parse {
                offset,
                message: format!("{}: {message}", path.display()),
            };
            let patient_id = record[0].to_string();
            if patient_id.is_empty() {
                return Err(bad("empty patient_id".into()));
            }
            let split = record[1].parse().map_err(bad)?;
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            let (image, mask) = (resolve(&record[2]), resolve(&record[3]));
            for file in [&image, &mask] {
                if !file.is_file() {
                    return Err(Error::io(
                        file,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
            entries.push(ManifestEntry {
                patient_id,
                split,
                image,
                mask,
            });
        }
        Ok(DatasetManifest { entries })
    }

    /// Writes the manifest. Paths under `path`'s directory are stored
    /// relative to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let mut writer = csv::Writer::from_writer(Vec::new());
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        writer.write_record(MANIFEST_HEADER).map_err(to_io)?;
        for e in &self.entries {
            let split = e.split.to_string();
            writer
                .write_record([e.patient_id.as_str(), split.as_str(), &rel(&e.image), &rel(&e.mask)])
                .map_err(to_io)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Distinct patient ids in sorted order.
    pub fn patients(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Loads every image/mask pair of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Grayscale2D, MaskImage)>> {
        self.entries_in(split)
            .map(|e| {
                let image = load_pgm(&e.image)?;
                let mask = load_mask_pgm(&e.mask)?;
                if (image.height(), image.width()) != (mask.height(), mask.width()) {
                    return Err(Error::shape(format!(
                        "{} and {} differ in size",
                        e.image.display(),
                        e.mask.display()
                    )));
                }
                Ok((image, mask))
            })
            .collect()
    }
}

/// Reassigns splits by patient. Patients (sorted, then shuffled with
/// `seed`) are cut at the cumulative ratio boundaries `round(n · Σr)`;
/// every split with a non-zero ratio receives at least one patient.
pub fn split_by_patient(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(
            "ratios",
            format!("must be non-negative and sum to 1, got {ratios:?}"),
        ));
    }
    let mut patients = manifest.patients();
    let n = patients.len();
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < wanted {
        return Err(Error::config(
            "ratios",
            format!("{n} patients cannot fill {wanted} non-empty splits"),
        ));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut counts = [0usize; 3];
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        let edge = if i == 2 {
            n
        } else {
            ((n as f64) * cum).round().min(n as f64) as usize
        };
        counts[i] = edge.saturating_sub(prev);
        prev = prev.max(edge);
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                .expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }

    let mut assignment = std::collections::HashMap::with_capacity(n);
    let mut next = patients.into_iter();
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for id in next.by_ref().take(count) {
            assignment.insert(id, *split);
        }
    }
    let entries = manifest
        .entries
        .iter()
        .map(|e| ManifestEntry {
            split: assignment[&e.patient_id],
            ..e.clone()
        })
        .collect();
    Ok(DatasetManifest { entries })
}
