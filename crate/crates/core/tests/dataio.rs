use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use cineseg::dataio::{
    decode_checkpoint, decode_pgm, encode_checkpoint, encode_pgm, gen_phantom, load_checkpoint,
    load_checkpoint_expecting, load_mask_pgm, load_pgm, save_checkpoint, save_mask_pgm, save_pgm, split_by_patient,
    DatasetManifest, ManifestEntry, PhantomParams, Split,
};
use cineseg::image::{Grayscale2D, MaskImage, Spacing};
use cineseg::network::{Network, NetworkConfig, ParamRole, Variant};
use cineseg::normalization::Mode;
use cineseg::tensor::{Dims, Tape, Tensor4D};
use cineseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pgm_fixture_8bit() {
    let mut bytes = b"P5\n# two by two\n2 2\n255\n".to_vec();
    bytes.extend([0u8, 51, 204, 255]);
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!((img.height(), img.width()), (2, 2));
    assert_eq!(img.pixels(), &[0.0, 0.2, 0.8, 1.0]);
}

#[test]
fn pgm_fixture_16bit() {
    let mut bytes = b"P5 2 2 65535\n".to_vec();
    bytes.extend([0x00, 0x00, 0xFF, 0xFF, 0x80, 0x00, 0x01, 0x00]);
    let img = decode_pgm(&bytes).unwrap();
    assert_eq!(img.pixels(), &[0.0, 1.0, 32768.0 / 65535.0, 256.0 / 65535.0]);
    let mut expected = b"P5\n2 2\n65535\n".to_vec();
    expected.extend(&bytes[13..]);
    assert_eq!(encode_pgm(&img, 65535), expected);
}

#[test]
fn pgm_rejects_bad_input_with_offsets() {
    let parse_offset = |bytes: &[u8]| match decode_pgm(bytes) {
        Err(Error::Parse { offset, .. }) => offset,
        other => panic!("expected parse error, got {other:?}"),
    };
    assert_eq!(parse_offset(b"P2\n2 2\n255\n0 1 2 3\n"), 0);
    assert_eq!(parse_offset(b"P6\n2 2\n255\n"), 0);
    assert_eq!(parse_offset(b"P5\n2 x\n255\n"), 5);
    assert_eq!(parse_offset(b"P5\n2 2\n70000\n"), 7);
    let truncated = b"P5\n2 2\n255\n\x00\x01";
    assert_eq!(parse_offset(truncated), truncated.len());
}

#[test]
fn pgm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Grayscale2D::from_fn(7, 9, Spacing::default(), |_, _| rng.gen()).unwrap();
    let path = dir.path().join("a.pgm");
    save_pgm(&img, &path).unwrap();
    let back = load_pgm(&path).unwrap();
    let worst = img
        .pixels()
        .iter()
        .zip(back.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1.0 / 65535.0);
    // Re-saving a quantized image is exact.
    save_pgm(&back, &path).unwrap();
    assert_eq!(load_pgm(&path).unwrap(), back);

    let mask = MaskImage::from_fn(5, 6, |y, x| (y + x) % 3 == 0).unwrap();
    save_mask_pgm(&mask, dir.path().join("m.pgm")).unwrap();
    assert_eq!(load_mask_pgm(dir.path().join("m.pgm")).unwrap(), mask);

    assert!(matches!(
        load_pgm(dir.path().join("missing.pgm")),
        Err(Error::Io { .. })
    ));
}

fn write_dataset(dir: &std::path::Path, patients: usize, per_patient: usize) -> DatasetManifest {
    let img = Grayscale2D::from_fn(4, 4, Spacing::default(), |y, x| (y * 4 + x) as f64 / 15.0).unwrap();
    let mask = MaskImage::from_fn(4, 4, |y, _| y > 1).unwrap();
    let mut entries = Vec::new();
    for p in 0..patients {
        for k in 0..per_patient {
            let image = dir.join(format!("p{p}_{k}.pgm"));
            let mpath = dir.join(format!("p{p}_{k}_mask.pgm"));
            save_pgm(&img, &image).unwrap();
            save_mask_pgm(&mask, &mpath).unwrap();
            entries.push(ManifestEntry {
                patient_id: format!("patient{p:02}"),
                split: Split::Train,
                image,
                mask: mpath,
            });
        }
    }
    DatasetManifest::new(entries)
}

#[test]
fn manifest_round_trip_and_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 3, 2);
    let path = dir.path().join("manifest.csv");
    manifest.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("patient_id,split,image,mask\n"));
    assert!(text.contains("patient00,train,p0_0.pgm,p0_0_mask.pgm"));
    let back = DatasetManifest::load(&path).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.load_split(Split::Train).unwrap().len(), 6);
    assert!(back.load_split(Split::Test).unwrap().is_empty());
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1, 1);
    let path = dir.path().join("m.csv");

    std::fs::write(&path, "patient,split,image,mask\n").unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Parse { .. })));

    std::fs::write(&path, "patient_id,split,image,mask\np,holdout,p0_0.pgm,p0_0_mask.pgm\n").unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Parse { offset, .. }) if offset > 0));

    std::fs::write(&path, "patient_id,split,image,mask\np,test,nope.pgm,p0_0_mask.pgm\n").unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Io { path, .. }) if path.ends_with("nope.pgm")));

    assert!(matches!(
        DatasetManifest::load(dir.path().join("absent.csv")),
        Err(Error::Io { .. })
    ));
}

fn synthetic_manifest(patients: usize, per_patient: usize) -> DatasetManifest {
    let entries = (0..patients)
        .flat_map(|p| {
            (0..per_patient).map(move |k| ManifestEntry {
                patient_id: format!("id{p}"),
                split: Split::Train,
                image: PathBuf::from(format!("{p}_{k}.pgm")),
                mask: PathBuf::from(format!("{p}_{k}_m.pgm")),
            })
        })
        .collect();
    DatasetManifest::new(entries)
}

fn patients_per_split(m: &DatasetManifest) -> HashMap<Split, HashSet<String>> {
    let mut out: HashMap<Split, HashSet<String>> = HashMap::new();
    for e in &m.entries {
        out.entry(e.split).or_default().insert(e.patient_id.clone());
    }
    out
}

#[test]
fn split_forty_five_patients_evenly() {
    let m = synthetic_manifest(45, 3);
    let split = split_by_patient(&m, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 7).unwrap();
    let by = patients_per_split(&split);
    for s in Split::ALL {
        assert_eq!(by[&s].len(), 15);
    }
    assert_eq!(
        split,
        split_by_patient(&m, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 7).unwrap()
    );
    assert_ne!(
        split,
        split_by_patient(&m, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 8).unwrap()
    );
}

#[test]
fn split_edge_cases() {
    let one = synthetic_manifest(1, 4);
    let split = split_by_patient(&one, [1.0, 0.0, 0.0], 0).unwrap();
    assert!(split.entries.iter().all(|e| e.split == Split::Train));

    assert!(matches!(
        split_by_patient(&one, [0.5, 0.5, 0.0], 0),
        Err(Error::Config { .. })
    ));
    assert!(matches!(
        split_by_patient(&one, [0.5, 0.4, 0.0], 0),
        Err(Error::Config { .. })
    ));

    // Tiny ratios still get a patient.
    let three = synthetic_manifest(3, 1);
    let by = patients_per_split(&split_by_patient(&three, [0.9, 0.05, 0.05], 0).unwrap());
    assert!(Split::ALL.iter().all(|s| by[s].len() == 1));
}

#[test]
fn splits_are_patient_disjoint() {
    let m = synthetic_manifest(23, 5);
    for seed in 0..50 {
        let split = split_by_patient(&m, [0.6, 0.2, 0.2], seed).unwrap();
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &split.entries {
            assert_eq!(*seen.entry(&e.patient_id).or_insert(e.split), e.split);
        }
        assert_eq!(seen.len(), 23);
    }
}

#[test]
fn phantom_masks_are_the_generating_disk() {
    let params = PhantomParams::default();
    let samples = gen_phantom(100, 32, 32, 3, &params).unwrap();
    let mut fraction = 0.0;
    for s in &samples {
        let g = s.geometry;
        let disk = MaskImage::from_fn(32, 32, |y, x| {
            (y as f64 - g.cy).powi(2) + (x as f64 - g.cx).powi(2) <= g.pool_radius.powi(2)
        })
        .unwrap();
        assert_eq!(s.mask, disk);
        for y in 0..32 {
            for x in 0..32 {
                if s.mask.get(y, x) {
                    let r = ((y as f64 - g.cy).powi(2) + (x as f64 - g.cx).powi(2)).sqrt();
                    assert!(r < g.pool_radius + 1.0);
                }
            }
        }
        assert!(s.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(s.mask.count() > 0);
        fraction += s.mask.count() as f64 / 1024.0;
    }
    fraction /= 100.0;
    assert!((0.03..=0.25).contains(&fraction), "{fraction}");
}

#[test]
fn phantom_determinism_and_contract() {
    let p = PhantomParams::default();
    let a = gen_phantom(5, 40, 36, 1, &p).unwrap();
    assert_eq!(a, gen_phantom(5, 40, 36, 1, &p).unwrap());
    assert_eq!(a[..3], gen_phantom(3, 40, 36, 1, &p).unwrap()[..]);
    assert_ne!(a, gen_phantom(5, 40, 36, 2, &p).unwrap());
    assert!(matches!(gen_phantom(1, 31, 40, 0, &p), Err(Error::Config { .. })));

    // Pool pixels are brighter than the background on average.
    let s = &a[0];
    let (mut inside, mut outside, mut ni, mut no) = (0.0, 0.0, 0, 0);
    for y in 0..40 {
        for x in 0..36 {
            if s.mask.get(y, x) {
                inside += s.image.get(y, x);
                ni += 1;
            } else if !s.geometry.in_wall(y, x) {
                outside += s.image.get(y, x);
                no += 1;
            }
        }
    }
    assert!(inside / ni as f64 > outside / no as f64 + 0.2);
}

/// A network with non-default parameters and running statistics.
fn trained_looking(variant: Variant, seed: u64) -> (Network, Tensor4D) {
    let cfg = NetworkConfig {
        input_height: 16,
        input_width: 16,
        ..NetworkConfig::desk().with_variant(variant)
    };
    let mut net = Network::build(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.parameters_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
        if p.role == ParamRole::Gate {
            p.value.data_mut().iter_mut().for_each(|r| *r = rng.gen());
        }
    }
    let x = Tensor4D::from_fn(Dims::new(3, 1, 16, 16), |_, _, _, _| rng.gen());
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    net.forward(&mut tape, v, Mode::Train, 0).unwrap();
    (net, x)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let (mut net, x) = trained_looking(variant, i as u64);
        let path = dir.path().join(format!("{}.ckpt", variant.key()));
        save_checkpoint(&net, &path).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.parameters(), net.parameters());
        assert_eq!(back.running_stats(), net.running_stats());
        let (a, b) = (net.predict(&x).unwrap(), back.predict(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(encode_checkpoint(&back), encode_checkpoint(&net));
    }
}

#[test]
fn checkpoint_integrity_errors() {
    let (net, _) = trained_looking(Variant::IbuNet, 9);
    let bytes = encode_checkpoint(&net);
    for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut], None), Err(Error::Integrity(_))),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    assert!(matches!(decode_checkpoint(&flipped, None), Err(Error::Integrity(m)) if m.contains("checksum")));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(decode_checkpoint(&version, None), Err(Error::Integrity(m)) if m.contains("version")));
}

#[test]
fn checkpoint_config_mismatch_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let (net, _) = trained_looking(Variant::BnuNet, 1);
    let path = dir.path().join("n.ckpt");
    save_checkpoint(&net, &path).unwrap();
    let mut other = net.config().clone();
    other.depth = 3;
    match load_checkpoint_expecting(&path, &other) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "depth"),
        r => panic!("expected config error, got {:?}", r.map(|_| ())),
    }
    assert!(load_checkpoint_expecting(&path, net.config()).is_ok());
}
