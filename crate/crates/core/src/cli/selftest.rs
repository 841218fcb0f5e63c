//! Built-in gradient and metric checks run by `cineseg selftest`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{MaskImage, Spacing};
use crate::metrics::{apd, dice, extract_contour, sensitivity};
use crate::network::{Network, NetworkConfig, NormScheme, ParamRole};
use crate::normalization::{batch_instance_norm, batch_norm, instance_norm, layer_norm, Mode, RunningStats};
use crate::tensor::{grad_check_many, Dims, Padding, Tape, Tensor4D, Var};
use crate::training::{loss, LossKind};

/// Largest relative error accepted from a finite-difference comparison.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const TRIALS: u64 = 20;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<28} {}", self.name, self.detail)
    }
}

fn random(rng: &mut ChaCha8Rng, dims: Dims) -> Tensor4D {
    Tensor4D::from_fn(dims, |_, _, _, _| rng.gen_range(-2.0..2.0))
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, tape.dims(y)));
    let p = tape.mul(y, w).expect("same dims");
    tape.sum(p)
}

fn grad_suite<F>(name: &str, seed: u64, mut case: F) -> Check
where
    F: FnMut(&mut ChaCha8Rng, u64) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for trial in 0..TRIALS {
        match case(&mut rng, seed * 1000 + trial) {
            Ok(err) => worst = worst.max(err),
            Err(e) => {
                return Check {
                    name: name.into(),
                    passed: false,
                    detail: format!("trial {trial}: {e}"),
                }
            }
        }
    }
    Check {
        name: name.into(),
        passed: worst < GRAD_TOLERANCE,
        detail: format!("max rel err {worst:.2e} over {TRIALS} cases"),
    }
}

fn small_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims::new(
        rng.gen_range(1..3),
        rng.gen_range(1..3),
        rng.gen_range(2..6),
        rng.gen_range(2..6),
    )
}

fn vector(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Tensor4D {
    Tensor4D::from_fn(Dims::vector(len), |_, _, _, _| rng.gen_range(lo..hi))
}

fn op_checks() -> Vec<Check> {
    let mut out = Vec::new();
    for (name, padding) in [("conv2d same", Padding::Same), ("conv2d valid", Padding::Valid)] {
        out.push(grad_suite(name, 1, |rng, s| {
            let k = rng.gen_range(2..4);
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let d = Dims::new(
                rng.gen_range(1..3),
                ci,
                rng.gen_range(k..k + 3),
                rng.gen_range(k..k + 3),
            );
            let x = random(rng, d);
            let w = random(rng, Dims::new(co, ci, k, k));
            let b = random(rng, Dims::vector(co));
            grad_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], padding)?;
                    Ok(probe(t, y, s))
                },
                &[x, w, b],
                STEP,
            )
        }));
    }
    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let unary: [(&str, Unary); 6] = [
        ("elu", |t, x| Ok(t.elu(x, 1.0))),
        ("relu", |t, x| Ok(t.relu(x))),
        ("sigmoid", |t, x| Ok(t.sigmoid(x))),
        ("maxpool2", |t, x| t.maxpool2(x)),
        ("upsample2", |t, x| Ok(t.upsample2(x))),
        ("crop_center", |t, x| {
            let d = t.dims(x);
            t.crop_center(x, d.h - 1, d.w / 2 + 1)
        }),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        out.push(grad_suite(name, 10 + i as u64, |rng, s| {
            let d = small_dims(rng);
            let d = Dims::new(d.n, d.c, d.h * 2, d.w * 2);
            // keep inputs away from the kinks of relu and elu
            let x = Tensor4D::from_fn(d, |_, _, _, _| {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            });
            grad_check_many(
                |t, v| {
                    let y = op(t, v[0])?;
                    Ok(probe(t, y, s))
                },
                &[x],
                STEP,
            )
        }));
    }
    out.push(grad_suite("concat/add/mul", 20, |rng, s| {
        let d = small_dims(rng);
        let (a, b) = (random(rng, d), random(rng, d));
        grad_check_many(
            |t, v| {
                let c = t.concat_channels(v[0], v[1])?;
                let p = t.mul(v[0], v[1])?;
                let q = t.add(p, v[1])?;
                let c = t.concat_channels(c, q)?;
                Ok(probe(t, c, s))
            },
            &[a, b],
            STEP,
        )
    }));
    out
}

fn norm_checks() -> Vec<Check> {
    let names = ["batch_norm", "layer_norm", "instance_norm", "batch_instance_norm"];
    names
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            grad_suite(name, 30 + k as u64, |rng, s| {
                let d = small_dims(rng);
                let d = Dims::new(d.n + 1, d.c, d.h, d.w);
                let inputs = [
                    random(rng, d),
                    vector(rng, d.c, 0.5, 1.5),
                    vector(rng, d.c, -0.5, 0.5),
                    vector(rng, d.c, 0.1, 0.9),
                ];
                grad_check_many(
                    |t, v| {
                        let mut stats = RunningStats::new(d.c);
                        let y = match k {
                            0 => batch_norm(t, v[0], v[1], v[2], 1e-5, &mut stats, Mode::Train)?,
                            1 => layer_norm(t, v[0], v[1], v[2], 1e-5)?,
                            2 => instance_norm(t, v[0], v[1], v[2], 1e-5)?,
                            _ => batch_instance_norm(t, v[0], v[1], v[2], v[3], 1e-5, &mut stats, Mode::Train)?,
                        };
                        let y = t.elu(y, 1.0);
                        Ok(probe(t, y, s))
                    },
                    &inputs,
                    STEP,
                )
            })
        })
        .collect()
}

fn loss_checks() -> Vec<Check> {
    [LossKind::SoftDice, LossKind::Bce, LossKind::DicePlusBce]
        .into_iter()
        .enumerate()
        .map(|(k, kind)| {
            grad_suite(&format!("loss {kind}"), 40 + k as u64, |rng, _| {
                let d = Dims::new(rng.gen_range(1..3), 1, rng.gen_range(2..5), rng.gen_range(2..5));
                let x = random(rng, d);
                let target = Tensor4D::from_fn(d, |_, _, _, _| rng.gen_bool(0.5) as u8 as f64);
                grad_check_many(|t, v| loss(t, v[0], &target, kind), &[x], STEP)
            })
        })
        .collect()
}

fn network_check() -> Check {
    let cfg = NetworkConfig {
        depth: 1,
        base_channels: 2,
        norm_scheme: NormScheme::InstanceBatchFirst,
        dropconnect_rate: 0.25,
        input_height: 12,
        input_width: 12,
        ..NetworkConfig::desk()
    };
    let run = || -> Result<f64> {
        let net = Network::build(cfg.clone(), 3)?;
        let params = net.parameters();
        // conv biases ahead of a per-channel standardization have an exactly
        // zero gradient; finite differences only see noise there
        let free: Vec<usize> = (0..params.len())
            .filter(|&i| params[i].role != ParamRole::Bias || params[i].name.starts_with("head"))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut inputs = vec![random(&mut rng, Dims::new(2, 1, 12, 12))];
        inputs.extend(free.iter().map(|&i| params[i].value.clone()));
        grad_check_many(
            |t, vars| {
                let mut next = 1;
                let mut all = Vec::with_capacity(params.len());
                for (i, p) in params.iter().enumerate() {
                    if free.contains(&i) {
                        all.push(vars[next]);
                        next += 1;
                    } else {
                        all.push(t.constant(p.value.clone()));
                    }
                }
                let y = net.clone().forward_with(t, vars[0], &all, Mode::Train, 5)?;
                Ok(probe(t, y, 6))
            },
            &inputs,
            STEP,
        )
    };
    let name = "end-to-end depth-1 net".to_string();
    match run() {
        Ok(err) => Check {
            name,
            passed: err < GRAD_TOLERANCE,
            detail: format!("max rel err {err:.2e}"),
        },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> MaskImage {
    MaskImage::from_fn(h, w, |_, _| rng.gen_bool(p)).expect("valid dims")
}

fn metric_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let p = rng.gen_range(0.0..1.0);
        let (a, b) = (random_mask(&mut rng, h, w, p), random_mask(&mut rng, h, w, p));
        let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
            both += (x & y) as usize;
            na += x as usize;
            nb += y as usize;
        }
        let want_dice = if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        };
        let want_sens = if nb == 0 { 1.0 } else { both as f64 / nb as f64 };
        if dice(&a, &b).ok() != Some(want_dice) || sensitivity(&a, &b).ok() != Some(want_sens) {
            mismatches += 1;
        }
    }
    let overlap = Check {
        name: "dice/sensitivity oracle".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches in 1000 pairs"),
    };

    let spacing = Spacing::new(1.35, 0.9).expect("positive");
    let mut worst = 0.0_f64;
    let mut compared = 0;
    while compared < 100 {
        let (h, w) = (rng.gen_range(3..30), rng.gen_range(3..30));
        let a = extract_contour(&random_mask(&mut rng, h, w, 0.3), spacing);
        let b = extract_contour(&random_mask(&mut rng, h, w, 0.3), spacing);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let mm = |(y0, x0): (usize, usize), (y1, x1): (usize, usize)| {
            let dy = (y0 as f64 - y1 as f64) * spacing.row;
            let dx = (x0 as f64 - x1 as f64) * spacing.col;
            (dy * dy + dx * dx).sqrt()
        };
        let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
            from.iter()
                .map(|&p| to.iter().map(|&q| mm(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / from.len() as f64
        };
        let want = (directed(a.points(), b.points()) + directed(b.points(), a.points())) / 2.0;
        let got = apd(&a, &b).unwrap_or(f64::NAN);
        worst = worst.max((got - want).abs());
        compared += 1;
    }
    let distance = Check {
        name: "apd pairwise oracle".into(),
        passed: worst <= 1e-12,
        detail: format!("max abs diff {worst:.2e} mm over 100 contour pairs"),
    };
    vec![overlap, distance]
}

/// Runs every check; the suite passes when all of them do.
pub fn run() -> Vec<Check> {
    let mut checks = op_checks();
    checks.extend(norm_checks());
    checks.extend(loss_checks());
    checks.push(network_check());
    checks.extend(metric_checks());
    checks
}
