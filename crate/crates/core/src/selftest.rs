//! Runtime self-checks: gradient checks of every loss and of a tiny model,
//! distribution invariants, and the KL losses against a direct double loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, grad_check_many, Graph, Tensor};
use crate::error::Result;
use crate::heatmap::{gaussian_heatmap, normalize_spatial, AreaMask, Grid, KeypointSet};
use crate::losses::{loss_mse, KlLoss, LOG_EPS};
use crate::model::{forward, Model, ModelConfig};

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    /// Log clamp handed to the losses under test; the oracle always uses
    /// the default.
    pub eps: f64,
    pub seed: u64,
    /// Random cases per check.
    pub cases: usize,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            eps: LOG_EPS,
            seed: 0,
            cases: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst error seen; `inf` when a case failed outright.
    pub max_error: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("sized")
}

fn random_points(b: usize, k: usize, grid: Grid, rng: &mut ChaCha8Rng) -> Vec<KeypointSet> {
    (0..b)
        .map(|_| {
            KeypointSet::new(
                (0..k)
                    .map(|_| {
                        (
                            rng.random_range(0.0..grid.height as f64 - 1e-6),
                            rng.random_range(0.0..grid.width as f64 - 1e-6),
                        )
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Folds per-case results into one check. An `Err` case counts as infinite error.
fn check(name: &str, tolerance: f64, errors: impl Iterator<Item = Result<f64>>) -> Check {
    let mut worst = 0.0f64;
    for e in errors {
        let e = match e {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        };
        worst = worst.max(e);
    }
    Check {
        name: name.into(),
        passed: worst <= tolerance,
        max_error: worst,
        tolerance,
    }
}

/// `Σ q · (ln max(q, ε) − ln max(p, ε))` per slice, averaged.
fn kl_double_loop(q: &[f64], p: &[f64], slices: usize) -> f64 {
    let n = q.len() / slices;
    let mut total = 0.0;
    for s in 0..slices {
        for i in 0..n {
            let (qi, pi) = (q[s * n + i], p[s * n + i]);
            if qi > 0.0 {
                total += qi * (qi.max(LOG_EPS).ln() - pi.max(LOG_EPS).ln());
            }
        }
    }
    total / slices as f64
}

fn softmax_slices(z: &[f64], n: usize) -> Vec<f64> {
    z.chunks(n)
        .flat_map(|c| {
            let m = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = c.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grid = Grid::square(6);
    let kl = KlLoss::new(grid, 0.9)
        .and_then(|k| k.with_eps(opts.eps).with_mask(AreaMask::central(grid)?))
        .expect("valid loss setup");
    let kl2 = KlLoss::new(grid, 0.9).expect("valid").with_eps(opts.eps);
    let mut checks = Vec::new();

    let cases: Vec<_> = (0..opts.cases)
        .map(|_| {
            (
                random_tensor(&[2, 2, 6, 6], 2.0, &mut rng),
                random_tensor(&[2, 2, 6, 6], 2.0, &mut rng),
                random_points(2, 2, grid, &mut rng),
            )
        })
        .collect();

    checks.push(check(
        "grad_check loss_mse",
        1e-4,
        cases.iter().map(|(z, t, _)| grad_check(|g, z| Ok(loss_mse(g, z, t)?.value), z, 1e-5)),
    ));
    checks.push(check(
        "grad_check loss_true",
        1e-4,
        cases.iter().map(|(z, _, pts)| {
            grad_check(
                |g, z| {
                    let p = g.spatial_softmax(z)?;
                    Ok(kl2.loss_true(g, p, pts)?.value)
                },
                z,
                1e-5,
            )
        }),
    ));
    checks.push(check(
        "grad_check loss_false",
        1e-4,
        cases.iter().map(|(z, r, _)| {
            grad_check(
                |g, z| {
                    let p = g.spatial_softmax(z)?;
                    let r = g.constant(r.clone());
                    Ok(kl2.loss_false(g, p, r)?.value)
                },
                z,
                1e-5,
            )
        }),
    ));

    let cfg = ModelConfig {
        image_channels: 1,
        image_size: 6,
        channels: vec![2, 2],
        strides: vec![2, 1],
        head_width: 2,
        keypoints: 1,
        upsample: false,
    };
    let small = cfg.grid().expect("valid tiny model");
    let small_kl = KlLoss::new(small, 1.0).expect("valid").with_eps(opts.eps);
    checks.push(check(
        "grad_check end-to-end model",
        1e-3,
        (0..opts.cases).map(|i| {
            let model = Model::<f64>::new(cfg.clone(), opts.seed.wrapping_add(i as u64))?;
            let pts = random_points(2, 1, small, &mut rng);
            let gen_n = model.generator.params().len();
            let mut points: Vec<Tensor<f64>> = model
                .generator
                .params()
                .iter()
                .enumerate()
                // Nonzero biases keep every ReLU away from its kink.
                .map(|(j, p)| if j % 2 == 1 { random_tensor(p.shape(), 0.1, &mut rng) } else { p.clone() })
                .collect();
            points.extend(
                model
                    .head
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j % 2 == 1 { random_tensor(p.shape(), 0.1, &mut rng) } else { p.clone() }),
            );
            points.push(random_tensor(&[2, 1, 6, 6], 1.0, &mut rng));
            grad_check_many(
                |g, vars| {
                    let (gv, rest) = vars.split_at(gen_n);
                    let (hv, xv) = rest.split_at(rest.len() - 1);
                    let logits = forward(g, (&model.generator, gv), (&model.head, hv), xv[0])?;
                    let p = g.spatial_softmax(logits)?;
                    Ok(small_kl.loss_true(g, p, &pts)?.value)
                },
                &points,
                1e-6,
            )
        }),
    ));

    // Distribution invariants: mass 1 and no negative entries.
    let inv_cases = opts.cases * 50;
    checks.push(check(
        "normalized heatmaps sum to 1",
        1e-9,
        (0..inv_cases).map(|_| {
            let pts = random_points(1, 3, grid, &mut rng);
            let d = normalize_spatial(&gaussian_heatmap(&pts[0], grid, rng.random_range(0.3..3.0))?)?;
            let mut worst = 0.0f64;
            for k in 0..3 {
                let s = d.slice(k);
                if s.iter().any(|&v| v < 0.0) {
                    return Ok(f64::INFINITY);
                }
                worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
            }
            Ok(worst)
        }),
    ));
    checks.push(check(
        "spatial_softmax sums to 1",
        1e-9,
        (0..inv_cases).map(|_| {
            let z = random_tensor(&[1, 2, 6, 6], 50.0, &mut rng);
            let mut g = Graph::new();
            let v = g.constant(z);
            let p = g.spatial_softmax(v)?;
            let data = g.value(p).data();
            if data.iter().any(|&x| x < 0.0) {
                return Ok(f64::INFINITY);
            }
            Ok(data.chunks(36).map(|c| (c.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max))
        }),
    ));

    // KL losses against the double loop, including logits extreme enough
    // that some probabilities underflow to zero.
    checks.push(check(
        "kl oracle",
        1e-10,
        (0..opts.cases).map(|i| {
            let scale = if i % 4 == 0 { 800.0 } else { 4.0 };
            let z = random_tensor(&[2, 2, 6, 6], scale, &mut rng);
            let r = random_tensor(&[2, 2, 6, 6], 3.0, &mut rng);
            let pts = random_points(2, 2, grid, &mut rng);
            let p = softmax_slices(z.data(), 36);
            let qt: Vec<f64> = kl.true_targets(&pts)?.iter().flat_map(|d| d.data().to_vec()).collect();
            let decoded = crate::heatmap::decode_batch(&r)?;
            let qf: Vec<f64> = kl.false_targets(&decoded)?.iter().flat_map(|d| d.data().to_vec()).collect();
            let mut g = Graph::new();
            let zv = g.constant(z.clone());
            let pv = g.spatial_softmax(zv)?;
            let rv = g.constant(r);
            let lt = kl.loss_true(&mut g, pv, &pts)?.scalar(&g);
            let lf = kl.loss_false(&mut g, pv, rv)?.scalar(&g);
            Ok((lt - kl_double_loop(&qt, &p, 4))
                .abs()
                .max((lf - kl_double_loop(&qf, &p, 4)).abs()))
        }),
    ));
    SelftestReport { checks }
}
