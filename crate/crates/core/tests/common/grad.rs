#![allow(clippy::needless_range_loop)]

//! Analytic gradients against central finite differences.

use cfdetect::alignment::{self, GaussianStats};
use cfdetect::dataio::{EmbeddingRecord, Label, Split};
use cfdetect::geometry::{self, BallConfig, BallPoint, TangentVector};
use cfdetect::model::{self, ModelConfig, ModelParams, PromptRegistry, Variant};
use cfdetect::seeding;
use rand::Rng;

pub const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

pub type Check = Result<f64, String>;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

fn random_vec(rng: &mut seeding::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Tracks the worst relative error and fails on the first one above tolerance.
struct Worst(f64);

impl Worst {
    fn see(&mut self, analytic: f64, numeric: f64, what: impl FnOnce() -> String) -> Result<(), String> {
        let e = rel_err(analytic, numeric);
        self.0 = self.0.max(e);
        if e < TOL {
            Ok(())
        } else {
            Err(format!("{}: analytic {analytic} numeric {numeric} (rel {e:.2e})", what()))
        }
    }
}

/// VJP of `f: R^n → R^m` against finite differences of `⟨upstream, f⟩`.
fn check_vjp(
    worst: &mut Worst,
    x: &[f64],
    upstream: &[f64],
    f: impl Fn(&[f64]) -> Vec<f64>,
    vjp: &[f64],
    what: &str,
) -> Result<(), String> {
    for i in 0..x.len() {
        let mut probe = |v: f64| {
            let mut y = x.to_vec();
            y[i] = v;
            f(&y).iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = central(&mut probe, x[i]);
        worst.see(vjp[i], numeric, || format!("{what}[{i}]"))?;
    }
    Ok(())
}

pub fn geometry_primitives() -> Check {
    let mut worst = Worst(0.0);
    let mut rng = seeding::rng(11);
    for c in [0.5, 1.0, 2.0] {
        let cfg = BallConfig::new(c).unwrap();
        for _ in 0..20 {
            let u = random_vec(&mut rng, 5, 0.6);
            let g = random_vec(&mut rng, 5, 1.0);
            let exp =
                |v: &[f64]| geometry::exp_origin(&TangentVector::new(v.to_vec()).unwrap(), &cfg).unwrap().into_inner();
            check_vjp(&mut worst, &u, &g, exp, &geometry::grad::exp_origin(&u, &g, &cfg), "exp")?;

            let h = exp(&u);
            let log = |v: &[f64]| {
                geometry::log_origin(&BallPoint::new(v.to_vec(), &cfg).unwrap(), &cfg).unwrap().into_inner()
            };
            check_vjp(&mut worst, &h, &g, log, &geometry::grad::log_origin(&h, &g, &cfg), "log")?;

            let y = exp(&random_vec(&mut rng, 5, 0.6));
            let (gx, gy) = geometry::grad::mobius_add(&h, &y, &g, &cfg);
            let add = |a: &[f64], b: &[f64]| {
                geometry::mobius_add(
                    &BallPoint::new(a.to_vec(), &cfg).unwrap(),
                    &BallPoint::new(b.to_vec(), &cfg).unwrap(),
                    &cfg,
                )
                .unwrap()
                .into_inner()
            };
            check_vjp(&mut worst, &h, &g, |a| add(a, &y), &gx, "mobius x")?;
            check_vjp(&mut worst, &y, &g, |b| add(&h, b), &gy, "mobius y")?;

            let far: Vec<f64> = u.iter().map(|x| x * 10.0 / cfg.sqrt_c()).collect();
            let proj = |v: &[f64]| geometry::project_to_ball(v, &cfg).unwrap().into_inner();
            check_vjp(&mut worst, &far, &g, proj, &geometry::grad::project_to_ball(&far, &g, &cfg), "project")?;
        }
    }
    Ok(worst.0)
}

pub fn bhattacharyya_primitives() -> Check {
    let mut worst = Worst(0.0);
    let mut rng = seeding::rng(12);
    for _ in 0..20 {
        let mut stats = || {
            GaussianStats::new(random_vec(&mut rng, 4, 1.0), (0..4).map(|_| rng.random_range(0.2..2.0)).collect())
                .unwrap()
        };
        let (p, q) = (stats(), stats());
        let [gm1, gv1, gm2, gv2] = alignment::grad::bhattacharyya_gaussian(&p, &q);
        let bd = |p: &GaussianStats, q: &GaussianStats| alignment::bhattacharyya_gaussian(p, q).unwrap();
        for i in 0..4 {
            let n = central(
                &mut |v| {
                    let mut s = p.clone();
                    s.mean[i] = v;
                    bd(&s, &q)
                },
                p.mean[i],
            );
            worst.see(gm1[i], n, || format!("dμp[{i}]"))?;
            let n = central(
                &mut |v| {
                    let mut s = p.clone();
                    s.var[i] = v;
                    bd(&s, &q)
                },
                p.var[i],
            );
            worst.see(gv1[i], n, || format!("dσ²p[{i}]"))?;
            let n = central(
                &mut |v| {
                    let mut s = q.clone();
                    s.mean[i] = v;
                    bd(&p, &s)
                },
                q.mean[i],
            );
            worst.see(gm2[i], n, || format!("dμq[{i}]"))?;
            let n = central(
                &mut |v| {
                    let mut s = q.clone();
                    s.var[i] = v;
                    bd(&p, &s)
                },
                q.var[i],
            );
            worst.see(gv2[i], n, || format!("dσ²q[{i}]"))?;
        }

        let a: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 3, 1.0)).collect();
        let b: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3, 1.0)).collect();
        let (ga, gb) = alignment::grad::bd_euclidean(&a, &b, 1e-5, 1.0).unwrap();
        for r in 0..a.len() {
            for k in 0..3 {
                let n = central(
                    &mut |v| {
                        let mut s = a.clone();
                        s[r][k] = v;
                        alignment::bd_euclidean(&s, &b, 1e-5).unwrap()
                    },
                    a[r][k],
                );
                worst.see(ga[r][k], n, || format!("batch a[{r}][{k}]"))?;
            }
        }
        for r in 0..b.len() {
            for k in 0..3 {
                let n = central(
                    &mut |v| {
                        let mut s = b.clone();
                        s[r][k] = v;
                        alignment::bd_euclidean(&a, &s, 1e-5).unwrap()
                    },
                    b[r][k],
                );
                worst.see(gb[r][k], n, || format!("batch b[{r}][{k}]"))?;
            }
        }
    }
    Ok(worst.0)
}

fn batch(cfg: &ModelConfig, rng: &mut seeding::Rng) -> Vec<EmbeddingRecord> {
    (0..4)
        .map(|i| EmbeddingRecord {
            id: format!("r{i}"),
            e_w: random_vec(rng, cfg.d_w, 1.0),
            e_t: random_vec(rng, cfg.d_t, 1.0),
            label: if i % 2 == 0 { Label::Real } else { Label::Fake },
            codec_id: None,
            language: "lang0".into(),
            split: Split::Train,
        })
        .collect()
}

/// Every trainable element of `variant` at d = 4, two filters, batch 4.
pub fn variant_total_loss(variant: Variant) -> Check {
    let mut worst = Worst(0.0);
    let cfg = ModelConfig { variant, d_w: 6, d_t: 7, d: 4, conv_filters: 2, ..ModelConfig::default() };
    let prompt = PromptRegistry::default().resolve(&cfg.prompt_id, cfg.d).unwrap();
    let mut rng = seeding::rng(13);
    let records = batch(&cfg, &mut rng);
    let params = ModelParams::init(&cfg, 21).unwrap();
    let (_, grads) = model::forward_backward(&records, &params, &cfg, &prompt).unwrap();
    let total = |p: &ModelParams| model::forward(&records, p, &cfg, &prompt).unwrap().losses.total;

    let analytic: Vec<(String, Vec<f64>)> = grads.trainable().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
    if names != analytic.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        return Err(format!("{variant}: gradient tensors do not match trainable tensors"));
    }
    for (ti, (name, g)) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let mut probe = |v: f64| {
                let mut p = params.clone();
                p.trainable_mut()[ti].1.data[k] = v;
                total(&p)
            };
            let x = params.trainable()[ti].1.data[k];
            let numeric = central(&mut probe, x);
            worst.see(g[k], numeric, || format!("{variant} {name}[{k}]"))?;
        }
    }
    if !grads.frozen().iter().all(|(_, t)| t.data.iter().all(|&x| x == 0.0)) {
        return Err(format!("{variant}: frozen tensors received gradient"));
    }
    Ok(worst.0)
}
