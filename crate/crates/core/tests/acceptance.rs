//! Exit criteria. Runs every check, prints one PASS/FAIL line per criterion
//! and exits non-zero if any failed.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cfdetect::alignment::{bd_euclidean, bd_hyperbolic, bhattacharyya_gaussian, GaussianStats};
use cfdetect::codecsim::{encode, synth_corpus, train_codebook, FrameSequence, SynthConfig};
use cfdetect::dataio::{Corpus, Label, Split};
use cfdetect::evalsuite::{self, compute_eer, mcnemar_counts};
use cfdetect::geometry::{exp_origin, log_origin, mobius_add, BallConfig, BallPoint, TangentVector};
use cfdetect::model::{ModelConfig, PromptRegistry, Variant};
use cfdetect::seeding;
use cfdetect::trainer::{self, TrainConfig};
use common::grad;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn gaussian(rng: &mut seeding::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn geometry_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = seeding::rng(101);
    let mut worst = 0.0f64;
    for c in [0.1, 0.5, 1.0] {
        let cfg = BallConfig::new(c).unwrap();
        for _ in 0..10_000 {
            // direction uniform on the sphere, √c‖u‖ uniform in [0, 5]
            let dim = rng.random_range(2..=16);
            let dir = gaussian(&mut rng, dim);
            let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = rng.random_range(0.0..5.0) / cfg.sqrt_c();
            let u: Vec<f64> = dir.iter().map(|x| x * r / n).collect();
            let back = log_origin(&exp_origin(&TangentVector::new(u.clone()).unwrap(), &cfg).unwrap(), &cfg).unwrap();
            for (a, b) in back.as_slice().iter().zip(&u) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("max |log(exp(u)) - u| = {worst:.2e} over 30000 vectors in {secs:.2}s");
    if worst < 1e-6 && secs < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn flat_limits() -> Outcome {
    let cfg = BallConfig::new(1e-8).unwrap();
    let mut rng = seeding::rng(102);
    let (mut mob, mut bd) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = mobius_add(&BallPoint::new(x.clone(), &cfg).unwrap(), &BallPoint::new(y.clone(), &cfg).unwrap(), &cfg)
            .unwrap();
        for ((a, b), v) in x.iter().zip(&y).zip(s.as_slice()) {
            mob = mob.max((a + b - v).abs());
        }

        let n = rng.random_range(2..10);
        let m = rng.random_range(2..10);
        let a: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..4).map(|_| rng.random_range(-0.5..1.5)).collect()).collect();
        let to_ball =
            |rows: &[Vec<f64>]| rows.iter().map(|r| BallPoint::new(r.clone(), &cfg).unwrap()).collect::<Vec<_>>();
        let h = bd_hyperbolic(&to_ball(&a), &to_ball(&b), &cfg, 1e-5).unwrap();
        let e = bd_euclidean(&a, &b, 1e-5).unwrap();
        bd = bd.max((h - e).abs());
    }
    let msg = format!("c = 1e-8: max Möbius deviation {mob:.2e}, max BD deviation {bd:.2e} over 1000 cases");
    if mob < 1e-5 && bd < 1e-5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_suite() -> Outcome {
    let mut parts = vec![
        format!("geometry {:.1e}", grad::geometry_primitives()?),
        format!("bhattacharyya {:.1e}", grad::bhattacharyya_primitives()?),
    ];
    for v in Variant::ALL {
        parts.push(format!("{v} {:.1e}", grad::variant_total_loss(v)?));
    }
    Ok(format!("worst rel err: {}", parts.join(", ")))
}

fn closed_forms() -> Outcome {
    let unit = |m: f64, v: f64| GaussianStats::new(vec![m], vec![v]).unwrap();
    let mean_case = bhattacharyya_gaussian(&unit(0.0, 1.0), &unit(2.0, 1.0)).unwrap();
    let var_case = bhattacharyya_gaussian(&unit(0.0, 1.0), &unit(0.0, 4.0)).unwrap();
    let var_expected = 0.5 * (2.5f64 / 2.0).ln();
    let cfg = BallConfig::new(1.0).unwrap();
    let m =
        mobius_add(&BallPoint::new(vec![0.3], &cfg).unwrap(), &BallPoint::new(vec![0.4], &cfg).unwrap(), &cfg).unwrap();
    let p = mcnemar_counts(10, 0).p_value;
    let msg = format!(
        "BD Δμ=2: {mean_case}, BD σ²=1 vs 4: {var_case:.6}, Möbius 0.3⊕0.4: {}, McNemar b=10 c=0: p={p:.6}",
        m.as_slice()[0]
    );
    let ok = (mean_case - 0.5).abs() < 1e-9
        && (var_case - var_expected).abs() < 1e-9
        && (var_case - 0.11157).abs() < 1e-5
        && (m.as_slice()[0] - 0.625).abs() < 1e-12
        && (p - 0.001953125).abs() < 1e-9;
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const GRID: usize = 1_000_000;

/// EER by counting on the full integer threshold grid `0..=GRID+1`.
fn brute_force_eer(scores: &[(usize, Label)]) -> f64 {
    let mut real_at = vec![0usize; GRID + 2];
    let mut fake_at = vec![0usize; GRID + 2];
    for &(s, l) in scores {
        match l {
            Label::Real => real_at[s] += 1,
            Label::Fake => fake_at[s] += 1,
        }
    }
    let nr = real_at.iter().sum::<usize>() as f64;
    let nf = fake_at.iter().sum::<usize>() as f64;
    // reals scored ≥ t and fakes scored < t, for t = 0, 1, ...
    let mut real_ge = nr as usize;
    let mut fake_lt = 0usize;
    let mut prev: Option<(f64, f64)> = None;
    for t in 0..=GRID + 1 {
        if t > 0 {
            real_ge -= real_at[t - 1];
            fake_lt += fake_at[t - 1];
        }
        let far = real_ge as f64 / nr;
        let frr = fake_lt as f64 / nf;
        let diff = far - frr;
        if diff <= 0.0 {
            return match prev {
                Some((pfar, pfrr)) if diff < 0.0 => {
                    let pdiff = pfar - pfrr;
                    let a = pdiff / (pdiff - diff);
                    100.0 * (pfar + a * (far - pfar))
                }
                _ => 100.0 * far,
            };
        }
        prev = Some((far, frr));
    }
    unreachable!()
}

fn eer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seeding::rng(103);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let n = rng.random_range(2..80);
        // narrow ranges force ties; wide ones exercise interpolation
        let span = if case % 4 == 0 { rng.random_range(2..30) } else { GRID };
        let shift = rng.random_range(0..=span / 2);
        let mut scores: Vec<(usize, Label)> = (0..n)
            .map(|_| {
                let fake = rng.random_bool(0.5);
                let s = rng.random_range(0..=span - shift) + if fake { shift } else { 0 };
                (s, if fake { Label::Fake } else { Label::Real })
            })
            .collect();
        scores[0].1 = Label::Real;
        scores[1].1 = Label::Fake;
        let as_f64: Vec<(f64, Label)> = scores.iter().map(|&(s, l)| (s as f64 / GRID as f64, l)).collect();
        let got = compute_eer(&as_f64).map_err(|e| e.to_string())?.eer;
        worst = worst.max((got - brute_force_eer(&scores)).abs());
    }

    let mut monotone = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..60);
        let mut scores: Vec<(f64, Label)> = (0..n)
            .map(|_| {
                let fake = rng.random_bool(0.5);
                (
                    rng.random_range(0.0..1.0) + if fake { 0.3 } else { 0.0 },
                    if fake { Label::Fake } else { Label::Real },
                )
            })
            .collect();
        scores[0].1 = Label::Real;
        scores[1].1 = Label::Fake;
        let base = compute_eer(&scores).unwrap().eer;
        let transforms: [fn(f64) -> f64; 4] =
            [|x| x.exp(), |x| 3.0 * x - 7.0, |x| x.powi(3) + x, |x| 1.0 / (1.0 + (-4.0 * x).exp())];
        for f in transforms {
            let mapped: Vec<(f64, Label)> = scores.iter().map(|&(s, l)| (f(s), l)).collect();
            monotone = monotone.max((compute_eer(&mapped).unwrap().eer - base).abs());
        }
    }
    let msg = format!(
        "1000 sets vs 10^6-threshold sweep: max |Δ| = {worst:.2e}; 100 sets under 4 monotone maps: max |Δ| = {monotone:.2e} ({:.1}s)",
        start.elapsed().as_secs_f64()
    );
    if worst < 1e-9 && monotone < 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rvq_oracle() -> Outcome {
    let mut rng = seeding::rng(104);
    let frames: Vec<Vec<f64>> = (0..1000).map(|_| gaussian(&mut rng, 24)).collect();
    let x = FrameSequence::from_frames(&frames).unwrap();
    let defaults = SynthConfig::default();
    let mut lines = Vec::new();
    for spec in defaults.seen_codecs.iter().chain(&defaults.unseen_codecs) {
        let cb =
            train_codebook(std::slice::from_ref(&x), &spec.id, spec.stages, spec.codewords, 10, spec.seed).unwrap();
        let codes = encode(&x, &cb).unwrap();
        let mut residual = frames.clone();
        let mut energy = vec![residual.iter().flatten().map(|v| v * v).sum::<f64>()];
        for s in 0..cb.stage_count() {
            for (t, r) in residual.iter_mut().enumerate() {
                // exhaustive scan for the nearest codeword; ties keep the lowest index
                let dist = |k: usize| cb.codeword(s, k).iter().zip(r.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..cb.codewords()).fold(0, |best, k| if dist(k) < dist(best) { k } else { best });
                if codes.frame_codes(t)[s] as usize != best {
                    return Err(format!(
                        "{}: frame {t} stage {s} encoded {} but nearest is {best}",
                        spec.id,
                        codes.frame_codes(t)[s]
                    ));
                }
                r.iter_mut().zip(cb.codeword(s, best)).for_each(|(a, b)| *a -= b);
            }
            energy.push(residual.iter().flatten().map(|v| v * v).sum());
        }
        if energy.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("{}: residual energy grew across stages {energy:?}", spec.id));
        }
        lines.push(format!("{} energy {:.0}→{:.0}", spec.id, energy[0], energy.last().unwrap()));
    }
    Ok(format!("encode = exhaustive NN on 1000 frames; {}", lines.join(", ")))
}

/// Logistic regression on standardised raw embeddings, full-batch gradient descent.
fn logistic_oracle(corpus: &Corpus) -> (f64, f64, f64) {
    let features = |r: &cfdetect::dataio::EmbeddingRecord| r.e_w.iter().chain(&r.e_t).copied().collect::<Vec<f64>>();
    let train: Vec<(Vec<f64>, f64)> = corpus
        .split_records(&[Split::Train])
        .iter()
        .map(|r| (features(r), if r.label == Label::Fake { 1.0 } else { 0.0 }))
        .collect();
    let dim = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| (train.iter().map(|(x, _)| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    let z = |x: &[f64]| x.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect::<Vec<f64>>();
    let xs: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (z(x), *y)).collect();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..300 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &xs {
            let p = 1.0 / (1.0 + (-(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())).exp());
            let e = p - y;
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += e * v);
            gb += e;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= 0.5 * (g / n + 1e-4 * *wi));
        b -= 0.5 * gb / n;
    }
    let score = |split: Split| {
        corpus
            .split_records(&[split])
            .iter()
            .map(|r| {
                let x = z(&features(r));
                let s = 1.0 / (1.0 + (-(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())).exp());
                (s, r.label)
            })
            .collect::<Vec<_>>()
    };
    let seen = score(Split::TestSeen);
    let acc = 100.0 * seen.iter().filter(|(s, l)| (*s > 0.5) == (*l == Label::Fake)).count() as f64 / seen.len() as f64;
    (acc, compute_eer(&seen).unwrap().eer, compute_eer(&score(Split::TestUnseen)).unwrap().eer)
}

struct DefaultCorpus {
    _dir: tempfile::TempDir,
    path: PathBuf,
    corpus: Corpus,
    synth_secs: f64,
}

fn default_corpus() -> DefaultCorpus {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus");
    let start = Instant::now();
    synth_corpus(&SynthConfig::default(), &path).unwrap();
    let synth_secs = start.elapsed().as_secs_f64();
    let corpus = Corpus::load(&path).unwrap();
    DefaultCorpus { _dir: dir, path, corpus, synth_secs }
}

fn end_to_end(data: &DefaultCorpus) -> Outcome {
    let (oacc, oseen, ounseen) = logistic_oracle(&data.corpus);
    println!(
        "      logistic oracle on raw embeddings: test_seen acc {oacc:.2} eer {oseen:.2}, test_unseen eer {ounseen:.2}"
    );
    let start = Instant::now();
    let mcfg = trainer::with_corpus_dims(&ModelConfig::default(), &data.corpus);
    let prompt = PromptRegistry::default().resolve(&mcfg.prompt_id, mcfg.d).unwrap();
    let (mut acc, mut seen, mut unseen) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let tcfg = TrainConfig { seed, ..TrainConfig::default() };
        let trained = trainer::train_corpus(&data.corpus, &mcfg, &tcfg, &prompt).map_err(|e| e.to_string())?;
        let (s, _) = evalsuite::evaluate(&trained.params, &mcfg, &prompt, &data.corpus, Split::TestSeen)
            .map_err(|e| e.to_string())?;
        let (u, _) = evalsuite::evaluate(&trained.params, &mcfg, &prompt, &data.corpus, Split::TestUnseen)
            .map_err(|e| e.to_string())?;
        println!("      satyam seed {seed}: test_seen acc {:.2} eer {:.2}, test_unseen eer {:.2}", s.acc, s.eer, u.eer);
        acc.push(s.acc);
        seen.push(s.eer);
        unseen.push(u.eer);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let secs = data.synth_secs + start.elapsed().as_secs_f64();
    let (acc, seen, unseen) = (mean(&acc), mean(&seen), mean(&unseen));
    let msg = format!(
        "satyam over 5 seeds: test_seen acc {acc:.2} (≥ 95) eer {seen:.2} (≤ 5), test_unseen eer {unseen:.2} (≤ 15); {secs:.0}s incl. synthesis"
    );
    let oracle_ok = oacc >= 95.0 && oseen <= 5.0 && ounseen <= 15.0;
    if acc >= 95.0 && seen <= 5.0 && unseen <= 15.0 && secs < 600.0 && oracle_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cli(root: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cfdetect"))
        .args(args)
        .current_dir(root)
        .env("ICF_THREADS", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("cfdetect {} exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)))
    }
}

fn ablation(data: &DefaultCorpus) -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let dest = out.path().join("ablation");
    let start = Instant::now();
    let stdout = cli(out.path(), &["ablate", "--data", data.path.to_str().unwrap(), "--out", dest.to_str().unwrap()])?;
    for line in stdout.lines() {
        println!("      {line}");
    }
    let sweep: serde_json::Value = serde_json::from_str(&fs::read_to_string(dest.join("sweep.json")).unwrap()).unwrap();
    let runs = sweep["runs"].as_array().unwrap().len();
    let expected = Variant::ALL.len() * 5;
    let eer = |v: &str| {
        sweep["summary"]
            .as_array()
            .unwrap()
            .iter()
            .find(|s| s["variant"] == v)
            .and_then(|s| s["seen_eer"]["mean"].as_f64())
    };
    let (satyam, concat) = (eer("satyam").unwrap(), eer("concat").unwrap());
    let msg = format!(
        "{runs}/{expected} runs from one ablate call in {:.0}s; mean test_seen EER satyam {satyam:.3} vs concat {concat:.3} (need satyam ≤ concat)",
        start.elapsed().as_secs_f64()
    );
    if runs == expected && satyam <= concat {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let set: Vec<String> = common::tiny_overrides();
    let set: Vec<&str> = set.iter().map(String::as_str).collect();
    let script: Vec<Vec<&str>> = vec![
            [&["synth", "--out", "data", "--seed", "5"][..], &set].concat(),
            [&["train", "--data", "data", "--out", "ck", "--seed", "7"][..], &set].concat(),
            vec![
                "eval",
                "--ckpt",
                "ck",
                "--data",
                "data",
                "--split",
                "test_unseen",
                "--report",
                "reports/unseen.json",
                "--predictions",
                "reports/unseen.jsonl",
            ],
            vec![
                "eval",
                "--ckpt",
                "ck",
                "--data",
                "data",
                "--split",
                "test_seen",
                "--report",
                "reports/seen.json",
                "--predictions",
                "reports/seen.jsonl",
            ],
            vec!["mcnemar", "--a", "reports/seen.jsonl", "--b", "reports/seen.jsonl", "--out", "reports/mcnemar.json"],
            [
                &["transfer", "--train-data", "data", "--test-data", "data", "--out", "transfer", "--seed", "3"][..],
                &set,
            ]
            .concat(),
            [
                &[
                    "ablate",
                    "--data",
                    "data",
                    "--out",
                    "ablation",
                    "--variants",
                    "satyam,e-bd,concat",
                    "--seeds",
                    "0,1",
                ][..],
                &set,
            ]
            .concat(),
        ];
    let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for root in &roots {
        for args in &script {
            cli(root.path(), args)?;
        }
    }
    let (a, b) = (tree_bytes(roots[0].path()), tree_bytes(roots[1].path()));
    let differing: Vec<String> =
        a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect();
    if differing.is_empty() {
        Ok(format!("{} subcommands run twice: {} output files byte-identical", script.len(), a.len()))
    } else {
        Err(format!("files differ between identical runs: {}", differing.join(", ")))
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(m) => println!("PASS  {name}: {m} [{secs:.1}s]"),
            Err(m) => {
                failed += 1;
                println!("FAIL  {name}: {m} [{secs:.1}s]");
            }
        }
    };
    let t = Instant::now();
    report("geometry round-trip", t, geometry_round_trip());
    let t = Instant::now();
    report("flat-space limits", t, flat_limits());
    let t = Instant::now();
    report("gradient suite", t, gradient_suite());
    let t = Instant::now();
    report("closed-form oracles", t, closed_forms());
    let t = Instant::now();
    report("EER oracle equivalence", t, eer_oracle());
    let t = Instant::now();
    report("RVQ oracle", t, rvq_oracle());
    let t = Instant::now();
    report("CLI determinism", t, determinism());
    let data = default_corpus();
    let t = Instant::now();
    report("end-to-end synthetic benchmark", t, end_to_end(&data));
    let t = Instant::now();
    report("ablation harness", t, ablation(&data));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
