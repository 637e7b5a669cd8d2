//! Forward pass, hand-written backward pass and prediction.

use rayon::prelude::*;

use super::{
    BranchParams, Fusion, ModelConfig, ModelError, ModelParams, ParamGrads, PromptSpec, Result, Tensor, CONV_WIDTH,
    FAKE_CLASS, REAL_CLASS,
};
use crate::alignment::{self, LossBreakdown};
use crate::dataio::{EmbeddingRecord, Label};
use crate::geometry::{self, BallConfig, BallPoint, TangentVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Semantic,
    Paralinguistic,
}

/// Everything the branch backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    pub input: Vec<f64>,
    /// Position of the maximum of each conv channel.
    pub argmax: Vec<usize>,
    pub pooled: Vec<f64>,
    pub projected: Vec<f64>,
    pub gate: Vec<f64>,
    pub output: Vec<f64>,
}

/// Per-record intermediates. Ball-valued fields are `None` for the
/// Euclidean variants.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTrace {
    pub semantic: Option<BranchTrace>,
    pub paralinguistic: Option<BranchTrace>,
    pub h_w: Option<BallPoint>,
    pub h_t: Option<BallPoint>,
    pub h_f: Option<BallPoint>,
    pub h_a: Option<BallPoint>,
    pub h_final: Option<BallPoint>,
    /// Stage-1 fused vector in the Euclidean variants.
    pub z_f: Option<Vec<f64>>,
    /// Input of the concatenation projection at stage 2.
    pub concat_in: Option<Vec<f64>>,
    pub u_final: Vec<f64>,
    pub g: Vec<f64>,
    pub logits: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `(Fake, Real)` logits per record.
    pub logits: Vec<[f64; 2]>,
    pub losses: LossBreakdown,
    pub traces: Vec<RecordTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Probability of Fake.
    pub score: f64,
    pub decision: Label,
}

impl Prediction {
    /// Ties go to Real.
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let score = softmax(logits)[FAKE_CLASS];
        let decision = if logits[FAKE_CLASS] > logits[REAL_CLASS] { Label::Fake } else { Label::Real };
        Self { score, decision }
    }
}

fn softmax(l: [f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

fn class_of(label: Label) -> usize {
    match label {
        Label::Fake => FAKE_CLASS,
        Label::Real => REAL_CLASS,
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = W x + b` for a row-major `W`.
fn affine(w: &Tensor, x: &[f64], b: Option<&Tensor>) -> Vec<f64> {
    let cols = w.cols();
    (0..w.rows())
        .map(|r| {
            let row = &w.data[r * cols..(r + 1) * cols];
            let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            s + b.map_or(0.0, |b| b.data[r])
        })
        .collect()
}

/// `Wᵀ g`.
fn affine_t(w: &Tensor, g: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    let mut out = vec![0.0; cols];
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&w.data[r * cols..(r + 1) * cols]) {
            *o += a * gr;
        }
    }
    out
}

/// `dW += g xᵀ`.
fn outer_acc(dw: &mut Tensor, g: &[f64], x: &[f64]) {
    let cols = dw.cols();
    for (r, gr) in g.iter().enumerate() {
        if *gr == 0.0 {
            continue;
        }
        for (d, xi) in dw.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *d += gr * xi;
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn branch_params(params: &ModelParams, branch: Branch) -> Result<&BranchParams> {
    let (p, name) = match branch {
        Branch::Semantic => (&params.semantic, "semantic"),
        Branch::Paralinguistic => (&params.paralinguistic, "paralinguistic"),
    };
    p.as_ref().ok_or_else(|| ModelError::Config(format!("variant has no {name} branch")))
}

fn run_branch(x: &[f64], p: &BranchParams) -> BranchTrace {
    let filters = p.conv_bias.len();
    let len = x.len();
    let mut argmax = Vec::with_capacity(filters);
    let mut pooled = Vec::with_capacity(filters);
    for k in 0..filters {
        let w = &p.conv_weight.data[k * CONV_WIDTH..(k + 1) * CONV_WIDTH];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for i in 0..len {
            let mut y = p.conv_bias.data[k];
            for (j, wj) in w.iter().enumerate() {
                if let Some(xi) = (i + j).checked_sub(1).and_then(|t| x.get(t)) {
                    y += wj * xi;
                }
            }
            if y > best {
                best = y;
                best_i = i;
            }
        }
        argmax.push(best_i);
        pooled.push(best);
    }
    let projected = affine(&p.proj_weight, &pooled, Some(&p.proj_bias));
    let gate: Vec<f64> = affine(&p.gate_weight, &projected, Some(&p.gate_bias)).into_iter().map(sigmoid).collect();
    let output = gate.iter().zip(&projected).map(|(s, z)| s * z).collect();
    BranchTrace { input: x.to_vec(), argmax, pooled, projected, gate, output }
}

fn branch_backward(t: &BranchTrace, p: &BranchParams, g_out: &[f64], grads: &mut BranchParams) {
    // output = σ ⊙ z with σ = sigmoid(G z + b)
    let g_pre: Vec<f64> = (0..g_out.len()).map(|i| g_out[i] * t.projected[i] * t.gate[i] * (1.0 - t.gate[i])).collect();
    let mut g_z: Vec<f64> = (0..g_out.len()).map(|i| g_out[i] * t.gate[i]).collect();
    add_into(&mut g_z, &affine_t(&p.gate_weight, &g_pre));
    outer_acc(&mut grads.gate_weight, &g_pre, &t.projected);
    add_into(&mut grads.gate_bias.data, &g_pre);

    outer_acc(&mut grads.proj_weight, &g_z, &t.pooled);
    add_into(&mut grads.proj_bias.data, &g_z);
    let g_pool = affine_t(&p.proj_weight, &g_z);

    for (k, (&i, gk)) in t.argmax.iter().zip(&g_pool).enumerate() {
        grads.conv_bias.data[k] += gk;
        for j in 0..CONV_WIDTH {
            if let Some(xi) = (i + j).checked_sub(1).and_then(|s| t.input.get(s)) {
                grads.conv_weight.data[k * CONV_WIDTH + j] += gk * xi;
            }
        }
    }
}

/// Gated CNN head of one view, producing a tangent vector of dim `d`.
pub fn encode_branch(e: &[f64], branch: Branch, params: &ModelParams, cfg: &ModelConfig) -> Result<TangentVector> {
    let expected = match branch {
        Branch::Semantic => cfg.d_w,
        Branch::Paralinguistic => cfg.d_t,
    };
    if e.len() != expected {
        return Err(ModelError::InvalidInput(format!("{branch:?} input has dim {}, expected {expected}", e.len())));
    }
    let p = branch_params(params, branch)?;
    Ok(TangentVector::new(run_branch(e, p).output)?)
}

fn check_record(r: &EmbeddingRecord, cfg: &ModelConfig) -> Result<()> {
    if r.e_w.len() != cfg.d_w || r.e_t.len() != cfg.d_t {
        return Err(ModelError::InvalidInput(format!(
            "record {} has dims ({}, {}), model expects ({}, {})",
            r.id,
            r.e_w.len(),
            r.e_t.len(),
            cfg.d_w,
            cfg.d_t
        )));
    }
    Ok(())
}

fn ball(v: Vec<f64>, ball: &BallConfig) -> Result<BallPoint> {
    Ok(geometry::exp_origin(&TangentVector::new(v)?, ball)?)
}

fn record_forward(r: &EmbeddingRecord, params: &ModelParams, cfg: &ModelConfig, e_a: &[f64]) -> Result<RecordTrace> {
    check_record(r, cfg)?;
    let bc = cfg.ball()?;
    let variant = cfg.variant;
    let semantic = params.semantic.as_ref().map(|p| run_branch(&r.e_w, p));
    let paralinguistic = params.paralinguistic.as_ref().map(|p| run_branch(&r.e_t, p));
    let mut t = RecordTrace {
        semantic,
        paralinguistic,
        h_w: None,
        h_t: None,
        h_f: None,
        h_a: None,
        h_final: None,
        z_f: None,
        concat_in: None,
        u_final: Vec::new(),
        g: Vec::new(),
        logits: [0.0; 2],
    };
    let ew = t.semantic.as_ref().map(|b| b.output.clone());
    let et = t.paralinguistic.as_ref().map(|b| b.output.clone());

    t.u_final = match variant.fusion() {
        Fusion::Mobius => {
            let h_w = ew.map(|v| ball(v, &bc)).transpose()?;
            let h_t = et.map(|v| ball(v, &bc)).transpose()?;
            let h_f = match (&h_w, &h_t) {
                (Some(a), Some(b)) => geometry::mobius_add(a, b, &bc)?,
                (Some(a), None) | (None, Some(a)) => a.clone(),
                (None, None) => return Err(ModelError::Config("variant has no branches".into())),
            };
            let h_a = ball(e_a.to_vec(), &bc)?;
            let h_final = geometry::mobius_add(&h_f, &h_a, &bc)?;
            let u = geometry::log_origin(&h_final, &bc)?.into_inner();
            t.h_w = h_w;
            t.h_t = h_t;
            t.h_f = Some(h_f);
            t.h_a = Some(h_a);
            t.h_final = Some(h_final);
            u
        }
        Fusion::Sum => {
            let (ew, et) = ew.zip(et).ok_or_else(|| ModelError::Config("sum fusion needs both branches".into()))?;
            let z_f: Vec<f64> = ew.iter().zip(&et).map(|(a, b)| a + b).collect();
            let u = z_f.iter().zip(e_a).map(|(a, b)| a + b).collect();
            t.z_f = Some(z_f);
            u
        }
        Fusion::Concat => {
            let (ew, et) = ew.zip(et).ok_or_else(|| ModelError::Config("concat fusion needs both branches".into()))?;
            let cp = params.concat.as_ref().ok_or_else(|| ModelError::Config("missing concat projections".into()))?;
            let stage1: Vec<f64> = ew.into_iter().chain(et).collect();
            let z_f = affine(&cp.speech, &stage1, None);
            let stage2: Vec<f64> = z_f.iter().chain(e_a).copied().collect();
            let u = affine(&cp.prompt, &stage2, None);
            t.z_f = Some(z_f);
            t.concat_in = Some(stage2);
            u
        }
    };
    t.g = affine(&params.prefix, &t.u_final, None);
    let l = affine(&params.decoder.weight, &t.g, Some(&params.decoder.bias));
    t.logits = [l[0], l[1]];
    if !t.logits.iter().all(|x| x.is_finite()) {
        return Err(ModelError::InvalidInput(format!("non-finite logits for record {}", r.id)));
    }
    Ok(t)
}

fn check_prompt(prompt: &PromptSpec, cfg: &ModelConfig) -> Result<()> {
    if prompt.embedding.len() != cfg.d {
        return Err(ModelError::InvalidInput(format!(
            "prompt embedding has dim {}, model expects {}",
            prompt.embedding.len(),
            cfg.d
        )));
    }
    Ok(())
}

fn logs(points: &[&BallPoint], bc: &BallConfig) -> Result<Vec<Vec<f64>>> {
    points.iter().map(|h| Ok(geometry::log_origin(h, bc)?.into_inner())).collect()
}

fn collect<'a>(traces: &'a [RecordTrace], f: impl Fn(&'a RecordTrace) -> Option<&'a BallPoint>) -> Vec<&'a BallPoint> {
    traces.iter().filter_map(f).collect()
}

fn outputs(traces: &[RecordTrace], f: impl Fn(&RecordTrace) -> Option<&BranchTrace>) -> Vec<Vec<f64>> {
    traces.iter().filter_map(|t| f(t).map(|b| b.output.clone())).collect()
}

fn alignment_losses(traces: &[RecordTrace], cfg: &ModelConfig, e_a: &[f64]) -> Result<(f64, f64)> {
    let bc = cfg.ball()?;
    let v = cfg.variant;
    let floor = cfg.var_floor;
    let (mut l_ss, mut l_st) = (0.0, 0.0);
    match v.fusion() {
        Fusion::Mobius => {
            if v.aligns_speech() {
                let a = logs(&collect(traces, |t| t.h_w.as_ref()), &bc)?;
                let b = logs(&collect(traces, |t| t.h_t.as_ref()), &bc)?;
                l_ss = alignment::bd_euclidean(&a, &b, floor)?;
            }
            if v.aligns_prompt() {
                let f = logs(&collect(traces, |t| t.h_f.as_ref()), &bc)?;
                let a = logs(&[traces[0].h_a.as_ref().expect("prompt point")], &bc)?;
                l_st = alignment::bd_euclidean(&f, &a, floor)?;
            }
        }
        Fusion::Sum => {
            if v.aligns_speech() {
                let a = outputs(traces, |t| t.semantic.as_ref());
                let b = outputs(traces, |t| t.paralinguistic.as_ref());
                l_ss = alignment::bd_euclidean(&a, &b, floor)?;
            }
            if v.aligns_prompt() {
                let f: Vec<Vec<f64>> = traces.iter().map(|t| t.z_f.clone().expect("fused vector")).collect();
                l_st = alignment::bd_euclidean(&f, &[e_a.to_vec()], floor)?;
            }
        }
        Fusion::Concat => {}
    }
    Ok((l_ss, l_st))
}

/// Runs the model on a batch and assembles the composite loss.
pub fn forward(
    batch: &[EmbeddingRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(ModelError::InvalidInput("empty batch".into()));
    }
    cfg.validate()?;
    check_prompt(prompt, cfg)?;
    let e_a = &prompt.embedding;
    let traces = batch.iter().map(|r| record_forward(r, params, cfg, e_a)).collect::<Result<Vec<_>>>()?;
    let (l_ss, l_st) = alignment_losses(&traces, cfg, e_a)?;
    let l_lm = batch
        .iter()
        .zip(&traces)
        .map(|(r, t)| {
            let l = t.logits;
            let m = l[0].max(l[1]);
            let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
            lse - l[class_of(r.label)]
        })
        .sum::<f64>()
        / batch.len() as f64;
    let losses = LossBreakdown::new(l_ss, l_st, l_lm, &cfg.weights());
    Ok(ForwardOutput { logits: traces.iter().map(|t| t.logits).collect(), losses, traces })
}

/// Gradients of the total loss of [`forward`] with respect to every
/// trainable tensor. The frozen decoder slots are left at zero.
pub fn backward(
    batch: &[EmbeddingRecord],
    out: &ForwardOutput,
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> Result<ParamGrads> {
    let bc = cfg.ball()?;
    let v = cfg.variant;
    let n = batch.len();
    let floor = cfg.var_floor;
    let traces = &out.traces;
    let mut grads = params.zeros_like();

    // upstream gradient on u_final from the decision loss
    let mut g_u: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (r, t) in batch.iter().zip(traces) {
        let p = softmax(t.logits);
        let mut g_l = [p[0], p[1]];
        g_l[class_of(r.label)] -= 1.0;
        let g_l: Vec<f64> = g_l.iter().map(|x| x * cfg.lambda3 / n as f64).collect();
        let g_g = affine_t(&params.decoder.weight, &g_l);
        outer_acc(&mut grads.prefix, &g_g, &t.u_final);
        g_u.push(affine_t(&params.prefix, &g_g));
    }

    let mut g_ew: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut g_et: Vec<Option<Vec<f64>>> = vec![None; n];

    match v.fusion() {
        Fusion::Mobius => {
            let mut g_hf = Vec::with_capacity(n);
            for (t, gu) in traces.iter().zip(&g_u) {
                let h_final = t.h_final.as_ref().expect("ball trace");
                let g_final = geometry::grad::log_origin(h_final.as_slice(), gu, &bc);
                let h_f = t.h_f.as_ref().expect("ball trace");
                let h_a = t.h_a.as_ref().expect("ball trace");
                let (gf, _) = geometry::grad::mobius_add(h_f.as_slice(), h_a.as_slice(), &g_final, &bc);
                g_hf.push(gf);
            }
            if v.aligns_prompt() && cfg.lambda2 != 0.0 {
                let hf = collect(traces, |t| t.h_f.as_ref());
                let f = logs(&hf, &bc)?;
                let a = logs(&[traces[0].h_a.as_ref().expect("prompt point")], &bc)?;
                let (gf, _) = alignment::grad::bd_euclidean(&f, &a, floor, cfg.lambda2)?;
                for ((acc, h), g) in g_hf.iter_mut().zip(&hf).zip(&gf) {
                    add_into(acc, &geometry::grad::log_origin(h.as_slice(), g, &bc));
                }
            }
            let mut g_hw: Vec<Option<Vec<f64>>> = vec![None; n];
            let mut g_ht: Vec<Option<Vec<f64>>> = vec![None; n];
            for (i, (t, gf)) in traces.iter().zip(g_hf).enumerate() {
                match (&t.h_w, &t.h_t) {
                    (Some(a), Some(b)) => {
                        let (ga, gb) = geometry::grad::mobius_add(a.as_slice(), b.as_slice(), &gf, &bc);
                        g_hw[i] = Some(ga);
                        g_ht[i] = Some(gb);
                    }
                    (Some(_), None) => g_hw[i] = Some(gf),
                    (None, Some(_)) => g_ht[i] = Some(gf),
                    (None, None) => unreachable!("checked in forward"),
                }
            }
            if v.aligns_speech() && cfg.lambda1 != 0.0 {
                let hw = collect(traces, |t| t.h_w.as_ref());
                let ht = collect(traces, |t| t.h_t.as_ref());
                let (ga, gb) = alignment::grad::bd_euclidean(&logs(&hw, &bc)?, &logs(&ht, &bc)?, floor, cfg.lambda1)?;
                for i in 0..n {
                    let w = geometry::grad::log_origin(hw[i].as_slice(), &ga[i], &bc);
                    add_into(g_hw[i].as_mut().expect("both branches"), &w);
                    let t = geometry::grad::log_origin(ht[i].as_slice(), &gb[i], &bc);
                    add_into(g_ht[i].as_mut().expect("both branches"), &t);
                }
            }
            for (i, t) in traces.iter().enumerate() {
                if let (Some(g), Some(b)) = (&g_hw[i], &t.semantic) {
                    g_ew[i] = Some(geometry::grad::exp_origin(&b.output, g, &bc));
                }
                if let (Some(g), Some(b)) = (&g_ht[i], &t.paralinguistic) {
                    g_et[i] = Some(geometry::grad::exp_origin(&b.output, g, &bc));
                }
            }
        }
        Fusion::Sum => {
            let mut g_zf = g_u;
            if v.aligns_prompt() && cfg.lambda2 != 0.0 {
                let f: Vec<Vec<f64>> = traces.iter().map(|t| t.z_f.clone().expect("fused vector")).collect();
                let (gf, _) =
                    alignment::grad::bd_euclidean(&f, std::slice::from_ref(&prompt.embedding), floor, cfg.lambda2)?;
                g_zf.iter_mut().zip(&gf).for_each(|(a, g)| add_into(a, g));
            }
            let mut gw = g_zf.clone();
            let mut gt = g_zf;
            if v.aligns_speech() && cfg.lambda1 != 0.0 {
                let a = outputs(traces, |t| t.semantic.as_ref());
                let b = outputs(traces, |t| t.paralinguistic.as_ref());
                let (ga, gb) = alignment::grad::bd_euclidean(&a, &b, floor, cfg.lambda1)?;
                gw.iter_mut().zip(&ga).for_each(|(a, g)| add_into(a, g));
                gt.iter_mut().zip(&gb).for_each(|(a, g)| add_into(a, g));
            }
            g_ew = gw.into_iter().map(Some).collect();
            g_et = gt.into_iter().map(Some).collect();
        }
        Fusion::Concat => {
            let cp = params.concat.as_ref().expect("concat params");
            let gcp = grads.concat.as_mut().expect("concat grads");
            let d = cfg.d;
            for (i, (t, gu)) in traces.iter().zip(&g_u).enumerate() {
                outer_acc(&mut gcp.prompt, gu, t.concat_in.as_ref().expect("concat trace"));
                let g_in = affine_t(&cp.prompt, gu);
                let g_zf = &g_in[..d];
                let stage1: Vec<f64> =
                    t.semantic.iter().chain(&t.paralinguistic).flat_map(|b| b.output.iter().copied()).collect();
                outer_acc(&mut gcp.speech, g_zf, &stage1);
                let g1 = affine_t(&cp.speech, g_zf);
                g_ew[i] = Some(g1[..d].to_vec());
                g_et[i] = Some(g1[d..].to_vec());
            }
        }
    }

    for (i, t) in traces.iter().enumerate() {
        if let (Some(g), Some(b), Some(p), Some(gp)) =
            (&g_ew[i], &t.semantic, &params.semantic, grads.semantic.as_mut())
        {
            branch_backward(b, p, g, gp);
        }
        if let (Some(g), Some(b), Some(p), Some(gp)) =
            (&g_et[i], &t.paralinguistic, &params.paralinguistic, grads.paralinguistic.as_mut())
        {
            branch_backward(b, p, g, gp);
        }
    }
    Ok(grads)
}

/// Forward pass followed by [`backward`].
pub fn forward_backward(
    batch: &[EmbeddingRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> Result<(ForwardOutput, ParamGrads)> {
    let out = forward(batch, params, cfg, prompt)?;
    let grads = backward(batch, &out, params, cfg, prompt)?;
    Ok((out, grads))
}

/// Scores one record. The logits of a record never depend on the rest of
/// its batch, so this agrees with [`predict_batch`].
pub fn predict(
    record: &EmbeddingRecord,
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> Result<Prediction> {
    check_prompt(prompt, cfg)?;
    let t = record_forward(record, params, cfg, &prompt.embedding)?;
    Ok(Prediction::from_logits(t.logits))
}

/// Scores records in parallel, preserving input order.
pub fn predict_batch(
    records: &[EmbeddingRecord],
    params: &ModelParams,
    cfg: &ModelConfig,
    prompt: &PromptSpec,
) -> Result<Vec<Prediction>> {
    check_prompt(prompt, cfg)?;
    records
        .par_iter()
        .map(|r| Ok(Prediction::from_logits(record_forward(r, params, cfg, &prompt.embedding)?.logits)))
        .collect()
}
