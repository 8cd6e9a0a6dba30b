//! Fine-tuning a policy field against Q-annotated candidate actions.
//!
//! The policy `theta` starts as a copy of the frozen behavior field `phi`.
//! For one record the K candidates are perturbed to a shared time `t` with
//! independent noises, and the logits `beta * (f_theta - f_phi)` are trained
//! against a target simplex over the candidates: `softmax(Q)` for value
//! alignment, a one-hot vector at `argmax Q` for the preference loss.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{FieldInputs, ScalarField};
use crate::metrics::MetricsSink;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::sampler::{self, SamplerConfig};
use crate::schedule::DiffusionSchedule;
use crate::tape::Tape;

/// One state with K candidate actions and their Q-values.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRecord {
    pub state: Vec<f64>,
    /// `K x action_dim`.
    pub actions: Array2<f64>,
    pub q: Vec<f64>,
}

impl AlignmentRecord {
    pub fn new(state: Vec<f64>, actions: Array2<f64>, q: Vec<f64>) -> Result<Self> {
        let r = Self { state, actions, q };
        r.validate()?;
        Ok(r)
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.len() < 2 {
            return Err(Error::Config(format!("records need K >= 2, got {}", self.q.len())));
        }
        check_dim(self.q.len(), self.actions.nrows())?;
        if self.q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite Q-value in record".into()));
        }
        if self.actions.iter().chain(&self.state).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite action or state in record".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Value,
    Preference,
    Dpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub beta: f64,
    pub k: usize,
    pub mode: LossMode,
    pub learning_rate: f64,
    pub steps: usize,
    /// Records per gradient step.
    pub batch_records: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            k: 16,
            mode: LossMode::Value,
            learning_rate: 5e-5,
            steps: 20_000,
            batch_records: 16,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.k)));
        }
        if self.mode == LossMode::Dpo && self.k != 2 {
            return Err(Error::Config(format!("dpo mode requires K = 2, got {}", self.k)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_records == 0 {
            return Err(Error::Config("batch_records must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `k` behavior samples per state row. Q is attached separately by
/// [`annotate`], so the candidates never depend on the critic.
pub fn sample_candidates(
    phi: &ScalarField,
    states: ArrayView2<f64>,
    k: usize,
    sampler_config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<(Vec<f64>, Array2<f64>)>> {
    if k < 2 {
        return Err(Error::Config(format!("K must be >= 2, got {k}")));
    }
    const STATES_PER_CHUNK: usize = 256;
    let d = phi.config().action_dim;
    let mut out = Vec::with_capacity(states.nrows());
    for start in (0..states.nrows()).step_by(STATES_PER_CHUNK) {
        let end = (start + STATES_PER_CHUNK).min(states.nrows());
        let mut expanded = Array2::zeros(((end - start) * k, states.ncols()));
        for i in start..end {
            for c in 0..k {
                expanded.row_mut((i - start) * k + c).assign(&states.row(i));
            }
        }
        let cands = sampler::sample_batch(phi, expanded.view(), sampler_config, schedule, rng)
            .map_err(|e| match e {
                Error::Sampler { step, reason } => Error::Sampler {
                    step,
                    reason: format!("states {start}..{end}: {reason}"),
                },
                other => other,
            })?;
        for i in start..end {
            let rows = cands.slice(ndarray::s![(i - start) * k..(i - start + 1) * k, ..]);
            debug_assert_eq!(rows.ncols(), d);
            out.push((states.row(i).to_vec(), rows.to_owned()));
        }
    }
    Ok(out)
}

pub fn annotate<F>(candidates: Vec<(Vec<f64>, Array2<f64>)>, q_fn: F) -> Result<Vec<AlignmentRecord>>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    candidates
        .into_iter()
        .map(|(s, actions)| {
            let q = actions
                .rows()
                .into_iter()
                .map(|a| q_fn(&s, &a.to_vec()))
                .collect();
            AlignmentRecord::new(s, actions, q)
        })
        .collect()
}

/// `K` behavior candidates per state, each annotated with `q_fn(s, a)`.
pub fn build_alignment_dataset<F>(
    phi: &ScalarField,
    states: ArrayView2<f64>,
    q_fn: F,
    k: usize,
    sampler_config: &SamplerConfig,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Vec<AlignmentRecord>>
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let cands = sample_candidates(phi, states, k, sampler_config, schedule, rng)?;
    annotate(cands, q_fn)
}

/// `softmax(Q)` with max subtraction.
pub fn optimality_probability(q: &[f64]) -> Result<Vec<f64>> {
    if q.is_empty() {
        return Err(Error::Input("empty Q vector".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite Q-value".into()));
    }
    Ok(softmax(q))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Loss of one record from its logits `z = beta * (f_theta - f_phi)`, and `dL/dz`.
pub fn record_loss(z: &[f64], q: &[f64], mode: LossMode) -> (f64, Vec<f64>) {
    if mode == LossMode::Dpo {
        let w = argmax_first(q);
        let l = 1 - w;
        let x = z[w] - z[l];
        // d softplus(-x) / dx = -sigmoid(-x)
        let g = -crate::tape::sigmoid(-x);
        let mut dz = vec![0.0; 2];
        dz[w] = g;
        dz[l] = -g;
        return (softplus(-x), dz);
    }
    let p = match mode {
        LossMode::Value => softmax(q),
        _ => {
            let mut p = vec![0.0; q.len()];
            p[argmax_first(q)] = 1.0;
            p
        }
    };
    let lse = log_sum_exp(z);
    let loss = p.iter().zip(z).map(|(pk, zk)| -pk * (zk - lse)).sum::<f64>();
    let phat = softmax(z);
    (loss, phat.iter().zip(&p).map(|(a, b)| a - b).collect())
}

/// Noisy candidates of one record at a fixed time.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub t: f64,
    /// `K x action_dim` standard-normal draws.
    pub noise: Array2<f64>,
}

impl Perturbation {
    /// One shared `t ~ U[t_min, 1]` and K independent noises.
    pub fn draw(record: &AlignmentRecord, schedule: &DiffusionSchedule, rng: &mut Rng) -> Self {
        let t = schedule.sample_time(rng);
        let (k, d) = record.actions.dim();
        let noise = Array2::from_shape_vec((k, d), rng::normal_vec(rng, k * d)).unwrap();
        Self { t, noise }
    }
}

/// Loss value, theta-gradients and the mean of `beta * (f_theta - f_phi)`.
#[derive(Debug, Clone)]
pub struct AlignLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub mean_implied_q: f64,
}

/// Mean alignment loss over `records` at fixed perturbations, exact theta-gradients.
pub fn align_loss_at(
    theta: &ScalarField,
    phi: &ScalarField,
    records: &[&AlignmentRecord],
    perturbations: &[Perturbation],
    beta: f64,
    mode: LossMode,
    schedule: &DiffusionSchedule,
) -> Result<AlignLoss> {
    if records.is_empty() {
        return Err(Error::Input("no alignment records".into()));
    }
    if theta.config() != phi.config() {
        return Err(Error::CheckpointMismatch(
            "policy and behavior architectures differ".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    check_dim(records.len(), perturbations.len())?;
    let cfg = theta.config();
    let rows: usize = records.iter().map(|r| r.k()).sum();
    let mut noisy = Array2::zeros((rows, cfg.action_dim));
    let mut states = Array2::zeros((rows, cfg.state_dim));
    let mut ts = Vec::with_capacity(rows);
    let mut offset = 0;
    for (rec, pert) in records.iter().zip(perturbations) {
        rec.validate()?;
        if mode == LossMode::Dpo && rec.k() != 2 {
            return Err(Error::Config(format!("dpo loss requires K = 2, got {}", rec.k())));
        }
        check_dim(cfg.state_dim, rec.state.len())?;
        check_dim(rec.actions.nrows(), pert.noise.nrows())?;
        check_dim(rec.actions.ncols(), pert.noise.ncols())?;
        let (alpha, sigma) = schedule.alpha_sigma(pert.t)?;
        for k in 0..rec.k() {
            for d in 0..cfg.action_dim {
                noisy[[offset + k, d]] = alpha * rec.actions[[k, d]] + sigma * pert.noise[[k, d]];
            }
            for (j, s) in rec.state.iter().enumerate() {
                states[[offset + k, j]] = *s;
            }
            ts.push(pert.t);
        }
        offset += rec.k();
    }

    let f_phi = phi.forward_batch(noisy.view(), states.view(), &ts)?;
    let inputs = FieldInputs::new(cfg, noisy.view(), states.view(), &ts)?;
    let mut tape = Tape::new();
    let graph = theta.graph(&mut tape, &inputs, None);
    let f_theta = tape.value(graph.output).column(0).to_vec();

    // Loss and dL/dlogits per record, outside the tape.
    let n_rec = records.len() as f64;
    let mut loss = 0.0;
    let mut seed = Array2::zeros((rows, 1));
    let mut sum_q = 0.0;
    let mut offset = 0;
    for rec in records {
        let k = rec.k();
        let z: Vec<f64> = (offset..offset + k)
            .map(|i| beta * (f_theta[i] - f_phi[i]))
            .collect();
        sum_q += z.iter().sum::<f64>();
        let (l, dz) = record_loss(&z, &rec.q, mode);
        loss += l;
        for (j, g) in dz.into_iter().enumerate() {
            seed[[offset + j, 0]] = beta * g / n_rec;
        }
        offset += k;
    }
    let seed = tape.leaf(seed);
    let grads = tape.grad_seeded(graph.output, seed, &graph.params);
    Ok(AlignLoss {
        loss: loss / n_rec,
        grads: theta.flatten_grads(&tape, &grads),
        mean_implied_q: sum_q / rows as f64,
    })
}

fn single(
    theta: &ScalarField,
    phi: &ScalarField,
    record: &AlignmentRecord,
    beta: f64,
    mode: LossMode,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    record.validate()?;
    let p = Perturbation::draw(record, schedule, rng);
    let out = align_loss_at(theta, phi, &[record], &[p], beta, mode, schedule)?;
    Ok((out.loss, out.grads))
}

/// Cross-entropy between `softmax(Q)` and `softmax(beta * (f_theta - f_phi))`.
pub fn value_align_loss(
    theta: &ScalarField,
    phi: &ScalarField,
    record: &AlignmentRecord,
    beta: f64,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    single(theta, phi, record, beta, LossMode::Value, schedule, rng)
}

/// `-log p_hat_w` with `w = argmax Q` (lowest index on ties).
pub fn preference_loss(
    theta: &ScalarField,
    phi: &ScalarField,
    record: &AlignmentRecord,
    beta: f64,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    single(theta, phi, record, beta, LossMode::Preference, schedule, rng)
}

/// Pairwise `-log sigmoid(beta * (df_w - df_l))`; records must have K = 2.
pub fn dpo_loss(
    theta: &ScalarField,
    phi: &ScalarField,
    record: &AlignmentRecord,
    beta: f64,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    single(theta, phi, record, beta, LossMode::Dpo, schedule, rng)
}

/// `beta * (f_theta - f_phi)`, a Q estimate up to a per-(s, t) constant.
pub fn implied_q(
    theta: &ScalarField,
    phi: &ScalarField,
    s: &[f64],
    a_t: &[f64],
    t: f64,
    beta: f64,
) -> Result<f64> {
    Ok(beta * (theta.forward(a_t, s, t)? - phi.forward(a_t, s, t)?))
}

pub fn implied_q_batch(
    theta: &ScalarField,
    phi: &ScalarField,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    t: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let ts = vec![t; actions.nrows()];
    let a = theta.forward_batch(actions, states, &ts)?;
    let b = phi.forward_batch(actions, states, &ts)?;
    Ok(a.iter().zip(&b).map(|(x, y)| beta * (x - y)).collect())
}

/// Trains `theta` from a copy of `phi`; `phi` is only read.
pub fn finetune_run(
    phi: &ScalarField,
    records: &[AlignmentRecord],
    config: &AlignConfig,
    schedule: &DiffusionSchedule,
    sink: &mut dyn MetricsSink,
) -> Result<ScalarField> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::Input("alignment dataset is empty".into()));
    }
    for r in records {
        r.validate()?;
    }
    let mut theta = phi.clone();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        theta.num_params(),
    );
    let mut rng = rng::substream(config.seed, "finetune");
    for step in 0..config.steps {
        let batch: Vec<&AlignmentRecord> = (0..config.batch_records)
            .map(|_| &records[rng::index(&mut rng, records.len())])
            .collect();
        let perts: Vec<Perturbation> = batch
            .iter()
            .map(|r| Perturbation::draw(r, schedule, &mut rng))
            .collect();
        let out = align_loss_at(&theta, phi, &batch, &perts, config.beta, config.mode, schedule)?;
        if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("loss = {}", out.loss),
            });
        }
        adam.step(theta.params_mut(), &out.grads);
        sink.record(step, &[out.loss, out.mean_implied_q]);
    }
    Ok(theta)
}

/// Deterministic subset of `ceil(fraction * n)` records, in original order.
pub fn subsample(records: &[AlignmentRecord], fraction: f64, seed: u64) -> Result<Vec<AlignmentRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n = records.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut rng = rng::substream(seed, "subsample");
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| records[i].clone()).collect())
}

fn csv_header(m: usize, n: usize) -> Vec<String> {
    let mut h = vec!["record".to_string()];
    h.extend((0..m).map(|j| format!("s{j}")));
    h.push("k".into());
    h.extend((0..n).map(|j| format!("a{j}")));
    h.push("q".into());
    h
}

/// CSV with columns `record,s0..,k,a0..,q`, K rows per record.
pub fn write_records<W: Write>(records: &[AlignmentRecord], out: W) -> Result<()> {
    let (m, n) = match records.first() {
        Some(r) => (r.state.len(), r.actions.ncols()),
        None => (0, 0),
    };
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Input(format!("csv write: {e}"));
    w.write_record(csv_header(m, n)).map_err(io)?;
    for (id, r) in records.iter().enumerate() {
        check_dim(m, r.state.len())?;
        check_dim(n, r.actions.ncols())?;
        for k in 0..r.k() {
            let mut row = vec![id.to_string()];
            row.extend(r.state.iter().map(|v| format!("{v:?}")));
            row.push(k.to_string());
            row.extend(r.actions.row(k).iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", r.q[k]));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Input(format!("csv write: {e}")))?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<AlignmentRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| Error::Input(format!("csv header: {e}")))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    let k_pos = cols
        .iter()
        .position(|c| *c == "k")
        .ok_or_else(|| Error::Input("alignment csv lacks a `k` column".into()))?;
    let (m, n) = (k_pos - 1, cols.len() - k_pos - 2);
    if cols.len() < 4 || cols[0] != "record" || cols[cols.len() - 1] != "q" || n == 0 {
        return Err(Error::Input(format!("unexpected alignment csv header: {cols:?}")));
    }
    if cols != csv_header(m, n) {
        return Err(Error::Input(format!("unexpected alignment csv header: {cols:?}")));
    }
    let parse = |s: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Input(format!("line {line}: bad number {s:?}")))
    };
    let mut out: Vec<AlignmentRecord> = Vec::new();
    let mut current: Option<(String, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> = None;
    let flush = |cur: Option<(String, Vec<f64>, Vec<Vec<f64>>, Vec<f64>)>,
                 out: &mut Vec<AlignmentRecord>|
     -> Result<()> {
        if let Some((_, s, acts, q)) = cur {
            let k = acts.len();
            let flat: Vec<f64> = acts.into_iter().flatten().collect();
            let actions = Array2::from_shape_vec((k, n), flat).unwrap();
            out.push(AlignmentRecord::new(s, actions, q)?);
        }
        Ok(())
    };
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Input(format!("line {line}: {e}")))?;
        if row.len() != cols.len() {
            return Err(Error::Input(format!("line {line}: expected {} fields", cols.len())));
        }
        let id = row[0].to_string();
        let state: Vec<f64> = (1..=m).map(|j| parse(&row[j], line)).collect::<Result<_>>()?;
        let k: usize = row[k_pos]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("line {line}: bad candidate index")))?;
        let action: Vec<f64> = (0..n)
            .map(|j| parse(&row[k_pos + 1 + j], line))
            .collect::<Result<_>>()?;
        let q = parse(&row[cols.len() - 1], line)?;
        let same = matches!(&current, Some((cid, ..)) if *cid == id);
        if !same {
            flush(current.take(), &mut out)?;
            current = Some((id, state.clone(), Vec::new(), Vec::new()));
        }
        let cur = current.as_mut().unwrap();
        if k != cur.2.len() {
            return Err(Error::Input(format!("line {line}: candidate index {k} out of order")));
        }
        if cur.1 != state {
            return Err(Error::Input(format!("line {line}: state changes within record")));
        }
        cur.2.push(action);
        cur.3.push(q);
    }
    flush(current, &mut out)?;
    Ok(out)
}

pub fn write_records_file(records: &[AlignmentRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(records, std::io::BufWriter::new(f))
}

pub fn read_records_file(path: &Path) -> Result<Vec<AlignmentRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(f))
}
