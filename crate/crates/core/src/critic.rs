//! Q-value sources: analytic 2D fields and an expectile-regression critic.
//!
//! In a one-step bandit the implicit Q-learning annotator reduces to fitting
//! `Q(s, a)` by expectile regression on observed rewards,
//! `L = E |tau - 1(r - Q < 0)| (r - Q)^2`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::envs2d::QField;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::metrics::MetricsSink;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            steps: 5_000,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("critic needs positive width and depth".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Plain SiLU MLP `(s, a) -> Q`. Parameters are stored layer by layer as
/// `W (in x out)` followed by `b (1 x out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    params: Vec<f64>,
}

impl Critic {
    fn shapes(state_dim: usize, action_dim: usize, hidden: usize, layers: usize) -> Vec<(usize, usize)> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend(std::iter::repeat_n(hidden, layers));
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn init(state_dim: usize, action_dim: usize, hidden: usize, layers: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || layers == 0 || action_dim == 0 {
            return Err(Error::Config("critic needs positive dimensions".into()));
        }
        let mut rng = rng::seeded(seed);
        let mut params = Vec::new();
        for (i, o) in Self::shapes(state_dim, action_dim, hidden, layers) {
            let std = (i as f64).powf(-0.5);
            params.extend((0..i * o).map(|_| std * rng::normal(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Ok(Self {
            state_dim,
            action_dim,
            hidden,
            layers,
            params,
        })
    }

    pub fn from_parts(state_dim: usize, action_dim: usize, hidden: usize, layers: usize, params: Vec<f64>) -> Result<Self> {
        let c = Self::init(state_dim, action_dim, hidden, layers, 0)?;
        check_dim(c.params.len(), params.len())?;
        check_finite(&params, "critic parameters")?;
        Ok(Self { params, ..c })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Records the network; returns `(parameter leaves, n x 1 output)`.
    fn graph(&self, tape: &mut Tape, inputs: Array2<f64>) -> (Vec<Var>, Var) {
        let shapes = Self::shapes(self.state_dim, self.action_dim, self.hidden, self.layers);
        let mut leaves = Vec::new();
        let mut h = tape.leaf(inputs);
        let mut off = 0;
        for (l, &(i, o)) in shapes.iter().enumerate() {
            let w = Array2::from_shape_vec((i, o), self.params[off..off + i * o].to_vec()).unwrap();
            off += i * o;
            let b = Array2::from_shape_vec((1, o), self.params[off..off + o].to_vec()).unwrap();
            off += o;
            let (w, b) = (tape.leaf(w), tape.leaf(b));
            leaves.push(w);
            leaves.push(b);
            let z = tape.matmul(h, w);
            h = tape.add_row(z, b);
            if l + 1 < shapes.len() {
                h = tape.silu(h);
            }
        }
        (leaves, h)
    }

    fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
        if states.ncols() != self.state_dim || actions.ncols() != self.action_dim {
            return Err(Error::Input(format!(
                "critic expects state/action dims {}/{}, got {}/{}",
                self.state_dim,
                self.action_dim,
                states.ncols(),
                actions.ncols()
            )));
        }
        check_dim(states.nrows(), actions.nrows())?;
        let n = actions.nrows();
        let mut x = Array2::zeros((n, self.state_dim + self.action_dim));
        x.slice_mut(ndarray::s![.., ..self.state_dim]).assign(&states);
        x.slice_mut(ndarray::s![.., self.state_dim..]).assign(&actions);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite critic input".into()));
        }
        Ok(x)
    }

    pub fn eval_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let x = self.inputs(states, actions)?;
        let mut tape = Tape::new();
        let (_, out) = self.graph(&mut tape, x);
        Ok(tape.value(out).column(0).to_vec())
    }
}

/// Rewards observed for `(s, a)` pairs in a bandit.
#[derive(Debug, Clone)]
pub struct RewardData {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
}

impl RewardData {
    pub fn new(states: Array2<f64>, actions: Array2<f64>, rewards: Vec<f64>) -> Result<Self> {
        check_dim(actions.nrows(), states.nrows())?;
        check_dim(actions.nrows(), rewards.len())?;
        check_finite(&rewards, "rewards")?;
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Mean expectile loss and its parameter gradients. The asymmetric weights
/// are evaluated at the current residuals and held constant.
pub fn expectile_loss(
    critic: &Critic,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    rewards: &[f64],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let x = critic.inputs(states, actions)?;
    check_dim(x.nrows(), n)?;
    let mut tape = Tape::new();
    let (leaves, q) = critic.graph(&mut tape, x);
    let r = tape.leaf(Array2::from_shape_vec((n, 1), rewards.to_vec()).unwrap());
    let diff = tape.sub(r, q);
    let weights = tape
        .value(diff)
        .mapv(|u| if u < 0.0 { 1.0 - tau } else { tau });
    let w = tape.leaf(weights);
    let sq = tape.mul(diff, diff);
    let wsq = tape.mul(w, sq);
    let sum = tape.sum_all(wsq);
    let loss = tape.scale(sum, 1.0 / n as f64);
    let grads = tape.grad(loss, &leaves);
    let flat = grads.iter().flat_map(|g| tape.value(*g).iter().copied().collect::<Vec<_>>()).collect();
    Ok((tape.scalar(loss), flat))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("expectile tau must lie in (0, 1), got {tau}")));
    }
    Ok(())
}

pub fn train_expectile_critic(
    data: &RewardData,
    tau: f64,
    config: &CriticConfig,
    sink: &mut dyn MetricsSink,
) -> Result<QSource> {
    check_tau(tau)?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("reward dataset is empty".into()));
    }
    let init_seed = rand::Rng::random(&mut rng::substream(config.seed, "init"));
    let mut critic = Critic::init(
        data.states.ncols(),
        data.actions.ncols(),
        config.hidden,
        config.layers,
        init_seed,
    )?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        critic.params.len(),
    );
    let mut rng: Rng = rng::substream(config.seed, "critic");
    let b = config.batch_size;
    let mut s = Array2::zeros((b, data.states.ncols()));
    let mut a = Array2::zeros((b, data.actions.ncols()));
    let mut r = vec![0.0; b];
    for step in 0..config.steps {
        for row in 0..b {
            let i = rng::index(&mut rng, data.len());
            s.row_mut(row).assign(&data.states.row(i));
            a.row_mut(row).assign(&data.actions.row(i));
            r[row] = data.rewards[i];
        }
        let (loss, grads) = expectile_loss(&critic, s.view(), a.view(), &r, tau)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss = {loss}"),
            });
        }
        adam.step(&mut critic.params, &grads);
        sink.record(step, &[loss]);
    }
    Ok(QSource::Learned(critic))
}

/// Where Q-values come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum QSource {
    Analytic(QField),
    Learned(Critic),
}

impl QSource {
    pub fn state_dim(&self) -> usize {
        match self {
            QSource::Analytic(_) => 0,
            QSource::Learned(c) => c.state_dim,
        }
    }

    pub fn eval_batch(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        match self {
            QSource::Analytic(f) => {
                if actions.ncols() != 2 || states.ncols() != 0 {
                    return Err(Error::Input(format!(
                        "analytic 2D field expects a stateless 2D action, got {}/{}",
                        states.ncols(),
                        actions.ncols()
                    )));
                }
                Ok(actions.rows().into_iter().map(|a| f.eval([a[0], a[1]])).collect())
            }
            QSource::Learned(c) => c.eval_batch(states, actions),
        }
    }
}

pub fn q_eval(source: &QSource, s: &[f64], a: &[f64]) -> Result<f64> {
    let st = ArrayView2::from_shape((1, s.len()), s).unwrap();
    let ac = ArrayView2::from_shape((1, a.len()), a).unwrap();
    Ok(source.eval_batch(st, ac)?[0])
}
