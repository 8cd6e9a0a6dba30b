//! Behavior pretraining with the bottleneck score-matching loss
//! `E || sigma_t * grad_a f(a_t | s, t) + eps ||^2`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::BehaviorDataset;
use crate::error::{check_dim, Error, Result};
use crate::field::{Dropout, FieldConfig, FieldInputs, ScalarField};
use crate::metrics::MetricsSink;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::schedule::DiffusionSchedule;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Dropout on residual-block inputs; pretraining only.
    pub dropout: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 100_000,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            dropout: 0.0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Score-matching loss at fixed times and noises, with exact parameter gradients.
///
/// `noises` holds one standard-normal row per action row.
pub fn bdm_loss_at(
    field: &ScalarField,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    ts: &[f64],
    noises: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<f64>)> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    check_dim(n, ts.len())?;
    check_dim(n, noises.nrows())?;
    check_dim(actions.ncols(), noises.ncols())?;

    let mut noisy = Array2::zeros(actions.raw_dim());
    let mut sigmas = Array2::zeros((n, 1));
    for i in 0..n {
        let (alpha, sigma) = schedule.alpha_sigma(ts[i])?;
        sigmas[[i, 0]] = sigma;
        for d in 0..actions.ncols() {
            noisy[[i, d]] = alpha * actions[[i, d]] + sigma * noises[[i, d]];
        }
    }
    let inputs = FieldInputs::new(field.config(), noisy.view(), states, ts)?;

    let mut tape = Tape::new();
    let graph = field.graph(&mut tape, &inputs, dropout);
    let total = tape.sum_all(graph.output);
    let grad_a = tape.grad(total, &[graph.action])[0];
    let sig = tape.leaf(sigmas);
    let eps = tape.leaf(noises.to_owned());
    let pred = tape.mul_col(grad_a, sig);
    let resid = tape.add(pred, eps);
    let sq = tape.mul(resid, resid);
    let sum = tape.sum_all(sq);
    let loss = tape.scale(sum, 1.0 / n as f64);
    let grads = tape.grad(loss, &graph.params);
    Ok((tape.scalar(loss), field.flatten_grads(&tape, &grads)))
}

/// Monte-Carlo score-matching loss: one independent `t ~ U[t_min, 1]` and
/// `eps ~ N(0, I)` per row.
pub fn bdm_loss(
    field: &ScalarField,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    bdm_loss_with_dropout(field, states, actions, schedule, rng, 0.0)
}

fn bdm_loss_with_dropout(
    field: &ScalarField,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    schedule: &DiffusionSchedule,
    rng: &mut Rng,
    dropout: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = actions.nrows();
    if n == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let ts: Vec<f64> = (0..n).map(|_| schedule.sample_time(rng)).collect();
    let noises = Array2::from_shape_vec(
        actions.raw_dim(),
        rng::normal_vec(rng, n * actions.ncols()),
    )
    .unwrap();
    let drop = (dropout > 0.0).then(|| Dropout { rate: dropout, rng });
    bdm_loss_at(field, states, actions, &ts, noises.view(), schedule, drop)
}

/// Fits `phi` to the behavior data. Initialization and minibatches are drawn
/// from substreams of `config.seed`; the run is bit-reproducible.
pub fn pretrain_run(
    dataset: &BehaviorDataset,
    field_config: &FieldConfig,
    config: &TrainConfig,
    schedule: &DiffusionSchedule,
    sink: &mut dyn MetricsSink,
) -> Result<ScalarField> {
    config.validate()?;
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("behavior dataset is empty".into()));
    }
    check_dim(field_config.action_dim, dataset.action_dim())?;
    check_dim(field_config.state_dim, dataset.state_dim())?;

    let init_seed = rand::Rng::random(&mut rng::substream(config.seed, "init"));
    let mut field = ScalarField::init(field_config.clone(), init_seed)?;
    let mut rng = rng::substream(config.seed, "pretrain");
    let mut adam = Adam::new(config.adam(), field.num_params());

    let (m, d) = (dataset.state_dim(), dataset.action_dim());
    let b = config.batch_size;
    let mut states = Array2::zeros((b, m));
    let mut actions = Array2::zeros((b, d));
    for step in 0..config.steps {
        for row in 0..b {
            let i = rng::index(&mut rng, dataset.len());
            states.row_mut(row).assign(&dataset.states().row(i));
            actions.row_mut(row).assign(&dataset.actions().row(i));
        }
        let (loss, grads) = bdm_loss_with_dropout(
            &field,
            states.view(),
            actions.view(),
            schedule,
            &mut rng,
            config.dropout,
        )?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("loss = {loss}"),
            });
        }
        if config.cosine_decay {
            let frac = step as f64 / config.steps as f64;
            adam.set_learning_rate(0.5 * config.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos()));
        }
        adam.step(field.params_mut(), &grads);
        sink.record(step, &[loss]);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::NullSink;
    use ndarray::array;

    fn tiny() -> FieldConfig {
        FieldConfig {
            action_dim: 2,
            state_dim: 0,
            hidden: 8,
            blocks: 1,
            time_embed_dim: 4,
            layer_norm: true,
        }
    }

    #[test]
    fn empty_batch_is_an_input_error() {
        let f = ScalarField::init(tiny(), 0).unwrap();
        let s = DiffusionSchedule::default();
        let e = Array2::<f64>::zeros((0, 2));
        let st = Array2::<f64>::zeros((0, 0));
        let mut r = rng::seeded(0);
        assert!(matches!(bdm_loss(&f, st.view(), e.view(), &s, &mut r), Err(Error::Input(_))));
    }

    #[test]
    fn planted_linear_field_has_zero_loss() {
        // f(a) = w . a with hidden=1, no blocks, huge positive bias (silu ~ identity).
        let cfg = FieldConfig {
            action_dim: 2,
            state_dim: 0,
            hidden: 1,
            blocks: 0,
            time_embed_dim: 2,
            layer_norm: false,
        };
        let s = DiffusionSchedule::default();
        let t = 0.5;
        let (_, sigma) = s.alpha_sigma(t).unwrap();
        let eps = [0.7, -1.3];
        // need sigma * w = -eps, gradient of f is head_w * in_action
        let w = [-eps[0] / sigma, -eps[1] / sigma];
        let params = vec![w[0], w[1], 0.0, 0.0, 1000.0, 1.0, 0.0];
        let f = ScalarField::from_parts(cfg, params).unwrap();
        let actions = array![[0.2, -0.4]];
        let noises = array![[eps[0], eps[1]]];
        let states = Array2::zeros((1, 0));
        let (loss, _) =
            bdm_loss_at(&f, states.view(), actions.view(), &[t], noises.view(), &s, None).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn nonfinite_data_is_rejected_before_training() {
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let data = BehaviorDataset::stateless(array![[0.0, 0.0]]).unwrap();
        let r = pretrain_run(&data, &tiny(), &cfg, &DiffusionSchedule::default(), &mut NullSink);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_the_step() {
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 4,
            learning_rate: 1e200,
            ..Default::default()
        };
        let data = BehaviorDataset::stateless(array![[0.5, 0.1], [-1.0, 2.0]]).unwrap();
        match pretrain_run(&data, &tiny(), &cfg, &DiffusionSchedule::default(), &mut NullSink) {
            Err(Error::Training { step, .. }) => assert!(step > 0 && step < 50),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 8,
            seed: 11,
            dropout: 0.1,
            ..Default::default()
        };
        let data = BehaviorDataset::stateless(array![[0.5, 0.1], [-1.0, 2.0], [0.0, 0.3]]).unwrap();
        let s = DiffusionSchedule::default();
        let mut l1 = Vec::new();
        let mut l2 = Vec::new();
        let a = pretrain_run(&data, &tiny(), &cfg, &s, &mut l1).unwrap();
        let b = pretrain_run(&data, &tiny(), &cfg, &s, &mut l2).unwrap();
        assert_eq!(l1, l2);
        let bits = |f: &ScalarField| f.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn untrained_loss_is_near_action_dim() {
        let f = ScalarField::init(FieldConfig::default(), 1).unwrap();
        let mut r = rng::seeded(2);
        let actions = Array2::from_shape_vec((2048, 2), rng::normal_vec(&mut r, 4096)).unwrap();
        let states = Array2::zeros((2048, 0));
        let (loss, _) =
            bdm_loss(&f, states.view(), actions.view(), &DiffusionSchedule::default(), &mut r).unwrap();
        assert!((loss - 2.0).abs() < 0.4, "{loss}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = FieldConfig {
            action_dim: 2,
            state_dim: 1,
            hidden: 8,
            blocks: 2,
            time_embed_dim: 4,
            layer_norm: true,
        };
        let mut f = ScalarField::init(cfg, 3).unwrap();
        // Perturb so that every parameter has a visible effect.
        let mut r = rng::seeded(4);
        for p in f.params_mut() {
            *p += 0.3 * rng::normal(&mut r);
        }
        let s = DiffusionSchedule::default();
        let actions = Array2::from_shape_vec((6, 2), rng::normal_vec(&mut r, 12)).unwrap();
        let states = Array2::from_shape_vec((6, 1), rng::normal_vec(&mut r, 6)).unwrap();
        let noises = Array2::from_shape_vec((6, 2), rng::normal_vec(&mut r, 12)).unwrap();
        let ts: Vec<f64> = (0..6).map(|_| s.sample_time(&mut r)).collect();
        let loss = |f: &ScalarField| {
            bdm_loss_at(f, states.view(), actions.view(), &ts, noises.view(), &s, None).unwrap()
        };
        let (_, grads) = loss(&f);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng::index(&mut r, f.num_params());
            let orig = f.params()[i];
            f.params_mut()[i] = orig + h;
            let lp = loss(&f).0;
            f.params_mut()[i] = orig - h;
            let lm = loss(&f).0;
            f.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(rel < 1e-3, "param {i}: fd={fd} analytic={}", grads[i]);
        }
    }
}
