//! Regularized risk minimization with Adam, per-user splits and negative
//! sampling.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{bce, Parameter, Tape, Var};
use crate::data::{AttributeValuePair, DataSample};
use crate::error::{GmcfError, Result};
use crate::evaluation::{auc, logloss, score_samples};
use crate::model::{forward_on_tape, ModelParams};
use crate::variants::VariantConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: VariantConfig,
    /// Epochs without validation-AUC improvement before stopping; 0 disables.
    pub patience: usize,
    /// Hidden layers of the interaction MLPs.
    pub hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            learning_rate: 1e-3,
            lambda: 1e-5,
            epochs: 50,
            batch_size: 256,
            seed: 0,
            variant: VariantConfig::canonical(),
            patience: 5,
            hidden_layers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GmcfError::InvalidConfig(m.into()));
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.hidden_layers > 4 {
            return bad("at most 4 hidden layers");
        }
        self.variant.validate()
    }
}

/// `-(y ln p + (1 - y) ln(1 - p))`, probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(probability: f64, label: f64) -> f64 {
    bce(probability, label)
}

/// Records `mean_n BCE(σ(y'_n), y_n) + λ Σ ||θ||²` on `tape`, where the
/// penalty covers every parameter the batch touched.
pub fn regularized_risk(tape: &mut Tape, params: &ModelParams, batch: &[DataSample], lambda: f64) -> Result<Var> {
    if batch.is_empty() {
        return Err(GmcfError::Contract("risk of an empty batch".into()));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let fw = forward_on_tape(tape, params, &sample.user_chars, &sample.item_chars)?;
        losses.push(tape.bce_with_logit(fw.score, sample.label)?);
    }
    let total = tape.add_all(&losses)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    if lambda == 0.0 {
        return Ok(mean);
    }
    let penalty = l2_penalty(tape, lambda)?;
    tape.add(mean, penalty)
}

/// `λ Σ ||θ||²` over the parameters bound on `tape`, in registry order.
pub fn l2_penalty(tape: &mut Tape, lambda: f64) -> Result<Var> {
    let mut bound: Vec<_> = tape.bound_params().collect();
    bound.sort_by_key(|(id, _)| *id);
    let squares = bound
        .into_iter()
        .map(|(_, v)| tape.dot(v, v))
        .collect::<Result<Vec<_>>>()?;
    let sum = if squares.is_empty() {
        tape.zeros(1)
    } else {
        tape.add_all(&squares)?
    };
    tape.scale(sum, lambda)
}

/// Bias-corrected Adam over gradients accumulated in each parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(GmcfError::shape(
                "adam",
                format!("state for {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.value.len() != m.len() || p.grad.len() != m.len() {
                return Err(GmcfError::shape("adam", format!("parameter {} changed size", p.name)));
            }
            for k in 0..m.len() {
                let g = p.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.value[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<DataSample>,
    pub validation: Vec<DataSample>,
    pub test: Vec<DataSample>,
    /// Users with fewer than five samples; all of their samples went to train.
    pub underfilled_users: Vec<usize>,
}

/// Sample indices grouped by user, users in first-appearance order.
pub fn group_by_user(samples: &[DataSample]) -> Vec<(usize, Vec<usize>)> {
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let user = s.user_key();
        let g = *slot.entry(user).or_insert_with(|| {
            groups.push((user, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(k);
    }
    groups
}

/// Per user: seeded shuffle, then 20% validation and 20% test (both rounded
/// down), the rest train.
pub fn split_per_user(samples: &[DataSample], seed: u64) -> SplitDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitDataset::default();
    for (user, mut idx) in group_by_user(samples) {
        let n = idx.len();
        if n < 5 {
            out.underfilled_users.push(user);
            out.train.extend(idx.iter().map(|&k| samples[k].clone()));
            continue;
        }
        idx.shuffle(&mut rng);
        let n_valid = n / 5;
        let n_test = n / 5;
        let n_train = n - n_valid - n_test;
        out.train.extend(idx[..n_train].iter().map(|&k| samples[k].clone()));
        out.validation
            .extend(idx[n_train..n_train + n_valid].iter().map(|&k| samples[k].clone()));
        out.test
            .extend(idx[n_train + n_valid..].iter().map(|&k| samples[k].clone()));
    }
    out
}

/// Distinct item characteristics keyed by item id, in first-appearance order.
pub fn item_pool(samples: &[DataSample]) -> Vec<Vec<AttributeValuePair>> {
    let mut seen = HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.item_key()))
        .map(|s| s.item_chars.clone())
        .collect()
}

/// For every user, draws as many items the user never interacted with as
/// the user has positives, without replacement, and labels them 0.
pub fn negative_sample(
    positives: &[DataSample],
    pool: &[Vec<AttributeValuePair>],
    seed: u64,
) -> Result<Vec<DataSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (user, idx) in group_by_user(positives) {
        let seen: HashSet<usize> = idx.iter().map(|&k| positives[k].item_key()).collect();
        let candidates: Vec<&Vec<AttributeValuePair>> = pool
            .iter()
            .filter(|item| !item.is_empty() && !seen.contains(&item[0].att.id))
            .collect();
        if candidates.len() < idx.len() {
            return Err(GmcfError::Sampling {
                user: user.to_string(),
                message: format!("{} positives but only {} unseen items", idx.len(), candidates.len()),
            });
        }
        let user_chars = &positives[idx[0]].user_chars;
        for pick in rand::seq::index::sample(&mut rng, candidates.len(), idx.len()) {
            out.push(DataSample::new(user_chars.clone(), candidates[pick].clone(), 0.0)?);
        }
    }
    Ok(out)
}

/// Splits positive-only data per user and adds one sampled negative per
/// positive to every split. Negatives avoid all of the user's positives.
pub fn implicit_split(positives: &[DataSample], seed: u64) -> Result<SplitDataset> {
    if let Some(s) = positives.iter().find(|s| s.label != 1.0) {
        return Err(GmcfError::Contract(format!("implicit data holds a label {}", s.label)));
    }
    let pool = item_pool(positives);
    let negatives = negative_sample(positives, &pool, seed.wrapping_add(2))?;
    let pos = split_per_user(positives, seed);
    let neg = split_per_user(&negatives, seed.wrapping_add(1));
    Ok(SplitDataset {
        train: [pos.train, neg.train].concat(),
        validation: [pos.validation, neg.validation].concat(),
        test: [pos.test, neg.test].concat(),
        underfilled_users: pos.underfilled_users,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean BCE over the epoch's training samples.
    pub train_loss: f64,
    /// NaN when the validation split cannot define AUC.
    pub val_auc: f64,
    pub val_logloss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={:.6} val_auc={:.6} val_logloss={:.6}",
            self.epoch, self.train_loss, self.val_auc, self.val_logloss
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were returned; 0 for the initial ones.
    pub best_epoch: usize,
}

/// Mini-batch Adam on the regularized risk. Returns the parameters of the
/// epoch with the best validation AUC (the last epoch if validation AUC is
/// undefined). Deterministic for a fixed config.
pub fn train(
    data: &SplitDataset,
    universe: usize,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = ModelParams::init(universe, config.dim, config.variant, config.hidden_layers, config.seed)?;
    let mut log = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log,
            best_epoch: 0,
        });
    }
    if data.train.is_empty() {
        return Err(GmcfError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<DataSample> = chunk.iter().map(|&k| data.train[k].clone()).collect();
            let mut tape = Tape::new();
            let risk = regularized_risk(&mut tape, &params, &batch, config.lambda)?;
            let value = tape.scalar(risk);
            if !value.is_finite() {
                return Err(GmcfError::Numeric(format!(
                    "risk is {value} at epoch {epoch}, batch {b}"
                )));
            }
            params.zero_grad();
            tape.backward(risk, &mut params.parameters_mut())?;
            adam.step(&mut params.parameters_mut())?;
            loss_sum += batch_bce(&tape, value, config.lambda) * batch.len() as f64;
        }
        let train_loss = loss_sum / data.train.len() as f64;

        let (val_auc, val_logloss) = if data.validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let scored = score_samples(&params, &data.validation)?;
            (auc(&scored).unwrap_or(f64::NAN), logloss(&scored))
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_auc,
            val_logloss,
        };
        on_epoch(&entry);
        log.push(entry);

        if val_auc.is_nan() {
            continue;
        }
        match &best {
            Some((b, _, _)) if val_auc <= *b => since_best += 1,
            _ => {
                best = Some((val_auc, epoch, params.clone()));
                since_best = 0;
            }
        }
        if config.patience > 0 && since_best >= config.patience {
            break;
        }
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, log.len()),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_epoch,
    })
}

/// The data term of a recorded risk: the risk minus its penalty, which was
/// computed from the parameters before the update.
fn batch_bce(tape: &Tape, risk_value: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return risk_value;
    }
    let mut bound: Vec<_> = tape.bound_params().collect();
    bound.sort_by_key(|(id, _)| *id);
    let sq: f64 = bound
        .iter()
        .map(|&(_, v)| tape.value(v).iter().map(|x| x * x).sum::<f64>())
        .sum();
    risk_value - lambda * sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttributeId, Side};

    fn uid(id: usize) -> AttributeId {
        AttributeId { id, side: Side::User }
    }

    fn iid(id: usize) -> AttributeId {
        AttributeId { id, side: Side::Item }
    }

    fn interaction(user: usize, item: usize, label: f64) -> DataSample {
        DataSample::new(
            vec![AttributeValuePair::present(uid(user))],
            vec![AttributeValuePair::present(iid(100 + item))],
            label,
        )
        .unwrap()
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(1.0 - 1e-12, 1.0) < 1e-11);
        assert!((bce_loss(0.9, 0.0) - std::f64::consts::LN_10).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_squared_norm() {
        let p = [Parameter::vector("theta", vec![3.0, 4.0])];
        let mut tape = Tape::new();
        tape.param(crate::autodiff::ParamId(0), &p[0]);
        let pen = l2_penalty(&mut tape, 0.1).unwrap();
        assert!((tape.scalar(pen) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn risk_without_penalty_is_mean_bce() {
        let params = ModelParams::init(110, 4, VariantConfig::canonical(), 1, 3).unwrap();
        let batch = vec![interaction(0, 1, 1.0), interaction(1, 2, 0.0), interaction(2, 1, 1.0)];
        let mut tape = Tape::new();
        let risk = regularized_risk(&mut tape, &params, &batch, 0.0).unwrap();
        let expect: f64 = batch
            .iter()
            .map(|s| {
                let r = crate::model::predict(s, &params).unwrap();
                bce_loss(r.probability(), s.label)
            })
            .sum::<f64>()
            / 3.0;
        assert!((tape.scalar(risk) - expect).abs() < 1e-12);
        let mut tape = Tape::new();
        assert!(regularized_risk(&mut tape, &params, &[], 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3, -2.0, 1e-3] {
            let mut p = [Parameter::vector("x", vec![1.0])];
            p[0].grad = vec![g];
            let mut adam = Adam::new(0.01);
            adam.step(&mut p.iter_mut().collect::<Vec<_>>()).unwrap();
            let moved = p[0].value[0] - 1.0;
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = [Parameter::vector("x", vec![1.5, -2.0])];
        let mut adam = Adam::new(0.1);
        for _ in 0..20 {
            adam.step(&mut p.iter_mut().collect::<Vec<_>>()).unwrap();
        }
        assert_eq!(p[0].value, vec![1.5, -2.0]);
    }

    #[test]
    fn adam_descends_a_parabola() {
        // scalar simulation oracle for f(θ) = θ², θ0 = 1, lr = 0.1
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expect = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * th;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            th -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            expect.push(th);
        }
        let mut p = [Parameter::vector("x", vec![1.0])];
        let mut adam = Adam::new(0.1);
        let mut prev = 1.0f64;
        for e in expect {
            p[0].grad = vec![2.0 * p[0].value[0]];
            adam.step(&mut p.iter_mut().collect::<Vec<_>>()).unwrap();
            assert!(p[0].value[0].abs() < prev.abs());
            assert!((p[0].value[0] - e).abs() < 1e-15);
            prev = p[0].value[0];
        }
    }

    #[test]
    fn adam_rejects_shape_changes() {
        let mut p = [Parameter::vector("x", vec![1.0])];
        let mut adam = Adam::new(0.1);
        adam.step(&mut p.iter_mut().collect::<Vec<_>>()).unwrap();
        let mut q = [Parameter::vector("x", vec![1.0]), Parameter::vector("y", vec![1.0])];
        assert!(adam.step(&mut q.iter_mut().collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn split_ratios_per_user() {
        let mut samples = Vec::new();
        for k in 0..10 {
            samples.push(interaction(0, k, (k % 2) as f64));
        }
        for k in 0..5 {
            samples.push(interaction(1, k, (k % 2) as f64));
        }
        for k in 0..3 {
            samples.push(interaction(2, k, 1.0));
        }
        let split = split_per_user(&samples, 4);
        let count = |v: &[DataSample], u: usize| v.iter().filter(|s| s.user_key() == u).count();
        assert_eq!(
            (
                count(&split.train, 0),
                count(&split.validation, 0),
                count(&split.test, 0)
            ),
            (6, 2, 2)
        );
        assert_eq!(
            (
                count(&split.train, 1),
                count(&split.validation, 1),
                count(&split.test, 1)
            ),
            (3, 1, 1)
        );
        assert_eq!(count(&split.train, 2), 3);
        assert_eq!(split.underfilled_users, vec![2]);
        assert_eq!(split, split_per_user(&samples, 4));
        let total = split.train.len() + split.validation.len() + split.test.len();
        assert_eq!(total, samples.len());
    }

    #[test]
    fn negatives_are_disjoint_from_positives() {
        let positives: Vec<DataSample> = (0..7).map(|k| interaction(0, k, 1.0)).collect();
        let pool: Vec<Vec<AttributeValuePair>> = (0..20)
            .map(|k| vec![AttributeValuePair::present(iid(100 + k))])
            .collect();
        let neg = negative_sample(&positives, &pool, 1).unwrap();
        assert_eq!(neg.len(), 7);
        let pos_items: HashSet<usize> = positives.iter().map(|s| s.item_key()).collect();
        let neg_items: HashSet<usize> = neg.iter().map(|s| s.item_key()).collect();
        assert_eq!(neg_items.len(), 7);
        assert!(pos_items.is_disjoint(&neg_items));
        assert!(neg.iter().all(|s| s.label == 0.0 && s.user_key() == 0));
        assert_eq!(neg, negative_sample(&positives, &pool, 1).unwrap());
    }

    #[test]
    fn implicit_split_balances_every_split() {
        let positives: Vec<DataSample> = (0..30).map(|k| interaction(k % 3, k, 1.0)).collect();
        let split = implicit_split(&positives, 4).unwrap();
        for part in [&split.train, &split.validation, &split.test] {
            let pos = part.iter().filter(|s| s.label == 1.0).count();
            assert_eq!(2 * pos, part.len());
        }
        assert_eq!(split.train.len(), 2 * 18);
        let seen: HashSet<(usize, usize)> = positives.iter().map(|s| (s.user_key(), s.item_key())).collect();
        let all = split.train.iter().chain(&split.validation).chain(&split.test);
        assert!(all
            .filter(|s| s.label == 0.0)
            .all(|s| !seen.contains(&(s.user_key(), s.item_key()))));
        assert!(implicit_split(&[interaction(0, 0, 0.0)], 0).is_err());
    }

    #[test]
    fn forced_negative_and_exhaustion() {
        let positives = vec![interaction(0, 0, 1.0)];
        let pool: Vec<Vec<AttributeValuePair>> = (0..2)
            .map(|k| vec![AttributeValuePair::present(iid(100 + k))])
            .collect();
        let neg = negative_sample(&positives, &pool, 9).unwrap();
        assert_eq!(neg[0].item_key(), 101);
        let err = negative_sample(&positives, &pool[..1], 9);
        assert!(matches!(err, Err(GmcfError::Sampling { .. })));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let samples: Vec<DataSample> = (0..10).map(|k| interaction(k % 2, k, (k % 2) as f64)).collect();
        let split = split_per_user(&samples, 0);
        let cfg = TrainConfig {
            dim: 4,
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&split, 110, &cfg, |_| {}).unwrap();
        let init = ModelParams::init(110, 4, cfg.variant, 1, cfg.seed).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn one_epoch_reduces_single_sample_loss() {
        let sample = interaction(0, 0, 1.0);
        let split = SplitDataset {
            train: vec![sample.clone()],
            ..SplitDataset::default()
        };
        let cfg = TrainConfig {
            dim: 8,
            epochs: 1,
            lambda: 0.0,
            learning_rate: 1e-4,
            seed: 5,
            ..TrainConfig::default()
        };
        let before = ModelParams::init(110, 8, cfg.variant, 1, cfg.seed).unwrap();
        let after = train(&split, 110, &cfg, |_| {}).unwrap().params;
        let loss = |p: &ModelParams| bce_loss(crate::model::predict(&sample, p).unwrap().probability(), 1.0);
        assert!(loss(&after) < loss(&before));
    }

    #[test]
    fn log_line_format() {
        let e = EpochLog {
            epoch: 3,
            train_loss: 0.5,
            val_auc: 0.75,
            val_logloss: 0.25,
        };
        assert_eq!(
            e.to_string(),
            "epoch=3 train_loss=0.500000 val_auc=0.750000 val_logloss=0.250000"
        );
    }
}
