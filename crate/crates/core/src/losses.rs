//! Noise-robust training losses.
//!
//! Three mechanisms, each optional at training time:
//!
//! - Generalized cross-entropy for event classification: `(1 - q^beta)/beta`
//!   with `beta` in `(0, 1]`, interpolating between cross-entropy (beta -> 0)
//!   and absolute-error behavior (beta = 1).
//! - Per-sample overparameterized absolute-error time loss:
//!   `|prediction + p_i - target|` with `p_i = m_i^2 t_i - n_i^2 (1 - t_i)`,
//!   where `(m_i, n_i)` are per-sample scalars clamped to `[-1, 1]` that
//!   absorb label noise during training and are dropped at inference.
//! - A small re-weighting net mapping per-sample loss pairs to weights in
//!   `(0, 1)`, trained on a clean subset.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initialization scale for the per-sample overparameters.
pub const OVERPARAM_INIT_STD: f64 = 1e-8;

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Config(format!("gce beta {beta} outside (0, 1]")));
    }
    Ok(())
}

/// Select the per-row target probability: `out[i] = probs[i][targets[i]]`,
/// shape (N, 1). Differentiable through a constant one-hot mask.
fn select_target(probs: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let shape = probs.shape().to_vec();
    let (n, k) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::Contract(format!(
            "{} targets for {n} rows",
            targets.len()
        )));
    }
    let mut mask = vec![0.0; n * k];
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Contract(format!("target {t} >= num classes {k}")));
        }
        mask[i * k + t] = 1.0;
    }
    let mask = Tensor::from_vec(vec![n, k], mask)?;
    probs.mul(&mask)?.sum_axis(1)
}

/// Generalized cross-entropy per sample: `(1 - q^beta)/beta` with
/// `q = softmax(logits)[target]`. Returns an (N, 1) loss vector.
pub fn gce_loss_vec(logits: &Tensor, targets: &[usize], beta: f64) -> Result<Tensor> {
    check_beta(beta)?;
    let probs = logits.softmax_axis(1)?;
    let q = select_target(&probs, targets)?;
    if beta == 1.0 {
        // Exactly the absolute-error form 1 - q.
        Ok(q.neg().add_scalar(1.0))
    } else {
        Ok(q.powf(beta).scale(-1.0 / beta).add_scalar(1.0 / beta))
    }
}

/// Categorical cross-entropy per sample, the non-robust ablation loss.
pub fn cce_loss_vec(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let probs = logits.softmax_axis(1)?;
    let q = select_target(&probs, targets)?;
    Ok(q.clamp(1e-300, 1.0).log().neg())
}

/// Scalar convenience wrapper over one logit row.
pub fn gce_loss(logits: &[f64], target: usize, beta: f64) -> Result<f64> {
    let t = Tensor::from_vec(vec![1, logits.len()], logits.to_vec())?;
    Ok(gce_loss_vec(&t, &[target], beta)?.item())
}

/// The overparameterized residual `p = m^2 t - n^2 (1 - t)`; with
/// `m, n` in `[-1, 1]` and `t` in `[0, 1]` the result lies in `[-1, 1]`.
pub fn over_param_value(m: f64, n: f64, t: f64) -> f64 {
    m * m * t - n * n * (1.0 - t)
}

/// Absolute-error time loss `|prediction + p - target|` as tensors,
/// gradients flowing to the prediction and through `p` to the
/// overparameters. `p` may be `None` for the plain ablation loss.
pub fn time_loss_vec(prediction: &Tensor, p: Option<&Tensor>, target: &Tensor) -> Result<Tensor> {
    let shifted = match p {
        Some(p) => prediction.add(p)?,
        None => prediction.clone(),
    };
    Ok(shifted.sub(target)?.abs())
}

/// Identifies one regression sample: (sequence id, prefix position).
pub type SampleKey = (String, usize);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OverParamEntry {
    pub id: String,
    pub pos: usize,
    pub m: f64,
    pub n: f64,
}

/// Per-training-sample overparameters, keyed by (sequence id, position).
/// Only consulted during training; inference never reads them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverParams {
    entries: BTreeMap<SampleKey, (f64, f64)>,
}

impl OverParams {
    /// One (m, n) pair per prediction target of every training sequence,
    /// Gaussian-initialized with mean 0 and std 1e-8.
    pub fn init(dataset: &Dataset, rng: &mut ChaCha8Rng) -> OverParams {
        let normal = Normal::new(0.0, OVERPARAM_INIT_STD).expect("valid std");
        let mut entries = BTreeMap::new();
        for seq in &dataset.sequences {
            for pos in 0..seq.len().saturating_sub(1) {
                let m: f64 = normal.sample(rng);
                let n: f64 = normal.sample(rng);
                entries.insert((seq.id.clone(), pos), (m, n));
            }
        }
        OverParams { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &SampleKey) -> Option<(f64, f64)> {
        self.entries.get(key).copied()
    }

    /// Materialize the batch's (m, n) values as trainable (N, 1) tensors.
    /// Samples never seen before are initialized to zero.
    pub fn batch_tensors(&self, keys: &[SampleKey]) -> Result<(Tensor, Tensor)> {
        let mut ms = Vec::with_capacity(keys.len());
        let mut ns = Vec::with_capacity(keys.len());
        for key in keys {
            let (m, n) = self.entries.get(key).copied().unwrap_or((0.0, 0.0));
            ms.push(m);
            ns.push(n);
        }
        let m = Tensor::param_from_vec(vec![keys.len(), 1], ms)?;
        let n = Tensor::param_from_vec(vec![keys.len(), 1], ns)?;
        Ok((m, n))
    }

    /// Projected step in the descent direction: `m <- clamp(m - lr_m *
    /// sign(grad_m), -1, 1)` and likewise for `n`, written back into the
    /// store. The gradient of the quadratic parameterization is
    /// proportional to the parameter itself, so a sign step (rather than a
    /// raw gradient step) is what lets the near-zero initialization ever
    /// leave the origin; parameters with zero gradient stay put.
    pub fn apply_update(
        &mut self,
        keys: &[SampleKey],
        m: &Tensor,
        n: &Tensor,
        lr_m: f64,
        lr_n: f64,
    ) {
        let sgn = |g: f64| {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        };
        let gm = m.grad().unwrap_or_else(|| vec![0.0; keys.len()]);
        let gn = n.grad().unwrap_or_else(|| vec![0.0; keys.len()]);
        let vm = m.values();
        let vn = n.values();
        for (i, key) in keys.iter().enumerate() {
            let new_m = (vm[i] - lr_m * sgn(gm[i])).clamp(-1.0, 1.0);
            let new_n = (vn[i] - lr_n * sgn(gn[i])).clamp(-1.0, 1.0);
            self.entries.insert(key.clone(), (new_m, new_n));
        }
    }

    /// Largest |m| and |n| over all samples; both are bounded by the
    /// projection.
    pub fn max_abs(&self) -> (f64, f64) {
        let mut mm: f64 = 0.0;
        let mut nn: f64 = 0.0;
        for (m, n) in self.entries.values() {
            mm = mm.max(m.abs());
            nn = nn.max(n.abs());
        }
        (mm, nn)
    }

    pub fn to_entries(&self) -> Vec<OverParamEntry> {
        self.entries
            .iter()
            .map(|((id, pos), (m, n))| OverParamEntry {
                id: id.clone(),
                pos: *pos,
                m: *m,
                n: *n,
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<OverParamEntry>) -> OverParams {
        OverParams {
            entries: entries
                .into_iter()
                .map(|e| ((e.id, e.pos), (e.m, e.n)))
                .collect(),
        }
    }
}

/// Small MLP mapping per-sample loss pairs `(L^v, L^t)` to weight pairs
/// `(sigma^v, sigma^t)` in `(0, 1)`.
pub struct ReweightNet {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub const REWEIGHT_HIDDEN: usize = 64;

impl ReweightNet {
    /// Hidden layer is Gaussian-initialized; the output layer starts at
    /// zero so every weight begins at sigmoid(0) = 0.5.
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Result<ReweightNet> {
        if hidden == 0 {
            return Err(Error::Config("reweight hidden size must be positive".into()));
        }
        Ok(ReweightNet {
            w1: Tensor::randn(vec![2, hidden], 1.0 / 2f64.sqrt(), rng),
            b1: Tensor::param_from_vec(vec![1, hidden], vec![0.0; hidden])?,
            w2: Tensor::param_from_vec(vec![hidden, 2], vec![0.0; hidden * 2])?,
            b2: Tensor::param_from_vec(vec![1, 2], vec![0.0; 2])?,
        })
    }

    /// (N, 2) loss pairs -> (N, 2) weights, columns (sigma^v, sigma^t).
    pub fn forward(&self, loss_pairs: &Tensor) -> Result<Tensor> {
        let h = loss_pairs.matmul(&self.w1)?.add(&self.b1)?.gelu();
        Ok(h.matmul(&self.w2)?.add(&self.b2)?.sigmoid())
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w1.clone(), self.b1.clone(), self.w2.clone(), self.b2.clone()]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }
}

/// Weighted batch objective: `mean(sigma_v * L_v + sigma_t * L_t)`.
/// All four tensors must be (N, 1).
pub fn combined_loss(
    loss_v: &Tensor,
    loss_t: &Tensor,
    sigma_v: &Tensor,
    sigma_t: &Tensor,
) -> Result<Tensor> {
    if loss_v.shape() != loss_t.shape()
        || loss_v.shape() != sigma_v.shape()
        || loss_v.shape() != sigma_t.shape()
    {
        return Err(Error::Contract(format!(
            "combined_loss shapes differ: Lv {:?}, Lt {:?}, sv {:?}, st {:?}",
            loss_v.shape(),
            loss_t.shape(),
            sigma_v.shape(),
            sigma_t.shape()
        )));
    }
    let weighted = sigma_v.mul(loss_v)?.add(&sigma_t.mul(loss_t)?)?;
    Ok(weighted.mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Logits whose softmax equals the given probabilities exactly (up to
    /// normalization): log-probabilities.
    fn logits_for(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn gce_near_perfect_confidence_is_near_zero() {
        let q = 1.0 - 1e-12;
        let rest = 1e-12 / 3.0;
        let logits = logits_for(&[q, rest, rest, rest]);
        let loss = gce_loss(&logits, 0, 0.7).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn gce_beta_one_is_absolute_error_form() {
        let logits = logits_for(&[0.25, 0.25, 0.25, 0.25]);
        let loss = gce_loss(&logits, 2, 1.0).unwrap();
        assert!((loss - 0.75).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn gce_matches_direct_formula() {
        let logits = logits_for(&[0.5, 0.3, 0.2]);
        let loss = gce_loss(&logits, 0, 0.7).unwrap();
        let expect = (1.0 - 0.5f64.powf(0.7)) / 0.7;
        assert!((loss - expect).abs() < 1e-9, "loss {loss} expect {expect}");
        assert!((expect - 0.549).abs() < 1e-3);
    }

    #[test]
    fn gce_beta_out_of_range_is_config_error() {
        assert!(matches!(gce_loss(&[0.0, 0.0], 0, 0.0), Err(Error::Config(_))));
        assert!(matches!(gce_loss(&[0.0, 0.0], 0, 1.5), Err(Error::Config(_))));
        assert!(matches!(gce_loss(&[0.0, 0.0], 0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn gce_approaches_cce_monotonically_as_beta_shrinks() {
        let qs: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let betas = [0.5, 0.1, 0.01, 0.001];
        let mut prev_max = f64::INFINITY;
        for &beta in &betas {
            let mut max_gap: f64 = 0.0;
            for &q in &qs {
                let logits = logits_for(&[q, 1.0 - q]);
                let loss = gce_loss(&logits, 0, beta).unwrap();
                max_gap = max_gap.max((loss - (-q.ln())).abs());
            }
            assert!(
                max_gap < prev_max,
                "beta {beta}: gap {max_gap} did not shrink from {prev_max}"
            );
            prev_max = max_gap;
        }
    }

    #[test]
    fn gce_gradient_wrt_q_is_q_to_beta_minus_one() {
        // Feed q directly as a parameter through the analytic form.
        for &q0 in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let q = Tensor::param_from_vec(vec![1], vec![q0]).unwrap();
            let loss = q.powf(1.0).neg().add_scalar(1.0); // beta = 1 form
            loss.sum().backward().unwrap();
            let g = q.grad().unwrap()[0];
            assert!((g.abs() - 1.0).abs() < 1e-12, "beta=1 grad {g}");
        }
        // And for beta = 0.7 the magnitude is q^(beta-1).
        for &q0 in &[0.2, 0.5, 0.8] {
            let q = Tensor::param_from_vec(vec![1], vec![q0]).unwrap();
            let beta = 0.7;
            let loss = q.powf(beta).scale(-1.0 / beta).add_scalar(1.0 / beta);
            loss.sum().backward().unwrap();
            let g = q.grad().unwrap()[0];
            let expect = q0.powf(beta - 1.0);
            assert!((g.abs() - expect).abs() < 1e-12, "grad {g} expect {expect}");
        }
    }

    #[test]
    fn over_param_value_examples() {
        assert_eq!(over_param_value(0.0, 0.0, 0.7), 0.0);
        assert_eq!(over_param_value(1.0, 0.0, 0.5), 0.5);
        assert_eq!(over_param_value(0.0, 1.0, 0.0), -1.0);
    }

    #[test]
    fn over_param_value_stays_in_unit_interval() {
        let mut r = rng::stream(21, &[0]);
        use rand::Rng;
        for _ in 0..1000 {
            let m: f64 = r.random_range(-1.0..=1.0);
            let n: f64 = r.random_range(-1.0..=1.0);
            let t: f64 = r.random_range(0.0..=1.0);
            let p = over_param_value(m, n, t);
            assert!((-1.0..=1.0).contains(&p), "p {p}");
        }
    }

    #[test]
    fn time_loss_examples() {
        let pred = Tensor::param_from_vec(vec![1, 1], vec![0.2]).unwrap();
        let p = Tensor::from_vec(vec![1, 1], vec![0.1]).unwrap();
        let t = Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap();
        let loss = time_loss_vec(&pred, Some(&p), &t).unwrap();
        assert!((loss.item() - 0.2).abs() < 1e-12);

        let exact = time_loss_vec(&t, None, &t).unwrap();
        assert_eq!(exact.item(), 0.0);
    }

    #[test]
    fn time_loss_gradient_is_sign() {
        let pred = Tensor::param_from_vec(vec![1, 1], vec![0.2]).unwrap();
        let p = Tensor::from_vec(vec![1, 1], vec![0.1]).unwrap();
        let t = Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap();
        time_loss_vec(&pred, Some(&p), &t).unwrap().sum().backward().unwrap();
        // 0.2 + 0.1 - 0.5 < 0, so the gradient is -1.
        assert_eq!(pred.grad().unwrap(), vec![-1.0]);
    }

    #[test]
    fn time_loss_gradient_reaches_overparams() {
        let mut r = rng::stream(22, &[0]);
        let mut ops = OverParams::default();
        ops.entries.insert(("s0".into(), 0), (0.4, 0.2));
        ops.entries.insert(("s0".into(), 1), (-0.3, 0.6));
        let keys: Vec<SampleKey> = vec![("s0".into(), 0), ("s0".into(), 1)];
        let (m, n) = ops.batch_tensors(&keys).unwrap();
        let tvals = Tensor::from_vec(vec![2, 1], vec![0.8, 0.3]).unwrap();
        let one_minus_t = tvals.neg().add_scalar(1.0);
        let p = m
            .mul(&m)
            .unwrap()
            .mul(&tvals)
            .unwrap()
            .sub(&n.mul(&n).unwrap().mul(&one_minus_t).unwrap())
            .unwrap();
        let pred = Tensor::randn(vec![2, 1], 0.1, &mut r).detach();
        let loss = time_loss_vec(&pred, Some(&p), &tvals).unwrap().sum();
        loss.backward().unwrap();
        let gm = m.grad().unwrap();
        // d|r|/dm = sign(r) * 2 m t.
        let residual0 = pred.values()[0] + over_param_value(0.4, 0.2, 0.8) - 0.8;
        let expect0 = residual0.signum() * 2.0 * 0.4 * 0.8;
        assert!((gm[0] - expect0).abs() < 1e-12, "gm {gm:?}");
    }

    #[test]
    fn over_params_projection_bounds_updates() {
        let mut ops = OverParams::default();
        ops.entries.insert(("a".into(), 0), (0.9, -0.9));
        let keys: Vec<SampleKey> = vec![("a".into(), 0)];
        let (m, n) = ops.batch_tensors(&keys).unwrap();
        // Force a huge gradient; projection must clamp to [-1, 1].
        m.zero_grad();
        n.zero_grad();
        let loss = m.scale(-100.0).add(&n.scale(100.0)).unwrap().sum();
        loss.backward().unwrap();
        ops.apply_update(&keys, &m, &n, 1.0, 1.0);
        let (vm, vn) = ops.get(&("a".into(), 0)).unwrap();
        assert_eq!(vm, 1.0);
        assert_eq!(vn, -1.0);
    }

    #[test]
    fn over_params_init_is_tiny_and_full_coverage() {
        use crate::dataset::{Event, EventSequence};
        let d = Dataset::new(
            vec![
                EventSequence::new("a", vec![
                    Event { time: 0.1, mark: 0 },
                    Event { time: 0.5, mark: 1 },
                    Event { time: 0.9, mark: 0 },
                ]),
                EventSequence::new("b", vec![Event { time: 0.2, mark: 1 }]),
            ],
            2,
            1.0,
        )
        .unwrap();
        let mut r = rng::stream(23, &[0]);
        let ops = OverParams::init(&d, &mut r);
        // Two targets for "a", none for the single-event "b".
        assert_eq!(ops.len(), 2);
        let (mm, nn) = ops.max_abs();
        assert!(mm < 1e-6 && nn < 1e-6);
    }

    #[test]
    fn reweight_net_starts_at_one_half() {
        let mut r = rng::stream(24, &[0]);
        let net = ReweightNet::new(REWEIGHT_HIDDEN, &mut r).unwrap();
        let pairs = Tensor::from_vec(vec![3, 2], vec![0.1, 2.0, 5.0, 0.0, 1.3, 1.3]).unwrap();
        let w = net.forward(&pairs).unwrap();
        assert!(w.values().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn reweight_net_is_pointwise_and_bounded() {
        let mut r = rng::stream(25, &[0]);
        let net = ReweightNet::new(16, &mut r).unwrap();
        // Train the output layer away from zero so it is not constant.
        net.w2.set_values(&{
            let mut v = vec![0.0; 16 * 2];
            for (i, x) in v.iter_mut().enumerate() {
                *x = ((i % 5) as f64 - 2.0) * 0.3;
            }
            v
        });
        let pairs = Tensor::from_vec(vec![4, 2], vec![0.7, 1.1, 0.7, 1.1, 3.0, 0.2, 3.0, 0.2]).unwrap();
        let w = net.forward(&pairs).unwrap().values();
        // Identical loss pairs map to identical weight pairs.
        assert_eq!(w[0..2], w[2..4]);
        assert_eq!(w[4..6], w[6..8]);
        assert!(w.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn combined_loss_reduces_correctly() {
        let lv = Tensor::from_vec(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let lt = Tensor::from_vec(vec![2, 1], vec![0.5, 0.5]).unwrap();
        let ones = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let all_ones = combined_loss(&lv, &lt, &ones, &ones).unwrap();
        assert!((all_ones.item() - (2.0 + 0.5)).abs() < 1e-12);

        let zeros = Tensor::from_vec(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let annihilated = combined_loss(&lv, &lt, &zeros, &zeros).unwrap();
        assert_eq!(annihilated.item(), 0.0);

        let single_v = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        let single_t = Tensor::from_vec(vec![1, 1], vec![0.25]).unwrap();
        let sv = Tensor::from_vec(vec![1, 1], vec![0.4]).unwrap();
        let st = Tensor::from_vec(vec![1, 1], vec![0.6]).unwrap();
        let s = combined_loss(&single_v, &single_t, &sv, &st).unwrap();
        assert!((s.item() - (0.4 * 2.0 + 0.6 * 0.25)).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_zero_weights_zero_model_gradient() {
        let pred = Tensor::param_from_vec(vec![2, 1], vec![0.3, 0.4]).unwrap();
        let target = Tensor::from_vec(vec![2, 1], vec![0.9, 0.1]).unwrap();
        let lt = time_loss_vec(&pred, None, &target).unwrap();
        let lv = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let zeros = Tensor::from_vec(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let loss = combined_loss(&lv, &lt, &zeros, &zeros).unwrap();
        loss.backward().unwrap();
        assert_eq!(pred.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn combined_loss_checks_alignment() {
        let a = Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            combined_loss(&a, &a, &a, &b),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn overparam_entries_round_trip() {
        let mut ops = OverParams::default();
        ops.entries.insert(("x".into(), 3), (0.25, -0.5));
        ops.entries.insert(("y".into(), 0), (0.0, 0.125));
        let back = OverParams::from_entries(ops.to_entries());
        assert_eq!(back, ops);
    }
}
