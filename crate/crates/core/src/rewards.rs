//! Black-box task rewards, the learned surrogate scorer, the pairwise
//! surrogate loss, and winner/loser pair mining.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::ToyDataset;
use crate::error::{invalid_arg, Result};
use crate::nn::{DenoiserNet, Optimizer, OptimizerKind, Tensor};
use crate::tape::{softplus, Tape, Var};

/// Black-box task reward `r(x, c)`.
///
/// Consumers see rewards only through [`RewardSignal::evaluate`]; analytic
/// gradients are exposed solely for the ground-truth-gradient ablation and
/// only when the kind supports them.
#[derive(Debug, Clone)]
pub enum RewardSignal {
    /// `r = -||x - target(c)||`; maximum 0 at the target.
    TargetRegion { targets: Vec<Vec<f64>> },
    /// Target-region reward squashed to `exp(r)` and quantized onto
    /// `{0, 1/m, ..., 1}`.
    Quantized { targets: Vec<Vec<f64>>, levels: usize },
    /// Probability a trained toy classifier assigns to the condition label.
    Classifier { net: ToyClassifier },
}

impl RewardSignal {
    pub fn target_region(targets: Vec<Vec<f64>>) -> Result<Self> {
        if targets.is_empty() {
            return Err(invalid_arg("target_region reward needs at least one target"));
        }
        Ok(Self::TargetRegion { targets })
    }

    pub fn quantized(targets: Vec<Vec<f64>>, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(invalid_arg("quantization levels m must be >= 1"));
        }
        if targets.is_empty() {
            return Err(invalid_arg("quantized reward needs at least one target"));
        }
        Ok(Self::Quantized { targets, levels })
    }

    pub fn classifier(net: ToyClassifier) -> Self {
        Self::Classifier { net }
    }

    pub fn differentiable(&self) -> bool {
        match self {
            Self::TargetRegion { .. } | Self::Classifier { .. } => true,
            Self::Quantized { .. } => false,
        }
    }

    pub fn evaluate(&self, x: &[f64], class: usize) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("reward input must be finite"));
        }
        let r = match self {
            Self::TargetRegion { targets } => -dist(x, &targets[class % targets.len()]),
            Self::Quantized { targets, levels } => {
                let base = (-dist(x, &targets[class % targets.len()])).exp();
                let m = *levels as f64;
                (base * m).floor().min(m) / m
            }
            Self::Classifier { net } => net.prob(x, class),
        };
        debug_assert!(r.is_finite());
        Ok(r)
    }

    /// Analytic gradient w.r.t. `x`; only for differentiable kinds.
    pub fn grad(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        match self {
            Self::TargetRegion { targets } => {
                let t = &targets[class % targets.len()];
                let d = dist(x, t);
                if d == 0.0 {
                    return Ok(vec![0.0; x.len()]);
                }
                Ok(x.iter().zip(t).map(|(xi, ti)| -(xi - ti) / d).collect())
            }
            Self::Classifier { net } => net.prob_grad(x, class),
            Self::Quantized { .. } => {
                Err(invalid_arg("quantized reward exposes no gradient"))
            }
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Small softmax classifier used by the classifier-kind reward.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    pub dim: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub params: Vec<Tensor>,
}

impl ToyClassifier {
    pub fn new(dim: usize, n_classes: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let params = vec![
            Tensor::randn(hidden, dim, (2.0 / dim as f64).sqrt(), rng),
            Tensor::zeros(hidden, 1),
            Tensor::randn(n_classes, hidden, (1.0 / hidden as f64).sqrt(), rng),
            Tensor::zeros(n_classes, 1),
        ];
        Self { dim, n_classes, hidden, params }
    }

    fn logits_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = tape.matvec(vars[0], x, self.hidden, self.dim);
        let h = tape.add(h, vars[1]);
        let h = tape.tanh(h);
        let z = tape.matvec(vars[2], h, self.n_classes, self.hidden);
        tape.add(z, vars[3])
    }

    fn log_prob_graph(&self, x: &[f64], class: usize) -> (Tape, Vec<Var>, Var, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.data.clone())).collect();
        let xv = tape.leaf(x.to_vec());
        let logits = self.logits_on_tape(&mut tape, &vars, xv);
        let mut one_hot = vec![0.0; self.n_classes];
        one_hot[class] = 1.0;
        let oh = tape.leaf(one_hot);
        let zc = tape.dot(logits, oh);
        let lse = tape.log_sum_exp(logits);
        let logp = tape.sub(zc, lse);
        (tape, vars, xv, logp)
    }

    pub fn prob(&self, x: &[f64], class: usize) -> f64 {
        let (tape, _, _, logp) = self.log_prob_graph(x, class);
        tape.scalar_value(logp).exp()
    }

    pub fn prob_grad(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        let (tape, _, xv, logp) = self.log_prob_graph(x, class);
        let p = tape.scalar_value(logp).exp();
        let grads = tape.backward(&[(logp, vec![1.0])]);
        Ok(grads.get_or_zero(xv, x.len()).iter().map(|g| g * p).collect())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// Cross-entropy training of the toy classifier on a dataset.
pub fn train_classifier(
    dataset: &ToyDataset,
    hidden: usize,
    iters: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ToyClassifier> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = ToyClassifier::new(dataset.dim, dataset.n_classes, hidden, &mut rng);
    let mut params = clf.flat();
    let mut opt = Optimizer::new(OptimizerKind::Adam, lr, params.len());
    for _ in 0..iters {
        let batch = dataset.sample_batch(batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = clf.params.iter().map(|p| tape.leaf(p.data.clone())).collect();
        let mut total: Option<Var> = None;
        for (x, c) in &batch {
            let xv = tape.leaf(x.clone());
            let logits = clf.logits_on_tape(&mut tape, &vars, xv);
            let mut one_hot = vec![0.0; clf.n_classes];
            one_hot[*c] = 1.0;
            let oh = tape.leaf(one_hot);
            let zc = tape.dot(logits, oh);
            let lse = tape.log_sum_exp(logits);
            let nll = tape.sub(lse, zc);
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll),
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
        let grads = tape.backward(&[(loss, vec![1.0])]);
        let mut flat_grad = Vec::with_capacity(params.len());
        for (p, v) in clf.params.iter().zip(&vars) {
            flat_grad.extend(grads.get_or_zero(*v, p.len()));
        }
        opt.step(&mut params, &flat_grad);
        clf.set_flat(&params);
    }
    Ok(clf)
}

/// Learned scalar scorer `R(z, c)`: a trunk shaped like the teacher denoiser
/// (initialized from it, fully trainable) evaluated at the clean-data
/// timestep, plus a small scoring head.
#[derive(Debug, Clone)]
pub struct SurrogateReward {
    pub trunk: DenoiserNet,
    pub head: Vec<Tensor>,
    pub head_hidden: usize,
}

impl SurrogateReward {
    pub fn from_teacher(teacher: &DenoiserNet, head_hidden: usize, rng: &mut impl Rng) -> Self {
        let h = teacher.cfg.hidden;
        let head = vec![
            Tensor::randn(head_hidden, h, (1.0 / h as f64).sqrt(), rng),
            Tensor::zeros(head_hidden, 1),
            Tensor::randn(1, head_hidden, (1.0 / head_hidden as f64).sqrt(), rng),
            Tensor::zeros(1, 1),
        ];
        Self { trunk: teacher.clone(), head, head_hidden }
    }

    /// Leaf handles: trunk parameters followed by head parameters.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        let mut vars = self.trunk.register(tape);
        vars.extend(self.head.iter().map(|p| tape.leaf(p.data.clone())));
        vars
    }

    pub fn score_on_tape(&self, tape: &mut Tape, vars: &[Var], z: Var, class: usize) -> Var {
        let n_trunk = self.trunk.params.len();
        // Clean points are scored at the t = 0 embedding.
        let hidden = self.trunk.forward_hidden(tape, &vars[..n_trunk], z, 0.0, class);
        let hvars = &vars[n_trunk..];
        let g = tape.matvec(hvars[0], hidden, self.head_hidden, self.trunk.cfg.hidden);
        let g = tape.add(g, hvars[1]);
        let g = tape.tanh(g);
        let s = tape.matvec(hvars[2], g, 1, self.head_hidden);
        tape.add(s, hvars[3])
    }

    pub fn score(&self, z: &[f64], class: usize) -> Result<f64> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("surrogate input must be finite"));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let zv = tape.leaf(z.to_vec());
        let s = self.score_on_tape(&mut tape, &vars, zv, class);
        Ok(tape.scalar_value(s))
    }

    /// Score plus gradient w.r.t. the input point.
    pub fn score_grad_z(&self, z: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid_arg("surrogate input must be finite"));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let zv = tape.leaf(z.to_vec());
        let s = self.score_on_tape(&mut tape, &vars, zv, class);
        let value = tape.scalar_value(s);
        let grads = tape.backward(&[(s, vec![1.0])]);
        Ok((value, grads.get_or_zero(zv, z.len())))
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.head.iter().map(Tensor::len).sum::<usize>()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.trunk.flat();
        for p in &self.head {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.trunk.param_count();
        self.trunk.set_flat(&flat[..n]);
        let mut off = n;
        for p in &mut self.head {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn flat_grads(&self, grads: &crate::tape::Grads, vars: &[Var]) -> Vec<f64> {
        let n_trunk = self.trunk.params.len();
        let mut out = self.trunk.flat_grads(grads, &vars[..n_trunk]);
        for (p, v) in self.head.iter().zip(&vars[n_trunk..]) {
            out.extend(grads.get_or_zero(*v, p.len()));
        }
        out
    }
}

/// Winner/loser sample pair with black-box reward values.
#[derive(Debug, Clone)]
pub struct WLPair {
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
    pub class: usize,
    pub r_w: f64,
    pub r_l: f64,
    /// Which sampler step produced the group (1 or 2).
    pub step_index: u8,
}

/// Bradley-Terry pairwise loss `-ln sigma(R(z_w) - R(z_l))` from raw scores.
pub fn pair_loss_value(score_w: f64, score_l: f64) -> f64 {
    softplus(score_l - score_w)
}

pub fn surrogate_pair_loss(reward: &SurrogateReward, pair: &WLPair) -> Result<f64> {
    let sw = reward.score(&pair.z_w, pair.class)?;
    let sl = reward.score(&pair.z_l, pair.class)?;
    Ok(pair_loss_value(sw, sl))
}

/// Tape version over already-scored nodes; used by the training loops.
pub fn pair_loss_on_tape(tape: &mut Tape, score_w: Var, score_l: Var) -> Var {
    let gap = tape.sub(score_l, score_w);
    tape.softplus(gap)
}

/// Mine the best/worst pair of a sample group by black-box reward.
///
/// Ties break to the lowest index; a fully tied group yields `None`.
pub fn select_wl_pair(
    samples: &[Vec<f64>],
    class: usize,
    reward: &RewardSignal,
    step_index: u8,
) -> Result<Option<WLPair>> {
    if samples.len() < 2 {
        return Err(invalid_arg("pair mining needs at least two samples"));
    }
    let rewards: Vec<f64> = samples
        .iter()
        .map(|s| reward.evaluate(s, class))
        .collect::<Result<_>>()?;
    let mut wi = 0;
    let mut li = 0;
    for (i, r) in rewards.iter().enumerate() {
        if *r > rewards[wi] {
            wi = i;
        }
        if *r < rewards[li] {
            li = i;
        }
    }
    if rewards[wi] == rewards[li] {
        return Ok(None);
    }
    Ok(Some(WLPair {
        z_w: samples[wi].clone(),
        z_l: samples[li].clone(),
        class,
        r_w: rewards[wi],
        r_l: rewards[li],
        step_index,
    }))
}
