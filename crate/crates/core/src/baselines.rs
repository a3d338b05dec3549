//! Competing fine-tuners: degenerate policy gradient, reward-weighted
//! regression, generate-filter-distill, and the ground-truth-gradient
//! ablation. All share the sampler, the offline regularizer, and the
//! per-step sample budget with the surrogate pipeline.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{
    cm_sample_rng, distill_loss_on_tape, ema_update, ConsistencyModel, TwoStepTrace,
};
use crate::diffusion::forward_diffuse;
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{gauss, Optimizer};
use crate::rewards::RewardSignal;
use crate::tape::{Tape, Var};
use crate::train::{draw_grid_t, FinetuneResult, FtContext, StepMetric, TrainConfig};

/// One sampler transition, as seen by the policy-gradient view.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x_from: Vec<f64>,
    pub x_to: Vec<f64>,
    pub t_from: usize,
    pub t_to: usize,
    /// Std of the transition density; 0 marks a deterministic transition.
    pub sigma: f64,
    pub class: usize,
}

impl Transition {
    /// The stochastic first transition of a two-step trace.
    pub fn first_of(trace: &TwoStepTrace, f: &ConsistencyModel) -> Self {
        let ab = f.sched.alpha_bar(trace.t_mid);
        Self {
            x_from: trace.x_init.clone(),
            x_to: trace.x_mid.clone(),
            t_from: f.t_max(),
            t_to: trace.t_mid,
            sigma: (1.0 - ab).sqrt(),
            class: trace.class,
        }
    }

    /// The deterministic second transition (sigma = 0; no density).
    pub fn second_of(trace: &TwoStepTrace, _f: &ConsistencyModel) -> Self {
        Self {
            x_from: trace.x_mid.clone(),
            x_to: trace.z2.clone(),
            t_from: trace.t_mid,
            t_to: 0,
            sigma: 0.0,
            class: trace.class,
        }
    }
}

/// Log-density of the transition under the current sampler:
/// `log N(x_to | sqrt(alpha_bar(t_to)) f(x_from, t_from, c), sigma^2 I)`.
pub fn gaussian_logprob(f: &ConsistencyModel, tr: &Transition) -> Result<f64> {
    if tr.sigma == 0.0 {
        return Err(Error::NoDensity(
            "deterministic transition admits no density".into(),
        ));
    }
    let out = f.apply(&tr.x_from, tr.t_from, tr.class)?;
    let ab = f.sched.alpha_bar(tr.t_to);
    let d = tr.x_to.len() as f64;
    let sq: f64 = tr
        .x_to
        .iter()
        .zip(&out)
        .map(|(x, z)| {
            let m = ab.sqrt() * z;
            (x - m) * (x - m)
        })
        .sum();
    Ok(-0.5 * sq / (tr.sigma * tr.sigma)
        - 0.5 * d * (std::f64::consts::TAU * tr.sigma * tr.sigma).ln())
}

/// Same log-density on a tape, differentiable w.r.t. the sampler parameters.
fn logprob_on_tape(
    tape: &mut Tape,
    f: &ConsistencyModel,
    vars: &[Var],
    tr: &Transition,
) -> Result<Var> {
    if tr.sigma == 0.0 {
        return Err(Error::NoDensity(
            "deterministic transition admits no density".into(),
        ));
    }
    let ab = f.sched.alpha_bar(tr.t_to);
    let x_from = tape.leaf(tr.x_from.clone());
    let out = f.forward(tape, vars, x_from, tr.t_from, tr.class);
    let mean = tape.scale(out, ab.sqrt());
    let x_to = tape.leaf(tr.x_to.clone());
    let diff = tape.sub(x_to, mean);
    let sq = tape.sq_norm(diff);
    let d = tr.x_to.len() as f64;
    let scaled = tape.scale(sq, -0.5 / (tr.sigma * tr.sigma));
    let norm = tape.scalar(-0.5 * d * (std::f64::consts::TAU * tr.sigma * tr.sigma).ln());
    Ok(tape.add(scaled, norm))
}

/// REINFORCE gradient of `-(1/N) sum_i a_i log p_theta(first transition_i)`.
pub fn ddpo_grad(
    f: &ConsistencyModel,
    transitions: &[Transition],
    advantages: &[f64],
) -> Result<Vec<f64>> {
    if transitions.is_empty() || transitions.len() != advantages.len() {
        return Err(invalid_arg("need matching nonempty transitions and advantages"));
    }
    let mut tape = Tape::new();
    let vars = f.register(&mut tape);
    let mut total: Option<Var> = None;
    for (tr, a) in transitions.iter().zip(advantages) {
        let lp = logprob_on_tape(&mut tape, f, &vars, tr)?;
        let term = tape.scale(lp, -a / transitions.len() as f64);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let loss = total.unwrap();
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok(f.trunk.flat_grads(&grads, &vars))
}

/// Policy-gradient fine-tuning of the two-step sampler.
///
/// Only the degenerate form is well-posed at H=2: the final transition is
/// deterministic, so `degenerate = false` is refused with a no-density error
/// rather than silently optimizing half an objective.
#[allow(clippy::too_many_arguments)]
pub fn finetune_ddpo(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward: &RewardSignal,
    ctx: &FtContext,
    conditions: &[usize],
    steps: usize,
    seed: u64,
    degenerate: bool,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if !degenerate {
        return Err(Error::NoDensity(
            "full policy gradient at H=2 requires the second transition's density, \
             which does not exist"
                .into(),
        ));
    }
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = f.clone();
    let mut theta = model.flat();
    let mut ema = theta.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut metrics = Vec::new();
    let mut samples_drawn = 0usize;
    for step in 0..steps {
        let class = conditions[rng.gen_range(0..conditions.len())];
        let mut traces = Vec::with_capacity(cfg.n_s);
        for _ in 0..cfg.n_s {
            traces.push(cm_sample_rng(&model, class, 2, &mut rng)?.two_step().unwrap());
        }
        samples_drawn += traces.len();
        let rewards: Vec<f64> = traces
            .iter()
            .map(|t| reward.evaluate(&t.z2, class))
            .collect::<Result<_>>()?;
        let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let transitions: Vec<Transition> =
            traces.iter().map(|t| Transition::first_of(t, &model)).collect();
        let mut grad = ddpo_grad(&model, &transitions, &advantages)?;
        let (reg, reg_grad) = regularizer_grad(&model, cfg, ctx, &mut rng)?;
        for (g, rg) in grad.iter_mut().zip(&reg_grad) {
            *g += cfg.c * rg;
        }
        opt.step(&mut theta, &grad);
        model.set_flat(&theta);
        ema = ema_update(&theta, &ema, cfg.mu)?;
        let r1: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z1, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        metrics.push(StepMetric {
            stage: "ddpo",
            step,
            reward_mean_1step: r1,
            reward_mean_2step: baseline,
            surrogate_acc: f64::NAN,
            l_lcm: reg,
            s1: f64::NAN,
            s2: f64::NAN,
            loss: cfg.c * reg,
        });
    }
    let mut ema_model = model.clone();
    ema_model.set_flat(&ema);
    Ok(FinetuneResult {
        model,
        ema: ema_model,
        surrogate: dummy_surrogate(f, seed),
        metrics,
        skipped_adaptations: 0,
        samples_drawn,
    })
}

// Baseline results carry no surrogate; reuse the trunk so shapes stay valid.
fn dummy_surrogate(f: &ConsistencyModel, seed: u64) -> crate::rewards::SurrogateReward {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::rewards::SurrogateReward::from_teacher(&f.trunk, 4, &mut rng)
}

/// Offline consistency regularizer `L_lcm` value and gradient.
fn regularizer_grad(
    f: &ConsistencyModel,
    cfg: &TrainConfig,
    ctx: &FtContext,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let batch = ctx.dataset.sample_batch(cfg.distill_batch, rng);
    let target = f.clone();
    let mut tape = Tape::new();
    let vars = f.register(&mut tape);
    let loss =
        distill_loss_on_tape(&mut tape, f, &vars, &target, ctx.teacher, &batch, ctx.k, rng)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok((value, f.trunk.flat_grads(&grads, &vars)))
}

/// Softmax weights `softmax(r / temperature)` within a sample group.
pub fn softmax_weights(rewards: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid_arg("need at least one reward"));
    }
    if temperature <= 0.0 {
        return Err(invalid_arg("temperature must be > 0"));
    }
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rewards.iter().map(|r| ((r - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / z).collect())
}

/// Weighted consistency regression of the sampler toward chosen outputs:
/// each target point is forward-noised to a random grid timestep and the
/// sampler is regressed onto the clean point with the given weight.
fn weighted_regression_grad(
    f: &ConsistencyModel,
    targets: &[(Vec<f64>, usize, f64)],
    ctx: &FtContext,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = f.register(&mut tape);
    let mut total: Option<Var> = None;
    for (x0, class, weight) in targets {
        let t = draw_grid_t(ctx.k, f.t_max(), rng);
        let z: Vec<f64> = (0..x0.len()).map(|_| gauss(rng)).collect();
        let x_t = forward_diffuse(x0, t, &z, &f.sched)?;
        let xt = tape.leaf(x_t);
        let out = f.forward(&mut tape, &vars, xt, t, *class);
        let tgt = tape.leaf(x0.clone());
        let diff = tape.sub(out, tgt);
        let sq = tape.sq_norm(diff);
        let term = tape.scale(sq, *weight);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let loss = total.ok_or_else(|| invalid_arg("need at least one regression target"))?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok((value, f.trunk.flat_grads(&grads, &vars)))
}

/// Reward-weighted regression fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn finetune_rwr(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward: &RewardSignal,
    ctx: &FtContext,
    conditions: &[usize],
    steps: usize,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = f.clone();
    let mut theta = model.flat();
    let mut ema = theta.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut metrics = Vec::new();
    let mut samples_drawn = 0usize;
    for step in 0..steps {
        let class = conditions[rng.gen_range(0..conditions.len())];
        let mut traces = Vec::with_capacity(cfg.n_s);
        for _ in 0..cfg.n_s {
            traces.push(cm_sample_rng(&model, class, 2, &mut rng)?.two_step().unwrap());
        }
        samples_drawn += traces.len();
        let rewards: Vec<f64> = traces
            .iter()
            .map(|t| reward.evaluate(&t.z2, class))
            .collect::<Result<_>>()?;
        let weights = softmax_weights(&rewards, cfg.temperature)?;
        let targets: Vec<(Vec<f64>, usize, f64)> = traces
            .iter()
            .zip(&weights)
            .map(|(t, w)| (t.z2.clone(), class, *w))
            .collect();
        let (wl, mut grad) = weighted_regression_grad(&model, &targets, ctx, &mut rng)?;
        let (reg, reg_grad) = regularizer_grad(&model, cfg, ctx, &mut rng)?;
        for (g, rg) in grad.iter_mut().zip(&reg_grad) {
            *g += cfg.c * rg;
        }
        opt.step(&mut theta, &grad);
        model.set_flat(&theta);
        ema = ema_update(&theta, &ema, cfg.mu)?;
        let r1: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z1, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        metrics.push(StepMetric {
            stage: "rwr",
            step,
            reward_mean_1step: r1,
            reward_mean_2step: rewards.iter().sum::<f64>() / rewards.len() as f64,
            surrogate_acc: f64::NAN,
            l_lcm: reg,
            s1: f64::NAN,
            s2: f64::NAN,
            loss: wl + cfg.c * reg,
        });
    }
    let mut ema_model = model.clone();
    ema_model.set_flat(&ema);
    Ok(FinetuneResult {
        model,
        ema: ema_model,
        surrogate: dummy_surrogate(f, seed),
        metrics,
        skipped_adaptations: 0,
        samples_drawn,
    })
}

/// Index of the best sample by reward, lowest index on ties (the same rule
/// the pair miner uses).
pub fn select_best(
    samples: &[Vec<f64>],
    class: usize,
    reward: &RewardSignal,
) -> Result<usize> {
    if samples.is_empty() {
        return Err(invalid_arg("need at least one sample"));
    }
    let mut best = 0;
    let mut best_r = reward.evaluate(&samples[0], class)?;
    for (i, s) in samples.iter().enumerate().skip(1) {
        let r = reward.evaluate(s, class)?;
        if r > best_r {
            best = i;
            best_r = r;
        }
    }
    Ok(best)
}

/// Generate-filter-distill fine-tuning: keep the best z1 and best z2 of each
/// group and regress the sampler onto them, plus the offline regularizer.
#[allow(clippy::too_many_arguments)]
pub fn finetune_gors(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward: &RewardSignal,
    ctx: &FtContext,
    conditions: &[usize],
    steps: usize,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = f.clone();
    let mut theta = model.flat();
    let mut ema = theta.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut metrics = Vec::new();
    let mut samples_drawn = 0usize;
    for step in 0..steps {
        let class = conditions[rng.gen_range(0..conditions.len())];
        let mut traces = Vec::with_capacity(cfg.n_s);
        for _ in 0..cfg.n_s {
            traces.push(cm_sample_rng(&model, class, 2, &mut rng)?.two_step().unwrap());
        }
        samples_drawn += traces.len();
        let z1s: Vec<Vec<f64>> = traces.iter().map(|t| t.z1.clone()).collect();
        let z2s: Vec<Vec<f64>> = traces.iter().map(|t| t.z2.clone()).collect();
        let b1 = select_best(&z1s, class, reward)?;
        let b2 = select_best(&z2s, class, reward)?;
        let targets = vec![
            (z1s[b1].clone(), class, 1.0),
            (z2s[b2].clone(), class, 1.0),
        ];
        let (fl, mut grad) = weighted_regression_grad(&model, &targets, ctx, &mut rng)?;
        let (reg, reg_grad) = regularizer_grad(&model, cfg, ctx, &mut rng)?;
        for (g, rg) in grad.iter_mut().zip(&reg_grad) {
            *g += cfg.c * rg;
        }
        opt.step(&mut theta, &grad);
        model.set_flat(&theta);
        ema = ema_update(&theta, &ema, cfg.mu)?;
        let r1: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z1, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        let r2: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z2, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        metrics.push(StepMetric {
            stage: "gors",
            step,
            reward_mean_1step: r1,
            reward_mean_2step: r2,
            surrogate_acc: f64::NAN,
            l_lcm: reg,
            s1: f64::NAN,
            s2: f64::NAN,
            loss: fl + cfg.c * reg,
        });
    }
    let mut ema_model = model.clone();
    ema_model.set_flat(&ema);
    Ok(FinetuneResult {
        model,
        ema: ema_model,
        surrogate: dummy_surrogate(f, seed),
        metrics,
        skipped_adaptations: 0,
        samples_drawn,
    })
}

/// Loss `c L_lcm - c1 r(z1) - c2 r(z2)` with the exact gradient obtained by
/// seeding the backward pass with the reward's analytic input-gradients.
#[allow(clippy::too_many_arguments)]
pub fn direct_grad_loss_and_grad(
    f: &ConsistencyModel,
    target: &ConsistencyModel,
    reward: &RewardSignal,
    trace: &TwoStepTrace,
    cfg: &TrainConfig,
    ctx: &FtContext,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if !reward.differentiable() {
        return Err(invalid_arg(
            "direct-gradient fine-tuning needs a differentiable reward",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = ctx.dataset.sample_batch(cfg.distill_batch, &mut rng);
    let mut tape = Tape::new();
    let vars = f.register(&mut tape);
    let l_lcm =
        distill_loss_on_tape(&mut tape, f, &vars, target, ctx.teacher, &batch, ctx.k, &mut rng)?;
    let reg = tape.scale(l_lcm, cfg.c);

    let x_init = tape.leaf(trace.x_init.clone());
    let z1 = f.forward(&mut tape, &vars, x_init, f.t_max(), trace.class);
    let ab = f.sched.alpha_bar(trace.t_mid);
    let scaled = tape.scale(z1, ab.sqrt());
    let noise: Vec<f64> = trace.noise.iter().map(|n| (1.0 - ab).sqrt() * n).collect();
    let noise = tape.leaf(noise);
    let x_mid = tape.add(scaled, noise);
    let z2 = f.forward(&mut tape, &vars, x_mid, trace.t_mid, trace.class);

    let z1_val = tape.value(z1).to_vec();
    let z2_val = tape.value(z2).to_vec();
    let r1 = reward.evaluate(&z1_val, trace.class)?;
    let r2 = reward.evaluate(&z2_val, trace.class)?;
    let g1: Vec<f64> = reward
        .grad(&z1_val, trace.class)?
        .iter()
        .map(|g| -cfg.c1 * g)
        .collect();
    let g2: Vec<f64> = reward
        .grad(&z2_val, trace.class)?
        .iter()
        .map(|g| -cfg.c2 * g)
        .collect();
    let value = tape.scalar_value(reg) - cfg.c1 * r1 - cfg.c2 * r2;
    let grads = tape.backward(&[(reg, vec![1.0]), (z1, g1), (z2, g2)]);
    Ok((value, f.trunk.flat_grads(&grads, &vars)))
}

/// Fine-tuning against the true differentiable reward; the oracle
/// upper-reference for the surrogate pipeline.
#[allow(clippy::too_many_arguments)]
pub fn finetune_direct(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward: &RewardSignal,
    ctx: &FtContext,
    conditions: &[usize],
    steps: usize,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if !reward.differentiable() {
        return Err(invalid_arg(
            "direct-gradient fine-tuning needs a differentiable reward",
        ));
    }
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = f.clone();
    let mut theta = model.flat();
    let mut ema = theta.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut metrics = Vec::new();
    let mut samples_drawn = 0usize;
    for step in 0..steps {
        let class = conditions[rng.gen_range(0..conditions.len())];
        let mut traces = Vec::with_capacity(cfg.n_s);
        for _ in 0..cfg.n_s {
            traces.push(cm_sample_rng(&model, class, 2, &mut rng)?.two_step().unwrap());
        }
        samples_drawn += traces.len();
        let trace = traces[rng.gen_range(0..traces.len())].clone();
        let target = model.clone();
        let dg_seed = rng.gen();
        let (loss, grad) =
            direct_grad_loss_and_grad(&model, &target, reward, &trace, cfg, ctx, dg_seed)?;
        opt.step(&mut theta, &grad);
        model.set_flat(&theta);
        ema = ema_update(&theta, &ema, cfg.mu)?;
        let r1: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z1, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        let r2: f64 = traces
            .iter()
            .map(|t| reward.evaluate(&t.z2, class))
            .sum::<Result<f64>>()?
            / traces.len() as f64;
        metrics.push(StepMetric {
            stage: "direct",
            step,
            reward_mean_1step: r1,
            reward_mean_2step: r2,
            surrogate_acc: f64::NAN,
            l_lcm: f64::NAN,
            s1: f64::NAN,
            s2: f64::NAN,
            loss,
        });
    }
    let mut ema_model = model.clone();
    ema_model.set_flat(&ema);
    Ok(FinetuneResult {
        model,
        ema: ema_model,
        surrogate: dummy_surrogate(f, seed),
        metrics,
        skipped_adaptations: 0,
        samples_drawn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::cm_sample;
    use crate::diffusion::{make_schedule, make_toy_dataset, DatasetKind, ScheduleKind, ToyDataset};
    use crate::nn::{DenoiserNet, NetConfig};
    use rand::SeedableRng;

    fn tiny(seed: u64) -> (ConsistencyModel, DenoiserNet, ToyDataset) {
        let sched = make_schedule(20, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
        let ds = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetConfig { dim: 2, n_classes: 2, hidden: 12, t_dim: 4, blocks: 1 };
        let teacher = DenoiserNet::new(cfg, &mut rng);
        let f = ConsistencyModel::new(DenoiserNet::new(cfg, &mut rng), sched);
        (f, teacher, ds)
    }

    #[test]
    fn logprob_at_mean_is_pure_normalizer() {
        let (f, _, _) = tiny(0);
        let trace = cm_sample(&f, 0, 2, 1).unwrap().two_step().unwrap();
        let mut tr = Transition::first_of(&trace, &f);
        // Place x_to exactly at the transition mean.
        let out = f.apply(&tr.x_from, tr.t_from, tr.class).unwrap();
        let ab = f.sched.alpha_bar(tr.t_to);
        tr.x_to = out.iter().map(|z| ab.sqrt() * z).collect();
        let lp = gaussian_logprob(&f, &tr).unwrap();
        let d = 2.0;
        let expect = -0.5 * d * (std::f64::consts::TAU * tr.sigma * tr.sigma).ln();
        assert!((lp - expect).abs() < 1e-12);
    }

    #[test]
    fn logprob_matches_direct_density_oracle() {
        let (f, _, _) = tiny(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..100 {
            let trace = cm_sample(&f, i % 2, 2, 100 + i as u64).unwrap().two_step().unwrap();
            let mut tr = Transition::first_of(&trace, &f);
            tr.x_to = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let lp = gaussian_logprob(&f, &tr).unwrap();
            // Independent oracle: product of per-coordinate normal densities.
            let out = f.apply(&tr.x_from, tr.t_from, tr.class).unwrap();
            let ab = f.sched.alpha_bar(tr.t_to);
            let mut oracle = 0.0;
            for (x, z) in tr.x_to.iter().zip(&out) {
                let m = ab.sqrt() * z;
                let u = (x - m) / tr.sigma;
                oracle += -0.5 * u * u
                    - 0.5 * (std::f64::consts::TAU).ln()
                    - tr.sigma.ln();
            }
            assert!((lp - oracle).abs() < 1e-10, "trace {i}: {lp} vs {oracle}");
        }
    }

    #[test]
    fn deterministic_transition_has_no_density() {
        let (f, _, _) = tiny(3);
        let trace = cm_sample(&f, 0, 2, 4).unwrap().two_step().unwrap();
        let tr = Transition::second_of(&trace, &f);
        assert_eq!(tr.sigma, 0.0);
        assert!(matches!(gaussian_logprob(&f, &tr), Err(Error::NoDensity(_))));
    }

    #[test]
    fn full_policy_gradient_refused_at_two_steps() {
        let (f, teacher, ds) = tiny(4);
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
        let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
        let cfg = TrainConfig::default();
        let err =
            finetune_ddpo(&cfg, &f, &reward, &ctx, &[0, 1], 1, 0, false).unwrap_err();
        assert!(matches!(err, Error::NoDensity(_)), "got {err}");
        // The degenerate form runs.
        let out = finetune_ddpo(&cfg, &f, &reward, &ctx, &[0, 1], 2, 0, true).unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert_eq!(out.samples_drawn, 2 * cfg.n_s);
    }

    #[test]
    fn baseline_subtraction_kills_constant_reward_gradient() {
        // Score-function identity: with constant reward the mean-baselined
        // estimator is exactly zero per batch; without it, it is not.
        let (f, _, _) = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut with_norm: f64 = 0.0;
        let mut without_norm: f64 = 0.0;
        for _ in 0..20 {
            let mut transitions = Vec::new();
            for _ in 0..8 {
                let trace =
                    cm_sample(&f, 0, 2, rng.gen()).unwrap().two_step().unwrap();
                transitions.push(Transition::first_of(&trace, &f));
            }
            let flat = vec![1.0; 8];
            let centered = vec![0.0; 8];
            let g0 = ddpo_grad(&f, &transitions, &centered).unwrap();
            let g1 = ddpo_grad(&f, &transitions, &flat).unwrap();
            with_norm += g0.iter().map(|g| g * g).sum::<f64>().sqrt();
            without_norm += g1.iter().map(|g| g * g).sum::<f64>().sqrt();
        }
        assert!(with_norm <= 1e-3 * without_norm, "{with_norm} vs {without_norm}");
    }

    #[test]
    fn softmax_weight_limits() {
        let r = [1.0, 2.0, 3.0];
        // High temperature: uniform.
        let w = softmax_weights(&r, 1e9).unwrap();
        for wi in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-6);
        }
        // Low temperature: one-hot on the max.
        let w = softmax_weights(&r, 1e-3).unwrap();
        assert!(w[2] > 0.999);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax_weights(&[], 0.1).is_err());
        assert!(softmax_weights(&r, 0.0).is_err());
    }

    #[test]
    fn best_selection_shares_tie_break_rule() {
        let reward = RewardSignal::target_region(vec![vec![0.0, 0.0]]).unwrap();
        let samples = vec![vec![0.5, 0.0], vec![0.2, 0.0], vec![-0.2, 0.0]];
        // rewards: [-0.5, -0.2, -0.2] -> first of the tied maxima wins.
        assert_eq!(select_best(&samples, 0, &reward).unwrap(), 1);
        assert!(select_best(&[], 0, &reward).is_err());
    }

    #[test]
    fn direct_grad_needs_differentiable_reward() {
        let (f, teacher, ds) = tiny(7);
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
        let cfg = TrainConfig::default();
        let quant = RewardSignal::quantized(ds.means.clone(), 4).unwrap();
        assert!(finetune_direct(&cfg, &f, &quant, &ctx, &[0], 1, 0).is_err());
        let trace = cm_sample(&f, 0, 2, 8).unwrap().two_step().unwrap();
        assert!(
            direct_grad_loss_and_grad(&f, &f, &quant, &trace, &cfg, &ctx, 0).is_err()
        );
    }

    #[test]
    fn direct_grad_matches_finite_differences() {
        let (f, teacher, ds) = tiny(9);
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
        let cfg = TrainConfig::default();
        let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
        let trace = cm_sample(&f, 1, 2, 10).unwrap().two_step().unwrap();
        let (_, grad) =
            direct_grad_loss_and_grad(&f, &f, &reward, &trace, &cfg, &ctx, 77).unwrap();
        let base = f.flat();
        let mut f2 = f.clone();
        let eps = 1e-6;
        let mut idx_rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let i = idx_rng.gen_range(0..base.len());
            let mut hi = base.clone();
            hi[i] += eps;
            f2.set_flat(&hi);
            let (fh, _) =
                direct_grad_loss_and_grad(&f2, &f, &reward, &trace, &cfg, &ctx, 77).unwrap();
            let mut lo = base.clone();
            lo[i] -= eps;
            f2.set_flat(&lo);
            let (fl, _) =
                direct_grad_loss_and_grad(&f2, &f, &reward, &trace, &cfg, &ctx, 77).unwrap();
            let fd = (fh - fl) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "coord {i}: fd={fd} ad={}", grad[i]);
        }
    }

    #[test]
    fn budgets_match_across_methods() {
        let (f, teacher, ds) = tiny(12);
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
        let cfg = TrainConfig::default();
        let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
        let steps = 3;
        let ddpo = finetune_ddpo(&cfg, &f, &reward, &ctx, &[0, 1], steps, 1, true).unwrap();
        let rwr = finetune_rwr(&cfg, &f, &reward, &ctx, &[0, 1], steps, 1).unwrap();
        let gors = finetune_gors(&cfg, &f, &reward, &ctx, &[0, 1], steps, 1).unwrap();
        let direct = finetune_direct(&cfg, &f, &reward, &ctx, &[0, 1], steps, 1).unwrap();
        assert_eq!(ddpo.samples_drawn, steps * cfg.n_s);
        assert_eq!(rwr.samples_drawn, steps * cfg.n_s);
        assert_eq!(gors.samples_drawn, steps * cfg.n_s);
        assert_eq!(direct.samples_drawn, steps * cfg.n_s);
    }
}
