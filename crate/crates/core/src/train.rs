//! Surrogate pre-training, score normalization, the fine-tuning loss, and the
//! alternating fine-tune / online-adaptation loop, plus the alternative
//! fine-tuning scheme kept for ablation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{
    cm_sample_rng, distill_loss_on_tape, ema_update, ConsistencyModel, TwoStepTrace,
};
use crate::diffusion::{forward_diffuse, EpsPredictor, ToyDataset};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{gauss, DenoiserNet, Optimizer, OptimizerKind};
use crate::rewards::{pair_loss_on_tape, select_wl_pair, RewardSignal, SurrogateReward, WLPair};
use crate::tape::{Tape, Var};

/// Divisor floor for score normalization.
pub const STATS_DELTA: f64 = 1e-6;
/// Residual window length.
pub const STATS_WINDOW: usize = 1024;
/// EMA decay of the running mean.
pub const STATS_DECAY: f64 = 0.99;

/// Moving mean / moving 90th-percentile tracker for raw surrogate scores.
#[derive(Debug, Clone, Default)]
pub struct RunningStats {
    pub mean: f64,
    /// Ring buffer of the last `STATS_WINDOW` residuals (value - prior mean).
    pub window: Vec<f64>,
    pub p90: f64,
    pub count: usize,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn initialized(&self) -> bool {
        self.count > 0
    }

    /// Normalization divisor: the windowed p90 floored at delta.
    pub fn divisor(&self) -> f64 {
        self.p90.max(STATS_DELTA)
    }
}

/// Nearest-rank 90th percentile.
fn percentile90(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = (0.9 * sorted.len() as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

pub fn update_stats(stats: &RunningStats, value: f64) -> Result<RunningStats> {
    if !value.is_finite() {
        return Err(invalid_arg("stats update requires a finite value"));
    }
    let mut next = stats.clone();
    let residual = if next.count == 0 {
        next.mean = value;
        0.0
    } else {
        value - next.mean
    };
    next.window.push(residual);
    if next.window.len() > STATS_WINDOW {
        next.window.remove(0);
    }
    next.mean = STATS_DECAY * next.mean + (1.0 - STATS_DECAY) * value;
    next.p90 = percentile90(&next.window).max(0.0);
    next.count += 1;
    Ok(next)
}

/// `S(value) = min(1, (value - mean) / max(p90, delta))`; unbounded below.
pub fn normalize_clip(stats: &RunningStats, value: f64) -> Result<f64> {
    if !stats.initialized() {
        return Err(Error::InvalidState(
            "score stats have no observations yet".into(),
        ));
    }
    Ok(((value - stats.mean) / stats.divisor()).min(1.0))
}

/// Loop hyperparameters shared by LaSRO and the baselines.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Samples per group when mining pairs / picking S-term traces.
    pub n_s: usize,
    /// Reward fine-tuning steps per outer iteration.
    pub n1: usize,
    /// Online-adaptation steps per outer iteration.
    pub n2: usize,
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
    /// Surrogate pre-training rate.
    pub eta: f64,
    /// Sampler fine-tuning rate.
    pub eta1: f64,
    /// Online-adaptation rate.
    pub eta2: f64,
    /// EMA rate of the evaluation-only sampler copy.
    pub mu: f64,
    pub buffer_capacity: usize,
    pub optimizer: OptimizerKind,
    /// RWR softmax temperature.
    pub temperature: f64,
    /// Points per offline regularizer batch.
    pub distill_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_s: 4,
            n1: 1,
            n2: 1,
            c: 1.0,
            c1: 0.5,
            c2: 1.0,
            eta: 1e-3,
            eta1: 1e-3,
            eta2: 1e-3,
            mu: 0.95,
            buffer_capacity: 4096,
            optimizer: OptimizerKind::Adam,
            temperature: 0.1,
            distill_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_s < 2 {
            return Err(invalid_arg(format!("N_s must be >= 2, got {}", self.n_s)));
        }
        for (name, v) in [("c", self.c), ("c1", self.c1), ("c2", self.c2)] {
            if v < 0.0 {
                return Err(invalid_arg(format!("coefficient {name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("eta", self.eta), ("eta1", self.eta1), ("eta2", self.eta2)] {
            if v <= 0.0 {
                return Err(invalid_arg(format!("rate {name} must be > 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(invalid_arg(format!("mu must be in [0, 1], got {}", self.mu)));
        }
        if self.buffer_capacity == 0 {
            return Err(invalid_arg("replay buffer capacity must be >= 1"));
        }
        if self.temperature <= 0.0 {
            return Err(invalid_arg("softmax temperature must be > 0"));
        }
        if self.distill_batch == 0 {
            return Err(invalid_arg("distill batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Bounded FIFO of winner/loser pairs, cleared at every outer iteration.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pairs: Vec<WLPair>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { pairs: Vec::new(), capacity }
    }

    pub fn push(&mut self, pair: WLPair) {
        if self.pairs.len() == self.capacity {
            self.pairs.remove(0);
        }
        self.pairs.push(pair);
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sample<'a>(&'a self, rng: &mut impl Rng) -> Option<&'a WLPair> {
        if self.pairs.is_empty() {
            None
        } else {
            Some(&self.pairs[rng.gen_range(0..self.pairs.len())])
        }
    }
}

/// Fraction of pairs the surrogate orders like the black-box reward.
pub fn pair_accuracy(reward: &SurrogateReward, pairs: &[WLPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid_arg("accuracy needs at least one pair"));
    }
    let mut hits = 0usize;
    for p in pairs {
        if reward.score(&p.z_w, p.class)? > reward.score(&p.z_l, p.class)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Draw one group of two-step traces and mine one pair from each step's
/// outputs. Returns the traces and the (possibly empty) pairs.
fn mine_group(
    f: &ConsistencyModel,
    reward: &RewardSignal,
    class: usize,
    n_s: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<TwoStepTrace>, Vec<WLPair>)> {
    let mut traces = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        traces.push(cm_sample_rng(f, class, 2, rng)?.two_step().unwrap());
    }
    let z1s: Vec<Vec<f64>> = traces.iter().map(|t| t.z1.clone()).collect();
    let z2s: Vec<Vec<f64>> = traces.iter().map(|t| t.z2.clone()).collect();
    let mut pairs = Vec::new();
    if let Some(p) = select_wl_pair(&z1s, class, reward, 1)? {
        pairs.push(p);
    }
    if let Some(p) = select_wl_pair(&z2s, class, reward, 2)? {
        pairs.push(p);
    }
    Ok((traces, pairs))
}

fn pair_grad_step(
    reward: &SurrogateReward,
    pairs: &[&WLPair],
    params: &mut [f64],
    opt: &mut Optimizer,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = reward.register(&mut tape);
    let mut total: Option<Var> = None;
    for p in pairs {
        let zw = tape.leaf(p.z_w.clone());
        let zl = tape.leaf(p.z_l.clone());
        let sw = reward.score_on_tape(&mut tape, &vars, zw, p.class);
        let sl = reward.score_on_tape(&mut tape, &vars, zl, p.class);
        let l = pair_loss_on_tape(&mut tape, sw, sl);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l),
        });
    }
    let loss = total.expect("caller guarantees at least one pair");
    let value = tape.scalar_value(loss);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    let grad = reward.flat_grads(&grads, &vars);
    opt.step(params, &grad);
    Ok(value)
}

/// Pre-training stage: mine winner/loser pairs from both sampler steps of a
/// frozen two-step sampler and fit the surrogate by pairwise loss descent.
///
/// Returns the trained surrogate and the per-update loss trace. 100
/// consecutive iterations without a single usable pair abort with a
/// degenerate-reward diagnostic.
pub fn pretrain_surrogate(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward_model: &SurrogateReward,
    reward: &RewardSignal,
    conditions: &[usize],
    iters: usize,
    seed: u64,
) -> Result<(SurrogateReward, Vec<f64>)> {
    cfg.validate()?;
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = reward_model.clone();
    let mut params = model.flat();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta, params.len());
    let mut losses = Vec::new();
    let mut dry_spell = 0usize;
    for _ in 0..iters {
        let class = conditions[rng.gen_range(0..conditions.len())];
        let (_, pairs) = mine_group(f, reward, class, cfg.n_s, &mut rng)?;
        if pairs.is_empty() {
            dry_spell += 1;
            if dry_spell >= 100 {
                return Err(Error::DegenerateReward(
                    "no usable winner/loser pairs in 100 consecutive iterations".into(),
                ));
            }
            continue;
        }
        dry_spell = 0;
        let refs: Vec<&WLPair> = pairs.iter().collect();
        let loss = pair_grad_step(&model, &refs, &mut params, &mut opt)?;
        model.set_flat(&params);
        losses.push(loss);
    }
    Ok((model, losses))
}

/// Named terms of the fine-tuning loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_lcm: f64,
    pub s1: f64,
    pub s2: f64,
}

impl LossTerms {
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        cfg.c * self.l_lcm - cfg.c1 * self.s1 - cfg.c2 * self.s2
    }
}

/// Fine-tuning loss `c L_lcm - c1 S[R(z1)] - c2 S[R(z2)]` with the gradient
/// w.r.t. the sampler parameters. The stats enter as constants; the target
/// branch of the regularizer is the frozen current sampler.
#[allow(clippy::too_many_arguments)]
pub fn lasro_ft_loss_and_grad(
    f: &ConsistencyModel,
    target: &ConsistencyModel,
    reward_model: &SurrogateReward,
    trace: &TwoStepTrace,
    stats1: &RunningStats,
    stats2: &RunningStats,
    cfg: &TrainConfig,
    teacher: &impl EpsPredictor,
    distill_batch: &[(Vec<f64>, usize)],
    k: usize,
    seed: u64,
) -> Result<(f64, LossTerms, Vec<f64>)> {
    if !stats1.initialized() || !stats2.initialized() {
        return Err(Error::InvalidState("score stats must be primed first".into()));
    }
    let mut tape = Tape::new();
    let f_vars = f.register(&mut tape);
    let r_vars = reward_model.register(&mut tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l_lcm = distill_loss_on_tape(
        &mut tape, f, &f_vars, target, teacher, distill_batch, k, &mut rng,
    )?;

    // Recompose the two-step trajectory on-tape so gradients flow into the
    // sampler through both outputs; the injected noise stays fixed.
    let t_top = f.t_max();
    let x_init = tape.leaf(trace.x_init.clone());
    let z1 = f.forward(&mut tape, &f_vars, x_init, t_top, trace.class);
    let ab = f.sched.alpha_bar(trace.t_mid);
    let scaled = tape.scale(z1, ab.sqrt());
    let noise: Vec<f64> = trace.noise.iter().map(|n| (1.0 - ab).sqrt() * n).collect();
    let noise = tape.leaf(noise);
    let x_mid = tape.add(scaled, noise);
    let z2 = f.forward(&mut tape, &f_vars, x_mid, trace.t_mid, trace.class);

    let s_term = |tape: &mut Tape, score: Var, stats: &RunningStats| {
        let centered_mean = tape.scalar(stats.mean);
        let centered = tape.sub(score, centered_mean);
        let scaled = tape.scale(centered, 1.0 / stats.divisor());
        tape.clamp_max(scaled, 1.0)
    };
    let r1 = reward_model.score_on_tape(&mut tape, &r_vars, z1, trace.class);
    let r2 = reward_model.score_on_tape(&mut tape, &r_vars, z2, trace.class);
    let s1 = s_term(&mut tape, r1, stats1);
    let s2 = s_term(&mut tape, r2, stats2);

    let reg = tape.scale(l_lcm, cfg.c);
    let b1 = tape.scale(s1, cfg.c1);
    let b2 = tape.scale(s2, cfg.c2);
    let partial = tape.sub(reg, b1);
    let loss = tape.sub(partial, b2);

    let terms = LossTerms {
        l_lcm: tape.scalar_value(l_lcm),
        s1: tape.scalar_value(s1),
        s2: tape.scalar_value(s2),
    };
    let value = tape.scalar_value(loss);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok((value, terms, f.trunk.flat_grads(&grads, &f_vars)))
}

#[allow(clippy::too_many_arguments)]
pub fn lasro_ft_loss(
    f: &ConsistencyModel,
    target: &ConsistencyModel,
    reward_model: &SurrogateReward,
    trace: &TwoStepTrace,
    stats1: &RunningStats,
    stats2: &RunningStats,
    cfg: &TrainConfig,
    teacher: &impl EpsPredictor,
    distill_batch: &[(Vec<f64>, usize)],
    k: usize,
    seed: u64,
) -> Result<f64> {
    lasro_ft_loss_and_grad(
        f, target, reward_model, trace, stats1, stats2, cfg, teacher, distill_batch, k, seed,
    )
    .map(|(l, _, _)| l)
}

/// Shared fixed inputs of the fine-tuning loops.
pub struct FtContext<'a> {
    pub teacher: &'a DenoiserNet,
    pub dataset: &'a ToyDataset,
    /// Skipping step of the distillation grid.
    pub k: usize,
}

/// One per-step metrics record emitted by the fine-tuners.
#[derive(Debug, Clone)]
pub struct StepMetric {
    pub stage: &'static str,
    pub step: usize,
    pub reward_mean_1step: f64,
    pub reward_mean_2step: f64,
    pub surrogate_acc: f64,
    pub l_lcm: f64,
    pub s1: f64,
    pub s2: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: ConsistencyModel,
    /// EMA copy, used only for evaluation.
    pub ema: ConsistencyModel,
    pub surrogate: SurrogateReward,
    pub metrics: Vec<StepMetric>,
    pub skipped_adaptations: usize,
    /// Sampler draws consumed (fair-budget accounting across methods).
    pub samples_drawn: usize,
}

/// Global-norm gradient clip. An unclipped spike (a saturated surrogate can
/// push a normalized score to ~1e6 when the residual window is degenerate)
/// inflates Adam's second moment and freezes progress for thousands of steps.
pub const GRAD_CLIP: f64 = 100.0;

pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// Alternating fine-tune / online-adaptation loop.
///
/// Each outer iteration clears the replay buffer, runs `n1` sampler updates
/// (minting pairs into the buffer as it goes), then adapts the surrogate for
/// up to `n2` steps on buffered pairs. An empty buffer skips adaptation for
/// that iteration with a logged warning.
#[allow(clippy::too_many_arguments)]
pub fn finetune_lasro(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward_model: &SurrogateReward,
    reward: &RewardSignal,
    ctx: &FtContext,
    conditions: &[usize],
    outer_iters: usize,
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
    let mut theta_opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut surrogate = reward_model.clone();
    let mut psi = surrogate.flat();
    let mut psi_opt = Optimizer::new(cfg.optimizer, cfg.eta2, psi.len());
    let mut stats1 = RunningStats::new();
    let mut stats2 = RunningStats::new();
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut metrics = Vec::new();
    let mut skipped = 0usize;
    let mut samples_drawn = 0usize;
    let mut step = 0usize;

    // Prime the stats with raw scores from the untouched sampler so the very
    // first S-terms are well-defined. A handful of groups keeps the initial
    // p90 realistic; a near-empty residual window would put the divisor at
    // the delta floor and blow the first normalized scores up by ~1e6.
    for g in 0..8 {
        let class = conditions[g % conditions.len()];
        let (traces, _) = mine_group(&model, reward, class, cfg.n_s, &mut rng)?;
        samples_drawn += traces.len();
        for t in &traces {
            stats1 = update_stats(&stats1, surrogate.score(&t.z1, class)?)?;
            stats2 = update_stats(&stats2, surrogate.score(&t.z2, class)?)?;
        }
    }

    for _ in 0..outer_iters {
        buffer.clear();
        for _ in 0..cfg.n1 {
            let class = conditions[rng.gen_range(0..conditions.len())];
            let (traces, pairs) = mine_group(&model, reward, class, cfg.n_s, &mut rng)?;
            samples_drawn += traces.len();
            let acc = if pairs.is_empty() {
                f64::NAN
            } else {
                pair_accuracy(&surrogate, &pairs)?
            };
            for p in pairs {
                buffer.push(p);
            }
            // One uniformly picked trace carries both S-terms; the z2 bonus
            // needs its own first step on-tape, so the pick is shared.
            let pick = &traces[rng.gen_range(0..traces.len())];
            let trace = pick.clone();
            let batch = ctx.dataset.sample_batch(cfg.distill_batch, &mut rng);
            let ft_seed = rng.gen();
            let target = model.clone();
            let (loss, terms, mut grad) = lasro_ft_loss_and_grad(
                &model, &target, &surrogate, &trace, &stats1, &stats2, cfg, ctx.teacher,
                &batch, ctx.k, ft_seed,
            )?;
            clip_grad_norm(&mut grad, GRAD_CLIP);
            theta_opt.step(&mut theta, &grad);
            model.set_flat(&theta);
            ema = ema_update(&theta, &ema, cfg.mu)?;
            // Raw scores feed the moving statistics after the S-terms used
            // the frozen snapshot.
            stats1 = update_stats(&stats1, surrogate.score(&trace.z1, class)?)?;
            stats2 = update_stats(&stats2, surrogate.score(&trace.z2, class)?)?;
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
                stage: "finetune",
                step,
                reward_mean_1step: r1,
                reward_mean_2step: r2,
                surrogate_acc: acc,
                l_lcm: terms.l_lcm,
                s1: terms.s1,
                s2: terms.s2,
                loss,
            });
            step += 1;
        }
        if cfg.n2 > 0 {
            if buffer.is_empty() {
                skipped += 1;
                eprintln!("warning: empty replay buffer, skipping online adaptation");
            } else {
                for _ in 0..cfg.n2 {
                    let pair = buffer.sample(&mut rng).unwrap().clone();
                    let loss = pair_grad_step(&surrogate, &[&pair], &mut psi, &mut psi_opt)?;
                    surrogate.set_flat(&psi);
                    metrics.push(StepMetric {
                        stage: "adapt",
                        step,
                        reward_mean_1step: f64::NAN,
                        reward_mean_2step: f64::NAN,
                        surrogate_acc: f64::NAN,
                        l_lcm: f64::NAN,
                        s1: f64::NAN,
                        s2: f64::NAN,
                        loss,
                    });
                    step += 1;
                }
            }
        }
    }
    let mut ema_model = model.clone();
    ema_model.set_flat(&ema);
    Ok(FinetuneResult {
        model,
        ema: ema_model,
        surrogate,
        metrics,
        skipped_adaptations: skipped,
        samples_drawn,
    })
}

/// Random timestep on the distillation grid `{k, 2k, ..., T}`.
pub fn draw_grid_t(k: usize, t_max: usize, rng: &mut impl Rng) -> usize {
    rng.gen_range(1..=t_max / k) * k
}

/// One step of the alternative fine-tuning scheme: noise a dataset point to a
/// random grid timestep, denoise once, and descend `c L_lcm - S[R(...)]`.
/// Exists purely as the ablation comparator.
#[allow(clippy::too_many_arguments)]
pub fn alt_ft_loss_and_grad(
    f: &ConsistencyModel,
    target: &ConsistencyModel,
    reward_model: &SurrogateReward,
    stats: &RunningStats,
    cfg: &TrainConfig,
    ctx: &FtContext,
    forced_t: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, Vec<f64>)> {
    if !stats.initialized() {
        return Err(Error::InvalidState("score stats must be primed first".into()));
    }
    let t = match forced_t {
        Some(t) => {
            if t == 0 || t > f.t_max() || t % ctx.k != 0 {
                return Err(invalid_arg("forced timestep must lie on the grid"));
            }
            t
        }
        None => draw_grid_t(ctx.k, f.t_max(), rng),
    };
    let class = rng.gen_range(0..ctx.dataset.n_classes);
    let x0 = ctx.dataset.sample(class, rng);
    let z: Vec<f64> = (0..x0.len()).map(|_| gauss(rng)).collect();
    let x_t = forward_diffuse(&x0, t, &z, &f.sched)?;

    let mut tape = Tape::new();
    let f_vars = f.register(&mut tape);
    let r_vars = reward_model.register(&mut tape);
    let batch = ctx.dataset.sample_batch(cfg.distill_batch, rng);
    let l_lcm =
        distill_loss_on_tape(&mut tape, f, &f_vars, target, ctx.teacher, &batch, ctx.k, rng)?;
    let xt = tape.leaf(x_t);
    let out = f.forward(&mut tape, &f_vars, xt, t, class);
    let score = reward_model.score_on_tape(&mut tape, &r_vars, out, class);
    let mean = tape.scalar(stats.mean);
    let centered = tape.sub(score, mean);
    let scaled = tape.scale(centered, 1.0 / stats.divisor());
    let s = tape.clamp_max(scaled, 1.0);
    let reg = tape.scale(l_lcm, cfg.c);
    let bonus = tape.scale(s, 1.0);
    let loss = tape.sub(reg, bonus);
    let value = tape.scalar_value(loss);
    let raw_score = tape.scalar_value(score);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok((value, raw_score, f.trunk.flat_grads(&grads, &f_vars)))
}

/// Driver running `steps` alternative fine-tuning updates with the same
/// optimizer and budget accounting as [`finetune_lasro`].
pub fn finetune_altft(
    cfg: &TrainConfig,
    f: &ConsistencyModel,
    reward_model: &SurrogateReward,
    reward: &RewardSignal,
    ctx: &FtContext,
    steps: usize,
    seed: u64,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = f.clone();
    let mut theta = model.flat();
    let mut ema = theta.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.eta1, theta.len());
    let mut stats = RunningStats::new();
    let mut metrics = Vec::new();
    let mut samples_drawn = 0usize;
    // Prime with scores of the current sampler's own outputs; see the
    // matching warm-up in `finetune_lasro` for why several groups are needed.
    for _ in 0..8 * cfg.n_s {
        let class = rng.gen_range(0..ctx.dataset.n_classes);
        let trace = cm_sample_rng(&model, class, 2, &mut rng)?;
        samples_drawn += 1;
        stats = update_stats(&stats, reward_model.score(trace.final_output(), class)?)?;
    }
    for step in 0..steps {
        let target = model.clone();
        let (loss, raw_score, mut grad) =
            alt_ft_loss_and_grad(&model, &target, reward_model, &stats, cfg, ctx, None, &mut rng)?;
        clip_grad_norm(&mut grad, GRAD_CLIP);
        opt.step(&mut theta, &grad);
        model.set_flat(&theta);
        ema = ema_update(&theta, &ema, cfg.mu)?;
        stats = update_stats(&stats, raw_score)?;
        // Budget parity with the group-sampling methods.
        let class = rng.gen_range(0..ctx.dataset.n_classes);
        let mut r1 = 0.0;
        let mut r2 = 0.0;
        for _ in 0..cfg.n_s {
            let t = cm_sample_rng(&model, class, 2, &mut rng)?.two_step().unwrap();
            samples_drawn += 1;
            r1 += reward.evaluate(&t.z1, class)? / cfg.n_s as f64;
            r2 += reward.evaluate(&t.z2, class)? / cfg.n_s as f64;
        }
        metrics.push(StepMetric {
            stage: "altft",
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
        surrogate: reward_model.clone(),
        metrics,
        skipped_adaptations: 0,
        samples_drawn,
    })
}
