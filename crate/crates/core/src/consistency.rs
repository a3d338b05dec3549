//! Consistency distillation of the diffusion teacher into a 1-8 step student,
//! plus the noise re-injecting multistep sampler. The 1- and 2-step samplers
//! produced here are what the fine-tuners optimize.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{forward_diffuse, EpsPredictor, NoiseSchedule};
use crate::error::{invalid_arg, Result};
use crate::nn::{gauss, DenoiserNet, Optimizer, OptimizerKind};
use crate::tape::{Tape, Var};

/// Student map `f(x, t, c)` with the boundary behaviour `f(x, 0, c) = x`
/// enforced through `c_skip` / `c_out` coefficients.
#[derive(Debug, Clone)]
pub struct ConsistencyModel {
    pub trunk: DenoiserNet,
    pub sched: NoiseSchedule,
    pub sigma_data: f64,
}

impl ConsistencyModel {
    pub fn new(trunk: DenoiserNet, sched: NoiseSchedule) -> Self {
        Self { trunk, sched, sigma_data: 0.5 }
    }

    pub fn dim(&self) -> usize {
        self.trunk.cfg.dim
    }

    pub fn t_max(&self) -> usize {
        self.sched.t_max
    }

    pub fn c_skip(&self, t: usize) -> f64 {
        let u = t as f64 / self.t_max() as f64;
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (u * u + s2)
    }

    pub fn c_out(&self, t: usize) -> f64 {
        let u = t as f64 / self.t_max() as f64;
        let s2 = self.sigma_data * self.sigma_data;
        self.sigma_data * u / (u * u + s2).sqrt()
    }

    /// `c_skip(t) x + c_out(t) F(x, t, c)`.
    pub fn apply(&self, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        if t > self.t_max() {
            return Err(invalid_arg(format!("timestep {t} exceeds T={}", self.t_max())));
        }
        if t == 0 {
            return Ok(x.to_vec());
        }
        let f = self.trunk.apply(x, self.sched.t_frac(t), class);
        let (cs, co) = (self.c_skip(t), self.c_out(t));
        Ok(x.iter().zip(&f).map(|(xi, fi)| cs * xi + co * fi).collect())
    }

    /// Tape variant; gradient flows through both the skip path and the trunk.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        t: usize,
        class: usize,
    ) -> Var {
        assert!(t <= self.t_max(), "timestep out of range");
        let f = self.trunk.forward(tape, vars, x, self.sched.t_frac(t), class);
        let skip = tape.scale(x, self.c_skip(t));
        let out = tape.scale(f, self.c_out(t));
        tape.add(skip, out)
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.trunk.register(tape)
    }

    pub fn flat(&self) -> Vec<f64> {
        self.trunk.flat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        self.trunk.set_flat(flat)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
    }
}

pub fn cm_apply(f: &ConsistencyModel, x: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
    f.apply(x, t, class)
}

/// One deterministic denoising step of the teacher from `t` to `t - k`.
pub fn teacher_step(
    teacher: &impl EpsPredictor,
    x_t: &[f64],
    t: usize,
    k: usize,
    class: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if k > t {
        return Err(invalid_arg(format!("skip {k} below t={t} hits negative time")));
    }
    if t > sched.t_max {
        return Err(invalid_arg(format!("timestep {t} exceeds T={}", sched.t_max)));
    }
    if k == 0 {
        return Ok(x_t.to_vec());
    }
    let s = t - k;
    let eps = teacher.predict_eps(x_t, sched.t_frac(t), class);
    let ab_t = sched.alpha_bar(t);
    let ab_s = sched.alpha_bar(s);
    Ok(x_t
        .iter()
        .zip(&eps)
        .map(|(xi, ei)| {
            let x0 = (xi - (1.0 - ab_t).sqrt() * ei) / ab_t.sqrt();
            ab_s.sqrt() * x0 + (1.0 - ab_s).sqrt() * ei
        })
        .collect())
}

/// Distillation loss on an existing tape; gradient flows only through the
/// student branch. Timesteps are drawn from the skip grid {k, 2k, ..., T}.
pub fn distill_loss_on_tape(
    tape: &mut Tape,
    student: &ConsistencyModel,
    vars: &[Var],
    target: &ConsistencyModel,
    teacher: &impl EpsPredictor,
    batch: &[(Vec<f64>, usize)],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(invalid_arg("distillation needs a nonempty batch"));
    }
    if k == 0 {
        return Err(invalid_arg("skipping step k must be >= 1"));
    }
    let sched = &student.sched;
    if sched.t_max % k != 0 {
        return Err(invalid_arg(format!("skip {k} must divide T={}", sched.t_max)));
    }
    let mut total: Option<Var> = None;
    for (x0, class) in batch {
        let j = rng.gen_range(1..=sched.t_max / k);
        let t = j * k;
        let z: Vec<f64> = (0..x0.len()).map(|_| gauss(rng)).collect();
        let x_t = forward_diffuse(x0, t, &z, sched)?;
        let x_prev = teacher_step(teacher, &x_t, t, k, *class, sched)?;
        let target_out = target.apply(&x_prev, t - k, *class)?;
        let xt = tape.leaf(x_t);
        let student_out = student.forward(tape, vars, xt, t, *class);
        let tgt = tape.leaf(target_out);
        let diff = tape.sub(student_out, tgt);
        let term = tape.sq_norm(diff);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

pub fn distill_loss_and_grad(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    teacher: &impl EpsPredictor,
    batch: &[(Vec<f64>, usize)],
    k: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = student.register(&mut tape);
    let loss = distill_loss_on_tape(&mut tape, student, &vars, target, teacher, batch, k, &mut rng)?;
    let value = tape.scalar_value(loss);
    let grads = tape.backward(&[(loss, vec![1.0])]);
    Ok((value, student.trunk.flat_grads(&grads, &vars)))
}

pub fn distill_loss(
    student: &ConsistencyModel,
    target: &ConsistencyModel,
    teacher: &impl EpsPredictor,
    batch: &[(Vec<f64>, usize)],
    k: usize,
    seed: u64,
) -> Result<f64> {
    distill_loss_and_grad(student, target, teacher, batch, k, seed).map(|(l, _)| l)
}

/// `ema' = mu * ema + (1 - mu) * params`, elementwise.
pub fn ema_update(params: &[f64], ema: &[f64], mu: f64) -> Result<Vec<f64>> {
    if params.len() != ema.len() {
        return Err(invalid_arg("parameter shapes do not match for EMA update"));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid_arg(format!("EMA rate must be in [0, 1], got {mu}")));
    }
    Ok(params.iter().zip(ema).map(|(p, e)| mu * e + (1.0 - mu) * p).collect())
}

/// A full run of the noise re-injecting multistep sampler.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub class: usize,
    pub h: usize,
    /// Timestep grid `tau_0 = T, ..., tau_H = 0`.
    pub grid: Vec<usize>,
    /// `states[i]` is the input to step `i`; `states[0]` is the initial noise.
    pub states: Vec<Vec<f64>>,
    /// `outputs[i] = f(states[i], grid[i], c)`.
    pub outputs: Vec<Vec<f64>>,
    /// Injected noises between steps (length `h - 1`).
    pub injected: Vec<Vec<f64>>,
    /// Std of each transition density; the final entry is exactly 0 (the
    /// last step is noise-free and admits no density).
    pub transition_sigmas: Vec<f64>,
}

impl SampleTrace {
    pub fn final_output(&self) -> &[f64] {
        self.outputs.last().unwrap()
    }

    pub fn two_step(&self) -> Option<TwoStepTrace> {
        if self.h != 2 {
            return None;
        }
        Some(TwoStepTrace {
            x_init: self.states[0].clone(),
            z1: self.outputs[0].clone(),
            noise: self.injected[0].clone(),
            x_mid: self.states[1].clone(),
            z2: self.outputs[1].clone(),
            class: self.class,
            t_mid: self.grid[1],
        })
    }
}

/// The H=2 sampler run: one deterministic step, one noise injection at the
/// mid timestep, one final deterministic step.
#[derive(Debug, Clone)]
pub struct TwoStepTrace {
    pub x_init: Vec<f64>,
    pub z1: Vec<f64>,
    pub noise: Vec<f64>,
    pub x_mid: Vec<f64>,
    pub z2: Vec<f64>,
    pub class: usize,
    pub t_mid: usize,
}

pub const SUPPORTED_H: [usize; 4] = [1, 2, 4, 8];

/// Multistep sampling starting from a caller-provided initial state.
pub fn cm_sample_from(
    f: &ConsistencyModel,
    x_init: Vec<f64>,
    class: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Result<SampleTrace> {
    if !SUPPORTED_H.contains(&h) {
        return Err(invalid_arg(format!("unsupported step count H={h}")));
    }
    let t_max = f.t_max();
    let grid: Vec<usize> = (0..=h).map(|i| (h - i) * t_max / h).collect();
    let mut states = vec![x_init];
    let mut outputs = Vec::with_capacity(h);
    let mut injected = Vec::with_capacity(h.saturating_sub(1));
    let mut sigmas = Vec::with_capacity(h);
    for i in 0..h {
        let z = f.apply(states.last().unwrap(), grid[i], class)?;
        outputs.push(z.clone());
        if i + 1 < h {
            let t_next = grid[i + 1];
            let ab = f.sched.alpha_bar(t_next);
            let noise: Vec<f64> = (0..z.len()).map(|_| gauss(rng)).collect();
            let next: Vec<f64> = z
                .iter()
                .zip(&noise)
                .map(|(zi, ni)| ab.sqrt() * zi + (1.0 - ab).sqrt() * ni)
                .collect();
            sigmas.push((1.0 - ab).sqrt());
            injected.push(noise);
            states.push(next);
        } else {
            sigmas.push(0.0);
        }
    }
    Ok(SampleTrace { class, h, grid, states, outputs, injected, transition_sigmas: sigmas })
}

pub fn cm_sample_rng(
    f: &ConsistencyModel,
    class: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Result<SampleTrace> {
    let x_init: Vec<f64> = (0..f.dim()).map(|_| gauss(rng)).collect();
    cm_sample_from(f, x_init, class, h, rng)
}

pub fn cm_sample(f: &ConsistencyModel, class: usize, h: usize, seed: u64) -> Result<SampleTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cm_sample_rng(f, class, h, &mut rng)
}

/// EMA rate of the stop-gradient target branch during distillation.
pub const DISTILL_TARGET_MU: f64 = 0.95;

/// Run consistency distillation against the teacher, returning the student
/// and its loss trace. The target branch is a stop-gradient EMA copy of the
/// student (rate [`DISTILL_TARGET_MU`]); the returned student carries the EMA
/// weights, which sample noticeably better in one step than the raw ones.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    teacher: &DenoiserNet,
    dataset: &crate::diffusion::ToyDataset,
    sched: &NoiseSchedule,
    iters: usize,
    batch_size: usize,
    k: usize,
    lr: f64,
    optimizer: OptimizerKind,
    seed: u64,
) -> Result<(ConsistencyModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = DenoiserNet::new(teacher.cfg, &mut rng);
    let mut student = ConsistencyModel::new(trunk, sched.clone());
    let mut params = student.flat();
    let mut ema = params.clone();
    let mut target = student.clone();
    let mut opt = Optimizer::new(optimizer, lr, params.len());
    let mut losses = Vec::with_capacity(iters);
    for it in 0..iters {
        let batch = dataset.sample_batch(batch_size, &mut rng);
        target.set_flat(&ema);
        let (loss, grad) = distill_loss_and_grad(
            &student,
            &target,
            teacher,
            &batch,
            k,
            seed ^ (it as u64).wrapping_mul(0x2545_f491_4f6c_dd1d),
        )?;
        losses.push(loss);
        opt.step(&mut params, &grad);
        student.set_flat(&params);
        ema = ema_update(&params, &ema, DISTILL_TARGET_MU)?;
    }
    student.set_flat(&ema);
    Ok((student, losses))
}
