//! Discrete-time denoising diffusion teacher: noise schedules, forward
//! noising, the denoising training loss, ancestral sampling, and the
//! synthetic conditional datasets the whole artifact runs on.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Result};
use crate::nn::{gauss, DenoiserNet, NetConfig, Optimizer, OptimizerKind};
use crate::tape::Tape;

/// Per-timestep diffusion coefficients for `T` discrete steps.
///
/// `beta[i]` is the noise rate of step `t = i + 1`; `alpha_bar` has `T + 1`
/// entries with `alpha_bar[0] = 1`; `sigma[i]` is the posterior standard
/// deviation of step `t = i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

pub fn make_schedule(
    t_max: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(invalid_arg("schedule step count T must be >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid_arg(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let ScheduleKind::Linear = kind;
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            if t_max == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
    }
    let sigma: Vec<f64> = (1..=t_max)
        .map(|t| (beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])).sqrt())
        .collect();
    Ok(NoiseSchedule { t_max, beta, alpha_bar, sigma })
}

impl NoiseSchedule {
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior std of step `t` (1-based).
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn t_frac(&self, t: usize) -> f64 {
        t as f64 / self.t_max as f64
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) z`.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t > sched.t_max {
        return Err(invalid_arg(format!("timestep {t} exceeds T={}", sched.t_max)));
    }
    if z.len() != x0.len() {
        return Err(invalid_arg("noise shape does not match x0"));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(z).map(|(x, n)| a * x + b * n).collect())
}

/// Anything that predicts the added noise given `(x_t, t, c)`.
///
/// Implemented by the trained teacher and, in tests, by closed-form optimal
/// predictors on analytically tractable datasets.
pub trait EpsPredictor {
    fn predict_eps(&self, x: &[f64], t_frac: f64, class: usize) -> Vec<f64>;
}

impl EpsPredictor for DenoiserNet {
    fn predict_eps(&self, x: &[f64], t_frac: f64, class: usize) -> Vec<f64> {
        self.apply(x, t_frac, class)
    }
}

impl<F: Fn(&[f64], f64, usize) -> Vec<f64>> EpsPredictor for F {
    fn predict_eps(&self, x: &[f64], t_frac: f64, class: usize) -> Vec<f64> {
        self(x, t_frac, class)
    }
}

/// Mean denoising loss `||Z_t - eps(x_t, t, c)||^2` over the batch, with the
/// gradient w.r.t. the network parameters.
pub fn ddpm_loss_and_grad(
    net: &DenoiserNet,
    batch: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid_arg("ddpm loss needs a nonempty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = net.register(&mut tape);
    let mut total = None;
    for (x0, class) in batch {
        let t = rng.gen_range(1..=sched.t_max);
        let z: Vec<f64> = (0..x0.len()).map(|_| gauss(&mut rng)).collect();
        let xt = forward_diffuse(x0, t, &z, sched)?;
        let xt = tape.leaf(xt);
        let pred = net.forward(&mut tape, &vars, xt, sched.t_frac(t), *class);
        let zv = tape.leaf(z);
        let diff = tape.sub(zv, pred);
        let term = tape.sq_norm(diff);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    let mean = tape.scale(total.unwrap(), 1.0 / batch.len() as f64);
    let loss = tape.scalar_value(mean);
    let grads = tape.backward(&[(mean, vec![1.0])]);
    Ok((loss, net.flat_grads(&grads, &vars)))
}

pub fn ddpm_loss(
    net: &DenoiserNet,
    batch: &[(Vec<f64>, usize)],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    ddpm_loss_and_grad(net, batch, sched, seed).map(|(l, _)| l)
}

/// Ancestral sampling on a stride-subsampled timestep grid.
///
/// `eta = 1` is the stochastic DDPM chain (per-step variance matching the
/// schedule's posterior); `eta = 0` makes every transition deterministic.
pub fn ddpm_sample_eta(
    net: &impl EpsPredictor,
    dim: usize,
    class: usize,
    sched: &NoiseSchedule,
    steps: usize,
    eta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps == 0 || steps > sched.t_max {
        return Err(invalid_arg(format!(
            "steps must be in 1..=T, got {steps} with T={}",
            sched.t_max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid: Vec<usize> = (0..=steps).map(|i| (steps - i) * sched.t_max / steps).collect();
    let mut x: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
    for w in grid.windows(2) {
        let (t, s) = (w[0], w[1]);
        let eps = net.predict_eps(&x, sched.t_frac(t), class);
        let ab_t = sched.alpha_bar(t);
        let ab_s = sched.alpha_bar(s);
        let x0_hat: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(xi, ei)| (xi - (1.0 - ab_t).sqrt() * ei) / ab_t.sqrt())
            .collect();
        let var = eta * eta * (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s);
        let sigma = var.max(0.0).sqrt();
        let dir = (1.0 - ab_s - sigma * sigma).max(0.0).sqrt();
        x = x0_hat
            .iter()
            .zip(&eps)
            .map(|(x0i, ei)| ab_s.sqrt() * x0i + dir * ei)
            .collect();
        if sigma > 0.0 {
            for xi in &mut x {
                *xi += sigma * gauss(&mut rng);
            }
        }
    }
    Ok(x)
}

pub fn ddpm_sample(
    net: &DenoiserNet,
    class: usize,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    ddpm_sample_eta(net, net.cfg.dim, class, sched, steps, 1.0, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MixtureOfGaussians,
    Spiral,
    Checkerboard,
}

impl std::str::FromStr for DatasetKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture_of_gaussians" | "mixture" | "mog" => Ok(Self::MixtureOfGaussians),
            "spiral" => Ok(Self::Spiral),
            "checkerboard" => Ok(Self::Checkerboard),
            other => Err(invalid_arg(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Synthetic conditional dataset in R^d with `n_classes` labels.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n_classes: usize,
    /// Per-class component means (mixture kind; used as reward targets too).
    pub means: Vec<Vec<f64>>,
    pub comp_std: f64,
}

pub fn make_toy_dataset(
    kind: DatasetKind,
    dim: usize,
    n_classes: usize,
    seed: u64,
) -> Result<ToyDataset> {
    if !(2..=16).contains(&dim) {
        return Err(invalid_arg(format!("dimension must be in 2..=16, got {dim}")));
    }
    if n_classes == 0 {
        return Err(invalid_arg("need at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let radius = 1.6;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            let ang = phase + std::f64::consts::TAU * c as f64 / n_classes as f64;
            let mut m = vec![0.0; dim];
            m[0] = radius * ang.cos();
            m[1] = radius * ang.sin();
            m
        })
        .collect();
    Ok(ToyDataset { kind, dim, n_classes, means, comp_std: 0.2 })
}

impl ToyDataset {
    pub fn sample(&self, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        assert!(class < self.n_classes, "class out of range");
        match self.kind {
            DatasetKind::MixtureOfGaussians => {
                // Components are assigned round-robin to classes; the single
                // -component case skips the draw to keep the RNG stream stable.
                let comps: Vec<usize> =
                    (0..self.means.len()).filter(|k| k % self.n_classes == class).collect();
                let pick =
                    if comps.len() == 1 { comps[0] } else { comps[rng.gen_range(0..comps.len())] };
                let mut x = self.means[pick].clone();
                for xi in &mut x {
                    *xi += self.comp_std * gauss(rng);
                }
                x
            }
            DatasetKind::Spiral => {
                let u: f64 = rng.gen_range(0.0..1.0);
                let r = 0.4 + 1.4 * u;
                let ang = std::f64::consts::TAU
                    * (0.75 * u + class as f64 / self.n_classes as f64);
                let mut x = vec![0.0; self.dim];
                x[0] = r * ang.cos();
                x[1] = r * ang.sin();
                for xi in &mut x {
                    *xi += 0.05 * gauss(rng);
                }
                x
            }
            DatasetKind::Checkerboard => {
                // 4x4 board over [-2, 2]^2; class picks among the black cells.
                let black: Vec<(usize, usize)> = (0..4)
                    .flat_map(|i| (0..4).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % 2 == 0)
                    .collect();
                let cells: Vec<&(usize, usize)> = black
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| k % self.n_classes == class)
                    .map(|(_, c)| c)
                    .collect();
                let (i, j) = *cells[rng.gen_range(0..cells.len())];
                let mut x = vec![0.0; self.dim];
                x[0] = -2.0 + (i as f64 + rng.gen_range(0.0..1.0));
                x[1] = -2.0 + (j as f64 + rng.gen_range(0.0..1.0));
                for xi in x.iter_mut().skip(2) {
                    *xi = 0.05 * gauss(rng);
                }
                x
            }
        }
    }

    /// Class-free view: every component becomes part of a single class-0
    /// mixture, making the per-condition distribution multimodal.
    pub fn unconditional(&self) -> ToyDataset {
        ToyDataset {
            kind: self.kind,
            dim: self.dim,
            n_classes: 1,
            means: self.means.clone(),
            comp_std: self.comp_std,
        }
    }

    /// Deterministic draw for a given seed.
    pub fn sample_with_seed(&self, seed: u64, class: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample(class, &mut rng)
    }

    /// Draw a (point, class) batch with classes cycling deterministically in
    /// the RNG stream.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|_| {
                let c = rng.gen_range(0..self.n_classes);
                (self.sample(c, rng), c)
            })
            .collect()
    }

    /// Analytic log-density of the full mixture (uniform class weights).
    /// Only the mixture-of-Gaussians kind supports it.
    pub fn log_density(&self, x: &[f64]) -> Option<f64> {
        match self.kind {
            DatasetKind::MixtureOfGaussians => {
                let var = self.comp_std * self.comp_std;
                let log_norm = -0.5 * self.dim as f64 * (std::f64::consts::TAU * var).ln();
                let comp_logs: Vec<f64> = self
                    .means
                    .iter()
                    .map(|m| {
                        let sq: f64 =
                            x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                        log_norm - 0.5 * sq / var
                    })
                    .collect();
                let max = comp_logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = comp_logs.iter().map(|l| (l - max).exp()).sum();
                Some(max + sum.ln() - (self.means.len() as f64).ln())
            }
            _ => None,
        }
    }
}

/// Train a fresh epsilon-prediction teacher on the dataset.
pub fn train_teacher(
    net_cfg: NetConfig,
    dataset: &ToyDataset,
    sched: &NoiseSchedule,
    iters: usize,
    batch_size: usize,
    lr: f64,
    optimizer: OptimizerKind,
    seed: u64,
) -> Result<DenoiserNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenoiserNet::new(net_cfg, &mut rng);
    let mut params = net.flat();
    let mut opt = Optimizer::new(optimizer, lr, params.len());
    for it in 0..iters {
        let batch = dataset.sample_batch(batch_size, &mut rng);
        let (_, grad) = ddpm_loss_and_grad(&net, &batch, sched, seed ^ (it as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))?;
        opt.step(&mut params, &grad);
        net.set_flat(&params);
    }
    Ok(net)
}
