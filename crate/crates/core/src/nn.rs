//! Small conditional MLP used for the teacher denoiser, the consistency
//! student trunk, and the surrogate reward backbone, plus the optimizers.

use rand::Rng;

use crate::tape::{Tape, Var};

/// Row-major dense parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| std * gauss(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Standard normal draw via Box-Muller; kept local so parameter init only
/// depends on the caller's RNG stream.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Data dimension.
    pub dim: usize,
    /// Number of condition labels.
    pub n_classes: usize,
    pub hidden: usize,
    /// Sinusoidal timestep embedding width (even).
    pub t_dim: usize,
    pub blocks: usize,
}

impl NetConfig {
    pub fn small(dim: usize, n_classes: usize) -> Self {
        Self { dim, n_classes, hidden: 48, t_dim: 8, blocks: 2 }
    }
}

/// Conditional residual MLP mapping `(x, t, c)` to an R^d prediction.
///
/// The same shape serves as the teacher's noise predictor and as the trunk
/// of the consistency student and the surrogate reward.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub cfg: NetConfig,
    pub params: Vec<Tensor>,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.t_dim % 2 == 0, "t_dim must be even");
        let h = cfg.hidden;
        let in_dim = cfg.dim + cfg.t_dim;
        let mut params = Vec::new();
        params.push(Tensor::randn(h, in_dim, (2.0 / in_dim as f64).sqrt(), rng));
        params.push(Tensor::zeros(h, 1));
        params.push(Tensor::randn(cfg.n_classes, h, 0.1, rng));
        for _ in 0..cfg.blocks {
            params.push(Tensor::randn(h, h, (1.0 / h as f64).sqrt(), rng));
            params.push(Tensor::zeros(h, 1));
            params.push(Tensor::randn(h, h, 0.5 * (1.0 / h as f64).sqrt(), rng));
            params.push(Tensor::zeros(h, 1));
        }
        params.push(Tensor::randn(cfg.dim, h, 0.1 * (1.0 / h as f64).sqrt(), rng));
        params.push(Tensor::zeros(cfg.dim, 1));
        Self { cfg, params }
    }

    /// Register every parameter tensor as a tape leaf. The returned handles
    /// are positionally aligned with `self.params`.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.data.clone())).collect()
    }

    pub fn time_embedding(&self, t_frac: f64) -> Vec<f64> {
        time_embedding(t_frac, self.cfg.t_dim)
    }

    /// Forward pass up to the last hidden layer.
    pub fn forward_hidden(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        t_frac: f64,
        class: usize,
    ) -> Var {
        assert!(class < self.cfg.n_classes, "class out of range");
        let h = self.cfg.hidden;
        let temb = tape.leaf(self.time_embedding(t_frac));
        let inp = tape.concat(&[x, temb]);
        let lin = tape.matvec(vars[0], inp, h, self.cfg.dim + self.cfg.t_dim);
        let lin = tape.add(lin, vars[1]);
        let emb = tape.row(vars[2], class, h);
        let lin = tape.add(lin, emb);
        let mut state = tape.tanh(lin);
        for b in 0..self.cfg.blocks {
            let base = 3 + b * 4;
            let a = tape.matvec(vars[base], state, h, h);
            let a = tape.add(a, vars[base + 1]);
            let a = tape.tanh(a);
            let a = tape.matvec(vars[base + 2], a, h, h);
            let a = tape.add(a, vars[base + 3]);
            state = tape.add(state, a);
        }
        state
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        t_frac: f64,
        class: usize,
    ) -> Var {
        let hidden = self.forward_hidden(tape, vars, x, t_frac, class);
        let base = 3 + self.cfg.blocks * 4;
        let out = tape.matvec(vars[base], hidden, self.cfg.dim, self.cfg.hidden);
        tape.add(out, vars[base + 1])
    }

    /// Plain evaluation on a throwaway tape.
    pub fn apply(&self, x: &[f64], t_frac: f64, class: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.leaf(x.to_vec());
        let out = self.forward(&mut tape, &vars, xv, t_frac, class);
        tape.value(out).to_vec()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter size mismatch");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Collect gradients for the registered leaves into one flat vector
    /// aligned with [`DenoiserNet::flat`].
    pub fn flat_grads(&self, grads: &crate::tape::Grads, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (p, v) in self.params.iter().zip(vars) {
            out.extend(grads.get_or_zero(*v, p.len()));
        }
        out
    }
}

pub fn time_embedding(t_frac: f64, t_dim: usize) -> Vec<f64> {
    let half = t_dim / 2;
    let mut emb = Vec::with_capacity(t_dim);
    for k in 0..half {
        let freq = std::f64::consts::PI * (k + 1) as f64;
        emb.push((freq * t_frac).sin());
        emb.push((freq * t_frac).cos());
    }
    emb
}

/// Which update rule a training loop uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, n)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Adam(a) => a.step(params, grad),
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1c;
            let vh = self.v[i] / b2c;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenoiserNet::new(NetConfig::small(2, 4), &mut rng);
        let flat = net.flat();
        assert_eq!(flat.len(), net.param_count());
        let mut perturbed = flat.clone();
        perturbed[3] += 1.5;
        net.set_flat(&perturbed);
        assert_eq!(net.flat(), perturbed);
    }

    #[test]
    fn output_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenoiserNet::new(NetConfig::small(3, 2), &mut rng);
        let y = net.apply(&[0.3, -1.2, 5.0], 0.7, 1);
        assert_eq!(y.len(), 3);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenoiserNet::new(
            NetConfig { dim: 2, n_classes: 3, hidden: 8, t_dim: 4, blocks: 1 },
            &mut rng,
        );
        let x = [0.4, -0.2];
        let loss = |net: &DenoiserNet| {
            let y = net.apply(&x, 0.5, 2);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let mut tape = Tape::new();
        let vars = net.register(&mut tape);
        let xv = tape.leaf(x.to_vec());
        let y = net.forward(&mut tape, &vars, xv, 0.5, 2);
        let l = tape.sq_norm(y);
        let grads = tape.backward(&[(l, vec![1.0])]);
        let flat_grad = net.flat_grads(&grads, &vars);

        let base = net.flat();
        let eps = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let i = rng.gen_range(0..base.len());
            let mut hi = base.clone();
            let mut lo = base.clone();
            hi[i] += eps;
            lo[i] -= eps;
            net.set_flat(&hi);
            let fh = loss(&net);
            net.set_flat(&lo);
            let fl = loss(&net);
            net.set_flat(&base);
            let fd = (fh - fl) / (2.0 * eps);
            let denom = fd.abs().max(flat_grad[i].abs()).max(1e-8);
            assert!((fd - flat_grad[i]).abs() / denom < 1e-4, "coord {i}");
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut opt = Adam::new(0.1, 2);
        let mut p = vec![3.0, -4.0];
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }
}
