//! Read-only diagnostic probes: local Lipschitz growth across noise levels,
//! the TD-equivalence identity, exploration diversity, the sliced-Wasserstein
//! fidelity proxy, and reward/fidelity tradeoff tables.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::consistency::{cm_sample_from, cm_sample_rng, ConsistencyModel, TwoStepTrace};
use crate::diffusion::forward_diffuse;
use crate::error::{invalid_arg, Result};
use crate::nn::gauss;
use crate::rewards::SurrogateReward;

/// Spherical perturbation `sqrt(1 - eps^2) z + eps z'` with `z' ~ N(0, I)`.
pub fn perturb_neighbor(z: &[f64], epsilon: f64, seed: u64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid_arg(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = (1.0 - epsilon * epsilon).sqrt();
    Ok(z.iter().map(|zi| keep * zi + epsilon * gauss(&mut rng)).collect())
}

/// Per-noise-level local Lipschitz estimates.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub t_levels: Vec<usize>,
    pub estimates: Vec<f64>,
    pub skipped: Vec<usize>,
    pub n: usize,
    pub epsilon: f64,
}

/// Default noise levels on the desk-scale grid (T = 100).
pub const DEFAULT_T_LEVELS: [usize; 5] = [2, 5, 10, 20, 50];

/// Empirical local Lipschitz constant of the quality-through-sampler map at
/// each noise level: the first sampler step (with noise re-injected at level
/// `t`) gives the probed latent `z1_t`; the estimate at `t` is the mean of
/// `|q(f(z1_t)) - q(f(z1_t(eps)))| / ||z1_t - z1_t(eps)||`.
#[allow(clippy::too_many_arguments)]
pub fn local_lipschitz(
    f: &ConsistencyModel,
    quality: &dyn Fn(&[f64]) -> f64,
    t_levels: &[usize],
    epsilon: f64,
    n: usize,
    conditions: &[usize],
    seed: u64,
) -> Result<LipschitzReport> {
    if n < 100 {
        return Err(invalid_arg(format!("need N >= 100 draws per level, got {n}")));
    }
    if conditions.is_empty() {
        return Err(invalid_arg("need at least one condition"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid_arg("epsilon must be in (0, 1)"));
    }
    for t in t_levels {
        if *t == 0 || *t > f.t_max() {
            return Err(invalid_arg(format!("level {t} outside 1..=T={}", f.t_max())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = f.dim();
    let mut acc = vec![0.0; t_levels.len()];
    let mut used = vec![0usize; t_levels.len()];
    let mut skipped = vec![0usize; t_levels.len()];
    // Common random numbers: each draw fixes (condition, first-step latent,
    // injected noise, perturbation) and is evaluated at every level, so the
    // level-to-level comparison is paired rather than independent.
    for _ in 0..n {
        let class = conditions[rng.gen_range(0..conditions.len())];
        // First sampler step from fresh initial noise, then re-inject noise
        // at level t exactly as the multi-step sampler would.
        let z1 = cm_sample_rng(f, class, 1, &mut rng)?.final_output().to_vec();
        let zn: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
        let pseed: u64 = rng.gen();
        for (li, &t) in t_levels.iter().enumerate() {
            let z1t = forward_diffuse(&z1, t, &zn, &f.sched)?;
            let z1te = perturb_neighbor(&z1t, epsilon, pseed)?;
            let denom: f64 = z1t
                .iter()
                .zip(&z1te)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if denom == 0.0 {
                skipped[li] += 1;
                continue;
            }
            let q_a = quality(&f.apply(&z1t, t, class)?);
            let q_b = quality(&f.apply(&z1te, t, class)?);
            acc[li] += (q_a - q_b).abs() / denom;
            used[li] += 1;
        }
    }
    let mut estimates = Vec::with_capacity(t_levels.len());
    for (li, &t) in t_levels.iter().enumerate() {
        if used[li] == 0 {
            return Err(invalid_arg(format!("all draws skipped at level {t}")));
        }
        estimates.push(acc[li] / used[li] as f64);
    }
    Ok(LipschitzReport {
        t_levels: t_levels.to_vec(),
        estimates,
        skipped,
        n,
        epsilon,
    })
}

/// Both sides of the temporal-difference identity, plus their largest
/// per-trace absolute difference. `rewards[i]` holds the black-box reward at
/// `(z1, z2)` of trace `i`. The sides are computed by independent code paths;
/// at `gamma = 0` they agree to double precision (at other `gamma` the
/// bootstrap term keeps them apart, by design).
pub fn td_equivalence_check(
    reward_model: &SurrogateReward,
    rewards: &[(f64, f64)],
    traces: &[TwoStepTrace],
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    if traces.is_empty() || rewards.len() != traces.len() {
        return Err(invalid_arg("need matching nonempty rewards and traces"));
    }
    let mut l_td = 0.0;
    let mut l_two = 0.0;
    let mut max_diff: f64 = 0.0;
    for (trace, &(r1, r2)) in traces.iter().zip(rewards) {
        let q1 = reward_model.score(&trace.z1, trace.class)?;
        let q2 = reward_model.score(&trace.z2, trace.class)?;
        // TD form: first transition bootstraps on the sampled next score,
        // the terminal transition regresses on the reward directly.
        let td1 = q1 - (r1 + gamma * q2);
        let td2 = q2 - r2;
        let trace_td = td1 * td1 + td2 * td2;
        // Two-term regression form: both scores regress on the reward.
        let a = q1 - r1;
        let b = q2 - r2;
        let trace_two = a.powi(2) + b.powi(2);
        l_td += trace_td;
        l_two += trace_two;
        max_diff = max_diff.max((trace_td - trace_two).abs());
    }
    Ok((l_td, l_two, max_diff))
}

/// Per-H conditional output variance at a fixed initial state.
#[derive(Debug, Clone)]
pub struct DiversityRow {
    pub h: usize,
    /// Trace of the output covariance, averaged over conditions.
    pub variance: f64,
    /// Pooled standard error of the variance estimate.
    pub std_err: f64,
}

/// Exploration probe: variance of final outputs across injected-noise
/// realizations, holding the initial noise fixed per condition.
pub fn diversity_probe(
    f: &ConsistencyModel,
    conditions: &[usize],
    h_list: &[usize],
    draws: usize,
    seed: u64,
) -> Result<Vec<DiversityRow>> {
    if conditions.is_empty() || h_list.is_empty() {
        return Err(invalid_arg("need conditions and step counts"));
    }
    if draws < 2 {
        return Err(invalid_arg("need at least two draws"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let dim = f.dim();
    let x_inits: Vec<Vec<f64>> = conditions
        .iter()
        .map(|_| (0..dim).map(|_| gauss(&mut master)).collect())
        .collect();
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let mut per_cond = Vec::with_capacity(conditions.len());
        let mut sq_devs: Vec<f64> = Vec::with_capacity(conditions.len() * draws);
        for (ci, &class) in conditions.iter().enumerate() {
            let mut outs = Vec::with_capacity(draws);
            for d in 0..draws {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (h as u64) << 40 ^ (ci as u64) << 20 ^ d as u64,
                );
                let trace = cm_sample_from(f, x_inits[ci].clone(), class, h, &mut rng)?;
                outs.push(trace.final_output().to_vec());
            }
            // Center on the first draw before averaging so a deterministic
            // sampler (H = 1) yields an exact zero, not rounding dust.
            let devs: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| o.iter().zip(&outs[0]).map(|(a, b)| a - b).collect())
                .collect();
            let mean: Vec<f64> = (0..dim)
                .map(|k| devs.iter().map(|d| d[k]).sum::<f64>() / draws as f64)
                .collect();
            let mut tr_cov = 0.0;
            for d in &devs {
                let sq: f64 = d.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum();
                sq_devs.push(sq);
                tr_cov += sq / draws as f64;
            }
            per_cond.push(tr_cov);
        }
        let variance = per_cond.iter().sum::<f64>() / per_cond.len() as f64;
        let m = sq_devs.iter().sum::<f64>() / sq_devs.len() as f64;
        let v = sq_devs.iter().map(|s| (s - m) * (s - m)).sum::<f64>()
            / (sq_devs.len() - 1) as f64;
        let std_err = (v / sq_devs.len() as f64).sqrt();
        rows.push(DiversityRow { h, variance, std_err });
    }
    Ok(rows)
}

/// Exact 1-D Wasserstein-1 between two empirical distributions.
fn w1_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    // Integrate |F_a - F_b| over the merged breakpoints.
    let mut pts: Vec<f64> = xs.iter().chain(ys.iter()).copied().collect();
    pts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let mut total = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    for w in pts.windows(2) {
        while i < xs.len() && xs[i] <= w[0] {
            i += 1;
        }
        while j < ys.len() && ys[j] <= w[0] {
            j += 1;
        }
        let fa = i as f64 / xs.len() as f64;
        let fb = j as f64 / ys.len() as f64;
        total += (fa - fb).abs() * (w[1] - w[0]);
    }
    total
}

/// Sliced 1-Wasserstein distance: mean 1-D W1 over random unit projections.
pub fn fidelity_proxy(
    samples_a: &[Vec<f64>],
    samples_b: &[Vec<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(invalid_arg("both sample sets must be nonempty"));
    }
    if projections < 32 {
        return Err(invalid_arg("need at least 32 projections"));
    }
    let dim = samples_a[0].len();
    if samples_a.iter().chain(samples_b).any(|s| s.len() != dim) {
        return Err(invalid_arg("sample dimensions do not match"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut u: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|x| *x /= norm);
        let pa: Vec<f64> = samples_a.iter().map(|s| dot(s, &u)).collect();
        let pb: Vec<f64> = samples_b.iter().map(|s| dot(s, &u)).collect();
        total += w1_1d(&pa, &pb);
    }
    Ok(total / projections as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One row of the reward/fidelity tradeoff table.
#[derive(Debug, Clone)]
pub struct TradeoffRow {
    pub step: usize,
    pub reward_2step: f64,
    pub fidelity: f64,
    pub error: Option<String>,
}

/// Render tradeoff rows as CSV (fixed header, rows sorted by step).
pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| r.step);
    let mut out = String::from("step,reward_2step,fidelity,error\n");
    for r in &sorted {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            r.reward_2step,
            r.fidelity,
            r.error.as_deref().unwrap_or("")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::cm_sample;
    use crate::diffusion::{make_schedule, ScheduleKind};
    use crate::nn::{DenoiserNet, NetConfig};
    use rand::SeedableRng;

    fn small_model(seed: u64) -> ConsistencyModel {
        let sched = make_schedule(20, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = DenoiserNet::new(
            NetConfig { dim: 2, n_classes: 2, hidden: 8, t_dim: 4, blocks: 1 },
            &mut rng,
        );
        ConsistencyModel::new(trunk, sched)
    }

    #[test]
    fn perturbation_moment_oracle() {
        let z = vec![1.5, -0.7, 0.3];
        let eps = 0.3;
        let n = 50_000;
        let mut acc = 0.0;
        for s in 0..n {
            let p = perturb_neighbor(&z, eps, s as u64).unwrap();
            acc += p.iter().map(|x| x * x).sum::<f64>();
        }
        let got = acc / n as f64;
        let z2: f64 = z.iter().map(|x| x * x).sum();
        let expect = z2 * (1.0 - eps * eps) + eps * eps * 3.0;
        assert!((got - expect).abs() / expect < 0.02, "{got} vs {expect}");
        // Determinism and validation.
        assert_eq!(
            perturb_neighbor(&z, eps, 7).unwrap(),
            perturb_neighbor(&z, eps, 7).unwrap()
        );
        assert!(perturb_neighbor(&z, 0.0, 0).is_err());
        assert!(perturb_neighbor(&z, 1.0, 0).is_err());
    }

    #[test]
    fn lipschitz_identity_map_oracle() {
        // f = identity (consistency model at its boundary cannot express
        // this, so probe the estimator directly with a linear quality on a
        // boundary-free stand-in): estimate should match the brute-force mean
        // of |a . (x_a - x_b)| / ||x_a - x_b|| over random pairs.
        let f = small_model(0);
        let a = [0.9, -1.3];
        let q = move |z: &[f64]| a[0] * z[0] + a[1] * z[1];
        // Reference estimate computed with the same lift but f skipped:
        // since f is applied in the probe, use level t where c_skip ~ 1 is
        // unavailable; instead verify scale-covariance and the direct oracle
        // on the 1-level probe of a trivially-identity model below.
        let report =
            local_lipschitz(&f, &q, &[5, 10], 0.01, 500, &[0, 1], 3).unwrap();
        assert_eq!(report.estimates.len(), 2);
        assert!(report.estimates.iter().all(|e| *e >= 0.0));
        // Scale covariance: q scaled by k scales every estimate by k exactly.
        let k = 3.7;
        let qk = move |z: &[f64]| k * (a[0] * z[0] + a[1] * z[1]);
        let scaled =
            local_lipschitz(&f, &qk, &[5, 10], 0.01, 500, &[0, 1], 3).unwrap();
        for (e, es) in report.estimates.iter().zip(&scaled.estimates) {
            assert!((es - k * e).abs() < 1e-12 * k.max(1.0), "{es} vs {}", k * e);
        }
        assert!(local_lipschitz(&f, &q, &[5], 0.01, 10, &[0], 0).is_err());
        assert!(local_lipschitz(&f, &q, &[0], 0.01, 500, &[0], 0).is_err());
        assert!(local_lipschitz(&f, &q, &[21], 0.01, 500, &[0], 0).is_err());
    }

    #[test]
    fn lipschitz_brute_force_oracle_on_linear_quality() {
        // With |q(x_a) - q(x_b)| = |a . d| and d = x_a - x_b, the expected
        // ratio is E|a . u| over random directions u. Brute-force both with
        // shared draws through the public estimator on a zero-output model
        // (c_out F = 0 contribution at t where trunk outputs are zeroed),
        // making f linear: f(x) = c_skip(t) x.
        let mut f = small_model(1);
        let zeros = vec![0.0; f.param_count()];
        f.set_flat(&zeros);
        let a = [1.1, 0.4];
        let q = move |z: &[f64]| a[0] * z[0] + a[1] * z[1];
        let t = 10usize;
        let report = local_lipschitz(&f, &q, &[t], 0.01, 20_000, &[0], 5).unwrap();
        // Oracle: f scales the difference by c_skip(t), so the ratio is
        // c_skip(t) |a . u| for unit u; average over many random directions.
        let cs = f.c_skip(t);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let d = [gauss(&mut rng), gauss(&mut rng)];
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            acc += (a[0] * d[0] + a[1] * d[1]).abs() / norm;
        }
        let expect = cs * acc / n as f64;
        let got = report.estimates[0];
        assert!((got - expect).abs() / expect < 0.05, "{got} vs {expect}");
    }

    #[test]
    fn td_identity_at_gamma_zero() {
        let f = small_model(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sur = SurrogateReward::from_teacher(&f.trunk, 6, &mut rng);
        let traces: Vec<TwoStepTrace> = (0..100)
            .map(|i| cm_sample(&f, i % 2, 2, i as u64).unwrap().two_step().unwrap())
            .collect();
        let rewards: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let (l_td, l_two, diff) = td_equivalence_check(&sur, &rewards, &traces, 0.0).unwrap();
        assert!(diff <= 1e-10, "max diff {diff}");
        assert!((l_td - l_two).abs() <= 1e-8);
        // Negative control: gamma = 0.9 generally differs.
        let (_, _, d9) = td_equivalence_check(&sur, &rewards, &traces, 0.9).unwrap();
        assert!(d9 > 1e-6);
        assert!(td_equivalence_check(&sur, &rewards[..1], &traces, 0.0).is_err());
    }

    #[test]
    fn td_constant_scores_closed_form() {
        // R == q and r == v constant: both sides are 2 (q - v)^2 per trace.
        let f = small_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sur = SurrogateReward::from_teacher(&f.trunk, 4, &mut rng);
        // Zero all weights, set the head output bias to q.
        let q = 0.7;
        let mut flat = vec![0.0; sur.param_count()];
        let n = flat.len();
        flat[n - 1] = q;
        sur.set_flat(&flat);
        let traces: Vec<TwoStepTrace> =
            (0..5).map(|i| cm_sample(&f, 0, 2, i).unwrap().two_step().unwrap()).collect();
        let v = -0.2;
        let rewards = vec![(v, v); 5];
        let (l_td, l_two, diff) = td_equivalence_check(&sur, &rewards, &traces, 0.0).unwrap();
        let expect = 5.0 * 2.0 * (q - v) * (q - v);
        assert!((l_td - expect).abs() < 1e-10, "{l_td} vs {expect}");
        assert!((l_two - expect).abs() < 1e-10);
        assert!(diff <= 1e-12);
    }

    #[test]
    fn diversity_zero_at_single_step() {
        let f = small_model(6);
        let rows = diversity_probe(&f, &[0, 1], &[1, 2, 4], 50, 11).unwrap();
        assert_eq!(rows[0].h, 1);
        assert_eq!(rows[0].variance, 0.0);
        assert!(rows[1].variance > 0.0);
        // Reproducible.
        let again = diversity_probe(&f, &[0, 1], &[1, 2, 4], 50, 11).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.variance, b.variance);
        }
        assert!(diversity_probe(&f, &[], &[1], 50, 0).is_err());
        assert!(diversity_probe(&f, &[0], &[1], 1, 0).is_err());
    }

    #[test]
    fn w1_oracle_cases() {
        // Identical sets: zero.
        let a = vec![vec![0.3, 0.4], vec![-1.0, 0.2], vec![0.9, -0.5]];
        assert_eq!(fidelity_proxy(&a, &a, 64, 0).unwrap(), 0.0);
        // Symmetry.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<Vec<f64>> =
            (0..40).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let ab = fidelity_proxy(&a, &b, 128, 9).unwrap();
        let ba = fidelity_proxy(&b, &a, 128, 9).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // Shift oracle: shifting one set by delta gives ~ E|delta . u|.
        let delta = [0.8, -0.3];
        let shifted: Vec<Vec<f64>> =
            b.iter().map(|s| vec![s[0] + delta[0], s[1] + delta[1]]).collect();
        let got = fidelity_proxy(&b, &shifted, 4096, 4).unwrap();
        let mut acc = 0.0;
        let n = 200_000;
        let mut orng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..n {
            let d = [gauss(&mut orng), gauss(&mut orng)];
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            acc += (delta[0] * d[0] + delta[1] * d[1]).abs() / norm;
        }
        let expect = acc / n as f64;
        assert!((got - expect).abs() / expect < 0.03, "{got} vs {expect}");
        assert!(fidelity_proxy(&a, &[], 64, 0).is_err());
        assert!(fidelity_proxy(&a, &b, 8, 0).is_err());
    }

    #[test]
    fn exact_1d_w1_against_sorted_mean_oracle() {
        // For equal-size sets, W1 equals the mean absolute difference of
        // the sorted samples.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..33).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ys: Vec<f64> = (0..33).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut sx = xs.clone();
        let mut sy = ys.clone();
        sx.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sy.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: f64 =
            sx.iter().zip(&sy).map(|(a, b)| (a - b).abs()).sum::<f64>() / 33.0;
        assert!((w1_1d(&xs, &ys) - oracle).abs() < 1e-10);
    }

    #[test]
    fn tradeoff_rows_sorted_with_error_entries() {
        let rows = vec![
            TradeoffRow { step: 300, reward_2step: 0.5, fidelity: 0.2, error: None },
            TradeoffRow {
                step: 100,
                reward_2step: f64::NAN,
                fidelity: f64::NAN,
                error: Some("missing checkpoint".into()),
            },
            TradeoffRow { step: 200, reward_2step: 0.4, fidelity: 0.3, error: None },
        ];
        let csv = tradeoff_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "step,reward_2step,fidelity,error");
        assert!(lines[1].starts_with("100,") && lines[1].ends_with("missing checkpoint"));
        assert!(lines[2].starts_with("200,"));
        assert!(lines[3].starts_with("300,"));
    }
}
