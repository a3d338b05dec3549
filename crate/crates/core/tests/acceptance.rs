//! Acceptance gate: thirteen end-to-end criteria, one pass/fail line each.
//!
//! Criteria 10-12 share one five-seed fine-tuning experiment (built lazily on
//! first use); criteria 7 and 9 build their own heavier fixtures. Everything
//! else runs on small untrained or lightly trained stacks.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use lasro::analysis::{
    diversity_probe, fidelity_proxy, local_lipschitz, td_equivalence_check,
};
use lasro::baselines::{
    ddpo_grad, direct_grad_loss_and_grad, finetune_ddpo, finetune_gors, finetune_rwr,
    gaussian_logprob, Transition,
};
use lasro::config::parse_config_str;
use lasro::consistency::{cm_sample, distill_student, ConsistencyModel};
use lasro::diffusion::{
    ddpm_sample, make_schedule, make_toy_dataset, train_teacher, DatasetKind, ScheduleKind,
    ToyDataset,
};
use lasro::harness::{Harness, METRICS_FILE};
use lasro::nn::{DenoiserNet, NetConfig, OptimizerKind};
use lasro::rewards::{
    pair_loss_on_tape, pair_loss_value, surrogate_pair_loss, RewardSignal, SurrogateReward, WLPair,
};
use lasro::tape::Tape;
use lasro::train::{
    finetune_altft, finetune_lasro, lasro_ft_loss, lasro_ft_loss_and_grad, normalize_clip,
    pretrain_surrogate, update_stats, FtContext, RunningStats, TrainConfig, STATS_DELTA,
};
use lasro::Error;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One line per criterion; the assert carries the diagnostic on failure.
fn report(n: usize, name: &str, ok: bool, detail: String) {
    println!("criterion {n} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}): {detail}");
}

/// Small untrained stack: enough structure for exactness and gradient checks.
fn small_pipeline(seed: u64) -> (ConsistencyModel, DenoiserNet, ToyDataset, SurrogateReward) {
    let sched = make_schedule(20, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
    let ds = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 2, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetConfig { dim: 2, n_classes: 2, hidden: 12, t_dim: 4, blocks: 1 };
    let teacher = DenoiserNet::new(cfg, &mut rng);
    let f = ConsistencyModel::new(DenoiserNet::new(cfg, &mut rng), sched);
    let surrogate = SurrogateReward::from_teacher(&teacher, 8, &mut rng);
    (f, teacher, ds, surrogate)
}

fn primed_stats(v: f64) -> RunningStats {
    let mut s = RunningStats::new();
    for _ in 0..20 {
        s = update_stats(&s, v).unwrap();
    }
    s
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// One-sample t statistic of paired differences (tests mean > 0).
fn paired_t(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let m = mean(diffs);
    let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0);
    m / (var / n).sqrt()
}

/// Standard error of the mean of paired differences.
fn paired_se(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let m = mean(diffs);
    let var = diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Spearman rank correlation; ties are not expected in these inputs.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (rx, ry) = (rank(xs), rank(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

// ---------------------------------------------------------------------------
// Shared five-seed experiment for criteria 10, 11 and 12.
// ---------------------------------------------------------------------------

struct SeedOut {
    base1: f64,
    l1: f64,
    l2: f64,
    g2: f64,
    d2: f64,
    w2: f64,
    alt2: f64,
    noc12: f64,
    noad2: f64,
    /// (reward, fidelity) at each of five matched checkpoints.
    la_curve: Vec<(f64, f64)>,
    rw_curve: Vec<(f64, f64)>,
}

struct Expt {
    seeds: Vec<SeedOut>,
    elapsed: Duration,
}

fn eval_reward(f: &ConsistencyModel, reward: &RewardSignal, h: usize, n: usize, seed: u64) -> f64 {
    (0..n)
        .map(|i| {
            let class = i % 4;
            let tr = cm_sample(f, class, h, seed + i as u64).unwrap();
            reward.evaluate(tr.final_output(), class).unwrap()
        })
        .sum::<f64>()
        / n as f64
}

fn eval_fidelity(f: &ConsistencyModel, ds: &ToyDataset, n: usize, seed: u64) -> f64 {
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|i| cm_sample(f, i % 4, 2, seed + i as u64).unwrap().final_output().to_vec())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd);
    let data: Vec<Vec<f64>> =
        ds.sample_batch(n, &mut rng).into_iter().map(|(x, _)| x).collect();
    fidelity_proxy(&samples, &data, 64, seed ^ 0xf).unwrap()
}

static EXPT: LazyLock<Expt> = LazyLock::new(|| {
    let t0 = Instant::now();
    let steps = 2000usize;
    let chunks = 5usize;
    let mut seeds = Vec::new();
    for seed in 0..5u64 {
        let sched = make_schedule(100, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
        let ds = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 4, seed).unwrap();
        let net_cfg = NetConfig { dim: 2, n_classes: 4, hidden: 16, t_dim: 4, blocks: 1 };
        let teacher =
            train_teacher(net_cfg, &ds, &sched, 1500, 32, 2e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let (student, _) =
            distill_student(&teacher, &ds, &sched, 1500, 32, 10, 1e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let cfg = TrainConfig::default();
        let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        let init = SurrogateReward::from_teacher(&teacher, 16, &mut rng);
        let (sur, _) =
            pretrain_surrogate(&cfg, &student, &init, &reward, &[0, 1, 2, 3], 800, seed).unwrap();
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 10 };
        let conds = [0usize, 1, 2, 3];
        let es = seed ^ 0xe;

        // Straight matched-budget runs: LaSRO, baselines, ablations.
        let la = finetune_lasro(&cfg, &student, &sur, &reward, &ctx, &conds, steps, seed).unwrap();
        let go = finetune_gors(&cfg, &student, &reward, &ctx, &conds, steps, seed).unwrap();
        let dd = finetune_ddpo(&cfg, &student, &reward, &ctx, &conds, steps, seed, true).unwrap();
        let rw = finetune_rwr(&cfg, &student, &reward, &ctx, &conds, steps, seed).unwrap();
        let alt = finetune_altft(&cfg, &student, &sur, &reward, &ctx, steps, seed).unwrap();
        let cfg_c1 = TrainConfig { c1: 0.0, ..cfg.clone() };
        let noc1 =
            finetune_lasro(&cfg_c1, &student, &sur, &reward, &ctx, &conds, steps, seed).unwrap();
        let cfg_n2 = TrainConfig { n2: 0, ..cfg.clone() };
        let noad =
            finetune_lasro(&cfg_n2, &student, &sur, &reward, &ctx, &conds, steps, seed).unwrap();

        // Chunked runs at the same total budget for matched checkpoints.
        let per = steps / chunks;
        let mut model = student.clone();
        let mut s = sur.clone();
        let mut la_curve = Vec::new();
        for c in 0..chunks {
            let r = finetune_lasro(
                &cfg, &model, &s, &reward, &ctx, &conds, per, seed.wrapping_add(c as u64),
            )
            .unwrap();
            model = r.model;
            s = r.surrogate;
            la_curve.push((
                eval_reward(&r.ema, &reward, 2, 256, es),
                eval_fidelity(&r.ema, &ds, 256, es),
            ));
        }
        let mut m2 = student.clone();
        let mut rw_curve = Vec::new();
        for c in 0..chunks {
            let r = finetune_rwr(&cfg, &m2, &reward, &ctx, &conds, per, seed.wrapping_add(c as u64))
                .unwrap();
            m2 = r.model;
            rw_curve.push((
                eval_reward(&r.ema, &reward, 2, 256, es),
                eval_fidelity(&r.ema, &ds, 256, es),
            ));
        }

        seeds.push(SeedOut {
            base1: eval_reward(&student, &reward, 1, 256, es),
            l1: eval_reward(&la.ema, &reward, 1, 256, es),
            l2: eval_reward(&la.ema, &reward, 2, 256, es),
            g2: eval_reward(&go.ema, &reward, 2, 256, es),
            d2: eval_reward(&dd.ema, &reward, 2, 256, es),
            w2: eval_reward(&rw.ema, &reward, 2, 256, es),
            alt2: eval_reward(&alt.ema, &reward, 2, 256, es),
            noc12: eval_reward(&noc1.ema, &reward, 2, 256, es),
            noad2: eval_reward(&noad.ema, &reward, 2, 256, es),
            la_curve,
            rw_curve,
        });
    }
    Expt { seeds, elapsed: t0.elapsed() }
});

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_td_equivalence() {
    let start = Instant::now();
    let (f, _, _, sur) = small_pipeline(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut traces = Vec::new();
    let mut rewards = Vec::new();
    for i in 0..100 {
        traces.push(cm_sample(&f, i % 2, 2, rng.gen()).unwrap().two_step().unwrap());
        rewards.push((rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0));
    }
    let (_, _, max_diff) = td_equivalence_check(&sur, &rewards, &traces, 0.0).unwrap();
    let elapsed = start.elapsed();
    report(
        1,
        "td-equivalence at gamma = 0",
        max_diff <= 1e-10 && elapsed < Duration::from_secs(5),
        format!("max_diff={max_diff:e} elapsed={elapsed:?}"),
    );
}

#[test]
fn criterion_02_pair_loss_exactness() {
    let equal = pair_loss_value(0.3, 0.3);
    let gap_one = pair_loss_value(1.0, 0.0);
    let want_gap = (1.0 + (-1.0f64).exp()).ln();
    let ok = (equal - std::f64::consts::LN_2).abs() <= 1e-12
        && (gap_one - want_gap).abs() <= 1e-12;
    report(
        2,
        "pair-loss exactness",
        ok,
        format!("equal={equal:.15} gap_one={gap_one:.15} want_gap={want_gap:.15}"),
    );
}

#[test]
fn criterion_03_s_function_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let total = 100_000usize;
    let mut literal = 0usize;
    let mut ok = true;
    let mut detail = String::new();
    for stream in 0..total {
        let len = rng.gen_range(4..24);
        let mut stats = RunningStats::new();
        for _ in 0..len {
            stats = update_stats(&stats, rng.gen::<f64>() * 4.0 - 2.0).unwrap();
        }
        let any = normalize_clip(&stats, rng.gen::<f64>() * 20.0 - 10.0).unwrap();
        let at_mean = normalize_clip(&stats, stats.mean).unwrap();
        // No lower clipping, via the effective divisor on every stream.
        let deep = normalize_clip(&stats, stats.mean - 5.0 * stats.divisor()).unwrap();
        if any > 1.0 || at_mean != 0.0 || (deep + 5.0).abs() > 1e-9 {
            ok = false;
            detail = format!("stream {stream}: any={any} at_mean={at_mean} deep={deep}");
            break;
        }
        // The literal mean - 5 * p90 form needs the p90 itself as divisor
        // (not the delta floor); most random streams provide that.
        if stats.p90 >= STATS_DELTA {
            literal += 1;
            let low = normalize_clip(&stats, stats.mean - 5.0 * stats.p90).unwrap();
            if (low + 5.0).abs() > 1e-9 {
                ok = false;
                detail = format!("stream {stream}: low={low}");
                break;
            }
        }
    }
    if ok && (literal as f64) < 0.5 * total as f64 {
        ok = false;
        detail = format!("only {literal}/{total} streams exercised the -5 identity");
    }
    report(3, "S-function contract", ok, detail);
}

#[test]
fn criterion_04_gradient_integrity() {
    let start = Instant::now();
    let eps = 1e-6;
    let mut failures = Vec::new();
    let mut check =
        |label: &str, base: &[f64], grad: &[f64], eval: &mut dyn FnMut(&[f64]) -> f64, seed| {
            let mut idx_rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..10 {
                let i = idx_rng.gen_range(0..base.len());
                let mut hi = base.to_vec();
                hi[i] += eps;
                let fh = eval(&hi);
                let mut lo = base.to_vec();
                lo[i] -= eps;
                let fl = eval(&lo);
                let fd = (fh - fl) / (2.0 * eps);
                let denom = fd.abs().max(grad[i].abs()).max(1e-8);
                let rel = (fd - grad[i]).abs() / denom;
                if rel >= 1e-4 {
                    failures.push(format!("{label} coord {i}: fd={fd} ad={} rel={rel}", grad[i]));
                }
            }
        };

    let (f, teacher, ds, sur) = small_pipeline(4);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let z: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

    // Surrogate score w.r.t. its parameters.
    {
        let mut tape = Tape::new();
        let vars = sur.register(&mut tape);
        let zl = tape.leaf(z.clone());
        let s = sur.score_on_tape(&mut tape, &vars, zl, 1);
        let grads = tape.backward(&[(s, vec![1.0])]);
        let grad = sur.flat_grads(&grads, &vars);
        let base = sur.flat();
        let mut s2 = sur.clone();
        let zc = z.clone();
        check("surrogate_score", &base, &grad, &mut |p| {
            s2.set_flat(p);
            s2.score(&zc, 1).unwrap()
        }, 41);
    }

    // Pairwise loss w.r.t. the surrogate parameters.
    {
        let zw: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let zl: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let pair = WLPair {
            z_w: zw.clone(),
            z_l: zl.clone(),
            class: 0,
            r_w: 1.0,
            r_l: 0.0,
            step_index: 2,
        };
        let mut tape = Tape::new();
        let vars = sur.register(&mut tape);
        let w = tape.leaf(zw);
        let l = tape.leaf(zl);
        let sw = sur.score_on_tape(&mut tape, &vars, w, 0);
        let sl = sur.score_on_tape(&mut tape, &vars, l, 0);
        let loss = pair_loss_on_tape(&mut tape, sw, sl);
        let grads = tape.backward(&[(loss, vec![1.0])]);
        let grad = sur.flat_grads(&grads, &vars);
        let base = sur.flat();
        let mut s2 = sur.clone();
        check("pair_loss", &base, &grad, &mut |p| {
            s2.set_flat(p);
            surrogate_pair_loss(&s2, &pair).unwrap()
        }, 42);
    }

    // Full fine-tuning loss w.r.t. the sampler parameters.
    {
        let trace = cm_sample(&f, 1, 2, 8).unwrap().two_step().unwrap();
        let batch = ds.sample_batch(3, &mut rng);
        let cfg = TrainConfig::default();
        let (s1, s2) = (primed_stats(0.05), primed_stats(0.0));
        let (_, _, grad) =
            lasro_ft_loss_and_grad(&f, &f, &sur, &trace, &s1, &s2, &cfg, &teacher, &batch, 5, 13)
                .unwrap();
        let base = f.flat();
        let mut f2 = f.clone();
        check("lasro_ft_loss", &base, &grad, &mut |p| {
            f2.set_flat(p);
            lasro_ft_loss(&f2, &f, &sur, &trace, &s1, &s2, &cfg, &teacher, &batch, 5, 13).unwrap()
        }, 43);
    }

    // Direct true-reward loss w.r.t. the sampler parameters.
    {
        let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
        let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
        let trace = cm_sample(&f, 0, 2, 17).unwrap().two_step().unwrap();
        let cfg = TrainConfig::default();
        let frozen = f.clone();
        let (_, grad) =
            direct_grad_loss_and_grad(&f, &frozen, &reward, &trace, &cfg, &ctx, 21).unwrap();
        let base = f.flat();
        let mut f2 = f.clone();
        check("direct_grad", &base, &grad, &mut |p| {
            f2.set_flat(p);
            direct_grad_loss_and_grad(&f2, &frozen, &reward, &trace, &cfg, &ctx, 21).unwrap().0
        }, 44);
    }

    let elapsed = start.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(60);
    report(4, "gradient integrity", ok, format!("elapsed={elapsed:?} failures={failures:?}"));
}

#[test]
fn criterion_05_structural_degeneracy() {
    let (f, teacher, ds, _) = small_pipeline(5);
    let trace = cm_sample(&f, 0, 2, 9).unwrap().two_step().unwrap();
    let second = Transition::second_of(&trace, &f);
    let density_err = gaussian_logprob(&f, &second);
    let reward = RewardSignal::target_region(ds.means.clone()).unwrap();
    let ctx = FtContext { teacher: &teacher, dataset: &ds, k: 5 };
    let cfg = TrainConfig::default();
    let refusal = finetune_ddpo(&cfg, &f, &reward, &ctx, &[0, 1], 3, 1, false);
    let ok = matches!(density_err, Err(Error::NoDensity(_)))
        && matches!(refusal, Err(Error::NoDensity(_)));
    report(
        5,
        "structural degeneracy at H = 2",
        ok,
        format!("density={density_err:?} refusal_err={:?}", refusal.err()),
    );
}

#[test]
fn criterion_06_score_function_identity() {
    let (f, _, _, _) = small_pipeline(6);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let n_total = 10_000usize;
    let chunk = 500usize;
    let dim = f.param_count();
    let mut g_nb = vec![0.0; dim];
    let mut g_b = vec![0.0; dim];
    for _ in 0..n_total / chunk {
        let transitions: Vec<Transition> = (0..chunk)
            .map(|i| {
                let tr = cm_sample(&f, i % 2, 2, rng.gen()).unwrap().two_step().unwrap();
                Transition::first_of(&tr, &f)
            })
            .collect();
        // Constant reward 1.0; the batch-mean baseline removes it exactly.
        let nb = ddpo_grad(&f, &transitions, &vec![1.0; chunk]).unwrap();
        let b = ddpo_grad(&f, &transitions, &vec![0.0; chunk]).unwrap();
        let w = chunk as f64 / n_total as f64;
        for i in 0..dim {
            g_nb[i] += w * nb[i];
            g_b[i] += w * b[i];
        }
    }
    let (nn, nb) = (norm(&g_nb), norm(&g_b));
    let ok = nn > 0.0 && nb <= 1e-3 * nn;
    report(
        6,
        "score-function identity",
        ok,
        format!("baseline_norm={nb:e} no_baseline_norm={nn:e}"),
    );
}

#[test]
fn criterion_07_distillation_quality() {
    let start = Instant::now();
    let (mut student_w1, mut teacher_w1) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let sched = make_schedule(100, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
        let ds = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 4, seed).unwrap();
        let net_cfg = NetConfig { dim: 2, n_classes: 4, hidden: 16, t_dim: 4, blocks: 1 };
        let teacher =
            train_teacher(net_cfg, &ds, &sched, 1500, 32, 2e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let (student, _) =
            distill_student(&teacher, &ds, &sched, 5000, 32, 20, 1e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdeed);
        let n = 512usize;
        let data: Vec<Vec<f64>> = (0..n).map(|i| ds.sample(i % 4, &mut rng)).collect();
        let stu: Vec<Vec<f64>> = (0..n)
            .map(|i| cm_sample(&student, i % 4, 1, rng.gen()).unwrap().final_output().to_vec())
            .collect();
        let tea: Vec<Vec<f64>> = (0..n)
            .map(|i| ddpm_sample(&teacher, i % 4, &sched, 50, rng.gen()).unwrap())
            .collect();
        let ws = fidelity_proxy(&stu, &data, 128, seed ^ 0xf1de).unwrap();
        let wt = fidelity_proxy(&tea, &data, 128, seed ^ 0xf1de).unwrap();
        per_seed.push((ws, wt));
        student_w1 += ws / 5.0;
        teacher_w1 += wt / 5.0;
    }
    let elapsed = start.elapsed();
    let ok = student_w1 <= 2.0 * teacher_w1 && elapsed <= Duration::from_secs(900);
    report(
        7,
        "one-step distillation quality",
        ok,
        format!(
            "student_w1={student_w1:.4} teacher_w1={teacher_w1:.4} per_seed={per_seed:?} \
             elapsed={elapsed:?}"
        ),
    );
}

#[test]
fn criterion_08_exploration_collapse() {
    let sched = make_schedule(100, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
    let ds = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 4, 0).unwrap();
    let net_cfg = NetConfig { dim: 2, n_classes: 4, hidden: 16, t_dim: 4, blocks: 1 };
    let teacher =
        train_teacher(net_cfg, &ds, &sched, 800, 32, 2e-3, OptimizerKind::Adam, 0).unwrap();
    let (student, _) =
        distill_student(&teacher, &ds, &sched, 800, 32, 10, 1e-3, OptimizerKind::Adam, 0).unwrap();
    let rows = diversity_probe(&student, &[0, 1, 2, 3], &[1, 2, 4, 8], 1000, 77).unwrap();
    let mut ok = rows[0].variance == 0.0;
    let mut gaps = Vec::new();
    for w in rows.windows(2) {
        let gap = w[1].variance - w[0].variance;
        let se = w[0].std_err.hypot(w[1].std_err);
        gaps.push((gap, se));
        ok &= gap >= 2.0 * se;
    }
    let vars: Vec<f64> = rows.iter().map(|r| r.variance).collect();
    report(
        8,
        "exploration collapse ordering",
        ok,
        format!("variances={vars:?} (gap, se)={gaps:?}"),
    );
}

#[test]
fn criterion_09_lipschitz_growth() {
    let t_levels = [2usize, 5, 10, 20, 50];
    let mut mean_target = vec![0.0; t_levels.len()];
    let mut mean_negld = vec![0.0; t_levels.len()];
    for seed in 0..5u64 {
        let sched = make_schedule(100, ScheduleKind::Linear, 1e-3, 0.15).unwrap();
        let base = make_toy_dataset(DatasetKind::MixtureOfGaussians, 2, 4, seed).unwrap();
        // Hierarchical unconditional mixture: each coarse cluster splits into
        // four fine subcomponents, so quality maps stay multimodal within the
        // single condition at every scale the probe can resolve.
        let mut means = Vec::new();
        for c in &base.means {
            for j in 0..4 {
                let ang = std::f64::consts::TAU * j as f64 / 4.0;
                means.push(vec![c[0] + 0.35 * ang.cos(), c[1] + 0.35 * ang.sin()]);
            }
        }
        let dsu = ToyDataset {
            kind: DatasetKind::MixtureOfGaussians,
            dim: 2,
            n_classes: 1,
            means,
            comp_std: 0.09,
        };
        let net_cfg = NetConfig { dim: 2, n_classes: 1, hidden: 32, t_dim: 4, blocks: 1 };
        let teacher =
            train_teacher(net_cfg, &dsu, &sched, 3000, 32, 2e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let (student, _) =
            distill_student(&teacher, &dsu, &sched, 600, 32, 10, 1e-3, OptimizerKind::Adam, seed)
                .unwrap();
        let reward = RewardSignal::target_region(base.means.clone()).unwrap();
        let q_target = move |x: &[f64]| reward.evaluate(x, 0).unwrap();
        let dsd = dsu.clone();
        let q_negld = move |x: &[f64]| -dsd.log_density(x).unwrap();
        let probe_seed = seed.wrapping_mul(1000);
        let rep_t =
            local_lipschitz(&student, &q_target, &t_levels, 0.01, 1000, &[0], probe_seed).unwrap();
        let rep_d =
            local_lipschitz(&student, &q_negld, &t_levels, 0.01, 1000, &[0], probe_seed).unwrap();
        for i in 0..t_levels.len() {
            mean_target[i] += rep_t.estimates[i] / 5.0;
            mean_negld[i] += rep_d.estimates[i] / 5.0;
        }
    }
    let levels: Vec<f64> = t_levels.iter().map(|&t| t as f64).collect();
    let rho_t = spearman(&levels, &mean_target);
    let rho_d = spearman(&levels, &mean_negld);
    let ok = rho_t > 0.9 && rho_d > 0.9;
    report(
        9,
        "local Lipschitz growth",
        ok,
        format!(
            "rho_target={rho_t:.3} rho_negld={rho_d:.3} \
             target={mean_target:?} negld={mean_negld:?}"
        ),
    );
}

#[test]
fn criterion_10_method_ordering() {
    let e = &*EXPT;
    let t_crit = 2.131847; // one-sided p < 0.05 at 4 degrees of freedom
    let d_gors: Vec<f64> = e.seeds.iter().map(|s| s.l2 - s.g2).collect();
    let d_ddpo: Vec<f64> = e.seeds.iter().map(|s| s.l2 - s.d2).collect();
    let d_rwr: Vec<f64> = e.seeds.iter().map(|s| s.l2 - s.w2).collect();
    let d_one: Vec<f64> = e.seeds.iter().map(|s| s.l1 - s.base1).collect();
    let (tg, td, tw) = (paired_t(&d_gors), paired_t(&d_ddpo), paired_t(&d_rwr));
    let one_step_gain = mean(&d_one);
    let ok = tg > t_crit
        && td > t_crit
        && tw > t_crit
        && one_step_gain > 0.0
        && e.elapsed <= Duration::from_secs(3600);
    report(
        10,
        "method ordering at matched budget",
        ok,
        format!(
            "t_gors={tg:.3} t_ddpo={td:.3} t_rwr={tw:.3} one_step_gain={one_step_gain:.4} \
             elapsed={:?}",
            e.elapsed
        ),
    );
}

#[test]
fn criterion_11_ablation_ordering() {
    let e = &*EXPT;
    let ablations: [(&str, Vec<f64>); 3] = [
        ("alt_ft", e.seeds.iter().map(|s| s.l2 - s.alt2).collect()),
        ("c1_zero", e.seeds.iter().map(|s| s.l2 - s.noc12).collect()),
        ("no_online_adapt", e.seeds.iter().map(|s| s.l2 - s.noad2).collect()),
    ];
    let mut strict = 0;
    let mut ties = 0;
    let mut detail = String::new();
    let mut each_ok = true;
    for (name, diffs) in &ablations {
        let m = mean(diffs);
        let se = paired_se(diffs);
        let is_strict = m > 0.0;
        let is_tie = m.abs() <= se;
        if is_strict {
            strict += 1;
        } else if is_tie {
            ties += 1;
        } else {
            each_ok = false;
        }
        detail.push_str(&format!("{name}: mean_diff={m:.4} se={se:.4}; "));
    }
    let ok = each_ok && strict >= 2 && ties <= 1;
    report(11, "ablation ordering", ok, format!("{detail}strict={strict} ties={ties}"));
}

#[test]
fn criterion_12_tradeoff_dominance() {
    let e = &*EXPT;
    let chunks = e.seeds[0].la_curve.len();
    let mut wins = 0;
    let mut detail = String::new();
    for c in 0..chunks {
        let avg = |pick: &dyn Fn(&SeedOut) -> (f64, f64)| {
            let (mut r, mut f) = (0.0, 0.0);
            for s in &e.seeds {
                let (pr, pf) = pick(s);
                r += pr / e.seeds.len() as f64;
                f += pf / e.seeds.len() as f64;
            }
            (r, f)
        };
        let (la_r, la_f) = avg(&|s: &SeedOut| s.la_curve[c]);
        let (rw_r, rw_f) = avg(&|s: &SeedOut| s.rw_curve[c]);
        let dominant = la_r >= rw_r && la_f <= rw_f && (la_r > rw_r || la_f < rw_f);
        if dominant {
            wins += 1;
        }
        detail.push_str(&format!(
            "ck{c}: lasro=({la_r:.4},{la_f:.4}) rwr=({rw_r:.4},{rw_f:.4}) dom={dominant}; "
        ));
    }
    report(12, "tradeoff Pareto dominance", wins >= 3, format!("wins={wins}/5 {detail}"));
}

#[test]
fn criterion_13_determinism() {
    let cfg_text = r#"{
        "seed": 7,
        "net": {"hidden": 10, "t_dim": 4, "blocks": 1},
        "teacher": {"iters": 40, "batch": 8},
        "distill": {"iters": 40, "batch": 8, "k": 20},
        "surrogate": {"head_hidden": 8, "pretrain_iters": 40},
        "finetune": {"steps": 6, "checkpoints": 2, "eval_samples": 8},
        "analyze": {"n": 100, "draws": 16, "td_traces": 4,
                    "t_levels": [5, 50], "h_list": [1, 2], "projections": 32}
    }"#;
    let run = |dir: &std::path::Path| -> String {
        let cfg = parse_config_str(cfg_text).unwrap();
        let h = Harness::new(cfg, dir.to_path_buf(), None).unwrap();
        h.train_teacher().unwrap();
        h.distill().unwrap();
        h.pretrain_reward().unwrap();
        h.finetune("lasro").unwrap();
        h.analyze("td", "lasro").unwrap();
        std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (m1, m2) = (run(d1.path()), run(d2.path()));
    let ok = !m1.is_empty() && m1 == m2;
    report(
        13,
        "bit-identical metrics streams",
        ok,
        format!("len1={} len2={} equal={}", m1.len(), m2.len(), m1 == m2),
    );
}
