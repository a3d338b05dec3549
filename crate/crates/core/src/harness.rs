//! Run orchestration: owns the run directory, dispatches subcommands, and
//! persists metrics, checkpoints, and reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    diversity_probe, fidelity_proxy, local_lipschitz, td_equivalence_check, tradeoff_csv,
    TradeoffRow,
};
use crate::baselines::{finetune_ddpo, finetune_direct, finetune_gors, finetune_rwr};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use crate::config::{emit_config, RunConfig, SCHEMA_VERSION};
use crate::consistency::{cm_sample, ConsistencyModel};
use crate::diffusion::{ddpm_sample, make_schedule, make_toy_dataset, ToyDataset};
use crate::error::{invalid_arg, Error, Result};
use crate::metrics::{MetricRecord, MetricsSink};
use crate::nn::{DenoiserNet, NetConfig};
use crate::rewards::{train_classifier, RewardSignal, SurrogateReward};
use crate::train::{finetune_altft, finetune_lasro, pretrain_surrogate, FinetuneResult, FtContext};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "effective_config.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

pub const METHODS: [&str; 6] = ["lasro", "ddpo", "rwr", "gors", "direct", "altft"];
pub const PROBES: [&str; 5] = ["lipschitz", "td", "diversity", "fidelity", "tradeoff"];

/// One run owns one run directory; all artifacts live under it.
pub struct Harness {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub seed: u64,
    start: Instant,
}

impl Harness {
    /// Create the run directory (if needed), echo the effective config, and
    /// stamp provenance. `seed_override` wins over the config seed.
    pub fn new(cfg: RunConfig, run_dir: PathBuf, seed_override: Option<u64>) -> Result<Self> {
        let seed = seed_override.unwrap_or(cfg.seed);
        std::fs::create_dir_all(&run_dir)?;
        let mut effective = cfg.clone();
        effective.seed = seed;
        effective.io.run_dir = Some(run_dir.display().to_string());
        std::fs::write(run_dir.join(CONFIG_FILE), emit_config(&effective))?;
        let stamp = serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "code_revision": format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            "timestamp_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "seed": seed,
        });
        std::fs::write(run_dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&stamp)?)?;
        Ok(Self { cfg, run_dir, seed, start: Instant::now() })
    }

    fn wall(&self) -> f64 {
        if self.cfg.io.record_wall_time {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    fn sink(&self) -> Result<MetricsSink> {
        MetricsSink::create(&self.run_dir.join(METRICS_FILE))
    }

    fn record(&self, method: &str, stage: &str, step: usize, name: &str, value: f64) -> MetricRecord {
        MetricRecord {
            run_id: format!("seed{}", self.seed),
            method: method.into(),
            stage: stage.into(),
            step,
            name: name.into(),
            value: Some(value),
            seed: self.seed,
            wall_time: self.wall(),
        }
    }

    // --- model plumbing -----------------------------------------------------

    fn dataset(&self) -> Result<ToyDataset> {
        let d = &self.cfg.dataset;
        make_toy_dataset(d.kind, d.dim, d.n_classes, d.seed)
    }

    fn net_config(&self) -> NetConfig {
        NetConfig {
            dim: self.cfg.dataset.dim,
            n_classes: self.cfg.dataset.n_classes,
            hidden: self.cfg.net.hidden,
            t_dim: self.cfg.net.t_dim,
            blocks: self.cfg.net.blocks,
        }
    }

    fn conditions(&self) -> Vec<usize> {
        (0..self.cfg.dataset.n_classes).collect()
    }

    fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let path = self.artifact(name);
        if !path.exists() {
            return Err(Error::Precondition(format!(
                "{} (expected at {})",
                name,
                path.display()
            )));
        }
        Ok(path)
    }

    fn load_into(&self, path: &Path, expected: usize) -> Result<Vec<f64>> {
        let (params, _manifest) = load_checkpoint(path)?;
        if params.len() != expected {
            return Err(Error::CheckpointMismatch {
                expected: format!("{expected} params for current config"),
                found: format!("{} params in {}", params.len(), path.display()),
            });
        }
        Ok(params)
    }

    fn load_teacher(&self) -> Result<DenoiserNet> {
        let path = self.require("teacher.bin")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = DenoiserNet::new(self.net_config(), &mut rng);
        let params = self.load_into(&path, net.param_count())?;
        net.set_flat(&params);
        Ok(net)
    }

    fn load_student(&self) -> Result<ConsistencyModel> {
        let path = self.require("student.bin")?;
        let sc = &self.cfg.schedule;
        let sched = make_schedule(sc.t_max, sc.kind, sc.beta_min, sc.beta_max)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ConsistencyModel::new(DenoiserNet::new(self.net_config(), &mut rng), sched);
        let params = self.load_into(&path, model.param_count())?;
        model.set_flat(&params);
        Ok(model)
    }

    fn load_surrogate(&self, teacher: &DenoiserNet) -> Result<SurrogateReward> {
        let path = self.require("surrogate.bin")?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = SurrogateReward::from_teacher(teacher, self.cfg.surrogate.head_hidden, &mut rng);
        let params = self.load_into(&path, model.param_count())?;
        model.set_flat(&params);
        Ok(model)
    }

    fn build_reward(&self, dataset: &ToyDataset) -> Result<RewardSignal> {
        let r = &self.cfg.reward;
        match r.kind.as_str() {
            "target_region" => RewardSignal::target_region(dataset.means.clone()),
            "quantized" => RewardSignal::quantized(dataset.means.clone(), r.levels),
            "classifier" => {
                let clf = train_classifier(
                    dataset,
                    r.classifier_hidden,
                    r.classifier_iters,
                    32,
                    r.classifier_lr,
                    self.seed ^ 0x636c66,
                )?;
                Ok(RewardSignal::classifier(clf))
            }
            other => Err(invalid_arg(format!("unknown reward kind `{other}`"))),
        }
    }

    // --- subcommands --------------------------------------------------------

    pub fn train_teacher(&self) -> Result<()> {
        let dataset = self.dataset()?;
        let sc = &self.cfg.schedule;
        let sched = make_schedule(sc.t_max, sc.kind, sc.beta_min, sc.beta_max)?;
        let t = &self.cfg.teacher;
        let net = crate::diffusion::train_teacher(
            self.net_config(),
            &dataset,
            &sched,
            t.iters,
            t.batch,
            t.lr,
            self.cfg.train.optimizer,
            self.seed,
        )?;
        let mut sink = self.sink()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x65766c);
        let batch = dataset.sample_batch(64, &mut rng);
        let loss = crate::diffusion::ddpm_loss(&net, &batch, &sched, self.seed ^ 0x65766c)?;
        sink.emit(self.record("teacher", "teacher", t.iters, "eval_loss", loss))?;
        sink.flush()?;
        save_checkpoint(
            &net.flat(),
            &Manifest::new("teacher", t.iters, false, net.param_count()),
            &self.artifact("teacher.bin"),
        )
    }

    pub fn distill(&self) -> Result<()> {
        let teacher = self.load_teacher()?;
        let dataset = self.dataset()?;
        let sc = &self.cfg.schedule;
        let sched = make_schedule(sc.t_max, sc.kind, sc.beta_min, sc.beta_max)?;
        let d = &self.cfg.distill;
        let (student, losses) = crate::consistency::distill_student(
            &teacher,
            &dataset,
            &sched,
            d.iters,
            d.batch,
            d.k,
            d.lr,
            self.cfg.train.optimizer,
            self.seed,
        )?;
        let mut sink = self.sink()?;
        let stride = (losses.len() / 50).max(1);
        for (i, loss) in losses.iter().enumerate() {
            if i % stride == 0 || i + 1 == losses.len() {
                sink.emit(self.record("student", "distill", i, "distill_loss", *loss))?;
            }
        }
        sink.flush()?;
        save_checkpoint(
            &student.flat(),
            &Manifest::new("student", d.iters, false, student.param_count()),
            &self.artifact("student.bin"),
        )
    }

    pub fn pretrain_reward(&self) -> Result<()> {
        let teacher = self.load_teacher()?;
        let student = self.load_student()?;
        let dataset = self.dataset()?;
        let reward = self.build_reward(&dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x737572);
        let init = SurrogateReward::from_teacher(&teacher, self.cfg.surrogate.head_hidden, &mut rng);
        let (model, losses) = pretrain_surrogate(
            &self.cfg.train,
            &student,
            &init,
            &reward,
            &self.conditions(),
            self.cfg.surrogate.pretrain_iters,
            self.seed,
        )?;
        let mut sink = self.sink()?;
        let stride = (losses.len() / 50).max(1);
        for (i, loss) in losses.iter().enumerate() {
            if i % stride == 0 || i + 1 == losses.len() {
                sink.emit(self.record("surrogate", "pretrain", i, "pair_loss", *loss))?;
            }
        }
        sink.flush()?;
        save_checkpoint(
            &model.flat(),
            &Manifest::new("surrogate", self.cfg.surrogate.pretrain_iters, false, model.param_count()),
            &self.artifact("surrogate.bin"),
        )
    }

    fn run_method_chunk(
        &self,
        method: &str,
        model: &ConsistencyModel,
        surrogate: &SurrogateReward,
        reward: &RewardSignal,
        ctx: &FtContext,
        steps: usize,
        seed: u64,
    ) -> Result<FinetuneResult> {
        let cfg = &self.cfg.train;
        let conditions = self.conditions();
        match method {
            "lasro" => {
                let outer = (steps / cfg.n1.max(1)).max(1);
                finetune_lasro(cfg, model, surrogate, reward, ctx, &conditions, outer, seed)
            }
            "altft" => finetune_altft(cfg, model, surrogate, reward, ctx, steps, seed),
            "ddpo" => finetune_ddpo(cfg, model, reward, ctx, &conditions, steps, seed, true),
            "rwr" => finetune_rwr(cfg, model, reward, ctx, &conditions, steps, seed),
            "gors" => finetune_gors(cfg, model, reward, ctx, &conditions, steps, seed),
            "direct" => finetune_direct(cfg, model, reward, ctx, &conditions, steps, seed),
            other => Err(invalid_arg(format!(
                "unknown method `{other}`; expected one of {METHODS:?}"
            ))),
        }
    }

    /// Mean black-box reward of H-step samples from the EMA evaluation copy.
    fn eval_reward(
        &self,
        f: &ConsistencyModel,
        reward: &RewardSignal,
        h: usize,
        seed: u64,
    ) -> Result<f64> {
        let conditions = self.conditions();
        let n = self.cfg.finetune.eval_samples.max(1);
        let mut total = 0.0;
        for i in 0..n {
            let class = conditions[i % conditions.len()];
            let trace = cm_sample(f, class, h, seed.wrapping_add(i as u64))?;
            total += reward.evaluate(trace.final_output(), class)?;
        }
        Ok(total / n as f64)
    }

    /// Sliced-Wasserstein distance between H=2 samples and the data.
    fn eval_fidelity(&self, f: &ConsistencyModel, dataset: &ToyDataset, seed: u64) -> Result<f64> {
        let conditions = self.conditions();
        let n = self.cfg.finetune.eval_samples.max(2);
        let mut model_samples = Vec::with_capacity(n);
        for i in 0..n {
            let class = conditions[i % conditions.len()];
            let trace = cm_sample(f, class, 2, seed.wrapping_add(i as u64))?;
            model_samples.push(trace.final_output().to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x646174);
        let data: Vec<Vec<f64>> =
            dataset.sample_batch(n, &mut rng).into_iter().map(|(x, _)| x).collect();
        fidelity_proxy(&model_samples, &data, self.cfg.analyze.projections, seed ^ 0x70726f)
    }

    pub fn finetune(&self, method: &str) -> Result<()> {
        if !METHODS.contains(&method) {
            return Err(invalid_arg(format!(
                "unknown method `{method}`; expected one of {METHODS:?}"
            )));
        }
        let teacher = self.load_teacher()?;
        let mut model = self.load_student()?;
        let dataset = self.dataset()?;
        let reward = self.build_reward(&dataset)?;
        let needs_surrogate = matches!(method, "lasro" | "altft");
        let mut surrogate = if needs_surrogate {
            self.load_surrogate(&teacher)?
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            SurrogateReward::from_teacher(&teacher, self.cfg.surrogate.head_hidden, &mut rng)
        };
        let ctx = FtContext { teacher: &teacher, dataset: &dataset, k: self.cfg.distill.k };

        let ft = &self.cfg.finetune;
        let chunks = ft.checkpoints.max(1);
        let per_chunk = (ft.steps / chunks).max(1);
        let mut sink = self.sink()?;
        let mut done = 0usize;
        for chunk in 0..chunks {
            let result = self.run_method_chunk(
                method,
                &model,
                &surrogate,
                &reward,
                &ctx,
                per_chunk,
                self.seed.wrapping_add(chunk as u64),
            )?;
            for m in &result.metrics {
                let step = done + m.step;
                sink.emit(self.record(method, m.stage, step, "loss", m.loss))?;
                sink.emit(self.record(method, m.stage, step, "reward_1step", m.reward_mean_1step))?;
                sink.emit(self.record(method, m.stage, step, "reward_2step", m.reward_mean_2step))?;
                sink.emit(self.record(method, m.stage, step, "surrogate_acc", m.surrogate_acc))?;
            }
            model = result.model;
            surrogate = result.surrogate;
            done += per_chunk;

            let eval_seed = self.seed ^ 0x6576616c;
            let r2 = self.eval_reward(&result.ema, &reward, 2, eval_seed)?;
            let r1 = self.eval_reward(&result.ema, &reward, 1, eval_seed)?;
            let fid = self.eval_fidelity(&result.ema, &dataset, eval_seed)?;
            sink.emit(self.record(method, "checkpoint", done, "eval_reward_2step", r2))?;
            sink.emit(self.record(method, "checkpoint", done, "eval_reward_1step", r1))?;
            sink.emit(self.record(method, "checkpoint", done, "eval_fidelity", fid))?;
            sink.flush()?;
            save_checkpoint(
                &result.ema.flat(),
                &Manifest::new(&format!("ft_{method}"), done, true, result.ema.param_count()),
                &self.artifact(&format!("ft_{method}_ck{chunk}.bin")),
            )?;
        }
        save_checkpoint(
            &model.flat(),
            &Manifest::new(&format!("ft_{method}"), done, false, model.param_count()),
            &self.artifact(&format!("ft_{method}.bin")),
        )?;
        sink.flush()
    }

    pub fn analyze(&self, probe: &str, method: &str) -> Result<()> {
        match probe {
            "lipschitz" => self.probe_lipschitz(),
            "td" => self.probe_td(),
            "diversity" => self.probe_diversity(),
            "fidelity" => self.probe_fidelity(),
            "tradeoff" => self.probe_tradeoff(method),
            other => Err(invalid_arg(format!(
                "unknown probe `{other}`; expected one of {PROBES:?}"
            ))),
        }
    }

    fn probe_lipschitz(&self) -> Result<()> {
        let student = self.load_student()?;
        let dataset = self.dataset()?;
        let reward = self.build_reward(&dataset)?;
        let a = &self.cfg.analyze;
        let conditions = self.conditions();
        let q_reward = |x: &[f64]| reward.evaluate(x, 0).unwrap_or(0.0);
        let q_density = |x: &[f64]| dataset.log_density(x).unwrap_or_else(|| q_reward(x));
        let rep_r = local_lipschitz(&student, &q_reward, &a.t_levels, a.epsilon, a.n, &conditions, self.seed)?;
        let rep_d = local_lipschitz(&student, &q_density, &a.t_levels, a.epsilon, a.n, &conditions, self.seed)?;
        let mut csv = String::from("t,lipschitz_reward,lipschitz_density\n");
        let mut sink = self.sink()?;
        for (i, t) in rep_r.t_levels.iter().enumerate() {
            csv.push_str(&format!("{},{},{}\n", t, rep_r.estimates[i], rep_d.estimates[i]));
            sink.emit(self.record("analyze", "lipschitz", *t, "lipschitz_reward", rep_r.estimates[i]))?;
            sink.emit(self.record("analyze", "lipschitz", *t, "lipschitz_density", rep_d.estimates[i]))?;
        }
        sink.flush()?;
        std::fs::write(self.artifact("lipschitz_report.csv"), csv)?;
        Ok(())
    }

    fn probe_td(&self) -> Result<()> {
        let teacher = self.load_teacher()?;
        let student = self.load_student()?;
        let surrogate = self.load_surrogate(&teacher)?;
        let dataset = self.dataset()?;
        let reward = self.build_reward(&dataset)?;
        let a = &self.cfg.analyze;
        let conditions = self.conditions();
        let mut csv = String::from("trace,l_td,l_two_term,max_abs_diff\n");
        let mut worst = 0.0f64;
        for i in 0..a.td_traces.max(1) {
            let class = conditions[i % conditions.len()];
            let trace = cm_sample(&student, class, 2, self.seed.wrapping_add(i as u64))?
                .two_step()
                .ok_or_else(|| invalid_arg("H=2 trace missing intermediate state"))?;
            let r1 = reward.evaluate(&trace.z1, class)?;
            let r2 = reward.evaluate(&trace.z2, class)?;
            let (l_td, l_two, diff) =
                td_equivalence_check(&surrogate, &[(r1, r2)], &[trace], a.gamma)?;
            worst = worst.max(diff);
            csv.push_str(&format!("{i},{l_td},{l_two},{diff}\n"));
        }
        std::fs::write(self.artifact("td_report.csv"), csv)?;
        let mut sink = self.sink()?;
        sink.emit(self.record("analyze", "td", 0, "max_abs_diff", worst))?;
        sink.flush()
    }

    fn probe_diversity(&self) -> Result<()> {
        let student = self.load_student()?;
        let a = &self.cfg.analyze;
        let rows = diversity_probe(&student, &self.conditions(), &a.h_list, a.draws, self.seed)?;
        let mut csv = String::from("h,variance,std_err\n");
        let mut sink = self.sink()?;
        for row in &rows {
            csv.push_str(&format!("{},{},{}\n", row.h, row.variance, row.std_err));
            sink.emit(self.record("analyze", "diversity", row.h, "variance", row.variance))?;
        }
        sink.flush()?;
        std::fs::write(self.artifact("diversity_report.csv"), csv)?;
        Ok(())
    }

    fn probe_fidelity(&self) -> Result<()> {
        let teacher = self.load_teacher()?;
        let student = self.load_student()?;
        let dataset = self.dataset()?;
        let a = &self.cfg.analyze;
        let sc = &self.cfg.schedule;
        let sched = make_schedule(sc.t_max, sc.kind, sc.beta_min, sc.beta_max)?;
        let conditions = self.conditions();
        let n = self.cfg.finetune.eval_samples.max(2);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x646174);
        let data: Vec<Vec<f64>> =
            dataset.sample_batch(n, &mut rng).into_iter().map(|(x, _)| x).collect();
        let mut csv = String::from("sampler,steps,sliced_w1\n");
        let mut sink = self.sink()?;
        for &h in &a.h_list {
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let class = conditions[i % conditions.len()];
                let trace = cm_sample(&student, class, h, self.seed.wrapping_add(i as u64))?;
                samples.push(trace.final_output().to_vec());
            }
            let w1 = fidelity_proxy(&samples, &data, a.projections, self.seed ^ 0x70726f)?;
            csv.push_str(&format!("student,{h},{w1}\n"));
            sink.emit(self.record("analyze", "fidelity", h, "student_sliced_w1", w1))?;
        }
        let mut teacher_samples = Vec::with_capacity(n);
        for i in 0..n {
            let class = conditions[i % conditions.len()];
            teacher_samples.push(ddpm_sample(
                &teacher,
                class,
                &sched,
                50,
                self.seed.wrapping_add(i as u64),
            )?);
        }
        let w1 = fidelity_proxy(&teacher_samples, &data, a.projections, self.seed ^ 0x70726f)?;
        csv.push_str(&format!("teacher,50,{w1}\n"));
        sink.emit(self.record("analyze", "fidelity", 50, "teacher_sliced_w1", w1))?;
        sink.flush()?;
        std::fs::write(self.artifact("fidelity_report.csv"), csv)?;
        Ok(())
    }

    fn probe_tradeoff(&self, method: &str) -> Result<()> {
        let dataset = self.dataset()?;
        let reward = self.build_reward(&dataset)?;
        let sc = &self.cfg.schedule;
        let sched = make_schedule(sc.t_max, sc.kind, sc.beta_min, sc.beta_max)?;
        let ft = &self.cfg.finetune;
        let chunks = ft.checkpoints.max(1);
        let per_chunk = (ft.steps / chunks).max(1);
        let mut rows = Vec::new();
        for chunk in 0..chunks {
            let step = (chunk + 1) * per_chunk;
            let path = self.artifact(&format!("ft_{method}_ck{chunk}.bin"));
            if !path.exists() {
                rows.push(TradeoffRow {
                    step,
                    reward_2step: f64::NAN,
                    fidelity: f64::NAN,
                    error: Some(format!("missing checkpoint ft_{method}_ck{chunk}.bin")),
                });
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut model =
                ConsistencyModel::new(DenoiserNet::new(self.net_config(), &mut rng), sched.clone());
            match self.load_into(&path, model.param_count()) {
                Ok(params) => {
                    model.set_flat(&params);
                    let eval_seed = self.seed ^ 0x6576616c;
                    let reward_2step = self.eval_reward(&model, &reward, 2, eval_seed)?;
                    let fidelity = self.eval_fidelity(&model, &dataset, eval_seed)?;
                    rows.push(TradeoffRow { step, reward_2step, fidelity, error: None });
                }
                Err(e) => rows.push(TradeoffRow {
                    step,
                    reward_2step: f64::NAN,
                    fidelity: f64::NAN,
                    error: Some(e.to_string()),
                }),
            }
        }
        if rows.iter().all(|r| r.error.is_some()) {
            return Err(Error::Precondition(format!(
                "no ft_{method}_ck*.bin checkpoints in {} (run finetune first)",
                self.run_dir.display()
            )));
        }
        std::fs::write(self.artifact(&format!("tradeoff_{method}.csv")), tradeoff_csv(&rows))?;
        Ok(())
    }

    /// Summarize the metrics stream into a human-readable report.
    pub fn report(&self) -> Result<()> {
        let metrics_path = self.run_dir.join(METRICS_FILE);
        if !metrics_path.exists() {
            return Err(Error::Precondition(format!(
                "{METRICS_FILE} (expected at {})",
                metrics_path.display()
            )));
        }
        let records = crate::metrics::read_metrics(&metrics_path)?;
        use std::collections::BTreeMap;
        // (method, stage, name) -> last (step, value)
        let mut latest: BTreeMap<(String, String, String), (usize, Option<f64>)> = BTreeMap::new();
        let mut nulls = 0usize;
        for r in &records {
            if r.value.is_none() {
                nulls += 1;
            }
            latest.insert((r.method.clone(), r.stage.clone(), r.name.clone()), (r.step, r.value));
        }
        let mut out = String::from("# Run report\n\n");
        out.push_str(&format!("- records: {}\n- null (non-finite) values: {}\n\n", records.len(), nulls));
        out.push_str("| method | stage | metric | step | value |\n|---|---|---|---|---|\n");
        for ((method, stage, name), (step, value)) in &latest {
            let v = value.map(|v| format!("{v:.6}")).unwrap_or_else(|| "null".into());
            out.push_str(&format!("| {method} | {stage} | {name} | {step} | {v} |\n"));
        }
        for csv in ["lipschitz_report.csv", "td_report.csv", "diversity_report.csv",
                    "fidelity_report.csv"] {
            if self.artifact(csv).exists() {
                out.push_str(&format!("\nSee `{csv}`.\n"));
            }
        }
        std::fs::write(self.artifact("report.md"), out)?;
        Ok(())
    }
}
