//! Training loops for the two generators and the regressor.
//!
//! Every sample of every batch is drawn from its own RNG stream keyed by
//! `(seed, step, slot)`, per-sample gradients are computed in parallel and
//! summed in slot order, so a run is a pure function of data, table and
//! config regardless of thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelFrameSet, PatchSampler, Split};
use crate::error::{Error, Result, Violations};
use crate::fingerprint;
use crate::image::{Image, Moments};
use crate::mixing::{self, mix, Channel, MixingRatio, NoiseConfig, TSamplerConfig};
use crate::nets::{
    mae_loss, mse_loss, ConditioningMode, GenSpec, Generator, ModelBundle, RegSpec,
    Regressor,
};
use crate::scin::{self, ScinTable, TargetChannelStats};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenLoss {
    Mae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegLoss {
    Mse,
}

/// Distribution of `t` for regressor training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegTSampler {
    Uniform,
    Eq3,
}

/// Generator architecture shared by `Gen_0` and `Gen_1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenArch {
    pub depth: usize,
    pub base_width: usize,
    pub conditioning_mode: ConditioningMode,
}

impl Default for GenArch {
    fn default() -> Self {
        Self {
            depth: 3,
            base_width: 16,
            conditioning_mode: ConditioningMode::ScalarBroadcastConcat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub gen_loss: GenLoss,
    pub reg_loss: RegLoss,
    pub t_sampler_gen: TSamplerConfig,
    pub t_sampler_reg: RegTSampler,
    pub noise: NoiseConfig,
    pub patch_size: usize,
    pub val_every: usize,
    /// Validation windows per grid value of `t`.
    pub val_patches: usize,
    /// Validation rounds without improvement before a component stops.
    pub patience: Option<usize>,
    pub grad_clip: Option<f64>,
    /// Restrict training crops to a fixed pool of this many windows.
    pub fixed_pool: Option<usize>,
    pub gen_arch: GenArch,
    pub reg_spec: RegSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            max_steps: 2000,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            gen_loss: GenLoss::Mae,
            reg_loss: RegLoss::Mse,
            t_sampler_gen: TSamplerConfig::default(),
            t_sampler_reg: RegTSampler::Uniform,
            noise: NoiseConfig::default(),
            patch_size: 64,
            val_every: 100,
            val_patches: 8,
            patience: None,
            grad_clip: None,
            fixed_pool: None,
            gen_arch: GenArch::default(),
            reg_spec: RegSpec::desk(),
            seed: 0,
        }
    }
}

/// Validation severities.
pub const VAL_T_GRID: [f32; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        v.check(self.batch_size >= 1, || "batch_size must be positive".into());
        v.check(self.max_steps >= 1, || "max_steps must be positive".into());
        v.check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning_rate {} must be positive", self.learning_rate)
        });
        v.check(self.val_every >= 1, || "val_every must be positive".into());
        v.check(self.patch_size >= 1, || "patch_size must be positive".into());
        v.check(self.grad_clip.is_none_or(|c| c > 0.0), || {
            "grad_clip must be positive when set".into()
        });
        v.check(self.fixed_pool.is_none_or(|n| n >= 1), || {
            "fixed_pool must be positive when set".into()
        });
        v.check(self.noise.epsilon >= 0.0, || "noise.epsilon must be nonnegative".into());
        if let Err(Error::Config(msgs)) = self.t_sampler_gen.validate() {
            for m in msgs {
                v.push(format!("t_sampler_gen: {m}"));
            }
        }
        if let Err(Error::Config(msgs)) = self.gen_spec(Channel::C0).validate() {
            for m in msgs {
                v.push(format!("gen: {m}"));
            }
        }
        if let Err(Error::Config(msgs)) = self.reg_spec.validate() {
            for m in msgs {
                v.push(format!("reg: {m}"));
            }
        }
        let unit = 1usize << self.reg_spec.depth.saturating_sub(1).min(16);
        v.check(self.patch_size.is_multiple_of(unit), || {
            format!("patch_size {} must be a multiple of {unit} for the regressor", self.patch_size)
        });
        v.into_result()
    }

    pub fn gen_spec(&self, channel: Channel) -> GenSpec {
        GenSpec {
            channel_index: channel,
            depth: self.gen_arch.depth,
            base_width: self.gen_arch.base_width,
            conditioning_mode: self.gen_arch.conditioning_mode,
            patch_size: self.patch_size,
        }
    }

    pub fn hash(&self) -> String {
        fingerprint::of_json("scsplit.train-config", self)
    }

    fn reg_sampler(&self) -> TSamplerConfig {
        match self.t_sampler_reg {
            RegTSampler::Uniform => TSamplerConfig::uniform(),
            RegTSampler::Eq3 => self.t_sampler_gen,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

fn clip_grads(g: &mut [f32], max_norm: Option<f64>) {
    if let Some(c) = max_norm {
        let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > c {
            let s = (c / norm) as f32;
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub component: String,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub train_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_val: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub components: Vec<ComponentReport>,
    pub steps_run: usize,
    pub wall_clock_s: f64,
    pub config_hash: String,
    pub coupling_checks: usize,
}

impl TrainReport {
    pub fn component(&self, name: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.component == name)
    }

    /// Best validation losses, without timing, for embedding in manifests.
    pub fn metrics(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for c in &self.components {
            m.insert(
                c.component.clone(),
                serde_json::json!({ "best_step": c.best_step, "best_val": c.best_val }),
            );
        }
        serde_json::Value::Object(m)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedGenerators {
    pub gen0: Generator,
    pub gen1: Generator,
    pub report: TrainReport,
    pub scin_fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct TrainedRegressor {
    pub reg: Regressor,
    pub report: TrainReport,
    pub scin_fingerprint: String,
}

/// A network input built from one training crop.
pub struct MixedSample {
    pub x: Image,
    pub t: MixingRatio,
    pub c0: Image,
    pub c1: Image,
    pub frame_index: usize,
    pub window: (usize, usize),
}

fn check_table(fs: &ChannelFrameSet, table: &ScinTable) -> Result<()> {
    let fp = fs.fingerprint();
    if table.dataset_fingerprint != fp {
        return Err(Error::Fingerprint {
            expected: fp,
            found: table.dataset_fingerprint.clone(),
        });
    }
    table.validate()
}

/// Crops, mixes at `t`, normalizes with the table and perturbs.
fn make_sample(
    sampler: &PatchSampler<'_>,
    pool: Option<&[(usize, usize, usize)]>,
    table: &ScinTable,
    t_cfg: Option<&TSamplerConfig>,
    fixed_t: Option<f32>,
    noise: &NoiseConfig,
    r: &mut rng::Rng,
) -> Result<MixedSample> {
    use rand::Rng as _;
    let pair = match pool {
        Some(pool) => {
            let (f, y, x) = pool[r.random_range(0..pool.len())];
            sampler.crop(f, y, x)
        }
        None => sampler.sample(r),
    };
    let t = match (fixed_t, t_cfg) {
        (Some(t), _) => MixingRatio::new(t)?,
        (None, Some(c)) => mixing::sample_t(c, r),
        (None, None) => MixingRatio::new(r.random::<f32>())?,
    };
    let c_t = mix(&pair.c0, &pair.c1, t)?;
    let mut x = scin::normalize(&c_t, t, table)?;
    mixing::perturb_in_place(&mut x, t.get(), noise, r);
    Ok(MixedSample {
        x,
        t,
        c0: pair.c0,
        c1: pair.c1,
        frame_index: pair.frame_index,
        window: (pair.y, pair.x),
    })
}

fn sample_pool(
    sampler: &PatchSampler<'_>,
    n: Option<usize>,
    seed: u64,
) -> Option<Vec<(usize, usize, usize)>> {
    n.map(|n| {
        let mut r = rng::stream(rng::derive(seed, "pool"), 0);
        (0..n).map(|_| sampler.sample_window(&mut r)).collect()
    })
}

/// Population check of the normalized inputs the networks see: a batch of 64
/// fresh samples must have `|mean| <= 0.2` and variance in `[0.5, 1.5]`.
fn coupling_check(
    sampler: &PatchSampler<'_>,
    table: &ScinTable,
    t_cfg: &TSamplerConfig,
    noise: &NoiseConfig,
    seed: u64,
    round: u64,
) -> Result<()> {
    let base = rng::derive(seed, "coupling");
    let samples = par::try_map_range(64, |i| {
        let mut r = rng::stream(base, round * 64 + i as u64);
        make_sample(sampler, None, table, Some(t_cfg), None, noise, &mut r)
    })?;
    let mut m = Moments::default();
    for s in &samples {
        m.push_slice(s.x.data());
    }
    let (mean, var) = (m.mean(), m.variance());
    if mean.abs() > 0.2 || !(0.5..=1.5).contains(&var) {
        return Err(Error::Degenerate(format!(
            "normalized training batch has mean {mean:.3} and variance {var:.3}; \
             expected |mean| <= 0.2 and variance in [0.5, 1.5]"
        )));
    }
    Ok(())
}

struct ValSet {
    samples: Vec<MixedSample>,
}

fn build_val_set(
    fs: &ChannelFrameSet,
    table: &ScinTable,
    cfg: &TrainConfig,
) -> Result<Option<ValSet>> {
    if fs.split_indices(Split::Val).is_empty() {
        return Ok(None);
    }
    let sampler = PatchSampler::new(fs, Split::Val, cfg.patch_size)?;
    let base = rng::derive(cfg.seed, "val");
    let n = VAL_T_GRID.len() * cfg.val_patches;
    let noise = NoiseConfig::disabled();
    let samples = par::try_map_range(n, |i| {
        let mut r = rng::stream(base, (i % cfg.val_patches) as u64);
        let t = VAL_T_GRID[i / cfg.val_patches];
        make_sample(&sampler, None, table, None, Some(t), &noise, &mut r)
    })?;
    Ok(Some(ValSet { samples }))
}

struct Tracker {
    report: ComponentReport,
    best_params: Option<Vec<f32>>,
    bad_rounds: usize,
    done: bool,
}

impl Tracker {
    fn new(name: &str) -> Self {
        Self {
            report: ComponentReport {
                component: name.into(),
                ..Default::default()
            },
            best_params: None,
            bad_rounds: 0,
            done: false,
        }
    }

    fn observe(&mut self, step: usize, val: f64, params: &[f32], patience: Option<usize>) {
        self.report.val_curve.push((step, val));
        if self.report.best_val.is_none_or(|b| val < b) {
            self.report.best_val = Some(val);
            self.report.best_step = step;
            self.best_params = Some(params.to_vec());
            self.bad_rounds = 0;
        } else {
            self.bad_rounds += 1;
            if patience.is_some_and(|p| self.bad_rounds >= p) {
                self.done = true;
                self.report.stopped_early = true;
            }
        }
    }

    fn finish(self, last_step: usize, params: &mut [f32]) -> ComponentReport {
        let mut report = self.report;
        match self.best_params {
            Some(best) => params.copy_from_slice(&best),
            None => report.best_step = last_step,
        }
        report
    }
}

fn diverged(step: usize, component: &str, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            component: component.into(),
            loss,
        })
    }
}

fn sum_grads(parts: &[Vec<f32>], n: usize) -> Vec<f32> {
    let mut g = vec![0.0f32; n];
    for p in parts {
        for (a, b) in g.iter_mut().zip(p) {
            *a += b;
        }
    }
    g
}

pub fn train_generators(
    fs: &ChannelFrameSet,
    table: &ScinTable,
    target_stats: &TargetChannelStats,
    cfg: &TrainConfig,
) -> Result<TrainedGenerators> {
    train_generators_logged(fs, table, target_stats, cfg, &mut |_| {})
}

/// Trains `Gen_0` and `Gen_1` on shared `(patch, t)` draws. Returns the
/// parameters with the best validation loss of each generator.
pub fn train_generators_logged(
    fs: &ChannelFrameSet,
    table: &ScinTable,
    target_stats: &TargetChannelStats,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainedGenerators> {
    cfg.validate()?;
    check_table(fs, table)?;
    target_stats.validate()?;
    let started = Instant::now();
    let sampler = PatchSampler::new(fs, Split::Train, cfg.patch_size)?;
    let pool = sample_pool(&sampler, cfg.fixed_pool, cfg.seed);
    let val = build_val_set(fs, table, cfg)?;
    let init_seed = rng::derive(cfg.seed, "gen-init");
    let mut gens = [
        Generator::new(cfg.gen_spec(Channel::C0), init_seed)?,
        Generator::new(cfg.gen_spec(Channel::C1), init_seed)?,
    ];
    let names = ["gen0", "gen1"];
    let mut opts = gens.each_ref().map(|g| Adam::new(g.n_params(), cfg.learning_rate));
    let mut trackers = names.map(Tracker::new);
    let batch_seed = rng::derive(cfg.seed, "gen-batch");
    let b = cfg.batch_size;
    let mut coupling_checks = 0;
    let mut last_step = 0;

    for step in 1..=cfg.max_steps {
        last_step = step;
        if step == 1 || step % cfg.val_every == 0 {
            coupling_check(&sampler, table, &cfg.t_sampler_gen, &cfg.noise, cfg.seed, step as u64)?;
            coupling_checks += 1;
        }
        let per_sample = par::try_map_range(b, |slot| -> Result<_> {
            let mut r = rng::stream(batch_seed, (step * b + slot) as u64);
            let s = make_sample(
                &sampler,
                pool.as_deref(),
                table,
                Some(&cfg.t_sampler_gen),
                None,
                &cfg.noise,
                &mut r,
            )?;
            let mut out = Vec::with_capacity(2);
            for (k, g) in gens.iter().enumerate() {
                if trackers[k].done {
                    out.push((0.0, Vec::new()));
                    continue;
                }
                let ch = Channel::from_index(k)?;
                let target = scin::normalize_target(if k == 0 { &s.c0 } else { &s.c1 }, ch, target_stats)?;
                let (y, tape) = g.forward_tape(&s.x, s.t.severity_for(ch))?;
                let (loss, mut dy) = mae_loss(&y, &target)?;
                dy.data_mut().iter_mut().for_each(|v| *v /= b as f32);
                let mut grads = vec![0.0f32; g.n_params()];
                g.backward(&tape, &dy, &mut grads);
                out.push((loss, grads));
            }
            Ok(out)
        })?;
        for k in 0..2 {
            if trackers[k].done {
                continue;
            }
            let loss = per_sample.iter().map(|o| o[k].0).sum::<f64>() / b as f64;
            diverged(step, names[k], loss)?;
            let parts: Vec<Vec<f32>> = per_sample.iter().map(|o| o[k].1.clone()).collect();
            let mut g = sum_grads(&parts, gens[k].n_params());
            clip_grads(&mut g, cfg.grad_clip);
            opts[k].step(gens[k].params_mut(), &g);
            trackers[k].report.train_curve.push((step, loss));
            log(&LogRecord {
                step,
                component: names[k].into(),
                split: "train".into(),
                loss,
                lr: cfg.learning_rate,
                wall_clock_s: started.elapsed().as_secs_f64(),
            });
        }
        if let Some(val) = &val {
            if step % cfg.val_every == 0 || step == cfg.max_steps {
                for k in 0..2 {
                    if trackers[k].done {
                        continue;
                    }
                    let loss = gen_val_loss(&gens[k], val, target_stats)?;
                    diverged(step, names[k], loss)?;
                    trackers[k].observe(step, loss, gens[k].params(), cfg.patience);
                    log(&LogRecord {
                        step,
                        component: names[k].into(),
                        split: "val".into(),
                        loss,
                        lr: cfg.learning_rate,
                        wall_clock_s: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
        if trackers.iter().all(|t| t.done) {
            break;
        }
    }
    let [t0, t1] = trackers;
    let [mut g0, mut g1] = gens;
    let r0 = t0.finish(last_step, g0.params_mut());
    let r1 = t1.finish(last_step, g1.params_mut());
    Ok(TrainedGenerators {
        gen0: g0,
        gen1: g1,
        report: TrainReport {
            components: vec![r0, r1],
            steps_run: last_step,
            wall_clock_s: started.elapsed().as_secs_f64(),
            config_hash: cfg.hash(),
            coupling_checks,
        },
        scin_fingerprint: table.fingerprint(),
    })
}

/// Mean MAE of one generator over the validation grid, noise off.
fn gen_val_loss(g: &Generator, val: &ValSet, stats: &TargetChannelStats) -> Result<f64> {
    let ch = g.spec().channel_index;
    let losses = par::try_map_range(val.samples.len(), |i| -> Result<f64> {
        let s = &val.samples[i];
        let target = scin::normalize_target(if ch == Channel::C0 { &s.c0 } else { &s.c1 }, ch, stats)?;
        let y = g.forward(&s.x, s.t.severity_for(ch))?;
        Ok(mae_loss(&y, &target)?.0)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn train_regressor(
    fs: &ChannelFrameSet,
    table: &ScinTable,
    cfg: &TrainConfig,
) -> Result<TrainedRegressor> {
    train_regressor_logged(fs, table, cfg, &mut |_| {})
}

/// Trains `Reg` with MSE on normalized, perturbed mixed crops.
pub fn train_regressor_logged(
    fs: &ChannelFrameSet,
    table: &ScinTable,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainedRegressor> {
    cfg.validate()?;
    check_table(fs, table)?;
    let started = Instant::now();
    let sampler = PatchSampler::new(fs, Split::Train, cfg.patch_size)?;
    let pool = sample_pool(&sampler, cfg.fixed_pool, cfg.seed);
    let val = build_val_set(fs, table, cfg)?;
    let t_cfg = cfg.reg_sampler();
    let mut reg = Regressor::new(cfg.reg_spec.clone(), rng::derive(cfg.seed, "reg-init"))?;
    let mut opt = Adam::new(reg.n_params(), cfg.learning_rate);
    let mut tracker = Tracker::new("reg");
    let batch_seed = rng::derive(cfg.seed, "reg-batch");
    let b = cfg.batch_size;
    let mut coupling_checks = 0;
    let mut last_step = 0;

    for step in 1..=cfg.max_steps {
        last_step = step;
        if step == 1 || step % cfg.val_every == 0 {
            coupling_check(&sampler, table, &t_cfg, &cfg.noise, cfg.seed, step as u64)?;
            coupling_checks += 1;
        }
        let per_sample = par::try_map_range(b, |slot| -> Result<(f64, Vec<f32>)> {
            let mut r = rng::stream(batch_seed, (step * b + slot) as u64);
            let s = make_sample(&sampler, pool.as_deref(), table, Some(&t_cfg), None, &cfg.noise, &mut r)?;
            let (p, tape) = reg.forward_tape(&s.x)?;
            let (loss, d) = mse_loss(&[p], &[s.t.get()]);
            let mut grads = vec![0.0f32; reg.n_params()];
            reg.backward(&tape, d[0] / b as f32, &mut grads);
            Ok((loss, grads))
        })?;
        let loss = per_sample.iter().map(|o| o.0).sum::<f64>() / b as f64;
        diverged(step, "reg", loss)?;
        let parts: Vec<Vec<f32>> = per_sample.into_iter().map(|o| o.1).collect();
        let mut g = sum_grads(&parts, reg.n_params());
        clip_grads(&mut g, cfg.grad_clip);
        opt.step(reg.params_mut(), &g);
        tracker.report.train_curve.push((step, loss));
        log(&LogRecord {
            step,
            component: "reg".into(),
            split: "train".into(),
            loss,
            lr: cfg.learning_rate,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        if let Some(val) = &val {
            if step % cfg.val_every == 0 || step == cfg.max_steps {
                let loss = reg_val_loss(&reg, val)?;
                diverged(step, "reg", loss)?;
                tracker.observe(step, loss, reg.params(), cfg.patience);
                log(&LogRecord {
                    step,
                    component: "reg".into(),
                    split: "val".into(),
                    loss,
                    lr: cfg.learning_rate,
                    wall_clock_s: started.elapsed().as_secs_f64(),
                });
                if tracker.done {
                    break;
                }
            }
        }
    }
    let report = tracker.finish(last_step, reg.params_mut());
    Ok(TrainedRegressor {
        reg,
        report: TrainReport {
            components: vec![report],
            steps_run: last_step,
            wall_clock_s: started.elapsed().as_secs_f64(),
            config_hash: cfg.hash(),
            coupling_checks,
        },
        scin_fingerprint: table.fingerprint(),
    })
}

fn reg_val_loss(reg: &Regressor, val: &ValSet) -> Result<f64> {
    let preds = par::try_map_range(val.samples.len(), |i| reg.forward(&val.samples[i].x))?;
    let targets: Vec<f32> = val.samples.iter().map(|s| s.t.get()).collect();
    Ok(mse_loss(&preds, &targets).0)
}

/// Packs trained components into a bundle after checking they all saw the
/// same normalization table.
pub fn make_bundle(
    gens: &TrainedGenerators,
    reg: &TrainedRegressor,
    table: &ScinTable,
    target_stats: &TargetChannelStats,
    cfg: &TrainConfig,
) -> Result<ModelBundle> {
    let fp = table.fingerprint();
    for found in [&gens.scin_fingerprint, &reg.scin_fingerprint] {
        if found != &fp {
            return Err(Error::Fingerprint {
                expected: fp.clone(),
                found: found.clone(),
            });
        }
    }
    let mut metrics = gens.report.metrics();
    if let (Some(m), serde_json::Value::Object(r)) = (metrics.as_object_mut(), reg.report.metrics()) {
        m.extend(r);
    }
    Ok(ModelBundle {
        gen0: gens.gen0.clone(),
        gen1: gens.gen1.clone(),
        reg: reg.reg.clone(),
        table: table.clone(),
        target_stats: *target_stats,
        learning_rate: cfg.learning_rate,
        train_config: serde_json::to_value(cfg)?,
        metrics,
    })
}
