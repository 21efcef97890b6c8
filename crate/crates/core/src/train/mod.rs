//! Two-stage training (source-only, then adversarial), checkpoints and
//! evaluation.

mod adam;
mod checkpoint;
mod eval;

pub use adam::{scheduled_lr, Adam};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, ConfusionMatrix, EvalReport};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::data::{Domain, Sample};
use crate::error::{Error, Result};
use crate::tasknet::{adv_loss, task_loss, total_objective, AdvPath, Network};
use crate::tensor::{NormMode, Tensor};
use crate::util::stream_seed;

pub const CSV_HEADER: &str = "iter,task_loss,adv_loss,disc_acc,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Gradient reversal factor `λ`.
    pub lambda: f64,
    pub lr0: f64,
    /// Iterations at which the learning rate is divided by ten.
    pub milestones: Vec<usize>,
    pub iters: usize,
    /// Leading iterations trained on source labels only.
    pub pretrain_iters: usize,
    /// Labelled source images per step.
    pub source_batch: usize,
    /// Unlabelled target images per adversarial step.
    pub target_batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub log_every: usize,
    /// Intermediate checkpoint period; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk schedule: 9k iterations, milestones at 7k and 8k, 1k source-only.
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr0: 1e-3,
            milestones: vec![7000, 8000],
            iters: 9000,
            pretrain_iters: 1000,
            source_batch: 1,
            target_batch: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Original long schedule: `lr0 = 1e-5`, 90k iterations, milestones
    /// at 70k and 80k.
    pub fn long_schedule() -> Self {
        Self {
            lr0: 1e-5,
            milestones: vec![70_000, 80_000],
            iters: 90_000,
            pretrain_iters: 10_000,
            ..Self::default()
        }
    }

    /// Every step is source-only.
    pub fn source_only(mut self) -> Self {
        self.pretrain_iters = self.iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("train.milestones must be strictly increasing");
        }
        if self.milestones.last().is_some_and(|&m| m >= self.iters) {
            return fail("train.milestones must be below train.iters");
        }
        if self.pretrain_iters > self.iters {
            return fail("train.pretrain_iters exceeds train.iters");
        }
        if self.source_batch == 0 || (self.pretrain_iters < self.iters && self.target_batch == 0) {
            return fail("batches need at least one source and one target image");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("train.lambda must be finite and >= 0");
        }
        if !(self.lr0 > 0.0
            && self.adam_eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2))
        {
            return fail("need lr0 > 0, adam_eps > 0 and betas in [0, 1)");
        }
        if self.log_every == 0 {
            return fail("train.log_every must be >= 1");
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        scheduled_lr(self.lr0, &self.milestones, iter)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub task_loss: f64,
    pub adv_loss: Option<f64>,
    pub disc_acc: Option<f64>,
    pub lr: f64,
}

/// One metrics CSV row: window means over the last `log_every` steps.
/// Adversarial columns are NaN for windows without an adversarial step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub task_loss: f64,
    pub adv_loss: f64,
    pub disc_acc: f64,
    pub lr: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.task_loss, self.adv_loss, self.disc_acc, self.lr
        )
    }

    fn to_array(self) -> [f64; 5] {
        [
            self.iter as f64,
            self.task_loss,
            self.adv_loss,
            self.disc_acc,
            self.lr,
        ]
    }

    fn from_slice(d: &[f64]) -> Self {
        Self {
            iter: d[0] as usize,
            task_loss: d[1],
            adv_loss: d[2],
            disc_acc: d[3],
            lr: d[4],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Window {
    task: f64,
    adv: f64,
    acc: f64,
    steps: usize,
    adv_steps: usize,
}

/// Draws the training pool index for `(domain, iteration, slot)` from its
/// own stream, so source draws do not depend on whether target images are
/// drawn too.
fn draw(seed: u64, domain: Domain, iter: usize, slot: usize, len: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[
        seed,
        domain as u64,
        iter as u64,
        slot as u64,
    ]));
    rng.gen_range(0..len)
}

/// Splits a training set into labelled source and unlabelled target pools.
pub fn split_domains(samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (source, target): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .partition(|s| s.domain == Domain::Source);
    if source.iter().any(|s| s.labels.is_none()) {
        return Err(Error::Config(
            "every source training sample needs a label map".into(),
        ));
    }
    Ok((source, target))
}

pub struct Trainer {
    pub run: RunConfig,
    pub net: Network,
    pub adam: Adam,
    /// Completed steps.
    pub iter: usize,
    pub rows: Vec<LogRow>,
    window: Window,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let net = Network::new(run.model.clone(), run.train.seed)?;
        let t = &run.train;
        let adam = Adam::new(&net.store, t.beta1, t.beta2, t.adam_eps);
        Ok(Self {
            run,
            net,
            adam,
            iter: 0,
            rows: Vec::new(),
            window: Window::default(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.run.train.iters
    }

    /// One optimizer step. Source-only before `pretrain_iters`, afterwards
    /// task loss plus the adversarial loss through the reversal layer.
    pub fn step(&mut self, source: &[Sample], target: &[Sample]) -> Result<StepStats> {
        let cfg = &self.run.train;
        let it = self.iter;
        let lr = cfg.lr_at(it);
        let adversarial = it >= cfg.pretrain_iters;
        if source.is_empty() || (adversarial && target.is_empty()) {
            return Err(Error::Config(
                "training needs source and target samples".into(),
            ));
        }
        let mut batch: Vec<&Sample> = (0..cfg.source_batch)
            .map(|j| &source[draw(cfg.seed, Domain::Source, it, j, source.len())])
            .collect();
        if adversarial {
            batch.extend(
                (0..cfg.target_batch)
                    .map(|j| &target[draw(cfg.seed, Domain::Target, it, j, target.len())]),
            );
        }
        let images: Vec<Tensor> = batch.iter().map(|s| s.image.to_tensor()).collect();
        let refs: Vec<&Tensor> = images.iter().collect();
        let path = if adversarial {
            AdvPath::Reversed(cfg.lambda)
        } else {
            AdvPath::Off
        };
        let n_s = cfg.source_batch;

        let mut g = Graph::new();
        let fw = self.net.forward(&mut g, &refs, path, NormMode::Train)?;
        let mut task = task_loss(&mut g, fw.logits[0], batch[0])?;
        for j in 1..n_s {
            let l = task_loss(&mut g, fw.logits[j], batch[j])?;
            task = g.add(task, l)?;
        }
        let task = g.scale(task, 1.0 / n_s as f64);
        let (loss, adv, acc) = match &fw.sap {
            Some(sap) => {
                let domains: Vec<Domain> = batch.iter().map(|s| s.domain).collect();
                let adv = adv_loss(&mut g, sap.prob, &domains)?;
                let p = g.value(sap.prob).data();
                let correct = p
                    .iter()
                    .zip(&domains)
                    .filter(|(&p, &d)| (p > 0.5) == (d == Domain::Target))
                    .count();
                let acc = correct as f64 / domains.len() as f64;
                (
                    total_objective(&mut g, task, adv)?,
                    Some(g.value(adv).data()[0]),
                    Some(acc),
                )
            }
            None => (task, None, None),
        };
        let task_value = g.value(task).data()[0];
        if !task_value.is_finite() || adv.is_some_and(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("loss at iteration {it}")));
        }
        let grads = g.backward(loss)?;
        self.net.store.zero_grads();
        g.accumulate_param_grads(&grads, &mut self.net.store)?;
        self.adam.step(&mut self.net.store, &g.param_ids(), lr)?;
        self.iter += 1;

        let w = &mut self.window;
        w.task += task_value;
        w.steps += 1;
        if let (Some(a), Some(c)) = (adv, acc) {
            w.adv += a;
            w.acc += c;
            w.adv_steps += 1;
        }
        if self.iter.is_multiple_of(cfg.log_every) || self.iter == cfg.iters {
            let (adv_mean, acc_mean) = if w.adv_steps > 0 {
                (w.adv / w.adv_steps as f64, w.acc / w.adv_steps as f64)
            } else {
                (f64::NAN, f64::NAN)
            };
            self.rows.push(LogRow {
                iter: self.iter,
                task_loss: w.task / w.steps as f64,
                adv_loss: adv_mean,
                disc_acc: acc_mean,
                lr,
            });
            *w = Window::default();
        }
        Ok(StepStats {
            task_loss: task_value,
            adv_loss: adv,
            disc_acc: acc,
            lr,
        })
    }

    /// Steps until `stop` (clamped to the configured total), calling
    /// `on_row` for every new metrics row.
    pub fn train_until(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        stop: usize,
        mut on_row: impl FnMut(&LogRow),
    ) -> Result<()> {
        let stop = stop.min(self.run.train.iters);
        while self.iter < stop {
            let before = self.rows.len();
            self.step(source, target)?;
            if self.rows.len() > before {
                on_row(self.rows.last().expect("row just pushed"));
            }
        }
        Ok(())
    }

    /// Trains to completion, writing `metrics.csv`, periodic
    /// `ckpt_<iter>.sapc` files and `final.sapc` into `out`.
    pub fn run(
        &mut self,
        source: &[Sample],
        target: &[Sample],
        out: &Path,
        on_row: impl FnMut(&LogRow),
    ) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut on_row = on_row;
        let every = self.run.train.checkpoint_every;
        while !self.is_done() {
            let stop = if every > 0 {
                (self.iter / every + 1) * every
            } else {
                self.run.train.iters
            };
            self.train_until(source, target, stop, &mut on_row)?;
            if every > 0 && self.iter.is_multiple_of(every) && !self.is_done() {
                self.checkpoint()
                    .save(&out.join(format!("ckpt_{:06}.sapc", self.iter)))?;
            }
            self.write_metrics(&out.join("metrics.csv"))?;
        }
        self.checkpoint().save(&out.join("final.sapc"))?;
        self.write_metrics(&out.join("metrics.csv"))
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{}", r.csv());
        }
        s
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        fs::write(path, self.metrics_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("meta.iteration", Tensor::scalar(self.iter as f64));
        c.push_u64("meta.seed", self.run.train.seed);
        c.push_text("meta.config", &self.run.to_text());
        let w = self.window;
        c.push(
            "meta.window",
            Tensor::from_vec(vec![
                w.task,
                w.adv,
                w.acc,
                w.steps as f64,
                w.adv_steps as f64,
            ]),
        );
        let log: Vec<f64> = self.rows.iter().flat_map(|r| r.to_array()).collect();
        c.push(
            "meta.log",
            if log.is_empty() {
                Tensor::zeros(&[1, 5])
            } else {
                Tensor::new(&[self.rows.len(), 5], log).expect("rows of five")
            },
        );
        c.push("meta.log.rows", Tensor::scalar(self.rows.len() as f64));
        for (id, p) in self.net.store.iter() {
            let i = id.index();
            c.push(format!("param.{}", p.name), p.value.clone());
            c.push(format!("adam.m.{}", p.name), self.adam.m[i].clone());
            c.push(format!("adam.v.{}", p.name), self.adam.v[i].clone());
            c.push(
                format!("adam.t.{}", p.name),
                Tensor::scalar(self.adam.t[i] as f64),
            );
        }
        c.push(
            "bn.sap.select.running_mean",
            self.net.sap.bn_stats.mean.clone(),
        );
        c.push(
            "bn.sap.select.running_var",
            self.net.sap.bn_stats.var.clone(),
        );
        c
    }

    /// Rebuilds the trainer exactly as it was when `c` was taken.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let run = RunConfig::parse(&c.text("meta.config")?)?;
        let mut t = Self::new(run)?;
        t.iter = c.require("meta.iteration")?.data()[0] as usize;
        let w = c.require("meta.window")?.data();
        t.window = Window {
            task: w[0],
            adv: w[1],
            acc: w[2],
            steps: w[3] as usize,
            adv_steps: w[4] as usize,
        };
        let rows = c.require("meta.log.rows")?.data()[0] as usize;
        let log = c.require("meta.log")?.data();
        t.rows = (0..rows)
            .map(|r| LogRow::from_slice(&log[r * 5..r * 5 + 5]))
            .collect();
        let ids: Vec<_> = t.net.store.ids().collect();
        for id in ids {
            let name = t.net.store.get(id).name.clone();
            let load = |key: String, like: &Tensor| -> Result<Tensor> {
                let v = c.require(&key)?;
                if v.shape() != like.shape() {
                    return Err(Error::Config(format!(
                        "checkpoint record {key} has shape {:?}, model expects {:?}",
                        v.shape(),
                        like.shape()
                    )));
                }
                Ok(v.clone())
            };
            let i = id.index();
            let value = load(format!("param.{name}"), t.net.store.value(id))?;
            t.adam.m[i] = load(format!("adam.m.{name}"), &value)?;
            t.adam.v[i] = load(format!("adam.v.{name}"), &value)?;
            t.adam.t[i] = c.require(&format!("adam.t.{name}"))?.data()[0] as u64;
            t.net.store.get_mut(id).value = value;
        }
        t.net.sap.bn_stats.mean = c.require("bn.sap.select.running_mean")?.clone();
        t.net.sap.bn_stats.var = c.require("bn.sap.select.running_var")?.clone();
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
