//! SGD with momentum, step schedule, the training loop, metrics and
//! checkpoints.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::rng::Xoshiro256;
use crate::scalar::Scalar;
use crate::steam::Phase;
use crate::tensor::Tensor;
use crate::zoo::{build_desk_cnn, DeskCnn};

/// Momentum buffers plus hyperparameters. Weight decay is folded into the
/// gradient: `v = mu v + g + wd p`, `p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>], lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            momentum,
            weight_decay,
            lr,
        }
    }
}

/// One SGD step over every parameter.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return dim_err(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.len() != g.len() || p.len() != v.len() {
            return dim_err(format!(
                "parameter {i} has {} elements, gradient {}, velocity {}",
                p.len(),
                g.len(),
                v.len()
            ));
        }
    }
    let mu = T::from_f64_lossy(state.momentum);
    let wd = T::from_f64_lossy(state.weight_decay);
    let lr = T::from_f64_lossy(state.lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Step decay: the rate is divided by `decay_factor` at each milestone.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    /// Epoch counts after which the rate drops, strictly increasing.
    pub milestones: Vec<usize>,
}

impl Schedule {
    pub fn new(initial_lr: f64, milestones: Vec<usize>) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {milestones:?} must be strictly increasing"
            )));
        }
        Ok(Self {
            initial_lr,
            decay_factor: 10.0,
            milestones,
        })
    }

    /// Milestones at 30%, 60% and 90% of `epochs`, rounded; duplicates and
    /// zero are dropped.
    pub fn scaled(initial_lr: f64, epochs: usize) -> Self {
        let mut m: Vec<usize> = [3, 6, 9]
            .iter()
            .map(|&k| (k * epochs + 5) / 10)
            .filter(|&e| e > 0)
            .collect();
        m.dedup();
        Self::new(initial_lr, m).expect("increasing by construction")
    }

    /// Rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch > m).count();
        self.initial_lr / self.decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub steps: usize,
}

pub const METRICS_HEADER: &str = "# steam-metrics v1\nepoch,lr,train_loss,train_acc,val_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }

    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  train {:.2}%  val {:.2}%",
            self.epoch,
            self.lr,
            self.train_loss,
            100.0 * self.train_acc,
            100.0 * self.val_acc
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in history {
        let _ = writeln!(s, "{}", m.csv_row());
    }
    s
}

/// Top-1 / top-5 accuracy and mean loss of an eval-mode pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub samples: usize,
}

fn top_k_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| row.iter().filter(|&&v| v > row[y]).count() < k)
        .count()
}

/// Evaluates `model` without edge drop.
pub fn evaluate<T: Scalar>(
    model: &DeskCnn<T>,
    ds: &Dataset<T>,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let mut rng = Xoshiro256::seed_from_u64(0);
    let (mut top1, mut top5, mut loss) = (0usize, 0usize, 0.0);
    for b in ds.batches(batch_size, false, false, &mut rng)? {
        let tape = Tape::new();
        let out = model.forward(&tape, b.images, Phase::Eval, false)?;
        let logits = out.logits.to_tensor();
        top1 += top_k_hits(&logits, &b.labels, 1);
        top5 += top_k_hits(&logits, &b.labels, 5);
        loss += out.logits.cross_entropy(&b.labels)?.item().to_f64_lossy() * b.labels.len() as f64;
    }
    let n = ds.len().max(1) as f64;
    Ok(EvalMetrics {
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
        loss: loss / n,
        samples: ds.len(),
    })
}

/// Model, optimizer, generator and epoch counter: everything a checkpoint
/// captures.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub config: ExperimentConfig,
    pub model: DeskCnn<T>,
    pub opt: OptimizerState<T>,
    pub schedule: Schedule,
    pub rng: Xoshiro256,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from the configured seed.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(config.train.seed);
        let model = build_desk_cnn(
            &config.model.stage_spec()?,
            config.steam_config(),
            config.model.in_channels,
            config.model.num_classes,
            &mut rng,
        )?;
        let t = &config.train;
        let opt = OptimizerState::new(
            &model
                .named_params()
                .iter()
                .map(|(_, p)| *p)
                .collect::<Vec<_>>(),
            t.lr,
            t.momentum,
            t.weight_decay,
        );
        Ok(Self {
            config: config.clone(),
            model,
            opt,
            schedule: Schedule::scaled(t.lr, t.epochs),
            rng,
            epoch: 0,
        })
    }

    /// One optimizer step on a batch; returns the batch loss and hits.
    pub fn step(
        &mut self,
        images: Tensor<T>,
        labels: &[usize],
        phase: Phase<'_>,
    ) -> Result<(f64, usize)> {
        let tape = Tape::new();
        let out = self.model.forward(&tape, images, phase, true)?;
        let logits = out.logits.to_tensor();
        let loss = out.logits.cross_entropy(labels)?;
        let value = loss.item().to_f64_lossy();
        let grads = tape.backward(loss)?;
        let g: Vec<Vec<T>> = out.params.iter().map(|&p| grads.get_or_zeros(p)).collect();
        drop(grads);
        if value.is_finite() {
            sgd_step(&mut self.model.params_mut(), &g, &mut self.opt)?;
        }
        Ok((value, top_k_hits(&logits, labels, 1)))
    }

    /// Trains one epoch and evaluates on `val`.
    pub fn run_epoch(&mut self, train: &Dataset<T>, val: &Dataset<T>) -> Result<EpochMetrics> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Parameter(
                "training and validation sets must be non-empty".into(),
            ));
        }
        let epoch = self.epoch + 1;
        self.opt.lr = self.schedule.lr_at(epoch);
        let mut batch_rng = self.rng.fork();
        let mut mask_rng = self.rng.fork();
        let t = &self.config.train;
        let batches: Vec<_> = train
            .batches(t.batch_size, true, t.flip, &mut batch_rng)?
            .collect();
        let (mut loss_sum, mut hits, mut steps) = (0.0, 0usize, 0usize);
        for b in batches {
            let n = b.labels.len();
            let (loss, h) = self.step(b.images, &b.labels, Phase::Train(&mut mask_rng))?;
            steps += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            loss_sum += loss * n as f64;
            hits += h;
        }
        let val_acc = evaluate(&self.model, val, self.config.train.batch_size.max(64))?.top1;
        self.epoch = epoch;
        Ok(EpochMetrics {
            epoch,
            lr: self.opt.lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_acc,
            steps,
        })
    }
}

/// Runs `epochs` more epochs, reporting each through `on_epoch`.
pub fn train_epochs<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    epochs: usize,
    mut on_epoch: impl FnMut(&Trainer<T>, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let m = trainer.run_epoch(train, val)?;
        on_epoch(trainer, &m)?;
        history.push(m);
    }
    Ok(history)
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"STEAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensor stored as little-endian `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub epoch: u64,
    pub rng_state: [u64; 4],
    pub params: Vec<Record>,
    pub velocity: Vec<Record>,
    pub config_toml: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend(v.to_le_bytes());
}

fn put_records(out: &mut Vec<u8>, recs: &[Record]) {
    put_u32(out, recs.len() as u32);
    for r in recs {
        put_u32(out, r.name.len() as u32);
        out.extend(r.name.as_bytes());
        put_u32(out, r.shape.len() as u32);
        for &d in &r.shape {
            put_u64(out, d as u64);
        }
        put_u64(out, r.data.len() as u64);
        for &v in &r.data {
            out.extend(v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn capture<T: Scalar>(trainer: &Trainer<T>) -> Self {
        let named = trainer.model.named_params();
        let params = named
            .iter()
            .map(|(n, t)| Record {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.to_f64_vec(),
            })
            .collect();
        let velocity = named
            .iter()
            .zip(&trainer.opt.velocity)
            .map(|((n, t), v)| Record {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: v.iter().map(|x| x.to_f64_lossy()).collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            digest: trainer.config.model_digest(),
            epoch: trainer.epoch as u64,
            rng_state: trainer.rng.state(),
            params,
            velocity,
            config_toml: trainer.config.to_toml(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.version);
        out.extend(self.digest);
        put_u64(&mut out, self.epoch);
        for s in self.rng_state {
            put_u64(&mut out, s);
        }
        put_records(&mut out, &self.params);
        put_records(&mut out, &self.velocity);
        put_u32(&mut out, self.config_toml.len() as u32);
        out.extend(self.config_toml.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
        let params = r.records()?;
        let velocity = r.records()?;
        let n = r.u32()? as usize;
        let config_toml = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("embedded config is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            digest,
            epoch,
            rng_state,
            params,
            velocity,
            config_toml,
        })
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::from_toml(&self.config_toml)?;
        if cfg.model_digest() != self.digest {
            return Err(Error::Checkpoint(
                "embedded config does not match its digest".into(),
            ));
        }
        Ok(cfg)
    }

    /// Rebuilds the trainer state this checkpoint was captured from, under
    /// `config`, whose architecture must match.
    pub fn restore<T: Scalar>(&self, config: &ExperimentConfig) -> Result<Trainer<T>> {
        if config.model_digest() != self.digest {
            return Err(Error::Checkpoint(
                "model config digest differs from the checkpoint's".into(),
            ));
        }
        let mut t = Trainer::<T>::new(config)?;
        {
            let names: Vec<(String, Vec<usize>)> = t
                .model
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.shape().to_vec()))
                .collect();
            if names.len() != self.params.len() || names.len() != self.velocity.len() {
                return Err(Error::Checkpoint(format!(
                    "model has {} tensors, checkpoint {}",
                    names.len(),
                    self.params.len()
                )));
            }
            for ((n, s), r) in names.iter().zip(&self.params) {
                if *n != r.name || *s != r.shape || r.data.len() != s.iter().product::<usize>() {
                    return Err(Error::Checkpoint(format!(
                        "record {} {:?} does not match parameter {n} {s:?}",
                        r.name, r.shape
                    )));
                }
            }
            for (p, r) in t.model.params_mut().into_iter().zip(&self.params) {
                for (d, &v) in p.data_mut().iter_mut().zip(&r.data) {
                    *d = T::from_f64_lossy(v);
                }
            }
        }
        for (v, r) in t.opt.velocity.iter_mut().zip(&self.velocity) {
            if v.len() != r.data.len() {
                return Err(Error::Checkpoint(format!(
                    "velocity {} has the wrong size",
                    r.name
                )));
            }
            for (d, &x) in v.iter_mut().zip(&r.data) {
                *d = T::from_f64_lossy(x);
            }
        }
        t.rng = Xoshiro256::from_state(self.rng_state)
            .ok_or_else(|| Error::Checkpoint("all-zero generator state".into()))?;
        t.epoch = self.epoch as usize;
        t.opt.lr = t.schedule.lr_at(t.epoch.max(1));
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn records(&mut self) -> Result<Vec<Record>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = self.u32()? as usize;
            let shape = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = self.u64()? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "record {name}: size disagrees with shape"
                )));
            }
            let raw = self.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("record {name}: size overflow")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(Record { name, shape, data });
        }
        Ok(out)
    }
}

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let bytes = Checkpoint::capture(trainer).to_bytes();
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a checkpoint; with `expected`, the model digest must match.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
    if let Some(cfg) = expected {
        if cfg.model_digest() != ck.digest {
            return Err(Error::Checkpoint(
                "model config digest differs from the checkpoint's".into(),
            ));
        }
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RawImages;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar_param(1.0);
        let mut st = OptimizerState::new(&[&p], 1.0, 0.0, 0.0);
        sgd_step(&mut [&mut p], &[vec![0.25]], &mut st).unwrap();
        assert_eq!(p.data(), &[0.75]);
        sgd_step(&mut [&mut p], &[vec![0.0]], &mut st).unwrap();
        assert_eq!(p.data(), &[0.75]);
    }

    #[test]
    fn momentum_unrolls() {
        let g = 0.5;
        let mut p = scalar_param(0.0);
        let mut st = OptimizerState::new(&[&p], 1.0, 0.9, 0.0);
        for _ in 0..2 {
            sgd_step(&mut [&mut p], &[vec![g]], &mut st).unwrap();
        }
        assert!((p.data()[0] + 2.9 * g).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_in_velocity() {
        let mut p = scalar_param(2.0);
        let mut st = OptimizerState::new(&[&p], 0.1, 0.0, 0.5);
        sgd_step(&mut [&mut p], &[vec![0.0]], &mut st).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar_param(0.0);
        let mut st = OptimizerState::new(&[&p], 1.0, 0.0, 0.0);
        assert!(matches!(
            sgd_step(&mut [&mut p], &[vec![0.0, 1.0]], &mut st),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn schedule_milestones() {
        let s = Schedule::scaled(0.1, 100);
        assert_eq!(s.milestones, vec![30, 60, 90]);
        assert_eq!(s.lr_at(30), 0.1);
        assert!((s.lr_at(31) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(100) - 1e-4).abs() < 1e-15);
        assert_eq!(Schedule::scaled(0.1, 10).milestones, vec![3, 6, 9]);
        assert_eq!(Schedule::scaled(0.1, 2).milestones, vec![1, 2]);
        assert!(Schedule::new(0.1, vec![3, 3]).is_err());
    }

    #[test]
    fn top_k() {
        let l = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.5, 0.2, 0.9, 0.3, 0.4]).unwrap();
        assert_eq!(top_k_hits(&l, &[1, 2], 1), 1);
        assert_eq!(top_k_hits(&l, &[1, 2], 2), 2);
    }

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model.blocks = vec![1, 1];
        cfg.model.channels = vec![4, 4];
        cfg.model.spatial = vec![(8, 8), (4, 4)];
        cfg.steam.m = 4;
        cfg.train.batch_size = 32;
        cfg.train.epochs = 2;
        cfg
    }

    pub(crate) fn tiny_data(n: usize, seed: u64) -> Dataset<f64> {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let pixels = (0..n * 64)
            .map(|i| {
                let class = labels[i / 64] as usize;
                let bright = (i % 64) / 7 == class;
                (rand::RngCore::next_u32(&mut rng) % 64) as u8 + if bright { 180 } else { 0 }
            })
            .collect();
        RawImages {
            dims: [n, 1, 8, 8],
            pixels,
            labels,
        }
        .normalize(10, None)
        .unwrap()
    }

    #[test]
    fn steps_per_epoch() {
        let cfg = tiny_config();
        let mut t = Trainer::<f64>::new(&cfg).unwrap();
        let (tr, va) = (tiny_data(64, 1), tiny_data(20, 2));
        let m = t.run_epoch(&tr, &va).unwrap();
        assert_eq!(m.steps, 2);
        assert_eq!(t.epoch, 1);
    }

    #[test]
    fn zero_lr_keeps_loss() {
        let mut cfg = tiny_config();
        cfg.train.lr = 0.0;
        let mut t = Trainer::<f64>::new(&cfg).unwrap();
        let (tr, va) = (tiny_data(64, 1), tiny_data(20, 2));
        let before = evaluate(&t.model, &tr, 64).unwrap().loss;
        train_epochs(&mut t, &tr, &va, 2, |_, _| Ok(())).unwrap();
        let after = evaluate(&t.model, &tr, 64).unwrap().loss;
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn small_step_lowers_batch_loss() {
        let cfg = tiny_config();
        let mut t = Trainer::<f64>::new(&cfg).unwrap();
        t.opt.lr = 1e-4;
        t.opt.momentum = 0.0;
        let ds = tiny_data(32, 3);
        let before = evaluate(&t.model, &ds, 32).unwrap().loss;
        t.step(ds.images.clone(), &ds.labels, Phase::Eval).unwrap();
        let after = evaluate(&t.model, &ds, 32).unwrap().loss;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = tiny_config();
        let mut t = Trainer::<f64>::new(&cfg).unwrap();
        t.run_epoch(&tiny_data(32, 1), &tiny_data(10, 2)).unwrap();
        let ck = Checkpoint::capture(&t);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let r = back.restore::<f64>(&cfg).unwrap();
        for ((_, a), (_, b)) in r.model.named_params().iter().zip(t.model.named_params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(r.opt.velocity, t.opt.velocity);
        assert_eq!(r.rng.state(), t.rng.state());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        let mut bad = bytes.clone();
        bad[9] = 7;
        assert!(Checkpoint::from_bytes(&bad)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let mut other = cfg.clone();
        other.steam.heads = 2;
        assert!(back.restore::<f64>(&other).is_err());
        assert_eq!(back.config().unwrap(), cfg);
    }

    #[test]
    fn eval_is_pure() {
        let t = Trainer::<f64>::new(&tiny_config()).unwrap();
        let ds = tiny_data(30, 4);
        assert_eq!(
            evaluate(&t.model, &ds, 8).unwrap(),
            evaluate(&t.model, &ds, 8).unwrap()
        );
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut t = Trainer::<f64>::new(&tiny_config()).unwrap();
        for p in t.model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
        let e = t
            .run_epoch(&tiny_data(64, 1), &tiny_data(10, 2))
            .unwrap_err();
        assert!(
            matches!(
                e,
                Error::NonFiniteLoss {
                    epoch: 1,
                    step: 1,
                    ..
                }
            ),
            "{e}"
        );
    }
}
