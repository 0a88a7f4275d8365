//! Mini-batch SGD over categorical cross-entropy with layer freezing and
//! seeded per-epoch shuffling.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Label, SampleSource};
use crate::error::{Error, Result};
use crate::layers::{mix_seed, Exec, Params};
use crate::network::{freeze_prefix, init_params, Checkpoint, Gradients, Model, NetworkSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Number of leading weight layers kept fixed.
    pub freeze_depth: usize,
    pub seed: u64,
    pub dropout_rate: f64,
    /// Classical momentum coefficient; 0 is plain SGD.
    pub momentum: f64,
    /// Keep every kernel on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            freeze_depth: 5,
            seed: 42,
            dropout_rate: 0.5,
            momentum: 0.0,
            deterministic: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        Ok(())
    }

    /// One `key=value` line of every effective hyperparameter.
    pub fn echo(&self) -> String {
        format!(
            "lr={} batch={} epochs={} freeze_depth={} dropout={} momentum={} seed={} deterministic={}",
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.freeze_depth,
            self.dropout_rate,
            self.momentum,
            self.seed,
            self.deterministic
        )
    }

    fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// `w ← w − lr·g` on trainable layers (with momentum `v ← μ·v + g`,
/// `w ← w − lr·v` when `momentum > 0`). Frozen layers are never touched.
pub fn sgd_step<T: Scalar>(
    params: &mut Checkpoint<T>,
    grads: &Gradients<T>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::InvalidGradient(format!(
            "{} gradient entries for {} weight layers",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    // Validate everything before mutating anything.
    for (layer, grad) in params.layers.iter().zip(&grads.layers) {
        if !layer.trainable {
            continue;
        }
        let g = grad.as_ref().ok_or_else(|| {
            Error::InvalidGradient(format!("trainable layer {} has no gradient", layer.name))
        })?;
        if g.weight.shape() != layer.params.weight.shape()
            || g.bias.shape() != layer.params.bias.shape()
        {
            return Err(Error::InvalidGradient(format!(
                "layer {}: gradient {:?}/{:?} vs parameters {:?}/{:?}",
                layer.name,
                g.weight.shape(),
                g.bias.shape(),
                layer.params.weight.shape(),
                layer.params.bias.shape()
            )));
        }
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(momentum);
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        let (true, Some(g)) = (layer.trainable, grad) else {
            continue;
        };
        if momentum == 0.0 {
            descend(&mut layer.params.weight, &g.weight, lr);
            descend(&mut layer.params.bias, &g.bias, lr);
            continue;
        }
        let v = layer.velocity.get_or_insert_with(|| Params {
            weight: g.weight.map(|_| T::zero()),
            bias: g.bias.map(|_| T::zero()),
        });
        accumulate(&mut v.weight, &g.weight, mu);
        accumulate(&mut v.bias, &g.bias, mu);
        descend(&mut layer.params.weight, &v.weight, lr);
        descend(&mut layer.params.bias, &v.bias, lr);
    }
    Ok(())
}

fn descend<T: Scalar>(w: &mut Tensor<T>, g: &Tensor<T>, lr: T) {
    w.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(w, &g)| *w = *w - lr * g);
}

fn accumulate<T: Scalar>(v: &mut Tensor<T>, g: &Tensor<T>, mu: T) {
    v.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(v, &g)| *v = mu * *v + g);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Fraction of training samples whose training-mode prediction was right.
    pub train_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub config: TrainingConfig,
    pub network: String,
    pub samples: usize,
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn total_steps(&self) -> usize {
        self.epochs.iter().map(|e| e.steps).sum()
    }

    /// Header lines echoing the run, then `epoch mean_loss train_acc seconds`
    /// rows. With `with_time == false` the seconds column reads `-`.
    pub fn to_text(&self, with_time: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# network={} samples={}", self.network, self.samples);
        let _ = writeln!(out, "# {}", self.config.echo());
        out.push_str("epoch\tmean_loss\ttrain_acc\tseconds\n");
        for e in &self.epochs {
            out.push_str(&format_epoch(e, with_time));
            out.push('\n');
        }
        out
    }
}

pub fn format_epoch(e: &EpochLog, with_time: bool) -> String {
    let seconds = if with_time {
        format!("{:.3}", e.seconds)
    } else {
        "-".to_string()
    };
    format!(
        "{}\t{:.6}\t{:.6}\t{}",
        e.epoch, e.mean_loss, e.train_accuracy, seconds
    )
}

/// Stacks samples into an `[N,3,H,W]` batch and `[N,2]` one-hot targets.
pub fn make_batch<T: Scalar>(samples: &[(Tensor<T>, Label)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<Tensor<T>> = samples.iter().map(|(t, _)| t.clone()).collect();
    let mut targets = vec![T::zero(); samples.len() * 2];
    for (i, (_, label)) in samples.iter().enumerate() {
        targets[i * 2 + label.index()] = T::one();
    }
    Ok((
        Tensor::stack(&images)?,
        Tensor::new(&[samples.len(), 2], targets)?,
    ))
}

fn load_batch<T: Scalar, S: SampleSource<T> + ?Sized>(
    source: &S,
    indices: &[usize],
    exec: Exec,
) -> Result<Vec<(Tensor<T>, Label)>> {
    match exec {
        Exec::Sequential => indices.iter().map(|&i| source.load(i)).collect(),
        Exec::Parallel => indices.par_iter().map(|&i| source.load(i)).collect(),
    }
}

/// Trains `spec` on every sample of `source`.
///
/// Each epoch reshuffles the sample order with a Fisher–Yates pass seeded by
/// `(cfg.seed, epoch)` and runs `ceil(N / batch_size)` SGD steps; the last
/// batch may be smaller. Dropout masks are seeded per step. `init` defaults to
/// a fresh He-uniform initialization from `cfg.seed`. `on_epoch` sees each
/// epoch's log entry as soon as it is complete.
pub fn train<T, S>(
    spec: &NetworkSpec,
    source: &S,
    cfg: &TrainingConfig,
    init: Option<Checkpoint<T>>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint<T>, TrainingLog)>
where
    T: Scalar,
    S: SampleSource<T> + ?Sized,
{
    cfg.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::EmptyDataset("training split has no samples".into()));
    }
    let spec = freeze_prefix(
        &spec.clone().with_dropout(cfg.dropout_rate)?,
        cfg.freeze_depth,
    )?;
    let params = match init {
        Some(ckpt) => ckpt,
        None => init_params(&spec, cfg.seed)?,
    };
    let mut model = Model::new(spec.clone(), params)?;
    let exec = cfg.exec();
    model.set_exec(exec);

    let mut step = model.checkpoint().meta.steps;
    let first_epoch = model.checkpoint().meta.epoch as usize;
    let mut log = TrainingLog {
        config: *cfg,
        network: format!("{} ({})", spec.name, spec.scale),
        samples: n,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in first_epoch + 1..=first_epoch + cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            epoch as u64,
        )));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = load_batch(source, chunk, exec)?;
            let (x, targets) = make_batch(&samples)?;
            let (loss, probs, grads) =
                model.loss_and_grads(&x, &targets, mix_seed(cfg.seed ^ 0xd5, step))?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(Error::InvalidGradient(format!(
                    "loss diverged to {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += probs
                .data()
                .chunks_exact(2)
                .zip(&samples)
                .filter(|(p, (_, label))| predicted_label(p[0], p[1]) == *label)
                .count();
            sgd_step(
                model.checkpoint_mut(),
                &grads,
                cfg.learning_rate,
                cfg.momentum,
            )?;
            step += 1;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            steps,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    let mut ckpt = model.into_checkpoint();
    ckpt.meta.epoch = (first_epoch + cfg.epochs) as u32;
    ckpt.meta.seed = cfg.seed;
    ckpt.meta.steps = step;
    ckpt.meta.learning_rate = cfg.learning_rate;
    ckpt.meta.momentum = cfg.momentum;
    Ok((ckpt, log))
}

/// Billboard only when it is strictly more probable; exact ties go to
/// no-billboard.
pub fn predicted_label<T: Scalar>(p_no: T, p_billboard: T) -> Label {
    if p_billboard > p_no {
        Label::Billboard
    } else {
        Label::NoBillboard
    }
}
