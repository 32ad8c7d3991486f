//! Adam, the learning-rate schedule and the training loop.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, collate, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{mu_law_clamped, psnr, total_loss, SsimConfig};
use crate::model::{forward, init_parameters, predict, ModelConfig, ModelParams};
use crate::params::ParameterSet;
use crate::tensor::{Float, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer and loop position.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    /// Next epoch to run.
    pub epoch: u64,
    pub lr: f64,
    pub seed: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl TrainState {
    pub fn new(params: &ParameterSet<f32>, seed: u64, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        TrainState {
            step: 0,
            epoch: 0,
            lr,
            seed,
            m: zeros(),
            v: zeros(),
        }
    }
}

impl Adam {
    /// One bias-corrected update, parameters visited in set order.
    pub fn step(
        &self,
        params: &mut ParameterSet<f32>,
        grads: &[Tensor<f32>],
        state: &mut TrainState,
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            let name = params.names().get(grads.len()).cloned().unwrap_or_default();
            return Err(Error::MissingGradient(name));
        }
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer moments do not match parameters".into()));
        }
        let t = state.step + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = self.eps as f32;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        state.step = t;
        state.lr = lr;
        Ok(())
    }
}

/// Step schedule: `initial` before `decay_epoch`, `decayed` from then on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_epoch: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-4,
            decayed: 1e-5,
            decay_epoch: 20,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decayed: lr,
            decay_epoch: u64::MAX,
        }
    }

    pub fn lr(&self, epoch: u64) -> f64 {
        if epoch < self.decay_epoch {
            self.initial
        } else {
            self.decayed
        }
    }
}

/// Default epoch budget.
pub const DEFAULT_EPOCHS: u64 = 40;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: u64,
    pub batch_size: usize,
    /// Samples per forward/backward pass; gradients of the pieces are
    /// combined into the batch gradient. `None` uses the whole batch.
    pub micro_batch: Option<usize>,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub adam: Adam,
    /// Random dihedral transform per sample and step.
    pub augment: bool,
    /// Stop after this many updates in total.
    pub max_steps: Option<u64>,
    pub ssim: SsimConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: DEFAULT_EPOCHS,
            batch_size: 4,
            micro_batch: None,
            seed: 0,
            schedule: LrSchedule::default(),
            adam: Adam::default(),
            augment: true,
            max_steps: None,
            ssim: SsimConfig::default(),
        }
    }
}

/// Loss values and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome<T: Float> {
    pub grads: Vec<Tensor<T>>,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    /// Tone-mapped PSNR of each sample's prediction.
    pub psnr_mu: Vec<f64>,
}

fn batch_slice<T: Float>(t: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = (from..to).map(|i| t.batch_item(i)).collect::<Result<_>>()?;
    Tensor::stack_batch(&items.iter().collect::<Vec<_>>())
}

/// Mean loss over the batch and its gradient for every parameter, computed
/// in pieces of at most `micro` samples.
pub fn batch_gradients<T: Float>(
    params: &ParameterSet<T>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
    x2: &Tensor<T>,
    gt: &Tensor<T>,
    ssim: &SsimConfig,
    micro: Option<usize>,
) -> Result<BatchOutcome<T>> {
    let [b, ..] = x.dims4()?;
    let micro = micro.unwrap_or(b).clamp(1, b.max(1));
    let mut out = BatchOutcome {
        grads: params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        loss: 0.0,
        l1: 0.0,
        l2: 0.0,
        psnr_mu: Vec::with_capacity(b),
    };
    let mut from = 0;
    while from < b {
        let to = (from + micro).min(b);
        let whole = from == 0 && to == b;
        let (xs, x2s, gts) = if whole {
            (x.clone(), x2.clone(), gt.clone())
        } else {
            (batch_slice(x, from, to)?, batch_slice(x2, from, to)?, batch_slice(gt, from, to)?)
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let p = ModelParams::bind(&bound, cfg)?;
        let vars = bound.vars().to_vec();
        let xv = g.constant(xs);
        let x2v = g.constant(x2s);
        let gtv = g.constant(gts);
        let pred = forward(&mut g, &p, cfg, xv, x2v)?;
        let terms = total_loss(&mut g, pred, gtv, cfg.mu, ssim)?;
        let weight = (to - from) as f64 / b as f64;
        out.loss += weight * g.value(terms.total).item().as_f64();
        out.l1 += weight * g.value(terms.l1).item().as_f64();
        out.l2 += weight * g.value(terms.l2).item().as_f64();
        for i in 0..to - from {
            let tp = mu_law_clamped(&g.value(pred).batch_item(i)?, cfg.mu)?;
            let tg = mu_law_clamped(&g.value(gtv).batch_item(i)?, cfg.mu)?;
            out.psnr_mu.push(psnr(&tp, &tg)?);
        }
        let mut grads = g.backward(terms.total)?;
        let w = T::lit(weight);
        for (acc, v) in out.grads.iter_mut().zip(&vars) {
            let gr = grads
                .take(*v)
                .ok_or_else(|| Error::MissingGradient(format!("parameter #{}", v.index())))?;
            if whole {
                *acc = gr;
            } else {
                for (a, &d) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += w * d;
                }
            }
        }
        from = to;
    }
    Ok(out)
}

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub psnr_mu: f64,
    pub steps: u64,
    /// Batch loss of every step, before its update.
    pub step_losses: Vec<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,L,L1,L2,psnr_mu";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{}",
            self.epoch, self.lr, self.loss, self.l1, self.l2, self.psnr_mu
        )
    }
}

/// Mean loss terms and tone-mapped PSNR of a model over a sample list.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub psnr_mu: f64,
}

/// Evaluates `params` one sample at a time (no augmentation).
pub fn evaluate(params: &ParameterSet<f32>, cfg: &ModelConfig, samples: &[Sample], ssim: &SsimConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut e = Evaluation::default();
    for s in samples {
        let (x, x2, gt) = collate(&[s])?;
        let pred = predict(params, cfg, &x, &x2)?;
        let mut g = Graph::<f32>::new();
        let pv = g.constant(pred.clone());
        let gv = g.constant(gt.clone());
        let terms = total_loss(&mut g, pv, gv, cfg.mu, ssim)?;
        e.loss += g.value(terms.total).item() as f64;
        e.l1 += g.value(terms.l1).item() as f64;
        e.l2 += g.value(terms.l2).item() as f64;
        e.psnr_mu += psnr(&mu_law_clamped(&pred, cfg.mu)?, &mu_law_clamped(&gt, cfg.mu)?)?;
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: e.loss / n,
        l1: e.l1 / n,
        l2: e.l2 / n,
        psnr_mu: e.psnr_mu / n,
    })
}

/// Model, parameters, optimizer state and options of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub params: ParameterSet<f32>,
    pub state: TrainState,
    pub options: TrainOptions,
}

impl Trainer {
    /// Fresh parameters initialized from `options.seed`.
    pub fn new(cfg: ModelConfig, options: TrainOptions) -> Result<Self> {
        if options.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let params = init_parameters(&cfg, options.seed)?;
        let state = TrainState::new(&params, options.seed, options.schedule.lr(0));
        Ok(Trainer {
            cfg,
            params,
            state,
            options,
        })
    }

    /// Continues from a checkpoint; the seed stored in it wins.
    pub fn resume(ckpt: Checkpoint, mut options: TrainOptions) -> Result<Self> {
        options.seed = ckpt.state.seed;
        Ok(Trainer {
            cfg: ckpt.config,
            params: ckpt.params,
            state: ckpt.state,
            options,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            state: self.state.clone(),
        }
    }

    /// Generator for the shuffle and augmentation draws of `epoch`.
    fn epoch_rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.seed);
        rng.set_stream(epoch);
        rng
    }

    fn done(&self) -> bool {
        self.options.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One update on `batch`; returns the loss terms before the update.
    pub fn step(&mut self, batch: &[&Sample]) -> Result<BatchOutcome<f32>> {
        let (x, x2, gt) = collate(batch)?;
        let out = batch_gradients(&self.params, &self.cfg, &x, &x2, &gt, &self.options.ssim, self.options.micro_batch)?;
        let step = self.state.step + 1;
        if !out.loss.is_finite() {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        if let Some(i) = out.grads.iter().position(|g| !g.all_finite()) {
            log::error!("non-finite gradient for `{}`", self.params.names()[i]);
            return Err(Error::Divergence { step, loss: out.loss });
        }
        let lr = self.options.schedule.lr(self.state.epoch);
        self.options.adam.step(&mut self.params, &out.grads, &mut self.state, lr)?;
        Ok(out)
    }

    /// Runs the remaining epochs. `on_epoch` sees every finished epoch, for
    /// logging and checkpointing.
    pub fn train(
        &mut self,
        data: &[Sample],
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut logs = Vec::new();
        while self.state.epoch < self.options.epochs && !self.done() {
            let epoch = self.state.epoch;
            let lr = self.options.schedule.lr(epoch);
            self.state.lr = lr;
            let mut rng = self.epoch_rng(epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);

            let (mut seen, mut loss, mut l1, mut l2, mut ps) = (0usize, 0.0, 0.0, 0.0, 0.0);
            let mut step_losses = Vec::new();
            let first_step = self.state.step;
            for chunk in order.chunks(self.options.batch_size) {
                if self.done() {
                    break;
                }
                let augmented: Vec<Sample>;
                let batch: Vec<&Sample> = if self.options.augment {
                    augmented = chunk
                        .iter()
                        .map(|&i| augment(&data[i], rng.random_range(0..8)))
                        .collect::<Result<_>>()?;
                    augmented.iter().collect()
                } else {
                    chunk.iter().map(|&i| &data[i]).collect()
                };
                let out = self.step(&batch)?;
                let n = batch.len();
                step_losses.push(out.loss);
                seen += n;
                loss += out.loss * n as f64;
                l1 += out.l1 * n as f64;
                l2 += out.l2 * n as f64;
                ps += out.psnr_mu.iter().sum::<f64>();
            }
            self.state.epoch = epoch + 1;
            let n = seen.max(1) as f64;
            let log = EpochLog {
                epoch,
                lr,
                loss: loss / n,
                l1: l1 / n,
                l2: l2 / n,
                psnr_mu: ps / n,
                steps: self.state.step - first_step,
                step_losses,
            };
            log::info!("{}", log.csv_row());
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(19), 1e-4);
        assert_eq!(s.lr(20), 1e-5);
        assert_eq!(s.lr(39), 1e-5);
        assert_eq!(LrSchedule::constant(3e-3).lr(1 << 40), 3e-3);
    }

    fn one_param(v: f32) -> ParameterSet<f32> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::full(vec![3], v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one_param(0.5);
        let mut st = TrainState::new(&p, 0, 1e-3);
        Adam::default()
            .step(&mut p, &[Tensor::zeros(vec![3])], &mut st, 1e-3)
            .unwrap();
        assert_eq!(p, one_param(0.5));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = one_param(0.0);
        let mut st = TrainState::new(&p, 0, 1e-2);
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 1e-3]).unwrap();
        Adam::default().step(&mut p, &[g], &mut st, 1e-2).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] + 1e-2).abs() < 1e-6);
        assert!((w[1] - 1e-2).abs() < 1e-6);
        assert!((w[2] + 1e-2).abs() < 1e-4);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = one_param(0.0);
        let mut st = TrainState::new(&p, 0, 1e-2);
        assert!(matches!(
            Adam::default().step(&mut p, &[], &mut st, 1e-2),
            Err(Error::MissingGradient(_))
        ));
    }
}
