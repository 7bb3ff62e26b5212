//! Loss, optimizer, learning-rate schedule and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{FovMask, Plane};
use crate::network::{backward, forward, layers::softmax, xavier_init, ArchConfig, Mode, ParamSet, Tensor};
use crate::patches::{
    augment_rotations, cut_patch, elastic_deform_seeded, pad_for_training, rotate_block, rotate_grid, sample_origins,
    shuffle_grouped, PaddedStack, PatchPair, Rotatable, Rotation, INPUT_SIZE, OUTPUT_SIZE,
};
use crate::scalar::Real;
use crate::wavelet::InputStack;

/// Clamp applied inside the logarithm of the loss.
pub const LOSS_EPS: f64 = 1e-12;

/// (α, σ) pairs used by the elastic augmentation, one copy of each original per pair.
pub const ELASTIC_PARAMS: [(f64, f64); 3] = [(8.0, 1.5), (16.0, 2.5), (32.0, 3.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    /// Each original plus its three rotations.
    Rotations,
    /// Originals only.
    None,
    /// Four times as many originals.
    Oversample,
    /// Originals plus one elastic copy per [`ELASTIC_PARAMS`] entry.
    Elastic,
}

impl Augmentation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rotations" => Some(Augmentation::Rotations),
            "none" => Some(Augmentation::None),
            "oversample" => Some(Augmentation::Oversample),
            "elastic" => Some(Augmentation::Elastic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::Rotations => "rotations",
            Augmentation::None => "none",
            Augmentation::Oversample => "oversample",
            Augmentation::Elastic => "elastic",
        }
    }

    /// Training patches per original sample.
    pub fn multiplier(self) -> usize {
        match self {
            Augmentation::None => 1,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// (first epoch, η) rows, ascending, starting at epoch 1.
    pub lr_table: Vec<(usize, f64)>,
    /// (first epoch, ν) rows, ascending, starting at epoch 1.
    pub momentum_table: Vec<(usize, f64)>,
    pub decay: f64,
    pub seed: u64,
    /// Original (unaugmented) patches sampled per image.
    pub patches_per_image: usize,
    pub augmentation: Augmentation,
    pub consecutive_rotations: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr_table: vec![(1, 0.05), (10, 0.02), (14, 0.002), (18, 0.0002)],
            momentum_table: vec![(1, 0.2), (10, 0.9), (14, 0.99)],
            decay: 1e-6,
            seed: 0,
            patches_per_image: 2750,
            augmentation: Augmentation::Rotations,
            consecutive_rotations: false,
        }
    }
}

fn check_table(name: &str, table: &[(usize, f64)]) -> Result<()> {
    if table.first().map(|r| r.0) != Some(1) {
        return Err(Error::InvalidArgument(format!("{name} table must start at epoch 1")));
    }
    if table.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::InvalidArgument(format!("{name} table epochs must increase")));
    }
    if table.iter().any(|r| !(r.1 > 0.0 && r.1.is_finite())) {
        return Err(Error::InvalidArgument(format!("{name} table rates must be positive")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_table("learning-rate", &self.lr_table)?;
        check_table("momentum", &self.momentum_table)?;
        if self.momentum_table.iter().any(|r| r.1 >= 1.0) {
            return Err(Error::InvalidArgument("momentum must be below 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_image == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and patches per image must be at least 1".into(),
            ));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::InvalidArgument(
                "decay must be a finite non-negative number".into(),
            ));
        }
        Ok(())
    }

    /// Base learning rate and momentum in force during `epoch` (1-based).
    pub fn schedule_lookup(&self, epoch: usize) -> Result<(f64, f64)> {
        if epoch == 0 || epoch > self.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 1..={}",
                self.epochs
            )));
        }
        let at = |t: &[(usize, f64)]| t.iter().rev().find(|r| r.0 <= epoch).map(|r| r.1);
        match (at(&self.lr_table), at(&self.momentum_table)) {
            (Some(lr), Some(nu)) => Ok((lr, nu)),
            _ => Err(Error::InvalidArgument("schedule tables must start at epoch 1".into())),
        }
    }

    /// True when `epoch` starts a new learning-rate row.
    pub fn lr_boundary(&self, epoch: usize) -> bool {
        self.lr_table.iter().any(|r| r.0 == epoch)
    }
}

/// `η_n = η_prev / (1 + λ n)`.
pub fn lr_decay_step(eta_prev: f64, decay: f64, n: u64) -> f64 {
    eta_prev / (1.0 + decay * n as f64)
}

/// Learning-rate and momentum trajectory: η restarts from the table at each
/// learning-rate row and decays after every update with the global count.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    config: TrainConfig,
    pub eta: f64,
    pub nu: f64,
    pub updates: u64,
    pub epoch: usize,
}

impl Schedule {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Schedule {
            config: config.clone(),
            eta: config.lr_table[0].1,
            nu: config.momentum_table[0].1,
            updates: 0,
            epoch: 0,
        })
    }

    pub fn begin_epoch(&mut self, epoch: usize) -> Result<()> {
        let (lr, nu) = self.config.schedule_lookup(epoch)?;
        if self.config.lr_boundary(epoch) {
            self.eta = lr;
        }
        self.nu = nu;
        self.epoch = epoch;
        Ok(())
    }

    /// Records one weight update and applies the decay.
    pub fn after_update(&mut self) {
        self.updates += 1;
        self.eta = lr_decay_step(self.eta, self.config.decay, self.updates);
    }
}

/// Per-parameter velocity, update counter and the η last used.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Real = f64> {
    pub velocity: ParamSet<T>,
    pub n: u64,
    pub eta: f64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            n: 0,
            eta: 0.0,
        }
    }
}

/// One Nesterov update in lookahead form:
/// `v ← ν v − η ∇J(w + ν v)`, `w ← w + v`. Returns the loss reported by
/// `grad_fn` at the lookahead point.
pub fn nesterov_step<T: Real, F>(
    params: &mut ParamSet<T>,
    state: &mut OptimizerState<T>,
    mut grad_fn: F,
    eta: f64,
    nu: f64,
) -> Result<f64>
where
    F: FnMut(&ParamSet<T>) -> Result<(f64, ParamSet<T>)>,
{
    let nu_t = T::from_f64_lossy(nu);
    let mut lookahead = params.clone();
    lookahead.axpy(nu_t, &state.velocity);
    let (loss, grad) = grad_fn(&lookahead)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} at update {}", state.n + 1)));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite(format!("gradient at update {}", state.n + 1)));
    }
    state.velocity.scale(nu_t);
    state.velocity.axpy(T::from_f64_lossy(-eta), &grad);
    params.axpy(T::one(), &state.velocity);
    state.n += 1;
    state.eta = eta;
    Ok(loss)
}

fn check_one_hot<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(Error::Dimensions(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    let hw = targets.h * targets.w;
    for n in 0..targets.n {
        let s = targets.sample(n);
        for i in 0..hw {
            let mut ones = 0;
            for c in 0..targets.c {
                let v = s[c * hw + i];
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(Error::InvalidArgument(format!("target value {v} is not 0 or 1")));
                }
            }
            if ones != 1 {
                return Err(Error::InvalidArgument("target is not one-hot".into()));
            }
        }
    }
    Ok(())
}

/// `J = −(1/M) Σ_j Σ_k y_jk ln(max(ŷ_jk, ε))` with `M` every pixel in the batch.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    check_one_hot(probs, targets)?;
    let eps = T::from_f64_lossy(LOSS_EPS);
    let m = T::from_usize_lossy(probs.n * probs.h * probs.w);
    let mut sum = T::zero();
    for (&p, &y) in probs.data.iter().zip(&targets.data) {
        if y != T::zero() {
            sum += y * p.max(eps).ln();
        }
    }
    Ok(-sum / m)
}

/// Gradient of [`cross_entropy`] with respect to the logits that produced
/// `probs` through softmax: `(ŷ − y) / M`.
pub fn cross_entropy_backward<T: Real>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_one_hot(probs, targets)?;
    let m = T::from_usize_lossy(probs.n * probs.h * probs.w);
    let mut g = probs.clone();
    g.data
        .iter_mut()
        .zip(&targets.data)
        .for_each(|(p, &y)| *p = (*p - y) / m);
    Ok(g)
}

/// One-hot `N × classes × h × w` targets from per-sample label grids.
pub fn one_hot<T: Real>(labels: &[&[u8]], classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    let mut t = Tensor::zeros(labels.len(), classes, h, w);
    for (n, l) in labels.iter().enumerate() {
        if l.len() != hw {
            return Err(Error::Dimensions(format!(
                "label grid has {} cells, expected {hw}",
                l.len()
            )));
        }
        let s = t.sample_mut(n);
        for (i, &c) in l.iter().enumerate() {
            if c as usize >= classes {
                return Err(Error::InvalidArgument(format!("label {c} outside {classes} classes")));
            }
            s[c as usize * hw + i] = T::one();
        }
    }
    Ok(t)
}

/// Loss and parameter gradient of one batch.
pub fn batch_gradient<T: Real, R: Rng + ?Sized>(
    params: &ParamSet<T>,
    config: &ArchConfig,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    rng: &mut R,
) -> Result<(f64, ParamSet<T>)> {
    let (logits, trace) = forward(params, config, inputs, Mode::Train, rng)?;
    let probs = softmax(&logits);
    let loss = cross_entropy(&probs, targets)?;
    let g = cross_entropy_backward(&probs, targets)?;
    let grads = backward(&trace, config, params, &g)?;
    Ok((loss.to_f64_lossy(), grads))
}

/// One image of a training set.
#[derive(Debug, Clone)]
pub struct TrainingImage<T: Real = f64> {
    pub stack: InputStack<T>,
    /// Ground truth in {0, 1}.
    pub labels: Plane<T>,
    pub fov: FovMask,
}

/// A training patch described by where to cut it and how to transform it;
/// materialized only when its batch is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchRef {
    pub image: usize,
    pub origin: (usize, usize),
    pub rotation: Rotation,
    /// Index into [`ELASTIC_PARAMS`] and the deformation seed.
    pub elastic: Option<(usize, u64)>,
}

impl Rotatable for PatchRef {
    fn rotated(&self, r: Rotation) -> Self {
        PatchRef {
            rotation: self.rotation.then(r),
            ..*self
        }
    }
}

impl PatchRef {
    pub fn materialize<T: Real>(&self, padded: &[PaddedStack<T>], images: &[TrainingImage<T>]) -> Result<PatchPair<T>> {
        let base = cut_patch(&padded[self.image], &images[self.image].labels, self.origin);
        let base = match self.elastic {
            Some((i, seed)) => {
                let (alpha, sigma) = ELASTIC_PARAMS[i];
                elastic_deform_seeded(&base, alpha, sigma, seed)?
            }
            None => base,
        };
        if self.rotation.quarter_turns() == 0 {
            return Ok(base);
        }
        Ok(PatchPair {
            input: rotate_block(&base.input, self.rotation),
            target: rotate_grid(&base.target, OUTPUT_SIZE, OUTPUT_SIZE, self.rotation).0,
            origin: base.origin,
        })
    }
}

/// Independent random streams derived from the training seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 0,
    Sampling = 1,
    Shuffle = 2,
    Dropout = 3,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Builds the full list of training patch descriptors for a dataset.
pub fn plan_patches<R: Rng + ?Sized>(
    images: &[(usize, usize)],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<PatchRef>> {
    let per_image = match config.augmentation {
        Augmentation::Oversample => 4 * config.patches_per_image,
        _ => config.patches_per_image,
    };
    let mut originals = Vec::with_capacity(images.len() * per_image);
    for (i, &(w, h)) in images.iter().enumerate() {
        for origin in sample_origins(w, h, per_image, rng)? {
            originals.push(PatchRef {
                image: i,
                origin,
                rotation: Rotation::new(0),
                elastic: None,
            });
        }
    }
    Ok(match config.augmentation {
        Augmentation::Rotations => augment_rotations(&originals, rng, config.consecutive_rotations),
        Augmentation::None | Augmentation::Oversample => originals,
        Augmentation::Elastic => {
            let mut all = originals.clone();
            for k in 0..ELASTIC_PARAMS.len() {
                for o in &originals {
                    all.push(PatchRef {
                        elastic: Some((k, rng.random())),
                        ..*o
                    });
                }
            }
            all
        }
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate after the epoch's last update.
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_header() -> &'static str {
        "epoch,mean_loss,lr"
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.mean_loss, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real = f64> {
    pub params: ParamSet<T>,
    pub log: Vec<EpochLog>,
    pub updates: u64,
}

fn check_geometry(arch: &ArchConfig, images: &[TrainingImage<impl Real>]) -> Result<()> {
    arch.validate()?;
    if arch.output_size != OUTPUT_SIZE || arch.input_size() != INPUT_SIZE {
        return Err(Error::Architecture(format!(
            "training patches are {INPUT_SIZE} -> {OUTPUT_SIZE}, architecture maps {} -> {}",
            arch.input_size(),
            arch.output_size
        )));
    }
    if arch.classes != 2 {
        return Err(Error::Architecture("training needs exactly two classes".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if img.stack.channel_count() != arch.in_channels {
            return Err(Error::Architecture(format!(
                "image {i} has {} channels, architecture expects {}",
                img.stack.channel_count(),
                arch.in_channels
            )));
        }
        let (w, h) = (img.stack.width(), img.stack.height());
        if !img.labels.same_dims(w, h) || img.fov.width != w || img.fov.height != h {
            return Err(Error::Dimensions(format!(
                "image {i}: stack, labels and FOV sizes differ"
            )));
        }
    }
    Ok(())
}

/// Trains a fresh model. `on_epoch` sees every epoch's log entry and the
/// parameters at its end.
pub fn train<T: Real>(
    config: &TrainConfig,
    arch: &ArchConfig,
    images: &[TrainingImage<T>],
    mut on_epoch: impl FnMut(&EpochLog, &ParamSet<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    config.validate()?;
    check_geometry(arch, images)?;

    let mut params: ParamSet<T> = xavier_init(arch, &mut stream(config.seed, Stream::Init))?;
    let dims: Vec<(usize, usize)> = images.iter().map(|i| (i.stack.width(), i.stack.height())).collect();
    let mut order = plan_patches(&dims, config, &mut stream(config.seed, Stream::Sampling))?;
    let padded: Vec<PaddedStack<T>> = images.iter().map(|i| pad_for_training(&i.stack)).collect();
    let group = if config.consecutive_rotations && config.augmentation == Augmentation::Rotations {
        4
    } else {
        1
    };

    let mut shuffle_rng = stream(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream(config.seed, Stream::Dropout);
    let mut schedule = Schedule::new(config)?;
    let mut state = OptimizerState::new(&params);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        schedule.begin_epoch(epoch)?;
        shuffle_grouped(&mut order, group, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let pairs = batch
                .iter()
                .map(|r| r.materialize(&padded, images))
                .collect::<Result<Vec<_>>>()?;
            let blocks: Vec<_> = pairs.iter().map(|p| &p.input).collect();
            let inputs = Tensor::from_blocks(&blocks)?;
            let labels: Vec<&[u8]> = pairs.iter().map(|p| p.target.as_slice()).collect();
            let targets = one_hot(&labels, arch.classes, OUTPUT_SIZE, OUTPUT_SIZE)?;
            let loss = nesterov_step(
                &mut params,
                &mut state,
                |w| batch_gradient(w, arch, &inputs, &targets, &mut dropout_rng),
                schedule.eta,
                schedule.nu,
            )?;
            schedule.after_update();
            loss_sum += loss * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / order.len() as f64,
            lr: schedule.eta,
        };
        on_epoch(&entry, &params)?;
        log.push(entry);
    }
    debug_assert_eq!(state.n, schedule.updates);
    Ok(TrainOutcome {
        params,
        log,
        updates: state.n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::FovMask;
    use crate::network::checkpoint::save_model;
    use crate::wavelet::{build_input_stack, ChannelMode};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn defaults_follow_the_schedule_table() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size, c.decay), (20, 4, 1e-6));
        c.validate().unwrap();
        assert_eq!(c.schedule_lookup(1).unwrap(), (0.05, 0.2));
        assert_eq!(c.schedule_lookup(10).unwrap(), (0.02, 0.9));
        assert_eq!(c.schedule_lookup(13).unwrap(), (0.02, 0.9));
        assert_eq!(c.schedule_lookup(14).unwrap(), (0.002, 0.99));
        assert_eq!(c.schedule_lookup(19).unwrap(), (0.0002, 0.99));
        assert!(c.schedule_lookup(0).is_err());
        assert!(c.schedule_lookup(21).is_err());
    }

    #[test]
    fn bad_tables_rejected() {
        let mut c = TrainConfig {
            lr_table: vec![(2, 0.1)],
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.lr_table = vec![(1, 0.1), (1, 0.2)];
        assert!(c.validate().is_err());
        c.lr_table = vec![(1, 0.0)];
        assert!(c.validate().is_err());
        c.lr_table = vec![(1, 0.1)];
        c.momentum_table = vec![(1, 1.0)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn decay_step_examples() {
        assert!((lr_decay_step(0.05, 1e-6, 1) - 0.04999995000005).abs() < 1e-15);
        assert_eq!(lr_decay_step(0.3, 0.0, 17), 0.3);
    }

    proptest! {
        #[test]
        fn decay_is_monotone(eta in 1e-6f64..1.0, lambda in 1e-9f64..1e-2, n in 1u64..1_000_000) {
            prop_assert!(lr_decay_step(eta, lambda, n) < eta);
        }
    }

    #[test]
    fn schedule_resets_at_rows_and_counts_globally() {
        let c = TrainConfig::default();
        let mut s = Schedule::new(&c).unwrap();
        let per_epoch = 3;
        let mut eta_oracle = 0.0;
        let mut n = 0u64;
        for epoch in 1..=20 {
            s.begin_epoch(epoch).unwrap();
            if [1, 10, 14, 18].contains(&epoch) {
                eta_oracle = c.lr_table.iter().find(|r| r.0 == epoch).unwrap().1;
                assert_eq!(s.eta, eta_oracle);
            }
            for _ in 0..per_epoch {
                n += 1;
                s.after_update();
                eta_oracle /= 1.0 + 1e-6 * n as f64;
                assert_eq!(s.eta, eta_oracle);
            }
        }
        assert_eq!(s.updates, 60);
    }

    #[test]
    fn nesterov_on_quadratic_bowl() {
        // J = ½ w², one scalar parameter carried in a 1×1×1 layer bias.
        let config = ArchConfig {
            in_channels: 1,
            classes: 1,
            base_width: 1,
            encoder_convs: vec![1],
            bottleneck_convs: 1,
            decoder_convs: vec![1],
            output_size: 2,
            ..ArchConfig::default()
        };
        let mut w: ParamSet<f64> = ParamSet::zeros(&config);
        let last = w.layers.len() - 1;
        w.layers[last].bias[0] = 1.0;
        let mut state = OptimizerState::new(&w);
        let grad = |p: &ParamSet<f64>| {
            let mut g = p.zeros_like();
            let x = p.layers[last].bias[0];
            g.layers[last].bias[0] = x;
            Ok((0.5 * x * x, g))
        };
        nesterov_step(&mut w, &mut state, grad, 0.1, 0.9).unwrap();
        assert!((state.velocity.layers[last].bias[0] + 0.1).abs() < 1e-15);
        assert!((w.layers[last].bias[0] - 0.9).abs() < 1e-15);
        let mut prev = w.layers[last].bias[0].abs();
        let start = prev;
        for _ in 0..99 {
            nesterov_step(&mut w, &mut state, grad, 0.1, 0.9).unwrap();
            prev = w.layers[last].bias[0].abs();
        }
        assert!(prev < start);
        assert_eq!(state.n, 100);

        // ν = 0 is plain gradient descent
        let mut w0 = w.clone();
        let mut s0 = OptimizerState::new(&w0);
        let before = w0.layers[last].bias[0];
        nesterov_step(&mut w0, &mut s0, grad, 0.25, 0.0).unwrap();
        assert!((w0.layers[last].bias[0] - (before - 0.25 * before)).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_gradient_aborts() {
        let config = ArchConfig::default();
        let mut w: ParamSet<f64> = ParamSet::zeros(&config);
        let mut state = OptimizerState::new(&w);
        let err = nesterov_step(
            &mut w,
            &mut state,
            |p| {
                let mut g = p.zeros_like();
                g.layers[0].bias[0] = f64::NAN;
                Ok((1.0, g))
            },
            0.1,
            0.5,
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(state.n, 0);
    }

    fn tensor(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(n, c, h, w, data).unwrap()
    }

    #[test]
    fn loss_closed_forms() {
        let targets = one_hot::<f64>(&[&[0, 1, 1, 0]], 2, 2, 2).unwrap();
        let uniform = tensor(1, 2, 2, 2, vec![0.5; 8]);
        assert!((cross_entropy(&uniform, &targets).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let perfect = targets.clone();
        assert!(cross_entropy(&perfect, &targets).unwrap() <= 1e-12);
        let g = cross_entropy_backward(&uniform, &targets).unwrap();
        // pixel 0 has true class 0
        assert!((g.at(0, 0, 0, 0) + 0.5 / 4.0).abs() < 1e-15);
        assert!((g.at(0, 1, 0, 0) - 0.5 / 4.0).abs() < 1e-15);
        assert!(cross_entropy_backward(&perfect, &targets)
            .unwrap()
            .data
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_rejects_bad_targets() {
        let probs = tensor(1, 2, 1, 1, vec![0.5, 0.5]);
        assert!(cross_entropy(&probs, &tensor(1, 2, 1, 1, vec![1.0, 1.0])).is_err());
        assert!(cross_entropy(&probs, &tensor(1, 2, 1, 1, vec![0.5, 0.5])).is_err());
        assert!(cross_entropy(&probs, &tensor(1, 2, 1, 2, vec![1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn loss_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h, w) = (3, 4, 5);
        let logits = tensor(
            n,
            2,
            h,
            w,
            (0..n * 2 * h * w).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let probs = softmax(&logits);
        let labels: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.random_range(0..2)).collect())
            .collect();
        let refs: Vec<&[u8]> = labels.iter().map(|l| l.as_slice()).collect();
        let targets = one_hot(&refs, 2, h, w).unwrap();
        let mut oracle = 0.0;
        for (s, l) in labels.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    oracle -= probs.at(s, l[y * w + x] as usize, y, x).ln();
                }
            }
        }
        oracle /= (n * h * w) as f64;
        assert!((cross_entropy(&probs, &targets).unwrap() - oracle).abs() < 1e-12);

        // gradient through softmax by central differences
        let g = cross_entropy_backward(&probs, &targets).unwrap();
        let h_step = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data[i] += h_step;
            let mut minus = logits.clone();
            minus.data[i] -= h_step;
            let fd = (cross_entropy(&softmax(&plus), &targets).unwrap()
                - cross_entropy(&softmax(&minus), &targets).unwrap())
                / (2.0 * h_step);
            let rel = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1e-8);
            assert!(rel <= 1e-6, "logit {i}: {fd} vs {}", g.data[i]);
        }
    }

    fn tiny_full_geometry() -> ArchConfig {
        ArchConfig {
            base_width: 2,
            ..ArchConfig::default()
        }
    }

    fn synthetic_images(count: usize, size: usize, seed: u64) -> Vec<TrainingImage<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let stripe = rng.random_range(0..size - 4);
                let labels = Plane::from_fn(
                    size,
                    size,
                    |_, x| {
                        if (stripe..stripe + 4).contains(&x) {
                            1.0
                        } else {
                            0.0
                        }
                    },
                );
                let green = Plane::from_fn(size, size, |y, x| labels.get(y, x) * 2.0 + rng.random_range(-0.3..0.3));
                let fov = FovMask::full(size, size);
                let stack = build_input_stack(&green, &fov, ChannelMode::D2).unwrap();
                TrainingImage { stack, labels, fov }
            })
            .collect()
    }

    #[test]
    fn patch_plan_sizes() {
        let dims = [(40, 50), (64, 64)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (aug, factor) in [
            (Augmentation::Rotations, 4),
            (Augmentation::None, 1),
            (Augmentation::Oversample, 4),
            (Augmentation::Elastic, 4),
        ] {
            let cfg = TrainConfig {
                patches_per_image: 5,
                augmentation: aug,
                ..TrainConfig::default()
            };
            let plan = plan_patches(&dims, &cfg, &mut rng).unwrap();
            assert_eq!(plan.len(), 10 * factor, "{aug:?}");
            assert_eq!(aug.multiplier(), factor);
            let elastic = plan.iter().filter(|p| p.elastic.is_some()).count();
            assert_eq!(elastic, if aug == Augmentation::Elastic { 30 } else { 0 });
        }
    }

    #[test]
    fn materialized_rotation_matches_rotated_pair() {
        let images = synthetic_images(1, 48, 1);
        let padded = vec![pad_for_training(&images[0].stack)];
        let base = PatchRef {
            image: 0,
            origin: (5, 9),
            rotation: Rotation::new(0),
            elastic: None,
        };
        let p0 = base.materialize(&padded, &images).unwrap();
        for r in Rotation::ALL {
            assert_eq!(base.rotated(r).materialize(&padded, &images).unwrap(), p0.rotated(r));
        }
    }

    #[test]
    fn training_is_deterministic_and_counts_updates() {
        let images = synthetic_images(2, 40, 2);
        let cfg = TrainConfig {
            epochs: 2,
            patches_per_image: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let arch = tiny_full_geometry();
        let mut seen = Vec::new();
        let a = train(&cfg, &arch, &images, |e, _| {
            seen.push(e.epoch);
            Ok(())
        })
        .unwrap();
        let b = train(&cfg, &arch, &images, |_, _| Ok(())).unwrap();
        assert_eq!(seen, vec![1, 2]);
        // 2 images × 3 originals × 4 rotations = 24 patches → 6 updates per epoch
        assert_eq!(a.updates, 12);
        assert_eq!(save_model(&a.params, &arch), save_model(&b.params, &arch));
        assert_eq!(a.log, b.log);
        let mut s = Schedule::new(&cfg).unwrap();
        for e in 1..=2 {
            s.begin_epoch(e).unwrap();
            for _ in 0..6 {
                s.after_update();
            }
            assert_eq!(a.log[e - 1].lr, s.eta);
        }
        let c = train(&TrainConfig { seed: 12, ..cfg }, &arch, &images, |_, _| Ok(())).unwrap();
        assert_ne!(save_model(&a.params, &arch), save_model(&c.params, &arch));
    }

    #[test]
    fn training_reduces_loss() {
        let images = synthetic_images(3, 48, 5);
        let cfg = TrainConfig {
            epochs: 3,
            patches_per_image: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tiny_full_geometry(), &images, |_, _| Ok(())).unwrap();
        assert!(out.log[2].mean_loss < out.log[0].mean_loss, "{:?}", out.log);
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let images = synthetic_images(1, 40, 0);
        let cfg = TrainConfig {
            epochs: 1,
            patches_per_image: 1,
            ..TrainConfig::default()
        };
        let arch = ArchConfig {
            encoder_convs: vec![2, 3],
            ..tiny_full_geometry()
        };
        assert!(matches!(
            train(&cfg, &arch, &images, |_, _| Ok(())),
            Err(Error::Architecture(_))
        ));
        assert!(train::<f64>(&cfg, &tiny_full_geometry(), &[], |_, _| Ok(())).is_err());
    }
}
