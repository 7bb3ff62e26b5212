//! Parameters, forward pass with trace, and the exact backward pass.

use rand::Rng;

use super::arch::ArchConfig;
use super::layers::{
    apply_dropout_mask, conv2d_backward, conv2d_valid, crop_concat, crop_concat_backward, dropout, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, upsample_nearest2x, upsample_nearest2x_backward, ConvParams, DropoutMask,
    PoolIndices,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// All learnable tensors, one entry per convolution in
/// [`ArchConfig::conv_shapes`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    pub layers: Vec<ConvParams<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(config: &ArchConfig) -> Self {
        ParamSet {
            layers: config
                .conv_shapes()
                .into_iter()
                .map(|(o, i, k)| ConvParams::zeros(o, i, k))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| ConvParams::zeros(l.out_channels, l.in_channels, l.kernel))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weight and bias buffers in a fixed order.
    pub fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn matches(&self, config: &ArchConfig) -> bool {
        let shapes = config.conv_shapes();
        shapes.len() == self.layers.len()
            && shapes.iter().zip(&self.layers).all(|(&(o, i, k), l)| {
                (l.out_channels, l.in_channels, l.kernel) == (o, i, k)
                    && l.weight.len() == o * i * k * k
                    && l.bias.len() == o
            })
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &ParamSet<T>) {
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += alpha * s);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= alpha);
        }
    }
}

pub const INIT_BIAS: f64 = 0.1;

/// Xavier-uniform kernels on `±√(6 / (fan_in + fan_out))`, every bias 0.1.
pub fn xavier_init<T: Real, R: Rng + ?Sized>(config: &ArchConfig, rng: &mut R) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut params = ParamSet::zeros(config);
    for layer in &mut params.layers {
        let limit = (6.0 / (layer.fan_in() + layer.fan_out()) as f64).sqrt();
        for w in &mut layer.weight {
            *w = T::from_f64_lossy(rng.random_range(-limit..=limit));
        }
        layer.bias.fill(T::from_f64_lossy(INIT_BIAS));
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Input and output of one convolution (output after ReLU, except for the head).
#[derive(Debug, Clone)]
pub struct ConvRecord<T: Real> {
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real = f64> {
    pub mode: Mode,
    pub convs: Vec<ConvRecord<T>>,
    /// One mask per block: encoder blocks, bottleneck, decoder blocks.
    pub dropout_masks: Vec<DropoutMask<T>>,
    pub pools: Vec<PoolIndices>,
    /// Shapes of the encoder outputs fed to the skip connections.
    pub skip_shapes: Vec<[usize; 4]>,
    /// Channel count of the upsampled map entering each decoder concat.
    pub up_channels: Vec<usize>,
}

fn shape_err(layer: &str, e: Error) -> Error {
    match e {
        Error::Dimensions(detail) => Error::Shape {
            layer: layer.to_string(),
            detail,
        },
        other => other,
    }
}

struct Forward<'a, T: Real, R: Rng + ?Sized> {
    params: &'a ParamSet<T>,
    config: &'a ArchConfig,
    rng: &'a mut R,
    trace: ForwardTrace<T>,
    next_conv: usize,
}

impl<T: Real, R: Rng + ?Sized> Forward<'_, T, R> {
    fn convs(&mut self, mut x: Tensor<T>, n: usize, block: &str) -> Result<Tensor<T>> {
        for j in 0..n {
            let layer = &self.params.layers[self.next_conv];
            let y = conv2d_valid(&x, layer).map_err(|e| shape_err(&format!("{block}.conv{j}"), e))?;
            let y = relu(&y);
            self.next_conv += 1;
            self.trace.convs.push(ConvRecord {
                input: x,
                output: y.clone(),
            });
            x = y;
        }
        Ok(x)
    }

    fn drop(&mut self, x: Tensor<T>, p: f64) -> Result<Tensor<T>> {
        let training = self.trace.mode == Mode::Train;
        let (y, mask) = dropout(&x, p, self.config.dropout_kind, self.rng, training)?;
        if training {
            self.trace.dropout_masks.push(mask);
        }
        Ok(y)
    }
}

/// Runs the network on an `N × C × S × S` batch, `S = config.input_size()`.
/// Returns `N × K × out × out` logits and the trace for [`backward`].
pub fn forward<T: Real, R: Rng + ?Sized>(
    params: &ParamSet<T>,
    config: &ArchConfig,
    batch: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    if !params.matches(config) {
        return Err(Error::Architecture("parameters do not match the architecture".into()));
    }
    let s = config.input_size();
    if batch.c != config.in_channels || batch.h != s || batch.w != s {
        return Err(Error::Shape {
            layer: "input".into(),
            detail: format!(
                "expected N x {} x {s} x {s}, got {:?}",
                config.in_channels,
                batch.shape()
            ),
        });
    }
    let depth = config.depth();
    let mut f = Forward {
        params,
        config,
        rng,
        trace: ForwardTrace {
            mode,
            convs: Vec::new(),
            dropout_masks: Vec::new(),
            pools: Vec::new(),
            skip_shapes: Vec::new(),
            up_channels: Vec::new(),
        },
        next_conv: 0,
    };
    let mut skips = Vec::with_capacity(depth);
    let mut x = batch.clone();
    for (i, &n) in config.encoder_convs.iter().enumerate() {
        x = f.convs(x, n, &format!("encoder{i}"))?;
        x = f.drop(x, config.dropout_p)?;
        let (pooled, idx) = maxpool2x2(&x).map_err(|e| shape_err(&format!("pool{i}"), e))?;
        f.trace.pools.push(idx);
        f.trace.skip_shapes.push(x.shape());
        skips.push(x);
        x = pooled;
    }
    x = f.convs(x, config.bottleneck_convs, "bottleneck")?;
    x = f.drop(x, config.dropout_p)?;
    for (i, &n) in config.decoder_convs.iter().enumerate() {
        let level = depth - 1 - i;
        let up = upsample_nearest2x(&x);
        f.trace.up_channels.push(up.c);
        let skip = skips.pop().expect("one skip per level");
        x = crop_concat(&skip, &up).map_err(|e| shape_err(&format!("concat{level}"), e))?;
        x = f.convs(x, n, &format!("decoder{level}"))?;
        let p = if i + 1 == depth {
            config.dropout_p_last
        } else {
            config.dropout_p
        };
        x = f.drop(x, p)?;
    }
    let head = &params.layers[f.next_conv];
    let logits = conv2d_valid(&x, head).map_err(|e| shape_err("head", e))?;
    f.trace.convs.push(ConvRecord {
        input: x,
        output: logits.clone(),
    });
    Ok((logits, f.trace))
}

/// Exact gradient of a scalar loss with respect to every parameter, given
/// the gradient with respect to the logits.
pub fn backward<T: Real>(
    trace: &ForwardTrace<T>,
    config: &ArchConfig,
    params: &ParamSet<T>,
    grad_logits: &Tensor<T>,
) -> Result<ParamSet<T>> {
    let depth = config.depth();
    let n_convs = config.conv_shapes().len();
    if trace.mode != Mode::Train {
        return Err(Error::InvalidArgument("backward needs a train-mode trace".into()));
    }
    if !params.matches(config) || trace.convs.len() != n_convs || trace.dropout_masks.len() != 2 * depth + 1 {
        return Err(Error::Architecture(
            "trace or parameters do not match the architecture".into(),
        ));
    }
    let head = trace.convs.last().expect("head record");
    if grad_logits.shape() != head.output.shape() {
        return Err(Error::Dimensions(format!(
            "logit gradient {:?} vs logits {:?}",
            grad_logits.shape(),
            head.output.shape()
        )));
    }
    let mut grads = params.zeros_like();
    let mut conv_idx = n_convs - 1;
    let mut mask_idx = trace.dropout_masks.len();

    let conv_back = |idx: usize,
                     g: Tensor<T>,
                     apply_relu: bool,
                     need_input: bool,
                     grads: &mut ParamSet<T>|
     -> Result<Option<Tensor<T>>> {
        let rec = &trace.convs[idx];
        let g = if apply_relu { relu_backward(&rec.output, &g) } else { g };
        let cg = conv2d_backward(&rec.input, &params.layers[idx], &g, need_input)?;
        grads.layers[idx].weight = cg.weight;
        grads.layers[idx].bias = cg.bias;
        Ok(cg.input)
    };

    let mut g = conv_back(conv_idx, grad_logits.clone(), false, true, &mut grads)?.expect("input grad");
    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];

    for i in (0..depth).rev() {
        let level = depth - 1 - i;
        mask_idx -= 1;
        g = apply_dropout_mask(&g, &trace.dropout_masks[mask_idx]);
        for _ in 0..config.decoder_convs[i] {
            conv_idx -= 1;
            g = conv_back(conv_idx, g, true, true, &mut grads)?.expect("input grad");
        }
        let (gs, gu) = crop_concat_backward(&g, trace.skip_shapes[level], trace.up_channels[i])?;
        skip_grads[level] = Some(gs);
        g = upsample_nearest2x_backward(&gu);
    }

    mask_idx -= 1;
    g = apply_dropout_mask(&g, &trace.dropout_masks[mask_idx]);
    for _ in 0..config.bottleneck_convs {
        conv_idx -= 1;
        g = conv_back(conv_idx, g, true, true, &mut grads)?.expect("input grad");
    }

    for level in (0..depth).rev() {
        let mut gb = maxpool2x2_backward(&trace.pools[level], &g);
        let gs = skip_grads[level].take().expect("skip gradient recorded");
        gb.data.iter_mut().zip(&gs.data).for_each(|(a, &b)| *a += b);
        mask_idx -= 1;
        g = apply_dropout_mask(&gb, &trace.dropout_masks[mask_idx]);
        for j in 0..config.encoder_convs[level] {
            conv_idx -= 1;
            let first = level == 0 && j + 1 == config.encoder_convs[level];
            match conv_back(conv_idx, g.clone(), true, !first, &mut grads)? {
                Some(next) => g = next,
                None => debug_assert_eq!(conv_idx, 0),
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_output_shape() {
        let cfg = ArchConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params: ParamSet<f64> = xavier_init(&cfg, &mut rng).unwrap();
        let x = Tensor::new(
            1,
            4,
            88,
            88,
            (0..4 * 88 * 88).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect(),
        )
        .unwrap();
        let (logits, _) = forward(&params, &cfg, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(logits.shape(), [1, 2, 32, 32]);
        let (again, _) = forward(&params, &cfg, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(logits, again);
        let bad = Tensor::zeros(1, 3, 88, 88);
        assert!(matches!(
            forward(&params, &cfg, &bad, Mode::Infer, &mut rng),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_weights_give_constant_logits() {
        let cfg = ArchConfig::default();
        let mut params: ParamSet<f64> = ParamSet::zeros(&cfg);
        for l in &mut params.layers {
            l.bias.fill(0.1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(
            2,
            4,
            88,
            88,
            (0..2 * 4 * 88 * 88).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (logits, _) = forward(&params, &cfg, &x, Mode::Infer, &mut rng).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.1));
        let probs = softmax(&logits);
        assert!(probs.data.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn xavier_statistics_and_determinism() {
        let cfg = ArchConfig {
            base_width: 64,
            ..ArchConfig::default()
        };
        let a: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|&v| v == 0.1)));
        // second conv of the first block is 64×64×3×3
        let l = &a.layers[1];
        assert_eq!((l.out_channels, l.in_channels), (64, 64));
        let n = l.weight.len() as f64;
        let mean = l.weight.iter().sum::<f64>() / n;
        let var = l.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / (l.fan_in() + l.fan_out()) as f64;
        assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    }

    #[test]
    fn infer_ignores_dropout_probability() {
        let cfg = ArchConfig::default();
        let params: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let x = Tensor::new(
            1,
            4,
            88,
            88,
            (0..4 * 88 * 88).map(|i| (i as f64 * 0.01).sin()).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = forward(&params, &cfg, &x, Mode::Infer, &mut rng).unwrap();
        let other = ArchConfig {
            dropout_p: 0.7,
            dropout_p_last: 0.5,
            ..cfg
        };
        let (b, _) = forward(&params, &other, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_gradients() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params: ParamSet<f64> = xavier_init(&cfg, &mut rng).unwrap();
        let s = cfg.input_size();
        let x = Tensor::new(
            2,
            2,
            s,
            s,
            (0..2 * 2 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (logits, trace) = forward(&params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        let g = backward(
            &trace,
            &cfg,
            &params,
            &Tensor::zeros(logits.n, logits.c, logits.h, logits.w),
        )
        .unwrap();
        assert!(g.slices().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn head_bias_gradient_is_spatial_sum() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params: ParamSet<f64> = xavier_init(&cfg, &mut rng).unwrap();
        let s = cfg.input_size();
        let x = Tensor::new(
            2,
            2,
            s,
            s,
            (0..2 * 2 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (logits, trace) = forward(&params, &cfg, &x, Mode::Train, &mut rng).unwrap();
        let gl = Tensor::new(
            logits.n,
            logits.c,
            logits.h,
            logits.w,
            (0..logits.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let g = backward(&trace, &cfg, &params, &gl).unwrap();
        let head = g.layers.last().unwrap();
        let hw = logits.h * logits.w;
        for k in 0..2 {
            let want: f64 = (0..logits.n)
                .map(|n| gl.sample(n)[k * hw..(k + 1) * hw].iter().sum::<f64>())
                .sum();
            assert!((head.bias[k] - want).abs() < 1e-12);
        }
    }

    fn tiny() -> ArchConfig {
        ArchConfig {
            in_channels: 2,
            base_width: 2,
            encoder_convs: vec![1],
            bottleneck_convs: 1,
            decoder_convs: vec![1],
            output_size: 8,
            ..ArchConfig::default()
        }
    }
}
