//! Patch and image inference, including rotation-averaged prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{FovMask, Plane};
use crate::network::{forward, layers::softmax, load_model, save_model, ArchConfig, Mode, ParamSet, Tensor};
use crate::patches::{
    assemble_audited, extract_tile, plan_tiles, rotate_block, Block, Rotation, INPUT_SIZE, OUTPUT_SIZE,
};
use crate::scalar::Real;
use crate::wavelet::InputStack;

/// Tiles evaluated per forward pass during image segmentation.
const TILE_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionMode {
    Simple,
    /// Average over the four rotations of the input.
    Multiple,
}

impl PredictionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simple" => Some(PredictionMode::Simple),
            "multiple" => Some(PredictionMode::Multiple),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PredictionMode::Simple => "simple",
            PredictionMode::Multiple => "multiple",
        }
    }
}

/// A trained network with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f64> {
    pub params: ParamSet<T>,
    pub config: ArchConfig,
}

impl<T: Real> Model<T> {
    pub fn new(params: ParamSet<T>, config: ArchConfig) -> Result<Self> {
        config.validate()?;
        if !params.matches(&config) {
            return Err(Error::Architecture("parameters do not match the architecture".into()));
        }
        Ok(Model { params, config })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        save_model(&self.params, &self.config)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, config) = load_model(bytes)?;
        Model::new(params, config)
    }

    /// Class probabilities for a batch of inputs.
    fn probabilities(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        // inference never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = forward(&self.params, &self.config, batch, Mode::Infer, &mut rng)?;
        Ok(softmax(&logits))
    }

    fn check_input(&self, input: &Block<T>) -> Result<()> {
        let s = self.config.input_size();
        if input.channels != self.config.in_channels || input.height != s || input.width != s {
            return Err(Error::Dimensions(format!(
                "model expects {} x {s} x {s} input, got {} x {} x {}",
                self.config.in_channels, input.channels, input.height, input.width
            )));
        }
        Ok(())
    }

    fn predict_blocks(&self, inputs: &[Block<T>], mode: PredictionMode) -> Result<Vec<Block<T>>> {
        for b in inputs {
            self.check_input(b)?;
        }
        match mode {
            PredictionMode::Simple => {
                let refs: Vec<&Block<T>> = inputs.iter().collect();
                let probs = self.probabilities(&Tensor::from_blocks(&refs)?)?;
                Ok((0..inputs.len()).map(|i| probs.to_block(i)).collect())
            }
            PredictionMode::Multiple => {
                let rotated: Vec<Block<T>> = inputs
                    .iter()
                    .flat_map(|b| Rotation::ALL.map(|r| rotate_block(b, r)))
                    .collect();
                let refs: Vec<&Block<T>> = rotated.iter().collect();
                let probs = self.probabilities(&Tensor::from_blocks(&refs)?)?;
                let quarter = T::from_f64_lossy(0.25);
                Ok((0..inputs.len())
                    .map(|i| {
                        let mut acc: Option<Block<T>> = None;
                        for r in Rotation::ALL {
                            let aligned = rotate_block(&probs.to_block(4 * i + r.quarter_turns()), r.inverse());
                            match acc.as_mut() {
                                None => acc = Some(aligned),
                                Some(a) => a.data.iter_mut().zip(&aligned.data).for_each(|(x, &y)| *x += y),
                            }
                        }
                        let mut out = acc.expect("four rotations");
                        out.data.iter_mut().for_each(|v| *v *= quarter);
                        out
                    })
                    .collect())
            }
        }
    }

    /// `K × out × out` class probabilities of one input window.
    pub fn predict_patch(&self, input: &Block<T>) -> Result<Block<T>> {
        Ok(self
            .predict_blocks(std::slice::from_ref(input), PredictionMode::Simple)?
            .remove(0))
    }

    /// Average of the predictions for the four rotations of the input,
    /// each rotated back into the input frame.
    pub fn predict_patch_multi(&self, input: &Block<T>) -> Result<Block<T>> {
        Ok(self
            .predict_blocks(std::slice::from_ref(input), PredictionMode::Multiple)?
            .remove(0))
    }

    pub fn predict(&self, input: &Block<T>, mode: PredictionMode) -> Result<Block<T>> {
        match mode {
            PredictionMode::Simple => self.predict_patch(input),
            PredictionMode::Multiple => self.predict_patch_multi(input),
        }
    }
}

/// Per-class probability planes at the original image size.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T: Real = f64> {
    pub planes: Vec<Plane<T>>,
    pub fov: FovMask,
}

impl<T: Real> ProbabilityMap<T> {
    /// Probability of the vessel class (class 1).
    pub fn vessel(&self) -> &Plane<T> {
        &self.planes[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation<T: Real = f64> {
    pub probabilities: ProbabilityMap<T>,
    /// 1 where the vessel probability reaches the threshold, else 0.
    pub binary: Plane<T>,
    /// Number of times each pixel was written during assembly.
    pub writes: Vec<u32>,
}

/// `1` where `p ≥ threshold`.
pub fn binarize<T: Real>(vessel: &Plane<T>, threshold: f64) -> Plane<T> {
    let t = T::from_f64_lossy(threshold);
    vessel.map(|p| if p >= t { T::one() } else { T::zero() })
}

/// Tiles the image, predicts every tile and reassembles the maps.
pub fn segment_image<T: Real>(
    model: &Model<T>,
    stack: &InputStack<T>,
    fov: &FovMask,
    mode: PredictionMode,
    threshold: f64,
) -> Result<Segmentation<T>> {
    if model.config.input_size() != INPUT_SIZE || model.config.output_size != OUTPUT_SIZE {
        return Err(Error::Architecture(format!(
            "image tiling needs a {INPUT_SIZE} -> {OUTPUT_SIZE} architecture"
        )));
    }
    if model.config.classes != 2 {
        return Err(Error::Architecture("segmentation needs exactly two classes".into()));
    }
    if stack.channel_count() != model.config.in_channels {
        return Err(Error::Dimensions(format!(
            "stack has {} channels, model expects {}",
            stack.channel_count(),
            model.config.in_channels
        )));
    }
    if fov.width != stack.width() || fov.height != stack.height() {
        return Err(Error::Dimensions("FOV and stack sizes differ".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let layout = plan_tiles(stack.width(), stack.height())?;
    let padded = layout.pad_stack(stack)?;
    let mut tiles = Vec::with_capacity(layout.tile_count());
    let indices: Vec<usize> = (0..layout.tile_count()).collect();
    for chunk in indices.chunks(TILE_BATCH) {
        let inputs = chunk
            .iter()
            .map(|&i| extract_tile(&padded, &layout, i))
            .collect::<Result<Vec<_>>>()?;
        tiles.extend(model.predict_blocks(&inputs, mode)?);
    }
    let (planes, writes) = assemble_audited(&tiles, &layout)?;
    let binary = binarize(&planes[1], threshold);
    Ok(Segmentation {
        probabilities: ProbabilityMap {
            planes,
            fov: fov.clone(),
        },
        binary,
        writes,
    })
}
