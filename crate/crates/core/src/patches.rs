//! Training patch sampling and augmentation, plus the overlap-tile layout
//! used at inference time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{pad_zero, FovMask, Plane};
use crate::scalar::Real;
use crate::wavelet::InputStack;

/// Side of the square output window.
pub const OUTPUT_SIZE: usize = 32;
/// Context added on every side of an output window.
pub const CONTEXT: usize = 28;
/// Side of the square input window.
pub const INPUT_SIZE: usize = OUTPUT_SIZE + 2 * CONTEXT;

/// Dense `channels × height × width` block, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Real = f64> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Block<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Block {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimensions(format!(
                "block {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Block {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Counter-clockwise rotation by a multiple of 90°.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Rotation(u8);

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation(0), Rotation(1), Rotation(2), Rotation(3)];

    pub fn new(quarter_turns: usize) -> Self {
        Rotation((quarter_turns % 4) as u8)
    }

    pub fn quarter_turns(self) -> usize {
        self.0 as usize
    }

    pub fn then(self, other: Rotation) -> Rotation {
        Rotation((self.0 + other.0) % 4)
    }

    pub fn inverse(self) -> Rotation {
        Rotation((4 - self.0) % 4)
    }
}

/// Rotates one row-major `h × w` grid; returns the data and its new (h, w).
pub fn rotate_grid<E: Copy>(src: &[E], h: usize, w: usize, r: Rotation) -> (Vec<E>, usize, usize) {
    match r.0 {
        0 => (src.to_vec(), h, w),
        // out[i][j] = in[j][w-1-i], out is w×h
        1 => {
            let mut out = Vec::with_capacity(src.len());
            for i in 0..w {
                for j in 0..h {
                    out.push(src[j * w + (w - 1 - i)]);
                }
            }
            (out, w, h)
        }
        2 => (src.iter().rev().copied().collect(), h, w),
        // out[i][j] = in[h-1-j][i]
        _ => {
            let mut out = Vec::with_capacity(src.len());
            for i in 0..w {
                for j in 0..h {
                    out.push(src[(h - 1 - j) * w + i]);
                }
            }
            (out, w, h)
        }
    }
}

pub fn rotate_block<T: Real>(block: &Block<T>, r: Rotation) -> Block<T> {
    let mut data = Vec::with_capacity(block.data.len());
    let (mut nh, mut nw) = (block.height, block.width);
    for c in 0..block.channels {
        let (rot, h, w) = rotate_grid(block.channel(c), block.height, block.width, r);
        data.extend(rot);
        nh = h;
        nw = w;
    }
    Block {
        channels: block.channels,
        height: nh,
        width: nw,
        data,
    }
}

/// An aligned training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair<T: Real = f64> {
    /// `C × 88 × 88` input window.
    pub input: Block<T>,
    /// `32 × 32` labels in {0, 1}, row-major.
    pub target: Vec<u8>,
    /// Top-left (row, col) of the output window in image coordinates.
    pub origin: (usize, usize),
}

/// Items that can be rotated as a unit (input and target together).
pub trait Rotatable: Clone {
    fn rotated(&self, r: Rotation) -> Self;
}

impl<T: Real> Rotatable for PatchPair<T> {
    fn rotated(&self, r: Rotation) -> Self {
        PatchPair {
            input: rotate_block(&self.input, r),
            target: rotate_grid(&self.target, OUTPUT_SIZE, OUTPUT_SIZE, r).0,
            origin: self.origin,
        }
    }
}

/// Stack zero-padded by [`CONTEXT`] on every side, the canvas training
/// windows are cut from.
#[derive(Debug, Clone)]
pub struct PaddedStack<T: Real = f64> {
    pub channels: Vec<Plane<T>>,
    /// Padding added before the first row / column of the source image.
    pub offset: usize,
}

impl<T: Real> PaddedStack<T> {
    pub fn new(stack: &InputStack<T>, left: usize, right: usize, top: usize, bottom: usize) -> Self {
        debug_assert_eq!(left, top);
        PaddedStack {
            channels: stack
                .channels
                .iter()
                .map(|p| pad_zero(p, left, right, top, bottom))
                .collect(),
            offset: left,
        }
    }

    /// `size × size` window with top-left at padded coordinates (row, col).
    pub fn window(&self, row: usize, col: usize, size: usize) -> Block<T> {
        let c = self.channels.len();
        let mut data = Vec::with_capacity(c * size * size);
        for p in &self.channels {
            for y in row..row + size {
                let start = y * p.width + col;
                data.extend_from_slice(&p.values[start..start + size]);
            }
        }
        Block {
            channels: c,
            height: size,
            width: size,
            data,
        }
    }
}

/// Uniformly random output-window origins fully inside a `width × height` image.
pub fn sample_origins<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if width < OUTPUT_SIZE || height < OUTPUT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {width}x{height} is smaller than the {OUTPUT_SIZE}x{OUTPUT_SIZE} output window"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("patch count must be at least 1".into()));
    }
    Ok((0..n)
        .map(|_| {
            let row = rng.random_range(0..=height - OUTPUT_SIZE);
            let col = rng.random_range(0..=width - OUTPUT_SIZE);
            (row, col)
        })
        .collect())
}

/// Cuts the input/target pair whose output window starts at `origin`.
pub fn cut_patch<T: Real>(padded: &PaddedStack<T>, labels: &Plane<T>, origin: (usize, usize)) -> PatchPair<T> {
    let (row, col) = origin;
    // padded coordinates of the input window: origin - CONTEXT + offset
    let input = padded.window(row + padded.offset - CONTEXT, col + padded.offset - CONTEXT, INPUT_SIZE);
    let mut target = Vec::with_capacity(OUTPUT_SIZE * OUTPUT_SIZE);
    for y in row..row + OUTPUT_SIZE {
        for x in col..col + OUTPUT_SIZE {
            target.push(u8::from(labels.get(y, x) > T::from_f64_lossy(0.5)));
        }
    }
    PatchPair { input, target, origin }
}

pub fn pad_for_training<T: Real>(stack: &InputStack<T>) -> PaddedStack<T> {
    PaddedStack::new(stack, CONTEXT, CONTEXT, CONTEXT, CONTEXT)
}

/// Samples `n` patch pairs with output windows uniformly placed inside the
/// image; context beyond the borders is zero.
pub fn sample_training_patches<T: Real, R: Rng + ?Sized>(
    stack: &InputStack<T>,
    labels: &Plane<T>,
    fov: &FovMask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PatchPair<T>>> {
    let (w, h) = (stack.width(), stack.height());
    if !labels.same_dims(w, h) || fov.width != w || fov.height != h {
        return Err(Error::Dimensions("stack, labels and FOV sizes differ".into()));
    }
    let origins = sample_origins(w, h, n, rng)?;
    let padded = pad_for_training(stack);
    Ok(origins.into_iter().map(|o| cut_patch(&padded, labels, o)).collect())
}

/// Replaces every item by its four rotations. With `consecutive`, each
/// item's orbit stays adjacent and only the orbits are shuffled; otherwise
/// the whole list is uniformly permuted.
pub fn augment_rotations<P: Rotatable, R: Rng + ?Sized>(items: &[P], rng: &mut R, consecutive: bool) -> Vec<P> {
    let mut out = Vec::with_capacity(items.len() * 4);
    for item in items {
        for r in Rotation::ALL {
            out.push(item.rotated(r));
        }
    }
    shuffle_grouped(&mut out, if consecutive { 4 } else { 1 }, rng);
    out
}

/// Shuffles `items` in place, moving runs of `group` adjacent items together.
pub fn shuffle_grouped<P, R: Rng + ?Sized>(items: &mut Vec<P>, group: usize, rng: &mut R) {
    if group <= 1 {
        items.shuffle(rng);
        return;
    }
    let n_groups = items.len().div_ceil(group);
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(rng);
    let mut slots: Vec<Option<P>> = items.drain(..).map(Some).collect();
    for g in order {
        let end = ((g + 1) * group).min(slots.len());
        for slot in &mut slots[g * group..end] {
            items.push(slot.take().expect("each group moved once"));
        }
    }
}

// ---------------------------------------------------------------------------
// Elastic deformation
// ---------------------------------------------------------------------------

/// Unit-sum discrete Gaussian truncated at 3σ.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable smoothing with edge clamping.
fn smooth(field: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Smoothed random displacement field `(dy, dx)` for an `h × w` grid:
/// uniform noise in [−1, 1], Gaussian-smoothed, scaled by `alpha`.
pub fn displacement_field<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let dy: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let dx: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let k = gaussian_kernel(sigma);
    let dy = smooth(&dy, h, w, &k).into_iter().map(|v| v * alpha).collect();
    let dx = smooth(&dx, h, w, &k).into_iter().map(|v| v * alpha).collect();
    (dy, dx)
}

fn bilinear<T: Real>(grid: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let sample = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            grid[yy as usize * w + xx as usize].to_f64_lossy()
        }
    };
    let mut v = 0.0;
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
            if wx == 0.0 {
                continue;
            }
            v += wy * wx * sample(yy, xx);
        }
    }
    T::from_f64_lossy(v)
}

/// Elastic deformation: one displacement field warps every input channel
/// (bilinear, zero outside) and the target (nearest label, clamped to the
/// output window). The target grid sits at offset [`CONTEXT`] in the input grid.
pub fn elastic_deform<T: Real, R: Rng + ?Sized>(
    patch: &PatchPair<T>,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    if !(alpha > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "elastic parameters must be positive (alpha {alpha}, sigma {sigma})"
        )));
    }
    let (h, w) = (patch.input.height, patch.input.width);
    let (dy, dx) = displacement_field(h, w, alpha, sigma, rng);
    let mut input = Block::zeros(patch.input.channels, h, w);
    for c in 0..patch.input.channels {
        let src = patch.input.channel(c);
        let dst = input.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                dst[i] = bilinear(src, h, w, y as f64 + dy[i], x as f64 + dx[i]);
            }
        }
    }
    let mut target = vec![0u8; OUTPUT_SIZE * OUTPUT_SIZE];
    let max = (OUTPUT_SIZE - 1) as f64;
    for ty in 0..OUTPUT_SIZE {
        for tx in 0..OUTPUT_SIZE {
            let i = (ty + CONTEXT) * w + tx + CONTEXT;
            let sy = (ty as f64 + dy[i]).round().clamp(0.0, max) as usize;
            let sx = (tx as f64 + dx[i]).round().clamp(0.0, max) as usize;
            target[ty * OUTPUT_SIZE + tx] = patch.target[sy * OUTPUT_SIZE + sx];
        }
    }
    Ok(PatchPair {
        input,
        target,
        origin: patch.origin,
    })
}

/// Deforms with a generator derived from `seed`, so a lazily materialized
/// patch reproduces the same deformation every epoch.
pub fn elastic_deform_seeded<T: Real>(patch: &PatchPair<T>, alpha: f64, sigma: f64, seed: u64) -> Result<PatchPair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    elastic_deform(patch, alpha, sigma, &mut rng)
}

// ---------------------------------------------------------------------------
// Overlap-tile layout
// ---------------------------------------------------------------------------

/// Disjoint 32×32 output tiles covering the image padded up to a multiple of 32.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub original_width: usize,
    pub original_height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
    pub context: usize,
    /// Row-major (row, col) of each output tile in padded coordinates.
    pub origins: Vec<(usize, usize)>,
}

pub fn plan_tiles(width: usize, height: usize) -> Result<TileLayout> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("image must be at least 1x1".into()));
    }
    let padded_width = width.div_ceil(OUTPUT_SIZE) * OUTPUT_SIZE;
    let padded_height = height.div_ceil(OUTPUT_SIZE) * OUTPUT_SIZE;
    let origins = (0..padded_height)
        .step_by(OUTPUT_SIZE)
        .flat_map(|r| (0..padded_width).step_by(OUTPUT_SIZE).map(move |c| (r, c)))
        .collect();
    Ok(TileLayout {
        original_width: width,
        original_height: height,
        padded_width,
        padded_height,
        context: CONTEXT,
        origins,
    })
}

impl TileLayout {
    pub fn tile_count(&self) -> usize {
        self.origins.len()
    }

    /// Zero-pads the stack to the canvas plus the context margin on every side.
    pub fn pad_stack<T: Real>(&self, stack: &InputStack<T>) -> Result<PaddedStack<T>> {
        if stack.width() != self.original_width || stack.height() != self.original_height {
            return Err(Error::Dimensions(format!(
                "stack {}x{} does not match layout {}x{}",
                stack.width(),
                stack.height(),
                self.original_width,
                self.original_height
            )));
        }
        Ok(PaddedStack::new(
            stack,
            self.context,
            self.context + self.padded_width - self.original_width,
            self.context,
            self.context + self.padded_height - self.original_height,
        ))
    }
}

/// Input window (C × 88 × 88) centred on output tile `index`.
pub fn extract_tile<T: Real>(padded: &PaddedStack<T>, layout: &TileLayout, index: usize) -> Result<Block<T>> {
    let &(row, col) = layout.origins.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "tile index {index} out of range ({} tiles)",
            layout.tile_count()
        ))
    })?;
    let expected_w = layout.padded_width + 2 * layout.context;
    if padded.offset != layout.context || padded.channels.iter().any(|p| p.width != expected_w) {
        return Err(Error::Dimensions("padded stack does not match the tile layout".into()));
    }
    Ok(padded.window(row, col, OUTPUT_SIZE + 2 * layout.context))
}

/// Places `K × 32 × 32` tiles into K full-size planes cropped to the
/// original dimensions. Also returns the per-pixel write count.
pub fn assemble_audited<T: Real>(tiles: &[Block<T>], layout: &TileLayout) -> Result<(Vec<Plane<T>>, Vec<u32>)> {
    if tiles.len() != layout.tile_count() {
        return Err(Error::InvalidArgument(format!(
            "{} tiles supplied for a layout of {}",
            tiles.len(),
            layout.tile_count()
        )));
    }
    let k = tiles.first().map_or(0, |t| t.channels);
    if tiles
        .iter()
        .any(|t| t.channels != k || t.height != OUTPUT_SIZE || t.width != OUTPUT_SIZE)
    {
        return Err(Error::Dimensions("tiles must all be K x 32 x 32".into()));
    }
    let (w, h) = (layout.original_width, layout.original_height);
    let mut planes = vec![Plane::zeros(w, h); k];
    let mut writes = vec![0u32; w * h];
    for (tile, &(row, col)) in tiles.iter().zip(&layout.origins) {
        for ty in 0..OUTPUT_SIZE {
            let y = row + ty;
            if y >= h {
                break;
            }
            for tx in 0..OUTPUT_SIZE {
                let x = col + tx;
                if x >= w {
                    break;
                }
                for (c, plane) in planes.iter_mut().enumerate() {
                    plane.values[y * w + x] = tile.get(c, ty, tx);
                }
                writes[y * w + x] += 1;
            }
        }
    }
    Ok((planes, writes))
}

pub fn assemble<T: Real>(tiles: &[Block<T>], layout: &TileLayout) -> Result<Vec<Plane<T>>> {
    assemble_audited(tiles, layout).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::ChannelMode;
    use proptest::prelude::*;
    use rand::Rng;

    fn block(c: usize, h: usize, w: usize) -> Block<f64> {
        Block::new(c, h, w, (0..c * h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn rotate_2x2_oracle() {
        let b = Block::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(); // a b / c d
        assert_eq!(rotate_block(&b, Rotation::new(1)).data, vec![2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rotate_block(&b, Rotation::new(0)), b);
    }

    #[test]
    fn rotation_of_rectangle_matches_index_oracle() {
        let b = block(2, 3, 5);
        for r in Rotation::ALL {
            let out = rotate_block(&b, r);
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..5 {
                        // position of (y, x) after r counter-clockwise quarter turns
                        let (mut yy, mut xx, mut hh, mut ww) = (y, x, 3, 5);
                        for _ in 0..r.quarter_turns() {
                            let ny = ww - 1 - xx;
                            let nx = yy;
                            yy = ny;
                            xx = nx;
                            std::mem::swap(&mut hh, &mut ww);
                        }
                        assert_eq!(out.get(c, yy, xx), b.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn single_window_on_minimal_image() {
        let stack = InputStack {
            channels: vec![Plane::from_fn(32, 32, |y, x| (y + x) as f64)],
            mode: ChannelMode::Base,
        };
        let labels = Plane::zeros(32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_training_patches(&stack, &labels, &FovMask::full(32, 32), 1, &mut rng).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].origin, (0, 0));
        assert_eq!(p[0].input.get(0, CONTEXT, CONTEXT), 0.0);
        assert_eq!(p[0].input.get(0, CONTEXT + 3, CONTEXT + 4), 7.0);
        assert_eq!(p[0].input.get(0, 0, 0), 0.0);
        let small = InputStack {
            channels: vec![Plane::<f64>::zeros(31, 40)],
            mode: ChannelMode::Base,
        };
        assert!(sample_training_patches(&small, &Plane::zeros(31, 40), &FovMask::full(31, 40), 1, &mut rng).is_err());
    }

    #[test]
    fn patch_input_and_target_are_aligned() {
        let img = Plane::from_fn(70, 50, |y, x| (y * 100 + x) as f64);
        let labels = Plane::from_fn(70, 50, |y, x| ((y + x) % 2) as f64);
        let stack = InputStack {
            channels: vec![img.clone()],
            mode: ChannelMode::Base,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in sample_training_patches(&stack, &labels, &FovMask::full(70, 50), 20, &mut rng).unwrap() {
            let (r, c) = p.origin;
            assert!(r + 32 <= 50 && c + 32 <= 70);
            assert_eq!(p.input.get(0, CONTEXT + 5, CONTEXT + 7), img.get(r + 5, c + 7));
            assert_eq!(p.target[5 * 32 + 7], ((r + 5 + c + 7) % 2) as u8);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_origins(500, 500, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_origins(500, 500, 50, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = sample_origins(500, 500, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            sample_origins(565, 584, 2750, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap()
                .len(),
            2750
        );
    }

    fn toy_pair(seed: u64) -> PatchPair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PatchPair {
            input: Block::new(
                2,
                INPUT_SIZE,
                INPUT_SIZE,
                (0..2 * INPUT_SIZE * INPUT_SIZE).map(|_| rng.random()).collect(),
            )
            .unwrap(),
            target: (0..OUTPUT_SIZE * OUTPUT_SIZE)
                .map(|_| rng.random_range(0..2u8))
                .collect(),
            origin: (seed as usize, 0),
        }
    }

    #[test]
    fn augmentation_orbits() {
        let items: Vec<_> = (0..5).map(toy_pair).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_rotations(&items, &mut rng, false);
        assert_eq!(out.len(), 20);
        for it in &items {
            for r in Rotation::ALL {
                let want = it.rotated(r);
                assert_eq!(out.iter().filter(|p| **p == want).count(), 1);
            }
        }
        let cons = augment_rotations(&items, &mut rng, true);
        for chunk in cons.chunks(4) {
            let base = &chunk[0];
            for (i, p) in chunk.iter().enumerate() {
                assert_eq!(p.origin, base.origin);
                assert_eq!(*p, base.rotated(Rotation::new(i)));
            }
        }
    }

    #[test]
    fn elastic_limits() {
        let p = toy_pair(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let same = elastic_deform(&p, 1e-12, 1.5, &mut rng).unwrap();
        for (a, b) in same.input.data.iter().zip(&p.input.data) {
            assert!((a - b).abs() <= 1e-9);
        }
        assert_eq!(same.target, p.target);
        assert!(elastic_deform(&p, 0.0, 1.5, &mut rng).is_err());
        let d1 = elastic_deform_seeded(&p, 8.0, 1.5, 42).unwrap();
        let d2 = elastic_deform_seeded(&p, 8.0, 1.5, 42).unwrap();
        assert_eq!(d1, d2);
        assert!(d1.target.iter().all(|&v| v <= 1));
        assert_eq!(d1.input.data.len(), p.input.data.len());
        let (dy, dx) = displacement_field(INPUT_SIZE, INPUT_SIZE, 8.0, 1.5, &mut ChaCha8Rng::seed_from_u64(42));
        let mean: f64 = dy.iter().chain(&dx).map(|v| v.abs()).sum::<f64>() / (2 * dy.len()) as f64;
        assert!(mean > 0.0);
    }

    #[test]
    fn tile_plans() {
        let l = plan_tiles(565, 584).unwrap();
        assert_eq!((l.padded_width, l.padded_height), (576, 608));
        assert_eq!(l.tile_count(), 342);
        let l = plan_tiles(32, 32).unwrap();
        assert_eq!(l.origins, vec![(0, 0)]);
        let l = plan_tiles(33, 32).unwrap();
        assert_eq!((l.padded_width, l.padded_height, l.tile_count()), (64, 32, 2));
    }

    #[test]
    fn tiling_partitions_canvas_exhaustively() {
        for w in 1..=200 {
            for h in (1..=200).step_by(7).chain([200]) {
                let l = plan_tiles(w, h).unwrap();
                let mut hits = vec![0u8; l.padded_width * l.padded_height];
                for &(r, c) in &l.origins {
                    assert_eq!((r % 32, c % 32), (0, 0));
                    for y in r..r + 32 {
                        for x in c..c + 32 {
                            hits[y * l.padded_width + x] += 1;
                        }
                    }
                }
                assert!(hits.iter().all(|&v| v == 1), "{w}x{h}");
            }
        }
    }

    #[test]
    fn tile_windows_overlap_by_56() {
        let stack = InputStack {
            channels: vec![Plane::from_fn(64, 32, |y, x| (y * 64 + x) as f64 + 1.0)],
            mode: ChannelMode::Base,
        };
        let l = plan_tiles(64, 32).unwrap();
        let p = l.pad_stack(&stack).unwrap();
        let t0 = extract_tile(&p, &l, 0).unwrap();
        let t1 = extract_tile(&p, &l, 1).unwrap();
        assert_eq!(t0.get(0, 0, 0), 0.0);
        assert_eq!(t0.get(0, CONTEXT, CONTEXT), 1.0);
        for y in 0..INPUT_SIZE {
            for x in 0..56 {
                assert_eq!(t0.get(0, y, x + 32), t1.get(0, y, x));
            }
        }
        assert!(extract_tile(&p, &l, 2).is_err());
    }

    #[test]
    fn assemble_errors_and_constants() {
        let l = plan_tiles(40, 40).unwrap();
        let tiles = vec![Block::new(2, 32, 32, vec![0.25; 2048]).unwrap(); 4];
        let (planes, writes) = assemble_audited(&tiles, &l).unwrap();
        assert!(planes.iter().all(|p| p.values.iter().all(|&v| v == 0.25)));
        assert!(writes.iter().all(|&c| c == 1));
        assert!(assemble(&tiles[..3], &l).is_err());
    }

    proptest! {
        #[test]
        fn rotations_form_z4(a in 0usize..4, b in 0usize..4, h in 1usize..6, w in 1usize..6) {
            let blk = block(2, h, w);
            let lhs = rotate_block(&rotate_block(&blk, Rotation::new(b)), Rotation::new(a));
            prop_assert_eq!(lhs, rotate_block(&blk, Rotation::new(a + b)));
            let back = rotate_block(&rotate_block(&blk, Rotation::new(a)), Rotation::new(a).inverse());
            prop_assert_eq!(back, blk);
        }
    }
}
