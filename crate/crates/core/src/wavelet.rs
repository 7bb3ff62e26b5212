//! Stationary (undecimated) Haar wavelet transform in 1D and 2D, and the
//! multi-channel network input built from it.
//!
//! Conventions:
//! - boundaries are periodic, so every coefficient sequence has the length
//!   of its input and the transform commutes exactly with circular shifts;
//! - analysis is anchored forward: `out[n] = Σ_k f[k] · x[(n + k) mod N]`;
//! - synthesis applies the time-reversed filters (the adjoint of analysis),
//!   `x[n] = ½ Σ_k (h[k] · a[n − k] + g[k] · d[n − k])`;
//! - filters carry the orthonormal 1/√2 scaling.

use crate::error::{Error, Result};
use crate::imageio::{normalize, FovMask, Plane};
use crate::scalar::Real;

/// Analysis filters of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair<T: Real = f64> {
    pub level: usize,
    pub low: Vec<T>,
    pub high: Vec<T>,
}

/// Synthesis filters: the analysis pair reversed in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionFilterPair<T: Real = f64> {
    pub level: usize,
    pub low: Vec<T>,
    pub high: Vec<T>,
}

fn upsample_filter<T: Real>(f: &[T]) -> Vec<T> {
    // h_{j+1}[k] = h_j[k/2] for even k, 0 for odd k
    let mut out = vec![T::zero(); 2 * f.len() - 1];
    for (i, &v) in f.iter().enumerate() {
        out[2 * i] = v;
    }
    out
}

/// Haar analysis filters for `level ≥ 1`, upsampled level by level.
pub fn haar_filters<T: Real>(level: usize) -> Result<FilterPair<T>> {
    if level == 0 {
        return Err(Error::InvalidArgument("wavelet level starts at 1".into()));
    }
    let r = T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
    let mut low = vec![r, r];
    let mut high = vec![r, -r];
    for _ in 1..level {
        low = upsample_filter(&low);
        high = upsample_filter(&high);
    }
    Ok(FilterPair { level, low, high })
}

impl<T: Real> FilterPair<T> {
    pub fn reconstruction(&self) -> ReconstructionFilterPair<T> {
        ReconstructionFilterPair {
            level: self.level,
            low: self.low.iter().rev().copied().collect(),
            high: self.high.iter().rev().copied().collect(),
        }
    }
}

/// Circular analysis: `out[n] = Σ_k f[k] x[(n+k) mod N]`, strided access so
/// the same routine serves rows and columns.
fn analyze_strided<T: Real>(x: &[T], len: usize, stride: usize, f: &[T], out: &mut [T]) {
    for n in 0..len {
        let mut acc = T::zero();
        for (k, &c) in f.iter().enumerate() {
            if c != T::zero() {
                acc += c * x[((n + k) % len) * stride];
            }
        }
        out[n * stride] = acc;
    }
}

/// Circular synthesis with the time-reversed filter `rev` of length L:
/// `out[n] += Σ_i rev[i] · y[(n − (L−1) + i) mod N]`.
fn synthesize_strided<T: Real>(y: &[T], len: usize, stride: usize, rev: &[T], out: &mut [T]) {
    let l = rev.len();
    for n in 0..len {
        let mut acc = T::zero();
        for (i, &c) in rev.iter().enumerate() {
            if c != T::zero() {
                let idx = (n + i + len * l - (l - 1)) % len;
                acc += c * y[idx * stride];
            }
        }
        out[n * stride] += acc;
    }
}

/// Coefficients of a 1D multi-level decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Swt1d<T: Real = f64> {
    /// `details[j-1]` holds d_j.
    pub details: Vec<Vec<T>>,
    pub approx: Vec<T>,
}

pub fn swt1d<T: Real>(signal: &[T], levels: usize) -> Result<Swt1d<T>> {
    if signal.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "signal of length {} cannot be decomposed",
            signal.len()
        )));
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("at least one level is required".into()));
    }
    let n = signal.len();
    let mut approx = signal.to_vec();
    let mut details = Vec::with_capacity(levels);
    for j in 1..=levels {
        let f = haar_filters::<T>(j)?;
        let mut a = vec![T::zero(); n];
        let mut d = vec![T::zero(); n];
        analyze_strided(&approx, n, 1, &f.low, &mut a);
        analyze_strided(&approx, n, 1, &f.high, &mut d);
        details.push(d);
        approx = a;
    }
    Ok(Swt1d { details, approx })
}

pub fn iswt1d<T: Real>(coeffs: &Swt1d<T>) -> Result<Vec<T>> {
    let n = coeffs.approx.len();
    if coeffs.details.is_empty() {
        return Err(Error::InvalidArgument("no detail levels".into()));
    }
    if coeffs.details.iter().any(|d| d.len() != n) {
        return Err(Error::Dimensions("detail and approximation lengths differ".into()));
    }
    let half = T::from_f64_lossy(0.5);
    let mut a = coeffs.approx.clone();
    for j in (1..=coeffs.details.len()).rev() {
        let rf = haar_filters::<T>(j)?.reconstruction();
        let mut prev = vec![T::zero(); n];
        synthesize_strided(&a, n, 1, &rf.low, &mut prev);
        synthesize_strided(&coeffs.details[j - 1], n, 1, &rf.high, &mut prev);
        prev.iter_mut().for_each(|v| *v *= half);
        a = prev;
    }
    Ok(a)
}

/// One level of the 2D transform. Naming follows (row filter, column filter):
/// `detail_v` = (low, high), `detail_h` = (high, low), `detail_d` = (high, high),
/// where the row filter runs along each row and the column filter down each
/// column.
#[derive(Debug, Clone, PartialEq)]
pub struct SwtLevel<T: Real = f64> {
    pub level: usize,
    pub approx: Plane<T>,
    pub detail_v: Plane<T>,
    pub detail_h: Plane<T>,
    pub detail_d: Plane<T>,
}

fn filter_rows<T: Real>(p: &Plane<T>, f: &[T]) -> Plane<T> {
    let mut out = Plane::zeros(p.width, p.height);
    for y in 0..p.height {
        let row = y * p.width;
        analyze_strided(&p.values[row..], p.width, 1, f, &mut out.values[row..]);
    }
    out
}

fn filter_cols<T: Real>(p: &Plane<T>, f: &[T]) -> Plane<T> {
    let mut out = Plane::zeros(p.width, p.height);
    for x in 0..p.width {
        analyze_strided(&p.values[x..], p.height, p.width, f, &mut out.values[x..]);
    }
    out
}

fn synth_rows<T: Real>(p: &Plane<T>, rev: &[T], out: &mut Plane<T>) {
    for y in 0..p.height {
        let row = y * p.width;
        synthesize_strided(&p.values[row..], p.width, 1, rev, &mut out.values[row..]);
    }
}

fn synth_cols<T: Real>(p: &Plane<T>, rev: &[T], out: &mut Plane<T>) {
    for x in 0..p.width {
        synthesize_strided(&p.values[x..], p.height, p.width, rev, &mut out.values[x..]);
    }
}

pub fn swt2d<T: Real>(plane: &Plane<T>, levels: usize) -> Result<Vec<SwtLevel<T>>> {
    if plane.width < 2 || plane.height < 2 {
        return Err(Error::InvalidArgument(format!(
            "plane {}x{} too small for a 2D transform",
            plane.width, plane.height
        )));
    }
    if levels == 0 {
        return Err(Error::InvalidArgument("at least one level is required".into()));
    }
    let mut approx = plane.clone();
    let mut out = Vec::with_capacity(levels);
    for j in 1..=levels {
        let f = haar_filters::<T>(j)?;
        let row_low = filter_rows(&approx, &f.low);
        let row_high = filter_rows(&approx, &f.high);
        let level = SwtLevel {
            level: j,
            approx: filter_cols(&row_low, &f.low),
            detail_v: filter_cols(&row_low, &f.high),
            detail_h: filter_cols(&row_high, &f.low),
            detail_d: filter_cols(&row_high, &f.high),
        };
        approx = level.approx.clone();
        out.push(level);
    }
    Ok(out)
}

/// Inverts [`swt2d`]; `levels` must be the complete list 1..=J in order.
pub fn iswt2d<T: Real>(levels: &[SwtLevel<T>]) -> Result<Plane<T>> {
    let last = levels
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty level list".into()))?;
    for (i, l) in levels.iter().enumerate() {
        if l.level != i + 1 {
            return Err(Error::InvalidArgument(format!(
                "incomplete level set: position {i} holds level {}",
                l.level
            )));
        }
    }
    let (w, h) = (last.approx.width, last.approx.height);
    for l in levels {
        for p in [&l.approx, &l.detail_v, &l.detail_h, &l.detail_d] {
            if !p.same_dims(w, h) {
                return Err(Error::Dimensions("coefficient planes differ in size".into()));
            }
        }
    }
    let half = T::from_f64_lossy(0.5);
    let mut a = last.approx.clone();
    for l in levels.iter().rev() {
        let rf = haar_filters::<T>(l.level)?.reconstruction();
        // undo the column pass, recovering the two row-filtered planes
        let mut row_low = Plane::zeros(w, h);
        synth_cols(&a, &rf.low, &mut row_low);
        synth_cols(&l.detail_v, &rf.high, &mut row_low);
        let mut row_high = Plane::zeros(w, h);
        synth_cols(&l.detail_h, &rf.low, &mut row_high);
        synth_cols(&l.detail_d, &rf.high, &mut row_high);
        let row_low = row_low.map(|v| v * half);
        let row_high = row_high.map(|v| v * half);
        let mut prev = Plane::zeros(w, h);
        synth_rows(&row_low, &rf.low, &mut prev);
        synth_rows(&row_high, &rf.high, &mut prev);
        a = prev.map(|v| v * half);
    }
    Ok(a)
}

/// Which detail levels accompany the green channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelMode {
    /// Green only.
    Base,
    D1,
    D2,
    D1D2,
}

impl ChannelMode {
    pub fn channel_count(self) -> usize {
        match self {
            ChannelMode::Base => 1,
            ChannelMode::D1 | ChannelMode::D2 => 4,
            ChannelMode::D1D2 => 7,
        }
    }

    pub fn detail_levels(self) -> &'static [usize] {
        match self {
            ChannelMode::Base => &[],
            ChannelMode::D1 => &[1],
            ChannelMode::D2 => &[2],
            ChannelMode::D1D2 => &[1, 2],
        }
    }

    /// CLI spelling: `1`, `4d1`, `4d2`, `7`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" | "base" => Some(ChannelMode::Base),
            "4d1" | "d1" => Some(ChannelMode::D1),
            "4d2" | "d2" => Some(ChannelMode::D2),
            "7" | "d1d2" => Some(ChannelMode::D1D2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelMode::Base => "1",
            ChannelMode::D1 => "4d1",
            ChannelMode::D2 => "4d2",
            ChannelMode::D1D2 => "7",
        }
    }
}

/// Normalized network input planes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack<T: Real = f64> {
    pub channels: Vec<Plane<T>>,
    pub mode: ChannelMode,
}

impl<T: Real> InputStack<T> {
    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// Stacks the (already normalized) green plane with the FOV-normalized
/// detail planes (dV, dH, dD) of each selected level.
pub fn build_input_stack<T: Real>(green: &Plane<T>, fov: &FovMask, mode: ChannelMode) -> Result<InputStack<T>> {
    if !green.same_dims(fov.width, fov.height) {
        return Err(Error::Dimensions(format!(
            "green {}x{} vs FOV {}x{}",
            green.width, green.height, fov.width, fov.height
        )));
    }
    let mut channels = vec![green.clone()];
    let levels = mode.detail_levels();
    if let Some(&deepest) = levels.iter().max() {
        let min_side = 1usize << deepest;
        if green.width < min_side || green.height < min_side {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} too small for wavelet level {deepest}",
                green.width, green.height
            )));
        }
        let swt = swt2d(green, deepest)?;
        for &j in levels {
            let l = &swt[j - 1];
            for p in [&l.detail_v, &l.detail_h, &l.detail_d] {
                channels.push(normalize(p, Some(fov))?);
            }
        }
    }
    Ok(InputStack { channels, mode })
}
