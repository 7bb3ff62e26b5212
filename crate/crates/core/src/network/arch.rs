//! Architecture description and its shape algebra.

use std::fmt::Write as _;

use super::layers::DropoutKind;
use crate::error::{Error, Result};

/// Encoder-decoder layout. Each encoder block runs `encoder_convs[i]` 3×3
/// convolutions at `base_width · 2^i` maps and is followed by a 2×2 pool; the
/// bottleneck runs at `base_width · 2^L`; decoder block `i` (deepest first)
/// upsamples, concatenates the matching encoder output and runs
/// `decoder_convs[i]` convolutions. A 1×1 convolution produces the class maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub base_width: usize,
    pub encoder_convs: Vec<usize>,
    pub bottleneck_convs: usize,
    pub decoder_convs: Vec<usize>,
    pub dropout_p: f64,
    pub dropout_p_last: f64,
    pub dropout_kind: DropoutKind,
    pub output_size: usize,
}

pub const KERNEL: usize = 3;
pub const POOL: usize = 2;

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 4,
            classes: 2,
            base_width: 16,
            encoder_convs: vec![4, 3],
            bottleneck_convs: 2,
            decoder_convs: vec![3, 4],
            dropout_p: 0.2,
            dropout_p_last: 0.15,
            dropout_kind: DropoutKind::Spatial,
            output_size: 32,
        }
    }
}

/// Spatial size after one named stage of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub channels: usize,
    pub size: usize,
}

/// (out, in, kernel) of a convolution in parameter order.
pub type ConvShape = (usize, usize, usize);

impl ArchConfig {
    pub fn depth(&self) -> usize {
        self.encoder_convs.len()
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Context lost on each side between input and output: a 3×3 convolution
    /// at scale `2^s` consumes `2^s` input pixels per side.
    pub fn context_margin(&self) -> usize {
        let l = self.depth();
        let enc: usize = self.encoder_convs.iter().enumerate().map(|(i, &n)| n << i).sum();
        let dec: usize = self
            .decoder_convs
            .iter()
            .enumerate()
            .map(|(i, &n)| n << (l - 1 - i))
            .sum();
        enc + (self.bottleneck_convs << l) + dec
    }

    pub fn input_size(&self) -> usize {
        self.output_size + 2 * self.context_margin()
    }

    /// Convolution shapes in parameter order: encoder, bottleneck, decoder, head.
    pub fn conv_shapes(&self) -> Vec<ConvShape> {
        let l = self.depth();
        let mut shapes = Vec::new();
        let mut ch = self.in_channels;
        for (i, &n) in self.encoder_convs.iter().enumerate() {
            for _ in 0..n {
                shapes.push((self.level_width(i), ch, KERNEL));
                ch = self.level_width(i);
            }
        }
        for _ in 0..self.bottleneck_convs {
            shapes.push((self.level_width(l), ch, KERNEL));
            ch = self.level_width(l);
        }
        for (i, &n) in self.decoder_convs.iter().enumerate() {
            let level = l - 1 - i;
            ch += self.level_width(level);
            for _ in 0..n {
                shapes.push((self.level_width(level), ch, KERNEL));
                ch = self.level_width(level);
            }
        }
        shapes.push((self.classes, ch, 1));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Architecture(m.to_string()));
        if self.encoder_convs.is_empty() {
            return bad("at least one encoder block is required");
        }
        if self.encoder_convs.len() != self.decoder_convs.len() {
            return bad("decoder block count must equal encoder block count");
        }
        if self.encoder_convs.iter().chain(&self.decoder_convs).any(|&n| n == 0) || self.bottleneck_convs == 0 {
            return bad("every block needs at least one convolution");
        }
        if self.in_channels == 0 || self.classes < 2 || self.base_width == 0 || self.output_size == 0 {
            return bad("channels, classes (≥2), base width and output size must be positive");
        }
        for p in [self.dropout_p, self.dropout_p_last] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout probabilities must lie in [0, 1)");
            }
        }
        let walk = self.shape_walk(self.input_size())?;
        let out = walk.last().expect("walk is non-empty");
        if out.size != self.output_size || out.channels != self.classes {
            return Err(Error::Architecture(format!(
                "shape walk ends at {}x{}x{}, expected {}x{}x{}",
                out.channels, out.size, out.size, self.classes, self.output_size, self.output_size
            )));
        }
        Ok(())
    }

    /// Symbolic forward pass over spatial sizes, checking every pool and crop.
    pub fn shape_walk(&self, input: usize) -> Result<Vec<StageShape>> {
        let l = self.depth();
        let mut stages = vec![StageShape {
            stage: "input".into(),
            channels: self.in_channels,
            size: input,
        }];
        let mut size = input;
        let mut skips = Vec::new();
        let shrink = |size: usize, n: usize, stage: &str| -> Result<usize> {
            size.checked_sub(2 * n).filter(|&s| s > 0).ok_or_else(|| Error::Shape {
                layer: stage.to_string(),
                detail: format!("{n} valid convolutions do not fit in {size} pixels"),
            })
        };
        for (i, &n) in self.encoder_convs.iter().enumerate() {
            let stage = format!("encoder{i}");
            size = shrink(size, n, &stage)?;
            stages.push(StageShape {
                stage: stage.clone(),
                channels: self.level_width(i),
                size,
            });
            if size % POOL != 0 {
                return Err(Error::Shape {
                    layer: format!("pool{i}"),
                    detail: format!("cannot pool odd size {size}"),
                });
            }
            skips.push(size);
            size /= POOL;
            stages.push(StageShape {
                stage: format!("pool{i}"),
                channels: self.level_width(i),
                size,
            });
        }
        size = shrink(size, self.bottleneck_convs, "bottleneck")?;
        stages.push(StageShape {
            stage: "bottleneck".into(),
            channels: self.level_width(l),
            size,
        });
        for (i, &n) in self.decoder_convs.iter().enumerate() {
            let level = l - 1 - i;
            size *= POOL;
            let skip = skips.pop().expect("one skip per level");
            if skip < size || (skip - size) % 2 != 0 {
                return Err(Error::Shape {
                    layer: format!("concat{level}"),
                    detail: format!("skip {skip} cannot be centre-cropped to {size}"),
                });
            }
            let stage = format!("decoder{level}");
            size = shrink(size, n, &stage)?;
            stages.push(StageShape {
                stage,
                channels: self.level_width(level),
                size,
            });
        }
        stages.push(StageShape {
            stage: "head".into(),
            channels: self.classes,
            size,
        });
        Ok(stages)
    }

    /// Plain-text `key = value` dump.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "in_channels = {}", self.in_channels);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "base_width = {}", self.base_width);
        let _ = writeln!(s, "encoder_convs = {}", list(&self.encoder_convs));
        let _ = writeln!(s, "bottleneck_convs = {}", self.bottleneck_convs);
        let _ = writeln!(s, "decoder_convs = {}", list(&self.decoder_convs));
        let _ = writeln!(s, "dropout_p = {}", self.dropout_p);
        let _ = writeln!(s, "dropout_p_last = {}", self.dropout_p_last);
        let _ = writeln!(s, "dropout_kind = {}", self.dropout_kind.as_str());
        let _ = writeln!(s, "output_size = {}", self.output_size);
        s
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        parse_pairs(&self.to_text()).expect("own dump parses")
    }

    /// Applies `key = value` overrides on top of `self`. Unknown keys are rejected.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let num = || -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("{k}: expected an integer, got {v:?}")))
            };
            let float = || -> Result<f64> {
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("{k}: expected a number, got {v:?}")))
            };
            let list = || -> Result<Vec<usize>> {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::InvalidArgument(format!("{k}: bad list {v:?}")))
                    })
                    .collect()
            };
            match k.as_str() {
                "in_channels" => self.in_channels = num()?,
                "classes" => self.classes = num()?,
                "base_width" => self.base_width = num()?,
                "encoder_convs" => self.encoder_convs = list()?,
                "bottleneck_convs" => self.bottleneck_convs = num()?,
                "decoder_convs" => self.decoder_convs = list()?,
                "dropout_p" => self.dropout_p = float()?,
                "dropout_p_last" => self.dropout_p_last = float()?,
                "dropout_kind" => {
                    self.dropout_kind = DropoutKind::parse(v)
                        .ok_or_else(|| Error::InvalidArgument(format!("dropout_kind: unknown {v:?}")))?
                }
                "output_size" => self.output_size = num()?,
                other => return Err(Error::InvalidArgument(format!("unknown architecture key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        cfg.apply_pairs(&parse_pairs(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_maps_88_to_32() {
        let cfg = ArchConfig::default();
        assert_eq!(cfg.context_margin(), 28);
        assert_eq!(cfg.input_size(), 88);
        cfg.validate().unwrap();
        let walk = cfg.shape_walk(88).unwrap();
        let sizes: Vec<usize> = walk.iter().map(|s| s.size).collect();
        assert_eq!(sizes, vec![88, 80, 40, 34, 17, 13, 20, 32, 32]);
        assert_eq!(walk.last().unwrap().channels, 2);
    }

    #[test]
    fn conv_shapes_follow_widths() {
        let s = ArchConfig::default().conv_shapes();
        assert_eq!(s.len(), 4 + 3 + 2 + 3 + 4 + 1);
        assert_eq!(s[0], (16, 4, 3));
        assert_eq!(s[4], (32, 16, 3));
        assert_eq!(s[7], (64, 32, 3));
        assert_eq!(s[9], (32, 96, 3));
        assert_eq!(s[12], (16, 48, 3));
        assert_eq!(*s.last().unwrap(), (2, 16, 1));
    }

    #[test]
    fn rejects_bad_geometry() {
        let cfg = ArchConfig {
            encoder_convs: vec![1, 1],
            decoder_convs: vec![1, 1],
            bottleneck_convs: 1,
            output_size: 8,
            ..ArchConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ArchConfig {
            decoder_convs: vec![3],
            ..ArchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = ArchConfig {
            base_width: 8,
            dropout_kind: DropoutKind::Standard,
            ..ArchConfig::default()
        };
        assert_eq!(ArchConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ArchConfig::from_text("bogus = 1").is_err());
    }
}
