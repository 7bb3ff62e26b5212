//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VNSW" version
//! field_count { key_len key value_len value }*      -- ArchConfig fields, then `meta.*` entries
//! layer_count { out in k  weight[out*in*k*k]  bias_len bias[bias_len] }*
//! ```
//!
//! Weights and biases are little-endian IEEE-754 `f64`.

use super::arch::ArchConfig;
use super::layers::ConvParams;
use super::model::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MAGIC: [u8; 4] = *b"VNSW";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Prefix of free-form metadata keys stored next to the architecture.
pub const META_PREFIX: &str = "meta.";

pub fn save_model<T: Real>(params: &ParamSet<T>, config: &ArchConfig) -> Vec<u8> {
    save_model_with_meta(params, config, &[])
}

/// Like [`save_model`], also storing `meta` entries (keys without the prefix).
pub fn save_model_with_meta<T: Real>(params: &ParamSet<T>, config: &ArchConfig, meta: &[(String, String)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    let mut fields = config.to_pairs();
    fields.extend(meta.iter().map(|(k, v)| (format!("{META_PREFIX}{k}"), v.clone())));
    put_u32(&mut out, fields.len() as u32);
    for (k, v) in &fields {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    put_u32(&mut out, params.layers.len() as u32);
    for l in &params.layers {
        put_u32(&mut out, l.out_channels as u32);
        put_u32(&mut out, l.in_channels as u32);
        put_u32(&mut out, l.kernel as u32);
        for &w in &l.weight {
            out.extend_from_slice(&w.to_f64_lossy().to_le_bytes());
        }
        put_u32(&mut out, l.bias.len() as u32);
        for &b in &l.bias {
            out.extend_from_slice(&b.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint(format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

pub fn load_model<T: Real>(bytes: &[u8]) -> Result<(ParamSet<T>, ArchConfig)> {
    load_model_with_meta(bytes).map(|(p, c, _)| (p, c))
}

/// Loads a checkpoint together with its metadata entries.
#[allow(clippy::type_complexity)]
pub fn load_model_with_meta<T: Real>(bytes: &[u8]) -> Result<(ParamSet<T>, ArchConfig, Vec<(String, String)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CheckpointMagic(magic.try_into().expect("4 bytes")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let n_fields = r.u32("field count")?;
    let mut pairs = Vec::new();
    let mut meta = Vec::new();
    for _ in 0..n_fields {
        let k = r.string("config key")?;
        let v = r.string("config value")?;
        match k.strip_prefix(META_PREFIX) {
            Some(name) => meta.push((name.to_string(), v)),
            None => pairs.push((k, v)),
        }
    }
    let mut config = ArchConfig::default();
    config.apply_pairs(&pairs)?;
    config.validate()?;
    let shapes = config.conv_shapes();
    let n_layers = r.u32("layer count")? as usize;
    if n_layers != shapes.len() {
        return Err(Error::Checkpoint(format!(
            "{n_layers} layers stored, architecture declares {}",
            shapes.len()
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (i, &(o, c, k)) in shapes.iter().enumerate() {
        let so = r.u32("layer shape")? as usize;
        let sc = r.u32("layer shape")? as usize;
        let sk = r.u32("layer shape")? as usize;
        if (so, sc, sk) != (o, c, k) {
            return Err(Error::Checkpoint(format!(
                "layer {i}: stored shape {so}x{sc}x{sk}x{sk}, expected {o}x{c}x{k}x{k}"
            )));
        }
        let weight = r.f64s(o * c * k * k, "weights")?;
        let nb = r.u32("bias length")? as usize;
        if nb != o {
            return Err(Error::Checkpoint(format!("layer {i}: {nb} biases for {o} outputs")));
        }
        let bias = r.f64s(nb, "biases")?;
        layers.push(ConvParams {
            out_channels: o,
            in_channels: c,
            kernel: k,
            weight: weight.into_iter().map(T::from_f64_lossy).collect(),
            bias: bias.into_iter().map(T::from_f64_lossy).collect(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ParamSet { layers };
    if !params.all_finite() {
        return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
    }
    Ok((params, config, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::model::xavier_init;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            base_width: 2,
            encoder_convs: vec![1],
            bottleneck_convs: 1,
            decoder_convs: vec![1],
            output_size: 8,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn truncation_and_version_errors() {
        let cfg = small();
        let p: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = save_model(&p, &cfg);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(load_model::<f64>(&bytes[..cut]).is_err());
        }
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        let msg = load_model::<f64>(&bumped).unwrap_err().to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{msg}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_model::<f64>(&bad), Err(Error::CheckpointMagic(_))));
        let mut long = bytes;
        long.push(0);
        assert!(load_model::<f64>(&long).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), width in 1usize..4) {
            let cfg = ArchConfig { base_width: width, ..small() };
            let p: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let bytes = save_model(&p, &cfg);
            let (q, c) = load_model::<f64>(&bytes).unwrap();
            prop_assert_eq!(&c, &cfg);
            for (a, b) in p.slices().zip(q.slices()) {
                for (x, y) in a.iter().zip(b) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            prop_assert_eq!(save_model(&q, &c), bytes);
        }
    }

    #[test]
    fn metadata_round_trip() {
        let cfg = small();
        let p: ParamSet<f64> = xavier_init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let meta = vec![("channels".to_string(), "4d2".to_string())];
        let bytes = save_model_with_meta(&p, &cfg, &meta);
        let (q, c, m) = load_model_with_meta::<f64>(&bytes).unwrap();
        assert_eq!((q, c, m), (p.clone(), cfg.clone(), meta));
        assert_eq!(load_model::<f64>(&bytes).unwrap().0, p);
    }
}
