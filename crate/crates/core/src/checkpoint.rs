//! Head checkpoints in the embedding-store layout.
//!
//! Every tensor is flattened and cut into records of `dim` values under keys
//! `<name>#<chunk>`; the last chunk is zero-padded. Tensor names:
//!
//! * `meta`: format version, dim, reduction, layers, flags and codes (see
//!   [`META_FIELDS`]); τ is stored as an `f32` high/low pair.
//! * per network (`net1/` prefix for the second one): `w:layer<l>`,
//!   `b:layer<l>`, `bn<l>:gamma`, `bn<l>:beta`, `bn<l>:mean`, `bn<l>:var`.
//! * attention maps: `fuse:prompt:w`, `fuse:prompt:b`, `fuse:vision:w`,
//!   `fuse:vision:b`.
//!
//! Values are stored as `f32`, so a reloaded head matches the trained one to
//! single precision.

use alloc::format;
use alloc::string::String;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{AptHead, FusionMode, HeadConfig, TuningMode};
use crate::network::Mode;
use crate::store::EmbeddingStore;

pub const CHECKPOINT_VERSION: f64 = 1.0;

/// Order of the values in the `meta` tensor.
pub const META_FIELDS: [&str; 13] = [
    "version",
    "dim",
    "reduction",
    "layers",
    "rectify_output",
    "share_weights",
    "use_ocr",
    "use_vision",
    "fusion",
    "tuning",
    "tau_hi",
    "tau_lo",
    "eval_mode",
];

fn put(store: &mut EmbeddingStore, name: &str, values: &[f64]) -> Result<()> {
    let dim = store.dim();
    for (k, chunk) in values.chunks(dim).enumerate() {
        let mut v: Vec<f32> = chunk.iter().map(|&x| x as f32).collect();
        v.resize(dim, 0.0);
        store.insert(format!("{name}#{k}"), v)?;
    }
    Ok(())
}

fn get(store: &EmbeddingStore, name: &str, len: usize) -> Result<Vec<f64>> {
    let dim = store.dim();
    let mut out = Vec::with_capacity(len);
    for k in 0..len.div_ceil(dim) {
        let key = format!("{name}#{k}");
        let chunk = store.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor chunk {key}")))?;
        let take = (len - out.len()).min(dim);
        out.extend(chunk[..take].iter().map(|&x| f64::from(x)));
    }
    Ok(out)
}

fn fusion_code(f: FusionMode) -> f64 {
    FusionMode::ALL.iter().position(|&m| m == f).unwrap() as f64
}

fn tuning_code(t: TuningMode) -> f64 {
    TuningMode::ALL.iter().position(|&m| m == t).unwrap() as f64
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn net_prefix(k: usize) -> String {
    if k == 0 {
        String::new()
    } else {
        format!("net{k}/")
    }
}

pub fn to_store(head: &AptHead) -> Result<EmbeddingStore> {
    let cfg = head.config();
    let mut store = EmbeddingStore::new(head.dim())?;
    let tau_hi = cfg.tau as f32;
    let tau_lo = (cfg.tau - f64::from(tau_hi)) as f32;
    let meta = [
        CHECKPOINT_VERSION,
        head.dim() as f64,
        cfg.reduction as f64,
        cfg.layers as f64,
        flag(cfg.rectify_output),
        flag(cfg.share_weights),
        flag(cfg.use_ocr),
        flag(cfg.use_vision),
        fusion_code(cfg.fusion),
        tuning_code(cfg.tuning),
        f64::from(tau_hi),
        f64::from(tau_lo),
        flag(head.mode() == Mode::Eval),
    ];
    put(&mut store, "meta", &meta)?;
    for (k, net) in head.networks().iter().enumerate() {
        let p = net_prefix(k);
        for (l, layer) in net.layers.iter().enumerate() {
            let l = l + 1;
            put(&mut store, &format!("{p}w:layer{l}"), &layer.weight)?;
            put(&mut store, &format!("{p}b:layer{l}"), &layer.bias)?;
            put(&mut store, &format!("{p}bn{l}:gamma"), &layer.gamma)?;
            put(&mut store, &format!("{p}bn{l}:beta"), &layer.beta)?;
            put(&mut store, &format!("{p}bn{l}:mean"), &layer.running_mean)?;
            put(&mut store, &format!("{p}bn{l}:var"), &layer.running_var)?;
        }
    }
    for (side, fu) in [("prompt", head.prompt_fuser()), ("vision", head.vision_fuser())] {
        if let Some(fu) = fu {
            put(&mut store, &format!("fuse:{side}:w"), &fu.weight)?;
            put(&mut store, &format!("fuse:{side}:b"), &fu.bias)?;
        }
    }
    Ok(store)
}

pub fn from_store(store: &EmbeddingStore) -> Result<AptHead> {
    let meta = get(store, "meta", META_FIELDS.len())?;
    if meta[0] != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta[0])));
    }
    let as_usize = |v: f64, what: &str| -> Result<usize> {
        if v >= 0.0 && libm::trunc(v) == v {
            Ok(v as usize)
        } else {
            Err(Error::Checkpoint(format!("bad {what} {v}")))
        }
    };
    let dim = as_usize(meta[1], "dim")?;
    if dim != store.dim() {
        return Err(Error::Checkpoint(format!("meta dim {dim} differs from record dim {}", store.dim())));
    }
    let fusion = *FusionMode::ALL
        .get(as_usize(meta[8], "fusion code")?)
        .ok_or_else(|| Error::Checkpoint("bad fusion code".into()))?;
    let tuning = *TuningMode::ALL
        .get(as_usize(meta[9], "tuning code")?)
        .ok_or_else(|| Error::Checkpoint("bad tuning code".into()))?;
    let cfg = HeadConfig {
        fusion,
        tuning,
        share_weights: meta[5] != 0.0,
        tau: meta[10] + meta[11],
        use_ocr: meta[6] != 0.0,
        use_vision: meta[7] != 0.0,
        layers: as_usize(meta[3], "layers")?,
        reduction: as_usize(meta[2], "reduction")?,
        rectify_output: meta[4] != 0.0,
    };
    // Structure only; every parameter is overwritten below.
    let mut head = AptHead::new(cfg, dim, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (k, net) in head.networks_mut().iter_mut().enumerate() {
        let p = net_prefix(k);
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let l = l + 1;
            layer.weight = get(store, &format!("{p}w:layer{l}"), layer.weight.len())?;
            layer.bias = get(store, &format!("{p}b:layer{l}"), layer.out_dim)?;
            layer.gamma = get(store, &format!("{p}bn{l}:gamma"), layer.out_dim)?;
            layer.beta = get(store, &format!("{p}bn{l}:beta"), layer.out_dim)?;
            layer.running_mean = get(store, &format!("{p}bn{l}:mean"), layer.out_dim)?;
            layer.running_var = get(store, &format!("{p}bn{l}:var"), layer.out_dim)?;
        }
    }
    let (pf, vf) = head.fusers_mut();
    for (side, fu) in [("prompt", pf), ("vision", vf)] {
        if let Some(fu) = fu {
            fu.weight = get(store, &format!("fuse:{side}:w"), fu.weight.len())?;
            fu.bias = get(store, &format!("fuse:{side}:b"), fu.bias.len())?;
        }
    }
    head.set_mode(if meta[12] != 0.0 { Mode::Eval } else { Mode::Train });
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_structure_and_f32_values() {
        for fusion in FusionMode::ALL {
            for share in [true, false] {
                let cfg = HeadConfig { fusion, share_weights: share, reduction: 4, layers: 3, ..HeadConfig::default() };
                let mut head = AptHead::new(cfg, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
                head.set_mode(Mode::Eval);
                let store = to_store(&head).unwrap();
                let back = from_store(&store).unwrap();
                assert_eq!(back.config().fusion, fusion);
                assert_eq!(back.config().share_weights, share);
                assert!((back.config().tau - 0.01).abs() < 1e-15);
                assert_eq!(back.mode(), Mode::Eval);
                let a = head.params();
                let b = back.params();
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(&b) {
                    assert_eq!(*x as f32, *y as f32);
                }
                let again = to_store(&back).unwrap();
                assert_eq!(again.encode(), store.encode());
            }
        }
    }

    #[test]
    fn missing_chunk_is_reported() {
        let head = AptHead::new(HeadConfig::default(), 32, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let store = to_store(&head).unwrap();
        let mut partial = EmbeddingStore::new(32).unwrap();
        for (k, v) in store.iter().filter(|(k, _)| !k.starts_with("bn2:var")) {
            partial.insert(k, v.to_vec()).unwrap();
        }
        assert!(matches!(from_store(&partial), Err(Error::Checkpoint(_))));
    }
}
