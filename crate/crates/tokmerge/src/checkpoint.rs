//! Adapter-and-head checkpoint persistence.
//!
//! Binary layout, little-endian: magic "FPET", version u16, entry count
//! u32, then per entry (name length u16, name bytes, ndim u8, dims u64 each,
//! dtype code u8 {0: f32, 1: f64}, raw element bytes). Checkpoints carry
//! the trainable parameters plus a `config/` echo of the architecture;
//! backbone weights are never written, which is where the storage saving
//! of adapter tuning comes from.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapters::is_trainable;
use crate::error::{Error, Result};
use crate::merging::SplitPattern;
use crate::tensor::Tensor;
use crate::vit::{AdapterKind, MergeMethod, Vit, VitConfig};
use crate::Elem;

const MAGIC: &[u8; 4] = b"FPET";
const VERSION: u16 = 1;

fn dtype_code() -> u8 {
    if cfg!(feature = "f32") {
        0
    } else {
        1
    }
}

pub fn encode(entries: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::invalid("too many checkpoint entries"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("entry name too long: {}", name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::invalid(format!("too many dims on {}", name)))?;
        out.push(ndim);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(dtype_code());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], source: &str) -> Result<BTreeMap<String, Tensor>> {
    let bad = |reason: &str| Error::format(source.to_string(), reason);
    let elem = std::mem::size_of::<Elem>();
    if bytes.len() < 10 {
        return Err(bad("shorter than the header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("magic mismatch, not a checkpoint"));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(bad("unsupported version"));
    }
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let mut entries = BTreeMap::new();
    let mut off = 10usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(bad("truncated entry"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    for _ in 0..count {
        let nl = take(&mut off, 2)?;
        let name_len = usize::from(u16::from_le_bytes([nl[0], nl[1]]));
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| bad("entry name is not UTF-8"))?;
        let ndim = usize::from(take(&mut off, 1)?[0]);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = take(&mut off, 8)?;
            shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        }
        let dtype = take(&mut off, 1)?[0];
        if dtype != dtype_code() {
            return Err(bad(&format!(
                "element type code {} does not match this build ({})",
                dtype,
                dtype_code()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut off, n * elem)?;
        let data: Vec<Elem> = raw
            .chunks_exact(elem)
            .map(|c| Elem::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(&format!("duplicate entry {}", name)));
        }
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after the last entry"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    fs::write(path, encode(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode(&fs::read(path)?, &path.display().to_string())
}

fn merge_codes(m: &MergeMethod) -> (Elem, Elem, Elem) {
    // (method, split pattern, r) with 0 meaning default/unset
    match m {
        MergeMethod::None => (0.0, 0.0, 0.0),
        MergeMethod::Bdm => (1.0, 1.0, 0.0),
        MergeMethod::Bsm { r, pattern } => (
            2.0,
            if *pattern == SplitPattern::Checkerboard { 1.0 } else { 0.0 },
            r.map_or(0.0, |v| v as Elem),
        ),
        MergeMethod::BsmPerLayer { r } => (3.0, 0.0, *r as Elem),
        MergeMethod::AvgPool => (4.0, 0.0, 0.0),
        MergeMethod::MaxPool => (5.0, 0.0, 0.0),
    }
}

fn adapter_codes(a: &AdapterKind) -> (Elem, Elem) {
    match a {
        AdapterKind::None => (0.0, 0.0),
        AdapterKind::Lora { rank } => (1.0, *rank as Elem),
        AdapterKind::AdaptFormer { rank } => (2.0, *rank as Elem),
    }
}

/// Scalar echo of every architecture choice, so a checkpoint can refuse a
/// mismatched model. The 64-bit seed is split to stay exactly
/// representable.
pub fn config_echo(cfg: &VitConfig) -> BTreeMap<String, Tensor> {
    let mut e = BTreeMap::new();
    let mut put = |k: &str, v: Elem| {
        e.insert(format!("config/{}", k), Tensor::scalar(v));
    };
    put("depth", cfg.depth as Elem);
    put("dim", cfg.dim as Elem);
    put("heads", cfg.heads as Elem);
    put("mlp_ratio", cfg.mlp_ratio as Elem);
    put("grid_h", cfg.grid.0 as Elem);
    put("grid_w", cfg.grid.1 as Elem);
    put("patch_size", cfg.patch_size as Elem);
    put("in_channels", cfg.in_channels as Elem);
    put("num_classes", cfg.num_classes as Elem);
    put("use_cls", Elem::from(u8::from(cfg.use_cls)));
    let (m, pat, r) = merge_codes(&cfg.merge);
    put("merge", m);
    put("merge_pattern", pat);
    put("merge_r", r);
    put("merge_layer", cfg.merge_layer.map_or(0.0, |l| (l + 1) as Elem));
    let (a, rank) = adapter_codes(&cfg.adapter);
    put("adapter", a);
    put("adapter_rank", rank);
    put("adapter_scale", cfg.adapter_scale);
    put("refine_rank", cfg.refine_rank as Elem);
    put("refine_scale", cfg.refine_scale);
    put("detach_sizes", Elem::from(u8::from(cfg.detach_sizes)));
    put("cosine_sim", Elem::from(u8::from(cfg.cosine_sim)));
    put("proportional_attention", Elem::from(u8::from(cfg.proportional_attention)));
    put("seed_lo", (cfg.seed & 0xffff_ffff) as Elem);
    put("seed_hi", (cfg.seed >> 32) as Elem);
    e
}

/// Rebuild the architecture a checkpoint was written for.
pub fn config_from_echo(entries: &BTreeMap<String, Tensor>) -> Result<VitConfig> {
    let get = |k: &str| -> Result<Elem> {
        entries
            .get(&format!("config/{}", k))
            .ok_or_else(|| Error::config(format!("checkpoint missing config/{}", k)))?
            .item()
    };
    let us = |k: &str| -> Result<usize> { Ok(get(k)? as usize) };
    let merge = match us("merge")? {
        0 => MergeMethod::None,
        1 => MergeMethod::Bdm,
        2 => MergeMethod::Bsm {
            r: match us("merge_r")? {
                0 => None,
                v => Some(v),
            },
            pattern: if us("merge_pattern")? == 1 {
                SplitPattern::Checkerboard
            } else {
                SplitPattern::Stripe
            },
        },
        3 => MergeMethod::BsmPerLayer { r: us("merge_r")? },
        4 => MergeMethod::AvgPool,
        5 => MergeMethod::MaxPool,
        v => return Err(Error::config(format!("unknown merge code {}", v))),
    };
    let adapter = match us("adapter")? {
        0 => AdapterKind::None,
        1 => AdapterKind::Lora { rank: us("adapter_rank")? },
        2 => AdapterKind::AdaptFormer { rank: us("adapter_rank")? },
        v => return Err(Error::config(format!("unknown adapter code {}", v))),
    };
    Ok(VitConfig {
        depth: us("depth")?,
        dim: us("dim")?,
        heads: us("heads")?,
        mlp_ratio: us("mlp_ratio")?,
        grid: (us("grid_h")?, us("grid_w")?),
        patch_size: us("patch_size")?,
        in_channels: us("in_channels")?,
        num_classes: us("num_classes")?,
        use_cls: us("use_cls")? == 1,
        merge,
        merge_layer: match us("merge_layer")? {
            0 => None,
            v => Some(v - 1),
        },
        adapter,
        adapter_scale: get("adapter_scale")?,
        refine_rank: us("refine_rank")?,
        refine_scale: get("refine_scale")?,
        detach_sizes: us("detach_sizes")? == 1,
        cosine_sim: us("cosine_sim")? == 1,
        proportional_attention: us("proportional_attention")? == 1,
        seed: (us("seed_hi")? as u64) << 32 | us("seed_lo")? as u64,
    })
}

/// Trainable parameters plus the config echo; never the backbone.
pub fn model_checkpoint(model: &Vit) -> BTreeMap<String, Tensor> {
    let mut entries = config_echo(&model.cfg);
    for (name, t) in model.params() {
        if is_trainable(name) {
            entries.insert(name.clone(), t.clone());
        }
    }
    entries
}

/// Every parameter, as a hypothetical full-model dump (size comparisons).
pub fn full_dump(model: &Vit) -> BTreeMap<String, Tensor> {
    let mut entries = config_echo(&model.cfg);
    for (name, t) in model.params() {
        entries.insert(name.clone(), t.clone());
    }
    entries
}

/// Load checkpoint entries into a model after verifying the config echo
/// and the exact trainable-parameter set.
pub fn apply(model: &mut Vit, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let expect = config_echo(&model.cfg);
    for (key, want) in &expect {
        match entries.get(key) {
            Some(got) if got.data() == want.data() => {}
            Some(got) => {
                return Err(Error::config(format!(
                    "checkpoint mismatch at {}: {:?} vs model {:?}",
                    key,
                    got.data(),
                    want.data()
                )));
            }
            None => return Err(Error::config(format!("checkpoint missing {}", key))),
        }
    }
    let (trainable, _) = model.partition();
    for name in &trainable {
        let t = entries
            .get(name)
            .ok_or_else(|| Error::config(format!("checkpoint missing parameter {}", name)))?;
        model.set_param(name, t.clone())?;
    }
    let known = trainable.len() + expect.len();
    if entries.len() != known {
        return Err(Error::config(format!(
            "checkpoint has {} entries, the model accounts for {}",
            entries.len(),
            known
        )));
    }
    Ok(())
}
