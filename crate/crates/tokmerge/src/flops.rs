//! Closed-form multiply-accumulate accounting for encoder configurations.
//!
//! MAC convention: one multiply-add is one unit; softmax, layer norm,
//! activations, and biases are excluded (they shift totals by well under a
//! percent at transformer scale). A block splits into an attention part
//! costed at the token count entering the block and an FFN part costed at
//! the count leaving it, because the merge runs between the two.

use crate::error::{Error, Result};
use crate::vit::{token_schedule, AdapterKind, MergeMethod, VitConfig};

/// MACs of one encoder block at a fixed token count:
/// QKV + output projections (4nd^2), score and context products (2n^2 d),
/// and the FFN (2 * ratio * nd^2).
pub fn layer_flops(n: usize, d: usize, mlp_ratio: usize) -> Result<u64> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("layer_flops needs n > 0 and d > 0"));
    }
    let (n, d, r) = (n as u64, d as u64, mlp_ratio as u64);
    Ok((4 + 2 * r) * n * d * d + 2 * n * n * d)
}

fn attn_flops(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

fn ffn_flops(n: u64, d: u64, r: u64) -> u64 {
    2 * r * n * d * d
}

#[derive(Clone, Debug)]
pub struct FlopsReport {
    /// One entry per block: attention at the entering count plus FFN at
    /// the leaving count.
    pub per_layer: Vec<u64>,
    pub embed: u64,
    pub adapters: u64,
    pub merge_module: u64,
    pub total: u64,
    /// Same backbone with no merging and no adapters.
    pub baseline_total: u64,
    pub reduction_vs_baseline: f64,
    /// Tokens entering each block plus the final count.
    pub token_counts: Vec<usize>,
}

pub fn gmacs(mac: u64) -> f64 {
    mac as f64 / 1e9
}

impl FlopsReport {
    pub fn human_summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "tokens: {} -> {}\n",
            self.token_counts.first().unwrap(),
            self.token_counts.last().unwrap()
        ));
        s.push_str(&format!("patch embed: {:.4} GMACs\n", gmacs(self.embed)));
        for (i, l) in self.per_layer.iter().enumerate() {
            s.push_str(&format!(
                "layer {:>2}: {:.4} GMACs ({} tokens in)\n",
                i,
                gmacs(*l),
                self.token_counts[i]
            ));
        }
        s.push_str(&format!("adapters: {:.6} GMACs\n", gmacs(self.adapters)));
        s.push_str(&format!("merge module: {:.6} GMACs\n", gmacs(self.merge_module)));
        s.push_str(&format!(
            "total: {:.4} GMACs (baseline {:.4}, reduction {:.2}%)\n",
            gmacs(self.total),
            gmacs(self.baseline_total),
            100.0 * self.reduction_vs_baseline
        ));
        s
    }

    pub fn machine_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("embed_mac={}\n", self.embed));
        for (i, l) in self.per_layer.iter().enumerate() {
            s.push_str(&format!("layer{}_mac={}\n", i, l));
        }
        s.push_str(&format!("adapters_mac={}\n", self.adapters));
        s.push_str(&format!("merge_module_mac={}\n", self.merge_module));
        s.push_str(&format!("total_mac={}\n", self.total));
        s.push_str(&format!("baseline_mac={}\n", self.baseline_total));
        s.push_str(&format!("reduction={:.6}\n", self.reduction_vs_baseline));
        s.push_str(&format!(
            "tokens_in={}\ntokens_out={}\n",
            self.token_counts.first().unwrap(),
            self.token_counts.last().unwrap()
        ));
        s
    }
}

/// Split counts for the heuristic and checkerboard merges at `p` patch
/// tokens with `cls` protected tokens appended to B.
fn split_counts(p: usize, cls: usize, checkerboard: bool) -> (u64, u64) {
    let n_a = if checkerboard { p / 2 } else { p.div_ceil(2) };
    ((n_a) as u64, (p - n_a + cls) as u64)
}

pub fn model_flops(cfg: &VitConfig) -> Result<FlopsReport> {
    let counts = token_schedule(cfg)?;
    let d = cfg.dim as u64;
    let dk = cfg.key_dim() as u64;
    let ratio = cfg.mlp_ratio as u64;
    let cls = usize::from(cfg.use_cls);
    let embed =
        (cfg.n_patches() as u64) * d * (cfg.in_channels * cfg.patch_size * cfg.patch_size) as u64;

    let mut per_layer = Vec::with_capacity(cfg.depth);
    let mut adapters = 0u64;
    let mut merge_module = 0u64;
    for layer in 0..cfg.depth {
        let n_in = counts[layer] as u64;
        let n_out = counts[layer + 1] as u64;
        per_layer.push(attn_flops(n_in, d) + ffn_flops(n_out, d, ratio));
        match cfg.adapter {
            // one down/up pair each for q and v, at the attention count
            AdapterKind::Lora { rank } => adapters += 4 * n_in * d * rank as u64,
            // one pair in parallel with the FFN, at the reduced count
            AdapterKind::AdaptFormer { rank } => adapters += 2 * n_out * d * rank as u64,
            AdapterKind::None => {}
        }
        let fires = cfg.merge_layer == Some(layer);
        let p = counts[layer] - cls;
        match cfg.merge {
            MergeMethod::Bdm if fires => {
                let (n_a, n_b) = split_counts(p, cls, true);
                merge_module += 2 * n_in * dk * cfg.refine_rank as u64;
                merge_module += n_a * n_b * dk;
            }
            MergeMethod::Bsm { pattern, .. } if fires => {
                let checker = pattern == crate::merging::SplitPattern::Checkerboard;
                let (n_a, n_b) = split_counts(p, cls, checker);
                merge_module += n_a * n_b * dk;
            }
            MergeMethod::BsmPerLayer { .. } => {
                let (n_a, n_b) = split_counts(p, cls, false);
                merge_module += n_a * n_b * dk;
            }
            _ => {}
        }
    }
    let total = embed + per_layer.iter().sum::<u64>() + adapters + merge_module;

    let baseline_total = if matches!(cfg.merge, MergeMethod::None)
        && matches!(cfg.adapter, AdapterKind::None)
    {
        total
    } else {
        let base = VitConfig {
            merge: MergeMethod::None,
            merge_layer: None,
            adapter: AdapterKind::None,
            ..cfg.clone()
        };
        model_flops(&base)?.total
    };
    let reduction_vs_baseline = 1.0 - total as f64 / baseline_total as f64;
    Ok(FlopsReport {
        per_layer,
        embed,
        adapters,
        merge_module,
        total,
        baseline_total,
        reduction_vs_baseline,
        token_counts: counts,
    })
}
