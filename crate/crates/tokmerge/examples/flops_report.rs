//! Cost model for ViT-B/16 under one-shot merge schedules.
//!
//! Prints the full per-layer report for the unmerged baseline, then sweeps
//! the merge layer to show how earlier merging buys larger savings.

use tokmerge::flops::{gmacs, model_flops};
use tokmerge::vit::{MergeMethod, VitConfig};

fn main() -> tokmerge::Result<()> {
    let report = model_flops(&VitConfig::vit_b16())?;
    println!("{}", report.human_summary());

    println!("one-shot differentiable matching, layer sweep:");
    for layer in [6usize, 4, 2, 1, 0] {
        let mut cfg = VitConfig::vit_b16();
        cfg.merge = MergeMethod::Bdm;
        cfg.merge_layer = Some(layer);
        let r = model_flops(&cfg)?;
        println!(
            "  layer {}: {:5.1} GMACs  (-{:.1}%)",
            layer,
            gmacs(r.total),
            100.0 * r.reduction_vs_baseline
        );
    }
    Ok(())
}
