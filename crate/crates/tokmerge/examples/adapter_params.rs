//! Trainable-parameter budgets and checkpoint sizes under adapter tuning.
//!
//! The point of the regime: adapters plus head are a sliver of the model,
//! and checkpoints shrink accordingly.

use tokmerge::checkpoint::{encode, full_dump, model_checkpoint};
use tokmerge::vit::{AdapterKind, MergeMethod, Vit, VitConfig};

fn report(label: &str, cfg: VitConfig) -> tokmerge::Result<()> {
    let model = Vit::new(cfg)?;
    let (trainable, frozen) = model.partition();
    let nt = model.param_count(&trainable);
    let nf = model.param_count(&frozen);
    let small = encode(&model_checkpoint(&model))?.len();
    let full = encode(&full_dump(&model))?.len();
    println!(
        "{:<22} trainable {:>8} / total {:>9} ({:.2}%)  ckpt {:>8} B vs full {:>9} B",
        label,
        nt,
        nt + nf,
        100.0 * nt as f64 / (nt + nf) as f64,
        small,
        full
    );
    Ok(())
}

fn main() -> tokmerge::Result<()> {
    report("head only", VitConfig::default())?;
    report(
        "lora r=8",
        VitConfig { adapter: AdapterKind::Lora { rank: 8 }, ..VitConfig::default() },
    )?;
    report(
        "adaptformer r=8",
        VitConfig { adapter: AdapterKind::AdaptFormer { rank: 8 }, ..VitConfig::default() },
    )?;
    report(
        "adaptformer + merge",
        VitConfig {
            adapter: AdapterKind::AdaptFormer { rank: 8 },
            merge: MergeMethod::Bdm,
            merge_layer: Some(2),
            ..VitConfig::default()
        },
    )?;
    Ok(())
}
