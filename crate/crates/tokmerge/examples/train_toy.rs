//! End-to-end adapter tuning with a mid-network differentiable merge.
//!
//! Frozen random backbone, AdaptFormer adapters, merge at layer 2 of 4.
//! Small enough to finish in well under a minute.

use tokmerge::dataset::SyntheticSpec;
use tokmerge::trainer::{train, TrainConfig};
use tokmerge::vit::{token_schedule, AdapterKind, MergeMethod, Vit, VitConfig};

fn main() -> tokmerge::Result<()> {
    let cfg = VitConfig {
        merge: MergeMethod::Bdm,
        merge_layer: Some(2),
        adapter: AdapterKind::AdaptFormer { rank: 8 },
        seed: 7,
        ..VitConfig::default()
    };
    println!("token schedule: {:?}", token_schedule(&cfg)?);

    let spec = SyntheticSpec { count: 64, sigma: 0.05, seed: 7, ..SyntheticSpec::default() };
    let train_ds = spec.generate()?;
    let val_ds = SyntheticSpec { count: 16, seed: 8, ..spec }.generate()?;

    let mut model = Vit::new(cfg)?;
    let tcfg = TrainConfig { epochs: 8, warmup_epochs: 1, seed: 7, ..TrainConfig::default() };
    let outcome = train(&mut model, &train_ds, &val_ds, &tcfg, None, |m| {
        println!(
            "epoch {:>2} {:<5} loss {:.4} acc {:.3} lr {:.5}",
            m.epoch, m.split, m.loss, m.acc, m.lr
        );
    })?;
    println!(
        "best val acc {:.3} at epoch {}, {} steps, {:.0} tokens/s",
        outcome.best_val_acc, outcome.best_epoch, outcome.steps, outcome.tokens_per_sec
    );
    Ok(())
}
