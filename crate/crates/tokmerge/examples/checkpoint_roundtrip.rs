//! Save adapters and head, reload into a fresh model, verify bit-exact
//! restoration and architecture checks.

use tokmerge::checkpoint::{apply, load, model_checkpoint, save};
use tokmerge::vit::{AdapterKind, Vit, VitConfig};

fn main() -> tokmerge::Result<()> {
    let cfg = VitConfig {
        adapter: AdapterKind::Lora { rank: 4 },
        seed: 21,
        ..VitConfig::default()
    };
    let mut model = Vit::new(cfg.clone())?;

    // make the trainable weights visibly non-initial
    let mut head = model.params()["head.w"].clone();
    for v in head.data_mut().iter_mut() {
        *v += 0.5;
    }
    model.set_param("head.w", head)?;

    let path = std::env::temp_dir().join("adapters.fpet");
    save(&path, &model_checkpoint(&model))?;
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let mut fresh = Vit::new(cfg)?;
    assert_ne!(fresh.params()["head.w"].data(), model.params()["head.w"].data());
    apply(&mut fresh, &load(&path)?)?;
    assert_eq!(fresh.params()["head.w"].data(), model.params()["head.w"].data());
    println!("restored head and adapters bit-exactly");

    // a different architecture refuses the checkpoint
    let mut other = Vit::new(VitConfig {
        adapter: AdapterKind::AdaptFormer { rank: 4 },
        seed: 21,
        ..VitConfig::default()
    })?;
    match apply(&mut other, &load(&path)?) {
        Err(e) => println!("mismatched architecture rejected: {}", e),
        Ok(()) => unreachable!("must not load into a different adapter layout"),
    }
    Ok(())
}
