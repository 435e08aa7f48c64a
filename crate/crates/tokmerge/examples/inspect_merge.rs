//! Visualize which patches ended up merged together.
//!
//! Runs one synthetic sample through a merged encoder and renders the
//! composed token groups as a text grid and a PPM image.

use tokmerge::autodiff::Tape;
use tokmerge::dataset::SyntheticSpec;
use tokmerge::merging::{group_ppm, group_text};
use tokmerge::vit::{compose_groups, renumber_groups, MergeMethod, Vit, VitConfig};

fn main() -> tokmerge::Result<()> {
    let cfg = VitConfig {
        merge: MergeMethod::Bdm,
        merge_layer: Some(2),
        seed: 3,
        ..VitConfig::default()
    };
    let ds = SyntheticSpec { count: 4, sigma: 0.05, seed: 3, ..SyntheticSpec::default() }
        .generate()?;

    let model = Vit::new(cfg)?;
    let tape = Tape::new();
    let out = model.forward(&tape, &ds.image_batch(&[0])?, &Default::default())?;
    println!("label {}, tokens {:?}", ds.labels[0], out.token_counts);

    let groups = compose_groups(out.token_counts[0], &out.traces, 0);
    let patch_groups = renumber_groups(&groups[1..]); // skip cls
    println!("{}", group_text(model.cfg.grid, &patch_groups));

    let path = std::env::temp_dir().join("merge_groups.ppm");
    std::fs::write(&path, group_ppm(model.cfg.grid, &patch_groups, 24))?;
    println!("wrote {}", path.display());
    Ok(())
}
