//! Generate the synthetic quadrant-code task and round-trip it through the
//! TKDS binary format.

use tokmerge::dataset::{Dataset, SyntheticSpec};

fn main() -> tokmerge::Result<()> {
    let spec = SyntheticSpec::parse("grid=8x8,patch=4,classes=4,n=256,sigma=0.1,seed=7")?;
    let ds = spec.generate()?;

    let mut counts = vec![0usize; ds.num_classes];
    for &l in &ds.labels {
        counts[usize::from(l)] += 1;
    }
    println!(
        "{} samples, {}x{}x{} pixels, {} classes, per-class counts {:?}",
        ds.len(),
        ds.channels,
        ds.height,
        ds.width,
        ds.num_classes,
        counts
    );

    let path = std::env::temp_dir().join("quadrants.tkds");
    ds.save(&path)?;
    let back = Dataset::load(&path)?;
    println!(
        "wrote {} ({} bytes), reload identical: {}",
        path.display(),
        std::fs::metadata(&path)?.len(),
        back == ds
    );

    // coarse view of sample 0: mean intensity per grid cell quadrant
    let (h, w) = (ds.height, ds.width);
    let img = &ds.pixels[..h * w];
    for qi in 0..2 {
        let mut row = String::new();
        for qj in 0..2 {
            let mut sum = 0u32;
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    sum += u32::from(img[(qi * h / 2 + i) * w + qj * w / 2 + j]);
                }
            }
            row.push_str(&format!("{:>6.1}", f64::from(sum) / ((h * w / 4) as f64)));
        }
        println!("label {} quadrant means:{}", ds.labels[0], row);
    }
    Ok(())
}
