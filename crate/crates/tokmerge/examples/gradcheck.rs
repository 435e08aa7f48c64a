//! Finite-difference check of the key-refinement gradient path.
//!
//! The matching matrix is discrete, so training runs through the
//! straight-through surrogate. Differentiating the soft-surrogate forward
//! (hard matrix swapped for the sigmoid one) must agree with central
//! finite differences. Keys are detached before refinement, so the
//! matching branch sends no gradient back into the backbone.

use tokmerge::autodiff::Tape;
use tokmerge::dataset::SyntheticSpec;
use tokmerge::merging::{
    bdm_match, merge_apply_bdm, similarity, split, MatrixKind, SplitPattern, TokenState,
};
use tokmerge::tensor::Tensor;
use tokmerge::vit::{AdapterKind, ForwardOpts, MergeMethod, Vit, VitConfig};
use tokmerge::Elem;

fn loss_of(model: &Vit, images: &Tensor, labels: &[usize]) -> tokmerge::Result<Elem> {
    let tape = Tape::new();
    let opts = ForwardOpts { matrix: MatrixKind::Soft, track_frozen: false };
    let out = model.forward(&tape, images, &opts)?;
    let loss = tape.cross_entropy(out.logits, labels)?;
    tape.value(loss).item()
}

fn main() -> tokmerge::Result<()> {
    let cfg = VitConfig {
        depth: 2,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        grid: (4, 4),
        patch_size: 2,
        num_classes: 3,
        merge: MergeMethod::Bdm,
        merge_layer: Some(0),
        adapter: AdapterKind::AdaptFormer { rank: 4 },
        refine_rank: 4,
        seed: 11,
        ..VitConfig::default()
    };
    let spec = SyntheticSpec {
        grid: (4, 4),
        patch_px: 2,
        classes: 3,
        count: 2,
        sigma: 0.2,
        seed: 99,
        ..SyntheticSpec::default()
    };
    let ds = spec.generate()?;
    let images = ds.image_batch(&[0, 1])?;
    let labels = ds.label_batch(&[0, 1]);
    let mut model = Vit::new(cfg)?;

    // nudge the refinement weights off zero so the soft matrix actually
    // depends on them
    let name = "merge.refine.w_up";
    let mut w = model.params()[name].clone();
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        *v = 0.01 * ((i % 7) as Elem - 3.0);
    }
    model.set_param(name, w)?;

    let tape = Tape::new();
    let opts = ForwardOpts { matrix: MatrixKind::Soft, track_frozen: false };
    let out = model.forward(&tape, &images, &opts)?;
    let loss = tape.cross_entropy(out.logits, &labels)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.grad(out.vars[name]);

    let eps: Elem = 1e-5;
    let mut worst: Elem = 0.0;
    for i in [0usize, 3, 10, 17] {
        let base = model.params()[name].clone();
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        model.set_param(name, plus)?;
        let up = loss_of(&model, &images, &labels)?;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        model.set_param(name, minus)?;
        let down = loss_of(&model, &images, &labels)?;
        model.set_param(name, base)?;

        let fd = (up - down) / (2.0 * eps);
        let an = analytic.data()[i];
        let rel = (an - fd).abs() / fd.abs().max(1e-8);
        worst = rel.max(worst);
        println!("w_up[{:>2}]  analytic {:>12.8}  fd {:>12.8}  rel err {:.2e}", i, an, fd, rel);
    }
    println!("worst rel err: {:.2e}", worst);

    // stop-gradient contract: merge output depends on the keys, yet the
    // detached similarity path returns exactly zero key gradient
    let tape = Tape::new();
    let mut rng = tokmerge::rng::rng_from(5);
    let keys = tape.leaf(Tensor::randn(&[1, 4, 4], 1.0, &mut rng));
    let state = TokenState {
        tokens: tape.leaf(Tensor::randn(&[1, 4, 4], 1.0, &mut rng)),
        sizes: tape.leaf(Tensor::ones(&[1, 4])),
        grid: Some((2, 2)),
        has_cls: false,
        total_patches: 4,
    };
    let detached = tape.stop_gradient(keys);
    let assign = split(&state, &tape, SplitPattern::Checkerboard)?;
    let k_a = tape.index_select(detached, 1, &assign.idx_a)?;
    let k_b = tape.index_select(detached, 1, &assign.idx_b)?;
    let matched = bdm_match(&tape, similarity(&tape, k_a, k_b, false, false)?)?;
    let merged = merge_apply_bdm(&tape, &state, &assign, &matched, MatrixKind::Ste, false)?;
    let g = tape.backward(tape.sum_all(merged.state.tokens))?;
    let key_grad = g.grad(keys);
    let token_grad = g.grad(state.tokens);
    println!(
        "key grad all zero: {}, token grad nonzero: {}",
        key_grad.data().iter().all(|&v| v == 0.0),
        token_grad.data().iter().any(|&v| v != 0.0)
    );
    Ok(())
}
