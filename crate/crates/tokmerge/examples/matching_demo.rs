//! Bipartite differentiable matching on a hand-sized 2x2 token grid.
//!
//! Four tokens, two obvious clusters. Shows the checkerboard split, the
//! similarity scores, the soft and hard matching matrices, and the merged
//! size-weighted tokens.

use tokmerge::autodiff::Tape;
use tokmerge::merging::{
    bdm_match, merge_apply_bdm, similarity, split, MatrixKind, SplitPattern, TokenState,
};
use tokmerge::Tensor;

fn main() -> tokmerge::Result<()> {
    let tape = Tape::new();
    // tokens at grid cells (0,0) (0,1) (1,0) (1,1); rows 0 and 1 match,
    // rows 2 and 3 match
    let tokens = tape.leaf(Tensor::new(
        vec![1, 4, 2],
        vec![2.0, 0.0, 4.0, 0.0, 0.0, 4.0, 0.0, 2.0],
    )?);
    let keys = tape.constant(Tensor::new(
        vec![1, 4, 2],
        vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
    )?);
    let state = TokenState {
        tokens,
        sizes: tape.leaf(Tensor::ones(&[1, 4])),
        grid: Some((2, 2)),
        has_cls: false,
        total_patches: 4,
    };

    let assign = split(&state, &tape, SplitPattern::Checkerboard)?;
    println!("set A (even cells): {:?}", assign.idx_a);
    println!("set B (odd cells):  {:?}", assign.idx_b);

    let k_a = tape.index_select(keys, 1, &assign.idx_a)?;
    let k_b = tape.index_select(keys, 1, &assign.idx_b)?;
    let scores = similarity(&tape, k_a, k_b, false, false)?;
    println!("similarity scores: {:?}", tape.value(scores).data());

    let matched = bdm_match(&tape, scores)?;
    println!("soft matrix: {:?}", tape.value(matched.soft).data());
    println!("hard matrix: {:?}", matched.hard.data());
    println!("destinations (A row -> B column): {:?}", matched.dest);

    let merged = merge_apply_bdm(&tape, &state, &assign, &matched, MatrixKind::Ste, false)?;
    println!("merged tokens: {:?}", tape.value(merged.state.tokens).data());
    println!("merged sizes:  {:?}", tape.value(merged.state.sizes).data());
    println!("token map (original -> merged): {:?}", merged.maps[0]);

    // the straight-through matrix carries gradients back into the tokens
    let total = tape.sum_all(merged.state.tokens);
    let grads = tape.backward(total)?;
    println!("d(sum)/d(tokens): {:?}", grads.grad(tokens).data());
    Ok(())
}
