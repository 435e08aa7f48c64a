//! Token-reduction strategies.
//!
//! Splitting (stripe and checkerboard), bipartite soft matching (the
//! heuristic top-r merge), bipartite differentiable matching (soft sigmoid
//! matrix, hard one-hot matrix, straight-through matrix), size-weighted
//! merge application, and the pooling baselines. Everything operates on
//! [`TokenState`], whose tensors live on a [`Tape`] so one implementation
//! serves both training (gradients) and plain evaluation.
//!
//! Conventions:
//! * the cls token, when present, sits at token index 0 and is always
//!   assigned to set B at B-position 0; similarity column 0 is masked so it
//!   never receives merges;
//! * hard matching rows are argmax one-hot with lowest-index tie-break,
//!   which equals strict 0.5-thresholding of the soft matrix whenever the
//!   row maximum is unique (an exact tie would otherwise produce an all-zero
//!   row and silently drop a token);
//! * merged values are size-weighted averages, identical to plain count
//!   averaging when all sizes are 1;
//! * sizes are updated from the gradient-carrying matching matrix by
//!   default; `detach_sizes` cuts that path for ablation.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitPattern {
    Stripe,
    Checkerboard,
}

/// Disjoint index sets over the token axis. Indices include the cls offset.
#[derive(Clone, Debug)]
pub struct SplitAssignment {
    pub idx_a: Vec<usize>,
    pub idx_b: Vec<usize>,
    pub pattern: SplitPattern,
}

/// A batch of tokens with bookkeeping: per-token sizes (how many original
/// patches each token represents), the patch-grid geometry while it is still
/// rectangular, and the cls flag.
#[derive(Clone)]
pub struct TokenState {
    pub tokens: Var,
    pub sizes: Var,
    /// Rectangular patch geometry; `None` once an irregular merge ran.
    pub grid: Option<(usize, usize)>,
    pub has_cls: bool,
    /// H*W of the original grid; sum of patch-token sizes must stay equal.
    pub total_patches: usize,
}

impl TokenState {
    pub fn batch(&self, tape: &Tape) -> usize {
        tape.shape_of(self.tokens)[0]
    }

    pub fn n_tokens(&self, tape: &Tape) -> usize {
        tape.shape_of(self.tokens)[1]
    }

    pub fn patch_count(&self, tape: &Tape) -> usize {
        self.n_tokens(tape) - usize::from(self.has_cls)
    }

    /// Sum of sizes over patch tokens per sample; equals `total_patches`
    /// for every sample when conservation holds.
    pub fn patch_size_sums(&self, tape: &Tape) -> Result<Vec<Elem>> {
        let s = tape.value(self.sizes);
        let (b, n) = (s.shape()[0], s.shape()[1]);
        let skip = usize::from(self.has_cls);
        Ok((0..b)
            .map(|bi| s.data()[bi * n + skip..(bi + 1) * n].iter().sum())
            .collect())
    }
}

/// Assign patch tokens to sets A and B.
///
/// Stripe: even flat patch index to A, odd to B. Checkerboard: grid cell
/// (i, j) to A when (i + j) is even; requires known rectangular geometry
/// with an even cell count. The cls token always goes to B at position 0.
pub fn split(state: &TokenState, tape: &Tape, pattern: SplitPattern) -> Result<SplitAssignment> {
    let n_patches = state.patch_count(tape);
    let off = usize::from(state.has_cls);
    let mut idx_a = Vec::new();
    let mut idx_b = Vec::new();
    if state.has_cls {
        idx_b.push(0);
    }
    match pattern {
        SplitPattern::Stripe => {
            for p in 0..n_patches {
                if p % 2 == 0 {
                    idx_a.push(off + p);
                } else {
                    idx_b.push(off + p);
                }
            }
        }
        SplitPattern::Checkerboard => {
            let (h, w) = state.grid.ok_or_else(|| {
                Error::invalid("checkerboard split needs rectangular grid geometry")
            })?;
            if h * w != n_patches {
                return Err(Error::shape(format!(
                    "grid {}x{} does not cover {} patch tokens",
                    h, w, n_patches
                )));
            }
            if (h * w) % 2 != 0 {
                return Err(Error::invalid(format!(
                    "checkerboard split needs an even cell count, got {}x{}",
                    h, w
                )));
            }
            for i in 0..h {
                for j in 0..w {
                    if (i + j) % 2 == 0 {
                        idx_a.push(off + i * w + j);
                    } else {
                        idx_b.push(off + i * w + j);
                    }
                }
            }
        }
    }
    Ok(SplitAssignment { idx_a, idx_b, pattern })
}

/// Dot-product similarity `K_A x K_B^T`, optionally row-normalized
/// (cosine). With `mask_cls`, column 0 is set to -inf so no A token ever
/// matches the cls token.
pub fn similarity(tape: &Tape, k_a: Var, k_b: Var, mask_cls: bool, cosine: bool) -> Result<Var> {
    let (ka, kb) = if cosine {
        (normalize_rows(tape, k_a)?, normalize_rows(tape, k_b)?)
    } else {
        (k_a, k_b)
    };
    let c = tape.matmul(ka, tape.transpose_last(kb)?)?;
    if !mask_cls {
        return Ok(c);
    }
    let n_b = *tape.shape_of(c).last().unwrap();
    let mut mask = Tensor::zeros(&[n_b]);
    mask.data_mut()[0] = Elem::NEG_INFINITY;
    tape.add(c, tape.constant(mask))
}

fn normalize_rows(tape: &Tape, k: Var) -> Result<Var> {
    let nd = tape.shape_of(k).len();
    let sq = tape.mul(k, k)?;
    let d = tape.shape_of(k)[nd - 1];
    let ssum = tape.scale(tape.mean_axis(sq, nd - 1)?, d as Elem);
    let mut kshape = tape.shape_of(ssum);
    kshape.push(1);
    let ssum = tape.reshape(ssum, &kshape)?;
    // sqrt via exp(ln/2); sums of squares are strictly positive with the
    // epsilon in place
    let norm = tape.exp(tape.scale(tape.ln(tape.add_scalar(ssum, 1e-12)), 0.5));
    tape.div(k, norm)
}

/// Outcome of bipartite differentiable matching for one batch.
pub struct MatchResult {
    /// Sigmoid soft matching matrix, [B, N_A, N_B].
    pub soft: Var,
    /// One-hot rows (argmax, ties to the lowest index).
    pub hard: Tensor,
    /// Straight-through matrix: forward equals `hard`, gradients flow to
    /// `soft`.
    pub ste: Var,
    /// Argmax column per A row, flattened [B * N_A].
    pub dest: Vec<usize>,
}

impl MatchResult {
    pub fn matrix(&self, tape: &Tape, kind: MatrixKind) -> Var {
        match kind {
            MatrixKind::Ste => self.ste,
            MatrixKind::Soft => self.soft,
            MatrixKind::Hard => tape.constant(self.hard.clone()),
        }
    }
}

/// Which matching matrix drives the merge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixKind {
    /// Hard forward, soft backward (the default).
    Ste,
    /// Fully soft surrogate (used by gradient checks).
    Soft,
    /// Hard as a constant (no matching gradients).
    Hard,
}

/// Bipartite differentiable matching over a similarity matrix
/// [B, N_A, N_B]: soft = sigmoid(C - mean(top1, top2)), hard = rowwise
/// argmax one-hot, ste = straight-through combination.
pub fn bdm_match(tape: &Tape, c: Var) -> Result<MatchResult> {
    let shape = tape.shape_of(c);
    if shape.len() != 3 {
        return Err(Error::shape(format!("bdm_match expects [B, N_A, N_B], got {:?}", shape)));
    }
    let n_b = shape[2];
    if n_b < 2 {
        return Err(Error::invalid(format!(
            "bdm_match needs N_B >= 2 for the top-2 average, got {}",
            n_b
        )));
    }
    let (top2, _) = tape.topk_last(c, 2)?;
    let mean12 = tape.mean_axis(top2, 2)?;
    let mut kshape = tape.shape_of(mean12);
    kshape.push(1);
    let mean12 = tape.reshape(mean12, &kshape)?;
    let soft = tape.sigmoid(tape.sub(c, mean12)?);

    let sv = tape.value(soft);
    let (b, n_a) = (shape[0], shape[1]);
    let mut hard = Tensor::zeros(&[b, n_a, n_b]);
    let mut dest = Vec::with_capacity(b * n_a);
    for row in 0..b * n_a {
        let r = &sv.data()[row * n_b..(row + 1) * n_b];
        let (mut bi, mut bv) = (0usize, r[0]);
        for (i, &v) in r.iter().enumerate().skip(1) {
            if v > bv {
                bv = v;
                bi = i;
            }
        }
        hard.data_mut()[row * n_b + bi] = 1.0;
        dest.push(bi);
    }
    let ste = tape.ste_passthrough(soft, &hard)?;
    Ok(MatchResult { soft, hard, ste, dest })
}

/// Bipartite soft matching selection: every A row computes its best B
/// column; the `r` rows with the highest best-similarity merge, the rest
/// stay. Ties (equal similarity) resolve toward the lower index.
pub struct BsmSelection {
    /// Per A row: Some(best B column) when the row merges. [B * N_A].
    pub dest: Vec<Option<usize>>,
    pub n_a: usize,
    pub n_b: usize,
    pub r: usize,
}

pub fn bsm_match(c: &Tensor, r: usize) -> Result<BsmSelection> {
    if c.ndim() != 3 {
        return Err(Error::shape(format!("bsm_match expects [B, N_A, N_B], got {:?}", c.shape())));
    }
    let (b, n_a, n_b) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    if r > n_a {
        return Err(Error::invalid(format!("bsm r = {} exceeds N_A = {}", r, n_a)));
    }
    let mut dest = vec![None; b * n_a];
    for bi in 0..b {
        // best column and value per row
        let mut best: Vec<(usize, Elem)> = Vec::with_capacity(n_a);
        for i in 0..n_a {
            let row = &c.data()[(bi * n_a + i) * n_b..(bi * n_a + i + 1) * n_b];
            let (mut bj, mut bv) = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bj = j;
                }
            }
            best.push((bj, bv));
        }
        // rank rows by best value, descending, lower row index first
        let mut order: Vec<usize> = (0..n_a).collect();
        order.sort_by(|&x, &y| {
            best[y].1.partial_cmp(&best[x].1).unwrap().then(x.cmp(&y))
        });
        for &i in order.iter().take(r) {
            dest[bi * n_a + i] = Some(best[i].0);
        }
    }
    Ok(BsmSelection { dest, n_a, n_b, r })
}

/// Per-sample token relocation map produced by one merge: index before the
/// merge to index after it.
pub type TokenMap = Vec<usize>;

pub struct MergeOutcome {
    pub state: TokenState,
    /// One map per batch sample.
    pub maps: Vec<TokenMap>,
}

fn unsqueeze_last(tape: &Tape, v: Var) -> Result<Var> {
    let mut shape = tape.shape_of(v);
    shape.push(1);
    tape.reshape(v, &shape)
}

/// Apply a full (every A row matched) matching matrix: B token j becomes
/// the size-weighted average of itself and all A tokens matched to it; the
/// output is the B tokens only, cls staying at index 0.
pub fn merge_apply_bdm(
    tape: &Tape,
    state: &TokenState,
    assign: &SplitAssignment,
    matched: &MatchResult,
    kind: MatrixKind,
    detach_sizes: bool,
) -> Result<MergeOutcome> {
    let matrix = matched.matrix(tape, kind);
    let m_shape = tape.shape_of(matrix);
    let (n_a, n_b) = (assign.idx_a.len(), assign.idx_b.len());
    if m_shape[1] != n_a || m_shape[2] != n_b {
        return Err(Error::shape(format!(
            "matching matrix {:?} inconsistent with split {}x{}",
            m_shape, n_a, n_b
        )));
    }
    let x_a = tape.index_select(state.tokens, 1, &assign.idx_a)?;
    let x_b = tape.index_select(state.tokens, 1, &assign.idx_b)?;
    let s_a = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &assign.idx_a)?)?;
    let s_b = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &assign.idx_b)?)?;

    let m_t = tape.transpose_last(matrix)?;
    let merged_sum = tape.add(tape.mul(x_b, s_b)?, tape.matmul(m_t, tape.mul(x_a, s_a)?)?)?;
    let mut new_sizes = tape.add(s_b, tape.matmul(m_t, s_a)?)?;
    if detach_sizes {
        new_sizes = tape.stop_gradient(new_sizes);
    }
    let merged = tape.div(merged_sum, new_sizes)?;

    let b = state.batch(tape);
    let sizes_flat = tape.reshape(new_sizes, &[b, n_b])?;
    let maps = (0..b)
        .map(|bi| {
            let mut map = vec![0usize; n_a + n_b];
            for (pos, &tok) in assign.idx_b.iter().enumerate() {
                map[tok] = pos;
            }
            for (row, &tok) in assign.idx_a.iter().enumerate() {
                map[tok] = matched.dest[bi * n_a + row];
            }
            map
        })
        .collect();
    Ok(MergeOutcome {
        state: TokenState {
            tokens: merged,
            sizes: sizes_flat,
            grid: None,
            has_cls: state.has_cls,
            total_patches: state.total_patches,
        },
        maps,
    })
}

/// Apply a bipartite soft matching selection: the selected A rows merge
/// into their best B token (size-weighted); output is B tokens followed by
/// the unmerged A tokens in their original order.
pub fn merge_apply_bsm(
    tape: &Tape,
    state: &TokenState,
    assign: &SplitAssignment,
    sel: &BsmSelection,
) -> Result<MergeOutcome> {
    let (n_a, n_b) = (assign.idx_a.len(), assign.idx_b.len());
    if sel.n_a != n_a || sel.n_b != n_b {
        return Err(Error::shape(format!(
            "selection {}x{} inconsistent with split {}x{}",
            sel.n_a, sel.n_b, n_a, n_b
        )));
    }
    let b = state.batch(tape);
    let x_a = tape.index_select(state.tokens, 1, &assign.idx_a)?;
    let x_b = tape.index_select(state.tokens, 1, &assign.idx_b)?;
    let s_a = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &assign.idx_a)?)?;
    let s_b = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &assign.idx_b)?)?;

    // one-hot rows for merged A tokens, zero rows otherwise
    let mut m = Tensor::zeros(&[b, n_a, n_b]);
    let mut keep: Vec<usize> = Vec::with_capacity(b * (n_a - sel.r));
    for bi in 0..b {
        for i in 0..n_a {
            match sel.dest[bi * n_a + i] {
                Some(j) => m.data_mut()[(bi * n_a + i) * n_b + j] = 1.0,
                None => keep.push(i),
            }
        }
    }
    let m = tape.constant(m);
    let m_t = tape.transpose_last(m)?;
    let merged_sum = tape.add(tape.mul(x_b, s_b)?, tape.matmul(m_t, tape.mul(x_a, s_a)?)?)?;
    let new_sizes_b = tape.add(s_b, tape.matmul(m_t, s_a)?)?;
    let merged_b = tape.div(merged_sum, new_sizes_b)?;

    let n_keep = n_a - sel.r;
    let (tokens, sizes) = if n_keep > 0 {
        let kept_x = tape.gather_rows(x_a, &keep, n_keep)?;
        let kept_s = tape.gather_rows(s_a, &keep, n_keep)?;
        (
            tape.concat(&[merged_b, kept_x], 1)?,
            tape.concat(&[new_sizes_b, kept_s], 1)?,
        )
    } else {
        (merged_b, new_sizes_b)
    };
    let sizes = tape.reshape(sizes, &[b, n_b + n_keep])?;

    let maps = (0..b)
        .map(|bi| {
            let mut map = vec![0usize; n_a + n_b];
            for (pos, &tok) in assign.idx_b.iter().enumerate() {
                map[tok] = pos;
            }
            let mut next_keep = n_b;
            for (row, &tok) in assign.idx_a.iter().enumerate() {
                match sel.dest[bi * n_a + row] {
                    Some(j) => map[tok] = j,
                    None => {
                        map[tok] = next_keep;
                        next_keep += 1;
                    }
                }
            }
            map
        })
        .collect();
    Ok(MergeOutcome {
        state: TokenState {
            tokens,
            sizes,
            grid: None,
            has_cls: state.has_cls,
            total_patches: state.total_patches,
        },
        maps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pool horizontally adjacent patch pairs: (row, 2c) with (row, 2c+1).
/// Average pooling is size-weighted; max pooling is elementwise. Sizes add
/// in both modes and the grid narrows to (H, W/2). cls is untouched.
pub fn pool_merge(tape: &Tape, state: &TokenState, mode: PoolMode) -> Result<MergeOutcome> {
    let (h, w) = state
        .grid
        .ok_or_else(|| Error::invalid("pooling needs rectangular grid geometry"))?;
    if w % 2 != 0 {
        return Err(Error::invalid(format!("pooling needs even grid width, got {}", w)));
    }
    let off = usize::from(state.has_cls);
    let mut left = Vec::with_capacity(h * w / 2);
    let mut right = Vec::with_capacity(h * w / 2);
    for r in 0..h {
        for c in 0..w / 2 {
            left.push(off + r * w + 2 * c);
            right.push(off + r * w + 2 * c + 1);
        }
    }
    let x_l = tape.index_select(state.tokens, 1, &left)?;
    let x_r = tape.index_select(state.tokens, 1, &right)?;
    let s_l = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &left)?)?;
    let s_r = unsqueeze_last(tape, tape.index_select(state.sizes, 1, &right)?)?;
    let sizes_new = tape.add(s_l, s_r)?;
    let pooled = match mode {
        PoolMode::Avg => {
            let num = tape.add(tape.mul(x_l, s_l)?, tape.mul(x_r, s_r)?)?;
            tape.div(num, sizes_new)?
        }
        PoolMode::Max => tape.maximum(x_l, x_r)?,
    };
    let b = state.batch(tape);
    let (tokens, sizes) = if state.has_cls {
        let cls_x = tape.narrow(state.tokens, 1, 0, 1)?;
        let cls_s = unsqueeze_last(tape, tape.narrow(state.sizes, 1, 0, 1)?)?;
        (
            tape.concat(&[cls_x, pooled], 1)?,
            tape.concat(&[cls_s, sizes_new], 1)?,
        )
    } else {
        (pooled, sizes_new)
    };
    let n_out = h * w / 2 + off;
    let sizes = tape.reshape(sizes, &[b, n_out])?;

    let map = {
        let mut map = vec![0usize; off + h * w];
        for r in 0..h {
            for c in 0..w {
                map[off + r * w + c] = off + r * (w / 2) + c / 2;
            }
        }
        map
    };
    Ok(MergeOutcome {
        state: TokenState {
            tokens,
            sizes,
            grid: Some((h, w / 2)),
            has_cls: state.has_cls,
            total_patches: state.total_patches,
        },
        maps: vec![map; b],
    })
}

/// Render per-patch merge-group ids as a text grid, one row per grid row.
pub fn group_text(grid: (usize, usize), groups: &[usize]) -> String {
    let (h, w) = grid;
    debug_assert_eq!(groups.len(), h * w);
    let width = groups.iter().max().map(|m| m.to_string().len()).unwrap_or(1);
    let mut out = String::new();
    for r in 0..h {
        for c in 0..w {
            if c > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{:>width$}", groups[r * w + c], width = width));
        }
        out.push('\n');
    }
    out
}

/// Render per-patch merge-group ids as a binary PPM (P6) image, `cell`
/// pixels per patch, colors cycling through a fixed palette by group id.
pub fn group_ppm(grid: (usize, usize), groups: &[usize], cell: usize) -> Vec<u8> {
    let (h, w) = grid;
    debug_assert_eq!(groups.len(), h * w);
    let palette: [(u8, u8, u8); 12] = [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 190),
        (0, 128, 128),
        (128, 128, 0),
    ];
    let (ph, pw) = (h * cell, w * cell);
    let mut out = format!("P6\n{} {}\n255\n", pw, ph).into_bytes();
    for py in 0..ph {
        for px in 0..pw {
            let g = groups[(py / cell) * w + px / cell];
            let (r, gg, b) = palette[g % palette.len()];
            out.extend_from_slice(&[r, gg, b]);
        }
    }
    out
}
