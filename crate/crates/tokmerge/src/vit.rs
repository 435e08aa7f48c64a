//! Vision-Transformer encoder hosting adapters and a token-merge module.
//!
//! Pre-norm blocks, learned positional embeddings, multi-head self-attention
//! that exposes head-averaged keys for the merge module. The merge runs
//! inside its block after the attention residual and before the FFN, so the
//! FFN already sees the reduced sequence. The backbone is frozen under the
//! tuning regime; only adapters and the head train (see
//! [`crate::adapters::is_trainable`]).

use std::collections::BTreeMap;

use crate::adapters::{self, AdapterSite, AdapterWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::merging::{
    bdm_match, bsm_match, merge_apply_bdm, merge_apply_bsm, pool_merge, similarity, split,
    MatrixKind, PoolMode, SplitPattern, TokenMap, TokenState,
};
use crate::rng::{rng_from, streams, substream};
use crate::tensor::Tensor;
use crate::Elem;

pub const LN_EPS: Elem = 1e-6;
const INIT_STD: Elem = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMethod {
    None,
    /// Differentiable matching: checkerboard split, refined keys, STE.
    Bdm,
    /// Heuristic one-shot merge of the `r` best A rows (all of A when
    /// unset) at the merge layer.
    Bsm { r: Option<usize>, pattern: SplitPattern },
    /// Heuristic merge of `r` tokens at every layer.
    BsmPerLayer { r: usize },
    AvgPool,
    MaxPool,
}

impl MergeMethod {
    pub fn needs_merge_layer(&self) -> bool {
        matches!(
            self,
            MergeMethod::Bdm | MergeMethod::Bsm { .. } | MergeMethod::AvgPool | MergeMethod::MaxPool
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    None,
    /// Low-rank deltas on the attention query and value projections.
    Lora { rank: usize },
    /// ReLU bottleneck running in parallel with the FFN.
    AdaptFormer { rank: usize },
}

#[derive(Clone, Debug)]
pub struct VitConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    /// Pixels per patch side.
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub use_cls: bool,
    pub merge: MergeMethod,
    pub merge_layer: Option<usize>,
    pub adapter: AdapterKind,
    pub adapter_scale: Elem,
    /// Hidden width of the key-refinement adapter (BDM only).
    pub refine_rank: usize,
    pub refine_scale: Elem,
    /// Cut the gradient path through the size update.
    pub detach_sizes: bool,
    /// Cosine instead of raw dot-product similarity.
    pub cosine_sim: bool,
    /// Add log(size) to attention logits (ablation; off by default).
    pub proportional_attention: bool,
    pub seed: u64,
}

impl Default for VitConfig {
    /// Toy scale: depth 4, dim 64, heads 4, 8x8 grid with cls.
    fn default() -> VitConfig {
        VitConfig {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            grid: (8, 8),
            patch_size: 4,
            in_channels: 1,
            num_classes: 4,
            use_cls: true,
            merge: MergeMethod::None,
            merge_layer: None,
            adapter: AdapterKind::None,
            adapter_scale: 1.0,
            refine_rank: 8,
            refine_scale: 1.0,
            detach_sizes: false,
            cosine_sim: false,
            proportional_attention: false,
            seed: 0,
        }
    }
}

impl VitConfig {
    /// The 224x224 configuration the efficiency numbers are quoted for.
    pub fn vit_b16() -> VitConfig {
        VitConfig {
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            grid: (14, 14),
            patch_size: 16,
            in_channels: 3,
            num_classes: 1000,
            use_cls: true,
            ..VitConfig::default()
        }
    }

    pub fn key_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn n_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.use_cls)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("depth, dim, heads, mlp_ratio must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return Err(Error::config("grid, patch_size, in_channels must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        match self.merge_layer {
            Some(l) if l >= self.depth => {
                return Err(Error::config(format!(
                    "merge_layer {} out of range for depth {}",
                    l, self.depth
                )));
            }
            None if self.merge.needs_merge_layer() => {
                return Err(Error::config("this merge method needs merge_layer"));
            }
            _ => {}
        }
        if matches!(self.merge, MergeMethod::Bdm) {
            if self.n_patches() % 2 != 0 {
                return Err(Error::config(format!(
                    "checkerboard merging needs an even patch count, got {}x{}",
                    self.grid.0, self.grid.1
                )));
            }
            // top-2 needs two unmasked columns next to the protected cls
            let n_b = self.n_patches() / 2 + usize::from(self.use_cls);
            if n_b < 2 + usize::from(self.use_cls) {
                return Err(Error::config("grid too small for differentiable matching"));
            }
            if self.refine_rank == 0 || self.refine_rank >= self.key_dim() {
                return Err(Error::config(format!(
                    "refine_rank {} must satisfy 0 < rank < key dim {}",
                    self.refine_rank,
                    self.key_dim()
                )));
            }
        }
        if let MergeMethod::Bsm { pattern: SplitPattern::Checkerboard, .. } = self.merge {
            if self.n_patches() % 2 != 0 {
                return Err(Error::config(format!(
                    "checkerboard merging needs an even patch count, got {}x{}",
                    self.grid.0, self.grid.1
                )));
            }
        }
        if matches!(self.merge, MergeMethod::AvgPool | MergeMethod::MaxPool) && self.grid.1 % 2 != 0
        {
            return Err(Error::config(format!(
                "pooling needs an even grid width, got {}",
                self.grid.1
            )));
        }
        match self.adapter {
            AdapterKind::Lora { rank } | AdapterKind::AdaptFormer { rank } => {
                if rank == 0 || rank >= self.dim {
                    return Err(Error::config(format!(
                        "adapter rank {} must satisfy 0 < rank < dim {}",
                        rank, self.dim
                    )));
                }
            }
            AdapterKind::None => {}
        }
        Ok(())
    }
}

/// Tokens entering each block plus the final count (`depth + 1` entries).
pub fn token_schedule(cfg: &VitConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let cls = usize::from(cfg.use_cls);
    let mut patches = cfg.n_patches();
    let mut counts = Vec::with_capacity(cfg.depth + 1);
    for layer in 0..cfg.depth {
        counts.push(patches + cls);
        let fires = cfg.merge_layer == Some(layer);
        match cfg.merge {
            MergeMethod::None => {}
            MergeMethod::Bdm if fires => patches -= patches / 2,
            MergeMethod::Bsm { r, .. } if fires => {
                let n_a = patches.div_ceil(2);
                patches -= r.unwrap_or(n_a).min(n_a);
            }
            MergeMethod::BsmPerLayer { r } => {
                patches -= r.min(patches.div_ceil(2));
            }
            MergeMethod::AvgPool | MergeMethod::MaxPool if fires => patches /= 2,
            _ => {}
        }
    }
    counts.push(patches + cls);
    Ok(counts)
}

/// Post-attention tokens plus the head-averaged keys and attention
/// probabilities of the same layer.
pub struct AttentionOut {
    pub tokens: Var,
    /// Head-averaged keys [B, N, dim/heads]; row i belongs to token i.
    pub keys: Var,
    /// Softmax rows [B, heads, N, N]; each sums to 1.
    pub probs: Var,
}

/// One merge event: the block it ran in and, per sample, the map from
/// token index before the merge to token index after it.
pub struct MergeTrace {
    pub layer: usize,
    pub maps: Vec<TokenMap>,
}

/// Final token index for each of the `n_initial` starting tokens.
pub fn compose_groups(n_initial: usize, traces: &[MergeTrace], sample: usize) -> Vec<usize> {
    let mut cur: Vec<usize> = (0..n_initial).collect();
    for t in traces {
        for g in cur.iter_mut() {
            *g = t.maps[sample][*g];
        }
    }
    cur
}

/// Relabel group ids to 0..k in first-appearance order.
pub fn renumber_groups(groups: &[usize]) -> Vec<usize> {
    let mut names: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    groups
        .iter()
        .map(|&g| {
            *names.entry(g).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

pub struct ForwardOpts {
    pub matrix: MatrixKind,
    /// Register frozen parameters as differentiable leaves too (gradient
    /// diagnostics); training leaves them as constants.
    pub track_frozen: bool,
}

impl Default for ForwardOpts {
    fn default() -> ForwardOpts {
        ForwardOpts { matrix: MatrixKind::Ste, track_frozen: false }
    }
}

pub struct ForwardOut {
    pub logits: Var,
    /// Every parameter's tape handle, keyed by name.
    pub vars: BTreeMap<String, Var>,
    /// Tokens entering each block plus the final count.
    pub token_counts: Vec<usize>,
    pub traces: Vec<MergeTrace>,
    /// Token state after the last block (pre final norm).
    pub state: TokenState,
}

pub struct Vit {
    pub cfg: VitConfig,
    params: BTreeMap<String, Tensor>,
}

impl Vit {
    pub fn new(cfg: VitConfig) -> Result<Vit> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        let d = cfg.dim;
        let dh = cfg.mlp_ratio * d;
        let pd = cfg.in_channels * cfg.patch_size * cfg.patch_size;

        // backbone draws come from their own stream in a fixed order, so
        // adapter or head changes never shift backbone init
        let mut rng = rng_from(substream(cfg.seed, streams::BACKBONE));
        let put = |map: &mut BTreeMap<String, Tensor>, name: String, t: Tensor| {
            map.insert(name, t);
        };
        put(&mut params, "embed.w".into(), Tensor::randn(&[pd, d], INIT_STD, &mut rng));
        put(&mut params, "embed.b".into(), Tensor::zeros(&[d]));
        if cfg.use_cls {
            put(&mut params, "embed.cls".into(), Tensor::randn(&[1, 1, d], INIT_STD, &mut rng));
        }
        put(
            &mut params,
            "embed.pos".into(),
            Tensor::randn(&[cfg.n_tokens(), d], INIT_STD, &mut rng),
        );
        for i in 0..cfg.depth {
            let p = |s: &str| format!("blocks.{}.{}", i, s);
            put(&mut params, p("ln1.gamma"), Tensor::ones(&[d]));
            put(&mut params, p("ln1.beta"), Tensor::zeros(&[d]));
            for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
                put(&mut params, p(w), Tensor::randn(&[d, d], INIT_STD, &mut rng));
            }
            for b in ["attn.b_q", "attn.b_k", "attn.b_v", "attn.b_o"] {
                put(&mut params, p(b), Tensor::zeros(&[d]));
            }
            put(&mut params, p("ln2.gamma"), Tensor::ones(&[d]));
            put(&mut params, p("ln2.beta"), Tensor::zeros(&[d]));
            put(&mut params, p("ffn.w1"), Tensor::randn(&[d, dh], INIT_STD, &mut rng));
            put(&mut params, p("ffn.b1"), Tensor::zeros(&[dh]));
            put(&mut params, p("ffn.w2"), Tensor::randn(&[dh, d], INIT_STD, &mut rng));
            put(&mut params, p("ffn.b2"), Tensor::zeros(&[d]));
        }
        put(&mut params, "ln_f.gamma".into(), Tensor::ones(&[d]));
        put(&mut params, "ln_f.beta".into(), Tensor::zeros(&[d]));

        let mut rng = rng_from(substream(cfg.seed, streams::HEAD));
        put(&mut params, "head.w".into(), Tensor::randn(&[d, cfg.num_classes], INIT_STD, &mut rng));
        put(&mut params, "head.b".into(), Tensor::zeros(&[cfg.num_classes]));

        let mut rng = rng_from(substream(cfg.seed, streams::ADAPTERS));
        for i in 0..cfg.depth {
            match cfg.adapter {
                AdapterKind::Lora { rank } => {
                    for (site, tag) in [(AdapterSite::AttnQ, "q"), (AdapterSite::AttnV, "v")] {
                        let a = AdapterWeights::init(site, d, rank, cfg.adapter_scale, &mut rng)?;
                        params.insert(format!("blocks.{}.attn.{}.adapter.w_down", i, tag), a.w_down);
                        params.insert(format!("blocks.{}.attn.{}.adapter.w_up", i, tag), a.w_up);
                    }
                }
                AdapterKind::AdaptFormer { rank } => {
                    let a = AdapterWeights::init(
                        AdapterSite::FfnParallel,
                        d,
                        rank,
                        cfg.adapter_scale,
                        &mut rng,
                    )?;
                    params.insert(format!("blocks.{}.ffn.adapter.w_down", i), a.w_down);
                    params.insert(format!("blocks.{}.ffn.adapter.w_up", i), a.w_up);
                }
                AdapterKind::None => {}
            }
        }
        if matches!(cfg.merge, MergeMethod::Bdm) {
            let a = AdapterWeights::init(
                AdapterSite::KeyRefine,
                cfg.key_dim(),
                cfg.refine_rank,
                cfg.refine_scale,
                &mut rng,
            )?;
            params.insert("merge.refine.w_down".into(), a.w_down);
            params.insert("merge.refine.w_up".into(), a.w_up);
        }
        Ok(Vit { cfg, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(t) if t.shape() == value.shape() => {
                *t = value;
                Ok(())
            }
            Some(t) => Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                t.shape(),
                value.shape()
            ))),
            None => Err(Error::invalid(format!("unknown parameter {}", name))),
        }
    }

    /// (trainable, frozen) parameter names, each sorted.
    pub fn partition(&self) -> (Vec<String>, Vec<String>) {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for name in self.params.keys() {
            if adapters::is_trainable(name) {
                trainable.push(name.clone());
            } else {
                frozen.push(name.clone());
            }
        }
        (trainable, frozen)
    }

    pub fn param_count(&self, names: &[String]) -> usize {
        names.iter().map(|n| self.params[n].len()).sum()
    }

    /// FNV-1a over the frozen parameters' bytes, in name order.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.params {
            if adapters::is_trainable(name) {
                continue;
            }
            for b in name.as_bytes() {
                h = (h ^ u64::from(*b)).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    fn var(&self, vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter {}", name)))
    }

    fn linear(&self, tape: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        tape.add(tape.matmul(x, w)?, b)
    }

    fn mhsa(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        layer: usize,
        state: &TokenState,
    ) -> Result<AttentionOut> {
        let cfg = &self.cfg;
        let p = |s: &str| format!("blocks.{}.{}", layer, s);
        let x = state.tokens;
        let (b, n) = (state.batch(tape), state.n_tokens(tape));
        let (d, h) = (cfg.dim, cfg.heads);
        let dk = cfg.key_dim();

        let xl = tape.layer_norm(x, self.var(vars, &p("ln1.gamma"))?, self.var(vars, &p("ln1.beta"))?, LN_EPS)?;
        let mut q = self.linear(tape, xl, self.var(vars, &p("attn.w_q"))?, self.var(vars, &p("attn.b_q"))?)?;
        let k = self.linear(tape, xl, self.var(vars, &p("attn.w_k"))?, self.var(vars, &p("attn.b_k"))?)?;
        let mut v = self.linear(tape, xl, self.var(vars, &p("attn.w_v"))?, self.var(vars, &p("attn.b_v"))?)?;
        if matches!(cfg.adapter, AdapterKind::Lora { .. }) {
            q = tape.add(
                q,
                adapters::lora_delta(
                    tape,
                    xl,
                    self.var(vars, &p("attn.q.adapter.w_down"))?,
                    self.var(vars, &p("attn.q.adapter.w_up"))?,
                    cfg.adapter_scale,
                )?,
            )?;
            v = tape.add(
                v,
                adapters::lora_delta(
                    tape,
                    xl,
                    self.var(vars, &p("attn.v.adapter.w_down"))?,
                    self.var(vars, &p("attn.v.adapter.w_up"))?,
                    cfg.adapter_scale,
                )?,
            )?;
        }

        let heads = |t: Var| -> Result<Var> {
            tape.permute(tape.reshape(t, &[b, n, h, dk])?, &[0, 2, 1, 3])
        };
        let (qh, kh, vh) = (heads(q)?, heads(k)?, heads(v)?);
        let mut scores = tape.scale(
            tape.matmul(qh, tape.transpose_last(kh)?)?,
            1.0 / (dk as Elem).sqrt(),
        );
        if cfg.proportional_attention {
            let logsz = tape.reshape(tape.ln(state.sizes), &[b, 1, 1, n])?;
            scores = tape.add(scores, logsz)?;
        }
        let probs = tape.softmax_last(scores)?;
        let ctx = tape.reshape(
            tape.permute(tape.matmul(probs, vh)?, &[0, 2, 1, 3])?,
            &[b, n, d],
        )?;
        let out = self.linear(tape, ctx, self.var(vars, &p("attn.w_o"))?, self.var(vars, &p("attn.b_o"))?)?;
        let tokens = tape.add(x, out)?;
        let keys = tape.mean_axis(tape.reshape(k, &[b, n, h, dk])?, 2)?;
        Ok(AttentionOut { tokens, keys, probs })
    }

    fn ffn(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        layer: usize,
        x: Var,
    ) -> Result<Var> {
        let p = |s: &str| format!("blocks.{}.{}", layer, s);
        let xl = tape.layer_norm(x, self.var(vars, &p("ln2.gamma"))?, self.var(vars, &p("ln2.beta"))?, LN_EPS)?;
        let mid = tape.gelu(self.linear(tape, xl, self.var(vars, &p("ffn.w1"))?, self.var(vars, &p("ffn.b1"))?)?);
        let f = self.linear(tape, mid, self.var(vars, &p("ffn.w2"))?, self.var(vars, &p("ffn.b2"))?)?;
        let mut out = tape.add(x, f)?;
        if matches!(self.cfg.adapter, AdapterKind::AdaptFormer { .. }) {
            out = tape.add(
                out,
                adapters::adaptformer_branch(
                    tape,
                    xl,
                    self.var(vars, &p("ffn.adapter.w_down"))?,
                    self.var(vars, &p("ffn.adapter.w_up"))?,
                    self.cfg.adapter_scale,
                )?,
            )?;
        }
        Ok(out)
    }

    fn merge_in_block(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        layer: usize,
        state: TokenState,
        keys: Var,
        opts: &ForwardOpts,
        traces: &mut Vec<MergeTrace>,
    ) -> Result<TokenState> {
        let cfg = &self.cfg;
        let fires = cfg.merge_layer == Some(layer);
        match cfg.merge {
            MergeMethod::None => Ok(state),
            MergeMethod::Bdm if fires => {
                let assign = split(&state, tape, SplitPattern::Checkerboard)?;
                if assign.idx_b.len() < 2 + usize::from(state.has_cls) {
                    return Err(Error::invalid(
                        "differentiable matching needs at least two unprotected B tokens",
                    ));
                }
                // keys are detached: matching must not alter the backbone
                let detached = tape.stop_gradient(keys);
                let refined = adapters::refine_keys(
                    tape,
                    detached,
                    self.var(vars, "merge.refine.w_down")?,
                    self.var(vars, "merge.refine.w_up")?,
                    cfg.refine_scale,
                )?;
                let ka = tape.index_select(refined, 1, &assign.idx_a)?;
                let kb = tape.index_select(refined, 1, &assign.idx_b)?;
                let c = similarity(tape, ka, kb, state.has_cls, cfg.cosine_sim)?;
                let m = bdm_match(tape, c)?;
                let out = merge_apply_bdm(tape, &state, &assign, &m, opts.matrix, cfg.detach_sizes)?;
                traces.push(MergeTrace { layer, maps: out.maps });
                Ok(out.state)
            }
            MergeMethod::Bsm { r, pattern } if fires => {
                let assign = split(&state, tape, pattern)?;
                let ka = tape.index_select(keys, 1, &assign.idx_a)?;
                let kb = tape.index_select(keys, 1, &assign.idx_b)?;
                let c = similarity(tape, ka, kb, state.has_cls, cfg.cosine_sim)?;
                let n_a = assign.idx_a.len();
                let sel = bsm_match(&tape.value(c), r.unwrap_or(n_a).min(n_a))?;
                let out = merge_apply_bsm(tape, &state, &assign, &sel)?;
                traces.push(MergeTrace { layer, maps: out.maps });
                Ok(out.state)
            }
            MergeMethod::BsmPerLayer { r } => {
                let assign = split(&state, tape, SplitPattern::Stripe)?;
                let r_eff = r.min(assign.idx_a.len());
                if r_eff == 0 {
                    return Ok(state);
                }
                let ka = tape.index_select(keys, 1, &assign.idx_a)?;
                let kb = tape.index_select(keys, 1, &assign.idx_b)?;
                let c = similarity(tape, ka, kb, state.has_cls, cfg.cosine_sim)?;
                let sel = bsm_match(&tape.value(c), r_eff)?;
                let out = merge_apply_bsm(tape, &state, &assign, &sel)?;
                traces.push(MergeTrace { layer, maps: out.maps });
                Ok(out.state)
            }
            MergeMethod::AvgPool | MergeMethod::MaxPool if fires => {
                let mode = if matches!(cfg.merge, MergeMethod::AvgPool) {
                    PoolMode::Avg
                } else {
                    PoolMode::Max
                };
                let out = pool_merge(tape, &state, mode)?;
                traces.push(MergeTrace { layer, maps: out.maps });
                Ok(out.state)
            }
            _ => Ok(state),
        }
    }

    /// Cut images [B, C, H*P, W*P] into row-major patches [B, H*W, C*P*P].
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (gh, gw) = cfg.grid;
        let p = cfg.patch_size;
        let want = [cfg.in_channels, gh * p, gw * p];
        if images.ndim() != 4 || images.shape()[1..] != want {
            return Err(Error::shape(format!(
                "expected images [B, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                images.shape()
            )));
        }
        let b = images.shape()[0];
        let (c, ih, iw) = (want[0], want[1], want[2]);
        let mut out = Tensor::zeros(&[b, gh * gw, c * p * p]);
        let src = images.data();
        let dst = out.data_mut();
        let pf = c * p * p;
        for bi in 0..b {
            for gi in 0..gh {
                for gj in 0..gw {
                    let patch = gi * gw + gj;
                    for ci in 0..c {
                        for pi in 0..p {
                            for pj in 0..p {
                                let sy = gi * p + pi;
                                let sx = gj * p + pj;
                                dst[(bi * gh * gw + patch) * pf + ci * p * p + pi * p + pj] =
                                    src[((bi * c + ci) * ih + sy) * iw + sx];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed(
        &self,
        tape: &Tape,
        vars: &BTreeMap<String, Var>,
        images: &Tensor,
    ) -> Result<TokenState> {
        let cfg = &self.cfg;
        let patches = tape.constant(self.patchify(images)?);
        let b = images.shape()[0];
        let mut x = self.linear(tape, patches, self.var(vars, "embed.w")?, self.var(vars, "embed.b")?)?;
        if cfg.use_cls {
            // broadcast the learned cls vector across the batch
            let cls = tape.add(
                self.var(vars, "embed.cls")?,
                tape.constant(Tensor::zeros(&[b, 1, cfg.dim])),
            )?;
            x = tape.concat(&[cls, x], 1)?;
        }
        x = tape.add(x, self.var(vars, "embed.pos")?)?;
        Ok(TokenState {
            tokens: x,
            sizes: tape.constant(Tensor::ones(&[b, cfg.n_tokens()])),
            grid: Some(cfg.grid),
            has_cls: cfg.use_cls,
            total_patches: cfg.n_patches(),
        })
    }

    fn classify(&self, tape: &Tape, vars: &BTreeMap<String, Var>, state: &TokenState) -> Result<Var> {
        let xl = tape.layer_norm(
            state.tokens,
            self.var(vars, "ln_f.gamma")?,
            self.var(vars, "ln_f.beta")?,
            LN_EPS,
        )?;
        let b = state.batch(tape);
        let feat = if state.has_cls {
            tape.reshape(tape.narrow(xl, 1, 0, 1)?, &[b, self.cfg.dim])?
        } else {
            tape.mean_axis(xl, 1)?
        };
        self.linear(tape, feat, self.var(vars, "head.w")?, self.var(vars, "head.b")?)
    }

    pub fn forward(&self, tape: &Tape, images: &Tensor, opts: &ForwardOpts) -> Result<ForwardOut> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if adapters::is_trainable(name) || opts.track_frozen {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        let mut state = self.embed(tape, &vars, images)?;
        let mut traces = Vec::new();
        let mut token_counts = Vec::with_capacity(self.cfg.depth + 1);
        for layer in 0..self.cfg.depth {
            token_counts.push(state.n_tokens(tape));
            let attn = self.mhsa(tape, &vars, layer, &state)?;
            state.tokens = attn.tokens;
            state = self.merge_in_block(tape, &vars, layer, state, attn.keys, opts, &mut traces)?;
            state.tokens = self.ffn(tape, &vars, layer, state.tokens)?;
        }
        token_counts.push(state.n_tokens(tape));
        let logits = self.classify(tape, &vars, &state)?;
        Ok(ForwardOut { logits, vars, token_counts, traces, state })
    }
}
