//! Multi-scale token recycling.
//!
//! Patch tokens are average-pooled to several grid scales, tagged with a
//! learned per-scale embedding, re-encoded by a short transformer stack, and
//! split into two branches: a pooled summary added to the class token, and a
//! low-dimensional unit-norm map whose Gram matrix is trained against a
//! binary cross-scale contrast map.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{block_forward, BlockParams, Dropout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MstrConfig {
    pub enabled: bool,
    /// Grid side per scale, finest first. `None` resolves to
    /// `[g, ⌈g/2⌉, ⌈g/4⌉]` with repeated sizes dropped.
    pub scales: Option<Vec<usize>>,
    pub num_transformer_layers: usize,
    pub map_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Whether the diagonal of the contrast map enters the recycling loss.
    pub include_diagonal: bool,
}

impl Default for MstrConfig {
    fn default() -> Self {
        MstrConfig {
            enabled: true,
            scales: None,
            num_transformer_layers: 2,
            map_dim: 16,
            num_heads: 4,
            mlp_ratio: 4,
            include_diagonal: true,
        }
    }
}

impl MstrConfig {
    /// The concrete scale list for a base grid of side `g`.
    pub fn resolve_scales(&self, g: usize) -> Result<Vec<usize>> {
        let scales = match &self.scales {
            Some(s) => s.clone(),
            None => {
                let mut s: Vec<usize> = vec![g, g.div_ceil(2), g.div_ceil(4)];
                s.dedup();
                s
            }
        };
        validate_scales(&scales, g)?;
        Ok(scales)
    }

    pub fn validate(&self, g: usize, embed_dim: usize) -> Result<()> {
        self.resolve_scales(g)?;
        if self.num_transformer_layers == 0 || self.map_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Parameter(
                "num_transformer_layers, map_dim and mlp_ratio must be ≥ 1".into(),
            ));
        }
        if self.num_heads == 0 || embed_dim % self.num_heads != 0 {
            return Err(Error::Parameter(format!(
                "mstr num_heads {} must divide embed_dim {embed_dim}",
                self.num_heads
            )));
        }
        Ok(())
    }
}

fn validate_scales(scales: &[usize], g: usize) -> Result<()> {
    if scales.first() != Some(&g) {
        return Err(Error::Parameter(format!(
            "first scale must equal the encoder grid {g}, got {scales:?}"
        )));
    }
    if scales.windows(2).any(|w| w[1] >= w[0]) || scales.contains(&0) {
        return Err(Error::Parameter(format!(
            "scales must be positive and strictly decreasing, got {scales:?}"
        )));
    }
    Ok(())
}

/// Half-open cell range `[start, end)` covered by output cell `i` when
/// adaptively pooling `g` cells down to `s`.
fn pool_range(i: usize, g: usize, s: usize) -> (usize, usize) {
    ((i * g) / s, ((i + 1) * g).div_ceil(s))
}

/// Region of one multi-scale token on the base grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenRegion {
    pub scale: usize,
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Base-grid regions of every token, scale blocks in config order, each block
/// row-major.
pub fn token_regions(scales: &[usize], g: usize) -> Vec<TokenRegion> {
    let mut out = Vec::new();
    for (k, &s) in scales.iter().enumerate() {
        for oy in 0..s {
            for ox in 0..s {
                out.push(TokenRegion {
                    scale: k,
                    rows: pool_range(oy, g, s),
                    cols: pool_range(ox, g, s),
                });
            }
        }
    }
    out
}

/// `[T, g²]` matrix whose rows average the base cells each token covers.
pub fn pooling_matrix(scales: &[usize], g: usize) -> Tensor {
    let regions = token_regions(scales, g);
    let m = g * g;
    let mut data = vec![0.0; regions.len() * m];
    for (t, r) in regions.iter().enumerate() {
        let count = ((r.rows.1 - r.rows.0) * (r.cols.1 - r.cols.0)) as f64;
        for y in r.rows.0..r.rows.1 {
            for x in r.cols.0..r.cols.1 {
                data[t * m + y * g + x] = 1.0 / count;
            }
        }
    }
    Tensor::new(&[regions.len(), m], data).expect("consistent extents")
}

/// Pooled token blocks, one per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleTokens {
    pub scales: Vec<usize>,
    /// Block `k` is `[scales[k]², D]`.
    pub blocks: Vec<Tensor>,
}

impl MultiScaleTokens {
    pub fn total_tokens(&self) -> usize {
        self.scales.iter().map(|s| s * s).sum()
    }

    /// All blocks stacked in scale order, `[T, D]`.
    pub fn concatenated(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.blocks.iter().collect();
        crate::tensor::kernels::concat(&refs, 0)
    }
}

/// Adaptive average pooling of a `g×g` token grid to every configured scale.
pub fn multiscale_pool(patches: &Tensor, g: usize, cfg: &MstrConfig) -> Result<MultiScaleTokens> {
    if patches.rank() != 2 || patches.shape()[0] != g * g {
        return Err(Error::Dimension(format!(
            "multiscale_pool: {:?} is not a {g}×{g} token grid",
            patches.shape()
        )));
    }
    let scales = cfg.resolve_scales(g)?;
    let mut blocks = Vec::with_capacity(scales.len());
    for &s in &scales {
        let pooled = pooling_matrix(&[s], g).matmul(patches)?;
        blocks.push(pooled);
    }
    Ok(MultiScaleTokens { scales, blocks })
}

/// Binary target Gram matrix over the concatenated multi-scale tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastMap {
    pub map: Tensor,
    pub scales: Vec<usize>,
}

impl ContrastMap {
    pub fn size(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn ones(&self) -> usize {
        self.map.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.map.at2(i, j) as u8)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Gap in cells between two half-open intervals (0 when they overlap).
fn interval_gap(a: (usize, usize), b: (usize, usize)) -> usize {
    if a.1 <= b.0 {
        b.0 + 1 - a.1
    } else if b.1 <= a.0 {
        a.0 + 1 - b.1
    } else {
        0
    }
}

/// `MAP[i][j] = 1` iff `i == j`, or `i` and `j` sit on different scales and
/// their base-grid regions overlap or touch (Chebyshev distance ≤ 1 cell).
/// Distinct tokens on the same scale are always 0.
pub fn build_contrast_map(cfg: &MstrConfig, g: usize) -> Result<ContrastMap> {
    let scales = cfg.resolve_scales(g)?;
    let regions = token_regions(&scales, g);
    let t = regions.len();
    let mut data = vec![0.0; t * t];
    for (i, a) in regions.iter().enumerate() {
        for (j, b) in regions.iter().enumerate() {
            let linked = i == j
                || (a.scale != b.scale
                    && interval_gap(a.rows, b.rows).max(interval_gap(a.cols, b.cols)) <= 1);
            if linked {
                data[i * t + j] = 1.0;
            }
        }
    }
    Ok(ContrastMap {
        map: Tensor::new(&[t, t], data)?,
        scales,
    })
}

/// Parameter handles of the recycling head.
#[derive(Clone, Debug, PartialEq)]
pub struct MstrParams {
    pub scale_embed: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
    /// `D → D`, zero-initialized so the head starts as a no-op on the class token.
    pub to_cls: Linear,
    /// `D → map_dim`
    pub to_map: ParamId,
    pub scales: Vec<usize>,
    pub grid: usize,
    pub num_heads: usize,
}

impl MstrParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &MstrConfig,
        grid: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(grid, dim)?;
        let scales = cfg.resolve_scales(grid)?;
        let scale_embed = store.add(
            format!("{name}.scale_embed"),
            Tensor::randn(&[scales.len(), dim], 0.02, rng),
        );
        let blocks = (0..cfg.num_transformer_layers)
            .map(|l| BlockParams::new(store, &format!("{name}.blocks.{l}"), dim, cfg.mlp_ratio, rng))
            .collect();
        let norm = Norm::new(store, &format!("{name}.norm"), dim);
        let to_cls = Linear::zeros(store, &format!("{name}.to_cls"), dim, dim);
        let to_map = store.add(
            format!("{name}.to_map.weight"),
            crate::params::xavier(dim, cfg.map_dim, rng),
        );
        Ok(MstrParams {
            scale_embed,
            blocks,
            norm,
            to_cls,
            to_map,
            scales,
            grid,
            num_heads: cfg.num_heads,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.scales.iter().map(|s| s * s).sum()
    }
}

/// Outputs of the recycling head for a batch.
#[derive(Clone, Copy, Debug)]
pub struct RecycleOutput {
    /// `[B, D]`, added to the class token.
    pub delta_cls: Var,
    /// `[B, T, map_dim]`, rows unit-norm.
    pub map_features: Var,
}

/// Runs the recycling head on `patches: [B, M, D]`.
pub fn recycle(g: &mut Graph, p: &Bound, head: &MstrParams, patches: Var) -> Result<RecycleOutput> {
    let shape = g.shape(patches).to_vec();
    let m = head.grid * head.grid;
    if shape.len() != 3 || shape[1] != m {
        return Err(Error::Dimension(format!(
            "recycle expects [batch, {m}, dim], got {shape:?}"
        )));
    }
    let pool = g.constant(pooling_matrix(&head.scales, head.grid));
    let tokens = g.matmul(pool, patches)?;

    // One-hot [T, S] selector expands the per-scale embedding to every token.
    let t = head.total_tokens();
    let mut sel = vec![0.0; t * head.scales.len()];
    let mut row = 0;
    for (k, s) in head.scales.iter().enumerate() {
        for _ in 0..s * s {
            sel[row * head.scales.len() + k] = 1.0;
            row += 1;
        }
    }
    let sel = g.constant(Tensor::new(&[t, head.scales.len()], sel)?);
    let scale_emb = g.matmul(sel, p[head.scale_embed])?;
    let mut x = g.add_broadcast(tokens, scale_emb)?;

    let mut dropout = Dropout::off();
    for blk in &head.blocks {
        x = block_forward(g, p, blk, x, head.num_heads, &mut dropout)?.0;
    }
    let x = head.norm.forward(g, p, x)?;

    let summary = g.mean_axis(x, 1)?;
    let delta_cls = head.to_cls.forward(g, p, summary)?;
    let reduced = g.matmul(x, p[head.to_map])?;
    let map_features = g.l2_normalize(reduced);
    Ok(RecycleOutput {
        delta_cls,
        map_features,
    })
}

/// Mean squared difference between the Gram matrix of `map_features`
/// (`[T, k]` or `[B, T, k]`) and the contrast map, averaged over the batch.
///
/// With `include_diagonal == false` the `i == j` entries are left out of both
/// the sum and the count.
pub fn loss_recycling(
    g: &mut Graph,
    map_features: Var,
    map: &ContrastMap,
    include_diagonal: bool,
) -> Result<Var> {
    let shape = g.shape(map_features).to_vec();
    let t = map.size();
    let rows = match shape.len() {
        2 | 3 => shape[shape.len() - 2],
        _ => 0,
    };
    if rows != t {
        return Err(Error::Dimension(format!(
            "loss_recycling: features {shape:?} vs contrast map {t}×{t}"
        )));
    }
    let ft = g.transpose(map_features)?;
    let gram = g.matmul(map_features, ft)?;
    let neg_map = g.constant(map.map.map(|v| -v));
    let diff = g.add_broadcast(gram, neg_map)?;
    let sq = g.mul(diff, diff)?;
    if include_diagonal {
        return Ok(g.mean_all(sq));
    }
    let mut off = Tensor::ones(&[t, t]);
    for i in 0..t {
        off.data_mut()[i * t + i] = 0.0;
    }
    let off = g.constant(off);
    let masked = g.mul_broadcast(sq, off)?;
    let total = g.sum_all(masked);
    let batch = if shape.len() == 3 { shape[0] } else { 1 };
    let count = (batch * t * (t - 1)).max(1) as f64;
    Ok(g.scale(total, 1.0 / count))
}

/// Mask of same-scale off-diagonal pairs, used by the diversity diagnostics.
pub fn same_scale_offdiag_mask(scales: &[usize]) -> Rc<Vec<bool>> {
    let mut ids = Vec::new();
    for (k, s) in scales.iter().enumerate() {
        ids.extend(std::iter::repeat_n(k, s * s));
    }
    let t = ids.len();
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            mask[i * t + j] = i != j && ids[i] == ids[j];
        }
    }
    Rc::new(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(scales: &[usize]) -> MstrConfig {
        MstrConfig {
            scales: Some(scales.to_vec()),
            ..MstrConfig::default()
        }
    }

    #[test]
    fn default_scales() {
        let c = MstrConfig::default();
        assert_eq!(c.resolve_scales(4).unwrap(), vec![4, 2, 1]);
        assert_eq!(c.resolve_scales(14).unwrap(), vec![14, 7, 4]);
        assert_eq!(c.resolve_scales(2).unwrap(), vec![2, 1]);
    }

    #[test]
    fn scale_validation() {
        assert!(cfg_with(&[2, 2]).resolve_scales(2).is_err());
        assert!(cfg_with(&[3, 1]).resolve_scales(4).is_err());
        assert!(cfg_with(&[4, 0]).resolve_scales(4).is_err());
    }

    #[test]
    fn pool_two_by_two_to_one() {
        let patches = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ms = multiscale_pool(&patches, 2, &cfg_with(&[2, 1])).unwrap();
        assert_eq!(ms.blocks[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ms.blocks[1].data(), &[2.5]);
        assert_eq!(ms.total_tokens(), 5);
    }

    #[test]
    fn pool_constant_tokens_stay_constant() {
        let patches = Tensor::full(&[16, 3], 0.7);
        let ms = multiscale_pool(&patches, 4, &MstrConfig::default()).unwrap();
        for b in &ms.blocks {
            assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn pool_matches_window_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let patches = Tensor::randn(&[16, 5], 1.0, &mut rng);
        let ms = multiscale_pool(&patches, 4, &cfg_with(&[4, 2])).unwrap();
        assert_eq!(ms.blocks[0], patches);
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..5 {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += patches.at2((2 * oy + dy) * 4 + 2 * ox + dx, c);
                        }
                    }
                    assert!((ms.blocks[1].at2(oy * 2 + ox, c) - s / 4.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_rejects_non_grid() {
        let err = multiscale_pool(&Tensor::zeros(&[5, 2]), 2, &cfg_with(&[2, 1])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn map_single_scale_is_identity() {
        let m = build_contrast_map(&cfg_with(&[2]), 2).unwrap();
        assert_eq!(m.map, Tensor::eye(4));
    }

    #[test]
    fn map_two_scales_on_two_grid() {
        let m = build_contrast_map(&cfg_with(&[2, 1]), 2).unwrap();
        assert_eq!(m.size(), 5);
        assert_eq!(m.ones(), 13);
        for j in 0..4 {
            assert_eq!(m.map.at2(4, j), 1.0);
        }
    }

    #[test]
    fn map_structure_on_default_scales() {
        let m = build_contrast_map(&MstrConfig::default(), 4).unwrap();
        let t = m.size();
        assert_eq!(t, 21);
        let ids: Vec<usize> = [16, 4, 1].iter().enumerate().flat_map(|(k, &n)| vec![k; n]).collect();
        for i in 0..t {
            assert_eq!(m.map.at2(i, i), 1.0);
            for j in 0..t {
                let v = m.map.at2(i, j);
                assert!(v == 0.0 || v == 1.0);
                assert_eq!(v, m.map.at2(j, i));
                if i != j && ids[i] == ids[j] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn recycling_loss_examples() {
        // Gram equal to the map.
        let mut g = Graph::new();
        let map = build_contrast_map(&cfg_with(&[2]), 2).unwrap();
        let f = g.constant(Tensor::eye(4));
        let l = loss_recycling(&mut g, f, &map, true).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);

        // Orthonormal rows that are not the standard basis.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rows = Tensor::from_rows(&[vec![s, s], vec![s, -s]]).unwrap();
        let map2 = ContrastMap {
            map: Tensor::eye(2),
            scales: vec![1],
        };
        let f = g.constant(rows);
        let l = loss_recycling(&mut g, f, &map2, true).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-15);

        // All-zero rows miss exactly the T diagonal ones.
        let f = g.constant(Tensor::zeros(&[4, 3]));
        let l = loss_recycling(&mut g, f, &map, true).unwrap();
        assert!((g.value(l).item().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn recycling_loss_shape_mismatch() {
        let mut g = Graph::new();
        let map = build_contrast_map(&cfg_with(&[2]), 2).unwrap();
        let f = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(loss_recycling(&mut g, f, &map, true), Err(Error::Dimension(_))));
    }

    #[test]
    fn recycling_loss_without_diagonal() {
        let mut g = Graph::new();
        let map = build_contrast_map(&cfg_with(&[2]), 2).unwrap();
        let f = g.constant(Tensor::zeros(&[4, 3]));
        let l = loss_recycling(&mut g, f, &map, false).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn recycling_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = build_contrast_map(&MstrConfig::default(), 4).unwrap();
        let x = Tensor::randn(&[2, 21, 6], 1.0, &mut rng);
        for diag in [true, false] {
            let err = grad_check(
                |g, x| {
                    let f = g.l2_normalize(x);
                    loss_recycling(g, f, &map, diag)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    fn head_fixture(seed: u64) -> (ParamStore, MstrParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = MstrParams::new(&mut store, "mstr", &MstrConfig::default(), 4, 8, &mut rng).unwrap();
        (store, head)
    }

    #[test]
    fn recycle_outputs_are_normalized_and_deterministic() {
        let (store, head) = head_fixture(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let patches = Tensor::randn(&[2, 16, 8], 1.0, &mut rng);
        let run = || {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant(patches.clone());
            let out = recycle(&mut g, &p, &head, x).unwrap();
            (g.value(out.delta_cls).clone(), g.value(out.map_features).clone())
        };
        let (d1, m1) = run();
        let (d2, m2) = run();
        assert_eq!(d1, d2);
        assert_eq!(m1, m2);
        assert_eq!(m1.shape(), &[2, 21, 16]);
        for r in 0..m1.rows() {
            let n: f64 = m1.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        // Zero-initialized class projection.
        assert!(d1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recycle_zero_in_zero_params_gives_zero_delta() {
        let (mut store, head) = head_fixture(4);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 16, 8]));
        let out = recycle(&mut g, &p, &head, x).unwrap();
        assert!(g.value(out.delta_cls).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_descent_on_free_map_increases_within_scale_diversity() {
        let map = build_contrast_map(&MstrConfig::default(), 4).unwrap();
        let mask = same_scale_offdiag_mask(&map.scales);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Start from near-collinear rows, the collapsed regime.
        let base = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let mut free = Tensor::randn(&[21, 16], 0.1, &mut rng);
        for r in 0..21 {
            for c in 0..16 {
                free.data_mut()[r * 16 + c] += base.data()[c];
            }
        }
        let offdiag = |x: &Tensor| {
            let f = x.l2_normalize_rows();
            let gram = f.matmul(&f.transpose().unwrap()).unwrap();
            let vals: Vec<f64> = gram
                .data()
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.abs())
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let before = offdiag(&free);
        let mut prev_loss = f64::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(free.clone());
            let f = g.l2_normalize(x);
            let l = loss_recycling(&mut g, f, &map, true).unwrap();
            let loss = g.value(l).item().unwrap();
            assert!(loss <= prev_loss + 1e-12);
            prev_loss = loss;
            let grads = g.backward(l).unwrap();
            let gr = grads.get(x).unwrap();
            for (p, d) in free.data_mut().iter_mut().zip(gr.data()) {
                *p -= 0.5 * d;
            }
        }
        assert!(offdiag(&free) < before, "{} vs {before}", offdiag(&free));
    }
}
