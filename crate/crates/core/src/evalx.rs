//! Retrieval metrics and representation diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, Raster};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{Modality, ModelBundle, Stream};
use crate::vit::encode;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `K → R@K`.
    pub recall: BTreeMap<usize, f64>,
    pub gallery_size: usize,
    pub query_count: usize,
}

impl RetrievalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// `{"recall": {"1": …, "5": …}, "gallery_size": …, "query_count": …}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("reports always serialize")
    }

    /// Values in `[0, 1]` and nondecreasing in `K`.
    pub fn is_consistent(&self) -> bool {
        let v: Vec<f64> = self.recall.values().copied().collect();
        v.iter().all(|r| (0.0..=1.0).contains(r)) && v.windows(2).all(|w| w[0] <= w[1])
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dimension(format!("{what} must be a matrix, got {:?}", t.shape())));
    }
    Ok(())
}

/// Position of the ground truth in the cosine ranking of row `q`; ties go to
/// the lower gallery index.
fn rank_of(query: &[f64], gallery: &Tensor, gt: usize) -> usize {
    let sims: Vec<f64> = (0..gallery.shape()[0])
        .map(|j| query.iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum())
        .collect();
    let s = sims[gt];
    sims.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < gt))
        .count()
}

/// Recall@K of `query: [Q, d]` against `gallery: [G, d]`, where `gt[q]` is
/// the gallery row of query `q`. Rows are L2-normalized here.
pub fn recall_at_k(query: &Tensor, gallery: &Tensor, gt: &[usize], ks: &[usize]) -> Result<RetrievalReport> {
    check_matrix(query, "query embeddings")?;
    check_matrix(gallery, "gallery embeddings")?;
    let (q, g) = (query.shape()[0], gallery.shape()[0]);
    if query.shape()[1] != gallery.shape()[1] {
        return Err(Error::Dimension(format!(
            "query {:?} and gallery {:?} disagree on width",
            query.shape(),
            gallery.shape()
        )));
    }
    if gt.len() != q {
        return Err(Error::Contract(format!("{q} queries but {} ground-truth entries", gt.len())));
    }
    if let Some(&bad) = gt.iter().find(|&&i| i >= g) {
        return Err(Error::Contract(format!("ground truth {bad} outside gallery of {g}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > g) {
        return Err(Error::Parameter(format!("K = {k} must lie in 1..={g}")));
    }
    let (qn, gn) = (query.l2_normalize_rows(), gallery.l2_normalize_rows());
    let ranks: Vec<usize> = (0..q).map(|i| rank_of(qn.row(i), &gn, gt[i])).collect();
    let recall = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, if q == 0 { 0.0 } else { hits as f64 / q as f64 })
        })
        .collect();
    Ok(RetrievalReport {
        recall,
        gallery_size: g,
        query_count: q,
    })
}

/// Unit-norm joint embeddings of a list of rasters.
pub fn embed_gallery(bundle: &ModelBundle, rasters: &[Raster], modality: Modality) -> Result<Tensor> {
    bundle.embed(rasters, modality)
}

/// Sketch → image retrieval over a dataset: the given sketches query the
/// full image gallery. `ks` larger than the gallery are dropped.
pub fn evaluate(bundle: &ModelBundle, ds: &PairedDataset, sketches: &[usize], ks: &[usize]) -> Result<RetrievalReport> {
    let gallery_rasters: Vec<Raster> = ds.images.iter().map(|i| i.raster.clone()).collect();
    let query_rasters: Vec<Raster> = sketches.iter().map(|&i| ds.sketches[i].raster.clone()).collect();
    let gt: Vec<usize> = sketches.iter().map(|&i| ds.sketches[i].image_index).collect();
    let gallery = embed_gallery(bundle, &gallery_rasters, Modality::Image)?;
    let query = embed_gallery(bundle, &query_rasters, Modality::Sketch)?;
    let ks: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k <= gallery_rasters.len()).collect();
    recall_at_k(&query, &gallery, &gt, &ks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// `|i − j|` on the flattened token index.
    #[default]
    Index,
    /// Euclidean distance between token positions on the square patch grid.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadDistance {
    pub mean: f64,
    pub var: f64,
    /// Per-token average attention distance.
    pub mu: Vec<f64>,
}

/// Attention-distance statistics of every head of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub heads: Vec<HeadDistance>,
}

const ROW_SUM_TOL: f64 = 1e-6;

/// Per-head attention distance of `att: [heads, M', M']` with `M'` either
/// `M` or `M + 1` (leading class token, excluded from the sums).
///
/// `μ_i = Σ_j A_ij·d(i,j)`, `Mean = (1/M)Σ_i μ_i`,
/// `Var = (1/M)Σ_i Σ_j (A_ij·d(i,j) − μ_i)²`.
pub fn attention_distance(att: &Tensor, patch_count: usize, metric: DistanceMetric) -> Result<DistanceStats> {
    let s = att.shape();
    if s.len() != 3 || s[1] != s[2] || !(s[1] == patch_count || s[1] == patch_count + 1) || patch_count == 0 {
        return Err(Error::Dimension(format!(
            "attention must be [heads, M', M'] with M' ∈ {{{patch_count}, {}}}, got {s:?}",
            patch_count + 1
        )));
    }
    let (heads, t) = (s[0], s[1]);
    let skip = t - patch_count;
    let side = (patch_count as f64).sqrt().round() as usize;
    if metric == DistanceMetric::Grid && side * side != patch_count {
        return Err(Error::Parameter(format!("grid distance needs a square token count, got {patch_count}")));
    }
    let dist = |i: usize, j: usize| match metric {
        DistanceMetric::Index => i.abs_diff(j) as f64,
        DistanceMetric::Grid => {
            let (dy, dx) = ((i / side).abs_diff(j / side) as f64, (i % side).abs_diff(j % side) as f64);
            (dy * dy + dx * dx).sqrt()
        }
    };
    let d = att.data();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let a = |i: usize, j: usize| d[(h * t + i) * t + j];
        for i in 0..t {
            let sum: f64 = (0..t).map(|j| a(i, j)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || (0..t).any(|j| !(a(i, j) >= 0.0)) {
                return Err(Error::Validity(format!(
                    "attention row {i} of head {h} is not a distribution (sum {sum})"
                )));
            }
        }
        let m = patch_count;
        let mu: Vec<f64> = (0..m)
            .map(|i| (0..m).map(|j| a(i + skip, j + skip) * dist(i, j)).sum())
            .collect();
        let mean = mu.iter().sum::<f64>() / m as f64;
        let var = (0..m)
            .map(|i| (0..m).map(|j| (a(i + skip, j + skip) * dist(i, j) - mu[i]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / m as f64;
        out.push(HeadDistance { mean, var, mu });
    }
    Ok(DistanceStats { heads: out })
}

/// Similarity spread of a token set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    /// Mean cosine similarity over the strict upper triangle.
    pub mean_similarity: f64,
    /// Population variance of those similarities.
    pub variance: f64,
}

pub fn token_stats(tokens: &Tensor) -> Result<TokenStats> {
    check_matrix(tokens, "tokens")?;
    let m = tokens.shape()[0];
    if m < 2 {
        return Err(Error::Parameter(format!("token statistics need at least 2 tokens, got {m}")));
    }
    let n = tokens.l2_normalize_rows();
    let mut sims = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            sims.push(n.row(i).iter().zip(n.row(j)).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let variance = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sims.len() as f64;
    Ok(TokenStats {
        mean_similarity: mean,
        variance,
    })
}

/// One raster's diagnostics: attention distance per encoder layer, and token
/// statistics before and after the recycling head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub modality: Modality,
    pub layers: Vec<DistanceStats>,
    /// Encoder patch tokens.
    pub patch_tokens: TokenStats,
    /// Recycling map features; absent without a head.
    pub recycled_tokens: Option<TokenStats>,
}

pub fn diagnose(bundle: &ModelBundle, raster: &Raster, modality: Modality, metric: DistanceMetric) -> Result<Diagnostics> {
    let stream = match modality {
        Modality::Sketch => Stream::Sketch,
        Modality::Image => Stream::Image,
    };
    let cfg = &bundle.config.encoder;
    let tokens = encode(raster, &bundle.store, bundle.encoder_for(stream), cfg, None)?;
    let layers = tokens
        .attention
        .iter()
        .map(|a| attention_distance(a, cfg.num_patches(), metric))
        .collect::<Result<_>>()?;
    let recycled_tokens = match bundle.map_features(raster, modality)? {
        Some(f) => Some(token_stats(&f)?),
        None => None,
    };
    Ok(Diagnostics {
        modality,
        layers,
        patch_tokens: token_stats(&tokens.patches)?,
        recycled_tokens,
    })
}
