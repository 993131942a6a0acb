//! Training objectives: the multi-positive contrastive loss, its sketch/image
//! compositions, the recycling term, and a triplet baseline.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mstr::{loss_recycling, ContrastMap};
use crate::tensor::{Graph, Tensor, Var};

/// The four encoder streams plus the two projected embeddings of a batch.
#[derive(Clone, Copy, Debug)]
pub struct SiameseBatch {
    pub f_skt: Var,
    pub f_skt_aug: Option<Var>,
    pub f_img: Var,
    pub f_img_aug: Option<Var>,
    pub out_skt: Var,
    pub out_img: Var,
}

/// Per-term loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub multi: f64,
    pub inter: f64,
    pub intra: f64,
    pub recycling: f64,
    pub total: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// Names the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("multi", self.multi),
            ("inter", self.inter),
            ("intra", self.intra),
            ("recycling", self.recycling),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Graph handles of the individual terms, for backprop and reporting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub multi: Option<Var>,
    pub inter: Option<Var>,
    pub intra: Option<Var>,
    pub recycling: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, tau: f64) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).data()[0]);
        LossBreakdown {
            multi: v(self.multi),
            inter: v(self.inter),
            intra: v(self.intra),
            recycling: v(self.recycling),
            total: g.value(self.total).data()[0],
            tau,
        }
    }
}

/// Knobs shared by the contrastive compositions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveOptions {
    pub tau: f64,
    /// Anchor every block in turn instead of only the first.
    pub symmetric: bool,
    /// Include the encoder-level sketch↔image term.
    pub use_inter: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            tau: 0.07,
            symmetric: false,
            use_inter: true,
        }
    }
}

/// Multi-positive contrastive loss over `n ≥ 2` equally shaped `[N, d]` blocks.
///
/// Rows are L2-normalized, stacked into `F` of `L = n·N` rows, and for each
/// anchor `i` of the first block
///
/// `−log( Σ_{z≥1} exp(F_i·F_{zN+i}/τ) / Σ_{j≠i} exp(F_i·F_j/τ) )`
///
/// is averaged over the `N` anchors. With `symmetric`, the rows of every block
/// serve as anchors and the result is averaged over all `L` of them.
pub fn contrastive(g: &mut Graph, parts: &[Var], tau: f64, symmetric: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    if parts.len() < 2 {
        return Err(Error::Contract(format!(
            "contrastive loss needs at least 2 feature blocks, got {}",
            parts.len()
        )));
    }
    let shape = g.shape(parts[0]).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Dimension(format!(
            "feature blocks must be non-empty [N, d] matrices, got {shape:?}"
        )));
    }
    for &p in &parts[1..] {
        if g.shape(p) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "feature blocks disagree: {shape:?} vs {:?}",
                g.shape(p)
            )));
        }
    }
    let n = shape[0];
    let l = n * parts.len();
    let normed: Vec<Var> = parts.iter().map(|&p| g.l2_normalize(p)).collect();
    let all = g.concat(&normed, 0)?;
    let anchors_n = if symmetric { l } else { n };
    let anchors = g.slice(all, 0, 0, anchors_n)?;
    let all_t = g.transpose(all)?;
    let sims = g.matmul(anchors, all_t)?;
    let logits = g.scale(sims, 1.0 / tau);

    let mut pos = vec![false; anchors_n * l];
    let mut den = vec![false; anchors_n * l];
    for a in 0..anchors_n {
        for j in 0..l {
            den[a * l + j] = j != a;
            pos[a * l + j] = j != a && j % n == a % n;
        }
    }
    let lse_pos = g.masked_logsumexp(logits, Rc::new(pos))?;
    let lse_den = g.masked_logsumexp(logits, Rc::new(den))?;
    let per_anchor = g.sub(lse_den, lse_pos)?;
    Ok(g.mean_all(per_anchor))
}

fn sum_terms(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// `multi + inter + intra` for the dual weight-sharing setup.
///
/// Needs both augmented streams; use [`single_stream_loss`] when there are
/// none.
pub fn basic_loss(g: &mut Graph, sb: &SiameseBatch, opts: &ContrastiveOptions) -> Result<LossTerms> {
    let (Some(skt_aug), Some(img_aug)) = (sb.f_skt_aug, sb.f_img_aug) else {
        return Err(Error::Contract(
            "basic loss needs both augmented streams (f'_skt, f'_img)".into(),
        ));
    };
    let multi = contrastive(g, &[sb.out_skt, sb.out_img], opts.tau, opts.symmetric)?;
    let inter = if opts.use_inter {
        Some(contrastive(g, &[sb.f_skt, sb.f_img], opts.tau, opts.symmetric)?)
    } else {
        None
    };
    let intra_s = contrastive(g, &[sb.f_skt, skt_aug], opts.tau, opts.symmetric)?;
    let intra_i = contrastive(g, &[sb.f_img, img_aug], opts.tau, opts.symmetric)?;
    let intra = g.add(intra_s, intra_i)?;
    let mut terms = vec![multi, intra];
    terms.extend(inter);
    let total = sum_terms(g, &terms)?;
    Ok(LossTerms {
        multi: Some(multi),
        inter,
        intra: Some(intra),
        recycling: None,
        total,
    })
}

/// Single-stream variant: no augmented counterparts, so no intra term.
pub fn single_stream_loss(
    g: &mut Graph,
    sb: &SiameseBatch,
    opts: &ContrastiveOptions,
) -> Result<LossTerms> {
    let multi = contrastive(g, &[sb.out_skt, sb.out_img], opts.tau, opts.symmetric)?;
    let inter = if opts.use_inter {
        Some(contrastive(g, &[sb.f_skt, sb.f_img], opts.tau, opts.symmetric)?)
    } else {
        None
    };
    let mut terms = vec![multi];
    terms.extend(inter);
    let total = sum_terms(g, &terms)?;
    Ok(LossTerms {
        multi: Some(multi),
        inter,
        intra: None,
        recycling: None,
        total,
    })
}

/// Adds one recycling term per modality (`map_features` each `[B, T, k]`) to
/// a basic breakdown.
pub fn full_loss(
    g: &mut Graph,
    basic: LossTerms,
    map_features: &[Var],
    map: &ContrastMap,
    include_diagonal: bool,
) -> Result<LossTerms> {
    if map_features.is_empty() {
        return Err(Error::Contract("full loss needs recycling features".into()));
    }
    let per_stream = map_features
        .iter()
        .map(|&f| loss_recycling(g, f, map, include_diagonal))
        .collect::<Result<Vec<_>>>()?;
    let recycling = sum_terms(g, &per_stream)?;
    let total = g.add(basic.total, recycling)?;
    Ok(LossTerms {
        recycling: Some(recycling),
        total,
        ..basic
    })
}

/// `mean_i max(0, ‖a_i − p_i‖ − ‖a_i − n_i‖ + margin)`.
pub fn triplet(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if !(margin >= 0.0) {
        return Err(Error::Parameter(format!("triplet margin must be ≥ 0, got {margin}")));
    }
    let shape = g.shape(anchor).to_vec();
    if shape.len() != 2 || g.shape(positive) != shape.as_slice() || g.shape(negative) != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "triplet inputs must share an [N, d] shape: {:?}, {:?}, {:?}",
            shape,
            g.shape(positive),
            g.shape(negative)
        )));
    }
    let dist = |g: &mut Graph, other: Var| -> Result<Var> {
        let d = g.sub(anchor, other)?;
        let sq = g.mul(d, d)?;
        let s = g.sum_axis(sq, 1)?;
        let s = g.add_scalar(s, TRIPLET_EPS);
        g.sqrt(s)
    };
    let dp = dist(g, positive)?;
    let dn = dist(g, negative)?;
    let gap = g.sub(dp, dn)?;
    let gap = g.add_scalar(gap, margin);
    let hinge = g.relu(gap);
    Ok(g.mean_all(hinge))
}

/// Keeps the distance differentiable at zero.
pub const TRIPLET_EPS: f64 = 1e-12;

/// Value-level helper: the contrastive loss of plain matrices.
pub fn contrastive_value(parts: &[Tensor], tau: f64, symmetric: bool) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
    let l = contrastive(&mut g, &vars, tau, symmetric)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, grad_check_multi};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    /// Straight transcription of the loss with explicit loops over (i, j).
    fn naive(parts: &[Tensor], tau: f64) -> f64 {
        let n = parts[0].shape()[0];
        let rows: Vec<Vec<f64>> = parts
            .iter()
            .flat_map(|p| {
                let p = p.l2_normalize_rows();
                (0..n).map(move |i| p.row(i).to_vec()).collect::<Vec<_>>()
            })
            .collect();
        let l = rows.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let mut num = 0.0;
            for z in 1..l / n {
                num += (dot(&rows[i], &rows[n * z + i]) / tau).exp();
            }
            let mut den = 0.0;
            for j in 0..l {
                if j != i {
                    den += (dot(&rows[i], &rows[j]) / tau).exp();
                }
            }
            total += (num / den).ln();
        }
        -total / n as f64
    }

    #[test]
    fn singleton_batch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 4], 1.0, &mut rng);
        assert!(contrastive_value(&[a, b], 0.07, false).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthonormal_rows_give_log_three() {
        let rows = basis(4, 4);
        let a = Tensor::from_rows(&rows[..2]).unwrap();
        let b = Tensor::from_rows(&rows[2..]).unwrap();
        let v = contrastive_value(&[a, b], 1.0, false).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn identical_views_orthonormal_items() {
        let rows = basis(2, 2);
        let a = Tensor::from_rows(&rows).unwrap();
        let v = contrastive_value(&[a.clone(), a], 1.0, false).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 2.0)).ln())).abs() < 1e-9);
        assert!((v - 0.551444713932051).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..100 {
            let n_blocks = 2 + trial % 2;
            let n = 1 + trial % 5;
            let parts: Vec<Tensor> = (0..n_blocks).map(|_| Tensor::randn(&[n, 6], 1.0, &mut rng)).collect();
            let tau = [0.07, 0.5, 1.0][trial % 3];
            let got = contrastive_value(&parts, tau, false).unwrap();
            assert!((got - naive(&parts, tau)).abs() <= 1e-9, "trial {trial}");
        }
    }

    #[test]
    fn symmetric_two_block_averages_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let sym = contrastive_value(&[a.clone(), b.clone()], 0.2, true).unwrap();
        let ab = contrastive_value(&[a.clone(), b.clone()], 0.2, false).unwrap();
        let ba = contrastive_value(&[b, a], 0.2, false).unwrap();
        assert!((sym - 0.5 * (ab + ba)).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = Tensor::ones(&[2, 3]);
        assert!(matches!(
            contrastive_value(&[a.clone(), a.clone()], 0.0, false),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(contrastive_value(&[a.clone()], 1.0, false), Err(Error::Contract(_))));
        assert!(matches!(
            contrastive_value(&[a, Tensor::ones(&[3, 3])], 1.0, false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn contrastive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let y = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let err = grad_check_multi(|g, v| contrastive(g, v, 0.5, false), &[x, y], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    fn batch_from(g: &mut Graph, t: &[Tensor]) -> SiameseBatch {
        let v: Vec<Var> = t.iter().map(|t| g.param(t.clone())).collect();
        SiameseBatch {
            f_skt: v[0],
            f_skt_aug: Some(v[1]),
            f_img: v[2],
            f_img_aug: Some(v[3]),
            out_skt: v[4],
            out_img: v[5],
        }
    }

    #[test]
    fn basic_loss_orthonormal_blocks() {
        let rows = basis(4, 4);
        let a = Tensor::from_rows(&rows[..2]).unwrap();
        let b = Tensor::from_rows(&rows[2..]).unwrap();
        // Every pair fed to the loss is mutually orthonormal.
        let blocks = [a.clone(), b.clone(), b.clone(), a.clone(), a, b];
        let mut g = Graph::new();
        let sb = batch_from(&mut g, &blocks);
        let terms = basic_loss(&mut g, &sb, &ContrastiveOptions { tau: 1.0, ..Default::default() }).unwrap();
        let br = terms.breakdown(&g, 1.0);
        let l3 = 3f64.ln();
        assert!((br.multi - l3).abs() < 1e-9);
        assert!((br.inter - l3).abs() < 1e-9);
        assert!((br.intra - 2.0 * l3).abs() < 1e-9);
        assert!((br.total - 4.0 * l3).abs() < 1e-9);
    }

    #[test]
    fn basic_loss_singleton_batch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blocks: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[1, 3], 1.0, &mut rng)).collect();
        let mut g = Graph::new();
        let sb = batch_from(&mut g, &blocks);
        let br = basic_loss(&mut g, &sb, &ContrastiveOptions::default())
            .unwrap()
            .breakdown(&g, 0.07);
        assert!(br.total.abs() < 1e-12);
    }

    #[test]
    fn basic_loss_requires_augmented_streams() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        let sb = SiameseBatch {
            f_skt: x,
            f_skt_aug: None,
            f_img: x,
            f_img_aug: None,
            out_skt: x,
            out_img: x,
        };
        assert!(matches!(
            basic_loss(&mut g, &sb, &ContrastiveOptions::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn basic_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blocks: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng)).collect();
        let err = grad_check_multi(
            |g, v| {
                let sb = SiameseBatch {
                    f_skt: v[0],
                    f_skt_aug: Some(v[1]),
                    f_img: v[2],
                    f_img_aug: Some(v[3]),
                    out_skt: v[4],
                    out_img: v[5],
                };
                Ok(basic_loss(g, &sb, &ContrastiveOptions { tau: 0.5, ..Default::default() })?.total)
            },
            &blocks,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn full_loss_adds_recycling() {
        use crate::mstr::{build_contrast_map, MstrConfig};
        let cfg = MstrConfig {
            scales: Some(vec![2]),
            ..MstrConfig::default()
        };
        let map = build_contrast_map(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let blocks: Vec<Tensor> = (0..6).map(|_| Tensor::randn(&[2, 4], 1.0, &mut rng)).collect();
        let opts = ContrastiveOptions::default();

        let mut g = Graph::new();
        let sb = batch_from(&mut g, &blocks);
        let basic = basic_loss(&mut g, &sb, &opts).unwrap();
        let exact = g.constant(Tensor::new(&[1, 4, 4], Tensor::eye(4).into_data()).unwrap());
        let full = full_loss(&mut g, basic, &[exact, exact], &map, true).unwrap();
        let (b, f) = (basic.breakdown(&g, 0.07), full.breakdown(&g, 0.07));
        assert_eq!(b.total, f.total);

        let noisy = g.param(Tensor::randn(&[1, 4, 3], 1.0, &mut rng));
        let noisy = g.l2_normalize(noisy);
        let full = full_loss(&mut g, basic, &[noisy, exact], &map, true).unwrap();
        let f = full.breakdown(&g, 0.07);
        assert!(f.total > b.total);
        assert!((f.total - f.multi - f.inter - f.intra - f.recycling).abs() <= 1e-12);
    }

    /// Oracle: explicit per-item loop.
    fn triplet_loop(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> f64 {
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let rows = a.shape()[0];
        (0..rows)
            .map(|i| (dist(a.row(i), p.row(i)) - dist(a.row(i), n.row(i)) + margin).max(0.0))
            .sum::<f64>()
            / rows as f64
    }

    fn triplet_value(a: &Tensor, p: &Tensor, n: &Tensor, margin: f64) -> f64 {
        let mut g = Graph::new();
        let (a, p, n) = (g.constant(a.clone()), g.constant(p.clone()), g.constant(n.clone()));
        let l = triplet(&mut g, a, p, n, margin).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn triplet_examples() {
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let n = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(triplet_value(&a, &a, &n, 0.2), 0.0);
        let p = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!((triplet_value(&a, &p, &n, 0.2) - 0.2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, p, n) = (
            Tensor::randn(&[5, 8], 1.0, &mut rng),
            Tensor::randn(&[5, 8], 1.0, &mut rng),
            Tensor::randn(&[5, 8], 1.0, &mut rng),
        );
        for margin in [0.0, 0.2, 2.0] {
            assert!((triplet_value(&a, &p, &n, margin) - triplet_loop(&a, &p, &n, margin)).abs() <= 1e-12);
        }
        let mut g = Graph::new();
        let (x, y) = (g.constant(Tensor::ones(&[2, 3])), g.constant(Tensor::ones(&[2, 4])));
        assert!(matches!(triplet(&mut g, x, x, y, 0.2), Err(Error::Dimension(_))));
    }

    #[test]
    fn triplet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let p = Tensor::randn(&[4, 8], 0.5, &mut rng);
        let n = Tensor::randn(&[4, 8], 0.5, &mut rng);
        let err = grad_check_multi(|g, v| triplet(g, v[0], v[1], v[2], 2.0), &[a, p, n], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn lower_temperature_sharpens_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let grad_norm = |tau: f64| {
            let mut g = Graph::new();
            let (x, y) = (g.param(a.clone()), g.param(b.clone()));
            let l = contrastive(&mut g, &[x, y], tau, false).unwrap();
            let gr = g.backward(l).unwrap();
            let gx = gr.get(x).unwrap().data().iter().map(|v| v * v).sum::<f64>();
            let gy = gr.get(y).unwrap().data().iter().map(|v| v * v).sum::<f64>();
            (gx + gy).sqrt()
        };
        assert!(grad_norm(0.07) > grad_norm(1.0));
    }

    #[test]
    fn single_quadratic_sanity() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(grad_check(|g, x| { let s = g.mul(x, x)?; Ok(g.sum_all(s)) }, &x, 1e-5).unwrap() < 1e-9);
    }

    fn matrices(blocks: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, usize)> {
        (1usize..5).prop_flat_map(move |n| {
            (
                proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), blocks * n),
                Just(n),
            )
        })
    }

    fn split(rows: &[Vec<f64>], n: usize) -> Vec<Tensor> {
        rows.chunks(n).map(|c| Tensor::from_rows(c).unwrap()).collect()
    }

    proptest! {
        #[test]
        fn nonnegative_and_permutation_equivariant(
            (rows, n) in matrices(2),
            seed in 0u64..1000,
            scale in 0.1f64..10.0,
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let parts = split(&rows, n);
            let base = contrastive_value(&parts, 0.3, false).unwrap();
            prop_assert!(base >= -1e-12);

            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let permuted: Vec<Tensor> = parts
                .iter()
                .map(|p| Tensor::from_rows(&perm.iter().map(|&i| p.row(i).to_vec()).collect::<Vec<_>>()).unwrap())
                .collect();
            let v = contrastive_value(&permuted, 0.3, false).unwrap();
            prop_assert!((v - base).abs() <= 1e-12);

            let mut scaled = parts.clone();
            let row = perm[0];
            for c in 0..4 {
                scaled[1].data_mut()[row * 4 + c] *= scale;
            }
            let v = contrastive_value(&scaled, 0.3, false).unwrap();
            prop_assert!((v - base).abs() <= 1e-12);
        }
    }
}
