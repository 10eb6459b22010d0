//! Pair-level divergence between a real image and its generated counterpart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::{EnergyVector, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sigmoid, sorted, Histogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDivergence {
    pub caption_id: String,
    pub l2: f64,
    /// Mean over concepts of `sigmoid(diff / 0.8)`.
    pub sigmoid_mean: f64,
}

/// Divergence of every generated image from the real image with the same
/// caption; both lists must be in the same caption order.
pub fn pair_divergences(real: &[EnergyVector], gen: &[EnergyVector]) -> Result<Vec<PairDivergence>> {
    let misaligned: Vec<String> = real
        .iter()
        .zip(gen)
        .filter(|(r, g)| r.caption_id != g.caption_id)
        .map(|(r, _)| r.caption_id.clone())
        .chain(real.iter().skip(gen.len()).map(|r| r.caption_id.clone()))
        .chain(gen.iter().skip(real.len()).map(|g| g.caption_id.clone()))
        .collect();
    if !misaligned.is_empty() {
        return Err(Error::Pairing {
            model: "generated".into(),
            missing: misaligned,
        });
    }
    real.par_iter()
        .zip(gen)
        .map(|(r, g)| {
            if r.energies.len() != g.energies.len() || r.energies.is_empty() {
                return Err(Error::Shape(format!(
                    "pair `{}` has {} real and {} generated concepts",
                    r.caption_id,
                    r.energies.len(),
                    g.energies.len()
                )));
            }
            let mut sq = 0.0;
            let mut sig = 0.0;
            for (a, b) in r.energies.iter().zip(&g.energies) {
                let diff = b - a;
                sq += diff * diff;
                sig += sigmoid(diff / DEFAULT_TEMPERATURE);
            }
            Ok(PairDivergence {
                caption_id: r.caption_id.clone(),
                l2: sq.sqrt(),
                sigmoid_mean: sig / r.energies.len() as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremePairs {
    /// Smallest divergences, ascending: memorization candidates.
    pub lowest: Vec<PairDivergence>,
    /// Largest divergences, descending: prompt-incongruence candidates.
    pub highest: Vec<PairDivergence>,
}

pub fn rank_pairs(divs: &[PairDivergence], n_extreme: usize) -> Result<ExtremePairs> {
    if n_extreme > divs.len() {
        return Err(Error::Argument(format!(
            "asked for {n_extreme} extreme pairs out of {}",
            divs.len()
        )));
    }
    let mut asc = divs.to_vec();
    asc.sort_by(|a, b| a.l2.total_cmp(&b.l2).then_with(|| a.caption_id.cmp(&b.caption_id)));
    let mut desc = divs.to_vec();
    desc.sort_by(|a, b| b.l2.total_cmp(&a.l2).then_with(|| a.caption_id.cmp(&b.caption_id)));
    asc.truncate(n_extreme);
    desc.truncate(n_extreme);
    Ok(ExtremePairs {
        lowest: asc,
        highest: desc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let s = sorted(values);
        Self {
            median: quantile_sorted(&s, 0.5),
            iqr: quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantComparison {
    pub hist_a: Histogram,
    pub hist_b: Histogram,
    pub summary_a: Spread,
    pub summary_b: Spread,
}

/// Histograms of two variants' L2 divergences on shared bin edges.
pub fn compare_variants(
    divs_a: &[PairDivergence],
    divs_b: &[PairDivergence],
    bins: usize,
) -> Result<VariantComparison> {
    if divs_a.is_empty() || divs_b.is_empty() {
        return Err(Error::Argument("variant comparison needs both sets non-empty".into()));
    }
    let a: Vec<f64> = divs_a.iter().map(|d| d.l2).collect();
    let b: Vec<f64> = divs_b.iter().map(|d| d.l2).collect();
    let lo = a.iter().chain(&b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(&b).cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(VariantComparison {
        hist_a: Histogram::new(&a, lo, hi, bins)?,
        hist_b: Histogram::new(&b, lo, hi, bins)?,
        summary_a: Spread::of(&a),
        summary_b: Spread::of(&b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(id: &str, e: Vec<f64>) -> EnergyVector {
        EnergyVector {
            caption_id: id.into(),
            energies: e,
        }
    }

    fn div(id: &str, l2: f64) -> PairDivergence {
        PairDivergence {
            caption_id: id.into(),
            l2,
            sigmoid_mean: 0.5,
        }
    }

    #[test]
    fn identical_vectors() {
        let r = vec![ev("a", vec![1.0, 2.0, 3.0])];
        let d = pair_divergences(&r, &r).unwrap();
        assert_eq!(d[0].l2, 0.0);
        assert_eq!(d[0].sigmoid_mean, 0.5);
    }

    #[test]
    fn pythagorean_and_symmetric_sigmoid() {
        let r = vec![ev("a", vec![0.0; 5])];
        let g = vec![ev("a", vec![3.0, 4.0, 0.0, 0.0, 0.0])];
        assert_eq!(pair_divergences(&r, &g).unwrap()[0].l2, 5.0);
        let r = vec![ev("a", vec![0.0, 0.8])];
        let g = vec![ev("a", vec![0.8, 0.0])];
        let expect = (sigmoid(1.0) + sigmoid(-1.0)) / 2.0;
        let got = pair_divergences(&r, &g).unwrap()[0].sigmoid_mean;
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn misaligned_ids_are_pairing_error() {
        let r = vec![ev("a", vec![1.0]), ev("b", vec![1.0])];
        let g = vec![ev("a", vec![1.0]), ev("c", vec![1.0])];
        match pair_divergences(&r, &g) {
            Err(Error::Pairing { missing, .. }) => assert_eq!(missing, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(pair_divergences(&r, &g[..1]).is_err());
    }

    #[test]
    fn ranking_cases() {
        let d = vec![div("b", 2.0), div("a", 0.0), div("c", 1.0)];
        let r = rank_pairs(&d, 1).unwrap();
        assert_eq!(r.lowest[0].caption_id, "a");
        assert_eq!(r.highest[0].caption_id, "b");

        let eq = vec![div("z", 1.0), div("x", 1.0), div("y", 1.0)];
        let r = rank_pairs(&eq, 3).unwrap();
        let ids = |v: &[PairDivergence]| v.iter().map(|d| d.caption_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&r.lowest), vec!["x", "y", "z"]);
        assert_eq!(ids(&r.highest), vec!["x", "y", "z"]);
        assert!(rank_pairs(&eq, 4).is_err());
    }

    #[test]
    fn variant_cases() {
        let a: Vec<_> = [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| div("p", v)).collect();
        let b: Vec<_> = [2.0, 2.0, 3.0, 3.0, 3.0].iter().map(|&v| div("p", v)).collect();
        let c = compare_variants(&a, &b, 10).unwrap();
        assert_eq!(c.summary_a, Spread { median: 3.0, iqr: 2.0 });
        assert_eq!(c.summary_b, Spread { median: 3.0, iqr: 1.0 });
        assert_eq!(c.hist_a.edges, c.hist_b.edges);
        assert_eq!(c.hist_a.total(), 5);

        let same = compare_variants(&a, &a, 7).unwrap();
        assert_eq!(same.hist_a, same.hist_b);
        let half: Vec<_> = a.iter().map(|d| div("p", d.l2 * 0.5)).collect();
        let h = compare_variants(&a, &half, 7).unwrap();
        assert!((h.summary_b.median - 0.5 * h.summary_a.median).abs() < 1e-12);
        assert!(compare_variants(&a, &[], 5).is_err());
    }

    fn pair_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        (1usize..6, 1usize..8).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(prop::collection::vec(0.0f64..10.0, k), n),
                prop::collection::vec(prop::collection::vec(0.0f64..10.0, k), n),
            )
        })
    }

    proptest! {
        #[test]
        fn swapping_roles((r, g) in pair_sets()) {
            let set = |rows: &[Vec<f64>]| -> Vec<EnergyVector> {
                rows.iter().enumerate().map(|(i, e)| ev(&format!("c{i}"), e.clone())).collect()
            };
            let fwd = pair_divergences(&set(&r), &set(&g)).unwrap();
            let back = pair_divergences(&set(&g), &set(&r)).unwrap();
            for ((f, b), (rr, gg)) in fwd.iter().zip(&back).zip(r.iter().zip(&g)) {
                prop_assert_eq!(f.l2, b.l2);
                prop_assert!((f.sigmoid_mean - (1.0 - b.sigmoid_mean)).abs() < 1e-12);
                prop_assert!(f.l2 >= 0.0);
                prop_assert_eq!(f.l2 == 0.0, rr == gg);
            }
        }

        #[test]
        fn lowest_are_the_smallest(vals in prop::collection::vec(0.0f64..100.0, 1..30), n in 0usize..30) {
            let n = n.min(vals.len());
            let divs: Vec<_> = vals.iter().enumerate().map(|(i, &v)| div(&format!("{i:03}"), v)).collect();
            let r = rank_pairs(&divs, n).unwrap();
            let mut brute = vals.clone();
            brute.sort_by(f64::total_cmp);
            let got: Vec<f64> = r.lowest.iter().map(|d| d.l2).collect();
            prop_assert_eq!(&got[..], &brute[..n]);
            let top: Vec<f64> = r.highest.iter().map(|d| d.l2).collect();
            let mut rev = brute.clone();
            rev.reverse();
            prop_assert_eq!(&top[..], &rev[..n]);
        }
    }
}
