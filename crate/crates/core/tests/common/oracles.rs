//! Independent brute-force references for metrics and genotype derivation.

use rand::Rng;
use rawdarts::metrics::TdcfCosts;
use rawdarts::search::{edge_index, OpKind, EDGES, INTERMEDIATE};

/// `(miss, fa)` at every threshold in `scores ∪ {±inf}`, counted directly.
fn rates(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, f64)> {
    let mut th: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    th.push(f64::NEG_INFINITY);
    th.push(f64::INFINITY);
    th.iter()
        .map(|&t| {
            let miss = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
            let fa =
                nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
            (miss, fa)
        })
        .collect()
}

/// Lowest point where any segment between two operating points meets the
/// diagonal `miss = fa`; this is where the convex hull crosses it.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    let pts = rates(targets, nontargets);
    let mut best = f64::INFINITY;
    for &(m1, f1) in &pts {
        for &(m2, f2) in &pts {
            let (d1, d2) = (m1 - f1, m2 - f2);
            if d1 * d2 > 0.0 {
                continue;
            }
            let v = if d1 == d2 {
                m1.min(m2)
            } else {
                m1 + d1 / (d1 - d2) * (m2 - m1)
            };
            best = best.min(v);
        }
    }
    best
}

/// Minimum normalized t-DCF by enumerating every threshold.
pub fn min_tdcf(bona: &[f64], spoof: &[f64], c: &TdcfCosts) -> f64 {
    let c1 =
        c.p_tar * (c.c_miss_cm - c.c_miss_asv * c.p_miss_asv) - c.p_non * c.c_fa_asv * c.p_fa_asv;
    let c2 = c.c_fa_cm * c.p_spoof * (1.0 - c.p_miss_spoof_asv);
    rates(bona, spoof)
        .into_iter()
        .map(|(miss, fa)| (c1 * miss + c2 * fa) / c1.min(c2))
        .fold(f64::INFINITY, f64::min)
}

/// Random cost model with positive normalized priors and C1, C2 > 0.
pub fn random_costs(rng: &mut impl Rng) -> TdcfCosts {
    loop {
        let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
        let sum: f64 = raw.iter().sum();
        let c = TdcfCosts {
            p_tar: raw[0] / sum,
            p_non: raw[1] / sum,
            p_spoof: 1.0 - raw[0] / sum - raw[1] / sum,
            c_miss_asv: rng.random_range(0.1..10.0),
            c_fa_asv: rng.random_range(0.1..10.0),
            c_miss_cm: rng.random_range(0.1..10.0),
            c_fa_cm: rng.random_range(0.1..10.0),
            p_fa_asv: rng.random_range(0.0..0.3),
            p_miss_asv: rng.random_range(0.0..0.3),
            p_miss_spoof_asv: rng.random_range(0.0..0.9),
        };
        if c.validate().is_ok() {
            return c;
        }
    }
}

/// Per node, the pair of incoming edges (each with its best non-`none` op)
/// maximizing the summed weight, found by trying every pair.
pub fn derive_cell(alpha: &[f64]) -> Vec<[(usize, OpKind); 2]> {
    assert_eq!(alpha.len(), EDGES * OpKind::COUNT);
    let best = |e: usize| {
        let row = &alpha[e * OpKind::COUNT..][..OpKind::COUNT];
        (1..OpKind::COUNT).map(|o| (OpKind::ALL[o], row[o])).fold(
            (OpKind::None, f64::NEG_INFINITY),
            |b, c| if c.1 > b.1 { c } else { b },
        )
    };
    (2..2 + INTERMEDIATE)
        .map(|j| {
            let mut choice = None;
            let mut top = f64::NEG_INFINITY;
            for a in 0..j {
                for b in a + 1..j {
                    let (oa, wa) = best(edge_index(a, j));
                    let (ob, wb) = best(edge_index(b, j));
                    if wa + wb > top {
                        top = wa + wb;
                        choice = Some([(a, oa), (b, ob)]);
                    }
                }
            }
            choice.unwrap()
        })
        .collect()
}
