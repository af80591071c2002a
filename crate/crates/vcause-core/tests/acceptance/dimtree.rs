use std::time::Instant;

use vcause_core::dimtree::{hash_counters, verify_path, verify_range, DimTree, LeafRecord, Query};
use vcause_core::hashcore::hash_bytes;

use crate::{ensure, Outcome, Verdict};

fn leaf(i: u64) -> LeafRecord {
    LeafRecord { key: i as u128 * 2, payload: hash_bytes(&i.to_be_bytes()) }
}

fn build(n: u64) -> DimTree {
    let mut t = DimTree::new();
    for i in 0..n {
        t.insert(leaf(i)).unwrap();
    }
    t
}

/// Coefficient of determination of the least-squares line through `pts`.
fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - (my + slope * (p.0 - mx))).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

pub fn amortized_insertion() -> Outcome {
    let mut t = DimTree::new();
    for n in 1..=1u64 << 12 {
        t.insert(leaf(n - 1)).unwrap();
        let want = n - n.count_ones() as u64;
        ensure!(t.merges() == want, "n={n}: {} merges, expected {want}", t.merges());
    }
    let big = build(1 << 20);
    ensure!(big.merges() == (1 << 20) - 1, "n=2^20: {} merges", big.merges());
    drop(big);

    let mut pts = Vec::new();
    for exp in 10..=20 {
        let n = 1u64 << exp;
        let best = (0..3)
            .map(|_| {
                let t0 = Instant::now();
                std::hint::black_box(build(n));
                t0.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min);
        pts.push((n as f64, best));
    }
    let r2 = r_squared(&pts);
    ensure!(r2 > 0.99, "linear fit R^2 = {r2:.4}");
    let per = pts.last().unwrap().1 / pts.last().unwrap().0 * 1e9;
    Ok(Verdict::Pass(format!("merges = n - popcount(n) for n <= 2^12 and 2^20; R^2 = {r2:.4}, {per:.0} ns/insert at 2^20")))
}

pub fn range_batching() -> Outcome {
    let n = (1u64 << 16) + 123;
    let mut t = build(n);
    let root = t.finalize().unwrap();
    let log_n = (n as f64).log2();
    let m = 1000u64;
    let first = 20_011u64;
    let (lo, hi) = (first as u128 * 2, (first + m - 1) as u128 * 2);
    let proof = t.prove_range(lo, hi).unwrap();

    let h0 = hash_counters().0;
    ensure!(verify_range(&root, lo, hi, &proof), "range proof rejected");
    let range_hashes = hash_counters().0 - h0;

    let proofs: Vec<_> = (first..first + m).map(|i| t.search_exact(i as u128 * 2).unwrap().proof).collect();
    let h0 = hash_counters().0;
    for (i, p) in (first..).zip(&proofs) {
        ensure!(verify_path(&root, Query::Exact(i as u128 * 2), p), "path proof for leaf {i} rejected");
    }
    let single_hashes = hash_counters().0 - h0;

    let c = 4.0;
    let bound = m as f64 + c * log_n;
    ensure!((range_hashes as f64) <= bound, "range verification used {range_hashes} hashes > {bound:.0}");
    let floor = 0.5 * m as f64 * log_n;
    ensure!((single_hashes as f64) >= floor, "single verifications used {single_hashes} hashes < {floor:.0}");
    Ok(Verdict::Pass(format!(
        "N={n}, m={m}: range {range_hashes} <= m + 4 log2 N = {bound:.0}; singles {single_hashes} >= {floor:.0}"
    )))
}
