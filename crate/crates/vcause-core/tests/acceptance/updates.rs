use vcause_core::provgraph::{Graph, Mode};

use crate::common::stream;
use crate::{ensure, Outcome, Verdict};

/// Per-event update counts, and bucket means over ten equal slices.
fn counts(mode: Mode, n_events: usize, n_entities: usize) -> (Vec<usize>, Vec<f64>) {
    let evs = stream(8, n_events, n_entities);
    let mut g = Graph::new(mode).unwrap();
    let per: Vec<usize> = evs.iter().map(|e| g.record_event(e).unwrap().updates()).collect();
    let means = per.chunks(n_events / 10).map(|c| c.iter().sum::<usize>() as f64 / c.len() as f64).collect();
    (per, means)
}

pub fn segmented_overhead() -> Outcome {
    let (per, seg_means) = counts(Mode::Segmented(1), 100_000, 10_000);
    let max = *per.iter().max().unwrap();
    let over3 = per.iter().filter(|&&u| u > 3).count();
    ensure!(max <= 4, "L=1: {max} updates in one event exceeds 2L+2 = 4");
    for l in [2u32, 4] {
        let (p, _) = counts(Mode::Segmented(l), 20_000, 2_000);
        let m = *p.iter().max().unwrap();
        ensure!(m <= 2 * l as usize + 2, "L={l}: {m} updates exceeds 2L+2");
    }
    let seg_spread = seg_means.iter().cloned().fold(0.0, f64::max) - seg_means.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(seg_spread < 0.5, "segmented mean drifts by {seg_spread:.2} across buckets");

    // Unsegmented maintenance is quadratic overall, so the trend is checked on
    // a shorter stream over a denser entity set.
    let (_, uns) = counts(Mode::Unsegmented, 4_000, 200);
    ensure!(uns.windows(2).all(|w| w[1] > w[0]), "unsegmented means not increasing: {uns:?}");
    let detail = format!(
        "L=1 max {max} (events above 3: {over3} of 100000), bound 2L+2 holds for L=1,2,4; \
         segmented bucket means {:.2}..{:.2}; unsegmented means {:.0} -> {:.0} at 4000 events",
        seg_means.iter().cloned().fold(f64::INFINITY, f64::min),
        seg_means.iter().cloned().fold(0.0, f64::max),
        uns[0],
        uns[9],
    );
    if max <= 3 {
        Ok(Verdict::Pass(detail))
    } else {
        Ok(Verdict::Unmet(format!("<= 3 per event is not attainable at L=1; {detail}")))
    }
}
