//! Turns per-image label presence into rate curves, centre-normalizes them
//! and fits a slope per label. Shows both significance modes, the retained
//! set, and a label excluded because it never fires at the grid centre.
//!
//! ```text
//! cargo run --example slope_analysis
//! ```

use cfaudit::probe::LabelPrediction;
use cfaudit::slopes::{analyze, AnalysisOptions, SeriesProbe, SignificanceMode};
use cfaudit::synth::{AttributeGrid, SeriesFlags};

/// Presence count per grid position, out of `N_SERIES`.
const PATTERNS: &[(&str, [usize; 7])] = &[
    ("suit", [38, 34, 31, 30, 26, 23, 20]),
    ("smile", [18, 19, 18, 20, 19, 18, 19]),
    ("wig", [0, 0, 0, 0, 2, 5, 9]),
    ("apron", [12, 14, 17, 20, 24, 27, 29]),
];
const N_SERIES: usize = 40;

fn main() {
    let grid = AttributeGrid::new("gender", 7, -2.0, 2.0).unwrap();
    let series: Vec<SeriesProbe> = (0..N_SERIES)
        .map(|i| SeriesProbe {
            backend: "demo".into(),
            source_id: format!("s{i:02}"),
            grid: grid.clone(),
            flags: SeriesFlags::default(),
            predictions: (0..grid.len())
                .map(|k| {
                    let labels = PATTERNS
                        .iter()
                        .filter(|(_, counts)| i < counts[k])
                        .map(|(l, _)| LabelPrediction::new(l, true, Some(0.9)).unwrap())
                        .collect();
                    Some(labels)
                })
                .collect(),
        })
        .collect();

    for mode in [SignificanceMode::PerImage, SignificanceMode::Aggregate] {
        let opts = AnalysisOptions {
            mode,
            ..AnalysisOptions::default()
        };
        let analysis = analyze(&series, &opts).unwrap();
        println!("mode {}:", mode.as_str());
        for s in &analysis.slopes {
            println!("  {:<6} slope {:+.4}  p {:.2e}  n {} K {}", s.label, s.slope, s.p_value, s.n, s.k);
        }
        let kept: Vec<_> = analysis.retained().into_iter().map(|s| s.label).collect();
        println!("  retained (p < {}, |slope| > {}): {kept:?}", opts.p_max, opts.min_abs_slope);
        for e in &analysis.exclusions {
            println!("  excluded {:?}: {} ({})", e.label, e.reason.as_str(), e.detail);
        }
    }

    let analysis = analyze(&series, &AnalysisOptions::default()).unwrap();
    let suit = analysis.curves.iter().find(|c| c.rates.label == "suit").unwrap();
    let z = suit.normalized.as_ref().unwrap();
    println!("suit y {:?}", suit.rates.y.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    println!("suit z {:?} (centre {})", z.z.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(), z.center);
}
