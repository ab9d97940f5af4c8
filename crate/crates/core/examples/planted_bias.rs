//! End-to-end check of the slope pipeline against a simulated service
//! whose label probabilities follow planted logistic trends in the edited
//! attribute. Recovered slope signs must match the planted ones.
//!
//! ```text
//! cargo run --release --example planted_bias -- [n_series] [seeds...]
//! ```

use cfaudit::cli::config::SimulateSection;
use cfaudit::cli::run_planted;
use cfaudit::slopes::AnalysisOptions;
use cfaudit::synth::AttributeGrid;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let defaults = SimulateSection::default();
    let n_series: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(defaults.n_series);
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().unwrap()).collect()
    } else {
        defaults.seeds.clone()
    };
    let grid = AttributeGrid::new("a", 7, -2.0, 2.0).unwrap();
    let work = std::env::temp_dir().join("cfaudit-planted");

    for seed in seeds {
        let run = run_planted(&defaults.labels, &grid, n_series, seed, &AnalysisOptions::default(), &work).unwrap();
        println!("seed {seed}: {} network calls, ordering ok {}", run.network_calls, run.ordering_ok);
        for r in &run.rows {
            println!(
                "  {:<18} planted {:+.2}  slope {:+.4}  p {:.2e}  retained {:<5} {}",
                r.label,
                r.beta1,
                r.slope,
                r.p_value,
                r.retained,
                if r.ok { "ok" } else { "MISMATCH" }
            );
        }
        println!("  {}", if run.passed() { "passed" } else { "failed" });
    }
}
