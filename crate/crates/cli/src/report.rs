//! Plain-text tables for evaluation and ablation reports.

use regseg_core::metrics::{ClassMetrics, MetricsRecord};

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:8.2}"),
        None => format!("{:>8}", "n/a"),
    }
}

fn row(label: &str, m: &ClassMetrics) -> String {
    format!(
        "{label:<10} {:8.2} {:8.2} {} {}{}",
        m.dice,
        m.jaccard,
        fmt_opt(m.hd95),
        fmt_opt(m.asd),
        if m.n_distance_missing > 0 {
            format!("   ({} skipped)", m.n_distance_missing)
        } else {
            String::new()
        }
    )
}

/// Dice↑ Jaccard↑ 95HD↓ ASD↓ per class plus the foreground mean.
pub fn print_metrics_table(record: &MetricsRecord) {
    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>8}",
        "class", "Dice^", "Jaccard^", "95HD v", "ASD v"
    );
    for (class, m) in &record.per_class {
        println!("{}", row(&class.to_string(), m));
    }
    println!("{}   (n={})", row("mean", &record.mean), record.n_samples);
}
