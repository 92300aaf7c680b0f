//! Turn confusion counts into recall, specificity and a printable table.

use tibscan::metrics::{precision, render_table, ConfusionCounts, MetricsSummary, TableRow};

fn main() {
    let counts = ConfusionCounts {
        mutated_samples: 100,
        clean_samples: 100,
        tp_l: 92,
        fp_l_mutated: 93,
        tp_f: 84,
        fp_f_mutated: 12,
        fn_f: 16,
        fp_l: 174,
        excluded_fp_l: 138,
        fp_f: 56,
        excluded_fp_f: 34,
        ..ConfusionCounts::default()
    };
    let row = TableRow { label: "highlighted".into(), summary: MetricsSummary::from_counts(counts), cost: Some(0.42) };
    print!("{}", render_table(&[row]));
    println!("precision of 28 confirmed in 77 reports: {:.2}%", precision(77, 28).unwrap());
}
