//! CSV and JSON output.

use std::fmt::Write as _;

use crate::runner::{RunRecord, ToyFigure};

pub const METRICS_HEADER: &str = "round,algo,global_loss,global_metric,csb,fallback_coords,\
comm_bits_up_cum,comm_bits_down_cum,p13n_frac,p13n_before,p13n_after,fsd_kl";

/// One row per evaluated round, or per evaluated round and personalization
/// fraction when fractions are configured.
pub fn metrics_csv(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for rec in records {
        for m in &rec.per_round {
            let fsd = m.fsd_kl.map(|v| v.to_string()).unwrap_or_default();
            let prefix = format!(
                "{},{},{},{},{},{},{},{}",
                m.round,
                rec.algo.name(),
                m.global_loss,
                m.global_metric,
                m.csb,
                m.fallback_coords,
                m.comm_bits_up_cum,
                m.comm_bits_down_cum
            );
            if m.personalization.is_empty() {
                let _ = writeln!(out, "{prefix},,,,{fsd}");
            }
            for p in &m.personalization {
                let _ = writeln!(out, "{prefix},{},{},{},{fsd}", p.fraction, p.before, p.after);
            }
        }
    }
    out
}

pub fn toy_curves_csv(fig: &ToyFigure) -> String {
    let mut out = String::from("x,y_true,y_client0,y_client1,y_fedavg,y_fedfish\n");
    for p in &fig.curve {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.x, p.y_true, p.y_client0, p.y_client1, p.y_fedavg, p.y_fedfish
        );
    }
    out
}

pub fn toy_summary_csv(figs: &[ToyFigure]) -> String {
    let mut out = String::from("regime,csb_fedavg,csb_fedfish\n");
    for f in figs {
        let _ = writeln!(out, "{},{},{}", f.overlap.name(), f.csb_fedavg, f.csb_fedfish);
    }
    out
}

/// Final-round summary of a sweep over local epochs and algorithms.
pub fn sweep_summary_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("algo,local_epochs,rounds,seed,global_loss,global_metric,csb,final_params_sha256\n");
    for rec in records {
        let Some(m) = rec.per_round.last() else { continue };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.algo.name(),
            rec.config.local.epochs,
            rec.config.rounds,
            rec.config.seed,
            m.global_loss,
            m.global_metric,
            m.csb,
            rec.final_params_digest
        );
    }
    out
}

pub fn record_json(record: &RunRecord) -> String {
    serde_json::to_string_pretty(record).expect("record serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::runner::run_experiment;

    #[test]
    fn metrics_rows_per_fraction() {
        let mut cfg = ExperimentConfig::toy_default();
        cfg.local.epochs = 2;
        let rec = run_experiment(&cfg).unwrap();
        let csv = metrics_csv(std::slice::from_ref(&rec));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 12);
        assert!(lines[1].starts_with("1,fedfish,"));

        cfg.personalize_fractions = vec![0.0, 0.5];
        cfg.personalize_epochs = 1;
        let rec = run_experiment(&cfg).unwrap();
        let csv = metrics_csv(&[rec]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 12));
    }
}
