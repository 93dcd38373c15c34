//! Per-run statistics rows, written as CSV and as an aligned table.

use std::io::{self, Write};
use std::time::Duration;

use crate::encode;
use crate::experiments::SweepPoint;
use crate::model::{fingerprint, Fingerprint, KVPair, RunStats};

pub const RUN_COLUMNS: [&str; 24] = [
    "run",
    "label",
    "mode",
    "n_i",
    "n_m",
    "n_mk",
    "n_o",
    "N_M",
    "N_C",
    "N_R",
    "map_fresh",
    "map_hit",
    "combine_fresh",
    "combine_hit",
    "reduce_fresh",
    "reduce_hit",
    "distinct_tasks",
    "memo_entries",
    "evicted",
    "nonmonotonic",
    "fresh_tasks",
    "output_fp",
    "wall_us",
    "fresh_time_us",
];

/// Columns that vary between identical runs.
pub const TIMING_COLUMNS: [&str; 2] = ["wall_us", "fresh_time_us"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunRow {
    pub run: usize,
    /// `initial`, `resume`, `delta`, `memo` or `direct`.
    pub label: &'static str,
    pub mode: String,
    pub stats: RunStats,
    pub output_fp: Fingerprint,
    pub wall: Duration,
    /// Summed wall time of the fresh tasks.
    pub fresh_time: Duration,
}

pub fn output_fingerprint(output: &[KVPair]) -> Fingerprint {
    fingerprint(&encode::encode_kv_list(output))
}

impl RunRow {
    pub fn fields(&self) -> Vec<String> {
        let s = &self.stats;
        let nums = [
            s.n_i,
            s.n_m,
            s.n_mk,
            s.n_o,
            s.map_tasks(),
            s.combine_tasks(),
            s.reduce_tasks(),
            s.map_run,
            s.map_hit,
            s.combine_run,
            s.combine_hit,
            s.reduce_run,
            s.reduce_hit,
            s.distinct_tasks,
            s.memo_entries,
            s.evicted,
            s.nonmonotonic_combines,
            s.fresh_tasks(),
        ];
        let mut out = vec![
            self.run.to_string(),
            self.label.to_string(),
            self.mode.clone(),
        ];
        out.extend(nums.iter().map(u64::to_string));
        out.push(self.output_fp.to_hex());
        out.push(self.wall.as_micros().to_string());
        out.push(self.fresh_time.as_micros().to_string());
        out
    }
}

pub fn write_runs_csv<W: Write>(w: W, rows: &[RunRow]) -> io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(RUN_COLUMNS)?;
    for row in rows {
        csv.write_record(row.fields())?;
    }
    csv.flush()
}

/// Human-readable summary; the output fingerprint is shortened.
pub fn write_runs_table<W: Write>(mut w: W, rows: &[RunRow]) -> io::Result<()> {
    let keep = [
        "run",
        "label",
        "mode",
        "n_i",
        "n_m",
        "n_mk",
        "N_M",
        "N_C",
        "N_R",
        "map_fresh",
        "combine_fresh",
        "reduce_fresh",
        "memo_entries",
        "output_fp",
        "wall_us",
    ];
    let idx: Vec<usize> = keep
        .iter()
        .map(|k| {
            RUN_COLUMNS
                .iter()
                .position(|c| c == k)
                .expect("known column")
        })
        .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let f = r.fields();
            idx.iter()
                .map(|&i| {
                    if RUN_COLUMNS[i] == "output_fp" {
                        f[i][..12].to_string()
                    } else {
                        f[i].clone()
                    }
                })
                .collect()
        })
        .collect();
    write_table(&mut w, &keep, &cells)
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "n_m",
    "log2_n_m",
    "k",
    "trials",
    "median_fresh_combines",
    "combine_bound",
    "median_fresh_reduces",
    "max_fresh_reduces",
    "max_task_ratio",
];

fn sweep_fields(p: &SweepPoint) -> Vec<String> {
    vec![
        p.n_m.to_string(),
        format!("{:.3}", (p.n_m as f64).log2()),
        p.k.to_string(),
        p.trials.to_string(),
        format!("{:.1}", p.median_fresh_combines),
        format!("{:.1}", p.combine_bound()),
        format!("{:.1}", p.median_fresh_reduces),
        p.max_fresh_reduces.to_string(),
        format!("{:.4}", p.max_task_ratio),
    ]
}

pub fn write_sweep_csv<W: Write>(w: W, points: &[SweepPoint]) -> io::Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(SWEEP_COLUMNS)?;
    for p in points {
        csv.write_record(sweep_fields(p))?;
    }
    csv.flush()
}

pub fn write_sweep_table<W: Write>(mut w: W, points: &[SweepPoint]) -> io::Result<()> {
    let cells: Vec<Vec<String>> = points.iter().map(sweep_fields).collect();
    write_table(&mut w, &SWEEP_COLUMNS, &cells)
}

fn write_table<W: Write>(w: &mut W, header: &[&str], cells: &[Vec<String>]) -> io::Result<()> {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in cells {
        for (i, c) in row.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    let line = |w: &mut W, row: &[&str]| -> io::Result<()> {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, n)| format!("{c:>n$}"))
            .collect();
        writeln!(w, "{}", padded.join("  ").trim_end())
    };
    line(w, header)?;
    for row in cells {
        let r: Vec<&str> = row.iter().map(String::as_str).collect();
        line(w, &r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_run() {
        let row = RunRow {
            run: 0,
            label: "initial",
            mode: "variable".into(),
            stats: RunStats {
                n_i: 3,
                map_run: 2,
                combine_hit: 1,
                ..RunStats::default()
            },
            output_fp: output_fingerprint(&[]),
            wall: Duration::from_micros(42),
            fresh_time: Duration::from_micros(7),
        };
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &[row.clone(), RunRow { run: 1, ..row }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), RUN_COLUMNS.len());
        assert!(lines[1].starts_with("0,initial,variable,3,"));
        assert!(lines[2].ends_with(",42,7"));
    }
}
