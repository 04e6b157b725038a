use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::run::ResultRow;
use crate::fedsim::WindowName;

/// Column order of the row CSV; matches the field order of [`ResultRow`].
const CSV_FIELDS: [&str; 19] = [
    "experiment",
    "dataset",
    "method",
    "window",
    "victim_size",
    "batch",
    "hidden",
    "isolate",
    "participants",
    "membership",
    "prior",
    "label",
    "repetitions",
    "accuracy_mean",
    "accuracy_std",
    "mia_accuracy",
    "gamma",
    "wall_time_secs",
    "seed",
];

pub fn write_rows_csv<W: Write>(rows: &[ResultRow], writer: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_FIELDS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(reader: R) -> csv::Result<Vec<ResultRow>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

/// The axis a trend table is sorted along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Window,
    Batch,
    VictimSize,
    Hidden,
    Isolate,
    Participants,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "window" => Axis::Window,
            "batch" => Axis::Batch,
            "victim-size" | "victim_size" => Axis::VictimSize,
            "hidden" => Axis::Hidden,
            "isolate" => Axis::Isolate,
            "participants" => Axis::Participants,
            other => return Err(format!("unknown axis {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendReport {
    /// Sorted rows including the `best` window rows.
    pub rows: Vec<ResultRow>,
    pub markdown: String,
    pub csv: String,
}

/// Sort key along the axis; full batch (0) sorts after every finite size.
fn axis_rank(axis: Axis, r: &ResultRow) -> (u64, String) {
    let num = |v: usize| (v as u64, String::new());
    match axis {
        Axis::Window => {
            let pos = r
                .window
                .parse::<WindowName>()
                .ok()
                .and_then(|w| {
                    [
                        WindowName::Pre1,
                        WindowName::Pre2,
                        WindowName::Pre5,
                        WindowName::Gap10,
                        WindowName::Last5,
                        WindowName::All,
                    ]
                    .iter()
                    .position(|&x| x == w)
                })
                .unwrap_or(if r.window == "best" { 7 } else { 6 });
            (pos as u64, r.window.clone())
        }
        Axis::Batch => num(if r.batch == 0 { usize::MAX } else { r.batch }),
        Axis::VictimSize => num(r.victim_size),
        Axis::Hidden => {
            let widths: Vec<u64> = r.hidden.split('x').filter_map(|s| s.parse().ok()).collect();
            (widths.iter().product(), r.hidden.clone())
        }
        Axis::Isolate => num(usize::from(!r.isolate)),
        Axis::Participants => num(r.participants),
    }
}

/// Every identifying column except the axis, as one string.
fn group_key(axis: Axis, r: &ResultRow) -> String {
    let keep = |a: Axis, v: String| if a == axis { String::new() } else { v };
    format!(
        "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
        r.dataset,
        r.method,
        keep(Axis::Window, r.window.clone()),
        keep(Axis::VictimSize, r.victim_size.to_string()),
        keep(Axis::Batch, r.batch.to_string()),
        keep(Axis::Hidden, r.hidden.clone()),
        keep(Axis::Isolate, r.isolate.to_string()),
        keep(Axis::Participants, r.participants.to_string()),
        r.membership,
        r.prior,
        r.label
    )
}

/// For every run configuration with at least two windows, a copy of the
/// highest-accuracy window row labelled `best`.
fn best_of_window(rows: &[ResultRow]) -> Vec<ResultRow> {
    let mut order = Vec::new();
    let mut groups: HashMap<String, Vec<&ResultRow>> = HashMap::new();
    for r in rows.iter().filter(|r| r.window.parse::<WindowName>().is_ok()) {
        let key = format!("{}|{}", r.experiment, group_key(Axis::Window, r));
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .iter()
        .filter(|k| groups[*k].len() >= 2)
        .map(|k| {
            let group = &groups[k];
            let mut best = group[0];
            for r in &group[1..] {
                if r.accuracy_mean > best.accuracy_mean {
                    best = r;
                }
            }
            ResultRow {
                window: "best".into(),
                ..best.clone()
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn batch_label(b: usize) -> String {
    if b == 0 {
        "full".into()
    } else {
        b.to_string()
    }
}

/// Trend table along `axis`: rows grouped by every other setting, sorted by
/// the axis inside each group, with best-of-window rows added.
pub fn trend_report(rows: &[ResultRow], axis: Axis) -> TrendReport {
    let mut all: Vec<ResultRow> = rows.to_vec();
    all.extend(best_of_window(rows));
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    for r in &all {
        let n = first_seen.len();
        first_seen.entry(group_key(axis, r)).or_insert(n);
    }
    // Stable sort keeps input order for equal keys.
    all.sort_by(|a, b| {
        let ga = first_seen[&group_key(axis, a)];
        let gb = first_seen[&group_key(axis, b)];
        ga.cmp(&gb).then_with(|| axis_rank(axis, a).cmp(&axis_rank(axis, b)))
    });

    let mut md = String::new();
    md.push_str(
        "| method | window | victim size | batch | hidden | isolate | participants | membership | prior | label | accuracy | std | mia accuracy | reps |\n",
    );
    md.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    for r in &all {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.3} | {:.3} | {} | {} |",
            r.method,
            r.window,
            r.victim_size,
            batch_label(r.batch),
            r.hidden,
            r.isolate,
            r.participants,
            r.membership,
            r.prior,
            r.label,
            r.accuracy_mean,
            r.accuracy_std,
            fmt_opt(r.mia_accuracy),
            r.repetitions
        );
    }
    let mut buf = Vec::new();
    write_rows_csv(&all, &mut buf).expect("writing to memory");
    TrendReport {
        rows: all,
        markdown: md,
        csv: String::from_utf8(buf).expect("csv is utf-8"),
    }
}
