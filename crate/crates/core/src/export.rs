//! Export files computed from a [`SessionRecord`].
//!
//! | file | shape |
//! |---|---|
//! | `reasons.csv` | option, in_favor, against; closing `Total` row |
//! | `sentiment_periods.csv` | option x period means, `**` where the leader is significantly ahead |
//! | `sentiment_tests.csv` | the t-tests behind those markers |
//! | `topchoice_series.csv` | supporters per option and undecided, 10 s grid |
//! | `sentiment_series.csv` | net preference per option, 10 s grid |
//! | `summaries.md` | per-option arguments for and against |
//! | `snapshots.jsonl`, `net_preference.jsonl`, `insights.jsonl` | row-level data |
//!
//! Rendering is a pure function of the record, so a live session and a
//! replay of its log produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::agents::Polarity;
use crate::analytics::{
    period_reports, sample_grid, tally_reasons, top_choice_series, SessionRecord, TimelineEntry, PLOT_GRID,
};
use crate::time::{Millis, ParticipantId};

/// Rendered export files by name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Exports {
    pub files: BTreeMap<String, String>,
}

impl Exports {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn write_to(&self, dir: impl AsRef<Path>) -> io::Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }

    pub fn csv_files(&self) -> impl Iterator<Item = (&str, &str)> {
        self.files
            .iter()
            .filter(|(n, _)| n.ends_with(".csv"))
            .map(|(n, c)| (n.as_str(), c.as_str()))
    }
}

pub const REASONS_CSV: &str = "reasons.csv";
pub const SENTIMENT_PERIODS_CSV: &str = "sentiment_periods.csv";
pub const SENTIMENT_TESTS_CSV: &str = "sentiment_tests.csv";
pub const TOPCHOICE_SERIES_CSV: &str = "topchoice_series.csv";
pub const SENTIMENT_SERIES_CSV: &str = "sentiment_series.csv";
pub const SUMMARIES_MD: &str = "summaries.md";
pub const SNAPSHOTS_JSONL: &str = "snapshots.jsonl";
pub const NET_PREFERENCE_JSONL: &str = "net_preference.jsonl";
pub const INSIGHTS_JSONL: &str = "insights.jsonl";

fn csv_text(rows: Vec<Vec<String>>) -> String {
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for row in rows {
        writer.write_record(&row).expect("writing to memory");
    }
    String::from_utf8(writer.into_inner().expect("flushing to memory")).expect("csv input was UTF-8")
}

fn secs(t: Millis) -> String {
    t.as_secs_f64().to_string()
}

pub fn render_exports(record: &SessionRecord) -> Exports {
    let mut files = BTreeMap::new();
    files.insert(REASONS_CSV.into(), reasons_csv(record));
    let (periods, tests) = sentiment_periods_csv(record);
    files.insert(SENTIMENT_PERIODS_CSV.into(), periods);
    files.insert(SENTIMENT_TESTS_CSV.into(), tests);
    files.insert(TOPCHOICE_SERIES_CSV.into(), topchoice_series_csv(record));
    files.insert(SENTIMENT_SERIES_CSV.into(), sentiment_series_csv(record));
    files.insert(SUMMARIES_MD.into(), summaries_md(record));
    files.insert(SNAPSHOTS_JSONL.into(), snapshots_jsonl(record));
    files.insert(NET_PREFERENCE_JSONL.into(), net_preference_jsonl(record));
    files.insert(INSIGHTS_JSONL.into(), insights_jsonl(record));
    Exports { files }
}

pub fn reasons_csv(record: &SessionRecord) -> String {
    let tally = tally_reasons(record.reasons()).ordered_by(&record.option_order());
    let mut rows = vec![vec!["option".into(), "in_favor".into(), "against".into()]];
    for t in &tally.per_option {
        rows.push(vec![t.option.clone(), t.in_favor.to_string(), t.against.to_string()]);
    }
    rows.push(vec![
        "Total".into(),
        tally.totals.in_favor.to_string(),
        tally.totals.against.to_string(),
    ]);
    csv_text(rows)
}

/// Table of period means (two decimals) plus the long-form t-test table.
pub fn sentiment_periods_csv(record: &SessionRecord) -> (String, String) {
    let options = record.option_order();
    let reports = period_reports(record, record.final_answer.as_deref());
    let mut header = vec!["option".to_string()];
    header.extend(record.periods.iter().map(|p| p.name.clone()));
    let mut rows = vec![header];
    for option in &options {
        let mut row = vec![option.clone()];
        for report in &reports {
            row.push(match report {
                Ok(r) => {
                    let mean = r.mean(option).unwrap_or(0.0);
                    let marker = match r.t_test(option) {
                        Some(t) if t.significant_at_0_01 => "**",
                        _ => "",
                    };
                    format!("{mean:.2}{marker}")
                }
                Err(_) => String::new(),
            });
        }
        rows.push(row);
    }

    let mut tests = vec![[
        "period",
        "leader",
        "option",
        "samples",
        "mean",
        "t_statistic",
        "p_value",
        "significant_at_0_01",
    ]
    .map(String::from)
    .to_vec()];
    for r in reports.iter().flatten() {
        for option in &options {
            let Some(test) = r.t_test(option) else { continue };
            tests.push(vec![
                r.period.name.clone(),
                r.leader.clone(),
                option.clone(),
                r.samples.to_string(),
                r.mean(option).unwrap_or(0.0).to_string(),
                test.t_statistic.to_string(),
                test.p_value.to_string(),
                test.significant_at_0_01.to_string(),
            ]);
        }
    }
    (csv_text(rows), csv_text(tests))
}

fn grid(record: &SessionRecord) -> Vec<Millis> {
    sample_grid(record.end_time(), PLOT_GRID)
}

pub fn topchoice_series_csv(record: &SessionRecord) -> String {
    let options = record.option_order();
    let mut header = vec!["t".to_string()];
    header.extend(options.iter().cloned());
    header.push("undecided".into());
    let mut rows = vec![header];
    for sample in top_choice_series(record, &grid(record)) {
        let mut row = vec![secs(sample.t)];
        row.extend(options.iter().map(|o| sample.count(o).to_string()));
        row.push(sample.undecided.to_string());
        rows.push(row);
    }
    csv_text(rows)
}

pub fn sentiment_series_csv(record: &SessionRecord) -> String {
    let options = record.option_order();
    let times = grid(record);
    let mut header = vec!["t".to_string()];
    header.extend(options.iter().cloned());
    let mut rows = vec![header];
    for (state, &t) in record.states_at(&times).iter().zip(&times) {
        let net = state.net_preference(t);
        let mut row = vec![secs(t)];
        row.extend(options.iter().map(|o| format!("{:.4}", net.get(o).unwrap_or(0.0))));
        rows.push(row);
    }
    csv_text(rows)
}

pub fn summaries_md(record: &SessionRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Argument summaries\n");
    let _ = writeln!(out, "Question: {}\n", record.question);
    match &record.final_answer {
        Some(a) => {
            let _ = writeln!(out, "Final answer: **{a}**\n");
        }
        None => {
            let _ = writeln!(out, "Final answer: none\n");
        }
    }
    for s in &record.summaries {
        let _ = writeln!(out, "## {}\n", s.option);
        let _ = writeln!(out, "In favor: {} participants\n", s.favor_supporter_count);
        if !s.favor_text.is_empty() {
            let _ = writeln!(out, "{}\n", s.favor_text);
        }
        let _ = writeln!(out, "Against: {} participants\n", s.against_count);
        if !s.against_text.is_empty() {
            let _ = writeln!(out, "{}\n", s.against_text);
        }
    }
    out
}

#[derive(Serialize)]
struct SnapshotRow<'a> {
    t: Millis,
    room: usize,
    pass: u64,
    user: &'a ParticipantId,
    option: &'a str,
    score: i8,
}

#[derive(Serialize)]
struct NetRow<'a> {
    t: Millis,
    option: &'a str,
    net: f64,
}

#[derive(Serialize)]
struct InsightRow<'a> {
    t: Millis,
    room: usize,
    batch: u64,
    author: &'a ParticipantId,
    option: &'a str,
    polarity: Polarity,
    conviction: u8,
    text: &'a str,
}

fn push_json(out: &mut String, row: &impl Serialize) {
    out.push_str(&serde_json::to_string(row).expect("rows always serialize"));
    out.push('\n');
}

pub fn snapshots_jsonl(record: &SessionRecord) -> String {
    let mut out = String::new();
    for s in record.snapshots() {
        for l in &s.scores {
            push_json(
                &mut out,
                &SnapshotRow {
                    t: s.t,
                    room: s.room_index,
                    pass: s.pass_index,
                    user: &l.user,
                    option: &l.option,
                    score: l.score,
                },
            );
        }
    }
    out
}

pub fn net_preference_jsonl(record: &SessionRecord) -> String {
    let mut out = String::new();
    for net in record.net_preference_series() {
        for o in &net.per_option {
            push_json(
                &mut out,
                &NetRow {
                    t: net.t,
                    option: &o.option,
                    net: o.net,
                },
            );
        }
    }
    out
}

pub fn insights_jsonl(record: &SessionRecord) -> String {
    let mut out = String::new();
    for entry in &record.timeline {
        let TimelineEntry::Insight(s) = entry else { continue };
        for r in &s.reasons {
            push_json(
                &mut out,
                &InsightRow {
                    t: r.t,
                    room: r.room_index,
                    batch: s.batch_index,
                    author: &r.author,
                    option: &r.option,
                    polarity: r.polarity,
                    conviction: r.conviction,
                    text: &r.text,
                },
            );
        }
    }
    out
}
