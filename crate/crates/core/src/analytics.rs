//! Session analytics: reason tallies, per-period sentiment with paired
//! t-tests against the leader, top-choice series and argument summaries.
//!
//! Everything here is computed from a [`SessionRecord`], which holds only
//! what the event log holds, so live and replayed sessions agree exactly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{InsightSummary, Polarity, ReasonRecord};
use crate::gateway::{DialogLine, Gateway, GatewayRequest, LineRole, SessionContext, SummarySubject};
use crate::message::AuthorKind;
use crate::preference::{NetPreference, OptionSet, PreferenceSnapshot, PreferenceState};
use crate::stats::{paired_t_test, PairedTTest};
use crate::time::{Millis, ParticipantId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("period {0} contains no samples")]
    EmptyPeriod(String),
    #[error("invalid periods: {0}")]
    InvalidPeriods(String),
}

/// Marker written in place of a narrative the gateway could not produce.
pub const SUMMARY_UNAVAILABLE: &str = "[summary unavailable]";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodDefinition {
    pub name: String,
    pub start: Millis,
    pub end: Millis,
}

impl PeriodDefinition {
    pub fn new(name: impl Into<String>, start_secs: u64, end_secs: u64) -> Self {
        PeriodDefinition {
            name: name.into(),
            start: Millis::from_secs(start_secs),
            end: Millis::from_secs(end_secs),
        }
    }

    /// Half-open `[start, end)`, except the final period also takes `end`.
    fn contains(&self, t: Millis, is_last: bool) -> bool {
        t >= self.start && (t < self.end || (is_last && t == self.end))
    }
}

/// Initialization 0-150 s, Deliberation 150-300 s, Convergence 300-400 s.
pub fn default_periods() -> Vec<PeriodDefinition> {
    vec![
        PeriodDefinition::new("Initialization", 0, 150),
        PeriodDefinition::new("Deliberation", 150, 300),
        PeriodDefinition::new("Convergence", 300, 400),
    ]
}

/// Periods must be non-empty, ordered and contiguous.
pub fn validate_periods(periods: &[PeriodDefinition]) -> Result<(), AnalyticsError> {
    if periods.is_empty() {
        return Err(AnalyticsError::InvalidPeriods("no periods".into()));
    }
    for p in periods {
        if p.start >= p.end {
            return Err(AnalyticsError::InvalidPeriods(format!("{} ends before it starts", p.name)));
        }
    }
    for w in periods.windows(2) {
        if w[0].end != w[1].start {
            return Err(AnalyticsError::InvalidPeriods(format!(
                "{} and {} are not contiguous",
                w[0].name, w[1].name
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- record

/// A preference or insight event, in log order.
#[derive(Clone, Debug, PartialEq)]
pub enum TimelineEntry {
    Snapshot(PreferenceSnapshot),
    Insight(InsightSummary),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentSummary {
    pub option: String,
    pub favor_text: String,
    pub against_text: String,
    /// Distinct participants with at least one reason in favor.
    pub favor_supporter_count: usize,
    /// Distinct participants with at least one reason against.
    pub against_count: usize,
}

/// Everything analytics needs, reconstructible from the event log alone.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub participants: Vec<ParticipantId>,
    pub duration: Millis,
    pub periods: Vec<PeriodDefinition>,
    pub timeline: Vec<TimelineEntry>,
    pub closed_at: Option<Millis>,
    pub final_answer: Option<String>,
    pub summaries: Vec<ArgumentSummary>,
}

impl SessionRecord {
    pub fn new(
        session_id: impl Into<String>,
        question: impl Into<String>,
        options: Vec<String>,
        participants: Vec<ParticipantId>,
        duration: Millis,
        periods: Vec<PeriodDefinition>,
    ) -> Self {
        SessionRecord {
            session_id: session_id.into(),
            question: question.into(),
            options,
            participants,
            duration,
            periods,
            timeline: Vec::new(),
            closed_at: None,
            final_answer: None,
            summaries: Vec::new(),
        }
    }

    pub fn reasons(&self) -> impl Iterator<Item = &ReasonRecord> {
        self.timeline.iter().flat_map(|e| match e {
            TimelineEntry::Insight(s) => s.reasons.as_slice(),
            TimelineEntry::Snapshot(_) => &[],
        })
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &PreferenceSnapshot> {
        self.timeline.iter().filter_map(|e| match e {
            TimelineEntry::Snapshot(s) => Some(s),
            TimelineEntry::Insight(_) => None,
        })
    }

    /// Last time covered by the record.
    pub fn end_time(&self) -> Millis {
        self.closed_at.unwrap_or(self.duration)
    }

    fn initial_state(&self) -> PreferenceState {
        PreferenceState::new(self.participants.clone(), OptionSet::new(self.options.iter().cloned()))
    }

    /// Replays the timeline, calling `visit` after every merged snapshot.
    pub fn walk(&self, mut visit: impl FnMut(&PreferenceSnapshot, &PreferenceState)) -> PreferenceState {
        let mut state = self.initial_state();
        for entry in &self.timeline {
            match entry {
                TimelineEntry::Insight(s) => {
                    for o in &s.suggestions {
                        state.add_option(o.clone());
                    }
                }
                TimelineEntry::Snapshot(snap) => {
                    // Records come from validated merges, so this cannot fail.
                    if let Err(e) = state.merge_snapshot(snap) {
                        log::error!("skipping snapshot during replay: {e}");
                        continue;
                    }
                    visit(snap, &state);
                }
            }
        }
        state
    }

    /// Final carried state.
    pub fn final_state(&self) -> PreferenceState {
        self.walk(|_, _| {})
    }

    /// All options in first-seen order.
    pub fn option_order(&self) -> Vec<String> {
        self.final_state().options().labels().to_vec()
    }

    /// Carried state as of each time in `times` (ascending): every snapshot
    /// with `t <= time` applied.
    pub fn states_at(&self, times: &[Millis]) -> Vec<PreferenceState> {
        let mut state = self.initial_state();
        let mut out = Vec::with_capacity(times.len());
        let mut entries = self.timeline.iter().peekable();
        for &time in times {
            while let Some(entry) = entries.peek() {
                match entry {
                    TimelineEntry::Snapshot(s) if s.t > time => break,
                    TimelineEntry::Snapshot(s) => {
                        if let Err(e) = state.merge_snapshot(s) {
                            log::error!("skipping snapshot during replay: {e}");
                        }
                    }
                    TimelineEntry::Insight(s) => {
                        // Insights carry no time of their own; suggestions
                        // join the option set when the next snapshot lands.
                        for o in &s.suggestions {
                            state.add_option(o.clone());
                        }
                    }
                }
                entries.next();
            }
            out.push(state.clone());
        }
        out
    }

    /// Net preference after every labeling pass.
    pub fn net_preference_series(&self) -> Vec<NetPreference> {
        let mut out = Vec::new();
        self.walk(|snap, state| out.push(state.net_preference(snap.t)));
        out
    }
}

// ---------------------------------------------------------------- tallies

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionTally {
    pub option: String,
    pub in_favor: usize,
    pub against: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyTotals {
    pub in_favor: usize,
    pub against: usize,
    pub all: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonTally {
    /// In order of first appearance.
    pub per_option: Vec<OptionTally>,
    pub totals: TallyTotals,
}

impl ReasonTally {
    pub fn get(&self, option: &str) -> Option<&OptionTally> {
        self.per_option.iter().find(|t| t.option == option)
    }

    /// Reorders rows to follow `options`; unseen options get zero rows.
    pub fn ordered_by(mut self, options: &[String]) -> Self {
        let mut rows = Vec::with_capacity(options.len().max(self.per_option.len()));
        for o in options {
            let row = match self.per_option.iter().position(|t| &t.option == o) {
                Some(i) => self.per_option.remove(i),
                None => OptionTally {
                    option: o.clone(),
                    ..OptionTally::default()
                },
            };
            rows.push(row);
        }
        rows.append(&mut self.per_option);
        ReasonTally {
            per_option: rows,
            totals: self.totals,
        }
    }
}

/// Counts every reason instance by option and polarity. No deduplication.
pub fn tally_reasons<'a>(reasons: impl IntoIterator<Item = &'a ReasonRecord>) -> ReasonTally {
    let mut tally = ReasonTally::default();
    let mut position: HashMap<&str, usize> = HashMap::new();
    for r in reasons {
        let i = *position.entry(r.option.as_str()).or_insert_with(|| {
            tally.per_option.push(OptionTally {
                option: r.option.clone(),
                ..OptionTally::default()
            });
            tally.per_option.len() - 1
        });
        match r.polarity {
            Polarity::InFavor => {
                tally.per_option[i].in_favor += 1;
                tally.totals.in_favor += 1;
            }
            Polarity::Against => {
                tally.per_option[i].against += 1;
                tally.totals.against += 1;
            }
        }
    }
    tally.totals.all = tally.totals.in_favor + tally.totals.against;
    tally
}

// ---------------------------------------------------------------- periods

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionMean {
    pub option: String,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionTTest {
    pub option: String,
    pub test: PairedTTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodReport {
    pub period: PeriodDefinition,
    pub samples: usize,
    pub mean_sentiment: Vec<OptionMean>,
    pub leader: String,
    /// Leader versus each other option; the leader has no entry.
    pub t_tests: Vec<OptionTTest>,
}

impl PeriodReport {
    pub fn mean(&self, option: &str) -> Option<f64> {
        self.mean_sentiment.iter().find(|m| m.option == option).map(|m| m.mean)
    }

    pub fn t_test(&self, option: &str) -> Option<&PairedTTest> {
        self.t_tests.iter().find(|t| t.option == option).map(|t| &t.test)
    }
}

/// Mean net preference per option over the samples falling in each period.
pub fn period_sentiment(
    series: &[NetPreference],
    periods: &[PeriodDefinition],
) -> Vec<Result<Vec<OptionMean>, AnalyticsError>> {
    periods
        .iter()
        .enumerate()
        .map(|(pi, period)| {
            let is_last = pi + 1 == periods.len();
            let samples: Vec<&NetPreference> = series.iter().filter(|s| period.contains(s.t, is_last)).collect();
            if samples.is_empty() {
                return Err(AnalyticsError::EmptyPeriod(period.name.clone()));
            }
            let mut sums: Vec<(String, f64)> = Vec::new();
            for sample in &samples {
                for o in &sample.per_option {
                    match sums.iter_mut().find(|(name, _)| name == &o.option) {
                        Some((_, sum)) => *sum += o.net,
                        None => sums.push((o.option.clone(), o.net)),
                    }
                }
            }
            // Options that appear mid-period count as 0 in earlier samples.
            let k = samples.len() as f64;
            Ok(sums.into_iter().map(|(option, sum)| OptionMean { option, mean: sum / k }).collect())
        })
        .collect()
}

/// Per-period means with paired t-tests, pairing each participant's mean
/// leader score against their mean score for each rival.
///
/// The leader is `leader` when given (normally the final answer), else the
/// period's highest mean, ties to the smaller label.
pub fn period_reports(
    record: &SessionRecord,
    leader: Option<&str>,
) -> Vec<Result<PeriodReport, AnalyticsError>> {
    let options = record.option_order();
    let population = record.participants.len();
    let periods = &record.periods;
    // sums[period][participant][option]
    let mut sums = vec![vec![vec![0i64; options.len()]; population]; periods.len()];
    let mut counts = vec![0usize; periods.len()];
    let option_index: HashMap<&str, usize> = options.iter().enumerate().map(|(i, o)| (o.as_str(), i)).collect();

    record.walk(|snap, state| {
        let Some(pi) = periods
            .iter()
            .enumerate()
            .position(|(i, p)| p.contains(snap.t, i + 1 == periods.len()))
        else {
            return;
        };
        counts[pi] += 1;
        for (u, user) in state.participants().iter().enumerate() {
            for o in state.options().labels() {
                let score = state.score(user, o) as i64;
                if score != 0 {
                    sums[pi][u][option_index[o.as_str()]] += score;
                }
            }
        }
    });

    periods
        .iter()
        .enumerate()
        .map(|(pi, period)| {
            let k = counts[pi];
            if k == 0 {
                return Err(AnalyticsError::EmptyPeriod(period.name.clone()));
            }
            let totals: Vec<i64> = (0..options.len())
                .map(|o| sums[pi].iter().map(|u| u[o]).sum())
                .collect();
            let denom = (population * k) as f64;
            let mean_sentiment: Vec<OptionMean> = options
                .iter()
                .zip(&totals)
                .map(|(o, &t)| OptionMean {
                    option: o.clone(),
                    mean: t as f64 / denom,
                })
                .collect();
            let leader_idx = match leader.and_then(|l| option_index.get(l)) {
                Some(&i) => i,
                None => (0..options.len())
                    .max_by(|&a, &b| totals[a].cmp(&totals[b]).then_with(|| options[b].cmp(&options[a])))
                    .unwrap_or(0),
            };
            let user_means = |o: usize| -> Vec<f64> { sums[pi].iter().map(|u| u[o] as f64 / k as f64).collect() };
            let leader_means = user_means(leader_idx);
            let t_tests = (0..options.len())
                .filter(|&o| o != leader_idx)
                .filter_map(|o| {
                    paired_t_test(&leader_means, &user_means(o)).ok().map(|test| OptionTTest {
                        option: options[o].clone(),
                        test,
                    })
                })
                .collect();
            Ok(PeriodReport {
                period: period.clone(),
                samples: k,
                mean_sentiment,
                leader: options.get(leader_idx).cloned().unwrap_or_default(),
                t_tests,
            })
        })
        .collect()
}

// ---------------------------------------------------------------- top choices

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopChoiceSample {
    pub t: Millis,
    /// Supporters per option, in option order.
    pub counts: Vec<(String, usize)>,
    pub undecided: usize,
}

impl TopChoiceSample {
    pub fn count(&self, option: &str) -> usize {
        self.counts.iter().find(|(o, _)| o == option).map_or(0, |(_, c)| *c)
    }
}

/// Tallies every participant's top choice at each sample time.
pub fn top_choice_series(record: &SessionRecord, sample_times: &[Millis]) -> Vec<TopChoiceSample> {
    let options = record.option_order();
    record
        .states_at(sample_times)
        .into_iter()
        .zip(sample_times)
        .map(|(state, &t)| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            let mut undecided = 0;
            for u in 0..state.participants().len() {
                match state.top_choice_at(u) {
                    Some(o) => *counts.entry(options.iter().find(|x| **x == o).map_or("", |s| s.as_str())).or_default() += 1,
                    None => undecided += 1,
                }
            }
            TopChoiceSample {
                t,
                counts: options.iter().map(|o| (o.clone(), counts.get(o.as_str()).copied().unwrap_or(0))).collect(),
                undecided,
            }
        })
        .collect()
}

/// Uniform grid `0, step, 2 step, ..` up to and including `end`.
pub fn sample_grid(end: Millis, step: Millis) -> Vec<Millis> {
    let step = step.0.max(1);
    let mut out: Vec<Millis> = (0..=end.0 / step).map(|i| Millis(i * step)).collect();
    if out.last() != Some(&end) {
        out.push(end);
    }
    out
}

pub const PLOT_GRID: Millis = Millis(10_000);

// ---------------------------------------------------------------- summaries

fn distinct_authors<'a>(reasons: impl Iterator<Item = &'a ReasonRecord>) -> usize {
    reasons.map(|r| &r.author).collect::<BTreeSet<_>>().len()
}

/// Per option: distinct participants arguing each side and a gateway-written
/// narrative over that side's reasons.
pub fn generate_argument_summaries(
    reasons: &[ReasonRecord],
    options: &[String],
    gateway: &Gateway,
    context: &SessionContext,
) -> Vec<ArgumentSummary> {
    options
        .iter()
        .enumerate()
        .map(|(ordinal, option)| {
            let side = |polarity: Polarity| reasons.iter().filter(move |r| &r.option == option && r.polarity == polarity);
            let favor_supporter_count = distinct_authors(side(Polarity::InFavor));
            let against_count = distinct_authors(side(Polarity::Against));
            let narrate = |polarity: Polarity, participants: usize, slot: u64| -> String {
                let payload: Vec<DialogLine> = side(polarity)
                    .map(|r| DialogLine::new(r.author.clone(), AuthorKind::Human, r.text.clone(), LineRole::New))
                    .collect();
                if payload.is_empty() {
                    return String::new();
                }
                let request = GatewayRequest::summarize(
                    context.clone(),
                    ordinal as u64 * 2 + slot,
                    SummarySubject {
                        option: option.clone(),
                        polarity,
                        participants,
                    },
                    payload,
                );
                match gateway.call(&request).map(|r| r.into_summary()) {
                    Ok(Some(text)) => text,
                    Ok(None) | Err(_) => {
                        log::warn!("summary for {option} ({}) unavailable", polarity.phrase());
                        SUMMARY_UNAVAILABLE.to_string()
                    }
                }
            };
            ArgumentSummary {
                option: option.clone(),
                favor_text: narrate(Polarity::InFavor, favor_supporter_count, 0),
                against_text: narrate(Polarity::Against, against_count, 1),
                favor_supporter_count,
                against_count,
            }
        })
        .collect()
}
