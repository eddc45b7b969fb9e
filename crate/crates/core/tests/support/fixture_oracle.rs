//! Counts the fixture's expected analytics straight from the checked-in
//! JSON files, without going through the session runtime.


use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use csi_core::time::ParticipantId;
use csi_core::topology::{assign_participants, plan_topology};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, StudentsT};

pub struct Oracle {
    pub options: Vec<String>,
    pub leader: String,
    /// (option, favor, against) in option order.
    pub tally: Vec<(String, usize, usize)>,
    pub favor_authors: usize,
    pub against_authors: usize,
    /// (time ms, room, pass) in firing order.
    pub passes: Vec<(u64, usize, u64)>,
    labels: BTreeMap<(usize, u64), Vec<Label>>,
    users: Vec<String>,
    periods: Vec<(String, u64, u64)>,
}

/// (user, option, score).
type Label = (String, String, i64);

pub struct PeriodOracle {
    pub name: String,
    pub samples: usize,
    pub means: Vec<(String, f64)>,
    /// Leader versus each rival: (rival, t, p).
    pub tests: Vec<(String, f64, f64)>,
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

impl Oracle {
    pub fn load(dir: &Path) -> Oracle {
        let session: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("session.json")).unwrap()).unwrap();
        let options: Vec<String> = session["options"].as_array().unwrap().iter().map(|o| o.as_str().unwrap().to_owned()).collect();
        let seed = session["seed"].as_u64().unwrap();
        let gateway = jsonl(&dir.join("gateway.jsonl"));
        let bots = jsonl(&dir.join("bots.jsonl"));

        let mut tally: Vec<(String, usize, usize)> = options.iter().map(|o| (o.clone(), 0, 0)).collect();
        let mut favor = BTreeSet::new();
        let mut against = BTreeSet::new();
        let mut labels = BTreeMap::new();
        for line in &gateway {
            let room = line["room"].as_u64().unwrap() as usize;
            let index = line["index"].as_u64().unwrap();
            match line["kind"].as_str().unwrap() {
                "distill" => {
                    for r in line["response"]["reasons"].as_array().unwrap() {
                        let row = tally.iter_mut().find(|t| t.0 == r["option"].as_str().unwrap()).unwrap();
                        let author = r["author"].as_str().unwrap().to_owned();
                        if r["polarity"] == "in_favor" {
                            row.1 += 1;
                            favor.insert(author);
                        } else {
                            row.2 += 1;
                            against.insert(author);
                        }
                    }
                }
                "label" => {
                    let l = line["response"]["labels"]
                        .as_array()
                        .unwrap()
                        .iter()
                        .map(|l| {
                            (
                                l["user"].as_str().unwrap().to_owned(),
                                l["option"].as_str().unwrap().to_owned(),
                                l["score"].as_i64().unwrap(),
                            )
                        })
                        .collect::<Vec<_>>();
                    labels.insert((room, index), l);
                }
                other => panic!("unexpected line kind {other}"),
            }
        }

        let users: Vec<String> = bots.iter().map(|b| b["bot"].as_str().unwrap().to_owned()).collect();
        let ids: Vec<ParticipantId> = users.iter().map(|u| ParticipantId(u.clone())).collect();
        let topology = plan_topology(ids.len(), 5).unwrap();
        let room_of: BTreeMap<String, usize> = assign_participants(&ids, &topology, seed)
            .unwrap()
            .into_iter()
            .map(|a| (a.participant_id.0, a.room_index))
            .collect();

        // A pass fires on every fifth message in a room.
        let mut times: Vec<Vec<u64>> = vec![Vec::new(); topology.room_count];
        for b in &bots {
            let room = room_of[b["bot"].as_str().unwrap()];
            times[room].extend(b["timeline"].as_array().unwrap().iter().map(|u| u["t"].as_u64().unwrap()));
        }
        let mut passes = Vec::new();
        for (room, ts) in times.iter_mut().enumerate() {
            ts.sort();
            assert_eq!(ts.len() % 5, 0, "room {room} leaves messages for the close flush");
            passes.extend(ts.chunks(5).enumerate().map(|(i, c)| (c[4], room, i as u64 + 1)));
        }
        passes.sort();

        Oracle {
            leader: String::new(),
            options,
            tally,
            favor_authors: favor.len(),
            against_authors: against.len(),
            passes,
            labels,
            users,
            periods: vec![
                ("Initialization".into(), 0, 150_000),
                ("Deliberation".into(), 150_000, 300_000),
                ("Convergence".into(), 300_000, 400_000),
            ],
        }
        .with_leader()
    }

    fn with_leader(mut self) -> Self {
        let end = self.scores_at(u64::MAX);
        let mut best = (i64::MIN, String::new());
        for o in &self.options {
            let sum: i64 = end.values().filter_map(|m| m.get(o)).sum();
            if sum > best.0 || (sum == best.0 && *o < best.1) {
                best = (sum, o.clone());
            }
        }
        self.leader = best.1;
        self
    }

    fn apply(&self, scores: &mut BTreeMap<String, BTreeMap<String, i64>>, room: usize, pass: u64) {
        for (user, option, score) in self.labels.get(&(room, pass)).into_iter().flatten() {
            scores.entry(user.clone()).or_default().insert(option.clone(), *score);
        }
    }

    /// Carried scores after every pass fired at or before `t`.
    pub fn scores_at(&self, t: u64) -> BTreeMap<String, BTreeMap<String, i64>> {
        let mut scores = BTreeMap::new();
        for &(_, room, pass) in self.passes.iter().take_while(|p| p.0 <= t) {
            self.apply(&mut scores, room, pass);
        }
        scores
    }

    /// Supporters per option plus undecided. Panics on a tied top score,
    /// which the fixture is built to avoid.
    pub fn top_choices(&self, t: u64) -> (BTreeMap<String, usize>, usize) {
        let scores = self.scores_at(t);
        let mut counts: BTreeMap<String, usize> = self.options.iter().map(|o| (o.clone(), 0)).collect();
        let mut undecided = 0;
        for user in &self.users {
            let best = scores.get(user).and_then(|m| {
                let top = *m.values().max()?;
                if top <= 0 {
                    return None;
                }
                let at_top: Vec<_> = m.iter().filter(|(_, &s)| s == top).collect();
                assert_eq!(at_top.len(), 1, "{user} has a tied top choice at {t}");
                Some(at_top[0].0.clone())
            });
            match best {
                Some(o) => *counts.get_mut(&o).unwrap() += 1,
                None => undecided += 1,
            }
        }
        (counts, undecided)
    }

    /// One sample after each pass; per-user means paired leader against rival.
    pub fn periods(&self) -> Vec<PeriodOracle> {
        let n = self.users.len();
        let last = self.periods.len() - 1;
        let mut out = Vec::new();
        for (pi, (name, start, end)) in self.periods.iter().enumerate() {
            let mut scores = BTreeMap::new();
            let mut sums: BTreeMap<(String, String), f64> = BTreeMap::new();
            let mut samples = 0;
            for &(at, room, pass) in &self.passes {
                self.apply(&mut scores, room, pass);
                let inside = at >= *start && (at < *end || (pi == last && at == *end));
                if !inside {
                    continue;
                }
                samples += 1;
                for (user, m) in &scores {
                    for (o, s) in m {
                        *sums.entry((user.clone(), o.clone())).or_default() += *s as f64;
                    }
                }
            }
            let user_means = |o: &str| -> Vec<f64> {
                self.users
                    .iter()
                    .map(|u| sums.get(&(u.clone(), o.to_owned())).copied().unwrap_or(0.0) / samples as f64)
                    .collect()
            };
            let means = self
                .options
                .iter()
                .map(|o| (o.clone(), user_means(o).iter().sum::<f64>() / n as f64))
                .collect();
            let lead = user_means(&self.leader);
            let tests = self
                .options
                .iter()
                .filter(|o| **o != self.leader)
                .map(|o| {
                    let d: Vec<f64> = lead.iter().zip(user_means(o)).map(|(a, b)| a - b).collect();
                    let m = d.iter().sum::<f64>() / n as f64;
                    let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                    let t = m / (var.sqrt() / (n as f64).sqrt());
                    let p = 2.0 * StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap().sf(t.abs());
                    (o.clone(), t, p)
                })
                .collect();
            out.push(PeriodOracle {
                name: name.clone(),
                samples,
                means,
                tests,
            });
        }
        out
    }
}
