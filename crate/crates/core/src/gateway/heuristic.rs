//! Unscripted mock behaviors: keyword polarity scoring, pass-through
//! narratives and the fixed summary template.

use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::{ExtractedReason, GatewayRequest, LineRole};
use crate::agents::Polarity;
use crate::message::AuthorKind;

const POSITIVE: &[&str] = &[
    "support", "like", "love", "best", "great", "strong", "good", "agree", "favor", "prefer", "win", "electable",
    "trust", "backing", "appeal", "popular",
];
const NEGATIVE: &[&str] = &[
    "against", "dislike", "hate", "worst", "bad", "weak", "oppose", "polarizing", "lose", "distrust", "unelectable",
    "radical", "damaged", "scandal",
];
const INTENSIFIERS: &[&str] = &["very", "really", "strongly", "absolutely", "extremely", "definitely", "totally"];
const SUGGESTION_CUES: &[&str] = &["i suggest ", "what about ", "how about ", "i propose ", "consider "];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn mentions(text: &str, option: &str) -> bool {
    let text = words(text);
    let option = words(option);
    !option.is_empty() && text.windows(option.len()).any(|w| w == option.as_slice())
}

/// Signed stance of `text`: sign from positive vs negative cue counts,
/// magnitude `1 + min(2, intensifiers)`. Zero when the cues cancel.
pub(crate) fn stance(text: &str) -> i8 {
    let words = words(text);
    let count = |list: &[&str]| words.iter().filter(|w| list.contains(&w.as_str())).count() as i64;
    let net = count(POSITIVE) - count(NEGATIVE);
    if net == 0 {
        return 0;
    }
    let magnitude = 1 + count(INTENSIFIERS).min(2);
    (net.signum() * magnitude) as i8
}

fn new_human_lines(request: &GatewayRequest) -> impl Iterator<Item = &super::DialogLine> {
    request
        .payload
        .iter()
        .filter(|l| l.role == LineRole::New && l.author_kind == AuthorKind::Human)
}

fn suggested_label(text: &str) -> Option<String> {
    let lower = text.to_lowercase();
    SUGGESTION_CUES.iter().find_map(|cue| {
        let start = lower.find(cue)? + cue.len();
        let tail: String = text[start..]
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == ' ' || *c == '-' || *c == '\'')
            .collect();
        let label = tail.split_whitespace().take(3).collect::<Vec<_>>().join(" ");
        (!label.is_empty()).then_some(label)
    })
}

pub(crate) fn label(request: &GatewayRequest) -> Value {
    // Later messages overwrite earlier ones for the same pair.
    let mut latest: BTreeMap<(String, String), i8> = BTreeMap::new();
    for line in new_human_lines(request) {
        for option in &request.context.options {
            if mentions(&line.text, option) {
                latest.insert((line.author.0.clone(), option.clone()), stance(&line.text));
            }
        }
    }
    let labels: Vec<Value> = latest
        .into_iter()
        .map(|((user, option), score)| json!({"user": user, "option": option, "score": score}))
        .collect();
    json!({ "labels": labels })
}

pub(crate) fn distill(request: &GatewayRequest) -> Value {
    let mut options = request.context.options.clone();
    let mut suggestions = Vec::new();
    for line in new_human_lines(request) {
        if let Some(label) = suggested_label(&line.text) {
            if !options.iter().any(|o| o.eq_ignore_ascii_case(&label)) {
                options.push(label.clone());
                suggestions.push(label);
            }
        }
    }
    let mut reasons = Vec::new();
    for line in new_human_lines(request) {
        let score = stance(&line.text);
        if score == 0 {
            continue;
        }
        for option in options.iter().filter(|o| mentions(&line.text, o)) {
            reasons.push(ExtractedReason {
                option: option.clone(),
                polarity: if score > 0 { Polarity::InFavor } else { Polarity::Against },
                text: line.text.clone(),
                conviction: score.unsigned_abs(),
                author: line.author.clone(),
            });
        }
    }
    let narrative = narrative_from(&suggestions, &reasons);
    json!({ "suggestions": suggestions, "reasons": reasons, "narrative": narrative })
}

pub(crate) fn pass_through(request: &GatewayRequest) -> Value {
    let narrative = new_human_lines(request).map(|l| l.text.as_str()).collect::<Vec<_>>().join(" | ");
    json!({ "suggestions": [], "reasons": [], "narrative": narrative })
}

/// First-person relay text built from distilled points.
pub(crate) fn narrative_from(suggestions: &[String], reasons: &[ExtractedReason]) -> String {
    if suggestions.is_empty() && reasons.is_empty() {
        return String::new();
    }
    let mut points: Vec<String> = suggestions.iter().map(|s| format!("someone proposed {s}")).collect();
    points.extend(reasons.iter().map(|r| match r.polarity {
        Polarity::InFavor => format!("for {}: {}", r.option, r.text),
        Polarity::Against => format!("against {}: {}", r.option, r.text),
    }));
    format!("Another group noted: {}", points.join("; "))
}

pub(crate) fn template_summary(request: &GatewayRequest) -> Value {
    let Some(subject) = &request.subject else {
        return json!({ "text": "" });
    };
    let mut seen = std::collections::HashSet::new();
    let points: Vec<&str> = request
        .payload
        .iter()
        .map(|l| l.text.as_str())
        .filter(|t| seen.insert(*t))
        .collect();
    let text = format!(
        "{} participants argued {} {} because: {}",
        subject.participants,
        subject.polarity.phrase(),
        subject.option,
        points.join("; ")
    );
    json!({ "text": text })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{DialogLine, SessionContext};

    fn request(lines: &[(&str, &str)]) -> GatewayRequest {
        GatewayRequest::label(
            SessionContext {
                session_id: "s".into(),
                question: "q".into(),
                options: vec!["Hartley".into(), "Delgado".into()],
            },
            0,
            1,
            lines
                .iter()
                .map(|(a, t)| DialogLine::new((*a).into(), AuthorKind::Human, *t, LineRole::New))
                .collect(),
            vec![],
        )
    }

    #[test]
    fn stance_scales_with_intensifiers() {
        assert_eq!(stance("I support her"), 1);
        assert_eq!(stance("I really strongly support her"), 3);
        assert_eq!(stance("very very very bad"), -3);
        assert_eq!(stance("no opinion"), 0);
        assert_eq!(stance("good but weak"), 0);
    }

    #[test]
    fn label_scores_mentioned_options_only() {
        let v = label(&request(&[("u1", "Delgado is really great"), ("u2", "Hartley seems fine")]));
        let labels = v["labels"].as_array().unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0], json!({"user": "u1", "option": "Delgado", "score": 2}));
        assert_eq!(labels[1], json!({"user": "u2", "option": "Hartley", "score": 0}));
    }

    #[test]
    fn distill_finds_suggestions_and_reasons() {
        let mut req = request(&[("u1", "What about Morales? Morales is a strong pick")]);
        req.kind = crate::gateway::RequestKind::Distill;
        let v = distill(&req);
        assert_eq!(v["suggestions"], json!(["Morales"]));
        assert_eq!(v["reasons"][0]["option"], "Morales");
        assert_eq!(v["reasons"][0]["polarity"], "in_favor");
        assert!(v["narrative"].as_str().unwrap().starts_with("Another group noted:"));
    }

    #[test]
    fn word_boundaries_respected() {
        assert!(mentions("go Delgado!", "Delgado"));
        assert!(!mentions("Delgadoes", "Delgado"));
    }
}
