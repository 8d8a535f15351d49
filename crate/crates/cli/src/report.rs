//! Summaries of a manifest: a deterministic JSON object and a text table.

use serde::Serialize;

use crate::experiments::{Criterion, Status};
use crate::manifest::RunManifest;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub experiment: String,
    pub config_hash: String,
    pub status: Status,
    pub failed: Vec<String>,
    pub criteria: Vec<(String, Criterion)>,
}

pub fn build_report(m: &RunManifest) -> Report {
    let criteria: Vec<(String, Criterion)> = m
        .summaries
        .iter()
        .flat_map(|s| {
            s.criteria
                .iter()
                .map(move |c| (s.experiment.clone(), c.clone()))
        })
        .collect();
    let flat: Vec<Criterion> = criteria.iter().map(|(_, c)| c.clone()).collect();
    let failed = criteria
        .iter()
        .filter(|(_, c)| !c.passed)
        .map(|(e, c)| format!("{e}/{}", c.name))
        .collect();
    Report {
        experiment: m.experiment.clone(),
        config_hash: m.config_hash.clone(),
        status: Status::of(&flat),
        failed,
        criteria,
    }
}

/// `(json, table)`. Times are left out so that reruns compare equal.
pub fn emit_report(m: &RunManifest) -> (String, String) {
    let r = build_report(m);
    let json = serde_json::to_string_pretty(&r).expect("report serializes");
    let width = r
        .criteria
        .iter()
        .map(|(e, c)| e.len() + c.name.len() + 1)
        .max()
        .unwrap_or(9)
        .max(9);
    let mut table = format!("{:<width$}  result  detail\n", "criterion");
    for (e, c) in &r.criteria {
        let name = format!("{e}/{}", c.name);
        let mark = if c.passed { "PASS" } else { "FAIL" };
        table.push_str(&format!("{name:<width$}  {mark:<6}  {}\n", c.detail));
    }
    let status = match r.status {
        Status::Pass => "pass".to_string(),
        Status::Noop => "noop (no criteria)".to_string(),
        Status::Fail => format!("fail: {}", r.failed.join(", ")),
    };
    table.push_str(&format!("status: {status}\n"));
    (json, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::ExperimentOutcome;

    fn outcome(criteria: Vec<Criterion>) -> ExperimentOutcome {
        ExperimentOutcome {
            experiment: "x".into(),
            status: Status::of(&criteria),
            seeds: vec![1],
            criteria,
            aborted: vec![],
            csv: vec![],
            values: serde_json::json!({}),
        }
    }

    fn crit(name: &str, passed: bool) -> Criterion {
        Criterion {
            name: name.into(),
            passed,
            detail: String::new(),
        }
    }

    #[test]
    fn empty_manifest_is_noop() {
        let m = RunManifest::new("x", "h".into(), 0, vec![]);
        let r = build_report(&m);
        assert_eq!(r.status, Status::Noop);
        assert!(emit_report(&m).1.contains("noop"));
    }

    #[test]
    fn failing_criterion_is_named() {
        let m = RunManifest::new(
            "x",
            "h".into(),
            0,
            vec![outcome(vec![crit("a", true), crit("b", false)])],
        );
        let (json, table) = emit_report(&m);
        assert!(json.contains("\"fail\""));
        assert!(table.contains("fail: x/b"));
        let mut later = m.clone();
        later.finished_unix_ms += 1000;
        assert_eq!(emit_report(&later).0, json);
    }
}
