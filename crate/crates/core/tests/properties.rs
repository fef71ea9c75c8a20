mod common;

use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use serde_json::json;
use toa_core::envelope::{extract_envelope, EnvelopeContract};
use toa_core::harness::{jaccard, metrics_cdf, run_task, CdfMetric, RunConfig, RunReport, TaskPreset};
use toa_core::hub::{dedup_key, KnowledgeHub};
use toa_core::llm::{BackendHandle, ScriptedPolicy};
use toa_core::model::{
    normalize_relative, AgentId, AgentType, Budget, Confidence, Evidence, Finding, ObjectRef, SemanticType,
};
use toa_core::tools::{cap_output, parse_pipeline, TRUNCATION_MARKER};

fn base_report() -> &'static RunReport {
    static R: OnceLock<RunReport> = OnceLock::new();
    R.get_or_init(|| {
        let out = tempfile::tempdir().unwrap();
        let fw = tempfile::tempdir().unwrap();
        let h = BackendHandle::scripted(ScriptedPolicy::default(), 0);
        run_task(fw.path(), &TaskPreset::builtin("T1").unwrap(), &RunConfig::default(), &h, out.path()).unwrap()
    })
}

fn finding(path: &str, summary: &str, links: &[String]) -> Finding {
    Finding {
        summary: summary.to_string(),
        location: ObjectRef::file(path).unwrap(),
        semantic_type: SemanticType::Credential,
        link_ids: links.iter().cloned().collect(),
        evidence: vec![Evidence {
            agent_id: "0".into(),
            tool: "ShellExecute".into(),
            timestamp: chrono::DateTime::UNIX_EPOCH,
            raw_snippet: "x".into(),
            locator: None,
        }],
        confidence: Confidence::Verified,
        explanation: None,
        trace: None,
    }
}

proptest! {
    #[test]
    fn jaccard_bounded_and_symmetric(a in prop::collection::btree_set(0u8..20, 0..10), b in prop::collection::btree_set(0u8..20, 0..10)) {
        let j = jaccard(&a, &b);
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &a), 1.0);
        let inter = a.intersection(&b).count();
        let union: BTreeSet<_> = a.union(&b).collect();
        if !union.is_empty() {
            prop_assert_eq!(j, inter as f64 / union.len() as f64);
        }
    }

    #[test]
    fn cdf_is_monotone_and_ends_at_one(values in prop::collection::vec(1u32..500, 1..30)) {
        let reports: Vec<RunReport> = values.iter().map(|&v| {
            let mut r = base_report().clone();
            r.metrics.agent_count = v;
            r
        }).collect();
        let rows = metrics_cdf(&reports, CdfMetric::AgentCount).unwrap();
        prop_assert_eq!(rows.len(), values.len());
        for w in rows.windows(2) {
            prop_assert!(w[0].value <= w[1].value);
            prop_assert!(w[0].fraction <= w[1].fraction);
        }
        prop_assert_eq!(rows.last().unwrap().fraction, 1.0);
        for r in &rows {
            let le = values.iter().filter(|&&v| v as u64 <= r.value).count();
            prop_assert_eq!(r.fraction, le as f64 / values.len() as f64);
        }
    }

    #[test]
    fn dedup_key_ignores_whitespace(words in prop::collection::vec("[a-z0-9]{1,6}", 1..6), pad in "[ \t\n]{1,3}") {
        let plain = words.join(" ");
        let inner = words.join(&pad);
        let padded = format!("{pad}{inner}{pad}");
        prop_assert_eq!(dedup_key(&finding("etc/a", &plain, &[])), dedup_key(&finding("etc/a", &padded, &[])));
        prop_assert_ne!(dedup_key(&finding("etc/a", &plain, &[])), dedup_key(&finding("etc/b", &plain, &[])));
    }

    #[test]
    fn agent_ids_round_trip(segs in prop::collection::vec(0u32..50, 0..6)) {
        let id = segs.iter().fold(AgentId::root(), |a, s| a.child(*s));
        let parsed: AgentId = id.to_string().parse().unwrap();
        prop_assert_eq!(&parsed, &id);
        prop_assert_eq!(id.depth(), segs.len());
        if let Some(p) = id.parent() {
            prop_assert!(p.is_ancestor_of(&id));
        }
    }

    #[test]
    fn normalized_paths_never_escape(parts in prop::collection::vec(prop_oneof!["[a-z]{1,4}", Just("..".to_string()), Just(".".to_string())], 0..8)) {
        let raw = parts.join("/");
        if let Ok(p) = normalize_relative(&raw) {
            prop_assert!(!p.split('/').any(|s| s == ".." || s == "."));
            prop_assert!(!p.starts_with('/'));
        }
    }

    #[test]
    fn capped_output_is_bounded(text in ".{0,400}", cap in 1usize..200) {
        let (out, truncated) = cap_output(&text, cap);
        prop_assert!(out.len() <= cap + TRUNCATION_MARKER.len());
        prop_assert_eq!(truncated, text.len() > cap);
        if !truncated {
            prop_assert_eq!(out, text);
        }
    }

    #[test]
    fn shell_metacharacters_always_rejected(a in "[a-z ]{0,8}", b in "[a-z ]{0,8}", meta in prop::sample::select(vec![";", "&", ">", "<", "`", "$(", "||", "\n"])) {
        let cmd = format!("ls {a}{meta}{b}");
        prop_assert!(parse_pipeline(&cmd).is_err());
    }

    #[test]
    fn envelopes_survive_brace_free_prose(pre in "[a-zA-Z ,.:!\n]{0,60}", post in "[a-zA-Z ,.:!\n]{0,60}", cmd in "[a-z]{1,8}") {
        let env = common::envelope("ShellExecute", json!({"command": cmd}));
        let c = EnvelopeContract::permissive();
        let want = extract_envelope(&env, &c).unwrap();
        let plain = format!("{pre}{env}{post}");
        let fenced = format!("{pre}```json\n{env}\n```{post}");
        prop_assert_eq!(extract_envelope(&plain, &c).unwrap(), want.clone());
        prop_assert_eq!(extract_envelope(&fenced, &c).unwrap(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hub_store_is_idempotent(items in prop::collection::vec((0usize..4, 0usize..6, prop::collection::vec("[a-z]{1,3}", 0..3)), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let hub = KnowledgeHub::open(dir.path()).unwrap().without_fsync();
        let agent = AgentId::root();
        let mut distinct = BTreeSet::new();
        for (p, s, links) in &items {
            let f = finding(&format!("etc/f{p}"), &format!("secret {s}"), links);
            distinct.insert((p, s));
            hub.store(&f, &agent, AgentType::File, "prop").unwrap();
        }
        let n = hub.records().unwrap().len();
        prop_assert_eq!(n, distinct.len());
        for (p, s, links) in &items {
            let o = hub.store(&finding(&format!("etc/f{p}"), &format!("secret {s}"), links), &agent, AgentType::File, "prop").unwrap();
            prop_assert!(o.merged);
        }
        prop_assert_eq!(hub.records().unwrap().len(), n);
        let err = hub.store(&finding("etc/x", "s", &[]), &agent, AgentType::Directory, "prop");
        prop_assert!(err.is_err());
    }

    #[test]
    fn random_runs_respect_budgets(seed in 0u64..10_000, depth in 1u32..=4, steps in 1u32..8) {
        let rt = tempfile::tempdir().unwrap();
        common::random_tree(rt.path());
        let hub = tempfile::tempdir().unwrap();
        let budget = Budget::new(steps, depth, 3, 3).unwrap();
        let run = common::run(
            common::setup(rt.path(), hub.path()),
            "random",
            budget,
            &common::handle(common::random_policy(seed, rt.path().to_path_buf())),
        );
        prop_assert!(run.sealed);
        prop_assert!(run.check_tree().is_ok());
        prop_assert!(run.blueprint_violations().is_empty());
        prop_assert!(run.nodes.values().all(|n| n.depth <= depth && n.steps_used <= steps));
        prop_assert!(run.nodes.values().all(|n| n.state.is_terminal()));
        prop_assert_eq!(run.metrics.leaf_steps + run.metrics.integration_steps, run.metrics.total_steps);
    }
}
