use std::io::Write;
use std::path::Path;

use serde_json::json;

use super::{EventKind, ToARun};
use crate::model::{epoch, ChildResult, ReportPayload};

pub const TOA_FILE: &str = "toa.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVENTS_FILE: &str = "events.ndjson";

/// Strips everything that legitimately differs between identical runs:
/// clocks, scheduling order and knowledge-hub record numbering. Events are
/// regrouped per agent (each agent's own order is kept) and renumbered.
pub fn canonicalize(run: &ToARun) -> ToARun {
    let mut run = run.clone();
    run.started_at = epoch();
    run.metrics.wall_time_ms = 0;
    run.alerts.clear();
    run.events.sort_by(|a, b| a.agent_id.cmp(&b.agent_id).then(a.seq.cmp(&b.seq)));
    for (i, e) in run.events.iter_mut().enumerate() {
        e.seq = i as u64;
        e.timestamp = epoch();
        if e.kind == EventKind::Pkh {
            if let Some(obj) = e.detail.as_object_mut() {
                obj.remove("record_id");
            }
        }
    }
    for n in run.nodes.values_mut() {
        if let Some(r) = &mut n.result {
            clear_timestamps(r);
        }
    }
    clear_timestamps(&mut run.report);
    run
}

fn clear_timestamps(r: &mut ChildResult) {
    let findings = match &mut r.payload {
        ReportPayload::Directory(d) => &mut d.findings,
        ReportPayload::File(f) => &mut f.findings,
        ReportPayload::Function(_) => return,
    };
    for f in findings {
        for ev in &mut f.evidence {
            ev.timestamp = epoch();
        }
    }
}

/// Writes `toa.json`, `metrics.json` and `events.ndjson` into `dir`.
pub fn write_run_artifacts(run: &ToARun, dir: &Path, canonical: bool) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let owned;
    let run = if canonical {
        owned = canonicalize(run);
        &owned
    } else {
        run
    };
    let toa = json!({
        "run_id": run.run_id,
        "root_id": run.root_id,
        "started_at": run.started_at,
        "budget": run.budget,
        "sealed": run.sealed,
        "nodes": run.nodes,
    });
    std::fs::write(dir.join(TOA_FILE), serde_json::to_string_pretty(&toa)? + "\n")?;
    std::fs::write(dir.join(METRICS_FILE), serde_json::to_string_pretty(&run.metrics)? + "\n")?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(EVENTS_FILE))?);
    for e in &run.events {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()
}
