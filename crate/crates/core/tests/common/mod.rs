#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use toa_core::engine::{run_root, RunSetup, ToARun};
use toa_core::harness::RunConfig;
use toa_core::hub::KnowledgeHub;
use toa_core::llm::{AgentBinding, BackendHandle, ScriptPolicy, ScriptReply};
use toa_core::model::{Budget, Message, Role};
use toa_core::tools::{BinaryBackend, MockFixtures, ShellConfig, ToolSuite};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn firmware(name: &str) -> PathBuf {
    fixture(name).join("firmware")
}

pub fn config(name: &str) -> RunConfig {
    RunConfig::load(&fixture(name).join("config.toml")).expect("fixture config loads")
}

/// SHA-256 over every path, file mode and file body under `root`, in
/// sorted order.
pub fn tree_digest(root: &Path) -> String {
    fn walk(base: &Path, dir: &Path, h: &mut Sha256) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let meta = std::fs::symlink_metadata(&p).unwrap();
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
            h.update(rel.as_bytes());
            h.update([0]);
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                h.update(meta.permissions().mode().to_le_bytes());
            }
            if meta.is_dir() {
                walk(base, &p, h);
            } else if meta.file_type().is_symlink() {
                h.update(std::fs::read_link(&p).unwrap().to_string_lossy().as_bytes());
            } else {
                h.update(std::fs::read(&p).unwrap());
            }
            h.update([0xff]);
        }
    }
    let mut h = Sha256::new();
    walk(root, root, &mut h);
    format!("{:x}", h.finalize())
}

pub fn envelope(action: &str, input: Value) -> String {
    json!({"thought": "scripted", "action": action, "action_input": input, "status": "success"}).to_string()
}

pub fn finish(input: Value) -> String {
    envelope("finish", input)
}

pub fn turn(memory: &[Message]) -> usize {
    memory.iter().filter(|m| m.role == Role::Assistant).count()
}

pub fn last_error(memory: &[Message]) -> Option<&str> {
    match memory.last() {
        Some(m) if m.role == Role::Error => Some(&m.content),
        _ => None,
    }
}

/// Wraps a closure as a scripted policy; the closure sees the agent
/// binding (always present for engine-driven agents) and its memory.
pub struct FnPolicy<F>(pub F);

impl<F> ScriptPolicy for FnPolicy<F>
where
    F: Fn(&AgentBinding, &[Message]) -> String + Send + Sync,
{
    fn respond(&self, binding: Option<&AgentBinding>, memory: &[Message]) -> ScriptReply {
        ScriptReply::Text((self.0)(binding.expect("engine agents are bound"), memory))
    }
}

pub fn handle<F>(f: F) -> BackendHandle
where
    F: Fn(&AgentBinding, &[Message]) -> String + Send + Sync + 'static,
{
    BackendHandle::scripted(FnPolicy(f), 0)
}

pub fn tools(root: &Path, fixtures: MockFixtures) -> ToolSuite {
    ToolSuite::new(root, ShellConfig::default(), BinaryBackend::mock(fixtures), 8).unwrap()
}

/// Engine setup over `root` with a hub in `hub_dir`.
pub fn setup(root: &Path, hub_dir: &Path) -> RunSetup {
    RunSetup::new(tools(root, MockFixtures::new()), KnowledgeHub::open_fresh(hub_dir).unwrap().without_fsync())
}

/// Runs the engine and returns the sealed run whether or not the root
/// failed.
pub fn run(setup: RunSetup, prompt: &str, budget: Budget, handle: &BackendHandle) -> ToARun {
    match run_root(setup, prompt, budget, handle) {
        Ok(r) => r,
        Err(toa_core::engine::EngineError::RootFailure { run, .. }) => *run,
        Err(e) => panic!("engine error: {e}"),
    }
}

pub fn shared<T>(v: T) -> Arc<T> {
    Arc::new(v)
}

/// Builds a nested tree for randomized runs: six directory levels, each
/// with a few files and one subdirectory.
pub fn random_tree(root: &Path) {
    let mut dir = root.to_path_buf();
    for level in 0..6 {
        for f in 0..(1 + level % 3) {
            std::fs::write(dir.join(format!("file{f}.bin")), format!("level {level} file {f}\n")).unwrap();
        }
        dir = dir.join(format!("sub{level}"));
        std::fs::create_dir(&dir).unwrap();
    }
    std::fs::write(dir.join("leaf.cfg"), "leaf\n").unwrap();
}

fn mix(seed: u64, agent: &str, turn: usize) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    (seed, agent, turn).hash(&mut h);
    h.finish()
}

fn entries(root: &Path, rel: &str) -> Vec<(bool, String)> {
    let mut v: Vec<(bool, String)> = std::fs::read_dir(root.join(rel))
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    let p = if rel.is_empty() { name } else { format!("{rel}/{name}") };
                    (e.path().is_dir(), p)
                })
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

/// A seeded policy that mixes legal actions with illegal ones: forbidden
/// tools, blueprint-violating delegations and unparseable replies. The same
/// (seed, agent, turn) always produces the same reply.
pub fn random_policy(seed: u64, root: PathBuf) -> impl Fn(&AgentBinding, &[Message]) -> String + Send + Sync {
    use rand::{Rng, SeedableRng};
    use toa_core::model::AgentType;
    move |b, mem| {
        let t = turn(mem);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(seed, &b.agent_id.to_string(), t));
        let roll: u32 = rng.gen_range(0..100);
        let goal = |p: &str| format!("analyze {p}");
        let dir = match b.agent_type {
            AgentType::Directory => b.object.path.clone(),
            _ => b.object.path.rsplit_once('/').map(|(d, _)| d.to_string()).unwrap_or_default(),
        };
        let here = entries(&root, &dir);
        let files: Vec<&String> = here.iter().filter(|(d, _)| !d).map(|(_, p)| p).collect();
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, v: &[&String]| -> Option<String> {
            (!v.is_empty()).then(|| v[rng.gen_range(0..v.len())].clone())
        };
        let store = json!({"finding": {
            "summary": format!("note {}", rng.gen_range(0..4)),
            "location": {"kind": "file", "path": b.object.path},
            "semantic_type": "misconfiguration",
            "link_ids": [format!("id{}", rng.gen_range(0..3))],
            "evidence": [{"tool": "ShellExecute", "raw_snippet": "x"}],
            "confidence": if rng.gen_bool(0.5) { "verified" } else { "partial" },
            "explanation": "unconfirmed"
        }});
        match b.agent_type {
            AgentType::Directory => match roll {
                0..=39 if !here.is_empty() => {
                    let n = rng.gen_range(1..=2usize.min(here.len()));
                    let subtasks: Vec<Value> = (0..n)
                        .map(|_| {
                            let (_, p) = &here[rng.gen_range(0..here.len())];
                            json!({"path": p, "goal": goal(p)})
                        })
                        .collect();
                    if n == 1 && rng.gen_bool(0.5) {
                        envelope("Delegation", subtasks[0].clone())
                    } else {
                        envelope("ParallelDelegation", json!({"subtasks": subtasks}))
                    }
                }
                40..=49 => match pick(&mut rng, &files) {
                    Some(f) => envelope("Delegation", json!({"path": f, "function": "main", "goal": "g"})),
                    None => envelope("ShellExecute", json!({"command": "ls"})),
                },
                50..=57 => envelope("Store", store),
                58..=69 => envelope("ShellExecute", json!({"command": "ls -la"})),
                70..=74 => "I am not sure what to do next.".into(),
                _ => finish(json!({"findings": [], "summary": "done"})),
            },
            AgentType::File => match roll {
                0..=29 => {
                    let f = format!("f{}", rng.gen_range(0..3));
                    envelope("Delegation", json!({"function": f, "goal": goal(&f)}))
                }
                30..=37 => match pick(&mut rng, &files) {
                    Some(f) => envelope("Delegation", json!({"path": f, "goal": goal(&f)})),
                    None => envelope("ShellExecute", json!({"command": "ls"})),
                },
                38..=44 => envelope("Delegation", json!({"path": ".", "kind": "directory", "goal": "g"})),
                45..=59 => envelope("Store", store),
                60..=64 => envelope("Query", json!({"link_ids": ["id1"]})),
                65..=69 => envelope("Explore", json!({"link_ids": ["id0"]})),
                70..=77 => envelope("ShellExecute", json!({"command": "ls"})),
                _ => finish(json!({"findings": [], "summary": "done"})),
            },
            AgentType::Function => match roll {
                0..=34 => {
                    let f = format!("f{}", rng.gen_range(0..3));
                    envelope("Delegation", json!({"function": f, "goal": goal(&f)}))
                }
                35..=41 => envelope("Delegation", json!({"path": b.object.path, "goal": "g"})),
                42..=49 => envelope("Store", store),
                50..=64 => envelope("BinaryAnalysis", json!({"command": "afl"})),
                _ => finish(json!({"summary": "no taint", "trace": []})),
            },
        }
    }
}
