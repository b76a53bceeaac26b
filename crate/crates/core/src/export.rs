//! Output files.
//!
//! Every table starts with one `#` comment line naming the tool version, the
//! scenario hash, the slot length and the per-slot discount, followed by a
//! CSV header row. Every JSON document carries the same fields under `meta`.
//! Phases are written 1-based.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::mdp::StateSpace;
use crate::solver::{Policy, QFactor, ValueFunction};
use crate::structure::ThresholdTable;

pub const TOOL: &str = "sleepwake";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub slot_s: f64,
    pub discount_per_slot: f64,
}

impl Meta {
    pub fn new(config_sha256: String, slot_s: f64, discount_per_slot: f64) -> Self {
        Meta {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_sha256,
            slot_s,
            discount_per_slot,
        }
    }

    pub fn comment_line(&self) -> String {
        format!(
            "# {} {} config_sha256={} slot_s={} discount_per_slot={}",
            self.tool, self.version, self.config_sha256, self.slot_s, self.discount_per_slot
        )
    }
}

fn open_table(
    path: &Path,
    meta: &Meta,
    notes: &[&str],
) -> io::Result<csv::Writer<BufWriter<File>>> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", meta.comment_line())?;
    for n in notes {
        writeln!(out, "# {n}")?;
    }
    Ok(csv::Writer::from_writer(out))
}

fn finish(w: csv::Writer<BufWriter<File>>) -> io::Result<()> {
    w.into_inner().map_err(|e| e.into_error())?.flush()
}

fn opt(x: Option<usize>) -> String {
    x.map(|q| q.to_string()).unwrap_or_default()
}

/// `{"meta": ..., <body fields>}` pretty-printed.
pub fn write_json(path: &Path, meta: &Meta, body: Value) -> io::Result<()> {
    let mut doc = json!({ "meta": meta });
    if let Value::Object(fields) = body {
        doc.as_object_mut().unwrap().extend(fields);
    }
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")
}

/// One row per state: `state_index,phase,queue,active,action,value`.
pub fn write_policy_table(
    path: &Path,
    meta: &Meta,
    policy: &Policy,
    values: Option<&ValueFunction<f64>>,
) -> io::Result<()> {
    let mut w = open_table(path, meta, &[])?;
    w.write_record(["state_index", "phase", "queue", "active", "action", "value"])?;
    for (i, s) in policy.space().iter().enumerate() {
        let value = values
            .map(|v| v.as_slice()[i].to_string())
            .unwrap_or_default();
        w.write_record([
            i.to_string(),
            (s.phase + 1).to_string(),
            s.queue.to_string(),
            s.active.to_string(),
            policy.action_at(i).to_string(),
            value,
        ])?;
    }
    finish(w)
}

/// Reads the `phase,queue,active,action` columns of a policy table; every
/// state of `space` must appear exactly once.
pub fn read_policy_table(path: &Path, space: StateSpace) -> Result<Policy, String> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let headers = rd.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("policy table lacks a '{name}' column"))
    };
    let (cp, cq, cw, ca) = (col("phase")?, col("queue")?, col("active")?, col("action")?);
    let mut actions: Vec<Option<usize>> = vec![None; space.len()];
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |c: usize| -> Result<usize, String> {
            rec.get(c)
                .and_then(|x| x.parse().ok())
                .ok_or_else(|| format!("row {}: bad integer in column {}", line + 1, &headers[c]))
        };
        let (phase, queue, active, action) = (field(cp)?, field(cq)?, field(cw)?, field(ca)?);
        if phase == 0 {
            return Err(format!("row {}: phase is 1-based", line + 1));
        }
        let s = crate::mdp::SysState::new(phase - 1, queue, active);
        if !space.contains(s) {
            return Err(format!(
                "row {}: state {s} outside the state space",
                line + 1
            ));
        }
        if action > space.n_servers {
            return Err(format!(
                "row {}: action {action} exceeds {} servers",
                line + 1,
                space.n_servers
            ));
        }
        let slot = &mut actions[space.index(s)];
        if slot.is_some() {
            return Err(format!("row {}: state {s} listed twice", line + 1));
        }
        *slot = Some(action);
    }
    let missing = actions.iter().filter(|a| a.is_none()).count();
    if missing > 0 {
        return Err(format!("policy table misses {missing} state(s)"));
    }
    Ok(Policy::from_vec(
        space,
        actions.into_iter().map(Option::unwrap).collect(),
    ))
}

/// One row per (state, action): `state_index,phase,queue,active,action,q_value`.
pub fn write_qfactor_table(path: &Path, meta: &Meta, q: &QFactor<f64>) -> io::Result<()> {
    let mut w = open_table(path, meta, &[])?;
    w.write_record([
        "state_index",
        "phase",
        "queue",
        "active",
        "action",
        "q_value",
    ])?;
    for (i, s) in q.space().iter().enumerate() {
        for (a, v) in q.row(i).iter().enumerate() {
            w.write_record([
                i.to_string(),
                (s.phase + 1).to_string(),
                s.queue.to_string(),
                s.active.to_string(),
                a.to_string(),
                v.to_string(),
            ])?;
        }
    }
    finish(w)
}

/// `phase,W,k,turn_on_Q,turn_off_Q`; empty cells mean the level is never reached.
pub fn write_threshold_table(path: &Path, meta: &Meta, table: &ThresholdTable) -> io::Result<()> {
    let mut w = table_with_convention(path, meta)?;
    w.write_record(["phase", "W", "k", "turn_on_Q", "turn_off_Q"])?;
    for sl in &table.slices {
        let levels = sl.turn_on.len().max(sl.turn_off.len());
        for k in 1..=levels {
            w.write_record([
                (sl.phase + 1).to_string(),
                sl.active.to_string(),
                k.to_string(),
                opt(sl.turn_on.get(k - 1).copied().flatten()),
                opt(sl.turn_off.get(k - 1).copied().flatten()),
            ])?;
        }
    }
    finish(w)
}

fn table_with_convention(path: &Path, meta: &Meta) -> io::Result<csv::Writer<BufWriter<File>>> {
    open_table(
        path,
        meta,
        &[
            "turn_on_Q = least Q with action >= W+k; turn_off_Q = greatest Q with action <= W-k; empty = never",
        ],
    )
}

/// `phase,W,queue_from,action`: the policy as runs of constant action.
pub fn write_step_table(path: &Path, meta: &Meta, table: &ThresholdTable) -> io::Result<()> {
    let mut w = open_table(path, meta, &[])?;
    w.write_record(["phase", "W", "queue_from", "action"])?;
    for sl in &table.slices {
        for &(q, a) in &sl.steps {
            w.write_record([
                (sl.phase + 1).to_string(),
                sl.active.to_string(),
                q.to_string(),
                a.to_string(),
            ])?;
        }
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub policy: String,
    pub threshold: Option<usize>,
    pub servers: Option<usize>,
    pub mean: f64,
    pub ci99_low: f64,
    pub ci99_high: f64,
    pub delta_vs_optimal: Option<f64>,
}

pub fn write_sweep_table(path: &Path, meta: &Meta, rows: &[SweepRow]) -> io::Result<()> {
    let mut w = open_table(path, meta, &[])?;
    w.write_record([
        "policy",
        "n_threshold",
        "servers",
        "mean_cost",
        "ci99_low",
        "ci99_high",
        "delta_vs_optimal",
    ])?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            opt(r.threshold),
            opt(r.servers),
            r.mean.to_string(),
            r.ci99_low.to_string(),
            r.ci99_high.to_string(),
            r.delta_vs_optimal
                .map(|d| d.to_string())
                .unwrap_or_default(),
        ])?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::SysState;

    fn meta() -> Meta {
        Meta::new("abc".into(), 0.01, 0.99)
    }

    #[test]
    fn policy_table_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.csv");
        let sp = StateSpace::new(2, 4, 3);
        let p = Policy::from_fn(sp, |s| (s.queue + s.phase).min(3));
        write_policy_table(&path, &meta(), &p, None).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# sleepwake "));
        assert_eq!(read_policy_table(&path, sp).unwrap(), p);
    }

    #[test]
    fn incomplete_policy_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "phase,queue,active,action\n1,0,0,0\n").unwrap();
        let err = read_policy_table(&path, StateSpace::new(1, 1, 1)).unwrap_err();
        assert!(err.contains("misses 3"), "{err}");
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "phase,queue,active,action\n1,0,0,5\n").unwrap();
        let err = read_policy_table(&path, StateSpace::new(1, 1, 1)).unwrap_err();
        assert!(err.contains("exceeds"), "{err}");
    }

    #[test]
    fn json_carries_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(
            &path,
            &meta(),
            json!({ "x": 1, "s": SysState::new(0, 2, 1) }),
        )
        .unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["meta"]["config_sha256"], "abc");
        assert_eq!(v["s"]["phase"], 1);
        assert_eq!(v["x"], 1);
    }
}
