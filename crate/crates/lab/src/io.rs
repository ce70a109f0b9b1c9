//! Columnar CSV for trajectories and training traces.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use anyhow::{anyhow, bail, Context, Result};
use horl_core::data::{ContinuousTrajectory, TabularTrajectory, Trajectory};
use serde::Serialize;

/// One row per step: trajectory id, step, state, action, reward, hidden
/// skill, whether a skill was drawn at this step, and the next state.
pub fn write_tabular_csv<W: Write>(trajectories: &[TabularTrajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trajectory", "t", "s", "a", "r", "z", "draw", "next_state"])?;
    for (id, tr) in trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            let draw = tr.skill_draws.contains(&t);
            w.write_record([
                id.to_string(),
                t.to_string(),
                tr.states[t].to_string(),
                tr.actions[t].to_string(),
                tr.rewards[t].to_string(),
                tr.skills[t].to_string(),
                u8::from(draw).to_string(),
                tr.states[t + 1].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
struct Step<S, A> {
    s: S,
    a: A,
    r: f64,
    z: usize,
    draw: bool,
    next: S,
}

fn assemble<S: Clone, A>(by_id: BTreeMap<usize, Vec<(usize, Step<S, A>)>>) -> Result<Vec<Trajectory<S, A>>> {
    let mut out = Vec::with_capacity(by_id.len());
    for (expected, (id, mut steps)) in by_id.into_iter().enumerate() {
        if id != expected {
            bail!("trajectory ids must be contiguous from 0; missing {expected}");
        }
        steps.sort_by_key(|(t, _)| *t);
        let mut tr = Trajectory {
            states: Vec::with_capacity(steps.len() + 1),
            actions: Vec::with_capacity(steps.len()),
            rewards: Vec::with_capacity(steps.len()),
            skills: Vec::with_capacity(steps.len()),
            skill_draws: Vec::new(),
        };
        for (i, (t, step)) in steps.into_iter().enumerate() {
            if t != i {
                bail!("trajectory {id}: step {i} missing");
            }
            if i == 0 {
                tr.states.push(step.s.clone());
            }
            if step.draw {
                tr.skill_draws.push(t);
            }
            tr.actions.push(step.a);
            tr.rewards.push(step.r);
            tr.skills.push(step.z);
            tr.states.push(step.next);
        }
        out.push(tr);
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, index: usize, name: &str, line: usize) -> Result<T> {
    record
        .get(index)
        .ok_or_else(|| anyhow!("line {line}: missing column `{name}`"))?
        .trim()
        .parse()
        .map_err(|_| anyhow!("line {line}: column `{name}` is not a valid number"))
}

pub fn read_tabular_csv<R: Read>(input: R) -> Result<Vec<TabularTrajectory>> {
    let mut r = csv::Reader::from_reader(input);
    let mut by_id: BTreeMap<usize, Vec<(usize, Step<usize, usize>)>> = BTreeMap::new();
    for (i, record) in r.records().enumerate() {
        let record = record.context("reading dataset row")?;
        let line = i + 2;
        let id: usize = field(&record, 0, "trajectory", line)?;
        let t: usize = field(&record, 1, "t", line)?;
        let step = Step {
            s: field(&record, 2, "s", line)?,
            a: field(&record, 3, "a", line)?,
            r: field(&record, 4, "r", line)?,
            z: field(&record, 5, "z", line)?,
            draw: field::<u8>(&record, 6, "draw", line)? == 1,
            next: field(&record, 7, "next_state", line)?,
        };
        by_id.entry(id).or_default().push((t, step));
    }
    assemble(by_id)
}

/// Continuous variant: state and action vectors spread over `s0..`,
/// `a0..` and `next_s0..` columns.
pub fn write_continuous_csv<W: Write>(trajectories: &[ContinuousTrajectory], out: W) -> Result<()> {
    let first = trajectories.first().ok_or_else(|| anyhow!("no trajectories"))?;
    let (sd, ad) = (first.states[0].len(), first.actions.first().map_or(0, Vec::len));
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend((0..sd).map(|i| format!("s{i}")));
    header.extend((0..ad).map(|i| format!("a{i}")));
    header.extend(["r", "z", "draw"].map(String::from));
    header.extend((0..sd).map(|i| format!("next_s{i}")));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for (id, tr) in trajectories.iter().enumerate() {
        for t in 0..tr.len() {
            let mut row = vec![id.to_string(), t.to_string()];
            row.extend(tr.states[t].iter().map(f64::to_string));
            row.extend(tr.actions[t].iter().map(f64::to_string));
            row.push(tr.rewards[t].to_string());
            row.push(tr.skills[t].to_string());
            row.push(u8::from(tr.skill_draws.contains(&t)).to_string());
            row.extend(tr.states[t + 1].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_continuous_csv<R: Read>(input: R) -> Result<Vec<ContinuousTrajectory>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let count = |prefix: &str| header.iter().filter(|h| h.strip_prefix(prefix).is_some_and(|d| d.parse::<usize>().is_ok())).count();
    let (sd, ad) = (count("s"), count("a"));
    if sd == 0 || header.len() != 5 + 2 * sd + ad {
        bail!("unexpected continuous dataset header");
    }
    let mut by_id: BTreeMap<usize, Vec<(usize, Step<Vec<f64>, Vec<f64>>)>> = BTreeMap::new();
    for (i, record) in r.records().enumerate() {
        let record = record.context("reading dataset row")?;
        let line = i + 2;
        let vector = |start: usize, len: usize| -> Result<Vec<f64>> {
            (start..start + len).map(|j| field(&record, j, &header[j], line)).collect()
        };
        let id: usize = field(&record, 0, "trajectory", line)?;
        let t: usize = field(&record, 1, "t", line)?;
        let base = 2 + sd + ad;
        let step = Step {
            s: vector(2, sd)?,
            a: vector(2 + sd, ad)?,
            r: field(&record, base, "r", line)?,
            z: field(&record, base + 1, "z", line)?,
            draw: field::<u8>(&record, base + 2, "draw", line)? == 1,
            next: vector(base + 3, sd)?,
        };
        by_id.entry(id).or_default().push((t, step));
    }
    assemble(by_id)
}

/// Write a loss trace as CSV with a leading `step` column followed by the
/// record's fields in name order.
pub fn write_trace_csv<W: Write, T: Serialize>(trace: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Option<Vec<String>> = None;
    for (step, record) in trace.iter().enumerate() {
        let serde_json::Value::Object(fields) = serde_json::to_value(record)? else {
            bail!("trace records must be structs");
        };
        if header.is_none() {
            let names: Vec<String> = fields.keys().cloned().collect();
            w.write_record(std::iter::once("step").chain(names.iter().map(String::as_str)))?;
            header = Some(names);
        }
        let names = header.as_ref().expect("header written");
        let mut row = vec![step.to_string()];
        for name in names.iter() {
            row.push(match fields.get(name) {
                Some(serde_json::Value::Number(x)) => x.to_string(),
                Some(serde_json::Value::Null) | None => "nan".to_string(),
                Some(other) => other.to_string(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
