//! Plain CSV reports. Floats are written in shortest round-trip form, so
//! parsing a report reproduces the in-memory values exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::DiceReport;
use crate::pipeline::RoundReport;

pub const ROUND_HEADER: &str = "round,metric,case,value";

const METRICS: [&str; 4] = ["reg_dice", "seg_test_dice", "reg_loss", "seg_train_loss"];

pub fn round_report_csv(r: &RoundReport) -> String {
    let mut out = format!("{ROUND_HEADER}\n");
    let lists: [&[f64]; 3] = [&r.reg_dice, &r.seg_test_dice, &r.reg_loss];
    for (metric, values) in METRICS.iter().zip(lists) {
        for (case, v) in values.iter().enumerate() {
            writeln!(out, "{},{metric},{case},{v:?}", r.round).unwrap();
        }
    }
    writeln!(out, "{},seg_train_loss,0,{:?}", r.round, r.seg_train_loss).unwrap();
    out
}

fn csv_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        reason: reason.into(),
    }
}

pub fn parse_round_report(text: &str) -> Result<RoundReport> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == ROUND_HEADER => {}
        _ => return Err(csv_err(1, format!("expected header `{ROUND_HEADER}`"))),
    }
    let mut round = None;
    let mut lists: [Vec<f64>; 3] = Default::default();
    let mut train_loss = None;
    for (i, line) in lines {
        let n = i + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(csv_err(n, "expected 4 columns"));
        }
        let r: usize = cols[0].parse().map_err(|_| csv_err(n, "bad round"))?;
        if *round.get_or_insert(r) != r {
            return Err(csv_err(n, "mixed rounds in one report"));
        }
        let case: usize = cols[2].parse().map_err(|_| csv_err(n, "bad case index"))?;
        let value: f64 = cols[3].parse().map_err(|_| csv_err(n, "bad value"))?;
        match METRICS.iter().position(|m| *m == cols[1]) {
            Some(3) => train_loss = Some(value),
            Some(m) => {
                if case != lists[m].len() {
                    return Err(csv_err(n, "case indices must be consecutive"));
                }
                lists[m].push(value);
            }
            None => return Err(csv_err(n, format!("unknown metric `{}`", cols[1]))),
        }
    }
    let [reg_dice, seg_test_dice, reg_loss] = lists;
    Ok(RoundReport {
        round: round.ok_or_else(|| csv_err(2, "empty report"))?,
        reg_dice,
        seg_test_dice,
        reg_loss,
        seg_train_loss: train_loss.ok_or_else(|| csv_err(0, "missing seg_train_loss"))?,
    })
}

/// `class,dice` rows followed by a `mean` row.
pub fn dice_csv(d: &DiceReport) -> String {
    let mut out = String::from("class,dice\n");
    for (c, v) in &d.per_class {
        writeln!(out, "{c},{v:?}").unwrap();
    }
    writeln!(out, "mean,{:?}", d.mean).unwrap();
    out
}

/// `step,level,loss` rows of a registration trace.
pub fn trace_csv<T: crate::real::Real>(trace: &[T], levels: &[usize]) -> String {
    let mut out = String::from("step,level,loss\n");
    for (i, (v, l)) in trace.iter().zip(levels).enumerate() {
        writeln!(out, "{i},{l},{:?}", v.as_f64()).unwrap();
    }
    out
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
