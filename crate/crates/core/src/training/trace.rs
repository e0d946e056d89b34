use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Height,
    Appearance,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Height => "height",
            Stage::Appearance => "appearance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss_z: Option<f64>,
    pub loss_c: Option<f64>,
    pub loss_s: Option<f64>,
    pub frame: Option<usize>,
    /// Appearance epoch the step belongs to.
    pub epoch: Option<usize>,
}

/// Append-only per-step losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    records: Vec<LossRecord>,
}

pub const CSV_HEADER: &str = "step,stage,loss_z,loss_c,loss_s,frame,epoch";

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl LossTrace {
    pub fn push(&mut self, r: LossRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::Config(format!("loss step {} does not follow {}", r.step, last.step)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[LossRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Values of one component in step order, skipping steps without it.
    pub fn series(&self, pick: fn(&LossRecord) -> Option<f64>) -> Vec<f64> {
        self.records.iter().filter_map(pick).collect()
    }

    /// EMA of one appearance component, read at the last step of each epoch.
    pub fn epoch_end_ema(&self, pick: fn(&LossRecord) -> Option<f64>, window: usize) -> Vec<f64> {
        let rows: Vec<(usize, f64)> = self
            .records
            .iter()
            .filter_map(|r| Some((r.epoch?, pick(r)?)))
            .collect();
        let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let smooth = ema(&values, window);
        (0..rows.len())
            .filter(|&i| i + 1 == rows.len() || rows[i + 1].0 != rows[i].0)
            .map(|i| smooth[i])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            // Display on f64 prints the shortest string that round-trips
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                r.stage.name(),
                cell(r.loss_z),
                cell(r.loss_c),
                cell(r.loss_s),
                cell(r.frame),
                cell(r.epoch)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Config("loss trace csv has an unexpected header".into()));
        }
        let bad = |l: &str| Error::Config(format!("bad loss trace row: {l}"));
        let mut trace = Self::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(line))
                }
            };
            let index = |s: &str| -> Result<Option<usize>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(line))
                }
            };
            let stage = match f[1] {
                "height" => Stage::Height,
                "appearance" => Stage::Appearance,
                _ => return Err(bad(line)),
            };
            trace.push(LossRecord {
                step: f[0].parse().map_err(|_| bad(line))?,
                stage,
                loss_z: opt(f[2])?,
                loss_c: opt(f[3])?,
                loss_s: opt(f[4])?,
                frame: index(f[5])?,
                epoch: index(f[6])?,
            })?;
        }
        Ok(trace)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Exponential moving average with smoothing `2 / (window + 1)`, seeded with
/// the first value.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for v in values {
        let next = match acc {
            None => *v,
            Some(a) => a + alpha * (v - a),
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(step: usize) -> LossRecord {
        LossRecord {
            step,
            stage: Stage::Appearance,
            loss_z: None,
            loss_c: Some(0.1 / step as f64),
            loss_s: Some(1.0 / 3.0),
            frame: Some(step % 4),
            epoch: Some(step / 8),
        }
    }

    #[test]
    fn steps_must_increase() {
        let mut t = LossTrace::default();
        t.push(rec(1)).unwrap();
        assert!(t.push(rec(1)).is_err());
        t.push(rec(5)).unwrap();
    }

    #[test]
    fn ema_of_constant_is_constant() {
        assert_eq!(ema(&[2.0; 5], 100), vec![2.0; 5]);
        let e = ema(&[1.0, 0.0], 1);
        assert_eq!(e, vec![1.0, 0.0]);
    }

    #[test]
    fn epoch_end_ema_reads_last_step_of_each_epoch() {
        let mut t = LossTrace::default();
        for step in 1..=24 {
            t.push(rec(step)).unwrap();
        }
        let ends = t.epoch_end_ema(|r| r.loss_s, 10);
        assert_eq!(ends.len(), 4);
        assert!(ends.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn csv_round_trip(n in 0usize..30, z in proptest::option::of(-1e3f64..1e3)) {
            let mut t = LossTrace::default();
            for i in 0..n {
                let mut r = rec(i + 1);
                r.loss_z = z;
                if i % 3 == 0 {
                    r.stage = Stage::Height;
                    r.frame = None;
                }
                t.push(r).unwrap();
            }
            prop_assert_eq!(LossTrace::from_csv(&t.to_csv()).unwrap(), t);
        }
    }
}
