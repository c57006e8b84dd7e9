use std::path::Path;

use super::write_atomic;
use crate::error::Result;
use crate::training::RunLog;

/// CSV text of a run log. The accuracy column appears when any row has one.
pub fn metrics_csv(log: &RunLog) -> String {
    let with_acc = log.rows.iter().any(|r| r.accuracy.is_some());
    let mut out = String::from(if with_acc { "step,epoch,lr,loss,accuracy\n" } else { "step,epoch,lr,loss\n" });
    for r in &log.rows {
        out.push_str(&format!("{},{},{:e},{:e}", r.step, r.epoch, r.lr, r.loss));
        if with_acc {
            match r.accuracy {
                Some(a) => out.push_str(&format!(",{a}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, log: &RunLog) -> Result<()> {
    write_atomic(path, metrics_csv(log).as_bytes())
}
