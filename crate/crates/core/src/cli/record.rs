//! CSV output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::session::StepRecord;

pub const TRACE_HEADER: [&str; 9] =
    ["step", "epoch", "lr", "train_loss", "superbatch_loss", "test_loss", "test_acc", "probe_fwd", "event"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trace_row(r: &StepRecord) -> [String; 9] {
    [
        r.step.to_string(),
        r.epoch.to_string(),
        r.lr.to_string(),
        r.train_loss.to_string(),
        opt(r.superbatch_loss),
        opt(r.test_loss),
        opt(r.test_acc),
        r.probe_fwd.to_string(),
        r.event.tag().to_string(),
    ]
}

/// Per-step trace of one run.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl TraceWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(TRACE_HEADER)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.inner.write_record(trace_row(r))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Writes a header and rows of displayable cells.
pub fn write_table<P: AsRef<Path>>(path: P, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::StepEvent;

    #[test]
    fn blank_optionals() {
        let r = StepRecord {
            step: 3,
            epoch: 0,
            lr: 0.1,
            train_loss: 0.5,
            superbatch_loss: None,
            test_loss: Some(0.25),
            test_acc: None,
            probe_fwd: 0,
            event: StepEvent::None,
        };
        let mut buf = Vec::new();
        let mut w = TraceWriter::new(&mut buf).unwrap();
        w.write(&r).unwrap();
        w.finish().unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,epoch,lr,train_loss,superbatch_loss,test_loss,test_acc,probe_fwd,event\n3,0,0.1,0.5,,0.25,,0,none\n"
        );
    }
}
