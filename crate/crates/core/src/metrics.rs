use std::io::Write;

/// Receives per-step training metrics in step order.
pub trait MetricsSink {
    fn record(&mut self, step: usize, values: &[f64]);
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _step: usize, _values: &[f64]) {}
}

impl MetricsSink for Vec<(usize, Vec<f64>)> {
    fn record(&mut self, step: usize, values: &[f64]) {
        self.push((step, values.to_vec()));
    }
}

/// Writes `step,<columns...>` rows.
pub struct CsvSink<W: Write> {
    out: W,
    error: Option<std::io::Error>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W, columns: &[&str]) -> std::io::Result<Self> {
        writeln!(out, "step,{}", columns.join(","))?;
        Ok(Self { out, error: None })
    }

    /// Flushes and surfaces the first write error, if any.
    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, step: usize, values: &[f64]) {
        if self.error.is_some() {
            return;
        }
        let row: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        if let Err(e) = writeln!(self.out, "{step},{}", row.join(",")) {
            self.error = Some(e);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_in_order() {
        let mut sink = CsvSink::new(Vec::new(), &["loss"]).unwrap();
        sink.record(0, &[1.5]);
        sink.record(1, &[0.25]);
        let bytes = sink.finish().unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "step,loss\n0,1.5\n1,0.25\n");
    }
}
