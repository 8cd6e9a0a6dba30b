//! Reward-free `(state, action)` behavior data.
//!
//! CSV layout: header `s0,..,s{m-1},a0,..,a{n-1}` (or only `a*` columns for
//! stateless bandits), one record per row.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorDataset {
    states: Array2<f64>,
    actions: Array2<f64>,
}

impl BehaviorDataset {
    pub fn new(states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return Err(Error::Input(format!(
                "{} states but {} actions",
                states.nrows(),
                actions.nrows()
            )));
        }
        if actions.iter().chain(states.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("dataset contains non-finite values".into()));
        }
        Ok(Self { states, actions })
    }

    /// Dataset whose records share one implicit empty state.
    pub fn stateless(actions: Array2<f64>) -> Result<Self> {
        let n = actions.nrows();
        Self::new(Array2::zeros((n, 0)), actions)
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        self.states.view()
    }

    pub fn actions(&self) -> ArrayView2<'_, f64> {
        self.actions.view()
    }

    pub fn action(&self, i: usize) -> ArrayView1<'_, f64> {
        self.actions.row(i)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = header(self.state_dim(), self.action_dim());
        out.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = self
                .states
                .row(i)
                .iter()
                .chain(self.actions.row(i).iter())
                .map(|v| v.to_string())
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Input(format!("bad header: {e}")))?
            .clone();
        let (state_dim, action_dim) = parse_header(headers.iter())?;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Input(format!("row {}: {e}", line + 1)))?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Input(format!("row {}: bad number {field:?}", line + 1)))?;
                if j < state_dim {
                    states.push(v);
                } else {
                    actions.push(v);
                }
            }
        }
        let n = actions.len() / action_dim;
        let states = Array2::from_shape_vec((n, state_dim), states).unwrap();
        let actions = Array2::from_shape_vec((n, action_dim), actions).unwrap();
        Self::new(states, actions)
    }
}

pub(crate) fn header(state_dim: usize, action_dim: usize) -> String {
    (0..state_dim)
        .map(|i| format!("s{i}"))
        .chain((0..action_dim).map(|i| format!("a{i}")))
        .collect::<Vec<_>>()
        .join(",")
}

/// Checks `s0..s{m-1}` followed by `a0..a{n-1}`; returns `(m, n)`.
pub(crate) fn parse_header<'a>(names: impl Iterator<Item = &'a str>) -> Result<(usize, usize)> {
    let mut s = 0;
    let mut a = 0;
    for name in names {
        if a == 0 && name == format!("s{s}") {
            s += 1;
        } else if name == format!("a{a}") {
            a += 1;
        } else {
            return Err(Error::Input(format!("unexpected column {name:?}")));
        }
    }
    if a == 0 {
        return Err(Error::Input("no action columns".into()));
    }
    Ok((s, a))
}
