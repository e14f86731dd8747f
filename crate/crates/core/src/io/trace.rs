//! Per-iteration task loss traces (`iter,task,loss,grad_norm` CSV).

use std::collections::{HashMap, HashSet};
use std::io::Read;

use crate::{Error, Result};

pub const TRACE_HEADER: [&str; 4] = ["iter", "task", "loss", "grad_norm"];

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: u64,
    pub task: usize,
    pub loss: f64,
    /// L2 norm of the task gradient w.r.t. the shared weights, when logged.
    pub grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskTrace {
    tasks: Vec<String>,
    records: Vec<TraceRecord>,
    index: HashMap<(u64, usize), usize>,
}

impl TaskTrace {
    pub fn new(tasks: Vec<String>) -> Self {
        TaskTrace {
            tasks,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a record, enforcing the trace invariants.
    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if record.task >= self.tasks.len() {
            return Err(Error::dim(format!("task index {} out of range", record.task)));
        }
        if !record.loss.is_finite() || record.loss < 0.0 {
            return Err(Error::domain(format!("loss {} must be finite and non-negative", record.loss)));
        }
        if let Some(g) = record.grad_norm {
            if !g.is_finite() || g < 0.0 {
                return Err(Error::domain(format!("grad_norm {g} must be finite and non-negative")));
            }
        }
        if let Some(last) = self.records.last() {
            if record.iteration < last.iteration {
                return Err(Error::domain(format!(
                    "iteration {} follows iteration {}",
                    record.iteration, last.iteration
                )));
            }
        }
        let key = (record.iteration, record.task);
        if self.index.contains_key(&key) {
            return Err(Error::domain(format!(
                "duplicate record for iteration {} task {}",
                record.iteration, self.tasks[record.task]
            )));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn get(&self, iteration: u64, task: usize) -> Option<&TraceRecord> {
        self.index.get(&(iteration, task)).map(|&i| &self.records[i])
    }

    /// Distinct iterations in increasing order.
    pub fn iterations(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for r in &self.records {
            if out.last() != Some(&r.iteration) {
                out.push(r.iteration);
            }
        }
        out
    }

    /// Losses of every task at `iteration`, or `None` if any task is missing.
    pub fn losses_at(&self, iteration: u64) -> Option<Vec<f64>> {
        (0..self.tasks.len())
            .map(|t| self.get(iteration, t).map(|r| r.loss))
            .collect()
    }

    pub fn grad_norms_at(&self, iteration: u64) -> Option<Vec<f64>> {
        (0..self.tasks.len())
            .map(|t| self.get(iteration, t).and_then(|r| r.grad_norm))
            .collect()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }
}

/// Parses a trace CSV. Tasks are numbered in order of first appearance.
pub fn read_trace<R: Read>(source: R) -> Result<TaskTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != TRACE_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", TRACE_HEADER.join(",")),
        });
    }

    let mut trace = TaskTrace::default();
    let mut seen: HashSet<String> = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| Error::Parse { line, message };
        if row.len() != 4 {
            return Err(fail(format!("expected 4 fields, found {}", row.len())));
        }
        let iteration: u64 = row[0]
            .parse()
            .map_err(|_| fail(format!("unparsable iteration `{}`", &row[0])))?;
        let name = row[1].to_string();
        if name.is_empty() {
            return Err(fail("empty task name".into()));
        }
        let loss: f64 = row[2].parse().map_err(|_| fail(format!("unparsable loss `{}`", &row[2])))?;
        if loss < 0.0 {
            return Err(fail(format!("negative loss {loss}")));
        }
        if !loss.is_finite() {
            return Err(fail(format!("non-finite loss {loss}")));
        }
        let grad_norm = if row[3].is_empty() {
            None
        } else {
            Some(
                row[3]
                    .parse::<f64>()
                    .map_err(|_| fail(format!("unparsable grad_norm `{}`", &row[3])))?,
            )
        };
        if !seen.contains(&name) {
            seen.insert(name.clone());
            trace.tasks.push(name.clone());
        }
        let task = trace.task_index(&name).expect("task registered above");
        trace
            .push(TraceRecord {
                iteration,
                task,
                loss,
                grad_norm,
            })
            .map_err(|e| fail(e.to_string()))?;
    }
    Ok(trace)
}
