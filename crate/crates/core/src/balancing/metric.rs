use std::io::Read;

use crate::{Error, Result};

/// Per-task metric values with their orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub tasks: Vec<String>,
    pub values: Vec<f64>,
    pub lower_is_better: Vec<bool>,
}

impl MetricReport {
    pub fn new(tasks: Vec<String>, values: Vec<f64>, lower_is_better: Vec<bool>) -> Result<Self> {
        if tasks.len() != values.len() || tasks.len() != lower_is_better.len() {
            return Err(Error::dim("metric report columns have different lengths"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("metric value {v} is not finite")));
        }
        if let Some((i, t)) = tasks.iter().enumerate().find(|(i, t)| tasks[..*i].contains(t)) {
            return Err(Error::domain(format!("task {t} appears twice (row {i})")));
        }
        Ok(MetricReport {
            tasks,
            values,
            lower_is_better,
        })
    }
}

/// Average signed relative change of `model` against `baseline`, in percent.
/// Tasks are matched by name.
pub fn delta_mtl(model: &MetricReport, baseline: &MetricReport) -> Result<f64> {
    let n = model.values.len();
    if n == 0 || n != baseline.values.len() {
        return Err(Error::dim(format!(
            "model reports {n} tasks, baseline {}",
            baseline.values.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let name = &baseline.tasks[i];
        let m = model
            .tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::dim(format!("model reports no metric for task {name}")))?;
        if model.lower_is_better[m] != baseline.lower_is_better[i] {
            return Err(Error::domain(format!("task {name} disagrees on metric direction")));
        }
        let b = baseline.values[i];
        if b == 0.0 {
            return Err(Error::domain(format!("baseline metric of task {} is zero", baseline.tasks[i])));
        }
        let sign = if baseline.lower_is_better[i] { -1.0 } else { 1.0 };
        sum += sign * (model.values[m] - b) / b;
    }
    Ok(100.0 * sum / n as f64)
}

/// Reads `task,metric,lower_is_better` CSV. The flag accepts `0/1` or `true/false`.
pub fn read_metrics<R: Read>(source: R) -> Result<MetricReport> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.iter().collect::<Vec<_>>() != ["task", "metric", "lower_is_better"] {
        return Err(Error::Parse {
            line: 1,
            message: "expected header `task,metric,lower_is_better`".into(),
        });
    }
    let (mut tasks, mut values, mut flags) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| Error::Parse { line, message };
        if row.len() != 3 {
            return Err(fail(format!("expected 3 fields, found {}", row.len())));
        }
        tasks.push(row[0].to_string());
        values.push(
            row[1]
                .parse::<f64>()
                .map_err(|_| fail(format!("unparsable metric `{}`", &row[1])))?,
        );
        flags.push(match &row[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(fail(format!("lower_is_better must be 0 or 1, got `{other}`"))),
        });
    }
    MetricReport::new(tasks, values, flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_reports_give_zero() {
        let r = MetricReport::new(vec!["a".into(), "b".into()], vec![0.5, 3.0], vec![false, true]).unwrap();
        assert_eq!(delta_mtl(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn zero_baseline_rejected() {
        let b = MetricReport::new(vec!["a".into()], vec![0.0], vec![false]).unwrap();
        let m = MetricReport::new(vec!["a".into()], vec![1.0], vec![false]).unwrap();
        assert!(delta_mtl(&m, &b).is_err());
    }

    #[test]
    fn csv_parse() {
        let r = read_metrics("task,metric,lower_is_better\nseg,61.5,0\ndepth,2.66,1\n".as_bytes()).unwrap();
        assert_eq!(r.values, vec![61.5, 2.66]);
        assert_eq!(r.lower_is_better, vec![false, true]);
        assert!(read_metrics("task,metric,lower_is_better\nseg,61.5,2\n".as_bytes()).is_err());
    }
}
