//! Black-box detectors run as a child process.
//!
//! The child reads one JSON object per line on stdin,
//! `{"context": [[..], ..], "suspect": [[..], ..]}`, and answers each with
//! one line `{"scores": [..]}` (one score per suspect row) or
//! `{"error": "..."}`. Gradients come from central differences.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use cfens_core::detect::{Detector, FiniteDifference};
use cfens_core::serde_array;
use cfens_core::{Error, Result};
use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Central-difference step used for external detectors.
pub const EXT_FD_STEP: f64 = 1e-4;

#[derive(Serialize)]
struct Request {
    context: Vec<Vec<f64>>,
    suspect: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    #[serde(default)]
    scores: Option<Vec<f64>>,
    #[serde(default)]
    error: Option<String>,
}

struct Process {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ExternalScorer {
    process: Mutex<Process>,
}

impl ExternalScorer {
    pub fn spawn(command: &[String]) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::External("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            process: Mutex::new(Process { child, stdin, stdout }),
        })
    }

    pub fn score(&self, context: ArrayView2<f64>, suspect: ArrayView2<f64>) -> Result<Array1<f64>> {
        let request = Request {
            context: serde_array::rows(&context.to_owned()),
            suspect: serde_array::rows(&suspect.to_owned()),
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        let mut p = self.process.lock().map_err(|_| Error::External("scorer lock poisoned".into()))?;
        p.stdin
            .write_all(line.as_bytes())
            .and_then(|_| p.stdin.flush())
            .map_err(|e| Error::External(format!("write to scorer: {e}")))?;
        let mut answer = String::new();
        let n = p
            .stdout
            .read_line(&mut answer)
            .map_err(|e| Error::External(format!("read from scorer: {e}")))?;
        if n == 0 {
            return Err(Error::External("scorer closed its output".into()));
        }
        drop(p);
        let response: Response = serde_json::from_str(&answer)
            .map_err(|e| Error::External(format!("malformed scorer answer: {e}")))?;
        if let Some(e) = response.error {
            return Err(Error::External(e));
        }
        let scores = response
            .scores
            .ok_or_else(|| Error::External("answer has neither scores nor error".into()))?;
        if scores.len() != suspect.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} scores", suspect.nrows()),
                got: scores.len().to_string(),
            });
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::External("scores must lie in [0, 1]".into()));
        }
        Ok(Array1::from(scores))
    }
}

impl Drop for ExternalScorer {
    fn drop(&mut self) {
        if let Ok(p) = self.process.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

pub type ScoreFn = Box<dyn Fn(ArrayView2<f64>, ArrayView2<f64>) -> Result<Array1<f64>> + Send + Sync>;

/// Spawn `command` and wrap it as a differentiable detector.
pub fn external_detector(command: &[String]) -> Result<FiniteDifference<ScoreFn>> {
    let scorer = Arc::new(ExternalScorer::spawn(command)?);
    let f: ScoreFn = Box::new(move |c, s| scorer.score(c, s));
    FiniteDifference::new(f, EXT_FD_STEP)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeRequest {
    context: Vec<Vec<f64>>,
    suspect: Vec<Vec<f64>>,
}

/// Answer scoring requests with `detector` until `input` ends.
pub fn serve<D: Detector + ?Sized>(detector: &D, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let answer = serde_json::from_str::<ServeRequest>(&line)
            .map_err(Error::from)
            .and_then(|r| {
                let c = serde_array::from_rows(&r.context).map_err(Error::External)?;
                let s = serde_array::from_rows(&r.suspect).map_err(Error::External)?;
                detector.score(c.view(), s.view())
            });
        let json = match answer {
            Ok(scores) => serde_json::json!({ "scores": scores.to_vec() }),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        writeln!(output, "{json}")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfens_core::detect::ZScoreDetector;
    use ndarray::array;

    #[test]
    fn serve_round_trip() {
        let input = b"{\"context\": [[0.0], [2.0]], \"suspect\": [[1.0], [5.0]]}\n\n{\"context\": []}\n";
        let mut out = Vec::new();
        serve(&ZScoreDetector::default(), &input[..], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let expect = ZScoreDetector::default()
            .score(array![[0.0], [2.0]].view(), array![[1.0], [5.0]].view())
            .unwrap();
        assert_eq!(first["scores"][1].as_f64().unwrap(), expect[1]);
        assert!(lines[1].contains("error"));
    }

    #[test]
    fn missing_program_is_an_external_error() {
        let err = ExternalScorer::spawn(&["/nonexistent/scorer".to_string()]).err().unwrap();
        assert_eq!(err.kind(), "External");
    }
}
