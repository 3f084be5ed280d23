//! External encoder protocol.
//!
//! Requests are newline-delimited JSON objects `{"id": .., "text": ..}`;
//! responses are `{"id": .., "vec": [..]}`, one per request, in any order.
//! The transport is either a subprocess (requests on stdin, responses on
//! stdout) or a single HTTP POST whose body carries the request lines.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use super::TextEncoder;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub id: String,
    pub vec: Vec<f64>,
}

/// What `--encoder` points at when it is not a parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    Reference { path: PathBuf },
    Subprocess { command: Vec<String>, dim: usize },
    Http { url: String, dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transport {
    Subprocess(Vec<String>),
    Http(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEncoder {
    transport: Transport,
    dim: usize,
}

impl ExternalEncoder {
    pub fn subprocess(command: Vec<String>, dim: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external encoder command is empty".into()));
        }
        Ok(Self { transport: Transport::Subprocess(command), dim })
    }

    pub fn http(url: &str, dim: usize) -> Result<Self> {
        if !url.starts_with("http://") {
            return Err(Error::Config(format!("only http:// URLs are supported: {url}")));
        }
        Ok(Self { transport: Transport::Http(url.to_string()), dim })
    }

    pub fn from_spec(spec: &EncoderSpec) -> Result<Option<Self>> {
        match spec {
            EncoderSpec::Reference { .. } => Ok(None),
            EncoderSpec::Subprocess { command, dim } => Self::subprocess(command.clone(), *dim).map(Some),
            EncoderSpec::Http { url, dim } => Self::http(url, *dim).map(Some),
        }
    }

    fn request_body(texts: &[String]) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            serde_json::to_writer(&mut body, &EncodeRequest { id: i.to_string(), text: t.clone() })?;
            body.push(b'\n');
        }
        Ok(body)
    }

    fn collect(&self, n: usize, lines: impl Iterator<Item = std::io::Result<String>>) -> Result<Vec<Vec<f64>>> {
        let mut by_id: HashMap<String, Vec<f64>> = HashMap::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp: EncodeResponse = serde_json::from_str(&line)
                .map_err(|e| Error::External(format!("malformed response line: {e}")))?;
            if resp.vec.len() != self.dim {
                return Err(Error::External(format!(
                    "response {} has dimension {}, expected {}",
                    resp.id,
                    resp.vec.len(),
                    self.dim
                )));
            }
            by_id.insert(resp.id, resp.vec);
        }
        (0..n)
            .map(|i| by_id.remove(&i.to_string()).ok_or_else(|| Error::External(format!("no response for id {i}"))))
            .collect()
    }

    fn run_subprocess(&self, command: &[String], texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let mut child = Command::new(&command[0])
            .args(&command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start `{}`: {e}", command[0])))?;
        let body = Self::request_body(texts)?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let writer = std::thread::spawn(move || -> std::io::Result<()> {
            stdin.write_all(&body)?;
            stdin.flush()
        });
        let stdout = child.stdout.take().expect("piped stdout");
        let out = self.collect(texts.len(), BufReader::new(stdout).lines());
        writer
            .join()
            .map_err(|_| Error::External("request writer panicked".into()))?
            .map_err(|e| Error::External(format!("writing requests: {e}")))?;
        let status = child.wait()?;
        if !status.success() {
            return Err(Error::External(format!("encoder process exited with {status}")));
        }
        out
    }

    fn run_http(&self, url: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = Self::request_body(texts)?;
        let text = ureq::post(url)
            .header("Content-Type", "application/x-ndjson")
            .send(&body[..])
            .and_then(|mut r| r.body_mut().read_to_string())
            .map_err(|e| Error::External(format!("HTTP request to {url} failed: {e}")))?;
        self.collect(texts.len(), text.lines().map(|l| Ok(l.to_string())))
    }
}

impl TextEncoder for ExternalEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_batch(&self, texts: &[String], _exec: Execution) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        match &self.transport {
            Transport::Subprocess(cmd) => self.run_subprocess(cmd, texts),
            Transport::Http(url) => self.run_http(url, texts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    const PY_ENCODER: &str = r#"
import sys, json
for line in sys.stdin:
    r = json.loads(line)
    t = r["text"]
    print(json.dumps({"id": r["id"], "vec": [float(len(t)), float(t.count(" ")), 1.0]}))
"#;

    fn has_python() -> bool {
        Command::new("python3").arg("-c").arg("pass").status().is_ok_and(|s| s.success())
    }

    #[test]
    fn subprocess_round_trip() {
        if !has_python() {
            eprintln!("python3 unavailable; skipping");
            return;
        }
        let enc = ExternalEncoder::subprocess(vec!["python3".into(), "-c".into(), PY_ENCODER.into()], 3).unwrap();
        let texts = vec!["meds: a b".to_string(), "x".to_string()];
        let out = enc.encode_batch(&texts, Execution::Sequential).unwrap();
        assert_eq!(out, vec![vec![9.0, 2.0, 1.0], vec![1.0, 0.0, 1.0]]);
    }

    #[test]
    fn subprocess_dimension_mismatch_is_error() {
        if !has_python() {
            return;
        }
        let enc = ExternalEncoder::subprocess(vec!["python3".into(), "-c".into(), PY_ENCODER.into()], 4).unwrap();
        assert!(matches!(enc.encode_batch(&["a".into()], Execution::Sequential), Err(Error::External(_))));
    }

    #[test]
    fn http_round_trip_with_chunked_body() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let mut resp = String::new();
            for line in String::from_utf8(body).unwrap().lines() {
                let r: EncodeRequest = serde_json::from_str(line).unwrap();
                resp.push_str(&format!("{{\"id\":\"{}\",\"vec\":[{}.0,2.5]}}\n", r.id, r.text.len()));
            }
            let chunk = format!("{:x}\r\n{}\r\n0\r\n\r\n", resp.len(), resp);
            write!(s, "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n{chunk}").unwrap();
        });
        let enc = ExternalEncoder::http(&format!("http://127.0.0.1:{port}/embed"), 2).unwrap();
        let out = enc.encode_batch(&["abc".into(), "de".into()], Execution::Sequential).unwrap();
        server.join().unwrap();
        assert_eq!(out, vec![vec![3.0, 2.5], vec![2.0, 2.5]]);
    }

    #[test]
    fn spec_parses() {
        let s: EncoderSpec = serde_json::from_str(r#"{"kind":"http","url":"http://localhost:8080/e","dim":768}"#).unwrap();
        let e = ExternalEncoder::from_spec(&s).unwrap().unwrap();
        assert_eq!(e.dim(), 768);
        assert_eq!(e.transport, Transport::Http("http://localhost:8080/e".into()));
        assert!(ExternalEncoder::http("https://x", 3).is_err());
    }
}
