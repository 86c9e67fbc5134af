//! Blocking client for a running service's northbound API.

use reqwest::blocking::Client;
use serde_json::Value;

use crate::Failure;

pub struct Northbound {
    base: String,
    http: Client,
}

impl Northbound {
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_owned(), http: Client::new() }
    }

    fn finish(&self, r: reqwest::Result<reqwest::blocking::Response>) -> Result<Value, Failure> {
        let r = r.map_err(|e| Failure::runtime(format!("cannot reach {}: {e}", self.base)))?;
        let status = r.status();
        let body: Value = r.json().unwrap_or(Value::Null);
        if status.is_success() {
            Ok(body)
        } else {
            let msg = body.get("message").or_else(|| body.get("reason")).and_then(Value::as_str).unwrap_or("");
            Err(Failure::runtime(format!("{status}: {msg}\n{body}")))
        }
    }

    pub fn get(&self, path: &str) -> Result<Value, Failure> {
        self.finish(self.http.get(format!("{}{path}", self.base)).send())
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        self.finish(self.http.post(format!("{}{path}", self.base)).json(body).send())
    }
}
