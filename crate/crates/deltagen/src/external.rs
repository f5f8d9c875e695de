//! Optional external text-generation client. It may reword question text;
//! answers, numbers and options always come from the templates.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GenError, Result};

pub const API_KEY_VAR: &str = "DELTAGEN_API_KEY";

pub trait Rewriter {
    fn rewrite(&self, template_text: &str, facts: &Value) -> Result<String>;
}

#[derive(Serialize)]
struct Request<'a> {
    template_text: &'a str,
    facts: &'a Value,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

/// POSTs `{template_text, facts}` as JSON and reads `{text}`.
#[derive(Clone, Debug)]
pub struct HttpRewriter {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpRewriter {
    /// Client for `endpoint` with the key taken from the environment.
    pub fn from_env(endpoint: &str) -> HttpRewriter {
        HttpRewriter {
            endpoint: endpoint.to_string(),
            api_key: std::env::var(API_KEY_VAR).ok(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl Rewriter for HttpRewriter {
    fn rewrite(&self, template_text: &str, facts: &Value) -> Result<String> {
        let mut req = ureq::post(&self.endpoint).timeout(self.timeout);
        if let Some(k) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp = req
            .send_json(Request {
                template_text,
                facts,
            })
            .map_err(|e| GenError::External(e.to_string()))?;
        let body: Response = resp
            .into_json()
            .map_err(|e| GenError::External(format!("bad response: {e}")))?;
        let text = body.text.trim().to_string();
        if text.is_empty() {
            return Err(GenError::External("empty rewrite".into()));
        }
        Ok(text)
    }
}
