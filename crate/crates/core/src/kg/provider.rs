//! Client for an OpenAI-compatible HTTP endpoint, usable as every
//! pipeline role. Offline mocks remain the default; this is only built with
//! the `provider` feature.

use serde::{Deserialize, Serialize};

pub const URL_ENV: &str = "PROTOEHR_PROVIDER_URL";
pub const KEY_ENV: &str = "PROTOEHR_PROVIDER_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model: String,
    pub embedding_model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            embedding_model: "default".into(),
            timeout_secs: 60,
            retries: 3,
            api_key: None,
        }
    }
}

impl ProviderConfig {
    /// Applies the URL and key environment overrides.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(URL_ENV) {
            self.base_url = url;
        }
        if let Ok(key) = std::env::var(KEY_ENV) {
            self.api_key = Some(key);
        }
        self
    }
}

#[cfg(feature = "provider")]
pub use client::ProviderClient;

#[cfg(feature = "provider")]
mod client {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::ProviderConfig;
    use crate::kg::{ContradictionSplitter, KgError, ProviderResult, RelationSuggester, TextEmbedder, TripletJudge};

    pub struct ProviderClient {
        cfg: ProviderConfig,
        http: reqwest::blocking::Client,
        dim: usize,
    }

    fn err(e: impl std::fmt::Display) -> KgError {
        KgError::Provider(e.to_string())
    }

    impl ProviderClient {
        /// Connects and probes the embedding width.
        pub fn new(cfg: ProviderConfig) -> ProviderResult<Self> {
            let http = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(cfg.timeout_secs))
                .build()
                .map_err(err)?;
            let mut c = Self { cfg, http, dim: 0 };
            c.dim = c.raw_embed("probe")?.len();
            Ok(c)
        }

        fn post(&self, path: &str, body: &Value) -> ProviderResult<Value> {
            let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path);
            let mut last = None;
            for attempt in 0..=self.cfg.retries {
                let mut req = self.http.post(&url).json(body);
                if let Some(k) = &self.cfg.api_key {
                    req = req.bearer_auth(k);
                }
                match req.send().and_then(|r| r.error_for_status()).and_then(|r| r.json::<Value>()) {
                    Ok(v) => return Ok(v),
                    Err(e) => {
                        log::warn!("provider request to {path} failed (attempt {}): {e}", attempt + 1);
                        last = Some(e);
                        std::thread::sleep(Duration::from_millis(200 << attempt.min(5)));
                    }
                }
            }
            Err(err(last.map_or_else(|| "no attempt made".to_string(), |e| e.to_string())))
        }

        fn chat(&self, prompt: &str) -> ProviderResult<String> {
            let body = json!({
                "model": self.cfg.model,
                "temperature": 0,
                "messages": [{ "role": "user", "content": prompt }],
            });
            let v = self.post("chat/completions", &body)?;
            v["choices"][0]["message"]["content"]
                .as_str()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| err("chat response without content"))
        }

        fn raw_embed(&self, text: &str) -> ProviderResult<Vec<f64>> {
            let v = self.post("embeddings", &json!({ "model": self.cfg.embedding_model, "input": text }))?;
            let e: Vec<f64> = v["data"][0]["embedding"]
                .as_array()
                .ok_or_else(|| err("embedding response without data"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| err("non-numeric embedding")))
                .collect::<ProviderResult<_>>()?;
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(err("zero embedding"));
            }
            Ok(e.into_iter().map(|x| x / n).collect())
        }
    }

    impl RelationSuggester for ProviderClient {
        fn suggest(&self, head: &str, tail: &str) -> ProviderResult<Option<String>> {
            let a = self.chat(&format!(
                "State the medical relationship from \"{head}\" to \"{tail}\" as a short lowercase verb phrase. \
                 Reply NONE if they are unrelated. Reply with the phrase only."
            ))?;
            let a = a.trim_matches(|c: char| c == '"' || c == '.').to_lowercase();
            Ok((!a.is_empty() && a != "none").then_some(a))
        }
    }

    impl TripletJudge for ProviderClient {
        fn judge(&self, text: &str) -> ProviderResult<bool> {
            let a = self.chat(&format!("Is this medical statement true? \"{text}\" Answer yes or no."))?;
            Ok(a.to_lowercase().starts_with("yes"))
        }
    }

    impl TextEmbedder for ProviderClient {
        fn dim(&self) -> usize {
            self.dim
        }

        fn embed(&self, text: &str) -> ProviderResult<Vec<f64>> {
            let e = self.raw_embed(text)?;
            if e.len() != self.dim {
                return Err(err(format!("embedding width changed from {} to {}", self.dim, e.len())));
            }
            Ok(e)
        }
    }

    impl ContradictionSplitter for ProviderClient {
        fn split(&self, members: &[String]) -> ProviderResult<Vec<Vec<String>>> {
            if members.len() < 2 {
                return Ok(vec![members.to_vec()]);
            }
            let list = members.iter().enumerate().map(|(i, m)| format!("{i}: {m}")).collect::<Vec<_>>().join("\n");
            let a = self.chat(&format!(
                "These relations were grouped as synonyms:\n{list}\n\
                 Split them so that no group holds relations with opposite meanings. \
                 Reply with a JSON array of arrays of indices only."
            ))?;
            let groups: Vec<Vec<usize>> = serde_json::from_str(a.trim()).map_err(|e| err(format!("unparseable split {a:?}: {e}")))?;
            let mut seen = vec![false; members.len()];
            let mut out = Vec::new();
            for g in groups {
                let mut part = Vec::new();
                for i in g {
                    if i < members.len() && !seen[i] {
                        seen[i] = true;
                        part.push(members[i].clone());
                    }
                }
                if !part.is_empty() {
                    out.push(part);
                }
            }
            // Anything the reply left out stays in its own group.
            out.extend(members.iter().zip(&seen).filter(|(_, s)| !**s).map(|(m, _)| vec![m.clone()]));
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_toml() {
        let c: ProviderConfig = toml::from_str("base_url = \"http://h/v1\"\nretries = 1").unwrap();
        assert_eq!(c.base_url, "http://h/v1");
        assert_eq!(c.retries, 1);
        assert_eq!(c.timeout_secs, ProviderConfig::default().timeout_secs);
        assert!(c.api_key.is_none());
    }
}
