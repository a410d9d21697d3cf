//! Deterministic scripted provider for tests and offline runs.
//!
//! A script is an ordered list of entries; the first non-exhausted entry
//! whose substrings all appear in the rendered prompt answers the request.
//! Entries with a `times` budget are consumed in order, so two entries with
//! the same matcher serve the first and second matching calls respectively.

use super::{render_messages, ChatRequest, Provider, ProviderError};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptResponse {
    Text(String),
    Failure(String),
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    /// All substrings must appear in the rendered prompt text.
    pub match_all: Vec<String>,
    pub response: ScriptResponse,
    /// None = unlimited reuse.
    pub times: Option<u64>,
}

impl ScriptEntry {
    pub fn text(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            match_all: vec![matcher.into()],
            response: ScriptResponse::Text(response.into()),
            times: None,
        }
    }

    pub fn text_once(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            times: Some(1),
            ..ScriptEntry::text(matcher, response)
        }
    }

    pub fn failure(matcher: impl Into<String>, message: impl Into<String>, times: u64) -> Self {
        ScriptEntry {
            match_all: vec![matcher.into()],
            response: ScriptResponse::Failure(message.into()),
            times: Some(times),
        }
    }

    pub fn with_matchers(mut self, matchers: Vec<String>) -> Self {
        self.match_all = matchers;
        self
    }
}

/// Wire form of a script, loadable from `--mock-script` JSON:
/// `{"entries": [{"match": "...", "text": "...", "times": 1}, ...]}` where
/// each entry has `match` or `match_all`, and `text` or `error`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockScriptEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScriptEntry {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub match_substring: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_all: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<u64>,
}

impl MockScript {
    pub fn into_entries(self) -> Result<Vec<ScriptEntry>, String> {
        if self.entries.is_empty() {
            return Err("mock script must contain at least one entry".to_string());
        }
        self.entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let match_all = match (e.match_substring, e.match_all) {
                    (Some(s), None) => vec![s],
                    (None, Some(v)) => v,
                    (None, None) => vec![String::new()],
                    (Some(_), Some(_)) => {
                        return Err(format!("script entry {i}: use match or match_all, not both"))
                    }
                };
                let response = match (e.text, e.error) {
                    (Some(t), None) => ScriptResponse::Text(t),
                    (None, Some(m)) => ScriptResponse::Failure(m),
                    _ => return Err(format!("script entry {i}: exactly one of text or error required")),
                };
                Ok(ScriptEntry {
                    match_all,
                    response,
                    times: e.times,
                })
            })
            .collect()
    }
}

/// One observed call, for test assertions.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub model: String,
    pub sample_index: u32,
    pub prompt_text: String,
    /// Index of the script entry that answered, if any.
    pub matched_entry: Option<usize>,
}

struct EntryState {
    entry: ScriptEntry,
    used: u64,
}

pub struct MockProvider {
    id: String,
    entries: Mutex<Vec<EntryState>>,
    call_log: Mutex<Vec<CallRecord>>,
    in_flight: AtomicU64,
    peak_in_flight: AtomicU64,
    call_delay: Option<std::time::Duration>,
}

impl MockProvider {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        MockProvider {
            id: "mock".to_string(),
            entries: Mutex::new(entries.into_iter().map(|entry| EntryState { entry, used: 0 }).collect()),
            call_log: Mutex::new(Vec::new()),
            in_flight: AtomicU64::new(0),
            peak_in_flight: AtomicU64::new(0),
            call_delay: None,
        }
    }

    pub fn from_script(script: MockScript) -> Result<Self, String> {
        Ok(MockProvider::new(script.into_entries()?))
    }

    /// Adds an artificial per-call delay so concurrency bounds are observable.
    pub fn with_call_delay(mut self, delay: std::time::Duration) -> Self {
        self.call_delay = Some(delay);
        self
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.call_log.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.call_log.lock().unwrap().len()
    }

    /// Highest number of concurrent `complete_once` calls observed.
    pub fn peak_in_flight(&self) -> u64 {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

struct InFlightGuard<'a>(&'a MockProvider);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Provider for MockProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete_once(&self, req: &ChatRequest, sample_index: u32) -> Result<String, ProviderError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let _guard = InFlightGuard(self);
        if let Some(delay) = self.call_delay {
            std::thread::sleep(delay);
        }

        let prompt_text = render_messages(&req.messages);
        let mut entries = self.entries.lock().unwrap();
        let matched = entries.iter_mut().enumerate().find(|(_, state)| {
            let exhausted = state.entry.times.is_some_and(|t| state.used >= t);
            !exhausted && state.entry.match_all.iter().all(|m| prompt_text.contains(m.as_str()))
        });

        let (index, outcome) = match matched {
            Some((index, state)) => {
                state.used += 1;
                (Some(index), state.entry.response.clone())
            }
            None => {
                let prefix: String = prompt_text.chars().take(80).collect();
                self.call_log.lock().unwrap().push(CallRecord {
                    model: req.model.clone(),
                    sample_index,
                    prompt_text,
                    matched_entry: None,
                });
                return Err(ProviderError::Unmatched { prefix });
            }
        };
        drop(entries);

        self.call_log.lock().unwrap().push(CallRecord {
            model: req.model.clone(),
            sample_index,
            prompt_text,
            matched_entry: index,
        });
        match outcome {
            ScriptResponse::Text(t) => Ok(t),
            ScriptResponse::Failure(m) => Err(ProviderError::Scripted(m)),
        }
    }

    fn supports_thinking_budget(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::ChatMessage;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::greedy("mock-model", vec![ChatMessage::user_text(text)])
    }

    #[test]
    fn substring_matcher_answers() {
        let mock = MockProvider::new(vec![ScriptEntry::text("Key Points", "1. filter applied")]);
        let out = mock.complete_once(&req("please list the Key Points for this task"), 0).unwrap();
        assert_eq!(out, "1. filter applied");
        // Unlimited entries keep answering.
        let out2 = mock.complete_once(&req("other prompt with Key Points inside"), 0).unwrap();
        assert_eq!(out2, "1. filter applied");
    }

    #[test]
    fn sequential_entries_consumed_in_order() {
        let mock = MockProvider::new(vec![
            ScriptEntry::text_once("go", "first"),
            ScriptEntry::text_once("go", "second"),
        ]);
        assert_eq!(mock.complete_once(&req("go"), 0).unwrap(), "first");
        assert_eq!(mock.complete_once(&req("go"), 0).unwrap(), "second");
        let log = mock.call_log();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].matched_entry, Some(0));
        assert_eq!(log[1].matched_entry, Some(1));
        assert!(mock.complete_once(&req("go"), 0).is_err());
    }

    #[test]
    fn unmatched_error_carries_prompt_prefix() {
        let mock = MockProvider::new(vec![ScriptEntry::text("never-present", "x")]);
        let long: String = "a".repeat(200);
        let err = mock.complete_once(&req(&long), 0).unwrap_err();
        match err {
            ProviderError::Unmatched { prefix } => assert_eq!(prefix.len(), 80),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn script_wire_format_parses() {
        let json = r#"{"entries": [
            {"match": "a", "text": "x", "times": 1},
            {"match_all": ["b", "c"], "error": "boom"}
        ]}"#;
        let script: MockScript = serde_json::from_str(json).unwrap();
        let entries = script.into_entries().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].times, Some(1));
        assert_eq!(entries[1].match_all, vec!["b".to_string(), "c".to_string()]);
        assert!(matches!(entries[1].response, ScriptResponse::Failure(_)));
    }

    #[test]
    fn empty_script_rejected() {
        let script = MockScript { entries: vec![] };
        assert!(script.into_entries().is_err());
    }

    #[test]
    fn fixed_script_and_sequence_give_fixed_log() {
        let run = || {
            let mock = MockProvider::new(vec![
                ScriptEntry::text_once("alpha", "1"),
                ScriptEntry::text("alpha", "2"),
                ScriptEntry::text("beta", "3"),
            ]);
            for text in ["alpha", "beta", "alpha", "alpha"] {
                let _ = mock.complete_once(&req(text), 0);
            }
            mock.call_log()
                .into_iter()
                .map(|r| (r.prompt_text, r.matched_entry))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
