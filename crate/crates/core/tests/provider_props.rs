//! Provider-stack properties: cache soundness, cache-key injectivity,
//! retry accounting, and the in-flight concurrency bound.

use cotjudge_core::provider::{
    cache_key, ChatClient, ChatMessage, ChatRequest, MockProvider, Provider, ProviderError,
    ResponseCache, RetryPolicy, ScriptEntry,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

fn request(text: &str) -> ChatRequest {
    ChatRequest::greedy("test-model", vec![ChatMessage::user_text(text)])
}

fn client_with_cache(entries: Vec<ScriptEntry>, dir: &std::path::Path) -> (ChatClient, Arc<MockProvider>) {
    let mock = Arc::new(MockProvider::new(entries));
    let client = ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>).with_cache(ResponseCache::new(dir));
    (client, mock)
}

#[test]
fn cache_soundness_second_call_is_cached_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (client, mock) = client_with_cache(vec![ScriptEntry::text("hello", "Status: success")], dir.path());
    let req = request("hello there");

    let first = client.complete(&req).unwrap();
    assert!(!first.cached);
    let second = client.complete(&req).unwrap();
    assert!(second.cached);
    assert_eq!(first.texts, second.texts);
    assert_eq!(first.sample_digests, second.sample_digests);
    assert_eq!(mock.call_count(), 1, "second call must not reach the provider");
}

#[test]
fn scripted_mock_answers_and_reports_cached_false() {
    let (client, _mock) = {
        let mock = Arc::new(MockProvider::new(vec![ScriptEntry::text("anything", "Status: success")]));
        (ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>), mock)
    };
    let resp = client.complete(&request("anything goes")).unwrap();
    assert_eq!(resp.texts, vec!["Status: success".to_string()]);
    assert!(!resp.cached);
}

#[test]
fn cache_key_injectivity_over_randomly_perturbed_requests() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut digests = HashSet::new();
    for i in 0..1000u32 {
        let mut req = request("base prompt text");
        // Perturb one dimension per iteration; the counter keeps the inputs
        // pairwise distinct while the noise varies their shape.
        match i % 5 {
            0 => req.model = format!("model-{i}-{}", rng.random_range(0..1_000_000u64)),
            1 => {
                req.messages =
                    vec![ChatMessage::user_text(format!("prompt {i} {}", rng.random_range(0..1_000_000u64)))]
            }
            2 => req.temperature = 0.5 + (i as f64) / 1000.0,
            3 => req.max_output_tokens = Some(1 + i),
            _ => req.thinking_budget_tokens = Some(1 + i),
        }
        let sample_index = if i % 7 == 0 { rng.random_range(1..4u32) } else { 0 };
        let digest = cache_key("provider", &req, sample_index);
        assert!(digests.insert(digest), "digest collision at iteration {i}");
    }
    assert_eq!(digests.len(), 1000);
}

#[test]
fn retry_succeeds_after_two_failures() {
    let mock = Arc::new(MockProvider::new(vec![
        ScriptEntry::failure("go", "transient", 2),
        ScriptEntry::text("go", "Status: success"),
    ]));
    let client = ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>);
    let outcome = client
        .complete_with_retry(&request("go"), &RetryPolicy::immediate(3))
        .unwrap();
    assert_eq!(outcome.attempts, 3);
    assert_eq!(outcome.response.texts, vec!["Status: success".to_string()]);
    assert_eq!(mock.call_count(), 3);
}

#[test]
fn retry_exhaustion_reports_attempt_count() {
    let mock = Arc::new(MockProvider::new(vec![ScriptEntry::failure("go", "always down", 99)]));
    let client = ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>);
    let err = client
        .complete_with_retry(&request("go"), &RetryPolicy::immediate(2))
        .unwrap_err();
    assert!(err.to_string().contains("exhausted after 2 attempts"), "{err}");
    match err {
        ProviderError::RetriesExhausted { attempts, .. } => assert_eq!(attempts, 2),
        other => panic!("unexpected error: {other}"),
    }
}

#[test]
fn retry_first_try_counts_one_attempt() {
    let mock = Arc::new(MockProvider::new(vec![ScriptEntry::text("go", "ok")]));
    let client = ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>);
    let outcome = client
        .complete_with_retry(&request("go"), &RetryPolicy::immediate(3))
        .unwrap();
    assert_eq!(outcome.attempts, 1);
}

#[test]
fn in_flight_bound_is_respected() {
    let mock = Arc::new(
        MockProvider::new(vec![ScriptEntry::text("work", "done")])
            .with_call_delay(Duration::from_millis(10)),
    );
    let client = Arc::new(
        ChatClient::new(Arc::clone(&mock) as Arc<dyn Provider>).with_max_in_flight(3),
    );
    std::thread::scope(|scope| {
        for i in 0..16 {
            let client = Arc::clone(&client);
            scope.spawn(move || {
                client.complete(&request(&format!("work item {i}"))).unwrap();
            });
        }
    });
    assert_eq!(mock.call_count(), 16);
    assert!(
        mock.peak_in_flight() <= 3,
        "observed {} concurrent calls with a bound of 3",
        mock.peak_in_flight()
    );
}

#[test]
fn thinking_budget_warning_surfaces_for_knobless_provider() {
    struct Knobless;
    impl Provider for Knobless {
        fn id(&self) -> &str {
            "knobless"
        }
        fn complete_once(&self, _: &ChatRequest, _: u32) -> Result<String, ProviderError> {
            Ok("ok".to_string())
        }
    }
    let client = ChatClient::new(Arc::new(Knobless));
    let mut req = request("x");
    req.thinking_budget_tokens = Some(4096);
    client.complete(&req).unwrap();
    let warnings = client.drain_warnings();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("thinking-budget"), "{}", warnings[0]);
    assert!(client.drain_warnings().is_empty());
}
