//! Probability-emitting decoders behind one interface.
//!
//! A [`DecoderBackend`] turns an (instance, conditioning text) query into
//! per-choice scores. [`Decoder`] wraps a backend with retries, score
//! normalization, a persistent cache, and bounded batch concurrency.

mod cache;
mod distribution;
mod http;
mod table;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub use cache::{cache_key, CacheKey, DistributionCache};
pub use distribution::{ChoiceDistribution, PROB_FLOOR};
pub use http::{HttpBackend, HttpEncoder, ScoreRequest, ScoreResponse, ScoreServer, ScoreServerBuilder, SCORE_PATH};
pub use table::{OracleRow, TableOracleBackend};

use crate::dataset::Instance;
use crate::error::{BackendError, Error, Result};
use crate::par::Execution;

/// One decoder request.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub instance: &'a Instance,
    pub conditioning: &'a str,
}

impl<'a> Query<'a> {
    pub fn new(instance: &'a Instance, conditioning: &'a str) -> Self {
        Query { instance, conditioning }
    }
}

/// Raw backend output, aligned to the instance's choices.
#[derive(Debug, Clone, PartialEq)]
pub enum Scores {
    Probabilities(Vec<f64>),
    LogScores(Vec<f64>),
}

pub trait DecoderBackend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn backend_id(&self) -> &str;

    fn score(&self, query: &Query<'_>) -> Result<Scores, BackendError>;
}

impl<B: DecoderBackend + ?Sized> DecoderBackend for Arc<B> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn score(&self, query: &Query<'_>) -> Result<Scores, BackendError> {
        (**self).score(query)
    }
}

/// Bounded retries with exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
        }
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::debug!("attempt {attempt}/{attempts} failed: {e}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub struct Decoder {
    backend: Arc<dyn DecoderBackend>,
    cache: Option<DistributionCache>,
    retry: RetryPolicy,
    max_in_flight: usize,
    execution: Execution,
    renormalize: bool,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl std::fmt::Debug for Decoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Decoder")
            .field("backend", &self.backend.backend_id())
            .field("cache", &self.cache.as_ref().map(|c| c.path().to_path_buf()))
            .field("retry", &self.retry)
            .field("max_in_flight", &self.max_in_flight)
            .finish()
    }
}

impl Decoder {
    pub fn new(backend: impl DecoderBackend + 'static) -> Self {
        Decoder {
            backend: Arc::new(backend),
            cache: None,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            execution: Execution::default(),
            renormalize: true,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: DistributionCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.max_in_flight = limit.max(1);
        self
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// When disabled, log-scores must already be log-probabilities (their
    /// exponentials summing to one within 1e-6); only the floor is applied.
    pub fn with_renormalize(mut self, renormalize: bool) -> Self {
        self.renormalize = renormalize;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.backend_id()
    }

    /// Number of backend requests issued (retries included).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn predict(&self, instance: &Instance, conditioning: &str) -> Result<ChoiceDistribution> {
        if instance.arity() < 2 {
            return Err(Error::InvalidArgument(format!(
                "instance `{}` has fewer than two choices",
                instance.id
            )));
        }
        let key = self
            .cache
            .as_ref()
            .map(|_| cache_key(self.backend_id(), &instance.id, &instance.choices, conditioning));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        let query = Query::new(instance, conditioning);
        let scores = self.retry.run(|| {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            self.backend.score(&query)
        })?;
        let dist = self.to_distribution(instance, scores)?;
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            cache.put(key, self.backend_id(), &dist)?;
        }
        Ok(dist)
    }

    fn to_distribution(&self, instance: &Instance, scores: Scores) -> Result<ChoiceDistribution> {
        let raw = match &scores {
            Scores::Probabilities(v) | Scores::LogScores(v) => v,
        };
        if raw.len() != instance.arity() {
            return Err(BackendError::Fatal(format!(
                "backend returned {} scores for instance `{}` with {} choices",
                raw.len(),
                instance.id,
                instance.arity()
            ))
            .into());
        }
        if raw.iter().any(|s| !s.is_finite()) {
            return Err(BackendError::Fatal(format!(
                "backend returned non-finite scores for instance `{}`",
                instance.id
            ))
            .into());
        }
        match scores {
            Scores::Probabilities(p) => ChoiceDistribution::from_probs(p),
            Scores::LogScores(s) if self.renormalize => ChoiceDistribution::from_log_scores(&s),
            Scores::LogScores(s) => {
                let p: Vec<f64> = s.iter().map(|x| x.exp()).collect();
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(BackendError::Fatal(format!(
                        "renormalization disabled but probabilities sum to {total}"
                    ))
                    .into());
                }
                ChoiceDistribution::from_probs(p)
            }
        }
    }

    /// Order-preserving batch prediction; at most `max_in_flight` requests run
    /// concurrently. Failures are reported per query.
    pub fn predict_batch(&self, queries: &[Query<'_>]) -> Vec<Result<ChoiceDistribution>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(self.max_in_flight) {
            out.extend(
                self.execution
                    .map_slice(chunk, |q| self.predict(q.instance, q.conditioning)),
            );
        }
        out
    }
}


#[cfg(test)]
mod tests {
    use super::testing::ScriptedBackend;
    use super::*;
    use crate::dataset::Instance;

    fn inst(id: &str) -> Instance {
        Instance::new(id, "p", vec!["a".into(), "b".into()]).unwrap()
    }

    fn by_length(q: &Query<'_>) -> Result<Scores, BackendError> {
        Ok(Scores::LogScores(vec![q.conditioning.len() as f64 * 0.1, 0.0]))
    }

    #[test]
    fn table_lookup_identity() {
        let mut table = TableOracleBackend::new("oracle");
        table.insert("i1", "", ChoiceDistribution::from_probs(vec![0.9, 0.1]).unwrap());
        let decoder = Decoder::new(table);
        let d = decoder.predict(&inst("i1"), "").unwrap();
        assert_eq!(d.probs(), &[0.9, 0.1]);
    }

    #[test]
    fn cache_short_circuits_backend() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(by_length));
        let decoder =
            Decoder::new(backend.clone()).with_cache(DistributionCache::open(dir.path().join("c.jsonl")).unwrap());
        let (a, b, c) = (inst("a"), inst("b"), inst("c"));
        let queries = [Query::new(&a, "x"), Query::new(&b, "yy"), Query::new(&c, "zzz")];
        let first: Vec<_> = decoder
            .predict_batch(&queries)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(backend.calls.load(Ordering::Relaxed), 3);
        let again: Vec<_> = decoder
            .predict_batch(&queries)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(backend.calls.load(Ordering::Relaxed), 3);
        assert_eq!(first, again);
        assert_eq!(decoder.cache_hits(), 3);
    }

    #[test]
    fn mixed_hits_and_misses_keep_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(by_length));
        let decoder = Decoder::new(backend.clone())
            .with_cache(DistributionCache::open(dir.path().join("c.jsonl")).unwrap())
            .with_max_in_flight(2);
        let insts: Vec<Instance> = (0..4).map(|i| inst(&format!("i{i}"))).collect();
        let texts = ["", "a", "bb", "ccc"];
        decoder.predict(&insts[1], texts[1]).unwrap();
        decoder.predict(&insts[3], texts[3]).unwrap();
        let queries: Vec<Query> = insts.iter().zip(texts).map(|(i, t)| Query::new(i, t)).collect();
        let results = decoder.predict_batch(&queries);
        assert_eq!(backend.calls.load(Ordering::Relaxed), 4);
        for (r, t) in results.iter().zip(texts) {
            let expected = ChoiceDistribution::from_log_scores(&[t.len() as f64 * 0.1, 0.0]).unwrap();
            assert_eq!(r.as_ref().unwrap(), &expected);
        }
    }

    #[test]
    fn partial_failure_is_reported_per_query() {
        let backend = Arc::new(ScriptedBackend::new(by_length));
        backend.failing.lock().unwrap().insert("bad".into());
        let decoder = Decoder::new(backend.clone()).with_retry(RetryPolicy::immediate(3));
        let (a, bad, c) = (inst("a"), inst("bad"), inst("c"));
        let results = decoder.predict_batch(&[Query::new(&a, ""), Query::new(&bad, ""), Query::new(&c, "")]);
        assert!(results[0].is_ok() && results[2].is_ok());
        assert!(matches!(results[1], Err(Error::Backend(BackendError::Transport(_)))));
        // 1 + 3 attempts + 1
        assert_eq!(backend.calls.load(Ordering::Relaxed), 5);
        assert_eq!(decoder.backend_calls(), 5);
    }

    #[test]
    fn batch_matches_sequential() {
        let decoder = Decoder::new(ScriptedBackend::new(by_length)).with_max_in_flight(3);
        let insts: Vec<Instance> = (0..10).map(|i| inst(&format!("i{i}"))).collect();
        let texts: Vec<String> = (0..10).map(|i| "x".repeat(i)).collect();
        let queries: Vec<Query> = insts.iter().zip(&texts).map(|(i, t)| Query::new(i, t)).collect();
        let batch: Vec<_> = decoder
            .predict_batch(&queries)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        let seq: Vec<_> = queries
            .iter()
            .map(|q| decoder.predict(q.instance, q.conditioning).unwrap())
            .collect();
        assert_eq!(batch, seq);
    }

    #[test]
    fn wrong_arity_and_non_finite_are_fatal() {
        let decoder = Decoder::new(ScriptedBackend::new(|_q: &Query<'_>| {
            Ok(Scores::LogScores(vec![0.0, 0.0, 0.0]))
        }));
        let err = decoder.predict(&inst("a"), "").unwrap_err();
        assert!(matches!(err, Error::Backend(BackendError::Fatal(_))), "{err}");

        let decoder = Decoder::new(ScriptedBackend::new(|_q: &Query<'_>| {
            Ok(Scores::LogScores(vec![f64::NAN, 0.0]))
        }));
        assert!(matches!(
            decoder.predict(&inst("a"), ""),
            Err(Error::Backend(BackendError::Fatal(_)))
        ));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = Arc::new(ScriptedBackend::new(|_q: &Query<'_>| {
            Err(BackendError::Fatal("400".into()))
        }));
        let decoder = Decoder::new(backend.clone()).with_retry(RetryPolicy::immediate(3));
        assert!(decoder.predict(&inst("a"), "").is_err());
        assert_eq!(backend.calls.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn renormalize_knob() {
        let logp = |_q: &Query<'_>| Ok(Scores::LogScores(vec![0.25f64.ln(), 0.75f64.ln()]));
        let raw = Decoder::new(ScriptedBackend::new(logp)).with_renormalize(false);
        let d = raw.predict(&inst("a"), "").unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-12);
        let unnormalized = |_q: &Query<'_>| Ok(Scores::LogScores(vec![0.0, 0.0]));
        let raw = Decoder::new(ScriptedBackend::new(unnormalized)).with_renormalize(false);
        assert!(raw.predict(&inst("a"), "").is_err());
    }
}
