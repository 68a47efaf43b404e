//! Annotator interface, prompt rendering, response parsing and backends.

pub mod cache;
pub mod parse;
pub mod prompt;
pub mod remote;

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_json;
use crate::model::{AtomicLabel, Observation};

pub use cache::ResponseCache;
pub use parse::{CounterfactualProposal, FilterResult};
pub use prompt::render_prompt;
pub use remote::{BackendConfig, HttpTransport, RemoteAnnotator, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationKind {
    Describe,
    Summarize,
    Filter,
    Counterfactual,
    Plan,
}

impl fmt::Display for AnnotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationKind::Describe => "describe",
            AnnotationKind::Summarize => "summarize",
            AnnotationKind::Filter => "filter",
            AnnotationKind::Counterfactual => "counterfactual",
            AnnotationKind::Plan => "plan",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<AtomicLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_lang: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtered_lang: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<Vec<String>>,
}

/// One annotation call.
///
/// Image conventions per kind: describe carries a single observation;
/// summarize carries the subsampled observations its descriptions came from;
/// filter carries the first observation; counterfactual carries the
/// observation at the start of every atomic segment, so `images[i]` lines up
/// with `labels[i]`; plan carries the current observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRequest {
    pub kind: AnnotationKind,
    pub images: Vec<Observation>,
    pub context: RequestContext,
}

impl AnnotatorRequest {
    pub fn new(kind: AnnotationKind, images: Vec<Observation>, context: RequestContext) -> Self {
        Self {
            kind,
            images,
            context,
        }
    }

    /// Content hash of the request as seen by `backend`.
    pub fn cache_key(&self, backend: &str) -> String {
        sha256_json(&(backend, self))
    }

    pub fn trajectory_id(&self) -> Option<&str> {
        self.images.first().map(|o| o.trajectory_id.as_str())
    }
}

/// A backend that turns a request into raw reply text.
pub trait Annotator: Send + Sync {
    /// Identifies the backend and any settings that change its replies.
    fn id(&self) -> String;

    fn complete(&self, req: &AnnotatorRequest) -> Result<String>;
}

impl<A: Annotator + ?Sized> Annotator for &A {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
        (**self).complete(req)
    }
}

impl<A: Annotator + ?Sized> Annotator for Box<A> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum AnnotatorResponse {
    Description(String),
    Instructions(Vec<String>),
    Filter(FilterResult),
    Proposals(Vec<CounterfactualProposal>),
    Plan(AtomicLabel),
}

/// Parses a raw reply according to the request kind.
pub fn parse_response(req: &AnnotatorRequest, raw: &str) -> Result<AnnotatorResponse> {
    Ok(match req.kind {
        AnnotationKind::Describe => AnnotatorResponse::Description(raw.trim().to_string()),
        AnnotationKind::Summarize => AnnotatorResponse::Instructions(parse::parse_instructions(raw)?),
        AnnotationKind::Filter => AnnotatorResponse::Filter(parse::parse_filter(raw)?),
        AnnotationKind::Counterfactual => {
            let labels = req
                .context
                .labels
                .as_deref()
                .ok_or(Error::MissingField("labels"))?;
            AnnotatorResponse::Proposals(parse::parse_counterfactual_response(raw, labels)?)
        }
        AnnotationKind::Plan => AnnotatorResponse::Plan(parse::parse_plan_reply(raw)?),
    })
}

/// Sends a request through `annotator` and parses the reply.
pub fn annotate(annotator: &dyn Annotator, req: &AnnotatorRequest) -> Result<AnnotatorResponse> {
    // rendering first surfaces missing context before any backend work
    render_prompt(req)?;
    let raw = annotator.complete(req)?;
    parse_response(req, &raw)
}

/// Wraps a backend with the on-disk response cache.
pub struct CachedAnnotator<A> {
    inner: A,
    cache: ResponseCache,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<A: Annotator> CachedAnnotator<A> {
    pub fn new(inner: A, cache_dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            inner,
            cache: ResponseCache::open(cache_dir)?,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<A: Annotator> Annotator for CachedAnnotator<A> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
        let key = req.cache_key(&self.inner.id());
        if let Some(hit) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            debug!("cache hit {key}");
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let raw = self.inner.complete(req)?;
        self.cache.put(&key, &raw)?;
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Payload;
    use std::sync::atomic::AtomicU32;

    struct Counting {
        calls: AtomicU32,
    }

    impl Annotator for Counting {
        fn id(&self) -> String {
            "counting".into()
        }

        fn complete(&self, req: &AnnotatorRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(format!("{{'instructions': ['Move to the {}'], 'reasoning': ''}}", req.images.len()))
        }
    }

    fn summarize_req() -> AnnotatorRequest {
        AnnotatorRequest::new(
            AnnotationKind::Summarize,
            vec![Observation {
                trajectory_id: "t".into(),
                timestep: 0,
                payload: Payload::Uri { uri: "a.png".into() },
            }],
            RequestContext {
                descriptions: Some(vec!["a door".into()]),
                ..Default::default()
            },
        )
    }

    #[test]
    fn second_identical_request_is_served_from_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cached = CachedAnnotator::new(Counting { calls: AtomicU32::new(0) }, dir.path()).unwrap();
        let req = summarize_req();
        let a = annotate(&cached, &req).unwrap();
        let b = annotate(&cached, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(cached.inner().calls.load(Ordering::SeqCst), 1);
        assert_eq!((cached.hits(), cached.misses()), (1, 1));

        // a fresh wrapper over the same directory makes no calls at all
        let again = CachedAnnotator::new(Counting { calls: AtomicU32::new(0) }, dir.path()).unwrap();
        assert_eq!(annotate(&again, &req).unwrap(), a);
        assert_eq!(again.inner().calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn missing_context_fails_before_the_backend_is_called() {
        let backend = Counting { calls: AtomicU32::new(0) };
        let mut req = summarize_req();
        req.kind = AnnotationKind::Filter;
        assert!(matches!(annotate(&backend, &req), Err(Error::MissingField("labels"))));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn cache_key_depends_on_content() {
        let a = summarize_req();
        let mut b = a.clone();
        b.context.descriptions = Some(vec!["a window".into()]);
        assert_ne!(a.cache_key("x"), b.cache_key("x"));
        assert_ne!(a.cache_key("x"), a.cache_key("y"));
        assert_eq!(a.cache_key("x"), a.clone().cache_key("x"));
    }
}
