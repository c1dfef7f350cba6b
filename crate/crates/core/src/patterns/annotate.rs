//! Pattern annotation clients.
//!
//! [`AnnotationClient`] is the seam between curation and whatever produces
//! descriptions. Two implementations ship: [`MockClient`], a deterministic
//! offline stand-in, and [`LmmClient`], which speaks a generic chat-completion
//! JSON protocol over a pluggable [`ChatTransport`] (HTTP via [`HttpTransport`]).

use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Annotation, Category, Exemplar, PatternRecord, AGREEMENT_THRESHOLD};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarText {
    pub record_id: String,
    pub activation: f64,
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub pattern_id: u32,
    pub exemplars: Vec<ExemplarText>,
    pub frequency: f64,
    pub mean_activation: f64,
    pub max_activation: f64,
}

const ANNOTATE_SYSTEM: &str = "You label recurring findings in groups of chest radiograph reports. \
Reply with a JSON object {\"description\": string, \"category\": one of \
cardiac|pulmonary|pleural|structural|device|artifact} and nothing else.";

const VERIFY_SYSTEM: &str = "You check whether report excerpts show a described finding. \
Reply with a JSON object {\"matches\": [bool, ...]} with one entry per excerpt, in order, and nothing else.";

impl AnnotationRequest {
    pub fn prompt(&self) -> String {
        let mut s = format!(
            "Pattern {} fires on {:.2}% of probe studies (mean activation {:.4}, max {:.4}).\n\
             The studies that activate it most strongly have these report excerpts:\n",
            self.pattern_id,
            100.0 * self.frequency,
            self.mean_activation,
            self.max_activation
        );
        for (i, e) in self.exemplars.iter().enumerate() {
            s.push_str(&format!("{}. [activation {:.4}] {}\n", i + 1, e.activation, e.excerpt));
        }
        s.push_str("What single radiological pattern do these studies share?");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDraft {
    pub description: String,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationRequest {
    pub pattern_id: u32,
    pub description: String,
    pub exemplars: Vec<ExemplarText>,
}

impl VerificationRequest {
    pub fn prompt(&self) -> String {
        let mut s = format!("Described finding: {}\nExcerpts:\n", self.description);
        for (i, e) in self.exemplars.iter().enumerate() {
            s.push_str(&format!("{}. {}\n", i + 1, e.excerpt));
        }
        s.push_str("For each excerpt, does it show the described finding?");
        s
    }
}

pub trait AnnotationClient: Send + Sync {
    fn annotate(&self, req: &AnnotationRequest) -> Result<AnnotationDraft>;
    /// One verdict per exemplar, in order.
    fn verify(&self, req: &VerificationRequest) -> Result<Vec<bool>>;
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-'))
        .filter(|t| !t.is_empty())
}

fn is_factor_token(t: &str) -> bool {
    t.strip_prefix("factor-")
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

/// Deterministic offline annotator.
///
/// The description names the gallery's dominant token: the `factor-N` token
/// present in the most excerpts when the excerpts come from the synthetic
/// benchmark, otherwise the most common word of three or more letters. The
/// phrasing and category are picked by hashing the request. Verification
/// affirms an excerpt iff it contains that token.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockClient;

const MOCK_PHRASES: [&str; 4] = [
    "consistent finding across the gallery",
    "recurring appearance in the highest-activating studies",
    "shared feature of the top exemplars",
    "common element of the activating reports",
];

impl MockClient {
    pub fn dominant_token(excerpts: &[&str]) -> Option<String> {
        let mut factor: BTreeMap<&str, usize> = BTreeMap::new();
        let mut words: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in excerpts {
            let mut seen = std::collections::BTreeSet::new();
            for t in tokens(ex) {
                if seen.insert(t) {
                    if is_factor_token(t) {
                        *factor.entry(t).or_default() += 1;
                    } else if t.chars().count() >= 3 && t.chars().any(char::is_alphabetic) {
                        *words.entry(t).or_default() += 1;
                    }
                }
            }
        }
        let pick = |m: &BTreeMap<&str, usize>| {
            // BTreeMap iterates ascending, so max_by keeps the first of equal counts only if we reverse
            m.iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(t, _)| t.to_string())
        };
        pick(&factor).or_else(|| pick(&words))
    }

    /// The token a mock description is about.
    pub fn key_of(description: &str) -> &str {
        description.split(':').next().unwrap_or("").trim()
    }
}

impl AnnotationClient for MockClient {
    fn annotate(&self, req: &AnnotationRequest) -> Result<AnnotationDraft> {
        let excerpts: Vec<&str> = req.exemplars.iter().map(|e| e.excerpt.as_str()).collect();
        let key = Self::dominant_token(&excerpts).unwrap_or_else(|| format!("pattern-{}", req.pattern_id));
        let mut h = Sha256::new();
        for e in &req.exemplars {
            h.update(e.record_id.as_bytes());
            h.update(e.activation.to_le_bytes());
        }
        let digest = h.finalize();
        let phrase = MOCK_PHRASES[digest[0] as usize % MOCK_PHRASES.len()];
        let category = Category::ALL[digest[1] as usize % Category::ALL.len()];
        Ok(AnnotationDraft {
            description: format!("{key}: {phrase}"),
            category,
        })
    }

    fn verify(&self, req: &VerificationRequest) -> Result<Vec<bool>> {
        let key = Self::key_of(&req.description);
        Ok(req
            .exemplars
            .iter()
            .map(|e| !key.is_empty() && tokens(&e.excerpt).any(|t| t == key))
            .collect())
    }
}

/// Moves one chat exchange; returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpClientConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            token_env: "PATTERNLENS_API_TOKEN".into(),
            timeout_secs: 60,
        }
    }
}

/// Generic chat-completion client: `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    config: HttpClientConfig,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(config: HttpClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        HttpTransport { config, agent }
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Ok(token) = std::env::var(&self.config.token_env) {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(serde_json::to_vec(&body)?.as_slice())
            .map_err(|e| Error::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::MalformedResponse(format!("response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))
    }
}

/// Annotation over a chat transport with strict response schemas.
pub struct LmmClient<T> {
    pub transport: T,
}

fn extract_json(text: &str) -> Result<serde_json::Value> {
    let start = text.find('{');
    let end = text.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => {
            serde_json::from_str(&text[s..=e]).map_err(|err| Error::MalformedResponse(format!("invalid JSON: {err}")))
        }
        _ => Err(Error::MalformedResponse("no JSON object in reply".into())),
    }
}

impl<T: ChatTransport> AnnotationClient for LmmClient<T> {
    fn annotate(&self, req: &AnnotationRequest) -> Result<AnnotationDraft> {
        let reply = self.transport.complete(ANNOTATE_SYSTEM, &req.prompt())?;
        let v = extract_json(&reply)?;
        let description = v
            .get("description")
            .and_then(|d| d.as_str())
            .filter(|d| !d.trim().is_empty())
            .ok_or_else(|| Error::MalformedResponse("missing description".into()))?;
        let category = v
            .get("category")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::MalformedResponse("missing category".into()))?;
        let category = category
            .trim()
            .to_ascii_lowercase()
            .parse::<Category>()
            .map_err(|_| Error::MalformedResponse(format!("category {category:?} is not one of the six")))?;
        Ok(AnnotationDraft {
            description: description.trim().to_string(),
            category,
        })
    }

    fn verify(&self, req: &VerificationRequest) -> Result<Vec<bool>> {
        let reply = self.transport.complete(VERIFY_SYSTEM, &req.prompt())?;
        let v = extract_json(&reply)?;
        let arr = v
            .get("matches")
            .and_then(|m| m.as_array())
            .ok_or_else(|| Error::MalformedResponse("missing matches array".into()))?;
        if arr.len() != req.exemplars.len() {
            return Err(Error::MalformedResponse(format!(
                "expected {} verdicts, got {}",
                req.exemplars.len(),
                arr.len()
            )));
        }
        arr.iter()
            .map(|b| {
                b.as_bool()
                    .ok_or_else(|| Error::MalformedResponse("non-boolean verdict".into()))
            })
            .collect()
    }
}

fn with_text(list: &[Exemplar], excerpts: &HashMap<String, String>) -> Result<Vec<ExemplarText>> {
    list.iter()
        .map(|e| {
            let excerpt = excerpts
                .get(&e.record_id)
                .ok_or_else(|| Error::NotFound(format!("excerpt for record {}", e.record_id)))?;
            Ok(ExemplarText {
                record_id: e.record_id.clone(),
                activation: e.activation,
                excerpt: excerpt.clone(),
            })
        })
        .collect()
}

/// Annotate one pattern from its gallery. On failure the pattern keeps its
/// status, records the error, and the error is returned.
pub fn annotate_pattern(
    client: &dyn AnnotationClient,
    pattern: &mut PatternRecord,
    excerpts: &HashMap<String, String>,
) -> Result<Annotation> {
    if pattern.gallery.exemplars.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "pattern {} has an empty gallery",
            pattern.pattern_id
        )));
    }
    let req = AnnotationRequest {
        pattern_id: pattern.pattern_id,
        exemplars: with_text(&pattern.gallery.exemplars, excerpts)?,
        frequency: pattern.gallery.frequency,
        mean_activation: pattern.gallery.mean_activation,
        max_activation: pattern.gallery.max_activation,
    };
    match client.annotate(&req) {
        Ok(draft) => {
            let ann = Annotation {
                description: draft.description,
                category: draft.category,
                agreement: None,
            };
            pattern.annotation = Some(ann.clone());
            pattern.last_error = None;
            Ok(ann)
        }
        Err(e) => {
            pattern.last_error = Some(e.to_string());
            Err(e)
        }
    }
}

/// Ask the client to check the annotation against held-out exemplars.
/// Agreement below the acceptance threshold flags the pattern for human review.
pub fn verify_annotation(
    client: &dyn AnnotationClient,
    pattern: &mut PatternRecord,
    excerpts: &HashMap<String, String>,
) -> Result<f64> {
    if pattern.holdout.is_empty() {
        return Err(Error::Empty(format!(
            "pattern {} has no held-out exemplars",
            pattern.pattern_id
        )));
    }
    if pattern
        .holdout
        .iter()
        .any(|h| pattern.gallery.exemplars.iter().any(|g| g.record_id == h.record_id))
    {
        return Err(Error::InvalidArgument("held-out exemplars overlap the gallery".into()));
    }
    let description = pattern
        .annotation
        .as_ref()
        .map(|a| a.description.clone())
        .ok_or_else(|| Error::InvalidArgument(format!("pattern {} is not annotated", pattern.pattern_id)))?;
    let req = VerificationRequest {
        pattern_id: pattern.pattern_id,
        description,
        exemplars: with_text(&pattern.holdout, excerpts)?,
    };
    let verdicts = match client.verify(&req) {
        Ok(v) => v,
        Err(e) => {
            pattern.last_error = Some(e.to_string());
            return Err(e);
        }
    };
    let agreement = verdicts.iter().filter(|&&b| b).count() as f64 / verdicts.len() as f64;
    if let Some(a) = pattern.annotation.as_mut() {
        a.agreement = Some(agreement);
    }
    pattern.flagged_for_review = agreement < AGREEMENT_THRESHOLD;
    pattern.last_error = None;
    Ok(agreement)
}
