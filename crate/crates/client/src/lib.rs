//! Thin async client for the intervention service.

use pcbm::api::{ErrorBody, Health, OpenSession, SampleSummary, SessionView, Thumbnail};
use pcbm::intervention::Edit;
use pcbm::synth::Split;
use reqwest::{Method, RequestBuilder, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// Error body returned by the service.
    #[error("{status} {code}: {message}")]
    Api {
        status: StatusCode,
        code: String,
        message: String,
    },
}

impl ClientError {
    /// Machine-readable code of a service rejection.
    pub fn code(&self) -> Option<&str> {
        match self {
            Self::Api { code, .. } => Some(code),
            Self::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    /// `base` is the server root, for example `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        self.http.request(method, format!("{}{path}", self.base))
    }

    async fn send(req: RequestBuilder) -> Result<reqwest::Response> {
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => ClientError::Api {
                status,
                code: b.error.code,
                message: b.error.message,
            },
            Err(_) => ClientError::Api {
                status,
                code: "unexpected".into(),
                message: text,
            },
        })
    }

    async fn json<T: DeserializeOwned>(req: RequestBuilder) -> Result<T> {
        Ok(Self::send(req).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health> {
        Self::json(self.request(Method::GET, "/health")).await
    }

    /// Samples of one split, or all samples.
    pub async fn samples(&self, split: Option<Split>) -> Result<Vec<SampleSummary>> {
        let path = match split {
            Some(s) => format!("/samples?split={}", s.as_str()),
            None => "/samples".to_string(),
        };
        Self::json(self.request(Method::GET, &path)).await
    }

    pub async fn thumbnail(&self, sample_id: usize) -> Result<Thumbnail> {
        Self::json(self.request(Method::GET, &format!("/samples/{sample_id}/thumbnail"))).await
    }

    pub async fn open_session(&self, sample_id: usize) -> Result<SessionView> {
        Self::json(
            self.request(Method::POST, "/sessions")
                .json(&OpenSession { sample_id }),
        )
        .await
    }

    pub async fn session(&self, id: &str) -> Result<SessionView> {
        Self::json(self.request(Method::GET, &format!("/sessions/{id}"))).await
    }

    pub async fn edit(&self, id: &str, edit: &Edit) -> Result<SessionView> {
        Self::json(
            self.request(Method::POST, &format!("/sessions/{id}/edits"))
                .json(edit),
        )
        .await
    }

    pub async fn close(&self, id: &str) -> Result<()> {
        Self::send(self.request(Method::DELETE, &format!("/sessions/{id}"))).await?;
        Ok(())
    }
}
