//! In-process chat-completion server for tests and dry runs.
//!
//! The server answers `POST /v1/chat/completions` by handing the decoded
//! request to a responder closure.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::task::JoinHandle;

use crate::endpoint::{ChatRequest, ChatResponse};

/// What the stub sends back for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StubReply {
    Text(String),
    Status(u16),
}

pub type Responder = Arc<dyn Fn(&ChatRequest) -> StubReply + Send + Sync>;

async fn handle(State(responder): State<Responder>, Json(request): Json<ChatRequest>) -> Response {
    match responder(&request) {
        StubReply::Text(text) => Json(ChatResponse::single(&text)).into_response(),
        StubReply::Status(code) => {
            let status = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, "scripted failure").into_response()
        }
    }
}

pub fn router(responder: Responder) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(handle))
        .with_state(responder)
}

/// Running stub; dropping it stops the server.
pub struct StubServer {
    pub addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl StubServer {
    /// Bind to an ephemeral localhost port and serve in the background.
    pub async fn spawn(responder: Responder) -> std::io::Result<Self> {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let app = router(responder);
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, handle })
    }

    /// Value for [`EndpointConfig::base_url`](crate::endpoint::EndpointConfig).
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

/// Which turn a request belongs to: 1 when it holds a single user message,
/// 2 once the first exchange is included.
pub fn turn_of(request: &ChatRequest) -> u8 {
    if request.messages.iter().filter(|m| m.role == "user").count() >= 2 {
        2
    } else {
        1
    }
}

/// The first image URL in the request, used to tell samples apart.
pub fn first_image(request: &ChatRequest) -> Option<&str> {
    request.messages.iter().flat_map(|m| m.image_urls()).next()
}
