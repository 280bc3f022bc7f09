use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::{
    decode_request, decode_response, encode_request, encode_response, DraftRequest, DraftResponse,
    DraftService, ProtocolError, ServerMeta,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    /// The service answered with an error.
    #[error(transparent)]
    Remote(#[from] ProtocolError),
    /// No usable answer after the retry budget was spent.
    #[error("draft service unreachable after {attempts} attempt(s): {detail}")]
    Unreachable { attempts: usize, detail: String },
    #[error("undecodable response: {0}")]
    Codec(String),
}

/// Client-side stub for the draft service.
pub trait DraftTransport: Send + Sync {
    fn meta(&self) -> Result<ServerMeta, TransportError>;

    fn request_draft(&self, request: &DraftRequest) -> Result<DraftResponse, TransportError>;
}

impl<T: DraftTransport + ?Sized> DraftTransport for Arc<T> {
    fn meta(&self) -> Result<ServerMeta, TransportError> {
        (**self).meta()
    }
    fn request_draft(&self, request: &DraftRequest) -> Result<DraftResponse, TransportError> {
        (**self).request_draft(request)
    }
}

/// Calls the service in-process, still passing through the wire encoding so
/// it observes exactly what an HTTP server would.
#[derive(Clone)]
pub struct InProcessTransport {
    service: Arc<DraftService>,
}

impl InProcessTransport {
    pub fn new(service: Arc<DraftService>) -> Self {
        Self { service }
    }
}

impl DraftTransport for InProcessTransport {
    fn meta(&self) -> Result<ServerMeta, TransportError> {
        Ok(self.service.meta())
    }

    fn request_draft(&self, request: &DraftRequest) -> Result<DraftResponse, TransportError> {
        let wire = encode_request(request);
        let received = decode_request(&wire)?;
        let response = self.service.serve(&received)?;
        decode_response(&encode_response(&response)).map_err(|e| TransportError::Codec(e.to_string()))
    }
}

/// Records the exact request bytes passed to the inner transport.
pub struct TappedTransport<T> {
    inner: T,
    tap: Mutex<Vec<Vec<u8>>>,
}

impl<T: DraftTransport> TappedTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            tap: Mutex::new(Vec::new()),
        }
    }

    pub fn captured(&self) -> Vec<Vec<u8>> {
        self.tap.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn take_captured(&self) -> Vec<Vec<u8>> {
        std::mem::take(&mut *self.tap.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

impl<T: DraftTransport> DraftTransport for TappedTransport<T> {
    fn meta(&self) -> Result<ServerMeta, TransportError> {
        self.inner.meta()
    }

    fn request_draft(&self, request: &DraftRequest) -> Result<DraftResponse, TransportError> {
        self.tap
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(encode_request(request));
        self.inner.request_draft(request)
    }
}
