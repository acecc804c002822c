use std::sync::Arc;

use serde::Deserialize;
use serde_json::json;

use super::{EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::transport::{HttpRequest, Transport};

/// HTTP embedding service speaking `{"texts": [...]}` -> `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    provider_id: String,
    endpoint: String,
    api_key: Option<String>,
    batch_size: usize,
    transport: Arc<dyn Transport>,
}

#[derive(Deserialize)]
struct VectorsResponse {
    vectors: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(
        provider_id: impl Into<String>,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        batch_size: usize,
        transport: Arc<dyn Transport>,
    ) -> Self {
        Self {
            provider_id: provider_id.into(),
            endpoint: endpoint.into(),
            api_key,
            batch_size: batch_size.max(1),
            transport,
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            let request = HttpRequest {
                url: self.endpoint.clone(),
                bearer: self.api_key.clone(),
                body: json!({ "texts": chunk }),
            };
            let response = self
                .transport
                .post_json(&request)
                .map_err(|e| EmbeddingError::ProviderUnavailable(e.to_string()))?;
            if !(200..300).contains(&response.status) {
                return Err(EmbeddingError::ProviderUnavailable(format!(
                    "status {}: {}",
                    response.status, response.body
                )));
            }
            let parsed: VectorsResponse =
                serde_json::from_str(&response.body).map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
            if parsed.vectors.len() != chunk.len() {
                return Err(EmbeddingError::InvalidResponse(format!(
                    "{} vectors for {} texts",
                    parsed.vectors.len(),
                    chunk.len()
                )));
            }
            for values in parsed.vectors {
                if values.is_empty() || values.iter().all(|v| *v == 0.0) {
                    return Err(EmbeddingError::ZeroVector);
                }
                out.push(EmbeddingVector::new(values, self.provider_id.clone()));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{HttpResponse, OfflineTransport, TransportError};
    use std::sync::Mutex;

    struct Echo {
        requests: Mutex<Vec<serde_json::Value>>,
    }

    impl Transport for Echo {
        fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
            self.requests.lock().unwrap().push(request.body.clone());
            let n = request.body["texts"].as_array().unwrap().len();
            let vectors: Vec<Vec<f64>> = (0..n).map(|i| vec![1.0, i as f64]).collect();
            Ok(HttpResponse { status: 200, body: json!({ "vectors": vectors }).to_string() })
        }
    }

    #[test]
    fn batches_requests() {
        let echo = Arc::new(Echo { requests: Mutex::new(Vec::new()) });
        let p = RemoteEmbedder::new("clin", "http://x/embed", None, 2, echo.clone());
        let texts: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let out = p.embed_batch(&texts).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[2].values, vec![1.0, 0.0]);
        assert_eq!(echo.requests.lock().unwrap().len(), 2);
        assert_eq!(out[0].provider_id, "clin");
    }

    #[test]
    fn offline_transport_is_unavailable() {
        let p = RemoteEmbedder::new("clin", "http://x/embed", None, 8, Arc::new(OfflineTransport::new()));
        assert!(matches!(p.embed_batch(&["a".into()]), Err(EmbeddingError::ProviderUnavailable(_))));
    }
}
