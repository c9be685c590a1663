//! Bounded per-transport queues between listeners and the ingest pipeline.

use std::sync::Arc;

use blockiot_core::ingest::{Authenticated, IngestBatch, IngestError, IngestReceipt, Transport};
use blockiot_core::runtime::Node;
use serde_json::Value;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

struct Job {
    batch: IngestBatch,
    reply: oneshot::Sender<Result<IngestReceipt, IngestError>>,
}

/// Sending side of one transport's queue. A full queue rejects with a retryable error.
#[derive(Clone)]
pub struct Intake {
    transport: Transport,
    node: Arc<Node>,
    tx: mpsc::Sender<Job>,
}

impl Intake {
    /// Starts the worker that drains the queue. The worker exits once every
    /// `Intake` clone is dropped and the queue is empty.
    pub fn spawn(node: Arc<Node>, transport: Transport, depth: usize) -> (Intake, JoinHandle<()>) {
        let (tx, mut rx) = mpsc::channel::<Job>(depth);
        let worker_node = node.clone();
        let worker = tokio::spawn(async move {
            while let Some(Job { batch, reply }) = rx.recv().await {
                let node = worker_node.clone();
                let result = tokio::task::spawn_blocking(move || node.ingest(&batch))
                    .await
                    .unwrap_or_else(|e| Err(IngestError::Storage(format!("ingest task failed: {e}"))));
                let _ = reply.send(result);
            }
        });
        (Intake { transport, node, tx }, worker)
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub async fn submit(&self, sender: Authenticated, payloads: Vec<Value>) -> Result<IngestReceipt, IngestError> {
        let batch = IngestBatch::new(self.transport, sender, payloads, self.node.now())?;
        if !self.node.is_ready() {
            return Err(IngestError::Busy);
        }
        let (reply, rx) = oneshot::channel();
        self.tx.try_send(Job { batch, reply }).map_err(|_| IngestError::Busy)?;
        rx.await.unwrap_or(Err(IngestError::Busy))
    }
}

/// Accepts one payload object, a JSON array of payloads, or `{"payloads": [...]}`.
pub fn parse_payloads(body: &[u8]) -> Result<Vec<Value>, IngestError> {
    let v: Value = serde_json::from_slice(body).map_err(|e| IngestError::Malformed(format!("body is not JSON: {e}")))?;
    match v {
        Value::Array(items) => Ok(items),
        Value::Object(mut m) if m.len() == 1 && m.contains_key("payloads") => match m.remove("payloads") {
            Some(Value::Array(items)) => Ok(items),
            _ => Err(IngestError::Malformed("`payloads` must be an array".into())),
        },
        Value::Object(m) => Ok(vec![Value::Object(m)]),
        _ => Err(IngestError::Malformed("expected a payload object or an array of payloads".into())),
    }
}
