use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use blockiot_core::ingest::{check_route, Credentials, IngestError};
use coap_lite::{ContentFormat, MessageClass, MessageType, Packet, RequestType};
use tokio::net::UdpSocket;
use tokio::sync::{oneshot, watch};
use tokio::task::JoinSet;

use super::*;
use crate::intake::{parse_payloads, Intake};
use crate::reply::{error_body, to_reply, ErrorBody, Reply};

enum Exchange {
    InProgress(Instant),
    Done(Instant, Vec<u8>),
}

impl Exchange {
    fn started(&self) -> Instant {
        match self {
            Exchange::InProgress(t) | Exchange::Done(t, _) => *t,
        }
    }
}

#[derive(Default)]
struct Shared {
    exchanges: HashMap<(SocketAddr, u16), Exchange>,
    /// Separate responses waiting for the client's empty ACK.
    awaiting_ack: HashMap<(SocketAddr, u16), oneshot::Sender<()>>,
    next_mid: u16,
}

pub(crate) async fn serve(socket: UdpSocket, intake: Intake, max_payload: usize, mut shutdown: watch::Receiver<bool>) {
    let socket = Arc::new(socket);
    let shared = Arc::new(Mutex::new(Shared { next_mid: rand::random(), ..Shared::default() }));
    let mut tasks = JoinSet::new();
    let mut buf = vec![0u8; 65_536];
    loop {
        let (n, peer) = tokio::select! {
            r = socket.recv_from(&mut buf) => match r {
                Ok(v) => v,
                Err(e) => {
                    tracing::warn!(error = %e, "coap receive failed");
                    continue;
                }
            },
            _ = shutdown.changed() => break,
        };
        while tasks.try_join_next().is_some() {}
        let Ok(packet) = Packet::from_bytes(&buf[..n]) else {
            continue;
        };
        match (packet.header.get_type(), packet.header.code) {
            (MessageType::Acknowledgement | MessageType::Reset, _) => settle(&shared, peer, &packet),
            (MessageType::Confirmable, MessageClass::Empty) => {
                // CoAP ping.
                let _ = socket.send_to(&reset_for(&packet), peer).await;
            }
            (t, MessageClass::Request(_)) => {
                let key = (peer, packet.header.message_id);
                if t == MessageType::Confirmable {
                    let cached = {
                        let mut s = shared.lock().expect("coap state");
                        let now = Instant::now();
                        let lifetime = Duration::from_millis(EXCHANGE_LIFETIME_MS);
                        s.exchanges.retain(|_, e| now.duration_since(e.started()) < lifetime);
                        match s.exchanges.get(&key) {
                            Some(Exchange::Done(_, bytes)) => Some(Some(bytes.clone())),
                            Some(Exchange::InProgress(_)) => Some(None),
                            None => {
                                s.exchanges.insert(key, Exchange::InProgress(now));
                                None
                            }
                        }
                    };
                    match cached {
                        Some(Some(bytes)) => {
                            let _ = socket.send_to(&bytes, peer).await;
                            continue;
                        }
                        Some(None) => continue,
                        None => {}
                    }
                }
                let (socket, shared, intake) = (socket.clone(), shared.clone(), intake.clone());
                tasks.spawn(async move {
                    let confirmable = t == MessageType::Confirmable;
                    let (status, body) = handle(&intake, &packet, max_payload).await;
                    respond(&socket, &shared, peer, &packet, confirmable, status, body).await;
                });
            }
            _ => {}
        }
    }
    // Separate responses may still be waiting for their ACKs.
    let deadline = tokio::time::sleep(Duration::from_secs(5));
    tokio::pin!(deadline);
    while !tasks.is_empty() {
        tokio::select! {
            _ = tasks.join_next() => {}
            r = socket.recv_from(&mut buf) => {
                if let Ok((n, peer)) = r {
                    if let Ok(p) = Packet::from_bytes(&buf[..n]) {
                        if matches!(p.header.get_type(), MessageType::Acknowledgement | MessageType::Reset) {
                            settle(&shared, peer, &p);
                        }
                    }
                }
            }
            _ = &mut deadline => {
                tasks.abort_all();
                break;
            }
        }
    }
}

fn settle(shared: &Mutex<Shared>, peer: SocketAddr, p: &Packet) {
    if let Some(tx) = shared.lock().expect("coap state").awaiting_ack.remove(&(peer, p.header.message_id)) {
        let _ = tx.send(());
    }
}

fn reset_for(p: &Packet) -> Vec<u8> {
    let mut r = Packet::new();
    r.header.set_type(MessageType::Reset);
    r.header.code = MessageClass::Empty;
    r.header.message_id = p.header.message_id;
    r.to_bytes_unlimited().unwrap_or_default()
}

fn err(status: u16, msg: &str) -> (u16, Vec<u8>) {
    let body = ErrorBody { error: msg.to_string(), status, retryable: false };
    (status, serde_json::to_vec(&Reply::Error(body)).expect("reply serializes"))
}

async fn handle(intake: &Intake, req: &Packet, max_payload: usize) -> (u16, Vec<u8>) {
    let path = uri_path(req);
    let [obs, pid, did] = path.as_slice() else {
        return err(404, "expected /obs/{patient}/{device}");
    };
    if obs != "obs" {
        return err(404, "expected /obs/{patient}/{device}");
    }
    if req.header.code != MessageClass::Request(RequestType::Post) {
        return err(405, "only POST is accepted");
    }
    if let Some(cf) = req.get_content_format() {
        if cf != ContentFormat::ApplicationJSON {
            return err(415, "payload must be application/json");
        }
    }
    let result = async {
        let node = intake.node();
        let psk = query_param(req, "psk").ok_or_else(|| {
            IngestError::Unauthenticated(blockiot_core::ingest::AuthError::Unknown)
        })?;
        let sender = node.registrations().authenticate(&Credentials::PskId(psk), node.now())?;
        check_route(&sender, pid, did)?;
        if req.payload.len() > max_payload {
            return Err(IngestError::TooLarge { size: req.payload.len(), max: max_payload });
        }
        if req.payload.is_empty() {
            return Err(route_error("empty payload"));
        }
        let payloads = parse_payloads(&req.payload)?;
        intake.submit(sender, payloads).await
    }
    .await;
    let status = match &result {
        Ok(_) => 201,
        Err(e) => error_body(e).status,
    };
    (status, serde_json::to_vec(&to_reply(result)).expect("reply serializes"))
}

async fn respond(
    socket: &UdpSocket,
    shared: &Mutex<Shared>,
    peer: SocketAddr,
    req: &Packet,
    confirmable: bool,
    status: u16,
    body: Vec<u8>,
) {
    let mut resp = Packet::new();
    resp.header.code = MessageClass::Response(response_type(status));
    resp.set_token(req.get_token().to_vec());
    resp.set_content_format(ContentFormat::ApplicationJSON);
    resp.payload = body;
    let key = (peer, req.header.message_id);

    if !confirmable {
        resp.header.set_type(MessageType::NonConfirmable);
        resp.header.message_id = next_mid(shared);
        if let Ok(bytes) = resp.to_bytes_unlimited() {
            let _ = socket.send_to(&bytes, peer).await;
        }
        return;
    }

    if resp.payload.len() <= PIGGYBACK_LIMIT {
        resp.header.set_type(MessageType::Acknowledgement);
        resp.header.message_id = req.header.message_id;
        let bytes = resp.to_bytes_unlimited().unwrap_or_default();
        shared.lock().expect("coap state").exchanges.insert(key, Exchange::Done(Instant::now(), bytes.clone()));
        let _ = socket.send_to(&bytes, peer).await;
        return;
    }

    let mut ack = Packet::new();
    ack.header.set_type(MessageType::Acknowledgement);
    ack.header.code = MessageClass::Empty;
    ack.header.message_id = req.header.message_id;
    let ack_bytes = ack.to_bytes_unlimited().unwrap_or_default();
    shared.lock().expect("coap state").exchanges.insert(key, Exchange::Done(Instant::now(), ack_bytes.clone()));
    let _ = socket.send_to(&ack_bytes, peer).await;

    resp.header.set_type(MessageType::Confirmable);
    let mid = next_mid(shared);
    resp.header.message_id = mid;
    let Ok(bytes) = resp.to_bytes_unlimited() else {
        return;
    };
    let mut timeout = Duration::from_millis(ACK_TIMEOUT_MS);
    for _ in 0..=MAX_RETRANSMIT {
        let (tx, rx) = oneshot::channel();
        shared.lock().expect("coap state").awaiting_ack.insert((peer, mid), tx);
        if socket.send_to(&bytes, peer).await.is_err() {
            break;
        }
        if let Ok(Ok(())) = tokio::time::timeout(timeout, rx).await {
            return;
        }
        timeout *= 2;
    }
    shared.lock().expect("coap state").awaiting_ack.remove(&(peer, mid));
    tracing::debug!(%peer, "separate coap response was never acknowledged");
}

fn next_mid(shared: &Mutex<Shared>) -> u16 {
    let mut s = shared.lock().expect("coap state");
    s.next_mid = s.next_mid.wrapping_add(1);
    s.next_mid
}
