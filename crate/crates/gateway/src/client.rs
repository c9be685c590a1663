//! Device-side senders for the three transports, used by the simulator and tests.

use std::net::SocketAddr;
use std::time::Duration;

use bytes::BytesMut;
use coap_lite::{CoapOption, ContentFormat, MessageClass, MessageType, Packet, RequestType};
use mqttbytes::v4::{Connect, ConnectReturnCode, Packet as MqttPacket, Publish, Subscribe};
use mqttbytes::QoS;
use serde_json::Value;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpStream, UdpSocket};

use crate::coap::{self, status_of, ACK_TIMEOUT_MS, MAX_RETRANSMIT};
use crate::mqtt::wire::{encode, read_packet, WireError};
use crate::mqtt::{obs_topic, receipt_topic};
use crate::reply::{ErrorBody, Reply};

const MQTT_MAX_PACKET: usize = 4 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("http: {0}")]
    Http(#[from] reqwest::Error),
    #[error("timed out waiting for the gateway")]
    Timeout,
    #[error("connection refused by gateway: {0}")]
    Refused(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<WireError> for ClientError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Io(e) => ClientError::Io(e),
            e => ClientError::Protocol(e.to_string()),
        }
    }
}

fn parse_reply(status: u16, body: &[u8]) -> Reply {
    match serde_json::from_slice::<Reply>(body) {
        Ok(r) => r,
        Err(_) => Reply::Error(ErrorBody {
            error: String::from_utf8_lossy(body).into_owned(),
            status,
            retryable: status == 503,
        }),
    }
}

fn payload_body(payloads: &[Value]) -> Vec<u8> {
    serde_json::to_vec(payloads).expect("json values serialize")
}

pub struct HttpSender {
    client: reqwest::Client,
    url: String,
    token: String,
}

impl HttpSender {
    /// `base` is the gateway root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: &str, token: &str) -> Self {
        HttpSender {
            client: reqwest::Client::new(),
            url: format!("{}/ingest/observations", base.trim_end_matches('/')),
            token: token.to_string(),
        }
    }

    pub async fn send(&self, payloads: &[Value]) -> Result<Reply, ClientError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.token)
            .header("content-type", "application/json")
            .body(payload_body(payloads))
            .send()
            .await?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await?;
        Ok(parse_reply(status, &body))
    }
}

/// One persistent MQTT session for one device.
pub struct MqttSender {
    rd: OwnedReadHalf,
    wr: OwnedWriteHalf,
    buf: BytesMut,
    topic: String,
    receipts: String,
    next_pkid: u16,
    timeout: Duration,
}

impl MqttSender {
    pub async fn connect(
        addr: SocketAddr,
        username: &str,
        password: &str,
        patient_id: &str,
        device_id: &str,
    ) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        let mut s = MqttSender {
            rd,
            wr,
            buf: BytesMut::with_capacity(4096),
            topic: obs_topic(patient_id, device_id),
            receipts: receipt_topic(patient_id, device_id),
            next_pkid: 0,
            timeout: Duration::from_secs(30),
        };
        let mut connect = Connect::new(format!("{patient_id}-{device_id}"));
        connect.keep_alive = 60;
        connect.set_login(username, password);
        s.write(&MqttPacket::Connect(connect)).await?;
        match s.read().await? {
            MqttPacket::ConnAck(a) if a.code == ConnectReturnCode::Success => {}
            MqttPacket::ConnAck(a) => return Err(ClientError::Refused(format!("{:?}", a.code))),
            p => return Err(ClientError::Protocol(format!("expected CONNACK, got {p:?}"))),
        }
        let mut sub = Subscribe::new(s.receipts.clone(), QoS::AtMostOnce);
        sub.pkid = s.pkid();
        s.write(&MqttPacket::Subscribe(sub)).await?;
        match s.read().await? {
            MqttPacket::SubAck(_) => {}
            p => return Err(ClientError::Protocol(format!("expected SUBACK, got {p:?}"))),
        }
        Ok(s)
    }

    fn pkid(&mut self) -> u16 {
        self.next_pkid = self.next_pkid % u16::MAX + 1;
        self.next_pkid
    }

    async fn write(&mut self, p: &MqttPacket) -> Result<(), ClientError> {
        self.wr.write_all(&encode(p)?).await?;
        Ok(())
    }

    async fn read(&mut self) -> Result<MqttPacket, ClientError> {
        tokio::time::timeout(self.timeout, read_packet(&mut self.rd, &mut self.buf, MQTT_MAX_PACKET))
            .await
            .map_err(|_| ClientError::Timeout)?
            .map_err(Into::into)
    }

    /// Publishes at QoS 1 and waits for the receipt and, unless the gateway
    /// asked for a retry, the PUBACK.
    pub async fn send(&mut self, payloads: &[Value]) -> Result<Reply, ClientError> {
        self.publish_raw(&self.topic.clone(), payload_body(payloads)).await
    }

    /// Publishes to an arbitrary topic; exposed so tests can probe authorization.
    pub async fn publish_raw(&mut self, topic: &str, body: Vec<u8>) -> Result<Reply, ClientError> {
        let mut p = Publish::new(topic, QoS::AtLeastOnce, body);
        p.pkid = self.pkid();
        let pkid = p.pkid;
        self.write(&MqttPacket::Publish(p)).await?;
        let mut reply: Option<Reply> = None;
        let mut acked = false;
        let own_topic = topic == self.topic;
        loop {
            match self.read().await? {
                MqttPacket::Publish(r) if r.topic == self.receipts => {
                    let parsed = parse_reply(0, &r.payload);
                    if parsed.is_retryable() {
                        return Ok(parsed);
                    }
                    reply = Some(parsed);
                }
                MqttPacket::PubAck(a) if a.pkid == pkid => acked = true,
                _ => {}
            }
            // Receipts only flow for the device's own topic.
            if acked && (reply.is_some() || !own_topic) {
                return Ok(reply.unwrap_or_else(|| {
                    Reply::Error(ErrorBody { error: "no receipt for foreign topic".into(), status: 403, retryable: false })
                }));
            }
        }
    }

    pub async fn disconnect(mut self) -> Result<(), ClientError> {
        self.write(&MqttPacket::Disconnect).await
    }
}

pub struct CoapSender {
    socket: UdpSocket,
    psk_id: String,
    path: [String; 3],
    next_mid: u16,
    ack_timeout: Duration,
}

impl CoapSender {
    pub async fn connect(addr: SocketAddr, psk_id: &str, patient_id: &str, device_id: &str) -> Result<Self, ClientError> {
        let bind: SocketAddr = if addr.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
        let socket = UdpSocket::bind(bind).await?;
        socket.connect(addr).await?;
        Ok(CoapSender {
            socket,
            psk_id: psk_id.to_string(),
            path: coap::obs_path(patient_id, device_id),
            next_mid: rand::random(),
            ack_timeout: Duration::from_millis(ACK_TIMEOUT_MS),
        })
    }

    pub fn with_ack_timeout(mut self, t: Duration) -> Self {
        self.ack_timeout = t;
        self
    }

    pub async fn send(&mut self, payloads: &[Value]) -> Result<Reply, ClientError> {
        let path = self.path.clone();
        self.request(RequestType::Post, &path, payload_body(payloads)).await
    }

    /// Sends one confirmable request with retransmission and exponential back-off.
    pub async fn request(&mut self, method: RequestType, path: &[String], body: Vec<u8>) -> Result<Reply, ClientError> {
        self.next_mid = self.next_mid.wrapping_add(1);
        let mid = self.next_mid;
        let token: [u8; 4] = rand::random();
        let mut req = Packet::new();
        req.header.set_type(MessageType::Confirmable);
        req.header.code = MessageClass::Request(method);
        req.header.message_id = mid;
        req.set_token(token.to_vec());
        for seg in path {
            req.add_option(CoapOption::UriPath, seg.as_bytes().to_vec());
        }
        req.add_option(CoapOption::UriQuery, format!("psk={}", self.psk_id).into_bytes());
        req.set_content_format(ContentFormat::ApplicationJSON);
        req.payload = body;
        let bytes = req.to_bytes_unlimited().map_err(|e| ClientError::Protocol(e.to_string()))?;

        let mut buf = vec![0u8; 65_536];
        let mut timeout = self.ack_timeout;
        let mut acked = false;
        let mut attempts = 0;
        self.socket.send(&bytes).await?;
        loop {
            let n = match tokio::time::timeout(timeout, self.socket.recv(&mut buf)).await {
                Ok(r) => r?,
                Err(_) if acked => return Err(ClientError::Timeout),
                Err(_) => {
                    attempts += 1;
                    if attempts > MAX_RETRANSMIT {
                        return Err(ClientError::Timeout);
                    }
                    timeout *= 2;
                    self.socket.send(&bytes).await?;
                    continue;
                }
            };
            let Ok(resp) = Packet::from_bytes(&buf[..n]) else {
                continue;
            };
            match resp.header.get_type() {
                MessageType::Acknowledgement if resp.header.message_id == mid => {
                    if resp.header.code == MessageClass::Empty {
                        // Separate response follows.
                        acked = true;
                        timeout = Duration::from_millis(ACK_TIMEOUT_MS) * 16;
                        continue;
                    }
                    return Ok(parse_reply(status_of(resp.header.code), &resp.payload));
                }
                MessageType::Reset if resp.header.message_id == mid => {
                    return Err(ClientError::Refused("reset".into()));
                }
                MessageType::Confirmable | MessageType::NonConfirmable if resp.get_token() == token => {
                    if resp.header.get_type() == MessageType::Confirmable {
                        let mut ack = Packet::new();
                        ack.header.set_type(MessageType::Acknowledgement);
                        ack.header.code = MessageClass::Empty;
                        ack.header.message_id = resp.header.message_id;
                        let ack = ack.to_bytes_unlimited().map_err(|e| ClientError::Protocol(e.to_string()))?;
                        self.socket.send(&ack).await?;
                    }
                    return Ok(parse_reply(status_of(resp.header.code), &resp.payload));
                }
                _ => {}
            }
        }
    }
}

/// Any of the three senders behind one call.
pub enum DeviceSender {
    Http(HttpSender),
    Mqtt(Box<MqttSender>),
    Coap(CoapSender),
}

impl DeviceSender {
    pub async fn send(&mut self, payloads: &[Value]) -> Result<Reply, ClientError> {
        match self {
            DeviceSender::Http(s) => s.send(payloads).await,
            DeviceSender::Mqtt(s) => s.send(payloads).await,
            DeviceSender::Coap(s) => s.send(payloads).await,
        }
    }
}
