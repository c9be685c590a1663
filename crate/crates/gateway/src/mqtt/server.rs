use std::time::Duration;

use blockiot_core::ingest::{check_route, Authenticated, Credentials, IngestError};
use bytes::BytesMut;
use mqttbytes::v4::{ConnAck, ConnectReturnCode, Packet, PubAck, Publish, SubAck, SubscribeReasonCode, UnsubAck};
use mqttbytes::QoS;
use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::watch;
use tokio::task::JoinSet;

use super::wire::{encode, read_packet, WireError};
use super::{filter_matches, parse_obs_topic, receipt_topic};
use crate::intake::{parse_payloads, Intake};
use crate::reply::{to_reply, Reply};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

pub(crate) async fn serve(listener: TcpListener, intake: Intake, max_packet: usize, mut shutdown: watch::Receiver<bool>) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let intake = intake.clone();
                    let shutdown = shutdown.clone();
                    conns.spawn(async move {
                        if let Err(e) = connection(stream, intake, max_packet, shutdown).await {
                            tracing::debug!(%peer, error = %e, "mqtt connection closed");
                        }
                    });
                }
                Err(e) => tracing::warn!(error = %e, "mqtt accept failed"),
            },
            _ = shutdown.changed() => break,
        }
        while conns.try_join_next().is_some() {}
    }
    drop(listener);
    while conns.join_next().await.is_some() {}
}

async fn send(w: &mut OwnedWriteHalf, p: &Packet) -> Result<(), WireError> {
    w.write_all(&encode(p)?).await?;
    Ok(())
}

async fn connection(
    stream: TcpStream,
    intake: Intake,
    max_packet: usize,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), WireError> {
    stream.set_nodelay(true)?;
    let (mut rd, mut wr) = stream.into_split();
    let mut buf = BytesMut::with_capacity(4096);
    let connect = match tokio::time::timeout(CONNECT_TIMEOUT, read_packet(&mut rd, &mut buf, max_packet)).await {
        Ok(Ok(Packet::Connect(c))) => c,
        Ok(Ok(_)) | Err(_) => return Ok(()),
        Ok(Err(e)) => return Err(e),
    };
    let node = intake.node().clone();
    let sender: Authenticated = match connect.login {
        Some(login) => {
            let creds = Credentials::UserPassword { username: login.username, password: login.password };
            match node.registrations().authenticate(&creds, node.now()) {
                Ok(a) if a.device().is_some() => a,
                Ok(_) => {
                    send(&mut wr, &Packet::ConnAck(ConnAck::new(ConnectReturnCode::NotAuthorized, false))).await?;
                    return Ok(());
                }
                Err(_) => {
                    send(&mut wr, &Packet::ConnAck(ConnAck::new(ConnectReturnCode::BadUserNamePassword, false)))
                        .await?;
                    return Ok(());
                }
            }
        }
        None => {
            send(&mut wr, &Packet::ConnAck(ConnAck::new(ConnectReturnCode::NotAuthorized, false))).await?;
            return Ok(());
        }
    };
    send(&mut wr, &Packet::ConnAck(ConnAck::new(ConnectReturnCode::Success, false))).await?;
    let binding = sender.device().expect("checked above").clone();
    let own_prefix = format!("{}/{}/{}/", super::TOPIC_ROOT, binding.patient_id, binding.device_id);
    let keep_alive = match connect.keep_alive {
        0 => Duration::from_secs(24 * 3600),
        s => Duration::from_millis(u64::from(s) * 1500),
    };
    let mut subscriptions: Vec<String> = Vec::new();

    loop {
        let packet = tokio::select! {
            p = tokio::time::timeout(keep_alive, read_packet(&mut rd, &mut buf, max_packet)) => match p {
                Ok(Ok(p)) => p,
                Ok(Err(WireError::Closed)) | Err(_) => return Ok(()),
                Ok(Err(e)) => return Err(e),
            },
            _ = shutdown.changed() => return Ok(()),
        };
        match packet {
            Packet::Publish(p) => {
                if p.qos == QoS::ExactlyOnce {
                    return Ok(());
                }
                let result = handle_publish(&intake, &sender, &p).await;
                let retry = matches!(&result, Err(e) if e.is_retryable());
                let reply = to_reply(result);
                if let Some((pid, did)) = parse_obs_topic(&p.topic) {
                    let topic = receipt_topic(pid, did);
                    if topic.starts_with(&own_prefix) && subscriptions.iter().any(|f| filter_matches(f, &topic)) {
                        let body = serde_json::to_vec(&reply).expect("reply serializes");
                        send(&mut wr, &Packet::Publish(Publish::new(topic, QoS::AtMostOnce, body))).await?;
                    }
                }
                // Withholding the ack on retryable failures makes the sender redeliver.
                if p.qos == QoS::AtLeastOnce && !retry {
                    send(&mut wr, &Packet::PubAck(PubAck::new(p.pkid))).await?;
                }
                if let Reply::Error(e) = &reply {
                    tracing::debug!(topic = %p.topic, error = %e.error, "mqtt publish rejected");
                }
            }
            Packet::Subscribe(s) => {
                let codes = s
                    .filters
                    .iter()
                    .map(|f| {
                        // Devices may only listen on their own topics.
                        if f.path.starts_with(&own_prefix) && !f.path.contains("/obs") {
                            subscriptions.push(f.path.clone());
                            SubscribeReasonCode::Success(QoS::AtMostOnce)
                        } else {
                            SubscribeReasonCode::Failure
                        }
                    })
                    .collect();
                send(&mut wr, &Packet::SubAck(SubAck::new(s.pkid, codes))).await?;
            }
            Packet::Unsubscribe(u) => {
                subscriptions.retain(|f| !u.topics.contains(f));
                send(&mut wr, &Packet::UnsubAck(UnsubAck::new(u.pkid))).await?;
            }
            Packet::PingReq => send(&mut wr, &Packet::PingResp).await?,
            Packet::Disconnect | Packet::Connect(_) => return Ok(()),
            _ => {}
        }
    }
}

async fn handle_publish(intake: &Intake, sender: &Authenticated, p: &Publish) -> Result<blockiot_core::ingest::IngestReceipt, IngestError> {
    let (pid, did) = parse_obs_topic(&p.topic)
        .ok_or_else(|| IngestError::Malformed(format!("topic {:?} is not blockiot/<patient>/<device>/obs", p.topic)))?;
    check_route(sender, pid, did)?;
    let payloads = parse_payloads(&p.payload)?;
    intake.submit(sender.clone(), payloads).await
}
