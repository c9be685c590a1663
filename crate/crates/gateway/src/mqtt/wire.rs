//! Framing helpers over the `mqttbytes` packet codec.

use bytes::BytesMut;
use mqttbytes::v4::{self, Packet};
use tokio::io::{AsyncRead, AsyncReadExt};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0:?}")]
    Protocol(mqttbytes::Error),
}

/// Reads the next complete packet, buffering partial frames in `buf`.
pub async fn read_packet<R: AsyncRead + Unpin>(r: &mut R, buf: &mut BytesMut, max: usize) -> Result<Packet, WireError> {
    loop {
        match v4::read(buf, max) {
            Ok(p) => return Ok(p),
            Err(mqttbytes::Error::InsufficientBytes(_)) => {}
            Err(e) => return Err(WireError::Protocol(e)),
        }
        buf.reserve(4096);
        if r.read_buf(buf).await? == 0 {
            return Err(WireError::Closed);
        }
    }
}

pub fn encode(p: &Packet) -> Result<BytesMut, WireError> {
    let mut b = BytesMut::new();
    let r = match p {
        Packet::Connect(x) => x.write(&mut b),
        Packet::ConnAck(x) => x.write(&mut b),
        Packet::Publish(x) => x.write(&mut b),
        Packet::PubAck(x) => x.write(&mut b),
        Packet::Subscribe(x) => x.write(&mut b),
        Packet::SubAck(x) => x.write(&mut b),
        Packet::Unsubscribe(x) => x.write(&mut b),
        Packet::UnsubAck(x) => x.write(&mut b),
        Packet::PingReq => v4::PingReq.write(&mut b),
        Packet::PingResp => v4::PingResp.write(&mut b),
        Packet::Disconnect => v4::Disconnect.write(&mut b),
        Packet::PubRec(x) => x.write(&mut b),
        Packet::PubRel(x) => x.write(&mut b),
        Packet::PubComp(x) => x.write(&mut b),
    };
    r.map_err(WireError::Protocol)?;
    Ok(b)
}
