use std::io;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt, ReadHalf, WriteHalf};
use tokio::net::TcpStream;

use super::{DecodeError, Decoded, FrameDecoder, RawFrame};
use crate::model::ProtocolId;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("frame kind {frame} sent on a {endpoint} endpoint")]
    KindMismatch { endpoint: ProtocolId, frame: ProtocolId },
    #[error("link closed")]
    LinkClosed,
    #[error("malformed frame discarded: {0}")]
    Decode(DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

trait Stream: AsyncRead + AsyncWrite + Send + Unpin {}
impl<T: AsyncRead + AsyncWrite + Send + Unpin> Stream for T {}

type BoxStream = Box<dyn Stream>;

/// Receiving half of a link: reassembles frames from the byte stream.
pub struct LinkReader {
    kind: ProtocolId,
    io: ReadHalf<BoxStream>,
    decoder: FrameDecoder,
    closed: bool,
}

/// Sending half of a link.
pub struct LinkWriter {
    kind: ProtocolId,
    io: WriteHalf<BoxStream>,
    closed: bool,
}

/// One end of an ordered, lossless byte stream carrying frames of a single
/// transport kind.
pub struct LinkEndpoint {
    peer: String,
    reader: LinkReader,
    writer: LinkWriter,
}

impl LinkEndpoint {
    pub fn new<S>(kind: ProtocolId, peer: impl Into<String>, stream: S) -> Self
    where
        S: AsyncRead + AsyncWrite + Send + Unpin + 'static,
    {
        let boxed: BoxStream = Box::new(stream);
        let (rd, wr) = tokio::io::split(boxed);
        Self {
            peer: peer.into(),
            reader: LinkReader { kind, io: rd, decoder: FrameDecoder::new(kind), closed: false },
            writer: LinkWriter { kind, io: wr, closed: false },
        }
    }

    pub fn kind(&self) -> ProtocolId {
        self.reader.kind
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub async fn send(&mut self, frame: &RawFrame) -> Result<usize, LinkError> {
        self.writer.send(frame).await
    }

    pub async fn recv(&mut self) -> Result<(RawFrame, usize), LinkError> {
        self.reader.recv().await
    }

    pub fn split(self) -> (LinkReader, LinkWriter) {
        (self.reader, self.writer)
    }
}

impl LinkWriter {
    pub fn kind(&self) -> ProtocolId {
        self.kind
    }

    /// Writes the encoded frame; returns the number of bytes put on the wire.
    pub async fn send(&mut self, frame: &RawFrame) -> Result<usize, LinkError> {
        if frame.kind() != self.kind {
            return Err(LinkError::KindMismatch { endpoint: self.kind, frame: frame.kind() });
        }
        if self.closed {
            return Err(LinkError::LinkClosed);
        }
        let wire = frame.encode();
        let res = async {
            self.io.write_all(&wire).await?;
            self.io.flush().await
        }
        .await;
        match res {
            Ok(()) => Ok(wire.len()),
            Err(e) if is_disconnect(&e) => {
                self.closed = true;
                Err(LinkError::LinkClosed)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub async fn close(&mut self) {
        self.closed = true;
        let _ = self.io.shutdown().await;
    }
}

impl LinkReader {
    pub fn kind(&self) -> ProtocolId {
        self.kind
    }

    /// Waits for the next complete frame and returns it with its wire size.
    /// A malformed frame is discarded and reported as `LinkError::Decode`;
    /// the link stays usable afterwards.
    pub async fn recv(&mut self) -> Result<(RawFrame, usize), LinkError> {
        let mut chunk = [0u8; 4096];
        loop {
            match self.decoder.next_frame() {
                Some(Decoded::Frame(frame, used)) => return Ok((frame, used)),
                Some(Decoded::Error(e)) => return Err(LinkError::Decode(e)),
                None => {}
            }
            if self.closed {
                return Err(LinkError::LinkClosed);
            }
            let n = match self.io.read(&mut chunk).await {
                Ok(n) => n,
                Err(e) if is_disconnect(&e) => 0,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                self.closed = true;
                return Err(LinkError::LinkClosed);
            }
            self.decoder.push(&chunk[..n]);
        }
    }
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected
            | io::ErrorKind::UnexpectedEof
    )
}

/// Opens a TCP link to a gateway transport listener.
pub async fn connect_link(kind: ProtocolId, addr: &str) -> io::Result<LinkEndpoint> {
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    Ok(LinkEndpoint::new(kind, addr, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(kind: ProtocolId) -> (LinkEndpoint, LinkEndpoint) {
        let (a, b) = tokio::io::duplex(1024);
        (LinkEndpoint::new(kind, "a", a), LinkEndpoint::new(kind, "b", b))
    }

    #[tokio::test]
    async fn frames_arrive_in_order() {
        for kind in ProtocolId::ALL {
            let (mut tx, mut rx) = pair(kind);
            let f1 = RawFrame::new(kind, b"first".to_vec()).unwrap();
            let f2 = RawFrame::new(kind, vec![0xC0, 0x7E, 0xDB]).unwrap();
            tx.send(&f1).await.unwrap();
            tx.send(&f2).await.unwrap();
            assert_eq!(rx.recv().await.unwrap().0, f1);
            assert_eq!(rx.recv().await.unwrap().0, f2);
        }
    }

    #[tokio::test]
    async fn kind_mismatch_is_rejected() {
        let (mut tx, _rx) = pair(ProtocolId::Zigbee);
        let f = RawFrame::new(ProtocolId::Wifi, b"x".to_vec()).unwrap();
        assert!(matches!(
            tx.send(&f).await,
            Err(LinkError::KindMismatch { endpoint: ProtocolId::Zigbee, frame: ProtocolId::Wifi })
        ));
    }

    #[tokio::test]
    async fn recv_after_close_reports_closed() {
        let (tx, mut rx) = pair(ProtocolId::Wifi);
        drop(tx);
        assert!(matches!(rx.recv().await, Err(LinkError::LinkClosed)));
        assert!(matches!(rx.recv().await, Err(LinkError::LinkClosed)));
    }

    #[tokio::test]
    async fn wire_size_is_reported() {
        let (mut tx, mut rx) = pair(ProtocolId::Zigbee);
        let f = RawFrame::new(ProtocolId::Zigbee, b"abcd".to_vec()).unwrap();
        assert_eq!(tx.send(&f).await.unwrap(), 8);
        assert_eq!(rx.recv().await.unwrap().1, 8);
    }

    #[tokio::test]
    async fn corrupt_frame_is_skipped() {
        let (a, b) = tokio::io::duplex(1024);
        let mut raw = a;
        let mut rx = LinkEndpoint::new(ProtocolId::Bluetooth, "b", b);
        raw.write_all(&[0xC0, 1, 0xDB, 0x00, 0xC0]).await.unwrap();
        raw.write_all(&crate::transport::bt_encode(b"ok").unwrap()).await.unwrap();
        assert!(matches!(rx.recv().await, Err(LinkError::Decode(DecodeError::BadEscape { .. }))));
        assert_eq!(rx.recv().await.unwrap().0.payload(), b"ok");
    }
}
