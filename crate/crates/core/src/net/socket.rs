use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::{NetError, Transport, TransportEvent};

/// TCP stream carrying one frame per line. A reader thread feeds a channel
/// so at most one event is handed out at a time.
#[derive(Debug)]
pub struct SocketEndpoint {
    stream: TcpStream,
    rx: Receiver<TransportEvent>,
    connected: Arc<AtomicBool>,
}

impl SocketEndpoint {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, NetError> {
        Self::from_stream(TcpStream::connect(addr)?)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, NetError> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let connected = Arc::new(AtomicBool::new(true));
        let flag = connected.clone();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut lines = BufReader::new(reader);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                match lines.read_until(b'\n', &mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {
                        if buf.last() == Some(&b'\n') {
                            buf.pop();
                        }
                        if buf.is_empty() {
                            continue;
                        }
                        if tx.send(TransportEvent::Message(buf.clone())).is_err() {
                            return;
                        }
                    }
                }
            }
            flag.store(false, Ordering::SeqCst);
            let _ = tx.send(TransportEvent::Disconnected);
        });
        Ok(Self { stream, rx, connected })
    }

    pub fn peer_addr(&self) -> Option<std::net::SocketAddr> {
        self.stream.peer_addr().ok()
    }

    /// Blocks up to `timeout` for the next event.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<TransportEvent> {
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn close(&mut self) {
        self.connected.store(false, Ordering::SeqCst);
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    /// Independent write handle onto the same stream.
    pub fn writer(&self) -> Result<TcpStream, NetError> {
        Ok(self.stream.try_clone()?)
    }
}

/// Writes one frame followed by the line terminator.
pub(crate) fn write_frame(stream: &mut TcpStream, frame: &[u8]) -> std::io::Result<()> {
    let mut line = Vec::with_capacity(frame.len() + 1);
    line.extend_from_slice(frame);
    line.push(b'\n');
    stream.write_all(&line)
}

impl Transport for SocketEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), NetError> {
        if !self.connected.load(Ordering::SeqCst) {
            return Err(NetError::Disconnected);
        }
        write_frame(&mut self.stream, frame).map_err(|e| {
            self.connected.store(false, Ordering::SeqCst);
            NetError::Io(e)
        })
    }

    fn try_recv(&mut self) -> Option<TransportEvent> {
        self.rx.try_recv().ok()
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }
}

/// Connected pair over a real loopback socket bound at `bind`.
pub fn loopback_socket_link<A: ToSocketAddrs>(bind: A) -> Result<(SocketEndpoint, SocketEndpoint), NetError> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let client = TcpStream::connect(addr)?;
    let (server, _) = listener.accept()?;
    Ok((SocketEndpoint::from_stream(server)?, SocketEndpoint::from_stream(client)?))
}
