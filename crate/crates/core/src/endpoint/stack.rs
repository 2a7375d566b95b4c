use std::collections::{HashMap, HashSet};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use rand::Rng;

use super::{
    AppEvent, AppEventKind, EndpointError, HookContext, Instrumentation, ProcessId, ProcessRef, SocketId, SocketRef,
    SocketSide, SocketState,
};
use crate::netsim::{ConntrackView, Envelope, EventKind, NodeId, ProcessAction, Tick, World};
use crate::packet::{Packet, TcpFlags};

const EPHEMERAL_BASE: u16 = 49152;
const FIRST_PID: u32 = 1001;

#[derive(Debug, Clone, PartialEq)]
enum App {
    Plain,
    Listen(Accept),
    Request,
    Serve,
    ProxyFront { target: SocketAddr, back: Option<SocketId> },
    ProxyBack { front: SocketId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Accept {
    Plain,
    Serve,
    Proxy(SocketAddr),
}

#[derive(Debug, Clone)]
struct Process {
    info: ProcessRef,
    node: NodeId,
}

#[derive(Debug, Clone)]
struct Socket {
    owner: ProcessId,
    node: NodeId,
    local: SocketAddr,
    remote: Option<SocketAddr>,
    state: SocketState,
    side: SocketSide,
    snd_nxt: u32,
    rcv_nxt: u32,
    app: App,
    queued: Vec<Vec<u8>>,
    fin_sent: bool,
    fin_rcvd: bool,
    demuxed: bool,
    written: Vec<u8>,
    read: Vec<u8>,
}

pub(crate) struct Stack {
    processes: Vec<Process>,
    sockets: Vec<Socket>,
    conns: HashMap<(NodeId, SocketAddr, SocketAddr), SocketId>,
    listeners: HashMap<(NodeId, u16), Vec<SocketId>>,
    ports_in_use: HashSet<(NodeId, IpAddr, u16)>,
    next_port: Vec<u16>,
    next_pid: HashMap<usize, u32>,
    trace: Vec<AppEvent>,
    pairs: Vec<(SocketId, SocketId)>,
}

impl Stack {
    pub(crate) fn new(nodes: usize) -> Self {
        Stack {
            processes: Vec::new(),
            sockets: Vec::new(),
            conns: HashMap::new(),
            listeners: HashMap::new(),
            ports_in_use: HashSet::new(),
            next_port: vec![EPHEMERAL_BASE; nodes],
            next_pid: HashMap::new(),
            trace: Vec::new(),
            pairs: Vec::new(),
        }
    }
}

fn unspecified(v4: bool) -> IpAddr {
    if v4 {
        IpAddr::V4(Ipv4Addr::UNSPECIFIED)
    } else {
        IpAddr::V6(Ipv6Addr::UNSPECIFIED)
    }
}

fn response_for(name: &str, request: &[u8]) -> Vec<u8> {
    format!("RESP {name} {}", request.len()).into_bytes()
}

impl World {
    pub fn spawn_process(&mut self, node: &str, name: &str, cgroup: &str) -> Result<ProcessId, EndpointError> {
        let node = self.net.node_id(node).map_err(|_| EndpointError::UnknownNode(node.to_string()))?;
        let machine = self.net.node(node).machine;
        let pid = self.stack.next_pid.entry(machine).or_insert(FIRST_PID);
        let info = ProcessRef {
            host: self.net.machines[machine].clone(),
            pid: *pid,
            cgroup: cgroup.to_string(),
            name: name.to_string(),
        };
        *pid += 1;
        self.stack.processes.push(Process { info, node });
        Ok(ProcessId(self.stack.processes.len() - 1))
    }

    pub fn process(&self, id: ProcessId) -> &ProcessRef {
        &self.stack.processes[id.0].info
    }

    pub fn process_node(&self, id: ProcessId) -> &str {
        &self.net.node(self.stack.processes[id.0].node).name
    }

    pub fn processes(&self) -> impl Iterator<Item = (ProcessId, &ProcessRef)> + '_ {
        self.stack.processes.iter().enumerate().map(|(i, p)| (ProcessId(i), &p.info))
    }

    pub fn socket(&self, id: SocketId) -> SocketRef {
        let s = &self.stack.sockets[id.0];
        SocketRef {
            id,
            owner: self.stack.processes[s.owner.0].info.clone(),
            local: s.local,
            remote: s.remote,
            state: s.state,
            side: s.side,
        }
    }

    pub fn socket_count(&self) -> usize {
        self.stack.sockets.len()
    }

    /// Bytes the application wrote to the socket.
    pub fn written(&self, id: SocketId) -> &[u8] {
        &self.stack.sockets[id.0].written
    }

    /// Bytes the application read from the socket.
    pub fn received(&self, id: SocketId) -> &[u8] {
        &self.stack.sockets[id.0].read
    }

    pub fn app_trace(&self) -> &[AppEvent] {
        &self.stack.trace
    }

    /// (actively opened socket, accepted socket) for every connection that
    /// reached a listener.
    pub fn connection_pairs(&self) -> &[(SocketId, SocketId)] {
        &self.stack.pairs
    }

    pub fn install(&mut self, machine: &str, inst: Box<dyn Instrumentation>) -> Result<(), EndpointError> {
        let m = self
            .net
            .machines
            .iter()
            .position(|x| x == machine)
            .ok_or_else(|| EndpointError::UnknownMachine(machine.to_string()))?;
        self.instruments[m] = Some(inst);
        Ok(())
    }

    pub fn instrumentation(&self, machine: &str) -> Option<&dyn Instrumentation> {
        let m = self.net.machines.iter().position(|x| x == machine)?;
        self.instruments[m].as_deref()
    }

    pub fn instrumentation_mut(&mut self, machine: &str) -> Option<&mut dyn Instrumentation> {
        let m = self.net.machines.iter().position(|x| x == machine)?;
        self.instruments[m].as_deref_mut()
    }

    pub fn records(&self) -> &[crate::Record] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<crate::Record> {
        std::mem::take(&mut self.records)
    }

    fn new_socket(&mut self, owner: ProcessId, local: SocketAddr, side: SocketSide, app: App) -> SocketId {
        let node = self.stack.processes[owner.0].node;
        let isn = self.rng.gen::<u32>();
        self.stack.sockets.push(Socket {
            owner,
            node,
            local,
            remote: None,
            state: SocketState::Closed,
            side,
            snd_nxt: isn,
            rcv_nxt: 0,
            app,
            queued: Vec::new(),
            fin_sent: false,
            fin_rcvd: false,
            demuxed: false,
            written: Vec::new(),
            read: Vec::new(),
        });
        SocketId(self.stack.sockets.len() - 1)
    }

    fn app_event(&mut self, sid: SocketId, kind: AppEventKind) {
        let owner = self.stack.sockets[sid.0].owner;
        self.stack.trace.push(AppEvent { time: self.now, process: owner, socket: sid, kind });
    }

    fn hook<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut dyn Instrumentation, &mut HookContext<'_>) -> R,
    ) -> Option<R> {
        let m = self.net.nodes[node.0].machine;
        let inst = self.instruments[m].as_deref_mut()?;
        let mut ctx =
            HookContext::new(self.now, &self.net.machines[m], ConntrackView::new(&self.net, m), &mut self.records);
        Some(f(inst, &mut ctx))
    }

    fn listener_clash(&self, node: NodeId, addr: SocketAddr) -> bool {
        self.stack.listeners.get(&(node, addr.port())).into_iter().flatten().any(|&l| {
            let ip = self.stack.sockets[l.0].local.ip();
            ip.is_unspecified() || addr.ip().is_unspecified() || ip == addr.ip()
        })
    }

    fn listen_inner(&mut self, owner: ProcessId, addr: SocketAddr, accept: Accept) -> Result<SocketId, EndpointError> {
        let node = self.stack.processes[owner.0].node;
        if self.listener_clash(node, addr) {
            return Err(EndpointError::AddressInUse(addr));
        }
        let sid = self.new_socket(owner, addr, SocketSide::Listener, App::Listen(accept));
        self.stack.sockets[sid.0].state = SocketState::Listening;
        self.stack.listeners.entry((node, addr.port())).or_default().push(sid);
        Ok(sid)
    }

    /// Plain listening socket; accepted connections only buffer what they read.
    pub fn listen(&mut self, owner: ProcessId, addr: SocketAddr) -> Result<SocketId, EndpointError> {
        self.listen_inner(owner, addr, Accept::Plain)
    }

    /// Listening socket whose connections answer every request.
    pub fn serve(&mut self, owner: ProcessId, addr: SocketAddr) -> Result<SocketId, EndpointError> {
        self.listen_inner(owner, addr, Accept::Serve)
    }

    /// Starts a userspace relay on `node` that accepts on `listen_port` and
    /// opens a second connection to `target` per accepted connection.
    pub fn spawn_forwarder(
        &mut self,
        node: &str,
        listen_port: u16,
        target: SocketAddr,
    ) -> Result<ProcessId, EndpointError> {
        let id = self.net.node_id(node).map_err(|_| EndpointError::UnknownNode(node.to_string()))?;
        let addr = SocketAddr::new(unspecified(target.is_ipv4()), listen_port);
        if self.listener_clash(id, addr) {
            return Err(EndpointError::AddressInUse(addr));
        }
        let owner = self.spawn_process(node, "docker-proxy", "system.slice/docker.service")?;
        self.listen_inner(owner, addr, Accept::Proxy(target))?;
        Ok(owner)
    }

    fn source_for(&self, node: NodeId, dst: SocketAddr) -> Result<IpAddr, EndpointError> {
        let n = self.net.node(node);
        if n.owns(dst.ip()) {
            return Ok(dst.ip());
        }
        let hop = self.net.lookup(node, dst.ip()).ok_or(EndpointError::NoRoute(dst))?;
        let ip = n.interfaces[hop.iface].addr.addr();
        if ip.is_ipv4() != dst.is_ipv4() {
            return Err(EndpointError::NoRoute(dst));
        }
        Ok(ip)
    }

    fn ephemeral(&mut self, node: NodeId, ip: IpAddr) -> Result<u16, EndpointError> {
        for _ in 0..=(u16::MAX - EPHEMERAL_BASE) {
            let port = self.stack.next_port[node.0];
            self.stack.next_port[node.0] = if port == u16::MAX { EPHEMERAL_BASE } else { port + 1 };
            if self.stack.ports_in_use.insert((node, ip, port)) {
                return Ok(port);
            }
        }
        Err(EndpointError::PortsExhausted)
    }

    fn connect_inner(&mut self, owner: ProcessId, dst: SocketAddr, app: App) -> Result<SocketId, EndpointError> {
        let node = self.stack.processes[owner.0].node;
        let ip = self.source_for(node, dst)?;
        let port = self.ephemeral(node, ip)?;
        let local = SocketAddr::new(ip, port);
        let sid = self.new_socket(owner, local, SocketSide::Client, app);
        let s = &mut self.stack.sockets[sid.0];
        s.remote = Some(dst);
        s.state = SocketState::Connecting;
        s.demuxed = true;
        self.stack.conns.insert((node, local, dst), sid);
        self.emit(sid, TcpFlags::SYN, Vec::new());
        self.stack.sockets[sid.0].snd_nxt = self.stack.sockets[sid.0].snd_nxt.wrapping_add(1);
        Ok(sid)
    }

    /// Opens a connection; the handshake completes as the simulation runs.
    pub fn connect(&mut self, owner: ProcessId, dst: SocketAddr) -> Result<SocketId, EndpointError> {
        self.connect_inner(owner, dst, App::Plain)
    }

    /// Writes one segment. Writes before the handshake completes are held
    /// and transmitted on establishment.
    pub fn send(&mut self, sid: SocketId, payload: Vec<u8>) -> Result<(), EndpointError> {
        let s = &self.stack.sockets[sid.0];
        match s.state {
            SocketState::Closed => return Err(EndpointError::SocketClosed(sid)),
            SocketState::Listening => return Err(EndpointError::NotConnected(sid)),
            _ if s.fin_sent => return Err(EndpointError::SocketClosed(sid)),
            _ => {}
        }
        let (node, owner, established) = (s.node, s.owner, s.state == SocketState::Established);
        let process = self.stack.processes[owner.0].info.clone();
        let sref = self.socket(sid);
        self.hook(node, |h, ctx| h.on_send(ctx, &process, &sref));
        self.stack.sockets[sid.0].written.extend_from_slice(&payload);
        self.app_event(sid, AppEventKind::Sent { bytes: payload.clone() });
        if established {
            self.transmit_data(sid, payload);
        } else {
            self.stack.sockets[sid.0].queued.push(payload);
        }
        Ok(())
    }

    pub fn close(&mut self, sid: SocketId) -> Result<(), EndpointError> {
        let s = &self.stack.sockets[sid.0];
        match (s.state, s.side) {
            (SocketState::Closed, _) => return Ok(()),
            (SocketState::Listening, _) => {
                let key = (s.node, s.local.port());
                if let Some(v) = self.stack.listeners.get_mut(&key) {
                    v.retain(|&x| x != sid);
                }
            }
            (SocketState::Connecting, SocketSide::Client) => self.release(sid),
            _ => {
                self.emit(sid, TcpFlags::FIN | TcpFlags::ACK, Vec::new());
                let s = &mut self.stack.sockets[sid.0];
                s.snd_nxt = s.snd_nxt.wrapping_add(1);
                s.fin_sent = true;
                if s.fin_rcvd {
                    self.release(sid);
                }
            }
        }
        self.stack.sockets[sid.0].state = SocketState::Closed;
        self.app_event(sid, AppEventKind::Closed);
        Ok(())
    }

    fn release(&mut self, sid: SocketId) {
        let s = &mut self.stack.sockets[sid.0];
        if !s.demuxed {
            return;
        }
        s.demuxed = false;
        let key = (s.node, s.local, s.remote.expect("demuxed sockets are connected"));
        if s.side == SocketSide::Client {
            self.stack.ports_in_use.remove(&(s.node, s.local.ip(), s.local.port()));
        }
        self.stack.conns.remove(&key);
    }

    /// Schedules a client request: connect, write `payload`, read one
    /// response, close.
    pub fn schedule_request(&mut self, at: Tick, client: ProcessId, target: SocketAddr, payload: Vec<u8>) {
        self.schedule(at, EventKind::Process(ProcessAction::Request { client, target, payload }));
    }

    pub(crate) fn start_request(&mut self, client: ProcessId, target: SocketAddr, payload: Vec<u8>) {
        match self.connect_inner(client, target, App::Request) {
            Ok(sid) => {
                self.send(sid, payload).expect("fresh socket accepts writes");
            }
            Err(e) => log::debug!("request from {} to {target} failed: {e}", self.process(client)),
        }
    }

    fn transmit_data(&mut self, sid: SocketId, payload: Vec<u8>) {
        let len = payload.len() as u32;
        self.emit(sid, TcpFlags::PSH | TcpFlags::ACK, payload);
        let s = &mut self.stack.sockets[sid.0];
        s.snd_nxt = s.snd_nxt.wrapping_add(len);
    }

    /// Builds a segment from the socket's state and hands it to routing
    /// after the transmit hook.
    fn emit(&mut self, sid: SocketId, flags: TcpFlags, payload: Vec<u8>) {
        let s = &self.stack.sockets[sid.0];
        let remote = s.remote.expect("emitting socket is connected");
        let ack = if flags.contains(TcpFlags::ACK) { s.rcv_nxt } else { 0 };
        let node = s.node;
        let packet =
            Packet::tcp(s.local, remote, flags, s.snd_nxt, ack, payload).expect("socket addresses share a family");
        let sref = self.socket(sid);
        let packet = match self.hook(node, |h, ctx| h.on_transmit(ctx, &sref, packet.clone())) {
            Some(p) => p,
            None => packet,
        };
        let opener = (flags == TcpFlags::SYN).then_some(sid);
        let env = self.envelope(packet, opener, false);
        self.output(node, env);
    }

    fn reset(&mut self, node: NodeId, p: &Packet) {
        let seq = p.tcp.seq.wrapping_add(p.payload.len() as u32 + 1);
        let rst =
            Packet::tcp(p.dst(), p.src(), TcpFlags::RST | TcpFlags::ACK, 0, seq, Vec::new()).expect("same family");
        let env = self.envelope(rst, None, false);
        self.output(node, env);
    }

    pub(crate) fn deliver_local(&mut self, node: NodeId, env: Envelope) {
        let p = env.packet;
        let flags = p.tcp.flags;
        if let Some(&sid) = self.stack.conns.get(&(node, p.dst(), p.src())) {
            return self.segment_arrived(sid, p);
        }
        if flags.contains(TcpFlags::SYN) && !flags.contains(TcpFlags::ACK) {
            let listener = self.stack.listeners.get(&(node, p.dst().port())).and_then(|v| {
                v.iter().copied().find(|&l| {
                    let ip = self.stack.sockets[l.0].local.ip();
                    ip == p.dst().ip() || (ip.is_unspecified() && ip.is_ipv4() == p.dst().is_ipv4())
                })
            });
            match listener {
                Some(l) => self.accept(l, node, &p, env.opener),
                None => self.reset(node, &p),
            }
        } else if !flags.contains(TcpFlags::RST) {
            log::debug!("stray segment at {}: {}", self.net.node(node).name, p.five_tuple());
        }
    }

    fn accept(&mut self, listener: SocketId, node: NodeId, syn: &Packet, opener: Option<SocketId>) {
        let l = &self.stack.sockets[listener.0];
        let app = match l.app {
            App::Listen(Accept::Serve) => App::Serve,
            App::Listen(Accept::Proxy(target)) => App::ProxyFront { target, back: None },
            _ => App::Plain,
        };
        let owner = l.owner;
        let sid = self.new_socket(owner, syn.dst(), SocketSide::Server, app);
        let s = &mut self.stack.sockets[sid.0];
        s.remote = Some(syn.src());
        s.state = SocketState::Connecting;
        s.rcv_nxt = syn.tcp.seq.wrapping_add(1);
        s.demuxed = true;
        self.stack.conns.insert((node, syn.dst(), syn.src()), sid);
        if let Some(o) = opener {
            self.stack.pairs.push((o, sid));
        }
        self.emit(sid, TcpFlags::SYN | TcpFlags::ACK, Vec::new());
        let s = &mut self.stack.sockets[sid.0];
        s.snd_nxt = s.snd_nxt.wrapping_add(1);
    }

    fn segment_arrived(&mut self, sid: SocketId, p: Packet) {
        let flags = p.tcp.flags;
        let (state, side) = (self.stack.sockets[sid.0].state, self.stack.sockets[sid.0].side);

        if flags.contains(TcpFlags::RST) {
            self.release(sid);
            self.stack.sockets[sid.0].state = SocketState::Closed;
            if state == SocketState::Connecting && side == SocketSide::Client {
                let target = self.stack.sockets[sid.0].remote.expect("connected");
                self.app_event(sid, AppEventKind::Refused { target });
                self.on_refused(sid);
            } else if state != SocketState::Closed {
                self.app_event(sid, AppEventKind::Reset);
            }
            return;
        }

        if state == SocketState::Connecting {
            match side {
                SocketSide::Client if flags.contains(TcpFlags::SYN | TcpFlags::ACK) => {
                    let s = &mut self.stack.sockets[sid.0];
                    s.rcv_nxt = p.tcp.seq.wrapping_add(1);
                    s.state = SocketState::Established;
                    let (local, remote) = (s.local, s.remote.expect("connected"));
                    self.emit(sid, TcpFlags::ACK, Vec::new());
                    self.app_event(sid, AppEventKind::Connected { local, remote });
                    for chunk in std::mem::take(&mut self.stack.sockets[sid.0].queued) {
                        self.transmit_data(sid, chunk);
                    }
                }
                SocketSide::Server if flags.contains(TcpFlags::ACK) => {
                    let s = &mut self.stack.sockets[sid.0];
                    s.state = SocketState::Established;
                    let (local, remote) = (s.local, s.remote.expect("connected"));
                    self.app_event(sid, AppEventKind::Accepted { local, remote });
                    for chunk in std::mem::take(&mut self.stack.sockets[sid.0].queued) {
                        self.transmit_data(sid, chunk);
                    }
                    self.on_established(sid);
                }
                _ => {}
            }
        }

        if !p.payload.is_empty() && !self.stack.sockets[sid.0].fin_sent {
            let s = &mut self.stack.sockets[sid.0];
            s.rcv_nxt = s.rcv_nxt.wrapping_add(p.payload.len() as u32);
            let (node, owner) = (s.node, s.owner);
            let process = self.stack.processes[owner.0].info.clone();
            let sref = self.socket(sid);
            self.hook(node, |h, ctx| h.on_data_queued(ctx, &sref, &p));
            self.hook(node, |h, ctx| h.on_recv(ctx, &process, &sref));
            self.stack.sockets[sid.0].read.extend_from_slice(&p.payload);
            self.app_event(sid, AppEventKind::Received { bytes: p.payload.clone() });
            self.on_data(sid, p.payload);
        }

        if flags.contains(TcpFlags::FIN) {
            let s = &mut self.stack.sockets[sid.0];
            if s.fin_rcvd {
                return;
            }
            s.rcv_nxt = s.rcv_nxt.wrapping_add(1);
            s.fin_rcvd = true;
            let we_closed = s.fin_sent;
            self.app_event(sid, AppEventKind::PeerClosed);
            if we_closed {
                self.release(sid);
            } else {
                self.on_peer_closed(sid);
            }
        }
    }

    fn on_established(&mut self, sid: SocketId) {
        if let App::ProxyFront { target, .. } = self.stack.sockets[sid.0].app {
            let owner = self.stack.sockets[sid.0].owner;
            match self.connect_inner(owner, target, App::ProxyBack { front: sid }) {
                Ok(back) => {
                    if let App::ProxyFront { back: b, .. } = &mut self.stack.sockets[sid.0].app {
                        *b = Some(back);
                    }
                }
                Err(e) => {
                    log::debug!("forwarder cannot reach {target}: {e}");
                    let _ = self.close(sid);
                }
            }
        }
    }

    fn on_data(&mut self, sid: SocketId, data: Vec<u8>) {
        match self.stack.sockets[sid.0].app.clone() {
            App::Serve => {
                let owner = self.stack.sockets[sid.0].owner;
                let resp = response_for(&self.stack.processes[owner.0].info.name, &data);
                let _ = self.send(sid, resp);
            }
            App::Request => {
                let _ = self.close(sid);
            }
            App::ProxyFront { back: Some(peer), .. } | App::ProxyBack { front: peer } => {
                if let Err(e) = self.send(peer, data) {
                    log::debug!("relay peer {peer:?} gone: {e}");
                }
            }
            _ => {}
        }
    }

    fn on_peer_closed(&mut self, sid: SocketId) {
        match self.stack.sockets[sid.0].app.clone() {
            App::Plain => {}
            App::ProxyFront { back, .. } => {
                let _ = self.close(sid);
                if let Some(b) = back {
                    let _ = self.close(b);
                }
            }
            App::ProxyBack { front } => {
                let _ = self.close(sid);
                let _ = self.close(front);
            }
            _ => {
                let _ = self.close(sid);
            }
        }
    }

    fn on_refused(&mut self, sid: SocketId) {
        if let App::ProxyBack { front } = self.stack.sockets[sid.0].app {
            let _ = self.close(front);
        }
    }
}
