//! Multi-tenant inference server: one resident basemodel, per-request
//! submodels loaded from a [`SubmodelStore`] through a [`SubmodelCache`].
//!
//! The protocol is newline-delimited JSON over TCP. Every request line gets
//! exactly one response line.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheStats, Lookup, SubmodelCache};
use crate::error::{Error, Result};
use crate::model::{base_forward, forward_with_submodel, Basemodel, Submodel};
use crate::store::{load_base, SubmodelStore};
use crate::tensor::Tensor;

/// A speaker reference on the wire: a decimal string or a bare integer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpeakerRef {
    Id(u64),
    Name(String),
}

impl SpeakerRef {
    pub fn resolve(&self) -> Result<u64> {
        match self {
            SpeakerRef::Id(id) => Ok(*id),
            SpeakerRef::Name(s) => s.trim().parse().map_err(|_| Error::UnknownSpeaker(s.clone())),
        }
    }
}

impl From<u64> for SpeakerRef {
    fn from(id: u64) -> Self {
        SpeakerRef::Name(id.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Infer {
        #[serde(default)]
        speaker: Option<SpeakerRef>,
        frames: Vec<Vec<f32>>,
    },
    Stats,
    Evict {
        speaker: SpeakerRef,
    },
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerStats {
    pub base_loads: u64,
    pub requests: u64,
    pub errors: u64,
    #[serde(flatten)]
    pub cache: CacheStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Result {
        frames: Vec<Vec<f32>>,
        cache_hit: bool,
        load_micros: u64,
        submodel: String,
    },
    Stats(ServerStats),
    Ack {
        action: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        evicted: Option<bool>,
    },
    Error {
        code: String,
        message: String,
    },
}

impl Response {
    fn error(code: &str, message: impl Into<String>) -> Self {
        Response::Error {
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn from_error(e: &Error) -> Self {
        let code = match e {
            Error::UnknownSpeaker(_) => "UNKNOWN_SPEAKER",
            Error::DimMismatch(_) => "DIM_MISMATCH",
            Error::Precondition(_) => "BAD_REQUEST",
            _ => "STORE_ERROR",
        };
        Response::error(code, e.to_string())
    }
}

/// Loads a stored submodel and activates it (`alpha = 1`).
pub fn activate(store: &SubmodelStore, base: &Basemodel, speaker_id: u64) -> Result<Submodel> {
    let mut sub = store.load(speaker_id, Some(&base.config))?;
    if sub.layers.iter().any(|l| l.alpha == 0.0) {
        log::warn!("submodel {speaker_id} is stored deactivated; activating it");
    }
    sub.set_alpha(1.0);
    Ok(sub)
}

pub struct Server {
    base: Arc<Basemodel>,
    store: SubmodelStore,
    cache: SubmodelCache,
    base_loads: AtomicU64,
    requests: AtomicU64,
    errors: AtomicU64,
    stopping: AtomicBool,
}

impl Server {
    pub fn new(base: Basemodel, store: SubmodelStore, cache: CacheConfig) -> Result<Self> {
        Ok(Server {
            base: Arc::new(base),
            store,
            cache: SubmodelCache::new(cache)?,
            base_loads: AtomicU64::new(0),
            requests: AtomicU64::new(0),
            errors: AtomicU64::new(0),
            stopping: AtomicBool::new(false),
        })
    }

    /// Deserializes the basemodel once and opens the store.
    pub fn from_paths(base_path: &Path, store_root: &Path, cache: CacheConfig) -> Result<Self> {
        let store = SubmodelStore::open(store_root)?;
        let base = load_base(base_path)?;
        let s = Self::new(base, store, cache)?;
        s.base_loads.store(1, Ordering::SeqCst);
        Ok(s)
    }

    pub fn base(&self) -> &Basemodel {
        &self.base
    }

    pub fn cache(&self) -> &SubmodelCache {
        &self.cache
    }

    pub fn stats(&self) -> ServerStats {
        ServerStats {
            base_loads: self.base_loads.load(Ordering::SeqCst),
            requests: self.requests.load(Ordering::SeqCst),
            errors: self.errors.load(Ordering::SeqCst),
            cache: self.cache.stats(),
        }
    }

    /// Looks up and, on a miss, loads `speaker_id`'s active submodel.
    pub fn submodel(&self, speaker_id: u64) -> Result<(Arc<Submodel>, Lookup)> {
        self.cache
            .get_or_load(speaker_id, || activate(&self.store, &self.base, speaker_id))
    }

    fn infer(&self, speaker: Option<&SpeakerRef>, frames: &[Vec<f32>]) -> Result<Response> {
        let d_in = self.base.config.d_in;
        if frames.is_empty() {
            return Err(Error::pre("request carries no frames"));
        }
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != d_in) {
            return Err(Error::dims(format!("frame {i} has width {}, basemodel expects {d_in}", f.len())));
        }
        let x = Tensor::new(vec![frames.len(), d_in], frames.concat())?;
        let (out, lookup, name) = match speaker {
            None => (
                base_forward(&self.base, &x)?,
                Lookup {
                    cache_hit: false,
                    load_micros: 0,
                },
                "none".to_string(),
            ),
            Some(s) => {
                let id = s.resolve()?;
                let (sub, lookup) = self.submodel(id)?;
                (forward_with_submodel(&self.base, Some(&sub), &x)?, lookup, id.to_string())
            }
        };
        Ok(Response::Result {
            frames: (0..out.rows()).map(|r| out.row(r).to_vec()).collect(),
            cache_hit: lookup.cache_hit,
            load_micros: lookup.load_micros,
            submodel: name,
        })
    }

    pub fn handle(&self, req: &Request) -> Response {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let r = match req {
            Request::Infer { speaker, frames } => self.infer(speaker.as_ref(), frames),
            Request::Stats => Ok(Response::Stats(self.stats())),
            Request::Evict { speaker } => speaker.resolve().map(|id| Response::Ack {
                action: "evict".into(),
                evicted: Some(self.cache.evict(id)),
            }),
            Request::Shutdown => {
                self.stopping.store(true, Ordering::SeqCst);
                Ok(Response::Ack {
                    action: "shutdown".into(),
                    evicted: None,
                })
            }
        };
        r.unwrap_or_else(|e| {
            self.errors.fetch_add(1, Ordering::SeqCst);
            Response::from_error(&e)
        })
    }

    /// Parses and answers one protocol line.
    pub fn handle_line(&self, line: &str) -> Response {
        match serde_json::from_str::<Request>(line) {
            Ok(req) => self.handle(&req),
            Err(e) => {
                self.requests.fetch_add(1, Ordering::SeqCst);
                self.errors.fetch_add(1, Ordering::SeqCst);
                Response::error("BAD_REQUEST", e.to_string())
            }
        }
    }

    fn connection(&self, stream: TcpStream) -> std::io::Result<()> {
        let mut out = stream.try_clone()?;
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            let mut text = serde_json::to_string(&resp).expect("responses serialize");
            text.push('\n');
            out.write_all(text.as_bytes())?;
            if self.stopping.load(Ordering::SeqCst) {
                break;
            }
        }
        Ok(())
    }
}

/// A listening server; dropping the handle does not stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    accept: JoinHandle<()>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    /// Blocks until a shutdown request has been served.
    pub fn join(self) {
        let _ = self.accept.join();
    }

    /// Stops accepting connections and waits for the listener to exit.
    pub fn shutdown(self) {
        self.server.stopping.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        self.join();
    }
}

/// Binds `addr` and serves connections, one thread each, until a shutdown
/// request arrives.
pub fn serve(server: Arc<Server>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    log::info!("serving on {local}");
    let srv = server.clone();
    let accept = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if srv.stopping.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let s = srv.clone();
            std::thread::spawn(move || {
                if let Err(e) = s.connection(stream) {
                    log::debug!("connection closed: {e}");
                }
                if s.stopping.load(Ordering::SeqCst) {
                    let _ = TcpStream::connect(local);
                }
            });
        }
    });
    Ok(ServerHandle {
        addr: local,
        server,
        accept,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_micros: f64,
    pub std_micros: f64,
}

impl Timing {
    fn of(samples: &[f64]) -> Timing {
        let a = crate::eval::Aggregate::of(samples);
        Timing {
            mean_micros: a.mean,
            std_micros: a.stdev,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadBenchReport {
    pub k: usize,
    pub submodel_cold: Timing,
    pub submodel_warm: Timing,
    pub base_reload: Timing,
    /// `base_reload` mean over `submodel_cold` mean.
    pub ratio: f64,
    pub submodel_bytes: u64,
    pub base_bytes: u64,
}

impl LoadBenchReport {
    pub fn size_ratio(&self) -> f64 {
        self.base_bytes as f64 / self.submodel_bytes.max(1) as f64
    }
}

/// Times `k` cold submodel loads (each preceded by an eviction), `k` warm
/// lookups, and `k` full basemodel deserializations from `base_path`.
pub fn bench_load(store: &SubmodelStore, base_path: &Path, k: usize) -> Result<LoadBenchReport> {
    if k < 10 {
        return Err(Error::pre(format!("bench_load needs k >= 10, got {k}")));
    }
    let ids = store.speaker_ids()?;
    if ids.is_empty() {
        return Err(Error::Store(format!("store {} holds no submodels", store.root().display())));
    }
    let base = load_base(base_path)?;
    let server = Server::new(base, store.clone(), CacheConfig { capacity: ids.len() })?;

    let mut cold = Vec::with_capacity(k);
    let mut warm = Vec::with_capacity(k);
    for i in 0..k {
        let id = ids[i % ids.len()];
        server.cache.evict(id);
        let (_, miss) = server.submodel(id)?;
        cold.push(miss.load_micros as f64);
        let (_, hit) = server.submodel(id)?;
        warm.push(hit.load_micros as f64);
    }
    let mut reload = Vec::with_capacity(k);
    for _ in 0..k {
        let t = Instant::now();
        std::hint::black_box(load_base(base_path)?);
        reload.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let submodel_cold = Timing::of(&cold);
    let base_reload = Timing::of(&reload);
    Ok(LoadBenchReport {
        k,
        submodel_cold,
        submodel_warm: Timing::of(&warm),
        base_reload,
        ratio: base_reload.mean_micros / submodel_cold.mean_micros.max(1.0),
        submodel_bytes: std::fs::metadata(store.path_for(ids[0]))?.len(),
        base_bytes: std::fs::metadata(base_path)?.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BasemodelConfig;

    fn fixture() -> (tempfile::TempDir, Server) {
        let dir = tempfile::tempdir().unwrap();
        let base = Basemodel::init(BasemodelConfig::default()).unwrap();
        let store = SubmodelStore::create(dir.path().join("store")).unwrap();
        for id in 1..=3 {
            store.save(&Submodel::for_base(&base.config, id, 8, id).unwrap()).unwrap();
        }
        let s = Server::new(base, store, CacheConfig { capacity: 2 }).unwrap();
        (dir, s)
    }

    fn infer(s: &Server, line: &str) -> Response {
        s.handle_line(line)
    }

    #[test]
    fn null_speaker_matches_base() {
        let (_d, s) = fixture();
        let frame = vec![0.5f32; 8];
        let r = infer(&s, &format!(r#"{{"type":"infer","speaker":null,"frames":[{frame:?}]}}"#));
        let want = base_forward(s.base(), &Tensor::vector(frame)).unwrap();
        match r {
            Response::Result { frames, submodel, cache_hit, .. } => {
                assert_eq!(frames[0], want.data());
                assert_eq!(submodel, "none");
                assert!(!cache_hit);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repeat_request_hits_cache() {
        let (_d, s) = fixture();
        let line = r#"{"type":"infer","speaker":"2","frames":[[0,0,0,0,0,0,0,1]],"extra":1}"#;
        let a = infer(&s, line);
        let b = infer(&s, line);
        match (a, b) {
            (
                Response::Result { frames: fa, cache_hit: false, .. },
                Response::Result { frames: fb, cache_hit: true, load_micros: 0, .. },
            ) => assert_eq!(fa, fb),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn error_codes() {
        let (_d, s) = fixture();
        let code = |r: Response| match r {
            Response::Error { code, .. } => code,
            other => panic!("{other:?}"),
        };
        assert_eq!(code(infer(&s, r#"{"type":"infer","speaker":"77","frames":[[0,0,0,0,0,0,0,0]]}"#)), "UNKNOWN_SPEAKER");
        assert_eq!(code(infer(&s, r#"{"type":"infer","speaker":"1","frames":[[0,0]]}"#)), "DIM_MISMATCH");
        assert_eq!(code(infer(&s, "not json")), "BAD_REQUEST");
        assert_eq!(code(infer(&s, r#"{"type":"dance"}"#)), "BAD_REQUEST");
        assert_eq!(s.stats().errors, 4);
    }

    #[test]
    fn evict_and_stats() {
        let (_d, s) = fixture();
        infer(&s, r#"{"type":"infer","speaker":1,"frames":[[0,0,0,0,0,0,0,0]]}"#);
        assert_eq!(
            infer(&s, r#"{"type":"evict","speaker":"1"}"#),
            Response::Ack {
                action: "evict".into(),
                evicted: Some(true)
            }
        );
        match infer(&s, r#"{"type":"stats"}"#) {
            Response::Stats(st) => {
                assert_eq!(st.cache.misses, 1);
                assert_eq!(st.cache.resident, 0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tcp_round_trip_and_shutdown() {
        let (_d, s) = fixture();
        let h = serve(Arc::new(s), "127.0.0.1:0").unwrap();
        let mut conn = TcpStream::connect(h.local_addr()).unwrap();
        let mut reader = BufReader::new(conn.try_clone().unwrap());
        let mut line = String::new();
        conn.write_all(b"{\"type\":\"stats\"}\n{\"type\":\"shutdown\"}\n").unwrap();
        reader.read_line(&mut line).unwrap();
        assert!(line.contains("\"type\":\"stats\""), "{line}");
        line.clear();
        reader.read_line(&mut line).unwrap();
        assert!(line.contains("shutdown"), "{line}");
        h.join();
    }

    #[test]
    fn bench_requires_k_and_entries() {
        let (d, s) = fixture();
        let base_path = d.path().join("base.bin");
        crate::store::save_base(s.base(), &base_path).unwrap();
        let empty = SubmodelStore::create(d.path().join("empty")).unwrap();
        assert!(bench_load(&empty, &base_path, 10).is_err());
        let store = SubmodelStore::open(d.path().join("store")).unwrap();
        assert!(bench_load(&store, &base_path, 9).is_err());
        let r = bench_load(&store, &base_path, 10).unwrap();
        assert_eq!(r.submodel_warm.mean_micros, 0.0);
        assert!(r.size_ratio() > 1.0);
    }
}
