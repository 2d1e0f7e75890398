//! Session service behind the viewer: a registry of live scenes and the
//! handlers of the line-delimited JSON protocol.
//!
//! Each session holds one scene behind a read/write lock. Looks share the
//! read side; outpainting, strategy changes and saves take the write side,
//! so mutations on one session are serialized while other sessions keep
//! running. When the registry is full, the least recently used idle session
//! is written to the data directory and dropped; asking for it again brings
//! it back from disk.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use outview::geometry::{CameraIntrinsics, DepthMap, Pose};
use outview::grid::{Grid, Image};
use outview::pipeline::{
    init_scene, outpaint_support, provenance_summary, relative_yaw_pitch, render_view, synthesize_panorama,
    Generator, InputView, Origin, OutpaintReport, PipelineConfig, SceneState, Strategy, View,
};
use outview::scene_io::{load_scene, save_scene};
use outview::world::{raycast_render, RoomSpec, FIXTURE_ROOMS};

pub const DATA_DIR_ENV: &str = "OUTVIEW_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "outview-data";
pub const DEFAULT_CAPACITY: usize = 16;
const SESSION_META: &str = "session.json";
const NEXT_ID_FILE: &str = "next_session_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NoSession,
    NeedsSupport,
    NoGenerator,
    BadRequest,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_direction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hole_fraction: Option<f64>,
}

impl ServiceError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            nearest_direction: None,
            hole_fraction: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

impl From<outview::Error> for ServiceError {
    fn from(e: outview::Error) -> Self {
        use outview::Error as E;
        let code = match &e {
            E::InsufficientCoverage { .. } => ErrorCode::NeedsSupport,
            E::MissingComponent(_) => ErrorCode::NoGenerator,
            E::Io(_) => ErrorCode::Internal,
            _ => ErrorCode::BadRequest,
        };
        let mut out = Self::new(code, e.to_string());
        if let E::InsufficientCoverage { hole_fraction, direction } = e {
            out.nearest_direction = Some(direction);
            out.hole_fraction = Some(hole_fraction);
        }
        out
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorCode::Internal, e.to_string())
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    CreateSession(CreateSession),
    Look {
        session: String,
        #[serde(default)]
        yaw: f64,
        #[serde(default)]
        pitch: f64,
        #[serde(default)]
        step: f64,
    },
    Panorama {
        session: String,
        yaw_extent: Option<f64>,
        pitch_extent: Option<f64>,
    },
    Support {
        session: String,
        yaw: f64,
        pitch: f64,
    },
    SetStrategy {
        session: String,
        strategy: Strategy,
    },
    Save {
        session: String,
        path: Option<String>,
    },
    Load {
        path: String,
    },
    Stats {
        session: String,
        #[serde(default)]
        yaw: f64,
        #[serde(default)]
        pitch: f64,
    },
    CloseSession {
        session: String,
    },
    ListSessions,
}

/// Input of a new session: a fixture room or an uploaded RGB-D view.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct CreateSession {
    pub fixture: Option<usize>,
    /// Heading of the fixture camera, degrees.
    #[serde(default)]
    pub heading: f64,
    /// Base64 RGB PNG.
    pub image_png: Option<String>,
    /// Base64 16-bit PNG in millimetres; 0 marks missing depth.
    pub depth_png: Option<String>,
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
    pub config: Option<PipelineConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session: String,
    pub strategy: Strategy,
    pub scene_revision: u64,
    pub width: usize,
    pub height: usize,
    pub points: usize,
    pub has_generator: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageStats {
    pub mean: f64,
    /// Pixels at or above the coverage threshold.
    pub covered_fraction: f64,
    /// Pixels not taken from the reprojection.
    pub hole_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session: String,
    pub revision: u64,
    pub scene_revision: u64,
    pub yaw: f64,
    pub pitch: f64,
    pub step: f64,
    pub width: usize,
    pub height: usize,
    /// Base64 RGB PNG.
    pub png: String,
    /// Base64 8-bit grayscale PNG of per-pixel coverage.
    pub coverage_png: String,
    pub coverage: CoverageStats,
    pub outpainted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportStep {
    pub direction: String,
    pub completed: usize,
    pub total: usize,
    #[serde(flatten)]
    pub report: OutpaintReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanoramaResult {
    pub session: String,
    pub scene_revision: u64,
    pub steps: Vec<SupportStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportResult {
    pub session: String,
    pub scene_revision: u64,
    #[serde(flatten)]
    pub report: OutpaintReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginPoints {
    pub origin: Origin,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub index: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub unknown_tokens: usize,
    pub new_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    /// `None` for pixels no cloud reached.
    pub origin: Option<Origin>,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub session: String,
    pub strategy: Strategy,
    pub scene_revision: u64,
    pub frames: u64,
    pub points: usize,
    pub detached_points: usize,
    pub points_by_origin: Vec<OriginPoints>,
    pub supports: Vec<SupportSummary>,
    /// Pixel sources of the view at the requested angles; `None` when that
    /// view needs a support first.
    pub provenance: Option<Vec<ProvenanceEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent<'a> {
    pub session: &'a str,
    pub direction: &'a str,
    pub completed: usize,
    pub total: usize,
    #[serde(flatten)]
    pub report: OutpaintReport,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct SessionMeta {
    scene_revision: u64,
    frames: u64,
}

struct Scene {
    state: SceneState,
    revision: u64,
}

struct Session {
    id: String,
    scene: RwLock<Scene>,
    frames: AtomicU64,
    last_used: AtomicU64,
}

impl Session {
    fn read(&self) -> std::sync::RwLockReadGuard<'_, Scene> {
        self.scene.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Scene> {
        self.scene.write().unwrap_or_else(|e| e.into_inner())
    }
}

struct Registry {
    sessions: HashMap<String, Arc<Session>>,
    next_id: u64,
}

pub struct Service {
    registry: Mutex<Registry>,
    clock: AtomicU64,
    capacity: usize,
    data_dir: PathBuf,
    generator: Option<Arc<Generator>>,
}

/// `$OUTVIEW_DATA_DIR`, or `outview-data` in the working directory.
pub fn data_dir_from_env() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

impl Service {
    /// Session ids continue from the counter stored in `data_dir`, so they
    /// stay unique across restarts.
    pub fn new(data_dir: impl Into<PathBuf>, capacity: usize, generator: Option<Arc<Generator>>) -> ServiceResult<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("sessions"))?;
        let next_id = match fs::read_to_string(data_dir.join(NEXT_ID_FILE)) {
            Ok(text) => text
                .trim()
                .parse()
                .map_err(|e| ServiceError::new(ErrorCode::Internal, format!("{NEXT_ID_FILE}: {e}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 1,
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            registry: Mutex::new(Registry {
                sessions: HashMap::new(),
                next_id,
            }),
            clock: AtomicU64::new(0),
            capacity: capacity.max(1),
            data_dir,
            generator,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Number of sessions held in memory.
    pub fn live_sessions(&self) -> usize {
        self.lock().sessions.len()
    }

    /// Parses one request line and runs it. Progress events go to `emit`.
    pub fn handle_value(&self, request: Value, emit: &mut dyn FnMut(Value)) -> ServiceResult<Value> {
        let request: Request =
            serde_json::from_value(request).map_err(|e| ServiceError::bad_request(format!("bad request: {e}")))?;
        self.handle(request, emit)
    }

    pub fn handle(&self, request: Request, emit: &mut dyn FnMut(Value)) -> ServiceResult<Value> {
        match request {
            Request::CreateSession(c) => to_value(self.create_session(c)?),
            Request::Look {
                session,
                yaw,
                pitch,
                step,
            } => to_value(self.look(&session, yaw, pitch, step)?),
            Request::Panorama {
                session,
                yaw_extent,
                pitch_extent,
            } => {
                let mut forward = |p: &ProgressEvent| {
                    if let Ok(v) = serde_json::to_value(p) {
                        emit(v);
                    }
                };
                to_value(self.panorama(&session, yaw_extent, pitch_extent, &mut forward)?)
            }
            Request::Support { session, yaw, pitch } => to_value(self.support(&session, yaw, pitch)?),
            Request::SetStrategy { session, strategy } => to_value(self.set_strategy(&session, strategy)?),
            Request::Save { session, path } => {
                let dir = self.save(&session, path.as_deref())?;
                Ok(serde_json::json!({ "session": session, "path": dir.display().to_string() }))
            }
            Request::Load { path } => to_value(self.load(&path)?),
            Request::Stats { session, yaw, pitch } => to_value(self.stats(&session, yaw, pitch)?),
            Request::CloseSession { session } => {
                self.close(&session)?;
                Ok(serde_json::json!({ "session": session, "closed": true }))
            }
            Request::ListSessions => {
                let mut ids: Vec<String> = self.lock().sessions.keys().cloned().collect();
                ids.sort();
                Ok(serde_json::json!({ "sessions": ids }))
            }
        }
    }

    pub fn create_session(&self, req: CreateSession) -> ServiceResult<SessionInfo> {
        let config = req.config.unwrap_or_default();
        let (input, intrinsics) = match (req.fixture, req.image_png, req.depth_png) {
            (Some(f), None, None) => fixture_input(f, req.heading, req.intrinsics)?,
            (None, Some(image), Some(depth)) => uploaded_input(&image, &depth, req.intrinsics)?,
            _ => {
                return Err(ServiceError::bad_request(
                    "create_session needs either fixture or both image_png and depth_png",
                ))
            }
        };
        let mut state = init_scene(&[input], intrinsics, config, req.strategy, req.seed)?;
        state.generator = self.generator.clone();
        let session = self.insert(state, SessionMeta {
            scene_revision: 1,
            frames: 0,
        })?;
        let scene = session.read();
        Ok(info(&session.id, &scene))
    }

    pub fn look(&self, id: &str, yaw: f64, pitch: f64, step: f64) -> ServiceResult<Frame> {
        check_finite(&[yaw, pitch, step])?;
        let session = self.session(id)?;
        let scene = session.read();
        let state = &scene.state;
        let pose = state.base_pose.compose(&Pose::from_yaw_pitch(yaw, pitch)).stepped_forward(step);
        let view = render_view(state, &pose)?;
        let revision = session.frames.fetch_add(1, Ordering::SeqCst) + 1;
        Ok(Frame {
            session: session.id.clone(),
            revision,
            scene_revision: scene.revision,
            yaw,
            pitch,
            step,
            width: view.image.width(),
            height: view.image.height(),
            png: BASE64.encode(view.image.encode_png()?),
            coverage_png: BASE64.encode(coverage_png(&view.coverage)?),
            coverage: coverage_stats(&view, state.config.coverage_threshold),
            outpainted: view.outpainted,
        })
    }

    pub fn panorama(
        &self,
        id: &str,
        yaw_extent: Option<f64>,
        pitch_extent: Option<f64>,
        progress: &mut dyn FnMut(&ProgressEvent),
    ) -> ServiceResult<PanoramaResult> {
        let session = self.session(id)?;
        let mut scene = session.write();
        let yaw = yaw_extent.unwrap_or(scene.state.config.support_yaw);
        let pitch = pitch_extent.unwrap_or(scene.state.config.support_pitch);
        let mut steps = Vec::new();
        let result = synthesize_panorama(&mut scene.state, yaw, pitch, |p| {
            progress(&ProgressEvent {
                session: &session.id,
                direction: p.direction,
                completed: p.completed,
                total: p.total,
                report: p.report,
            });
            steps.push(SupportStep {
                direction: p.direction.to_string(),
                completed: p.completed,
                total: p.total,
                report: p.report,
            });
        });
        // Supports finished before an error stay in the scene.
        if steps.iter().any(|s| s.report.new_points > 0) {
            scene.revision += 1;
        }
        result?;
        Ok(PanoramaResult {
            session: session.id.clone(),
            scene_revision: scene.revision,
            steps,
        })
    }

    pub fn support(&self, id: &str, yaw: f64, pitch: f64) -> ServiceResult<SupportResult> {
        check_finite(&[yaw, pitch])?;
        let session = self.session(id)?;
        let mut scene = session.write();
        let pose = scene.state.base_pose.compose(&Pose::from_yaw_pitch(yaw, pitch));
        let report = outpaint_support(&mut scene.state, &pose)?;
        if report.new_points > 0 {
            scene.revision += 1;
        }
        Ok(SupportResult {
            session: session.id.clone(),
            scene_revision: scene.revision,
            report,
        })
    }

    pub fn set_strategy(&self, id: &str, strategy: Strategy) -> ServiceResult<SessionInfo> {
        let session = self.session(id)?;
        let mut scene = session.write();
        if scene.state.strategy != strategy {
            scene.state.set_strategy(strategy);
            scene.revision += 1;
        }
        Ok(info(&session.id, &scene))
    }

    /// Saves to `path`, or to `scenes/<id>` under the data directory.
    /// Relative paths are taken under `scenes/`.
    pub fn save(&self, id: &str, path: Option<&str>) -> ServiceResult<PathBuf> {
        let session = self.session(id)?;
        let dir = self.scene_path(path.unwrap_or(id));
        // The write side keeps the saved scene from changing mid-save.
        let scene = session.write();
        save_scene(&scene.state, &dir)?;
        Ok(dir)
    }

    /// Opens a saved scene as a new session.
    pub fn load(&self, path: &str) -> ServiceResult<SessionInfo> {
        let dir = self.scene_path(path);
        if !dir.join(outview::scene_io::MANIFEST).exists() {
            return Err(ServiceError::bad_request(format!("no scene at {}", dir.display())));
        }
        let mut state = load_scene(&dir)?;
        if state.generator.is_none() {
            state.generator = self.generator.clone();
        }
        let session = self.insert(state, SessionMeta {
            scene_revision: 1,
            frames: 0,
        })?;
        let scene = session.read();
        Ok(info(&session.id, &scene))
    }

    pub fn stats(&self, id: &str, yaw: f64, pitch: f64) -> ServiceResult<Stats> {
        check_finite(&[yaw, pitch])?;
        let session = self.session(id)?;
        let scene = session.read();
        let state = &scene.state;
        let pose = state.base_pose.compose(&Pose::from_yaw_pitch(yaw, pitch));
        let provenance = match render_view(state, &pose) {
            Ok(view) => Some(
                provenance_summary(state, &view)
                    .into_iter()
                    .map(|(origin, pixels)| ProvenanceEntry { origin, pixels })
                    .collect(),
            ),
            Err(outview::Error::InsufficientCoverage { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Stats {
            session: session.id.clone(),
            strategy: state.strategy,
            scene_revision: scene.revision,
            frames: session.frames.load(Ordering::SeqCst),
            points: state.point_count(),
            detached_points: state.detached.iter().map(|c| c.cloud.len()).sum(),
            points_by_origin: state
                .points_by_origin()
                .into_iter()
                .map(|(origin, points)| OriginPoints { origin, points })
                .collect(),
            supports: state
                .support_views
                .iter()
                .enumerate()
                .map(|(index, s)| {
                    let (yaw, pitch) = relative_yaw_pitch(&state.base_pose, &s.pose);
                    SupportSummary {
                        index,
                        yaw,
                        pitch,
                        unknown_tokens: s.unknown_tokens,
                        new_points: s.new_points,
                    }
                })
                .collect(),
            provenance,
        })
    }

    /// Drops a session from memory and from the eviction store.
    pub fn close(&self, id: &str) -> ServiceResult<()> {
        let mut reg = self.lock();
        let in_memory = reg.sessions.remove(id).is_some();
        let stored = self.session_dir(id);
        let on_disk = stored.join(SESSION_META).exists();
        if on_disk {
            fs::remove_dir_all(&stored)?;
        }
        if in_memory || on_disk {
            Ok(())
        } else {
            Err(no_session(id))
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst) + 1
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join("sessions").join(id)
    }

    fn scene_path(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join("scenes").join(p)
        }
    }

    /// Live session `id`, restored from the eviction store if needed.
    fn session(&self, id: &str) -> ServiceResult<Arc<Session>> {
        let mut reg = self.lock();
        if let Some(s) = reg.sessions.get(id) {
            s.last_used.store(self.tick(), Ordering::SeqCst);
            return Ok(s.clone());
        }
        let dir = self.session_dir(id);
        let meta_path = dir.join(SESSION_META);
        if !is_session_id(id) || !meta_path.exists() {
            return Err(no_session(id));
        }
        let meta: SessionMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| ServiceError::new(ErrorCode::Internal, format!("session {id}: {e}")))?;
        let mut state = load_scene(&dir)?;
        if state.generator.is_none() {
            state.generator = self.generator.clone();
        }
        let session = self.make_session(id.to_string(), state, meta);
        self.make_room(&mut reg)?;
        reg.sessions.insert(id.to_string(), session.clone());
        Ok(session)
    }

    fn insert(&self, state: SceneState, meta: SessionMeta) -> ServiceResult<Arc<Session>> {
        let mut reg = self.lock();
        let id = format!("s{:06}", reg.next_id);
        reg.next_id += 1;
        fs::write(self.data_dir.join(NEXT_ID_FILE), reg.next_id.to_string())?;
        let session = self.make_session(id.clone(), state, meta);
        self.make_room(&mut reg)?;
        reg.sessions.insert(id, session.clone());
        Ok(session)
    }

    fn make_session(&self, id: String, state: SceneState, meta: SessionMeta) -> Arc<Session> {
        Arc::new(Session {
            id,
            scene: RwLock::new(Scene {
                state,
                revision: meta.scene_revision,
            }),
            frames: AtomicU64::new(meta.frames),
            last_used: AtomicU64::new(self.tick()),
        })
    }

    /// Persists and drops idle least-recently-used sessions until one more
    /// fits. Sessions in use by a request are never evicted; if all are busy
    /// the registry briefly exceeds its capacity.
    fn make_room(&self, reg: &mut Registry) -> ServiceResult<()> {
        while reg.sessions.len() >= self.capacity {
            // Handles are only cloned under the registry lock, so a count of
            // one means no request holds this session.
            let victim = reg
                .sessions
                .values()
                .filter(|s| Arc::strong_count(s) == 1)
                .min_by_key(|s| s.last_used.load(Ordering::SeqCst))
                .map(|s| s.id.clone());
            let Some(id) = victim else { break };
            let session = reg.sessions.remove(&id).expect("victim is registered");
            self.persist(&session)?;
        }
        Ok(())
    }

    fn persist(&self, session: &Session) -> ServiceResult<()> {
        let dir = self.session_dir(&session.id);
        let scene = session.read();
        save_scene(&scene.state, &dir)?;
        let meta = SessionMeta {
            scene_revision: scene.revision,
            frames: session.frames.load(Ordering::SeqCst),
        };
        let text = serde_json::to_string(&meta).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))?;
        fs::write(dir.join(SESSION_META), text)?;
        Ok(())
    }
}

fn to_value<T: Serialize>(v: T) -> ServiceResult<Value> {
    serde_json::to_value(v).map_err(|e| ServiceError::new(ErrorCode::Internal, e.to_string()))
}

fn no_session(id: &str) -> ServiceError {
    ServiceError::new(ErrorCode::NoSession, format!("no session {id}"))
}

fn is_session_id(id: &str) -> bool {
    id.len() > 1 && id.starts_with('s') && id[1..].bytes().all(|b| b.is_ascii_digit())
}

fn check_finite(values: &[f64]) -> ServiceResult<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ServiceError::bad_request("angles and steps must be finite"))
    }
}

fn info(id: &str, scene: &Scene) -> SessionInfo {
    SessionInfo {
        session: id.to_string(),
        strategy: scene.state.strategy,
        scene_revision: scene.revision,
        width: scene.state.intrinsics.width,
        height: scene.state.intrinsics.height,
        points: scene.state.point_count(),
        has_generator: scene.state.generator.is_some(),
    }
}

/// Oracle view of fixture room `index` from its default camera position.
pub fn fixture_input(
    index: usize,
    heading: f64,
    intrinsics: Option<CameraIntrinsics>,
) -> ServiceResult<(InputView, CameraIntrinsics)> {
    if index >= FIXTURE_ROOMS {
        return Err(ServiceError::bad_request(format!(
            "fixture {index} out of range (0..{FIXTURE_ROOMS})"
        )));
    }
    let room = RoomSpec::random(index as u64);
    let k = intrinsics.unwrap_or_else(CameraIntrinsics::desk);
    let pose = Pose::from_translation(room.default_camera_position()).compose(&Pose::from_yaw_pitch(heading, 0.0));
    let (image, depth) = raycast_render(&room, &k, &pose)?;
    Ok((InputView { image, depth, pose }, k))
}

fn uploaded_input(
    image_b64: &str,
    depth_b64: &str,
    intrinsics: Option<CameraIntrinsics>,
) -> ServiceResult<(InputView, CameraIntrinsics)> {
    let decode = |s: &str, what: &str| {
        BASE64
            .decode(s)
            .map_err(|e| ServiceError::bad_request(format!("{what} is not base64: {e}")))
    };
    let image = Image::decode_png(&decode(image_b64, "image_png")?)?;
    let depth = DepthMap::decode_png_mm(&decode(depth_b64, "depth_png")?)?;
    if depth.width() != image.width() || depth.height() != image.height() {
        return Err(ServiceError::bad_request(format!(
            "image is {}x{} but depth is {}x{}",
            image.width(),
            image.height(),
            depth.width(),
            depth.height()
        )));
    }
    let k = match intrinsics {
        Some(k) => k,
        None => default_intrinsics(image.width(), image.height())?,
    };
    Ok((
        InputView {
            image,
            depth,
            pose: Pose::identity(),
        },
        k,
    ))
}

/// 90 degree horizontal field of view centered on the image.
pub fn default_intrinsics(width: usize, height: usize) -> outview::Result<CameraIntrinsics> {
    let f = width as f64 / 2.0;
    CameraIntrinsics::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
}

fn coverage_stats(view: &View, threshold: f64) -> CoverageStats {
    let c = view.coverage.as_slice();
    let n = c.len().max(1) as f64;
    CoverageStats {
        mean: c.iter().sum::<f64>() / n,
        covered_fraction: c.iter().filter(|&&v| v >= threshold).count() as f64 / n,
        hole_fraction: view.hole_fraction,
    }
}

pub fn coverage_png(coverage: &Grid<f64>) -> outview::Result<Vec<u8>> {
    let bytes: Vec<u8> = coverage
        .as_slice()
        .iter()
        .map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(coverage.width() as u32, coverage.height() as u32, bytes)
        .ok_or_else(|| outview::Error::Shape("coverage buffer size".into()))?;
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}
