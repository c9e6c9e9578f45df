//! Interactive sessions over a loaded library: the current ensemble, the
//! data selection, the error filter and the layout, each mutation bumping
//! a revision counter. [`SessionManager::dispatch`] is the single entry
//! point used by both the HTTP server and script replay.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataio::{self, Dataset, EncodedView};
use crate::ensemble::{
    self, auto_select, guard_check, EnsembleError, EnsembleState, GuardVerdict, Perf, SelectParams, SelectionTrace, Tracker,
};
use crate::layout::{
    self, attribute_layout, density_grid, model_space_coords, projection_frame_for, DensityGrid, GridSubset, LayoutError, LayoutFrame,
    LayoutMode, ModelPoint, Projection, TsneParams,
};
use crate::library::{self, LibraryError, ModelLibrary};
use crate::matrix::Matrix;
use crate::metrics::{MetricError, MetricName};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("cannot remove the last ensemble member")]
    LastMember,
    #[error("instance id {id} is not in the test set (n = {n})")]
    InstanceOutOfRange { id: usize, n: usize },
    #[error(transparent)]
    Ensemble(EnsembleError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

impl From<EnsembleError> for SessionError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Empty => SessionError::LastMember,
            other => SessionError::Ensemble(other),
        }
    }
}

impl SessionError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            SessionError::UnknownSession(_) => 404,
            SessionError::LastMember => 409,
            SessionError::Library(_) => 500,
            _ => 400,
        }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub tsne: TsneParams,
    /// Show only this many test instances (seeded sample); all when unset.
    pub viz_sample: Option<usize>,
    pub viz_seed: u64,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        Self {
            grid_cols: 20,
            grid_rows: 20,
            tsne: TsneParams::default(),
            viz_sample: None,
            viz_seed: 0,
        }
    }
}

/// A loaded dataset and library shared read-only by every session, plus
/// lazily computed projections of the test rows.
pub struct Workspace {
    pub ds: Dataset,
    pub view: EncodedView,
    pub lib: ModelLibrary,
    pub config: WorkspaceConfig,
    test_rows: Vec<usize>,
    /// Test-instance ids shown in frames, ascending.
    viz_ids: Vec<usize>,
    projections: Mutex<HashMap<String, Arc<Projection>>>,
}

impl Workspace {
    pub fn new(ds: Dataset, lib: ModelLibrary, config: WorkspaceConfig) -> Result<Self> {
        let view = dataio::encode(&ds).map_err(LibraryError::from)?;
        let test_rows = ds.test_rows();
        let n = test_rows.len();
        let viz_ids = match config.viz_sample {
            Some(k) if k < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.viz_seed);
                let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
                ids.sort_unstable();
                ids
            }
            _ => (0..n).collect(),
        };
        Ok(Self {
            ds,
            view,
            lib,
            config,
            test_rows,
            viz_ids,
            projections: Mutex::new(HashMap::new()),
        })
    }

    /// Loads the library in `dir` and the dataset it was built from.
    pub fn open(dir: impl AsRef<Path>, data: Option<&Path>, config: WorkspaceConfig) -> Result<Self> {
        let (ds, lib) = library::open_library(dir, data)?;
        Self::new(ds, lib, config)
    }

    pub fn n_test(&self) -> usize {
        self.test_rows.len()
    }

    /// Instances that appear in frames.
    pub fn viz_ids(&self) -> &[usize] {
        &self.viz_ids
    }

    fn viz_matrix(&self) -> Matrix {
        let rows: Vec<usize> = self.viz_ids.iter().map(|&i| self.test_rows[i]).collect();
        self.view.matrix.select_rows(&rows)
    }

    /// Projection of the test rows for a non-attribute mode, cached.
    pub fn projection(&self, mode: &LayoutMode) -> Result<Arc<Projection>> {
        let key = mode.to_string();
        if let Some(p) = self.projections.lock().expect("projection cache").get(&key) {
            return Ok(p.clone());
        }
        let x = self.viz_matrix();
        let proj = match mode {
            LayoutMode::Pca => layout::pca_2d(&x)?,
            LayoutMode::Mds => layout::mds_2d(&layout::euclidean_distances(&x))?,
            LayoutMode::Tsne => {
                let r = layout::tsne_2d(&x, &self.config.tsne)?;
                Projection {
                    coords: r.coords,
                    eigenvalues: [0.0, 0.0],
                    flags: vec![format!("kl={}", r.kl), format!("kl_after_exaggeration={}", r.kl_after_exaggeration)],
                }
            }
            LayoutMode::Attribute(_) => unreachable!("attribute layouts are not projections"),
        };
        let proj = Arc::new(proj);
        self.projections.lock().expect("projection cache").insert(key, proj.clone());
        Ok(proj)
    }

    /// The data-space frame for `ens` in `mode`.
    pub fn frame(&self, ens: &EnsembleState, mode: &LayoutMode) -> Result<LayoutFrame> {
        match mode {
            LayoutMode::Attribute(a) => {
                let mut frame = attribute_layout(ens, &self.ds, a)?;
                if self.viz_ids.len() < self.n_test() {
                    let keep = &self.viz_ids;
                    frame.points.retain(|p| keep.binary_search(&p.instance_id).is_ok());
                }
                Ok(frame)
            }
            other => {
                let proj = self.projection(other)?;
                let seed = matches!(other, LayoutMode::Tsne).then_some(self.config.tsne.seed);
                Ok(projection_frame_for(ens, &proj, &self.viz_ids, other.clone(), seed))
            }
        }
    }

    fn parse_metric(&self, s: &str) -> Result<MetricName> {
        Ok(MetricName::parse(s, self.lib.classes())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuardMode {
    Off,
    #[default]
    Warn,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct GuardPolicy {
    pub mode: GuardMode,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CreateParams {
    #[serde(default)]
    pub select: Option<SelectParams>,
    #[serde(default)]
    pub guard: Option<GuardPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0.min(self.x1) && x <= self.x0.max(self.x1) && y >= self.y0.min(self.y1) && y <= self.y0.max(self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SelectionBody {
    #[serde(default)]
    pub ids: Option<Vec<usize>>,
    #[serde(default)]
    pub rect: Option<Rect>,
    /// Layout the rectangle refers to; becomes the session's layout.
    #[serde(default)]
    pub mode: Option<String>,
}

/// The performance panel: current and initial automatic ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerfPanel {
    pub revision: u64,
    pub current: Perf,
    pub initial: Perf,
    pub members: Vec<MemberInfo>,
    pub initial_members: Vec<usize>,
    pub n_errors: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberInfo {
    pub model_id: usize,
    pub spec_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResponse {
    pub revision: u64,
    pub frame: LayoutFrame,
    pub density: DensityGrid,
    pub errors_density: DensityGrid,
    pub perf: PerfPanel,
    pub selection: Vec<usize>,
    pub effective_selection: Vec<usize>,
    pub errors_filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResponse {
    pub revision: u64,
    pub selection_size: usize,
    pub effective_size: usize,
    /// Effective selection is empty; `acc_local` is unavailable.
    pub empty: bool,
    pub local_accuracy: Option<Vec<f64>>,
    pub model_space: Option<ModelSpaceResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToggleResponse {
    pub revision: u64,
    pub model_id: usize,
    /// True when the toggle added the model.
    pub added: bool,
    /// False when strict guarding rolled the toggle back.
    pub applied: bool,
    pub verdict: GuardVerdict,
    pub perf: PerfPanel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpaceResponse {
    pub revision: u64,
    pub axis_x: String,
    pub axis_y: String,
    pub available: bool,
    pub reason: Option<String>,
    pub points: Vec<ModelPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub model_id: usize,
    pub spec_id: String,
    /// The model's own accuracy on the effective selection.
    pub acc_local: f64,
    /// Ensemble accuracy on the selection if this model were added.
    pub ensemble_local_after: f64,
    pub accuracy_test_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidatesResponse {
    pub revision: u64,
    pub selection_size: usize,
    pub ensemble_local: Option<f64>,
    /// Non-members, ranked by `acc_local` descending.
    pub ranked: Vec<Candidate>,
    /// Highest-ranked candidate whose addition raises the ensemble's
    /// accuracy on the selection.
    pub top_improving: Option<Candidate>,
    pub no_candidate: bool,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CvResponse {
    pub revision: u64,
    pub accuracy_cv: f64,
    pub members: usize,
}

/// Persistent session fields; derived matrices are rebuilt on restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub revision: u64,
    pub members: Vec<usize>,
    pub initial_members: Vec<usize>,
    pub selection: Vec<usize>,
    pub errors_filter: bool,
    pub layout_mode: LayoutMode,
    pub axis_x: String,
    pub axis_y: String,
    pub guard: GuardPolicy,
    pub dataset_fingerprint: String,
    pub trace: SelectionTrace,
    pub perf: Perf,
}

pub struct Session {
    pub id: String,
    ws: Arc<Workspace>,
    tracker: Tracker,
    ensemble: EnsembleState,
    initial: EnsembleState,
    trace: SelectionTrace,
    selection: Vec<usize>,
    errors_filter: bool,
    layout_mode: LayoutMode,
    axis_x: MetricName,
    axis_y: MetricName,
    guard: GuardPolicy,
    revision: u64,
}

impl Session {
    /// Runs automatic selection and starts from its result.
    pub fn create(ws: Arc<Workspace>, id: String, params: &CreateParams) -> Result<Self> {
        let select = params.select.clone().unwrap_or_default();
        let trace = auto_select(&ws.lib, &select)?;
        let tracker = Tracker::new(&ws.lib, &trace.final_members)?;
        let ensemble = tracker.state(&ws.lib)?;
        let first = ws
            .ds
            .attributes
            .first()
            .map(|a| a.name.clone())
            .ok_or_else(|| SessionError::BadRequest("dataset has no attributes".into()))?;
        Ok(Self {
            id,
            tracker,
            initial: ensemble.clone(),
            ensemble,
            trace,
            selection: Vec::new(),
            errors_filter: false,
            layout_mode: LayoutMode::Attribute(first),
            axis_x: MetricName::AucW,
            axis_y: MetricName::DivQ,
            guard: params.guard.unwrap_or_default(),
            revision: 0,
            ws,
        })
    }

    pub fn restore(ws: Arc<Workspace>, snap: &SessionSnapshot) -> Result<Self> {
        if snap.dataset_fingerprint != ws.lib.manifest.dataset_fingerprint {
            return Err(SessionError::BadRequest("snapshot belongs to a different library".into()));
        }
        let tracker = Tracker::new(&ws.lib, &snap.members)?;
        let ensemble = tracker.state(&ws.lib)?;
        let initial = ensemble::evaluate(&ws.lib, &snap.initial_members)?;
        let n = ws.n_test();
        if let Some(&id) = snap.selection.iter().find(|&&i| i >= n) {
            return Err(SessionError::InstanceOutOfRange { id, n });
        }
        Ok(Self {
            id: snap.session_id.clone(),
            tracker,
            ensemble,
            initial,
            trace: snap.trace.clone(),
            selection: snap.selection.clone(),
            errors_filter: snap.errors_filter,
            layout_mode: snap.layout_mode.clone(),
            axis_x: ws.parse_metric(&snap.axis_x)?,
            axis_y: ws.parse_metric(&snap.axis_y)?,
            guard: snap.guard,
            revision: snap.revision,
            ws,
        })
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let classes = self.ws.lib.classes();
        SessionSnapshot {
            session_id: self.id.clone(),
            revision: self.revision,
            members: self.ensemble.members.clone(),
            initial_members: self.initial.members.clone(),
            selection: self.selection.clone(),
            errors_filter: self.errors_filter,
            layout_mode: self.layout_mode.clone(),
            axis_x: self.axis_x.display(classes),
            axis_y: self.axis_y.display(classes),
            guard: self.guard,
            dataset_fingerprint: self.ws.lib.manifest.dataset_fingerprint.clone(),
            trace: self.trace.clone(),
            perf: self.ensemble.perf,
        }
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn ensemble(&self) -> &EnsembleState {
        &self.ensemble
    }

    pub fn initial_ensemble(&self) -> &EnsembleState {
        &self.initial
    }

    pub fn trace(&self) -> &SelectionTrace {
        &self.trace
    }

    pub fn selection(&self) -> &[usize] {
        &self.selection
    }

    pub fn layout_mode(&self) -> &LayoutMode {
        &self.layout_mode
    }

    pub fn errors_filter(&self) -> bool {
        self.errors_filter
    }

    /// The raw selection, restricted to misclassified instances when the
    /// error filter is on.
    pub fn effective_selection(&self) -> Vec<usize> {
        if self.errors_filter {
            self.selection.iter().copied().filter(|&i| !self.ensemble.correct[i]).collect()
        } else {
            self.selection.clone()
        }
    }

    pub fn perf_panel(&self) -> PerfPanel {
        PerfPanel {
            revision: self.revision,
            current: self.ensemble.perf,
            initial: self.initial.perf,
            members: self
                .ensemble
                .members
                .iter()
                .map(|&m| MemberInfo {
                    model_id: m,
                    spec_id: self.ws.lib.spec_id(m).to_string(),
                })
                .collect(),
            initial_members: self.initial.members.clone(),
            n_errors: self.ensemble.n_errors(),
            n_test: self.ws.n_test(),
        }
    }

    pub fn frame(&self, mode: Option<&LayoutMode>, cols: Option<usize>, rows: Option<usize>) -> Result<FrameResponse> {
        let mode = mode.unwrap_or(&self.layout_mode);
        let frame = self.ws.frame(&self.ensemble, mode)?;
        let cols = cols.unwrap_or(self.ws.config.grid_cols);
        let rows = rows.unwrap_or(self.ws.config.grid_rows);
        Ok(FrameResponse {
            revision: self.revision,
            density: density_grid(&frame, cols, rows, GridSubset::All)?,
            errors_density: density_grid(&frame, cols, rows, GridSubset::ErrorsOnly)?,
            frame,
            perf: self.perf_panel(),
            selection: self.selection.clone(),
            effective_selection: self.effective_selection(),
            errors_filter: self.errors_filter,
        })
    }

    pub fn set_layout(&mut self, mode: LayoutMode) -> Result<u64> {
        // validate before committing
        self.ws.frame(&self.ensemble, &mode)?;
        self.layout_mode = mode;
        self.revision += 1;
        Ok(self.revision)
    }

    pub fn set_axes(&mut self, x: &str, y: &str) -> Result<u64> {
        let (ax, ay) = (self.ws.parse_metric(x)?, self.ws.parse_metric(y)?);
        self.axis_x = ax;
        self.axis_y = ay;
        self.revision += 1;
        Ok(self.revision)
    }

    pub fn set_selection(&mut self, body: &SelectionBody) -> Result<SelectionResponse> {
        let ids = match (&body.ids, &body.rect) {
            (Some(ids), None) => {
                let n = self.ws.n_test();
                if let Some(&id) = ids.iter().find(|&&i| i >= n) {
                    return Err(SessionError::InstanceOutOfRange { id, n });
                }
                if let Some(m) = &body.mode {
                    self.layout_mode = m.parse()?;
                }
                ids.clone()
            }
            (None, Some(rect)) => {
                let mode = match &body.mode {
                    Some(m) => m.parse()?,
                    None => self.layout_mode.clone(),
                };
                let frame = self.ws.frame(&self.ensemble, &mode)?;
                self.layout_mode = mode;
                frame
                    .points
                    .iter()
                    .filter(|p| rect.contains(p.x, p.y))
                    .map(|p| p.instance_id)
                    .collect()
            }
            _ => return Err(SessionError::BadRequest("give exactly one of ids or rect".into())),
        };
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        self.selection = ids;
        self.revision += 1;

        let effective = self.effective_selection();
        let local_accuracy = if effective.is_empty() {
            None
        } else {
            Some(self.ws.lib.local_accuracy(&effective)?)
        };
        let model_space = if self.axis_x == MetricName::AccLocal || self.axis_y == MetricName::AccLocal {
            Some(self.model_space(None, None)?)
        } else {
            None
        };
        Ok(SelectionResponse {
            revision: self.revision,
            selection_size: self.selection.len(),
            effective_size: effective.len(),
            empty: effective.is_empty(),
            local_accuracy,
            model_space,
        })
    }

    pub fn toggle_model(&mut self, model_id: usize) -> Result<ToggleResponse> {
        let saved = self.tracker.clone();
        let added = self.tracker.toggle(&self.ws.lib, model_id)?;
        let after = self.tracker.state(&self.ws.lib)?;
        let verdict = match self.guard.mode {
            GuardMode::Off => GuardVerdict::Ok,
            _ => guard_check(&self.ensemble, &after, self.guard.tolerance),
        };
        let rollback = self.guard.mode == GuardMode::Strict && verdict != GuardVerdict::Ok;
        if rollback {
            self.tracker = saved;
        } else {
            if verdict != GuardVerdict::Ok {
                log::warn!("toggle of model {model_id} lowers test accuracy: {verdict:?}");
            }
            self.ensemble = after;
        }
        self.revision += 1;
        Ok(ToggleResponse {
            revision: self.revision,
            model_id,
            added,
            applied: !rollback,
            verdict,
            perf: self.perf_panel(),
        })
    }

    pub fn set_errors_filter(&mut self, on: bool) -> u64 {
        self.errors_filter = on;
        self.revision += 1;
        self.revision
    }

    /// Accuracy of the current members on the out-of-fold block.
    pub fn run_cv(&self) -> CvResponse {
        CvResponse {
            revision: self.revision,
            accuracy_cv: self.ensemble.perf.accuracy_cv,
            members: self.ensemble.members.len(),
        }
    }

    pub fn reset_to_auto(&mut self) -> Result<PerfPanel> {
        self.tracker = Tracker::new(&self.ws.lib, &self.initial.members)?;
        self.ensemble = self.initial.clone();
        self.revision += 1;
        Ok(self.perf_panel())
    }

    pub fn set_guard(&mut self, guard: GuardPolicy) -> u64 {
        self.guard = guard;
        self.revision += 1;
        self.revision
    }

    pub fn model_space(&self, x: Option<&str>, y: Option<&str>) -> Result<ModelSpaceResponse> {
        let ax = x.map(|s| self.ws.parse_metric(s)).transpose()?.unwrap_or(self.axis_x);
        let ay = y.map(|s| self.ws.parse_metric(s)).transpose()?.unwrap_or(self.axis_y);
        let classes = self.ws.lib.classes();
        let effective = self.effective_selection();
        let mut resp = ModelSpaceResponse {
            revision: self.revision,
            axis_x: ax.display(classes),
            axis_y: ay.display(classes),
            available: true,
            reason: None,
            points: vec![],
        };
        match model_space_coords(&self.ws.lib, &self.ensemble.members, ax, ay, Some(&effective)) {
            Ok(points) => resp.points = points,
            Err(LayoutError::Metric(MetricError::NoSelection)) => {
                resp.available = false;
                resp.reason = Some("acc_local needs a non-empty selection".into());
            }
            Err(e) => return Err(e.into()),
        }
        Ok(resp)
    }

    /// Non-members ranked by accuracy on the effective selection, with the
    /// effect of adding each one.
    pub fn candidates(&self) -> Result<CandidatesResponse> {
        let lib = &self.ws.lib;
        let effective = self.effective_selection();
        let mut resp = CandidatesResponse {
            revision: self.revision,
            selection_size: effective.len(),
            ensemble_local: None,
            ranked: vec![],
            top_improving: None,
            no_candidate: true,
            reason: None,
        };
        if effective.is_empty() {
            resp.reason = Some("selection is empty".into());
            return Ok(resp);
        }
        let truth = lib.test_labels();
        let local_of = |pred: &[usize]| crate::metrics::accuracy(pred, truth, Some(&effective));
        let current = local_of(&self.ensemble.pred)?;
        resp.ensemble_local = Some(current);
        let acc = lib.local_accuracy(&effective)?;
        let mut ranked = Vec::new();
        for m in (0..lib.len()).filter(|m| !self.tracker.contains(*m)) {
            let mut t = self.tracker.clone();
            t.toggle(lib, m)?;
            let s = t.state(lib)?;
            ranked.push(Candidate {
                model_id: m,
                spec_id: lib.spec_id(m).to_string(),
                acc_local: acc[m],
                ensemble_local_after: local_of(&s.pred)?,
                accuracy_test_after: s.perf.accuracy_test,
            });
        }
        ranked.sort_by(|a, b| b.acc_local.total_cmp(&a.acc_local).then(a.model_id.cmp(&b.model_id)));
        resp.top_improving = ranked.iter().find(|c| c.ensemble_local_after > current).cloned();
        resp.no_candidate = resp.top_improving.is_none();
        if resp.no_candidate {
            resp.reason = Some("no available model improves accuracy on the selection".into());
        }
        resp.ranked = ranked;
        Ok(resp)
    }
}

/// One API call. The HTTP routes and replay scripts both map onto this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ApiRequest {
    CreateSession {
        #[serde(default, flatten)]
        params: CreateParams,
    },
    Frame {
        session: String,
        #[serde(default)]
        mode: Option<String>,
        #[serde(default)]
        cols: Option<usize>,
        #[serde(default)]
        rows: Option<usize>,
    },
    Selection {
        session: String,
        #[serde(flatten)]
        body: SelectionBody,
    },
    Toggle {
        session: String,
        model_id: usize,
    },
    ErrorsFilter {
        session: String,
        on: bool,
    },
    ModelSpace {
        session: String,
        #[serde(default)]
        x: Option<String>,
        #[serde(default)]
        y: Option<String>,
    },
    Axes {
        session: String,
        x: String,
        y: String,
    },
    Layout {
        session: String,
        mode: String,
    },
    Guard {
        session: String,
        #[serde(flatten)]
        guard: GuardPolicy,
    },
    Cv {
        session: String,
    },
    Reset {
        session: String,
    },
    Perf {
        session: String,
    },
    Candidates {
        session: String,
    },
    Snapshot {
        session: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub revision: u64,
    pub trace: SelectionTrace,
    pub perf: PerfPanel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RevisionResponse {
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotResponse {
    pub revision: u64,
    pub snapshot: SessionSnapshot,
}

/// All sessions over one shared workspace. Mutations on a session are
/// serialized by its write lock; reads share the read lock.
pub struct SessionManager {
    ws: Arc<Workspace>,
    sessions: RwLock<HashMap<String, Arc<RwLock<Session>>>>,
    next_id: AtomicU64,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("responses serialize")
}

impl SessionManager {
    pub fn new(ws: Arc<Workspace>) -> Self {
        Self {
            ws,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn workspace(&self) -> &Arc<Workspace> {
        &self.ws
    }

    pub fn session(&self, id: &str) -> Result<Arc<RwLock<Session>>> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    /// Creates a session with the next sequential id (`s1`, `s2`, ...).
    pub fn create(&self, params: &CreateParams) -> Result<String> {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let s = Session::create(self.ws.clone(), id.clone(), params)?;
        self.sessions
            .write()
            .expect("session table")
            .insert(id.clone(), Arc::new(RwLock::new(s)));
        Ok(id)
    }

    pub fn insert(&self, s: Session) {
        self.sessions
            .write()
            .expect("session table")
            .insert(s.id.clone(), Arc::new(RwLock::new(s)));
    }

    fn read<T>(&self, id: &str, f: impl FnOnce(&Session) -> Result<T>) -> Result<T> {
        let s = self.session(id)?;
        let guard = s.read().expect("session lock");
        f(&guard)
    }

    fn write<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let s = self.session(id)?;
        let mut guard = s.write().expect("session lock");
        f(&mut guard)
    }

    pub fn dispatch(&self, req: &ApiRequest) -> Result<Value> {
        match req {
            ApiRequest::CreateSession { params } => {
                let id = self.create(params)?;
                self.read(&id, |s| {
                    Ok(to_value(&CreateResponse {
                        session_id: id.clone(),
                        revision: s.revision,
                        trace: s.trace.clone(),
                        perf: s.perf_panel(),
                    }))
                })
            }
            ApiRequest::Frame { session, mode, cols, rows } => {
                let mode = mode.as_deref().map(str::parse::<LayoutMode>).transpose()?;
                self.read(session, |s| Ok(to_value(&s.frame(mode.as_ref(), *cols, *rows)?)))
            }
            ApiRequest::Selection { session, body } => self.write(session, |s| Ok(to_value(&s.set_selection(body)?))),
            ApiRequest::Toggle { session, model_id } => self.write(session, |s| Ok(to_value(&s.toggle_model(*model_id)?))),
            ApiRequest::ErrorsFilter { session, on } => self.write(session, |s| {
                Ok(to_value(&RevisionResponse {
                    revision: s.set_errors_filter(*on),
                }))
            }),
            ApiRequest::ModelSpace { session, x, y } => self.read(session, |s| Ok(to_value(&s.model_space(x.as_deref(), y.as_deref())?))),
            ApiRequest::Axes { session, x, y } => self.write(session, |s| {
                Ok(to_value(&RevisionResponse {
                    revision: s.set_axes(x, y)?,
                }))
            }),
            ApiRequest::Layout { session, mode } => {
                let mode: LayoutMode = mode.parse()?;
                self.write(session, |s| {
                    Ok(to_value(&RevisionResponse {
                        revision: s.set_layout(mode)?,
                    }))
                })
            }
            ApiRequest::Guard { session, guard } => self.write(session, |s| {
                Ok(to_value(&RevisionResponse {
                    revision: s.set_guard(*guard),
                }))
            }),
            ApiRequest::Cv { session } => self.read(session, |s| Ok(to_value(&s.run_cv()))),
            ApiRequest::Reset { session } => self.write(session, |s| Ok(to_value(&s.reset_to_auto()?))),
            ApiRequest::Perf { session } => self.read(session, |s| Ok(to_value(&s.perf_panel()))),
            ApiRequest::Candidates { session } => self.read(session, |s| Ok(to_value(&s.candidates()?))),
            ApiRequest::Snapshot { session } => self.read(session, |s| {
                Ok(to_value(&SnapshotResponse {
                    revision: s.revision,
                    snapshot: s.snapshot(),
                }))
            }),
        }
    }
}

/// One line of replay output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRecord {
    pub line: usize,
    pub ok: bool,
    pub status: u16,
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub records: Vec<ReplayRecord>,
    /// Snapshot of every session at the end, by id.
    pub sessions: Vec<SessionSnapshot>,
}

/// Executes a JSONL script of [`ApiRequest`]s against fresh sessions.
/// Blank lines and lines starting with `#` are skipped; failing calls are
/// recorded and do not stop the script.
pub fn replay<R: BufRead>(ws: Arc<Workspace>, script: R) -> std::io::Result<ReplayOutcome> {
    let mgr = SessionManager::new(ws);
    let mut records = Vec::new();
    for (i, line) in script.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let record = match serde_json::from_str::<ApiRequest>(trimmed) {
            Ok(req) => match mgr.dispatch(&req) {
                Ok(v) => ReplayRecord {
                    line: i + 1,
                    ok: true,
                    status: 200,
                    response: v,
                },
                Err(e) => ReplayRecord {
                    line: i + 1,
                    ok: false,
                    status: e.status(),
                    response: serde_json::json!({ "error": e.to_string() }),
                },
            },
            Err(e) => ReplayRecord {
                line: i + 1,
                ok: false,
                status: 400,
                response: serde_json::json!({ "error": format!("bad request line: {e}") }),
            },
        };
        records.push(record);
    }
    let table = mgr.sessions.read().expect("session table");
    let mut ids: Vec<&String> = table.keys().collect();
    ids.sort_by_key(|id| (id.len(), (*id).clone()));
    let sessions = ids.iter().map(|id| table[*id].read().expect("session lock").snapshot()).collect();
    Ok(ReplayOutcome { records, sessions })
}

#[cfg(test)]
mod tests;
