//! Shared state between the iteration loop and the HTTP handlers.

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use ruleboost::annotation::{fleiss_kappa, Agreement, AnnotationError, AnnotationSession, Decision, SessionState};
use ruleboost::io::{read_json, write_json};
use ruleboost::pipeline::IterationReport;

/// Payload of `GET /api/session/next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub rule_id: String,
    pub rule_text: String,
    /// Rendered prompt with the `[MASK]` slot left in place.
    pub prompt: String,
    pub source_text: String,
    pub label_name: String,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub iteration: usize,
    pub state: SessionState,
    pub annotators: Vec<String>,
    pub candidates: usize,
    pub quorum: usize,
    pub decided: usize,
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressView {
    pub session_id: String,
    pub iteration: usize,
    pub decided: usize,
    pub expected: usize,
    /// Decisions per annotator, in session order.
    pub per_annotator: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub iteration: usize,
    /// Rules decided by every annotator.
    pub rules_rated: usize,
    pub p_bar: f64,
    pub p_e: f64,
    pub kappa: f64,
}

/// Per-iteration agreement plus the pooled figure over all sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub rows: Vec<AgreementRow>,
    pub overall: Option<PooledAgreement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledAgreement {
    pub rules_rated: usize,
    pub p_bar: f64,
    pub p_e: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    session: AnnotationSession,
}

#[derive(Default)]
struct Inner {
    labels: Vec<String>,
    session: Option<AnnotationSession>,
    history: Vec<AnnotationSession>,
    reports: Vec<IterationReport>,
    pending_dir: Option<PathBuf>,
}

/// Cloneable handle; all clones see the same session.
#[derive(Clone, Default)]
pub struct SessionStore {
    shared: Arc<(Mutex<Inner>, Condvar)>,
}

impl SessionStore {
    /// `labels` are class names in id order. With `pending_dir`, every
    /// decision is persisted so a restarted run can pick the session up.
    pub fn new(labels: Vec<String>, pending_dir: Option<PathBuf>) -> Self {
        let store = Self::default();
        {
            let mut g = store.lock();
            g.labels = labels;
            g.pending_dir = pending_dir;
        }
        store
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Loads earlier reports and closed sessions, e.g. from a checkpoint.
    pub fn seed_history(&self, reports: Vec<IterationReport>, sessions: Vec<AnnotationSession>) {
        let mut g = self.lock();
        g.reports = reports;
        g.history = sessions;
    }

    /// Makes `session` the active one. Decisions saved for an identical
    /// session by an earlier process are restored.
    pub fn publish(&self, mut session: AnnotationSession) {
        let mut g = self.lock();
        if let Some(path) = pending_path(&g, session.iteration) {
            if let Ok(p) = read_json::<Pending>(&path) {
                if p.session.id == session.id
                    && p.session.candidates == session.candidates
                    && p.session.annotators == session.annotators
                {
                    log::info!("restored {} decisions for {}", p.session.decisions.len(), session.id);
                    session.decisions = p.session.decisions;
                }
            }
        }
        g.session = Some(session);
        self.shared.1.notify_all();
    }

    pub fn record(
        &self,
        rule_id: &str,
        annotator: &str,
        decision: Decision,
        elapsed_ms: Option<u64>,
    ) -> Result<ProgressView, StoreError> {
        let mut g = self.lock();
        let s = g.session.as_mut().ok_or(StoreError::NoSession)?;
        s.record_decision(rule_id, annotator, decision, elapsed_ms)?;
        let snapshot = Pending { session: s.clone() };
        let view = progress_view(s);
        if let Some(path) = pending_path(&g, snapshot.session.iteration) {
            if let Err(e) = write_json(&path, &snapshot) {
                log::warn!("could not persist pending decisions: {e}");
            }
        }
        self.shared.1.notify_all();
        Ok(view)
    }

    /// Blocks until the active session meets its quorum, then closes it for
    /// further decisions and returns it. `None` on timeout.
    pub fn wait_for_quorum(&self, timeout: Option<Duration>) -> Option<AnnotationSession> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut g = self.lock();
        loop {
            if let Some(s) = g.session.as_mut() {
                if s.is_open() && s.quorum_met() {
                    let done = s.clone();
                    s.state = SessionState::Closed;
                    let closed = s.clone();
                    g.history.push(closed);
                    self.shared.1.notify_all();
                    return Some(done);
                }
            }
            g = match deadline {
                None => self.shared.1.wait(g).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return None;
                    }
                    self.shared.1.wait_timeout(g, d - now).unwrap_or_else(|p| p.into_inner()).0
                }
            };
        }
    }

    /// Marks the active session closed without voting.
    pub fn abandon(&self) {
        let mut g = self.lock();
        if let Some(s) = g.session.as_mut() {
            s.state = SessionState::Closed;
        }
    }

    /// Records a finished iteration and drops its pending decisions file.
    pub fn push_report(&self, report: IterationReport) {
        let mut g = self.lock();
        if let Some(path) = pending_path(&g, report.iteration) {
            let _ = std::fs::remove_file(path);
        }
        g.reports.push(report);
    }

    pub fn next_for(&self, annotator: &str) -> Result<Option<CandidateView>, StoreError> {
        let g = self.lock();
        let s = g.session.as_ref().ok_or(StoreError::NoSession)?;
        Ok(s.next_for(annotator)?.map(|r| CandidateView {
            rule_id: r.id.clone(),
            rule_text: r.rule_text.clone(),
            prompt: r.prompt.clone(),
            source_text: r.source_text.clone(),
            label_name: g.labels.get(r.label.wrapping_sub(1)).cloned().unwrap_or_else(|| r.label.to_string()),
            iteration: r.iteration,
        }))
    }

    pub fn summary(&self) -> Option<SessionSummary> {
        let g = self.lock();
        g.session.as_ref().map(|s| {
            let p = s.progress();
            SessionSummary {
                id: s.id.clone(),
                iteration: s.iteration,
                state: s.state,
                annotators: s.annotators.clone(),
                candidates: s.candidates.len(),
                quorum: s.quorum,
                decided: p.decided,
                expected: p.expected,
            }
        })
    }

    pub fn progress(&self) -> Option<ProgressView> {
        self.lock().session.as_ref().map(progress_view)
    }

    pub fn reports(&self) -> Vec<IterationReport> {
        self.lock().reports.clone()
    }

    pub fn agreement(&self) -> AgreementTable {
        let g = self.lock();
        let mut rows = Vec::new();
        let mut pooled = Vec::new();
        let mut pooled_n = None;
        for s in &g.history {
            let m = s.rating_matrix();
            if let Some(a) = s.agreement() {
                rows.push(row(s.iteration, m.len(), a));
            }
            // pooling needs a constant number of raters per item
            if s.annotators.len() >= 2 && pooled_n.is_none_or(|n| n == s.annotators.len()) {
                pooled_n = Some(s.annotators.len());
                pooled.extend(m);
            }
        }
        let overall = fleiss_kappa(&pooled).ok().map(|a| PooledAgreement {
            rules_rated: pooled.len(),
            p_bar: a.p_bar,
            p_e: a.p_e,
            kappa: a.kappa,
        });
        AgreementTable { rows, overall }
    }
}

fn row(iteration: usize, rules_rated: usize, a: Agreement) -> AgreementRow {
    AgreementRow {
        iteration,
        rules_rated,
        p_bar: a.p_bar,
        p_e: a.p_e,
        kappa: a.kappa,
    }
}

fn pending_path(g: &Inner, iteration: usize) -> Option<PathBuf> {
    g.pending_dir
        .as_ref()
        .map(|d| d.join(format!("pending_{iteration:02}.json")))
}

fn progress_view(s: &AnnotationSession) -> ProgressView {
    let p = s.progress();
    ProgressView {
        session_id: s.id.clone(),
        iteration: s.iteration,
        decided: p.decided,
        expected: p.expected,
        per_annotator: s
            .annotators
            .iter()
            .map(|a| (a.clone(), s.decisions.iter().filter(|d| &d.annotator == a).count()))
            .collect(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("no active annotation session")]
    NoSession,
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}
