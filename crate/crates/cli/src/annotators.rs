use std::time::Duration;

use ruleboost::annotation::AnnotationSession;
use ruleboost::pipeline::{AnnotationContext, AnnotatorSource, IterationReport, PipelineError};

use crate::store::SessionStore;

/// Hands each session to the HTTP service and blocks until human
/// annotators meet the quorum.
pub struct HttpAnnotators {
    pub store: SessionStore,
    /// `None` waits indefinitely.
    pub timeout: Option<Duration>,
}

impl AnnotatorSource for HttpAnnotators {
    fn annotate(
        &mut self,
        session: AnnotationSession,
        _ctx: &AnnotationContext<'_>,
    ) -> Result<AnnotationSession, PipelineError> {
        let t = session.iteration;
        log::info!(
            "session {} open: {} candidates for {} annotators",
            session.id,
            session.candidates.len(),
            session.annotators.len()
        );
        self.store.publish(session);
        match self.store.wait_for_quorum(self.timeout) {
            Some(s) => Ok(s),
            None => {
                self.store.abandon();
                Err(PipelineError::SessionTimeout(t))
            }
        }
    }

    fn on_report(&mut self, report: &IterationReport) {
        self.store.push_report(report.clone());
    }
}
