//! HTTP annotation service and the annotator source that waits on it.

pub mod annotators;
pub mod service;
pub mod store;

pub use annotators::HttpAnnotators;
pub use service::{router, spawn, ServiceHandle, ANNOTATOR_HEADER};
pub use store::{AgreementRow, AgreementTable, CandidateView, PooledAgreement, ProgressView, SessionStore, SessionSummary, StoreError};
