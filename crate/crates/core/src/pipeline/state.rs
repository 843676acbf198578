//! Checkpointed run state and on-disk layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{IterationReport, PipelineError};
use crate::annotation::AnnotationSession;
use crate::boosting::BoostState;
use crate::ensemble::{EnsembleMode, EnsembleModel};
use crate::io::{read_json, write_json, write_lines};
use crate::types::{Rule, WeakLabelRecord};

/// Everything needed to continue a run after the last completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub completed: usize,
    pub boost: BoostState,
    /// Stored as member files plus a manifest, not inline.
    #[serde(skip)]
    pub ensemble: EnsembleModel,
    pub accepted_rules: Vec<Rule>,
    /// Rejected candidates, kept so they are not proposed again.
    pub rejected_rules: Vec<Rule>,
    /// Current weak labels, in unlabeled-set order.
    pub records: Vec<WeakLabelRecord>,
    pub reports: Vec<IterationReport>,
    pub sessions: Vec<AnnotationSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRef {
    pub file: String,
    pub iteration: usize,
    pub alpha_t: f64,
    pub voting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub mode: EnsembleMode,
    pub members: Vec<MemberRef>,
}

/// Layout under the checkpoint directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn state(&self) -> PathBuf {
        self.root.join("checkpoints").join("state.json")
    }

    pub fn iteration_state(&self, t: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iteration_{t:02}.json"))
    }

    pub fn model(&self, t: usize) -> PathBuf {
        self.root.join("models").join(model_file(t))
    }

    pub fn ensemble(&self) -> PathBuf {
        self.root.join("models").join("ensemble.json")
    }

    pub fn accepted_rules(&self) -> PathBuf {
        self.root.join("rules").join("accepted.json")
    }

    pub fn session(&self, t: usize) -> PathBuf {
        self.root.join("sessions").join(format!("session_{t:02}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports").join("iterations.jsonl")
    }

    pub fn weak_labels(&self) -> PathBuf {
        self.root.join("weak").join("weak_labels.jsonl")
    }

    pub fn has_state(&self) -> bool {
        self.state().is_file()
    }

    pub fn load_state(&self) -> Result<RunState, PipelineError> {
        let mut state: RunState = read_json(&self.state())?;
        state.ensemble = self.load_ensemble()?;
        // the manifest is written first and may be one iteration ahead
        state.ensemble.members.retain(|m| m.model.iteration <= state.completed);
        Ok(state)
    }

    /// Loads the ensemble through its manifest.
    pub fn load_ensemble(&self) -> Result<EnsembleModel, PipelineError> {
        let manifest: EnsembleManifest = read_json(&self.ensemble())?;
        let dir = self.ensemble().parent().map(Path::to_path_buf).unwrap_or_default();
        let mut members = Vec::with_capacity(manifest.members.len());
        for m in manifest.members {
            members.push(crate::ensemble::Member {
                model: read_json(&dir.join(&m.file))?,
                voting: m.voting,
            });
        }
        Ok(EnsembleModel {
            mode: manifest.mode,
            members,
        })
    }

    /// Writes the per-iteration artifacts, then the resumable state last.
    pub fn save(&self, state: &RunState) -> Result<(), PipelineError> {
        let t = state.completed;
        if let Some(member) = state.ensemble.members.last() {
            write_json(&self.model(t), &member.model)?;
        }
        let manifest = EnsembleManifest {
            mode: state.ensemble.mode,
            members: state
                .ensemble
                .members
                .iter()
                .map(|m| MemberRef {
                    file: model_file(m.model.iteration),
                    iteration: m.model.iteration,
                    alpha_t: m.model.alpha_t,
                    voting: m.voting,
                })
                .collect(),
        };
        write_json(&self.ensemble(), &manifest)?;
        write_json(&self.accepted_rules(), &state.accepted_rules)?;
        if let Some(s) = state.sessions.iter().find(|s| s.iteration == t) {
            write_json(&self.session(t), s)?;
        }
        write_lines(&self.reports(), &state.reports)?;
        write_json(&self.iteration_state(t), state)?;
        write_json(&self.state(), state)?;
        Ok(())
    }
}

fn model_file(t: usize) -> String {
    format!("model_{t:02}.json")
}
