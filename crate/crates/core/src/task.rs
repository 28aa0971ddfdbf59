//! Downstream task definitions: prompt templates, candidate answers,
//! description templates, and evaluation protocol per task.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task '{0}'")]
    UnknownTask(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Close-ended: score every candidate completion by log-likelihood and
    /// predict the argmax.
    Ranked,
    /// Open-ended: decode greedily and check the answer appears in the
    /// response as a contiguous token subsequence.
    GenerativeContains,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    Auc,
}

/// The four built-in synthetic tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskId {
    /// 4-way shape recognition, close-ended, accuracy.
    Shapes,
    /// Shape recognition over an alternative rendering distribution; used
    /// by the cross-dataset generalization suite.
    ShapesAlt,
    /// Object counting 1-5, open-ended generative, accuracy by containment.
    Count,
    /// "is there a red object" yes/no ranking, scored by AUC.
    Presence,
}

impl TaskId {
    pub fn parse(name: &str) -> Result<TaskId, TaskError> {
        match name {
            "shapes" => Ok(TaskId::Shapes),
            "shapes-alt" => Ok(TaskId::ShapesAlt),
            "count" => Ok(TaskId::Count),
            "presence" => Ok(TaskId::Presence),
            other => Err(TaskError::UnknownTask(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskId::Shapes => "shapes",
            TaskId::ShapesAlt => "shapes-alt",
            TaskId::Count => "count",
            TaskId::Presence => "presence",
        }
    }
}

/// One downstream task: how to prompt, what the answers are, how to build
/// the per-sample description, and how to score predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub eval_mode: EvalMode,
    pub metric: Metric,
    pub prompt_template: String,
    pub candidates: Vec<String>,
    /// Template with a `{}` placeholder for the ground-truth description.
    pub description_template: String,
}

impl TaskSpec {
    pub fn of(id: TaskId) -> TaskSpec {
        let spec = match id {
            TaskId::Shapes | TaskId::ShapesAlt => TaskSpec {
                id,
                name: id.name().to_string(),
                eval_mode: EvalMode::Ranked,
                metric: Metric::Accuracy,
                prompt_template: "this is a photo of a".to_string(),
                candidates: ["circle", "square", "triangle", "cross"].map(String::from).to_vec(),
                description_template: "this is a photo of a {}".to_string(),
            },
            TaskId::Count => TaskSpec {
                id,
                name: id.name().to_string(),
                eval_mode: EvalMode::GenerativeContains,
                metric: Metric::Accuracy,
                prompt_template: "how many objects are there".to_string(),
                candidates: ["one", "two", "three", "four", "five"].map(String::from).to_vec(),
                description_template: "there are {} objects".to_string(),
            },
            TaskId::Presence => TaskSpec {
                id,
                name: id.name().to_string(),
                eval_mode: EvalMode::Ranked,
                metric: Metric::Auc,
                prompt_template: "is there a red object in the image".to_string(),
                candidates: ["no", "yes"].map(String::from).to_vec(),
                description_template: "there are {} in the image".to_string(),
            },
        };
        spec.validate();
        spec
    }

    pub fn parse(name: &str) -> Result<TaskSpec, TaskError> {
        Ok(TaskSpec::of(TaskId::parse(name)?))
    }

    fn validate(&self) {
        match self.eval_mode {
            EvalMode::Ranked => {
                assert!(self.candidates.len() >= 2, "ranked task '{}' needs >=2 candidates", self.name)
            }
            EvalMode::GenerativeContains => {}
        }
        if self.metric == Metric::Auc {
            assert!(
                self.eval_mode == EvalMode::Ranked && self.candidates.len() == 2,
                "AUC requires a ranked task with exactly 2 candidates"
            );
        }
    }

    pub fn describe(&self, filler: &str) -> String {
        self.description_template.replace("{}", filler)
    }

    /// Number of label classes used for balancing and separability.
    pub fn class_count(&self) -> usize {
        self.candidates.len()
    }
}
