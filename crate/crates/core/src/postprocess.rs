//! Response post-processing.
//!
//! Every backend reply passes through a pipeline of stages before it is
//! logged and returned to the participant. The default pipeline is empty
//! (pass-through). Stages can be configured per study or added in code.

use std::sync::Arc;

use crate::backend::LlmResponse;
use crate::config::PostProcessStage;
use crate::session::Session;

pub trait ResponseStage: Send + Sync {
    fn apply(&self, text: String, response: &LlmResponse, session: &Session) -> String;
}

struct Identity;

impl ResponseStage for Identity {
    fn apply(&self, text: String, _: &LlmResponse, _: &Session) -> String {
        text
    }
}

struct StripTrailingWhitespace;

impl ResponseStage for StripTrailingWhitespace {
    fn apply(&self, mut text: String, _: &LlmResponse, _: &Session) -> String {
        let keep = text.trim_end().len();
        text.truncate(keep);
        text
    }
}

#[derive(Clone, Default)]
pub struct PostProcessPipeline {
    stages: Vec<Arc<dyn ResponseStage>>,
}

impl std::fmt::Debug for PostProcessPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PostProcessPipeline")
            .field("stages", &self.stages.len())
            .finish()
    }
}

impl PostProcessPipeline {
    pub fn from_config(stages: &[PostProcessStage]) -> Self {
        let mut p = Self::default();
        for s in stages {
            p = match s {
                PostProcessStage::Identity => p.with_stage(Identity),
                PostProcessStage::StripTrailingWhitespace => p.with_stage(StripTrailingWhitespace),
            };
        }
        p
    }

    pub fn with_stage(mut self, stage: impl ResponseStage + 'static) -> Self {
        self.stages.push(Arc::new(stage));
        self
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn run(&self, response: &LlmResponse, session: &Session) -> String {
        self.stages
            .iter()
            .fold(response.content.clone(), |text, stage| {
                stage.apply(text, response, session)
            })
    }
}

pub fn post_process_response(
    pipeline: &PostProcessPipeline,
    response: &LlmResponse,
    session: &Session,
) -> String {
    pipeline.run(response, session)
}
