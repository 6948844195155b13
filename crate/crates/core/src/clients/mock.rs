//! In-process LLM doubles for tests and offline runs.

use std::sync::Mutex;

use async_trait::async_trait;

use super::{ClientError, LlmClient};

/// Replays canned completions in order; the last one repeats once the script
/// runs out.
#[derive(Debug)]
pub struct ScriptedLlm {
    script: Vec<String>,
    next: Mutex<usize>,
    max_prompt_bytes: Option<usize>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedLlm {
    pub fn new(script: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let script: Vec<String> = script.into_iter().map(Into::into).collect();
        assert!(!script.is_empty(), "script needs at least one completion");
        Self {
            script,
            next: Mutex::new(0),
            max_prompt_bytes: None,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn with_prompt_limit(mut self, limit: usize) -> Self {
        self.max_prompt_bytes = Some(limit);
        self
    }

    /// Every prompt received so far.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("poisoned").clone()
    }
}

#[async_trait]
impl LlmClient for ScriptedLlm {
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        if prompt.trim().is_empty() {
            return Err(ClientError::Precondition("prompt is empty".into()));
        }
        if let Some(limit) = self.max_prompt_bytes {
            if prompt.len() > limit {
                return Err(ClientError::RequestTooLarge {
                    size: prompt.len(),
                    limit,
                });
            }
        }
        self.prompts.lock().expect("poisoned").push(prompt.to_owned());
        let mut next = self.next.lock().expect("poisoned");
        let out = self.script[(*next).min(self.script.len() - 1)].clone();
        *next += 1;
        if out.trim().is_empty() {
            return Err(ClientError::Protocol("empty completion".into()));
        }
        Ok(out)
    }
}

/// Computes each completion from the prompt.
pub struct FnLlm<F>(pub F);

#[async_trait]
impl<F> LlmClient for FnLlm<F>
where
    F: Fn(&str) -> String + Send + Sync,
{
    async fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        if prompt.trim().is_empty() {
            return Err(ClientError::Precondition("prompt is empty".into()));
        }
        let out = (self.0)(prompt);
        if out.trim().is_empty() {
            return Err(ClientError::Protocol("empty completion".into()));
        }
        Ok(out)
    }
}
