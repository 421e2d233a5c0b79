//! Prompt construction: demonstrations wrapped by the task template,
//! joined by the separator, then the query up to its answer cue.

use serde::{Deserialize, Serialize};

use crate::data::{LabeledExample, Verbalizer};
use crate::error::Result;
use crate::template::PromptTemplate;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub demo_count: usize,
    /// Byte offset where the model's continuation begins (end of text).
    pub answer_cue_offset: usize,
    /// Byte length of the demonstration prefix, separator included.
    pub prefix_len: usize,
    /// The raw query text placed in the input slot.
    pub query: String,
}

impl RenderedPrompt {
    pub fn prefix(&self) -> &str {
        &self.text[..self.prefix_len]
    }
}

pub fn render_demonstration(t: &PromptTemplate, ex: &LabeledExample, v: &Verbalizer) -> Result<String> {
    Ok(t.fill_example(&ex.text, v.get(ex.label)?))
}

/// The rendered demonstration block shared by every query of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPrefix {
    template: PromptTemplate,
    text: String,
    demo_count: usize,
}

impl PromptPrefix {
    pub fn new(t: &PromptTemplate, demos: &[LabeledExample], v: &Verbalizer) -> Result<Self> {
        let mut text = String::new();
        for d in demos {
            text.push_str(&render_demonstration(t, d, v)?);
            text.push_str(t.separator());
        }
        Ok(PromptPrefix {
            template: t.clone(),
            text,
            demo_count: demos.len(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn demo_count(&self) -> usize {
        self.demo_count
    }

    pub fn wrap(&self, query: &str) -> RenderedPrompt {
        let mut text = self.text.clone();
        text.push_str(&self.template.fill_query(query));
        RenderedPrompt {
            answer_cue_offset: text.len(),
            prefix_len: self.text.len(),
            demo_count: self.demo_count,
            query: query.to_string(),
            text,
        }
    }
}

pub fn render_prompt(
    t: &PromptTemplate,
    demos: &[LabeledExample],
    v: &Verbalizer,
    query: &str,
) -> Result<RenderedPrompt> {
    Ok(PromptPrefix::new(t, demos, v)?.wrap(query))
}

/// Counts tokens for context-budget checks.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Four characters per token, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(4)
    }
}
