//! Task templates: the slot patterns that wrap examples and queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Lit(String),
    Input,
    Output,
}

fn parse_pattern(pattern: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut rest = pattern;
    loop {
        let next = [("{input}", Segment::Input), ("{output}", Segment::Output)]
            .into_iter()
            .filter_map(|(tag, seg)| rest.find(tag).map(|pos| (pos, tag.len(), seg)))
            .min_by_key(|(pos, _, _)| *pos);
        match next {
            Some((pos, len, seg)) => {
                if pos > 0 {
                    out.push(Segment::Lit(rest[..pos].to_string()));
                }
                out.push(seg);
                rest = &rest[pos + len..];
            }
            None => {
                if !rest.is_empty() {
                    out.push(Segment::Lit(rest.to_string()));
                }
                return out;
            }
        }
    }
}

fn count(segments: &[Segment], which: &Segment) -> usize {
    segments.iter().filter(|s| *s == which).count()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTemplate {
    example_pattern: String,
    #[serde(default = "default_separator")]
    separator: String,
    query_pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_joiner: Option<String>,
}

fn default_separator() -> String {
    "\n\n".to_string()
}

/// Wraps labelled examples as `example_pattern` and the query as
/// `query_pattern`, which ends at the answer cue.
///
/// Two-segment tasks (premise/hypothesis) store both segments in one text,
/// joined by `pair_joiner` when the dataset is loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct PromptTemplate {
    example_pattern: String,
    separator: String,
    query_pattern: String,
    pair_joiner: Option<String>,
    example: Vec<Segment>,
    query: Vec<Segment>,
}

impl TryFrom<RawTemplate> for PromptTemplate {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        let mut t = PromptTemplate::new(&raw.example_pattern, &raw.separator, &raw.query_pattern)?;
        t.pair_joiner = raw.pair_joiner;
        Ok(t)
    }
}

impl From<PromptTemplate> for RawTemplate {
    fn from(t: PromptTemplate) -> Self {
        RawTemplate {
            example_pattern: t.example_pattern,
            separator: t.separator,
            query_pattern: t.query_pattern,
            pair_joiner: t.pair_joiner,
        }
    }
}

impl PromptTemplate {
    pub fn new(example_pattern: &str, separator: &str, query_pattern: &str) -> Result<Self> {
        let example = parse_pattern(example_pattern);
        let query = parse_pattern(query_pattern);
        if count(&example, &Segment::Input) != 1 || count(&example, &Segment::Output) != 1 {
            return Err(Error::Config(format!(
                "example pattern {example_pattern:?} must contain exactly one {{input}} and one {{output}}"
            )));
        }
        if count(&query, &Segment::Input) != 1 || count(&query, &Segment::Output) != 0 {
            return Err(Error::Config(format!(
                "query pattern {query_pattern:?} must contain exactly one {{input}} and no {{output}}"
            )));
        }
        Ok(PromptTemplate {
            example_pattern: example_pattern.to_string(),
            separator: separator.to_string(),
            query_pattern: query_pattern.to_string(),
            pair_joiner: None,
            example,
            query,
        })
    }

    pub fn with_pair_joiner(mut self, joiner: &str) -> Self {
        self.pair_joiner = Some(joiner.to_string());
        self
    }

    pub fn example_pattern(&self) -> &str {
        &self.example_pattern
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn query_pattern(&self) -> &str {
        &self.query_pattern
    }

    pub fn pair_joiner(&self) -> Option<&str> {
        self.pair_joiner.as_deref()
    }

    pub fn fill_example(&self, input: &str, output: &str) -> String {
        fill(&self.example, input, output)
    }

    pub fn fill_query(&self, input: &str) -> String {
        fill(&self.query, input, "")
    }

    /// Hex SHA-256 over the three patterns, used in cache keys.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for part in [&self.example_pattern, &self.separator, &self.query_pattern] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn fill(segments: &[Segment], input: &str, output: &str) -> String {
    let mut s = String::new();
    for seg in segments {
        match seg {
            Segment::Lit(l) => s.push_str(l),
            Segment::Input => s.push_str(input),
            Segment::Output => s.push_str(output),
        }
    }
    s
}

/// A bundled task preset: template plus label space.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub template: PromptTemplate,
    pub labels: Vec<&'static str>,
}

const PRESET_NAMES: [&str; 10] = [
    "sst2", "subj", "mpqa", "agnews", "cb", "cr", "dbpedia", "mr", "rte", "trec",
];

pub fn preset_names() -> &'static [&'static str] {
    &PRESET_NAMES
}

/// Templates and label spaces for the ten standard text-classification tasks.
pub fn preset(name: &str) -> Option<Preset> {
    let key = name.to_ascii_lowercase();
    let (name, example, query, joiner, labels): (_, _, _, Option<&str>, Vec<&'static str>) =
        match key.as_str() {
            "sst2" => ("sst2", "Review: {input}\nSentiment: {output}", "Review: {input}\nSentiment:", None, vec!["negative", "positive"]),
            "subj" => ("subj", "Input: {input}\nType: {output}", "Input: {input}\nType:", None, vec!["subjective", "objective"]),
            "mpqa" => ("mpqa", "Review: {input}\nSentiment: {output}", "Review: {input}\nSentiment:", None, vec!["negative", "positive"]),
            "agnews" => ("agnews", "Input: {input}\nType: {output}", "Input: {input}\nType:", None, vec!["world", "sports", "business", "technology"]),
            "cb" => ("cb", "Premise: {input}\nPrediction: {output}", "Premise: {input}\nPrediction:", Some("\nHypothesis: "), vec!["False", "True", "Neither"]),
            "cr" => ("cr", "Review: {input}\nSentiment: {output}", "Review: {input}\nSentiment:", None, vec!["negative", "positive"]),
            "dbpedia" => ("dbpedia", "Input: {input}\nType: {output}", "Input: {input}\nType:", None, vec![
                "company", "school", "artist", "athlete", "politics", "transportation", "building",
                "nature", "village", "animal", "plant", "album", "film", "book",
            ]),
            "mr" => ("mr", "Review: {input}\nSentiment: {output}", "Review: {input}\nSentiment:", None, vec!["negative", "positive"]),
            "rte" => ("rte", "Premise: {input}\nPrediction: {output}", "Premise: {input}\nPrediction:", Some("\nHypothesis: "), vec!["false", "true"]),
            "trec" => ("trec", "Question: {input}\nType: {output}", "Question: {input}\nType:", None, vec![
                "description", "entity", "expression", "human", "location", "number",
            ]),
            _ => return None,
        };
    let mut template = PromptTemplate::new(example, "\n\n", query).expect("bundled templates are valid");
    if let Some(j) = joiner {
        template = template.with_pair_joiner(j);
    }
    Some(Preset { name, template, labels })
}
