//! Few-shot text classification by fitting a small classifier on LLM
//! features of demonstration-augmented prompts, plus the in-context
//! learning baselines it is compared against.
//!
//! The usual flow is [`pipeline::run_fads`]: sample `m` shots per class,
//! split them into demonstrations and a residual set, extract features for
//! residual and test samples through a [`extraction::Backend`], fit a
//! [`modulators::FittedModulator`] on the residual features and predict.

pub mod baselines;
pub mod data;
pub mod error;
pub mod extraction;
pub mod harness;
pub mod modulators;
pub mod pipeline;
pub mod prompting;
pub mod rng;
pub mod sampling;
pub mod template;

pub use baselines::{icl_predict, kl_divergence, knn_prompt_predict, knn_prompting_predict, NeighborK, NeighborVoteConfig};
pub use data::{synthetic_task, FeatureKind, FeatureVector, LabeledExample, SyntheticSpec, TaskDataset, Verbalizer};
pub use error::{Error, ErrorClass, Result, Stage};
pub use extraction::{Backend, BackendDescriptor, CacheDir, FeatureCache, MockBackend, MockConfig, RemoteConfig, VocabDistribution};
pub use harness::{compare_table, evaluate, RunResult};
pub use modulators::{FittedModulator, ModulatorKind};
pub use pipeline::{run, run_baseline, run_fads, ExperimentConfig, Method, ModelBundle, PredictionRecord, RunOutput};
pub use prompting::{render_prompt, RenderedPrompt};
pub use sampling::{sample_shots, split_train, DemoRegime, TrainSplit};
pub use template::PromptTemplate;
