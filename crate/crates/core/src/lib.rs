pub mod evaluation;
pub mod features;
pub mod gbdt;
pub mod kb;
pub mod label;
pub mod llm;
pub mod mlp;
mod par;
pub mod pipeline;
pub mod prompting;
