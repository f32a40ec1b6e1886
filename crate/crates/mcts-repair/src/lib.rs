pub mod backend;
pub mod bench;
pub mod engine;
pub mod evaluation;
pub mod generation;
pub mod llm;
pub mod model;
pub mod tree;
pub mod validation;
