//! Batch simulation and analysis of LLM-driven agents playing the one-shot
//! ultimatum game.

pub mod analysis;
pub mod backend;
pub mod cli;
pub mod game;
pub mod parser;
pub mod prompt;
pub mod reference;
pub mod report;
pub mod runner;
