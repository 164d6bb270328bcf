//! Toolkit for evaluating how well chat providers retrieve and reason over
//! long personal-history contexts, plus the machinery that turns that
//! history into reusable memory: natural-language memory extraction with a
//! tag taxonomy, a BM25 + embedding-rerank retrieval pipeline, fine-tune
//! data synthesis with the `<|ME|>` prompt protocol, and a judged pilot
//! benchmark. Everything runs offline against deterministic mock providers.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod lpmdata;
pub mod memory;
pub mod needle;
pub mod niah;
pub mod provider;
pub mod ragpp;
pub mod sample;
pub mod store;
pub mod text;
pub mod util;
