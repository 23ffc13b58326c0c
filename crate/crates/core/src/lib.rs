//! Concept knowledge-graph mining over scholarly metadata: OpenAlex ingest,
//! hierarchy cleaning, complete concept paths, prevalence and novelty
//! statistics, a constrained four-stage extraction pipeline with expert
//! review, and set-coverage evaluation.

pub mod analytics;
pub mod evalharness;
pub mod http;
pub mod ingest;
pub mod kgstore;
pub mod paths;
pub mod pipeline;
pub mod share;
pub mod text;
