//! Library for simulating and detecting query-based model-extraction attacks
//! against graph neural networks served through a per-node prediction API.
//!
//! The pieces fit together as a pipeline:
//!
//! * [`graph`] — attributed graphs plus the algorithms everything else leans on
//!   (k-core decomposition, BFS distances, ego subgraphs, file loaders).
//! * [`victim`] — the served model: a two-layer graph convolutional classifier
//!   trained transductively, exposing predictions and hidden embeddings.
//! * [`attack`] — adversarial query generators (AGE / GRAIN / IGP), legitimate
//!   user simulators, surrogate training and fidelity-based sequence labeling.
//! * [`detector`] — k-core-scaled query embeddings and the differential fused
//!   GRU that turns a query stream into per-step detector state.
//! * [`ppo`] — the decision policy and its proximal-policy-optimization
//!   trainer, with hand-rolled reverse-mode differentiation from [`tape`].
//! * [`theory`] — executable checkers for the coverage/weight bounds that
//!   motivate the detector's first- and second-order difference features.
//! * [`markov`] — composite Markov chain over padded query lists, assigning
//!   likelihoods to query behaviors.
//! * [`harness`] — experiment orchestration: config parsing, the synthetic
//!   benchmark, splits, metrics, ablations and sweeps.

pub mod attack;
pub mod detector;
pub mod graph;
pub mod linalg;
pub mod ppo;
pub mod tape;
pub mod victim;
