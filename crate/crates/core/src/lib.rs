//! Speculative decoding over small table-based language models.
//!
//! A draft model proposes candidate tokens that a target model verifies by
//! rejection sampling, which leaves the output law equal to the target's. How
//! many candidates to draft per round is decided by a [`policies::StoppingPolicy`]:
//! a fixed length, draft-confidence heuristics, or a threshold on the
//! predicted probability that some candidate is rejected, estimated by a
//! small trained head ([`predictor`]).
//!
//! [`oracle`] enumerates small instances exactly to check the output law and
//! the optimal stopping rule; [`metrics`] turns traces into rates, latency
//! and speedup.
//!
//! ```
//! use std::sync::Arc;
//! use specdec::distributions::{tokens, TokenId, Vocab};
//! use specdec::engine::{EngineConfig, SpecDecoder};
//! use specdec::lm::{perturb, LanguageModel, MarkovModel};
//! use specdec::policies::FixedK;
//! use specdec::seeds;
//!
//! let vocab = Vocab::new(8, TokenId(7))?;
//! let target: Arc<dyn LanguageModel> =
//!     Arc::new(MarkovModel::random(vocab, 1, 2.0, &mut seeds::rng(1)));
//! let draft: Arc<dyn LanguageModel> = Arc::new(perturb(target.clone(), 0.3, 1.3)?);
//! let decoder = SpecDecoder::new(target, draft, EngineConfig::new(32))?;
//! let trace = decoder.generate(&tokens(&[0]), &FixedK::new(4)?, &mut seeds::rng(7))?;
//! let c = trace.counters;
//! assert_eq!(c.n_draft + c.n_target, c.n + c.n_discarded);
//! # Ok::<(), specdec::Error>(())
//! ```

pub mod distributions;
pub mod engine;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod policies;
pub mod predictor;
pub mod seeds;

pub use error::{Error, Result};
