//! Rationale-provider preference tuning on tiny built-in language models.
//!
//! The crate trains a small autoregressive model in three prompt modes
//! (instruction→answer, instruction→rationale, instruction+rationale→answer),
//! clones it into several rationale providers that are pushed apart by
//! preference optimization on disjoint data splits, then iteratively tunes the
//! providers on an end task: each provider proposes a rationale, candidates are
//! ranked by how much they raise the likelihood of the ground-truth answer
//! under the frozen instruction-tuned scorer, and the winner/eliminated pair
//! drives another round of preference optimization. Evaluation fine-tunes a
//! fresh base model on provider rationales and measures test accuracy and
//! perplexity.
//!
//! Everything runs at desk scale: word-level tokenization over closed synthetic
//! vocabularies, a tabular bigram and a k-gram MLP as reference models, exact
//! f64 arithmetic, and hand-derived gradients.

pub mod config;
pub mod corpus;
pub mod dpo;
pub mod ift;
pub mod lm;
pub mod pipeline;
pub mod prompting;
pub mod rundir;
