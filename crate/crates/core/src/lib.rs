//! Code search over compiled methods.
//!
//! A method's bytecode listing is turned into one English sentence per
//! instruction by simulating the operand stack ([`translator`]). Two
//! attention encoders map the translation and a natural-language comment
//! into one vector space ([`encoder`], [`trainer`]). Queries are answered by
//! cosine ranking over the embedded translations ([`retrieval`]).

pub mod cli;
pub mod disasm;
pub mod encoder;
pub mod pipeline;
pub mod retrieval;
pub mod ruleset;
pub mod text;
pub mod trainer;
pub mod translator;
