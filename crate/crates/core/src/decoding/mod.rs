//! CTC decoding, n-gram language models, N-best lists and evaluation metrics.

pub mod arpa;
pub mod beam;
pub mod metrics;
pub mod nbest;

pub use arpa::{load_arpa, ArpaNGram};
pub use beam::{beam_search, beam_search_batch, beam_search_with, greedy_ctc_decode, greedy_transcript, DecodeConfig};
pub use metrics::{corpus_wer, spearman_rho, wer, wer_counts, EditCounts};
pub use nbest::{read_nbest_file, write_nbest_file, Candidate, NBestList, NBestSource};
