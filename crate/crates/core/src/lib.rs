//! Streaming attention-based sequence transduction.
//!
//! A listener (stacked LSTM/BLSTM, optionally latency-controlled and
//! pyramid-subsampled) encodes input frames; an attender selects listener
//! positions either globally or monotonically in chunks; a speller LSTM emits
//! tokens. Everything is differentiated by the small reverse-mode engine in
//! [`tensor`].

pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod harness;
pub mod io;
pub mod model;
pub mod rng;
pub mod speller;
pub mod tensor;
pub mod training;

pub use attention::{AttentionConfig, AttentionKind, ChunkPredictor, Smoothing};
pub use encoder::{Direction, EncoderStack, LayerSpec};
pub use tensor::{Graph, ParamStore, Tensor, Var};
