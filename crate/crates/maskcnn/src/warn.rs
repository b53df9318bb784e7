//! Minimal warning sink.
//!
//! Degenerate-input fallbacks (empty masks, all-zero pooling masks, ...) are
//! defined behaviors, not errors, but they should leave a trace. Warnings go
//! to stderr; code paths where tests need to observe a warning also record it
//! on the owning structure (e.g. [`crate::tensor::Graph::warnings`]).

pub(crate) fn emit(msg: &str) {
    eprintln!("warning: {msg}");
}
