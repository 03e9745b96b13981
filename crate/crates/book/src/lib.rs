//! Chapters of the guide in `book/`, compiled here so that `cargo test`
//! runs every listing as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../../book/src/gqmv.md")]
pub mod gqmv {}
#[doc = include_str!("../../../book/src/forward.md")]
pub mod forward {}
#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/tokenizer.md")]
pub mod tokenizer {}
#[doc = include_str!("../../../book/src/file-format.md")]
pub mod file_format {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
