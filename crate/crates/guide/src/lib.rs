// mdbook can only test snippets that use nothing beyond std, and every
// chapter of the guide needs the library. Each chapter is therefore pulled
// in here as the documentation of an empty module, and `cargo test` runs
// its code blocks as ordinary doc-tests with the workspace crates available.
//
// One module per chapter keeps failures traceable: the test name carries
// the module name and the line within the chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/graphs.md")]
pub mod graphs {}

#[doc = include_str!("../../../book/src/dynamic.md")]
pub mod dynamic {}

#[doc = include_str!("../../../book/src/supernet.md")]
pub mod supernet {}

#[doc = include_str!("../../../book/src/search.md")]
pub mod search {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
