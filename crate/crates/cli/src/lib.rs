//! Front ends for the gensim engine: an HTTP control plane and the
//! `gensim` command-line tool.

pub mod api;
