//! Shared by several test targets; each uses a different subset.
#![allow(dead_code)]

pub mod grad;
