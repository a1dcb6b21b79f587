//! Independent reference implementations shared by integration tests.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;
pub mod scenes;
pub mod schedule;
