#![allow(dead_code)]

pub mod grassmann;
