#![allow(dead_code)]

pub mod gradients;
pub mod published;
pub mod small;
