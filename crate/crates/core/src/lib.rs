pub mod frame;
pub mod geometry;
pub mod synth;
pub mod tum;
pub mod features;
pub mod mapping;
pub mod tracking;
pub mod densestereo;
pub mod fusion;
pub mod interact;
pub mod eval;
pub mod pipeline;
pub mod serve;
