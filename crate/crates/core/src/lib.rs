pub mod desk;
pub mod evalkit;
pub mod grammarian;
pub mod librarian;
pub mod numerics;
pub mod pipeline;
pub mod reasoner;
pub mod synth;
pub mod text;
pub mod trainer;
