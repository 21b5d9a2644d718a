pub mod channel;
pub mod codec;
pub mod diffcore;
pub mod reward;
pub mod trainer;
pub mod oracles;
pub mod harness;
