pub mod closed_loop;
pub mod episode;
pub mod expert;
pub mod map;
pub mod scenario;
pub mod world;
