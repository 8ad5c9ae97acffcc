//! Decision-theoretic core of a gaze-and-dialogue intent disambiguation
//! agent for tabletop stacking.

pub mod par;
pub mod pomdp;
pub mod solver;
pub mod model;
pub mod scene;
pub mod episode;
pub mod sim;
