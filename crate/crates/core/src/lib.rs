//! Line segment descriptors built on masked transformer attention.
//!
//! A line segment is treated as a sequence of sampled points: point
//! embeddings are read from a dense descriptor map, a masked transformer
//! summarizes them into a fixed-size descriptor through a learned `[LINE]`
//! slot, and a message-passing stage shares geometric context between the
//! lines of an image. Around the model sit the pieces needed to train and
//! evaluate it end to end on synthetic data: overlap ground truth,
//! subline/keyline aggregation, triplet training with semi-hard mining, and
//! line-based homography RANSAC with corner-error AUC metrics.

pub mod estimation;
pub mod eval;
pub mod geometry;
pub mod matching;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;
