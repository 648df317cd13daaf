pub mod attention;
pub mod autodiff;
pub mod corpus;
pub mod cvae;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod seqmodel;
pub mod synthetic;
pub mod training;
