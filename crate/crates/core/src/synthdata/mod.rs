//! Synthetic paired corpus with known generative factors: oracle visual
//! features, harmonic-voice audio, unit quantization and attribute targets.

mod corpus;
mod kmeans;
mod probe;
mod store;

pub use corpus::{
    gen_corpus, make_targets, AttributeTargets, Corpus, CorpusConfig, LatentFactors, SyntheticSample,
    SAMPLES_PER_VIDEO_FRAME,
};
pub use kmeans::{kmeans_fit, KMeansFit, KMeansModel, MAX_LLOYD_ITERS};
pub use probe::TimbreProbe;
pub use store::{load_corpus, save_corpus, TARGETS_HEADER};
