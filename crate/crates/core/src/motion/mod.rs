//! Skeletons, motion clips, prompts, and the synthetic two-person corpus.

mod corpus;
mod sequence;
mod skeleton;
mod text;

pub use corpus::{
    generate_synthetic_corpus, load_corpus, mirror_matrix, reflect, rotation_to_6d, write_corpus,
    CorpusManifest, Family, InteractionSample, ManifestEntry, Normalizer, MANIFEST_FILE,
};
pub use sequence::{read_motion_file, write_motion_file, MotionSequence, FEATURE_DIM, MOT_MAGIC};
pub use skeleton::{level_adjacency, mean_matrix, pool_matrix, unpool_matrix, PoolingLevel, SkeletonTopology};
pub use text::{
    detokenize, token_id, tokenize, TextCondition, TextEncoder, TextPrompt, VOCABULARY, VOCAB_SIZE,
};

#[cfg(test)]
mod tests;
