//! Speech comprehension stage: query compression, audio/instruction alignment and
//! instruction generation with a small language model.

pub mod align;
pub mod encoders;
pub mod lm;
pub mod losses;
pub mod templates;

pub use align::{paired_similarity_gap, retrieval_accuracy, train_align, AlignConfig, AlignReport, AvAlign};
pub use encoders::{QFormer, TextEncoder};
pub use lm::{generate_instruction, perplexity, train_lm, DecodeConfig, DecodeMode, GeneratedInstruction, LmConfig, TinyLm};
pub use losses::{contrastive_a2i_loss, cosine_matrix, cosine_similarity};
pub use templates::PromptTemplates;
