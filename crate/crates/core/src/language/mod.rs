//! The language branch: query adapters, a small decoder over a closed
//! template vocabulary, and the task heads read from its hidden states.

mod branch;
mod qa;
mod vocab;

pub use branch::{
    answer_targets, vqa_loss, Adapted, Adapter, LanguageBranch, LanguageModel, LmOutput, PromptLayout, Segment,
    SequenceLayout, Slots,
};
pub use qa::{
    agent_behavior, builtin_vocabulary, motion_words, scene_qa, speed_words, QaCategory, QaPair, Slots as QaSlots,
    Template, TemplateSet, TEMPLATE_TEXT,
};
pub use vocab::{coordinate_words, number_token, parse_coordinate, Vocabulary, BOS, EOS, MAX_VOCAB, PAD, SEP};
