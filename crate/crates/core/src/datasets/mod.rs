//! Synthetic QA corpus, knowledge-set construction and JSONL I/O.

mod corpus;
mod jsonl;
mod splits;
mod types;

pub use corpus::{
    generate_corpus, join_docs, split_docs, Corpus, CorpusSpec, Entity, Relation, CLOZE_PREFIX,
    MIN_QUESTIONS_PER_ANSWER, PERSON_RELATION, RELATIONS,
};
pub use jsonl::{export_jsonl, import_jsonl, parse_jsonl, to_jsonl};
pub use splits::{
    build_eval_sets, build_forget_set, build_retain_set, build_sanitized_set,
    build_seeded_suite, forget_aliases, mentions_forget_alias, select_forget_answers, MixRatio,
    SeedBundle, SplitConfig,
};
pub use types::{
    render_example, render_prompt, KnowledgeSet, QaPair, SanitizationPhrase, SetLabel,
    DEFAULT_PHRASE, MAX_PHRASE_WORDS, PROMPT_HEADER,
};
