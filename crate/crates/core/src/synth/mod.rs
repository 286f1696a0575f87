//! Procedural retinal-like scenes with exact DME grading ground truth, their
//! rasterization, and the question/answer records built on top of them.

mod dataset;
mod qa;
mod raster;
mod scene;

pub use dataset::{
    class_weights, generate_dataset, read_jsonl, Dataset, DatasetConfig, Split, Vocab, PAD_TOKEN,
    UNK_TOKEN,
};
pub use qa::{
    answer_for, build_qa, grade_answer, question_tokens, verify_record, yes_no, QARecord, QType,
    QaConfig, ANSWERS, ANSWER_NO, ANSWER_YES,
};
pub use raster::{rasterize, Image};
pub use scene::{
    generate_scene, grade_scene, region_contains_exudate, Blob, GenConfig, Point, Region,
    RegionKind, Scene, BACKGROUND_CEILING, EXUDATE_FLOOR,
};
