use std::collections::HashMap;
use std::path::Path;

use crate::batching::RelationIndex;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{encode_tokens, ModelInput};
use crate::synth::{Dataset, Image, QARecord, Split, Vocab};

/// Max tokens per question fed to the model.
pub const MAX_QUESTION_LEN: usize = 8;

/// One split ready for the model: records, encoded questions, scene images.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub split: Split,
    pub records: Vec<QARecord>,
    pub token_ids: Vec<Vec<usize>>,
    pub images: HashMap<u64, Image>,
    pub relations: RelationIndex,
}

impl SplitData {
    pub(crate) fn new(split: Split, records: Vec<QARecord>, images: HashMap<u64, Image>, vocab: &Vocab) -> Result<Self> {
        let token_ids = records
            .iter()
            .map(|r| encode_tokens(vocab, &r.question_tokens, MAX_QUESTION_LEN))
            .collect();
        let relations = RelationIndex::build(&records)?;
        for r in &records {
            if !images.contains_key(&r.scene_id) {
                return Err(Error::Integrity {
                    qa_id: r.qa_id,
                    reason: format!("no image for scene {}", r.scene_id),
                });
            }
        }
        Ok(Self {
            split,
            records,
            token_ids,
            images,
            relations,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn input(&self, i: usize) -> ModelInput<'_> {
        let r = &self.records[i];
        ModelInput {
            image: &self.images[&r.scene_id],
            region: &r.region,
            token_ids: &self.token_ids[i],
        }
    }
}

/// A verified dataset with every split prepared.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub dataset: Dataset,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl TrainingData {
    /// Loads and verifies `dir`, decoding the PNG images.
    pub fn load(dir: &Path, exec: Execution) -> Result<Self> {
        let dataset = Dataset::load(dir)?;
        dataset.verify()?;
        let load = |s| dataset.load_images(dir, s, exec);
        let (tr, va, te) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
        Self::assemble(dataset.clone(), [tr, va, te])
    }

    /// Uses in-memory rasterization; identical pixels to a disk round trip.
    pub fn from_dataset(dataset: Dataset, exec: Execution) -> Result<Self> {
        dataset.verify()?;
        let imgs = Split::ALL.map(|s| dataset.render_images(s, exec));
        Self::assemble(dataset, imgs)
    }

    fn assemble(dataset: Dataset, [tr, va, te]: [HashMap<u64, Image>; 3]) -> Result<Self> {
        let split = |s: Split, imgs| SplitData::new(s, dataset.records(s).to_vec(), imgs, &dataset.vocab);
        Ok(Self {
            train: split(Split::Train, tr)?,
            val: split(Split::Val, va)?,
            test: split(Split::Test, te)?,
            dataset: dataset.clone(),
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.dataset.vocab
    }
}
