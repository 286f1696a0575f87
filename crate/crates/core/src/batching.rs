//! Sub/main relation index and a mini-batch sampler that places related
//! same-image question pairs in every batch.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synth::{QARecord, QType};

/// Many-to-one relation from sub-questions to their main question.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelationIndex {
    pub main_to_subs: BTreeMap<u64, Vec<u64>>,
    pub sub_to_main: BTreeMap<u64, u64>,
}

impl RelationIndex {
    /// Transcribes `related_main` links, rejecting links to a missing or
    /// non-main record and links that cross scenes.
    pub fn build(records: &[QARecord]) -> Result<Self> {
        let by_id: HashMap<u64, &QARecord> = records.iter().map(|r| (r.qa_id, r)).collect();
        let mut index = Self::default();
        for r in records {
            let Some(m) = r.related_main else { continue };
            let fail = |reason: String| Error::Integrity { qa_id: r.qa_id, reason };
            if !r.qtype.is_sub() {
                return Err(fail(format!("{} record linked to main {m}", r.qtype.as_str())));
            }
            let main = by_id.get(&m).ok_or_else(|| fail(format!("related main {m} not found")))?;
            if main.qtype != QType::Main {
                return Err(fail(format!("related record {m} is not a main question")));
            }
            if main.scene_id != r.scene_id {
                return Err(fail(format!(
                    "linked to main {m} of scene {} but belongs to scene {}",
                    main.scene_id, r.scene_id
                )));
            }
            index.main_to_subs.entry(m).or_default().push(r.qa_id);
            index.sub_to_main.insert(r.qa_id, m);
        }
        Ok(index)
    }

    pub fn is_empty(&self) -> bool {
        self.main_to_subs.is_empty()
    }

    pub fn main_of(&self, sub: u64) -> Option<u64> {
        self.sub_to_main.get(&sub).copied()
    }
}

/// `records` positions in batch order; `pair_positions` index into them as
/// `(sub_position, main_position)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub sample_ids: Vec<u64>,
    pub record_indices: Vec<usize>,
    pub pair_positions: Vec<(usize, usize)>,
}

/// Pairs occupy the leading `2 * pair_quota` slots (sub then main); the rest
/// is filled from a shuffled pass over all records. An epoch ends once every
/// record has been used as filler and every main has been paired at least
/// once; mains are visited round-robin in shuffled order and the sub is
/// drawn uniformly from that main's subs each time. When `batch_size` equals
/// `2 * pair_quota` there are no filler slots and an epoch only covers the
/// paired records.
#[derive(Debug, Clone)]
pub struct PairedBatchSampler {
    ids: Vec<u64>,
    /// `(main position, sub positions)` for every main with at least one sub.
    groups: Vec<(usize, Vec<usize>)>,
    batch_size: usize,
    pair_quota: usize,
    rng: ChaCha8Rng,
}

impl PairedBatchSampler {
    pub fn new(
        records: &[QARecord],
        relations: &RelationIndex,
        batch_size: usize,
        pair_quota: usize,
        seed: u64,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Usage("cannot sample batches from an empty split".into()));
        }
        if batch_size == 0 || batch_size < 2 * pair_quota {
            return Err(Error::Usage(format!(
                "batch size {batch_size} cannot hold {pair_quota} pairs"
            )));
        }
        let pos: HashMap<u64, usize> = records.iter().enumerate().map(|(i, r)| (r.qa_id, i)).collect();
        let groups: Vec<(usize, Vec<usize>)> = relations
            .main_to_subs
            .iter()
            .filter_map(|(m, subs)| {
                let subs: Vec<usize> = subs.iter().filter_map(|s| pos.get(s).copied()).collect();
                Some((*pos.get(m)?, subs)).filter(|(_, s)| !s.is_empty())
            })
            .collect();
        let mut quota = pair_quota;
        if quota > groups.len() {
            log::warn!(
                "pair quota {pair_quota} exceeds the {} available main questions; using {}",
                groups.len(),
                groups.len()
            );
            quota = groups.len();
        }
        Ok(Self {
            ids: records.iter().map(|r| r.qa_id).collect(),
            groups,
            batch_size,
            pair_quota: quota,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Effective pairs per batch after clamping.
    pub fn pair_quota(&self) -> usize {
        self.pair_quota
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// The batches of one epoch; successive calls continue the random stream.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let n = self.ids.len();
        let fill = self.batch_size - 2 * self.pair_quota;
        let mut fillers: Vec<usize> = (0..n).collect();
        fillers.shuffle(&mut self.rng);
        let mut mains: Vec<usize> = (0..self.groups.len()).collect();
        mains.shuffle(&mut self.rng);

        let by_fill = if fill == 0 { 0 } else { n.div_ceil(fill) };
        let by_pairs = if self.pair_quota == 0 { 0 } else { self.groups.len().div_ceil(self.pair_quota) };
        let count = by_fill.max(by_pairs).max(1);

        let mut next_main = 0;
        let mut next_filler = 0;
        let mut batches = Vec::with_capacity(count);
        for _ in 0..count {
            let mut idx = Vec::with_capacity(self.batch_size);
            let mut pairs = Vec::with_capacity(self.pair_quota);
            for _ in 0..self.pair_quota {
                let (main, subs) = &self.groups[mains[next_main % mains.len()]];
                next_main += 1;
                let sub = subs[self.rng.random_range(0..subs.len())];
                pairs.push((idx.len(), idx.len() + 1));
                idx.push(sub);
                idx.push(*main);
            }
            let take = fill.min(n - next_filler.min(n));
            idx.extend_from_slice(&fillers[next_filler..next_filler + take]);
            next_filler += take;
            batches.push(Batch {
                sample_ids: idx.iter().map(|&i| self.ids[i]).collect(),
                record_indices: idx,
                pair_positions: pairs,
            });
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Region;
    use std::collections::HashSet;

    fn rec(qa_id: u64, scene_id: u64, qtype: QType, related_main: Option<u64>) -> QARecord {
        QARecord {
            qa_id,
            scene_id,
            question_tokens: vec![],
            qtype,
            region: Region::whole(64, 64),
            answer: 0,
            related_main,
        }
    }

    fn toy(scenes: u64) -> Vec<QARecord> {
        let mut out = Vec::new();
        for s in 0..scenes {
            let m = s * 10;
            out.push(rec(m, s, QType::Main, None));
            out.push(rec(m + 1, s, QType::SubWhole, Some(m)));
            out.push(rec(m + 2, s, QType::SubMacula, Some(m)));
            out.push(rec(m + 3, s, QType::IndRegion, None));
            out.push(rec(m + 4, s, QType::IndRegion, None));
        }
        out
    }

    #[test]
    fn transcribes_links() {
        let idx = RelationIndex::build(&toy(1)).unwrap();
        assert_eq!(idx.main_to_subs, BTreeMap::from([(0, vec![1, 2])]));
        assert_eq!(idx.main_of(2), Some(0));
        assert_eq!(idx.main_of(3), None);
        assert!(RelationIndex::build(&[rec(0, 0, QType::Main, None)]).unwrap().is_empty());
    }

    #[test]
    fn cross_scene_link_rejected() {
        let mut r = toy(2);
        r[1].related_main = Some(10);
        let err = RelationIndex::build(&r).unwrap_err();
        assert!(matches!(err, Error::Integrity { qa_id: 1, .. }));
    }

    #[test]
    fn composition_and_coverage() {
        let records = toy(40);
        let rel = RelationIndex::build(&records).unwrap();
        let mut s = PairedBatchSampler::new(&records, &rel, 64, 16, 9).unwrap();
        let epoch = s.epoch();
        let mut seen = HashSet::new();
        let mut paired_mains = HashSet::new();
        for b in &epoch {
            assert_eq!(b.pair_positions.len(), 16);
            assert!(b.sample_ids.len() <= 64);
            for &(i, j) in &b.pair_positions {
                let (sub, main) = (b.sample_ids[i], b.sample_ids[j]);
                assert_eq!(rel.main_of(sub), Some(main));
                paired_mains.insert(main);
            }
            seen.extend(b.sample_ids.iter().copied());
        }
        assert_eq!(seen.len(), records.len());
        assert_eq!(paired_mains.len(), 40);
        assert_eq!(epoch[0].sample_ids.len(), 64);
    }

    #[test]
    fn zero_quota_is_plain_batches() {
        let records = toy(10);
        let rel = RelationIndex::build(&records).unwrap();
        let mut s = PairedBatchSampler::new(&records, &rel, 16, 0, 1).unwrap();
        let epoch = s.epoch();
        assert_eq!(epoch.len(), 4);
        assert!(epoch.iter().all(|b| b.pair_positions.is_empty()));
        assert_eq!(epoch.iter().map(|b| b.sample_ids.len()).sum::<usize>(), 50);
    }

    #[test]
    fn quota_clamped_and_validated() {
        let records = toy(3);
        let rel = RelationIndex::build(&records).unwrap();
        let s = PairedBatchSampler::new(&records, &rel, 64, 16, 1).unwrap();
        assert_eq!(s.pair_quota(), 3);
        assert!(PairedBatchSampler::new(&records, &rel, 8, 5, 1).is_err());
        assert!(PairedBatchSampler::new(&[], &rel, 8, 1, 1).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let records = toy(12);
        let rel = RelationIndex::build(&records).unwrap();
        let mut a = PairedBatchSampler::new(&records, &rel, 16, 4, 5).unwrap();
        let mut b = PairedBatchSampler::new(&records, &rel, 16, 4, 5).unwrap();
        assert_eq!(a.epoch(), b.epoch());
        assert_eq!(a.epoch(), b.epoch());
        let mut c = PairedBatchSampler::new(&records, &rel, 16, 4, 6).unwrap();
        assert_ne!(a.epoch(), c.epoch());
    }
}
