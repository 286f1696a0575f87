use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::qa::{build_qa, question_tokens, verify_record, QARecord, QType, QaConfig, ANSWERS};
use super::raster::{rasterize, Image};
use super::scene::{generate_scene, GenConfig, Scene};
use crate::error::{Error, Result};
use crate::exec::Execution;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other}"))),
        }
    }
}

/// Answer vocabulary with class weights, plus the question-token vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub answers: Vec<String>,
    pub class_weights: Vec<f64>,
    pub tokens: Vec<String>,
}

impl Vocab {
    /// Token vocabulary over every question template; index 0 is the pad
    /// token, index 1 the unknown token.
    pub fn new(train: &[QARecord]) -> Self {
        let mut words: Vec<String> = QType::ALL.iter().flat_map(|&q| question_tokens(q)).collect();
        words.sort();
        words.dedup();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words);
        Self {
            answers: ANSWERS.iter().map(|s| s.to_string()).collect(),
            class_weights: class_weights(train),
            tokens,
        }
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.iter().position(|t| t == token).unwrap_or(1)
    }

    /// Hash of the answer and token vocabularies, pinned into checkpoints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.answers {
            h.update(a.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        hex::encode(h.finalize())
    }
}

/// Inverse answer frequency over `records`, normalized to mean 1. Answers
/// absent from the records get the largest observed weight.
pub fn class_weights(records: &[QARecord]) -> Vec<f64> {
    let mut counts = [0usize; ANSWERS.len()];
    for r in records {
        counts[r.answer] += 1;
    }
    let n = records.len().max(1) as f64;
    let k = ANSWERS.len() as f64;
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| n / (k * c as f64)))
        .collect();
    let fallback = raw.iter().flatten().cloned().fold(1.0f64, f64::max);
    let raw: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(fallback)).collect();
    let mean = raw.iter().sum::<f64>() / k;
    raw.into_iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub gen: GenConfig,
    pub qa: QaConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl DatasetConfig {
    /// Train/val/test scene counts of `n`, `n/4`, `n/3`.
    pub fn with_scenes(n: usize, seed: u64) -> Self {
        Self {
            gen: GenConfig::default(),
            qa: QaConfig::default(),
            train_scenes: n,
            val_scenes: n / 4,
            test_scenes: n / 3,
            seed,
        }
    }

    fn split_of(&self, scene_id: u64) -> Split {
        let id = scene_id as usize;
        if id < self.train_scenes {
            Split::Train
        } else if id < self.train_scenes + self.val_scenes {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn total_scenes(&self) -> usize {
        self.train_scenes + self.val_scenes + self.test_scenes
    }
}

/// Scenes, per-split question records and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub splits: BTreeMap<Split, Vec<QARecord>>,
    pub vocab: Vocab,
    pub channels: u32,
}

/// Stream 0 draws geometry, stream 1 draws questions.
fn scene_rngs(seed: u64, scene_id: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let base = seed.wrapping_add(scene_id);
    let geo = ChaCha8Rng::seed_from_u64(base);
    let mut qa = ChaCha8Rng::seed_from_u64(base);
    qa.set_stream(1);
    (geo, qa)
}

pub fn generate_dataset(config: &DatasetConfig, exec: Execution) -> Result<Dataset> {
    config.gen.validate()?;
    config.qa.validate()?;
    if config.train_scenes == 0 {
        return Err(Error::Config("at least one training scene is required".into()));
    }
    let total = config.total_scenes();
    let generated: Vec<Result<(Scene, ChaCha8Rng)>> = exec.map_range(total, |i| {
        let (mut geo, qa) = scene_rngs(config.seed, i as u64);
        generate_scene(&config.gen, i as u64, &mut geo).map(|s| (s, qa))
    });
    let mut scenes = Vec::with_capacity(total);
    let mut splits: BTreeMap<Split, Vec<QARecord>> =
        Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    let mut next_id = 0;
    for item in generated {
        let (scene, mut qa_rng) = item?;
        let recs = build_qa(&scene, &config.qa, &mut next_id, &mut qa_rng)?;
        splits
            .get_mut(&config.split_of(scene.scene_id))
            .expect("all splits present")
            .extend(recs);
        scenes.push(scene);
    }
    let vocab = Vocab::new(&splits[&Split::Train]);
    Ok(Dataset {
        scenes,
        splits,
        vocab,
        channels: config.gen.channels,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::json(path, e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    answers: Vec<String>,
    class_weights: Vec<f64>,
    tokens: Vec<String>,
    channels: u32,
}

impl Dataset {
    pub fn records(&self, split: Split) -> &[QARecord] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn scene(&self, scene_id: u64) -> Option<&Scene> {
        self.scenes
            .get(scene_id as usize)
            .filter(|s| s.scene_id == scene_id)
            .or_else(|| self.scenes.iter().find(|s| s.scene_id == scene_id))
    }

    /// Writes `images/`, `scenes.jsonl`, `qa_{split}.jsonl` and `vocab.json`.
    pub fn write(&self, dir: &Path, exec: Execution) -> Result<()> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        exec.map(&self.scenes, |s| {
            rasterize(s, self.channels).save_png(&images.join(format!("{}.png", s.scene_id)))
        })
        .into_iter()
        .collect::<Result<Vec<()>>>()?;
        write_jsonl(&dir.join("scenes.jsonl"), &self.scenes)?;
        for split in Split::ALL {
            write_jsonl(&dir.join(format!("qa_{}.jsonl", split.as_str())), self.records(split))?;
        }
        let vocab = VocabFile {
            answers: self.vocab.answers.clone(),
            class_weights: self.vocab.class_weights.clone(),
            tokens: self.vocab.tokens.clone(),
            channels: self.channels,
        };
        let path = dir.join("vocab.json");
        let text = serde_json::to_string_pretty(&vocab).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let scenes: Vec<Scene> = read_jsonl(&dir.join("scenes.jsonl"))?;
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            splits.insert(split, read_jsonl(&dir.join(format!("qa_{}.jsonl", split.as_str())))?);
        }
        let path = dir.join("vocab.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let v: VocabFile = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Ok(Self {
            scenes,
            splits,
            vocab: Vocab {
                answers: v.answers,
                class_weights: v.class_weights,
                tokens: v.tokens,
            },
            channels: v.channels,
        })
    }

    /// Loads the PNG of every scene referenced by `split`.
    pub fn load_images(&self, dir: &Path, split: Split, exec: Execution) -> Result<HashMap<u64, Image>> {
        let mut ids: Vec<u64> = self.records(split).iter().map(|r| r.scene_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let loaded = exec.map(&ids, |&id| {
            Image::load_png(&dir.join("images").join(format!("{id}.png")), self.channels)
                .map(|img| (id, img))
        });
        loaded.into_iter().collect()
    }

    /// Rasterizes in memory the images a PNG round trip would load.
    pub fn render_images(&self, split: Split, exec: Execution) -> HashMap<u64, Image> {
        let mut ids: Vec<u64> = self.records(split).iter().map(|r| r.scene_id).collect();
        ids.sort_unstable();
        ids.dedup();
        exec.map(&ids, |&id| {
            let scene = self.scene(id).expect("record references a known scene");
            (id, rasterize(scene, self.channels).quantized())
        })
        .into_iter()
        .collect()
    }

    /// Re-derives every answer from scene geometry and checks relation links
    /// and split disjointness. Fails on the first offending record.
    pub fn verify(&self) -> Result<()> {
        let mut scene_split: HashMap<u64, Split> = HashMap::new();
        for split in Split::ALL {
            let recs = self.records(split);
            let mains: HashMap<u64, u64> = recs
                .iter()
                .filter(|r| r.qtype == QType::Main)
                .map(|r| (r.qa_id, r.scene_id))
                .collect();
            for rec in recs {
                let scene = self.scene(rec.scene_id).ok_or_else(|| Error::Integrity {
                    qa_id: rec.qa_id,
                    reason: format!("unknown scene {}", rec.scene_id),
                })?;
                if let Some(prev) = scene_split.insert(rec.scene_id, split) {
                    if prev != split {
                        return Err(Error::Integrity {
                            qa_id: rec.qa_id,
                            reason: format!("scene {} appears in two splits", rec.scene_id),
                        });
                    }
                }
                let main_scene = rec.related_main.and_then(|m| mains.get(&m).copied());
                verify_record(scene, rec, main_scene)?;
            }
        }
        Ok(())
    }
}
