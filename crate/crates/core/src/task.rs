//! Synthetic captioning task.
//!
//! A scene places one to three coloured shapes in distinct cells of a `k x k`
//! grid. Each cell is encoded as a 16-dimensional feature vector:
//!
//! | dims  | content                                  |
//! |-------|------------------------------------------|
//! | 0..3  | shape one-hot (circle, square, triangle) |
//! | 3..6  | colour one-hot (red, green, blue)        |
//! | 6     | presence bit                             |
//! | 7, 8  | row / (k - 1), col / (k - 1)             |
//! | 9..16 | zero                                     |
//!
//! Every scene has three references. With one object they are paraphrases
//! (`a red circle`, `there is a red circle`, `there is a red circle in the
//! grid`); with two or more, the first two objects in reading order are
//! described, the longer two with their spatial relation (`a red circle left
//! of a blue square`, and the same followed by `in the grid`).

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SpatialFeatures;
use crate::error::{Error, Result};
use crate::metrics::ReferenceCorpus;
use crate::seed::rng_for;
use crate::tensor::Tensor;
use crate::vocab::{TokenId, Vocabulary, EOS};

pub const GRID: usize = 4;
pub const FEATURE_DIM: usize = 16;
pub const MAX_OBJECTS: usize = 3;
/// Tokens in the longest reference, EOS included.
pub const MAX_CAPTION_LEN: usize = 12;
pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_VAL: usize = 200;

const PRESENCE: usize = 6;
const ROW: usize = 7;
const COL: usize = 8;

pub const WORDS: [&str; 17] = [
    "a", "there", "is", "in", "the", "grid", "red", "green", "blue", "circle", "square", "triangle", "left",
    "right", "of", "above", "below",
];

pub fn vocabulary() -> Vocabulary {
    Vocabulary::new(WORDS).expect("task words are distinct")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub grid: usize,
    /// Sorted by cell.
    pub objects: Vec<Object>,
}

impl Scene {
    pub fn new(id: u64, grid: usize, mut objects: Vec<Object>) -> Result<Self> {
        objects.sort_by_key(|o| o.cell);
        let scene = Scene { id, grid, objects };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::InvalidArgument(format!("grid side {} < 2", self.grid)));
        }
        if !(1..=MAX_OBJECTS).contains(&self.objects.len()) {
            return Err(Error::InvalidArgument(format!(
                "scene {} has {} objects",
                self.id,
                self.objects.len()
            )));
        }
        let cells = self.grid * self.grid;
        for (i, o) in self.objects.iter().enumerate() {
            if o.cell >= cells {
                return Err(Error::OutOfRange {
                    what: "cell",
                    index: o.cell,
                    size: cells,
                });
            }
            if i > 0 && self.objects[i - 1].cell >= o.cell {
                return Err(Error::InvalidArgument(format!(
                    "scene {} objects must be in distinct, ascending cells",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.grid, cell % self.grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::LeftOf => &["left", "of"],
            Relation::RightOf => &["right", "of"],
            Relation::Above => &["above"],
            Relation::Below => &["below"],
        }
    }
}

/// Position of `a` relative to `b`, by the axis of larger displacement; equal
/// displacements are described by rows.
pub fn relation(grid: usize, a: usize, b: usize) -> Relation {
    let (ra, ca) = ((a / grid) as i64, (a % grid) as i64);
    let (rb, cb) = ((b / grid) as i64, (b % grid) as i64);
    if (cb - ca).abs() > (rb - ra).abs() {
        if ca < cb {
            Relation::LeftOf
        } else {
            Relation::RightOf
        }
    } else if ra < rb {
        Relation::Above
    } else {
        Relation::Below
    }
}

/// Feature grid of a scene.
pub fn encode_scene(scene: &Scene) -> SpatialFeatures {
    let k = scene.grid;
    let mut data = vec![0.0; k * k * FEATURE_DIM];
    let denom = (k - 1).max(1) as f64;
    for cell in 0..k * k {
        let row = &mut data[cell * FEATURE_DIM..(cell + 1) * FEATURE_DIM];
        row[ROW] = (cell / k) as f64 / denom;
        row[COL] = (cell % k) as f64 / denom;
    }
    for o in &scene.objects {
        let row = &mut data[o.cell * FEATURE_DIM..(o.cell + 1) * FEATURE_DIM];
        row[o.shape as usize] = 1.0;
        row[3 + o.color as usize] = 1.0;
        row[PRESENCE] = 1.0;
    }
    let t = Tensor::matrix(k * k, FEATURE_DIM, data).expect("layout fills the grid");
    SpatialFeatures::new(k, t).expect("grid is square")
}

/// Recovers the objects encoded in a feature grid.
pub fn read_features(features: &SpatialFeatures) -> Result<Vec<Object>> {
    if features.dim() != FEATURE_DIM {
        return Err(Error::shape("read_features", &[FEATURE_DIM], &[features.dim()]));
    }
    let pick = |xs: &[f64]| (0..xs.len()).max_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(b.cmp(&a))).unwrap();
    Ok((0..features.num_regions())
        .filter(|&n| features.region(n)[PRESENCE] > 0.5)
        .map(|n| {
            let r = features.region(n);
            Object {
                cell: n,
                shape: Shape::ALL[pick(&r[0..3])],
                color: Color::ALL[pick(&r[3..6])],
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Coarse,
    Fine,
}

fn object_words(o: &Object) -> [&'static str; 3] {
    ["a", o.color.word(), o.shape.word()]
}

fn relational_words(scene: &Scene) -> Vec<&'static str> {
    let (a, b) = (&scene.objects[0], &scene.objects[1]);
    let mut w = object_words(a).to_vec();
    w.extend_from_slice(relation(scene.grid, a.cell, b.cell).words());
    w.extend_from_slice(&object_words(b));
    w
}

/// Template caption, as words. Fine captions of one-object scenes fall back to
/// the `there is` paraphrase.
pub fn oracle_words(scene: &Scene, granularity: Granularity) -> Vec<&'static str> {
    match granularity {
        Granularity::Coarse => object_words(&scene.objects[0]).to_vec(),
        Granularity::Fine if scene.objects.len() >= 2 => relational_words(scene),
        Granularity::Fine => {
            let mut w = vec!["there", "is"];
            w.extend_from_slice(&object_words(&scene.objects[0]));
            w
        }
    }
}

pub fn oracle_caption(scene: &Scene, granularity: Granularity, vocab: &Vocabulary) -> Vec<TokenId> {
    vocab.encode(&oracle_words(scene, granularity))
}

/// The three references of a scene, as words.
pub fn reference_words(scene: &Scene) -> Vec<Vec<&'static str>> {
    let coarse = oracle_words(scene, Granularity::Coarse);
    let fine = oracle_words(scene, Granularity::Fine);
    let mut long = fine.clone();
    long.extend_from_slice(&["in", "the", "grid"]);
    vec![coarse, fine, long]
}

pub fn references(scene: &Scene, vocab: &Vocabulary) -> Vec<Vec<TokenId>> {
    reference_words(scene).iter().map(|w| vocab.encode(w)).collect()
}

/// Deterministic scene `id` of the dataset seeded by `seed`.
pub fn generate_scene(id: u64, seed: u64, grid: usize) -> Scene {
    let mut rng = rng_for(seed, &format!("scene/{id}"));
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let cells = sample(&mut rng, grid * grid, count);
    let objects = cells
        .iter()
        .map(|cell| Object {
            cell,
            shape: Shape::ALL[rng.gen_range(0..3)],
            color: Color::ALL[rng.gen_range(0..3)],
        })
        .collect();
    Scene::new(id, grid, objects).expect("generated scenes are valid")
}

/// A scene with its features and tokenised references.
#[derive(Clone, Debug)]
pub struct Example {
    pub scene: Scene,
    pub features: SpatialFeatures,
    pub refs: Vec<Vec<TokenId>>,
}

impl Example {
    pub fn new(scene: Scene, vocab: &Vocabulary) -> Self {
        let features = encode_scene(&scene);
        let refs = references(&scene, vocab);
        Example { scene, features, refs }
    }

    /// Reference `i` followed by EOS.
    pub fn gold(&self, i: usize) -> Vec<TokenId> {
        let mut g = self.refs[i].clone();
        g.push(EOS);
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    /// Built from the references of both splits.
    pub corpus: ReferenceCorpus,
}

impl Dataset {
    pub fn from_scenes(train: Vec<Scene>, val: Vec<Scene>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Empty);
        }
        let vocab = vocabulary();
        let train: Vec<Example> = train.into_iter().map(|s| Example::new(s, &vocab)).collect();
        let val: Vec<Example> = val.into_iter().map(|s| Example::new(s, &vocab)).collect();
        let corpus = ReferenceCorpus::new(train.iter().chain(&val).map(|e| (e.scene.id, e.refs.clone())))?;
        Ok(Dataset {
            vocab,
            train,
            val,
            corpus,
        })
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn find(&self, scene_id: u64) -> Result<&Example> {
        self.train
            .iter()
            .chain(&self.val)
            .find(|e| e.scene.id == scene_id)
            .ok_or(Error::UnknownScene(scene_id))
    }
}

/// Train scenes get ids `0..n_train`, validation scenes the next `n_val` ids.
pub fn generate_dataset(n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    generate_dataset_on_grid(GRID, n_train, n_val, seed)
}

pub fn generate_dataset_on_grid(grid: usize, n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidArgument("dataset splits must be non-empty".into()));
    }
    if grid < 2 {
        return Err(Error::InvalidArgument(format!("grid must be >= 2, got {grid}")));
    }
    let train = (0..n_train as u64).map(|id| generate_scene(id, seed, grid)).collect();
    let val = (n_train as u64..(n_train + n_val) as u64)
        .map(|id| generate_scene(id, seed, grid))
        .collect();
    Dataset::from_scenes(train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub scene_id: u64,
    pub grid: usize,
    pub objects: Vec<Object>,
    pub refs: Vec<Vec<String>>,
}

impl SceneRecord {
    pub fn from_example(e: &Example, vocab: &Vocabulary) -> Result<Self> {
        let refs = e
            .refs
            .iter()
            .map(|r| r.iter().map(|&id| vocab.token(id).map(str::to_string)).collect())
            .collect::<Result<_>>()?;
        Ok(SceneRecord {
            scene_id: e.scene.id,
            grid: e.scene.grid,
            objects: e.scene.objects.clone(),
            refs,
        })
    }

    /// Rebuilds the scene; the stored references must match the templates.
    pub fn into_scene(self) -> Result<Scene> {
        let scene = Scene::new(self.scene_id, self.grid, self.objects)?;
        let expected: Vec<Vec<String>> = reference_words(&scene)
            .into_iter()
            .map(|r| r.into_iter().map(str::to_string).collect())
            .collect();
        if expected != self.refs {
            return Err(Error::Format(format!("scene {} references do not match its objects", scene.id)));
        }
        Ok(scene)
    }
}

pub fn write_split(path: &Path, examples: &[Example], vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        let line = serde_json::to_string(&SceneRecord::from_example(e, vocab)?)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec.into_scene()?);
    }
    Ok(out)
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_split(&dir.join(TRAIN_FILE), &data.train, &data.vocab)?;
    write_split(&dir.join(VAL_FILE), &data.val, &data.vocab)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let train = read_split(&dir.join(TRAIN_FILE))?;
    let val = read_split(&dir.join(VAL_FILE))?;
    let mut ids: Vec<u64> = train.iter().chain(&val).map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Format("scene ids repeat across the dataset".into()));
    }
    Dataset::from_scenes(train, val)
}
