//! Frame annotations, templated question-answer pairs, synthetic scenes and
//! per-sequence splits.
//!
//! Two annotation styles are supported. EndoVis-style frames carry an organ,
//! tools, tool-tissue interactions and tool quadrants; Cholec-style frames
//! carry a surgical phase, the tools in use and a tool count.
//!
//! Question templates (one per answer family):
//!
//! | family | question | classification answer |
//! |---|---|---|
//! | organ | `what organ is being operated?` | organ |
//! | state | `what is the state of <tool>?` | verb |
//! | location | `where is <tool> located?` | quadrant |
//! | tool | `which tool is at the <quadrant>?` | tool |
//! | phase | `what is the surgical phase of the image?` | phase |
//! | count | `how many tools are used?` | `0`..`3` |
//! | usage | `is the <tool> being used?` | `yes` / `no` |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;
use crate::vision::Image;

/// Cholec-style frames are tagged at this sampling interval.
pub const CHOLEC_FRAME_INTERVAL_SECONDS: f64 = 4.0;
pub const SCENE_SIZE: usize = 64;
pub const MAX_TOOL_COUNT: usize = 3;

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.label() == s)
                    .ok_or_else(|| Error::Validation {
                        field: stringify!($name).to_lowercase(),
                        reason: format!("unknown label `{s}`"),
                    })
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.label())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

label_enum!(Organ { Kidney => "kidney" });

label_enum!(Tool {
    Grasper => "grasper",
    BipolarForceps => "bipolar forceps",
    NeedleDriver => "needle driver",
    Scissors => "scissors",
    UltrasoundProbe => "ultrasound probe",
    Suction => "suction",
    ClipApplier => "clip applier",
    Stapler => "stapler",
});

label_enum!(Verb {
    Grasping => "grasping",
    Retracting => "retracting",
    Manipulating => "manipulating",
    Cutting => "cutting",
    Cauterizing => "cauterizing",
    Suctioning => "suctioning",
    Looping => "looping",
    Suturing => "suturing",
    Clipping => "clipping",
    Stapling => "stapling",
    Sensing => "sensing",
    Dissecting => "dissecting",
    Coagulating => "coagulating",
});

label_enum!(
    /// Interaction targets appear in sentence answers only.
    Target {
        Kidney => "kidney",
        Tissue => "tissue",
        Gallbladder => "gallbladder",
        Vessel => "vessel",
        Fat => "fat",
    }
);

label_enum!(Location {
    TopLeft => "top left",
    TopRight => "top right",
    BottomLeft => "bottom left",
    BottomRight => "bottom right",
});

label_enum!(Phase {
    Preparation => "preparation",
    CalotTriangleDissection => "calot triangle dissection",
    ClippingCutting => "clipping cutting",
    GallbladderDissection => "gallbladder dissection",
    GallbladderPackaging => "gallbladder packaging",
    CleaningCoagulation => "cleaning coagulation",
    GallbladderRetraction => "gallbladder retraction",
    TrocarPlacement => "trocar placement",
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Endovis,
    Cholec,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Endovis => "endovis",
            DatasetKind::Cholec => "cholec",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endovis" => Ok(DatasetKind::Endovis),
            "cholec" => Ok(DatasetKind::Cholec),
            _ => Err(Error::Config(format!("unknown dataset `{s}` (endovis|cholec)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Classification,
    Sentence,
}

impl FromStr for AnswerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(AnswerType::Classification),
            "sentence" => Ok(AnswerType::Sentence),
            _ => Err(Error::Config(format!("unknown answer type `{s}` (classification|sentence)"))),
        }
    }
}

impl fmt::Display for AnswerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnswerType::Classification => "classification",
            AnswerType::Sentence => "sentence",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub tool: Tool,
    pub verb: Verb,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub sequence_id: u32,
    pub frame_id: u32,
    pub dataset: DatasetKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organ: Option<Organ>,
    #[serde(default)]
    pub tools: Vec<Tool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interactions: Vec<Interaction>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tool_locations: BTreeMap<Tool, Location>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_seconds: Option<f64>,
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        field: field.into(),
        reason: reason.into(),
    }
}

impl FrameAnnotation {
    pub fn validate(&self) -> Result<()> {
        let unique: BTreeSet<Tool> = self.tools.iter().copied().collect();
        if unique.len() != self.tools.len() {
            return Err(invalid("tools", "duplicate tool"));
        }
        match self.dataset {
            DatasetKind::Endovis => {
                if self.organ.is_none() {
                    return Err(invalid("organ", "missing on an endovis frame"));
                }
                for i in &self.interactions {
                    if !unique.contains(&i.tool) {
                        return Err(invalid("interactions", format!("references unlisted tool `{}`", i.tool)));
                    }
                }
                for t in &self.tools {
                    let n = self.interactions.iter().filter(|i| i.tool == *t).count();
                    if n != 1 {
                        return Err(invalid("interactions", format!("tool `{t}` needs exactly one interaction, has {n}")));
                    }
                    if !self.tool_locations.contains_key(t) {
                        return Err(invalid("tool_locations", format!("no quadrant for tool `{t}`")));
                    }
                }
                if let Some(t) = self.tool_locations.keys().find(|t| !unique.contains(t)) {
                    return Err(invalid("tool_locations", format!("references unlisted tool `{t}`")));
                }
            }
            DatasetKind::Cholec => {
                if self.phase.is_none() {
                    return Err(invalid("phase", "missing on a cholec frame"));
                }
                let Some(count) = self.tool_count else {
                    return Err(invalid("tool_count", "missing on a cholec frame"));
                };
                if count > MAX_TOOL_COUNT {
                    return Err(invalid("tool_count", format!("{count} exceeds {MAX_TOOL_COUNT}")));
                }
                if count != self.tools.len().min(MAX_TOOL_COUNT) {
                    return Err(invalid(
                        "tool_count",
                        format!("{count} disagrees with {} listed tools", self.tools.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Quadrant of each tool. Cholec-style frames have none recorded, so
    /// tools take quadrants in listing order.
    pub fn placements(&self) -> Vec<(Tool, Location)> {
        self.tools
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let loc = self
                    .tool_locations
                    .get(&t)
                    .copied()
                    .unwrap_or(Location::ALL[i % Location::ALL.len()]);
                (t, loc)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub sequence_id: u32,
    pub frame_id: u32,
    pub question: String,
    pub answer: String,
    pub answer_type: AnswerType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelUniverse {
    pub dataset: DatasetKind,
    pub labels: Vec<String>,
}

impl LabelUniverse {
    pub fn for_dataset(dataset: DatasetKind) -> Self {
        let mut labels: Vec<String> = Vec::new();
        match dataset {
            DatasetKind::Endovis => {
                labels.extend(Organ::ALL.iter().map(|v| v.label().to_string()));
                labels.extend(Tool::ALL.iter().map(|v| v.label().to_string()));
                labels.extend(Verb::ALL.iter().map(|v| v.label().to_string()));
                labels.extend(Location::ALL.iter().map(|v| v.label().to_string()));
            }
            DatasetKind::Cholec => {
                labels.extend(Phase::ALL.iter().map(|v| v.label().to_string()));
                labels.push("yes".into());
                labels.push("no".into());
                labels.extend((0..=MAX_TOOL_COUNT).map(|c| c.to_string()));
            }
        }
        LabelUniverse { dataset, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

pub const ORGAN_QUESTION: &str = "what organ is being operated?";
pub const PHASE_QUESTION: &str = "what is the surgical phase of the image?";
pub const COUNT_QUESTION: &str = "how many tools are used?";

fn pair(ann: &FrameAnnotation, mode: AnswerType, question: String, label: &str, sentence: String) -> QAPair {
    QAPair {
        sequence_id: ann.sequence_id,
        frame_id: ann.frame_id,
        question,
        answer: match mode {
            AnswerType::Classification => label.to_string(),
            AnswerType::Sentence => sentence,
        },
        answer_type: mode,
    }
}

/// Organ, then per tool its state and location, then the tool occupying
/// each singly occupied quadrant.
pub fn generate_endovis_qa(ann: &FrameAnnotation, mode: AnswerType) -> Result<Vec<QAPair>> {
    if ann.dataset != DatasetKind::Endovis {
        return Err(invalid("dataset", "expected an endovis frame"));
    }
    ann.validate()?;
    let organ = ann.organ.unwrap();
    let mut out = vec![pair(
        ann,
        mode,
        ORGAN_QUESTION.into(),
        organ.label(),
        format!("the organ being operated is {organ}"),
    )];
    for &tool in &ann.tools {
        let i = ann.interactions.iter().find(|i| i.tool == tool).unwrap();
        out.push(pair(
            ann,
            mode,
            format!("what is the state of {tool}?"),
            i.verb.label(),
            format!("the {tool} is {} the {}", i.verb, i.target),
        ));
        let loc = ann.tool_locations[&tool];
        out.push(pair(
            ann,
            mode,
            format!("where is {tool} located?"),
            loc.label(),
            format!("the {tool} is located at {loc}"),
        ));
    }
    for &loc in Location::ALL {
        let here: Vec<Tool> = ann.tools.iter().copied().filter(|t| ann.tool_locations[t] == loc).collect();
        if let [tool] = here.as_slice() {
            out.push(pair(
                ann,
                mode,
                format!("which tool is at the {loc}?"),
                tool.label(),
                format!("the tool at the {loc} is the {tool}"),
            ));
        }
    }
    Ok(out)
}

/// Exactly two pairs: the phase, then the tool count (even frames) or the
/// usage of one tool cycled by frame id (odd frames).
pub fn generate_cholec_qa(ann: &FrameAnnotation, mode: AnswerType) -> Result<Vec<QAPair>> {
    if ann.dataset != DatasetKind::Cholec {
        return Err(invalid("dataset", "expected a cholec frame"));
    }
    ann.validate()?;
    let phase = ann.phase.unwrap();
    let mut out = vec![pair(
        ann,
        mode,
        PHASE_QUESTION.into(),
        phase.label(),
        format!("the surgical phase is {phase}"),
    )];
    if ann.frame_id % 2 == 0 {
        let count = ann.tool_count.unwrap().to_string();
        let sentence = format!("the number of tools used is {count}");
        out.push(pair(ann, mode, COUNT_QUESTION.into(), &count, sentence));
    } else {
        let tool = Tool::ALL[(ann.frame_id as usize / 2) % Tool::ALL.len()];
        let used = ann.tools.contains(&tool);
        let (label, sentence) = if used {
            ("yes", format!("yes, the {tool} is being used"))
        } else {
            ("no", format!("no, the {tool} is not being used"))
        };
        out.push(pair(ann, mode, format!("is the {tool} being used?"), label, sentence));
    }
    Ok(out)
}

pub fn generate_qa(ann: &FrameAnnotation, mode: AnswerType) -> Result<Vec<QAPair>> {
    match ann.dataset {
        DatasetKind::Endovis => generate_endovis_qa(ann, mode),
        DatasetKind::Cholec => generate_cholec_qa(ann, mode),
    }
}

fn pick<T: Copy>(rng: &mut Rng, items: &[T]) -> T {
    items[rng.below(items.len())]
}

/// Random EndoVis-style frame with 1..=3 tools.
pub fn random_endovis_annotation(rng: &mut Rng, sequence_id: u32, frame_id: u32) -> FrameAnnotation {
    let mut tools = Tool::ALL.to_vec();
    rng.shuffle(&mut tools);
    tools.truncate(1 + rng.below(3));
    let interactions = tools
        .iter()
        .map(|&tool| Interaction {
            tool,
            verb: pick(rng, Verb::ALL),
            target: pick(rng, Target::ALL),
        })
        .collect();
    let tool_locations = tools.iter().map(|&t| (t, pick(rng, Location::ALL))).collect();
    FrameAnnotation {
        sequence_id,
        frame_id,
        dataset: DatasetKind::Endovis,
        organ: Some(Organ::Kidney),
        tools,
        interactions,
        tool_locations,
        phase: None,
        tool_count: None,
        timestamp_seconds: None,
    }
}

/// Random Cholec-style frame with 0..=3 tools.
pub fn random_cholec_annotation(rng: &mut Rng, sequence_id: u32, frame_id: u32) -> FrameAnnotation {
    let mut tools = Tool::ALL.to_vec();
    rng.shuffle(&mut tools);
    tools.truncate(rng.below(MAX_TOOL_COUNT + 1));
    FrameAnnotation {
        sequence_id,
        frame_id,
        dataset: DatasetKind::Cholec,
        organ: None,
        tool_count: Some(tools.len()),
        tools,
        interactions: Vec::new(),
        tool_locations: BTreeMap::new(),
        phase: Some(pick(rng, Phase::ALL)),
        timestamp_seconds: Some(frame_id as f64 * CHOLEC_FRAME_INTERVAL_SECONDS),
    }
}

/// `sequences x frames_per_sequence` annotations, sequence ids from 1.
pub fn synth_annotations(dataset: DatasetKind, sequences: u32, frames_per_sequence: u32, seed: u64) -> Vec<FrameAnnotation> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for s in 1..=sequences {
        let mut rng = root.split(s as u64);
        for f in 0..frames_per_sequence {
            out.push(match dataset {
                DatasetKind::Endovis => random_endovis_annotation(&mut rng, s, f),
                DatasetKind::Cholec => random_cholec_annotation(&mut rng, s, f),
            });
        }
    }
    out
}

const TOOL_COLORS: [[f64; 3]; 8] = [
    [0.95, 0.95, 0.2],
    [0.2, 0.9, 0.95],
    [0.95, 0.3, 0.95],
    [0.2, 0.95, 0.3],
    [0.3, 0.35, 0.95],
    [0.95, 0.6, 0.1],
    [1.0, 1.0, 1.0],
    [0.05, 0.05, 0.05],
];

fn background(ann: &FrameAnnotation) -> [f64; 3] {
    match (ann.organ, ann.phase) {
        (_, Some(p)) => {
            let h = p.index() as f64 / Phase::ALL.len() as f64;
            [
                0.35 + 0.3 * (std::f64::consts::TAU * h).cos(),
                0.35 + 0.3 * (std::f64::consts::TAU * (h + 1.0 / 3.0)).cos(),
                0.35 + 0.3 * (std::f64::consts::TAU * (h + 2.0 / 3.0)).cos(),
            ]
        }
        _ => [0.55, 0.22, 0.2],
    }
}

/// Stripe pattern for a verb: orientation and period.
fn texture_on(verb: Option<Verb>, dy: usize, dx: usize) -> bool {
    let Some(v) = verb else { return true };
    let k = v.index();
    let period = 2 + k / 4;
    let coord = match k % 4 {
        0 => dy,
        1 => dx,
        2 => dy + dx,
        _ => dy + period * 8 - dx % (period * 8),
    };
    (coord / (period.div_ceil(2))) % 2 == 0
}

/// Top-left corner and side of a tool glyph inside its quadrant.
pub fn glyph_box(size: usize, loc: Location, jitter: (usize, usize)) -> (usize, usize, usize) {
    let half = size / 2;
    let side = (half * 2 / 3).max(4);
    let slack = half - side;
    let (qy, qx) = match loc {
        Location::TopLeft => (0, 0),
        Location::TopRight => (0, half),
        Location::BottomLeft => (half, 0),
        Location::BottomRight => (half, half),
    };
    (qy + jitter.0 % (slack + 1), qx + jitter.1 % (slack + 1), side)
}

/// Deterministic procedural render: a background keyed to organ or phase,
/// one coloured glyph per tool in its quadrant with a verb-specific stripe
/// texture, and seeded pixel noise.
pub fn synth_scene(ann: &FrameAnnotation, seed: u64, size: usize) -> Result<Image> {
    let mut rng = Rng::new(seed).split(((ann.sequence_id as u64) << 32) | ann.frame_id as u64);
    let bg = background(ann);
    let mut img = Image::filled(size, size, bg)?;
    for (tool, loc) in ann.placements() {
        let verb = ann.interactions.iter().find(|i| i.tool == tool).map(|i| i.verb);
        let (y0, x0, side) = glyph_box(size, loc, (rng.below(size), rng.below(size)));
        let color = TOOL_COLORS[tool.index()];
        for dy in 0..side {
            for dx in 0..side {
                let c = if texture_on(verb, dy, dx) { color } else { color.map(|v| v * 0.35) };
                img.set_pixel(y0 + dy, x0 + dx, c);
            }
        }
    }
    let mut data = img.data().to_vec();
    for v in &mut data {
        *v += rng.uniform(-0.03, 0.03);
    }
    Image::new(size, size, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub frame_id: u32,
    /// Image path relative to the manifest's directory.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSequence {
    pub sequence_id: u32,
    pub frames: Vec<ManifestFrame>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub image_size: usize,
    pub annotations: String,
    pub qa_classification: String,
    pub qa_sentence: String,
    pub sequences: Vec<ManifestSequence>,
}

impl Manifest {
    pub fn sequence_ids(&self) -> Vec<u32> {
        self.sequences.iter().map(|s| s.sequence_id).collect()
    }

    pub fn frame_count(&self, ids: &[u32]) -> usize {
        self.sequences
            .iter()
            .filter(|s| ids.contains(&s.sequence_id))
            .map(|s| s.frames.len())
            .sum()
    }

    pub fn image_path(&self, root: &Path, sequence_id: u32, frame_id: u32) -> Option<PathBuf> {
        self.sequences
            .iter()
            .find(|s| s.sequence_id == sequence_id)?
            .frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .map(|f| root.join(&f.image))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    #[serde(default)]
    pub train_frames: usize,
    #[serde(default)]
    pub test_frames: usize,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Frames follow their sequence: both sides must be disjoint and present.
pub fn split_dataset(manifest: &Manifest, train: &[u32], test: &[u32]) -> Result<SplitSpec> {
    let known = manifest.sequence_ids();
    for id in train.iter().chain(test) {
        if !known.contains(id) {
            return Err(Error::Config(format!("sequence {id} not in manifest")));
        }
    }
    if let Some(id) = train.iter().find(|id| test.contains(id)) {
        return Err(Error::Config(format!("sequence {id} is in both train and test")));
    }
    Ok(SplitSpec {
        train: train.to_vec(),
        test: test.to_vec(),
        train_frames: manifest.frame_count(train),
        test_frames: manifest.frame_count(test),
    })
}

/// The last `test_count` sequences (by id) form the test side.
pub fn default_split(manifest: &Manifest, test_count: usize) -> Result<SplitSpec> {
    let mut ids = manifest.sequence_ids();
    ids.sort_unstable();
    if test_count == 0 || test_count >= ids.len() {
        return Err(Error::Config(format!(
            "cannot hold out {test_count} of {} sequences",
            ids.len()
        )));
    }
    let cut = ids.len() - test_count;
    split_dataset(manifest, &ids[..cut], &ids[cut..])
}

/// `k` rotating folds over contiguous groups of sorted sequence ids.
pub fn k_fold_splits(manifest: &Manifest, k: usize) -> Result<Vec<SplitSpec>> {
    let mut ids = manifest.sequence_ids();
    ids.sort_unstable();
    if k < 2 || k > ids.len() {
        return Err(Error::Config(format!("k = {k} folds over {} sequences", ids.len())));
    }
    (0..k)
        .map(|f| {
            let lo = f * ids.len() / k;
            let hi = (f + 1) * ids.len() / k;
            let test = &ids[lo..hi];
            let train: Vec<u32> = ids.iter().copied().filter(|id| !test.contains(id)).collect();
            split_dataset(manifest, &train, test)
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Annotations whose ids appear in `sequences`, in input order.
pub fn select_sequences<'a>(anns: &'a [FrameAnnotation], sequences: &[u32]) -> Vec<&'a FrameAnnotation> {
    anns.iter().filter(|a| sequences.contains(&a.sequence_id)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Adam, Linear, Parameters, Rng};
    use crate::vision::{adaptive_avg_pool, extract_features_2d, ConvStack, VisionConfig};
    use proptest::prelude::*;

    fn endovis_frame() -> FrameAnnotation {
        FrameAnnotation {
            sequence_id: 1,
            frame_id: 3,
            dataset: DatasetKind::Endovis,
            organ: Some(Organ::Kidney),
            tools: vec![Tool::Grasper, Tool::Scissors],
            interactions: vec![
                Interaction {
                    tool: Tool::Grasper,
                    verb: Verb::Grasping,
                    target: Target::Gallbladder,
                },
                Interaction {
                    tool: Tool::Scissors,
                    verb: Verb::Cutting,
                    target: Target::Tissue,
                },
            ],
            tool_locations: [(Tool::Grasper, Location::TopLeft), (Tool::Scissors, Location::TopLeft)].into(),
            phase: None,
            tool_count: None,
            timestamp_seconds: None,
        }
    }

    fn cholec_frame(frame_id: u32, phase: Phase, tools: Vec<Tool>) -> FrameAnnotation {
        FrameAnnotation {
            sequence_id: 2,
            frame_id,
            dataset: DatasetKind::Cholec,
            organ: None,
            tool_count: Some(tools.len().min(3)),
            tools,
            interactions: vec![],
            tool_locations: BTreeMap::new(),
            phase: Some(phase),
            timestamp_seconds: Some(frame_id as f64 * CHOLEC_FRAME_INTERVAL_SECONDS),
        }
    }

    #[test]
    fn universes_have_expected_sizes() {
        assert_eq!(LabelUniverse::for_dataset(DatasetKind::Endovis).len(), 26);
        assert_eq!(LabelUniverse::for_dataset(DatasetKind::Cholec).len(), 14);
        // Organ "kidney" and target "kidney" share a label but the universe
        // lists it once.
        let u = LabelUniverse::for_dataset(DatasetKind::Endovis);
        let set: BTreeSet<_> = u.labels.iter().collect();
        assert_eq!(set.len(), 26);
    }

    #[test]
    fn endovis_templates() {
        let ann = endovis_frame();
        let c = generate_endovis_qa(&ann, AnswerType::Classification).unwrap();
        assert_eq!(c[0].question, "what organ is being operated?");
        assert_eq!(c[0].answer, "kidney");
        assert_eq!((c[1].question.as_str(), c[1].answer.as_str()), ("what is the state of grasper?", "grasping"));
        assert_eq!((c[2].question.as_str(), c[2].answer.as_str()), ("where is grasper located?", "top left"));
        // Both tools share a quadrant, so no tool-identity question.
        assert_eq!(c.len(), 5);
        let s = generate_endovis_qa(&ann, AnswerType::Sentence).unwrap();
        assert_eq!(s[1].answer, "the grasper is grasping the gallbladder");
        assert_eq!(s[2].answer, "the grasper is located at top left");
        assert!(s.iter().all(|p| p.answer_type == AnswerType::Sentence));
    }

    #[test]
    fn cholec_templates() {
        let ann = cholec_frame(0, Phase::CalotTriangleDissection, vec![Tool::Grasper, Tool::Stapler]);
        let c = generate_cholec_qa(&ann, AnswerType::Classification).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].question, "what is the surgical phase of the image?");
        assert_eq!(c[0].answer, "calot triangle dissection");
        assert_eq!((c[1].question.as_str(), c[1].answer.as_str()), ("how many tools are used?", "2"));
        let odd = cholec_frame(1, Phase::Preparation, vec![Tool::Grasper]);
        let c = generate_cholec_qa(&odd, AnswerType::Classification).unwrap();
        assert_eq!((c[1].question.as_str(), c[1].answer.as_str()), ("is the grasper being used?", "yes"));
    }

    #[test]
    fn malformed_annotations_name_the_field() {
        let mut ann = endovis_frame();
        ann.interactions.pop();
        let err = generate_endovis_qa(&ann, AnswerType::Classification).unwrap_err();
        assert!(matches!(&err, Error::Validation { field, .. } if field == "interactions"), "{err}");
        let mut ann = endovis_frame();
        ann.organ = None;
        assert!(matches!(ann.validate(), Err(Error::Validation { field, .. }) if field == "organ"));
        let mut c = cholec_frame(0, Phase::Preparation, vec![Tool::Grasper]);
        c.tool_count = Some(4);
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "tool_count"));
        assert!(generate_cholec_qa(&endovis_frame(), AnswerType::Sentence).is_err());
    }

    #[test]
    fn corpora_reach_every_label() {
        for (kind, size) in [(DatasetKind::Endovis, 26), (DatasetKind::Cholec, 14)] {
            let universe = LabelUniverse::for_dataset(kind);
            let mut seen = BTreeSet::new();
            for ann in synth_annotations(kind, 14, 40, 5) {
                for p in generate_qa(&ann, AnswerType::Classification).unwrap() {
                    assert!(universe.index_of(&p.answer).is_some(), "{}", p.answer);
                    seen.insert(p.answer);
                }
            }
            assert_eq!(seen.len(), size, "{kind}");
        }
    }

    #[test]
    fn sentence_contains_its_label() {
        for kind in [DatasetKind::Endovis, DatasetKind::Cholec] {
            for ann in synth_annotations(kind, 3, 20, 6) {
                let c = generate_qa(&ann, AnswerType::Classification).unwrap();
                let s = generate_qa(&ann, AnswerType::Sentence).unwrap();
                assert_eq!(c.len(), s.len());
                for (a, b) in c.iter().zip(&s) {
                    assert_eq!(a.question, b.question);
                    assert!(b.answer.contains(&a.answer), "{} / {}", a.answer, b.answer);
                }
            }
        }
    }

    #[test]
    fn annotations_round_trip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.jsonl");
        let mut anns = synth_annotations(DatasetKind::Endovis, 2, 3, 1);
        anns.extend(synth_annotations(DatasetKind::Cholec, 1, 3, 1));
        write_jsonl(&path, &anns).unwrap();
        let back: Vec<FrameAnnotation> = read_jsonl(&path).unwrap();
        assert_eq!(anns, back);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"tool_locations\""));

        std::fs::write(&path, "{\"sequence_id\":1}\n").unwrap();
        let err = read_jsonl::<FrameAnnotation>(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn qa_pair_json_fields() {
        let p = &generate_endovis_qa(&endovis_frame(), AnswerType::Classification).unwrap()[0];
        let v: serde_json::Value = serde_json::to_value(p).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["answer", "answer_type", "frame_id", "question", "sequence_id"].into());
        assert_eq!(v["answer_type"], "classification");
    }

    #[test]
    fn scenes_are_deterministic() {
        let ann = endovis_frame();
        let a = synth_scene(&ann, 9, 64).unwrap();
        let b = synth_scene(&ann, 9, 64).unwrap();
        assert_eq!(a.data(), b.data());
        let c = synth_scene(&ann, 10, 64).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn glyph_centroid_lies_in_its_quadrant() {
        for &loc in Location::ALL {
            for jitter in [(0, 0), (7, 13), (1000, 3)] {
                let (y, x, side) = glyph_box(64, loc, jitter);
                let (cy, cx) = (y as f64 + side as f64 / 2.0, x as f64 + side as f64 / 2.0);
                let top = cy < 32.0;
                let left = cx < 32.0;
                let expected = match loc {
                    Location::TopLeft => (true, true),
                    Location::TopRight => (true, false),
                    Location::BottomLeft => (false, true),
                    Location::BottomRight => (false, false),
                };
                assert_eq!((top, left), expected);
                // The whole glyph stays inside the quadrant.
                assert!(y % 32 + side <= 32 && x % 32 + side <= 32);
            }
        }
        // Measured on a render: tool colour pixels average into the quadrant.
        let mut ann = endovis_frame();
        ann.tools = vec![Tool::Grasper];
        ann.interactions.truncate(1);
        ann.tool_locations = [(Tool::Grasper, Location::BottomRight)].into();
        let img = synth_scene(&ann, 3, 64).unwrap();
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                let p = img.pixel(y, x);
                if p[1] > 0.6 || (p[1] - 0.33).abs() < 0.05 && p[2] < 0.15 {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0 && sy / n >= 32.0 && sx / n >= 32.0);
    }

    fn manifest(ids: &[u32], frames: usize) -> Manifest {
        Manifest {
            dataset: DatasetKind::Endovis,
            seed: 0,
            image_size: 32,
            annotations: "annotations.jsonl".into(),
            qa_classification: "qa_classification.jsonl".into(),
            qa_sentence: "qa_sentence.jsonl".into(),
            sequences: ids
                .iter()
                .map(|&s| ManifestSequence {
                    sequence_id: s,
                    frames: (0..frames + s as usize % 3)
                        .map(|f| ManifestFrame {
                            frame_id: f as u32,
                            image: format!("images/seq_{s}/frame_{f}.imgf"),
                            timestamp_seconds: None,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn eleven_three_split_is_disjoint_and_counted() {
        let ids: Vec<u32> = (1..=14).collect();
        let m = manifest(&ids, 4);
        let s = default_split(&m, 3).unwrap();
        assert_eq!(s.train.len(), 11);
        assert_eq!(s.test, vec![12, 13, 14]);
        assert!(s.train.iter().all(|id| !s.test.contains(id)));
        let recount = |side: &[u32]| -> usize {
            m.sequences.iter().filter(|q| side.contains(&q.sequence_id)).map(|q| q.frames.len()).sum()
        };
        assert_eq!(s.train_frames, recount(&s.train));
        assert_eq!(s.test_frames, recount(&s.test));
        assert_eq!(s.train_frames + s.test_frames, recount(&ids));
        assert!(split_dataset(&m, &[1, 2], &[2, 3]).is_err());
        assert!(split_dataset(&m, &[1], &[99]).is_err());
    }

    #[test]
    fn folds_cover_each_sequence_once() {
        let ids: Vec<u32> = (1..=14).collect();
        let m = manifest(&ids, 2);
        let folds = k_fold_splits(&m, 3).unwrap();
        let mut tested: Vec<u32> = folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, ids);
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 14);
        }
        assert!(k_fold_splits(&m, 1).is_err());
    }

    #[test]
    fn linear_probe_separates_two_phases() {
        let mut rng = Rng::new(21);
        let cnn = ConvStack::new(&mut rng, &VisionConfig::default()).unwrap();
        let phases = [Phase::Preparation, Phase::GallbladderPackaging];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..50u32 {
            let mut ann = random_cholec_annotation(&mut rng, 1, i);
            ann.phase = Some(phases[i as usize % 2]);
            let img = synth_scene(&ann, 4, 32).unwrap();
            let pooled = adaptive_avg_pool(&extract_features_2d(&img, &cnn).unwrap(), 1).unwrap();
            feats.extend(pooled.to_vec());
            labels.push(i as usize % 2);
        }
        let x = crate::numeric::Tensor::new(&[50, 256], feats).unwrap();
        let probe = Linear::new(&mut rng, 256, 2);
        let mut opt = Adam::new(probe.parameters(), 1e-2);
        for _ in 0..300 {
            probe.forward(&x).unwrap().cross_entropy(&labels, None).unwrap().backward().unwrap();
            opt.step().unwrap();
        }
        let logits = probe.forward(&x).unwrap().to_vec();
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| (logits[i * 2 + 1] > logits[i * 2]) == (y == 1))
            .count();
        assert!(correct as f64 / 50.0 >= 0.9, "{correct}/50");
    }

    proptest! {
        #[test]
        fn generated_answers_are_closed_world(seed in 0u64..500) {
            for kind in [DatasetKind::Endovis, DatasetKind::Cholec] {
                let universe = LabelUniverse::for_dataset(kind);
                for ann in synth_annotations(kind, 1, 4, seed) {
                    prop_assert!(ann.validate().is_ok());
                    for p in generate_qa(&ann, AnswerType::Classification).unwrap() {
                        prop_assert!(universe.index_of(&p.answer).is_some());
                    }
                }
            }
        }

        #[test]
        fn cholec_always_two_pairs(seed in 0u64..500) {
            for ann in synth_annotations(DatasetKind::Cholec, 1, 5, seed) {
                prop_assert_eq!(generate_cholec_qa(&ann, AnswerType::Sentence).unwrap().len(), 2);
            }
        }
    }
}
