//! Dataset manifests and patient-disjoint train/test splits.
//!
//! A manifest lists every cycle once, as a JSON object per line, with the
//! recording provenance, the annotation, the label vector and the split
//! tag. `summary.json` next to it holds per-split per-class counts and is
//! always recomputed from the entries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{parse_annotation_file, CycleAnnotation};
use super::labels::{CycleClass, LabelVector};
use super::recording::{extract_cycles, parse_recording_filename, read_wav, BreathCycle, RecordingMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn parse(token: &str) -> Option<Split> {
        match token {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A cycle located inside its source recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRef {
    pub file_stem: String,
    #[serde(flatten)]
    pub meta: RecordingMeta,
    pub cycle_index: usize,
    #[serde(flatten)]
    pub annotation: CycleAnnotation,
    /// Path of the source WAV file.
    pub audio: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub cycle: CycleRef,
    pub label: LabelVector,
    pub class_id: usize,
    pub split: Split,
}

impl ManifestEntry {
    pub fn class(&self) -> CycleClass {
        self.label.class()
    }

    pub fn patient_id(&self) -> u32 {
        self.cycle.meta.patient_id
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub normal: usize,
    pub crackle: usize,
    pub wheeze: usize,
    pub both: usize,
}

impl ClassCounts {
    pub fn add(&mut self, class: CycleClass) {
        *self.get_mut(class) += 1;
    }

    fn get_mut(&mut self, class: CycleClass) -> &mut usize {
        match class {
            CycleClass::Normal => &mut self.normal,
            CycleClass::Crackle => &mut self.crackle,
            CycleClass::Wheeze => &mut self.wheeze,
            CycleClass::Both => &mut self.both,
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.normal, self.crackle, self.wheeze, self.both]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub cycles: ClassCounts,
    pub total_cycles: usize,
    pub patients: usize,
    pub recordings: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub train: SplitSummary,
    pub test: SplitSummary,
    pub total_cycles: usize,
    /// Patients present in both splits; always empty for a valid manifest.
    pub overlapping_patients: Vec<u32>,
}

impl ManifestSummary {
    pub fn of(entries: &[ManifestEntry]) -> Self {
        let mut summary = ManifestSummary::default();
        let mut patients: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
        let mut recordings: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
        for e in entries {
            let s = match e.split {
                Split::Train => &mut summary.train,
                Split::Test => &mut summary.test,
            };
            s.cycles.add(e.class());
            s.total_cycles += 1;
            patients.entry(e.split).or_default().insert(e.patient_id());
            recordings
                .entry(e.split)
                .or_default()
                .insert(e.cycle.file_stem.as_str());
        }
        let count = |m: &BTreeMap<Split, BTreeSet<u32>>, s| m.get(&s).map_or(0, BTreeSet::len);
        summary.train.patients = count(&patients, Split::Train);
        summary.test.patients = count(&patients, Split::Test);
        summary.train.recordings = recordings.get(&Split::Train).map_or(0, BTreeSet::len);
        summary.test.recordings = recordings.get(&Split::Test).map_or(0, BTreeSet::len);
        summary.total_cycles = entries.len();
        if let (Some(a), Some(b)) = (patients.get(&Split::Train), patients.get(&Split::Test)) {
            summary.overlapping_patients = a.intersection(b).copied().collect();
        }
        summary
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub summary: ManifestSummary,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let summary = ManifestSummary::of(&entries);
        if !summary.overlapping_patients.is_empty() {
            return Err(Error::Integrity(format!(
                "patients {:?} appear in both splits",
                summary.overlapping_patients
            )));
        }
        Ok(DatasetManifest { entries, summary })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Writes `manifest.jsonl` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))?;
        let summary_path = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&self.summary)? + "\n";
        fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))
    }

    /// Reads a `manifest.jsonl` file (or a directory containing one).
    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })?;
            if entry.class_id != entry.class().index() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!(
                        "class_id {} disagrees with label {:?}",
                        entry.class_id,
                        entry.label.bits()
                    ),
                });
            }
            entries.push(entry);
        }
        DatasetManifest::new(entries)
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

/// Parses the official split file: `<stem> <train|test>` per line.
pub fn parse_split_file(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let [stem, tag] = fields[..] else {
            return Err(err(format!("expected `<stem> <train|test>`, got {line:?}")));
        };
        let split = Split::parse(tag).ok_or_else(|| err(format!("unknown split tag {tag:?}")))?;
        if map.insert(stem.to_string(), split).is_some_and(|prev| prev != split) {
            return Err(err(format!("{stem} is listed in both splits")));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    /// Recording stem -> split, as distributed with the dataset.
    Official(BTreeMap<String, Split>),
    /// Target fraction of cycles assigned to training.
    Ratio(f64),
}

/// Assigns every cycle to a split so that no patient is in both.
///
/// Ratio mode shuffles the patient list with `seed` and moves whole
/// patients into training until the training share of cycles reaches the
/// ratio; the remaining patients form the test split.
pub fn split_patients(cycles: Vec<CycleRef>, mode: &SplitMode, seed: u64) -> Result<DatasetManifest> {
    let assignment: HashMap<u32, Split> = match mode {
        SplitMode::Official(map) => official_assignment(&cycles, map)?,
        SplitMode::Ratio(r) => ratio_assignment(&cycles, *r, seed)?,
    };
    let entries = cycles
        .into_iter()
        .map(|cycle| {
            let split = match mode {
                SplitMode::Official(map) => map[&cycle.file_stem],
                SplitMode::Ratio(_) => assignment[&cycle.meta.patient_id],
            };
            let label = cycle.annotation.labels();
            ManifestEntry {
                class_id: label.class().index(),
                label,
                split,
                cycle,
            }
        })
        .collect();
    DatasetManifest::new(entries)
}

fn official_assignment(
    cycles: &[CycleRef],
    map: &BTreeMap<String, Split>,
) -> Result<HashMap<u32, Split>> {
    let stems: BTreeSet<&str> = cycles.iter().map(|c| c.file_stem.as_str()).collect();
    if let Some(unknown) = map.keys().find(|k| !stems.contains(k.as_str())) {
        return Err(Error::Validation(format!(
            "split file references unknown recording {unknown}"
        )));
    }
    let mut by_patient: HashMap<u32, Split> = HashMap::new();
    let mut conflicts = BTreeSet::new();
    for stem in &stems {
        let split = *map.get(*stem).ok_or_else(|| {
            Error::Validation(format!("recording {stem} is missing from the split file"))
        })?;
        let patient = parse_recording_filename(stem)?.patient_id;
        if *by_patient.entry(patient).or_insert(split) != split {
            conflicts.insert(patient);
        }
    }
    if !conflicts.is_empty() {
        return Err(Error::Integrity(format!(
            "split file assigns patients {conflicts:?} to both train and test"
        )));
    }
    Ok(by_patient)
}

fn ratio_assignment(cycles: &[CycleRef], ratio: f64, seed: u64) -> Result<HashMap<u32, Split>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Validation(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut per_patient: BTreeMap<u32, usize> = BTreeMap::new();
    for c in cycles {
        *per_patient.entry(c.meta.patient_id).or_default() += 1;
    }
    let mut order: Vec<u32> = per_patient.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = cycles.len() as f64;
    let mut taken = 0usize;
    let mut assignment = HashMap::new();
    for patient in order {
        let split = if (taken as f64) / total >= ratio {
            Split::Test
        } else {
            taken += per_patient[&patient];
            Split::Train
        };
        assignment.insert(patient, split);
    }
    Ok(assignment)
}

/// One recording of a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingFiles {
    pub meta: RecordingMeta,
    pub wav: PathBuf,
    pub annotation: PathBuf,
}

/// Lists `<stem>.wav` files that have a matching `<stem>.txt`, sorted by stem.
/// Text files that are not recording annotations (no WAV twin) are ignored.
pub fn scan_dataset_dir(dir: &Path) -> Result<Vec<RecordingFiles>> {
    let mut out = Vec::new();
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for item in listing {
        let path = item.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("wav") {
            continue;
        }
        let annotation = path.with_extension("txt");
        if !annotation.is_file() {
            return Err(Error::Validation(format!(
                "{} has no annotation file {}",
                path.display(),
                annotation.display()
            )));
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let meta = parse_recording_filename(stem).map_err(|e| match e {
            Error::Parse { message, .. } => {
                Error::Validation(format!("{}: {message}", path.display()))
            }
            other => other,
        })?;
        out.push(RecordingFiles {
            meta,
            wav: path.clone(),
            annotation,
        });
    }
    out.sort_by_key(|r| r.meta.file_stem());
    Ok(out)
}

/// Reads every annotation file and lists the cycles it describes.
pub fn collect_cycles(recordings: &[RecordingFiles]) -> Result<Vec<CycleRef>> {
    let mut out = Vec::new();
    for rec in recordings {
        let text = fs::read_to_string(&rec.annotation).map_err(|e| Error::io(&rec.annotation, e))?;
        let annotations = parse_annotation_file(&text).map_err(|e| match e {
            Error::Parse { line, message } => Error::Parse {
                line,
                message: format!("{}: {message}", rec.annotation.display()),
            },
            other => other,
        })?;
        for (cycle_index, annotation) in annotations.into_iter().enumerate() {
            out.push(CycleRef {
                file_stem: rec.meta.file_stem(),
                meta: rec.meta.clone(),
                cycle_index,
                annotation,
                audio: rec.wav.clone(),
            });
        }
    }
    Ok(out)
}

/// Loads the audio of the given entries, reading each WAV file once.
pub fn load_cycles<'a>(
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
) -> Result<Vec<BreathCycle>> {
    let entries: Vec<&ManifestEntry> = entries.into_iter().collect();
    let mut audio_cache: HashMap<&Path, crate::dsp::Waveform> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let path = e.cycle.audio.as_path();
        if !audio_cache.contains_key(path) {
            audio_cache.clear();
            audio_cache.insert(path, read_wav(path)?);
        }
        let waveform = &audio_cache[path];
        let mut cycle = extract_cycles(waveform, &[e.cycle.annotation], &e.cycle.meta)?;
        out.push(cycle.remove(0));
    }
    Ok(out)
}
