//! Silhouette datasets: directory indexing, lazy PNG loading, partition
//! protocols, probe composition and the synthetic walking-figure generator.

mod layout;
mod probe;
mod protocol;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::exec;
use crate::network::{FRAME_HEIGHT, FRAME_WIDTH};
use crate::tensor::Tensor;

pub use layout::{LayoutTemplate, CASIA_TEMPLATE};
pub(crate) use probe::draw_frames;
pub use probe::{compose_probe, ProbeMode, ProbeSample};
pub use protocol::{ProtocolSpec, SeqRule, Split, TrainIds};
pub use synth::{synth_generate, synth_sequence, IdentityShape, SynthSpec, SYNTH_VIEWS};

/// Identifies one recorded sequence. Ordering is field-wise: identity and
/// condition as strings, sequence number and view numerically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceKey {
    pub identity: String,
    pub condition: String,
    pub seq: u32,
    pub view: u32,
}

impl fmt::Display for SequenceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}-{:02}/{:03}", self.identity, self.condition, self.seq, self.view)
    }
}

/// One loaded sequence: frames `[n, 1, 64, 44]` with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteSet {
    pub key: SequenceKey,
    pub frames: Tensor<f32>,
}

impl SilhouetteSet {
    pub fn new(key: SequenceKey, frames: Tensor<f32>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != FRAME_HEIGHT || s[3] != FRAME_WIDTH {
            return Err(Error::Shape(format!("silhouette frames must be [n, 1, 64, 44], got {s:?}")));
        }
        Ok(Self { key, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEntry {
    pub key: SequenceKey,
    /// Frame files relative to the dataset root, sorted.
    pub files: Vec<PathBuf>,
}

/// Index of a dataset directory. Nothing is decoded until
/// [`DatasetIndex::load`] is called.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    template: String,
    entries: Vec<SequenceEntry>,
    /// Sequence directories that matched the layout but held no frames.
    skipped: Vec<PathBuf>,
}

const MANIFEST_HEADER: &str = "# gaitset dataset index v1";

impl DatasetIndex {
    /// Walk `root` and index every frame file matching `template`.
    pub fn scan(root: &Path, template: &str) -> Result<Self> {
        let layout = LayoutTemplate::parse(template)?;
        if !root.is_dir() {
            return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
        }
        let mut groups: BTreeMap<SequenceKey, Vec<PathBuf>> = BTreeMap::new();
        let mut seq_dirs: BTreeMap<PathBuf, bool> = BTreeMap::new();
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", root.display())))?;
            let rel = entry.path().strip_prefix(root).expect("walkdir stays under root").to_path_buf();
            let rel_str = rel_string(&rel);
            if entry.file_type().is_dir() {
                if layout.matches_dir(&rel_str) {
                    seq_dirs.entry(rel).or_insert(false);
                }
            } else if let Some(key) = layout.match_file(&rel_str)? {
                if let Some(parent) = rel.parent() {
                    seq_dirs.insert(parent.to_path_buf(), true);
                }
                groups.entry(key).or_default().push(rel);
            }
        }
        let skipped: Vec<PathBuf> = seq_dirs.into_iter().filter(|(_, seen)| !seen).map(|(p, _)| p).collect();
        for dir in &skipped {
            log::warn!("skipping empty sequence directory {}", dir.display());
        }
        if groups.is_empty() {
            return Err(Error::Data(format!(
                "no frames matching layout {template:?} under {}",
                root.display()
            )));
        }
        let entries = groups
            .into_iter()
            .map(|(key, mut files)| {
                files.sort();
                SequenceEntry { key, files }
            })
            .collect();
        Ok(Self { root: root.to_path_buf(), template: template.to_string(), entries, skipped })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn entries(&self) -> &[SequenceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of empty sequence directories left out of the index.
    pub fn warning_count(&self) -> usize {
        self.skipped.len()
    }

    pub fn skipped(&self) -> &[PathBuf] {
        &self.skipped
    }

    /// Distinct identities in sorted order.
    pub fn identities(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.entries.iter().map(|e| e.key.identity.clone()).collect();
        ids.dedup();
        ids
    }

    pub fn find(&self, key: &SequenceKey) -> Option<usize> {
        self.entries.binary_search_by(|e| e.key.cmp(key)).ok()
    }

    /// Decode every frame of entry `i`.
    pub fn load(&self, i: usize) -> Result<SilhouetteSet> {
        let entry = &self.entries[i];
        let frames: Vec<Vec<f32>> = exec::map_range(entry.files.len(), |j| read_frame(&self.root.join(&entry.files[j])))
            .into_iter()
            .collect::<Result<_>>()?;
        let n = frames.len();
        let data = frames.concat();
        SilhouetteSet::new(entry.key.clone(), Tensor::new(vec![n, 1, FRAME_HEIGHT, FRAME_WIDTH], data)?)
    }

    /// Decode several entries, preserving order.
    pub fn load_many(&self, indices: &[usize]) -> Result<Vec<SilhouetteSet>> {
        indices.iter().map(|&i| self.load(i)).collect()
    }

    /// Text manifest, one block per sequence:
    ///
    /// ```text
    /// # gaitset dataset index v1
    /// template <layout template>
    /// sequence <identity> <condition> <seq> <view> <frame count>
    /// <relative frame path>   (frame count lines)
    /// empty <relative directory>
    /// ```
    pub fn to_manifest(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\ntemplate {}\n", self.template);
        for e in &self.entries {
            let k = &e.key;
            out.push_str(&format!("sequence {} {} {} {} {}\n", k.identity, k.condition, k.seq, k.view, e.files.len()));
            for f in &e.files {
                out.push_str(&rel_string(f));
                out.push('\n');
            }
        }
        for d in &self.skipped {
            out.push_str(&format!("empty {}\n", rel_string(d)));
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(root: &Path, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::format(path, "missing index header"));
        }
        let template = lines
            .next()
            .and_then(|l| l.strip_prefix("template "))
            .ok_or_else(|| Error::format(path, "missing template line"))?
            .to_string();
        let mut entries = Vec::new();
        let mut skipped = Vec::new();
        while let Some(line) = lines.next() {
            if let Some(d) = line.strip_prefix("empty ") {
                skipped.push(PathBuf::from(d));
                continue;
            }
            let f: Vec<&str> = line.strip_prefix("sequence ").unwrap_or("").split(' ').collect();
            if f.len() != 5 {
                return Err(Error::format(path, format!("bad index line {line:?}")));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| Error::format(path, format!("bad number {s:?}")));
            let key = SequenceKey { identity: f[0].into(), condition: f[1].into(), seq: num(f[2])?, view: num(f[3])? };
            let n = num(f[4])? as usize;
            let files: Vec<PathBuf> = (0..n)
                .map(|_| lines.next().map(PathBuf::from).ok_or_else(|| Error::format(path, "truncated index")))
                .collect::<Result<_>>()?;
            entries.push(SequenceEntry { key, files });
        }
        if entries.is_empty() {
            return Err(Error::format(path, "index lists no sequences"));
        }
        if entries.windows(2).any(|w| w[0].key >= w[1].key) {
            return Err(Error::format(path, "index entries out of order"));
        }
        Ok(Self { root: root.to_path_buf(), template, entries, skipped })
    }

    /// Use the manifest at `cache` when it exists and was built with the
    /// same template; otherwise scan and write it.
    pub fn scan_cached(root: &Path, template: &str, cache: &Path) -> Result<Self> {
        if cache.exists() {
            let idx = Self::read_manifest(root, cache)?;
            if idx.template == template {
                return Ok(idx);
            }
        }
        let idx = Self::scan(root, template)?;
        idx.write_manifest(cache)?;
        Ok(idx)
    }
}

fn rel_string(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Decode one PNG as a binary 64×44 silhouette.
pub fn read_frame(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
    if img.height() as usize != FRAME_HEIGHT || img.width() as usize != FRAME_WIDTH {
        return Err(Error::format(
            path,
            format!("frame is {}x{}, expected {FRAME_HEIGHT}x{FRAME_WIDTH}", img.height(), img.width()),
        ));
    }
    Ok(img.into_raw().into_iter().map(|v| if v as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect())
}

/// Write one frame (values in [0, 1]) as an 8-bit grayscale PNG.
pub fn write_frame(path: &Path, frame: &[f32]) -> Result<()> {
    let raw: Vec<u8> = frame.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(FRAME_WIDTH as u32, FRAME_HEIGHT as u32, raw)
        .ok_or_else(|| Error::Shape(format!("frame has {} pixels, expected {}", frame.len(), FRAME_HEIGHT * FRAME_WIDTH)))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// An index together with the partition a protocol induces on it.
pub struct Dataset {
    pub index: DatasetIndex,
    pub protocol: ProtocolSpec,
    pub split: Split,
}

impl Dataset {
    /// Decoded training sequences.
    pub fn load_train(&self) -> Result<Vec<SilhouetteSet>> {
        self.index.load_many(&self.split.train)
    }
}

/// Index `root` under `template` and partition it with `protocol`.
pub fn load_dataset(root: &Path, template: &str, protocol: &ProtocolSpec) -> Result<Dataset> {
    let index = DatasetIndex::scan(root, template)?;
    let split = protocol.split(&index)?;
    Ok(Dataset { index, protocol: protocol.clone(), split })
}
