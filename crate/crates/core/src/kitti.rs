//! SemanticKITTI scan/label ingestion and the 19-class label taxonomy.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;
/// Number of training classes.
pub const NUM_CLASSES: usize = 19;

/// Short class names in train-ID order (the usual results-table header).
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "car", "bicy", "moto", "truc", "o.veh", "ped", "b.list", "m.list", "road", "park", "walk", "o.gro", "build",
    "fenc", "veg", "trun", "terr", "pole", "sign",
];

const DEFAULT_REMAP: &str = include_str!("../fixtures/semantic_kitti_remap.txt");

#[derive(Debug, thiserror::Error)]
pub enum KittiError {
    #[error("{path}: file not found")]
    NotFound { path: PathBuf },
    #[error("{path}: length {len} bytes is not a multiple of {record} bytes")]
    Truncated { path: PathBuf, len: usize, record: usize },
    #[error("{path}: {found} labels for a scan with {expected} points")]
    LabelCount { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: missing directory")]
    MissingDirectory { path: PathBuf },
    #[error("remap line {line}: {detail}")]
    RemapParse { line: usize, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> KittiError {
    if source.kind() == std::io::ErrorKind::NotFound {
        KittiError::NotFound { path: path.to_path_buf() }
    } else {
        KittiError::Io { path: path.to_path_buf(), source }
    }
}

/// A LiDAR sweep: Cartesian coordinates in meters, remission in `[0, 1]`,
/// and optional per-point train IDs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f32; 3]>,
    pub remission: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    /// Builds a cloud from raw `(x, y, z, remission)` records, dropping points with
    /// non-finite coordinates or zero range and clamping remission into `[0, 1]`.
    /// `labels`, when given, is aligned with `raw` and filtered alongside it.
    pub fn from_raw(raw: &[[f32; 4]], labels: Option<&[u8]>) -> Self {
        let mut pc = PointCloud { labels: labels.map(|_| Vec::new()), ..Default::default() };
        for (i, p) in raw.iter().enumerate() {
            let [x, y, z, rem] = *p;
            if !(x.is_finite() && y.is_finite() && z.is_finite()) || (x == 0.0 && y == 0.0 && z == 0.0) {
                continue;
            }
            pc.xyz.push([x, y, z]);
            pc.remission.push(if rem.is_nan() { 0.0 } else { rem.clamp(0.0, 1.0) });
            if let (Some(out), Some(src)) = (pc.labels.as_mut(), labels) {
                out.push(src[i]);
            }
        }
        pc
    }

    /// Range of point `i` in meters.
    pub fn range(&self, i: usize) -> f64 {
        let [x, y, z] = self.xyz[i];
        let (x, y, z) = (x as f64, y as f64, z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    /// Keeps the points whose mask entry is true.
    pub fn select(&self, keep: &[bool]) -> PointCloud {
        let pick = |i: usize| keep[i];
        PointCloud {
            xyz: self.xyz.iter().enumerate().filter(|(i, _)| pick(*i)).map(|(_, p)| *p).collect(),
            remission: self.remission.iter().enumerate().filter(|(i, _)| pick(*i)).map(|(_, r)| *r).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| l.iter().enumerate().filter(|(i, _)| pick(*i)).map(|(_, v)| *v).collect()),
        }
    }

    /// Serializes in the `.bin` layout (little-endian f32 quadruples).
    pub fn to_bin_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * 16);
        for (p, r) in self.xyz.iter().zip(&self.remission) {
            for v in [p[0], p[1], p[2], *r] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Decodes a `.bin` payload into raw records without filtering.
pub fn parse_raw_scan(bytes: &[u8]) -> Option<Vec<[f32; 4]>> {
    if bytes.len() % 16 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(16)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
                [f(0), f(4), f(8), f(12)]
            })
            .collect(),
    )
}

/// Reads the unfiltered records of a `.bin` scan.
pub fn read_raw_scan(path: &Path) -> Result<Vec<[f32; 4]>, KittiError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_raw_scan(&bytes).ok_or(KittiError::Truncated { path: path.to_path_buf(), len: bytes.len(), record: 16 })
}

/// Reads a `.bin` scan and applies the ingestion filter.
pub fn read_scan(path: &Path) -> Result<PointCloud, KittiError> {
    Ok(PointCloud::from_raw(&read_raw_scan(path)?, None))
}

/// Reads a `.label` file and remaps its semantic IDs.
///
/// `n_points` is the record count of the paired `.bin` file before filtering.
pub fn read_labels(path: &Path, remap: &LabelRemap, n_points: usize) -> Result<Vec<u8>, KittiError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(KittiError::Truncated { path: path.to_path_buf(), len: bytes.len(), record: 4 });
    }
    if bytes.len() / 4 != n_points {
        return Err(KittiError::LabelCount { path: path.to_path_buf(), expected: n_points, found: bytes.len() / 4 });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| remap.to_train(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Reads a scan together with its labels, filtering both consistently.
pub fn read_labeled_scan(scan: &Path, labels: &Path, remap: &LabelRemap) -> Result<PointCloud, KittiError> {
    let raw = read_raw_scan(scan)?;
    let lab = read_labels(labels, remap, raw.len())?;
    Ok(PointCloud::from_raw(&raw, Some(&lab)))
}

/// Raw SemanticKITTI class ID to train ID mapping. Unknown IDs resolve to [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRemap {
    raw_to_train: HashMap<u16, u8>,
}

impl LabelRemap {
    /// The standard SemanticKITTI table shipped in `fixtures/semantic_kitti_remap.txt`.
    pub fn semantic_kitti() -> Self {
        Self::parse(DEFAULT_REMAP).expect("bundled remap fixture parses")
    }

    pub fn from_file(path: &Path) -> Result<Self, KittiError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    /// Parses `raw_id train_id` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, KittiError> {
        let mut raw_to_train = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let err = |detail: String| KittiError::RemapParse { line: n + 1, detail };
            let fields: Vec<&str> = body.split_whitespace().collect();
            let [raw, train] = fields[..] else {
                return Err(err(format!("expected two fields, got {}", fields.len())));
            };
            let raw: u16 = raw.parse().map_err(|_| err(format!("bad raw id {raw:?}")))?;
            let train: u8 = train.parse().map_err(|_| err(format!("bad train id {train:?}")))?;
            if train as usize >= NUM_CLASSES && train != IGNORE {
                return Err(err(format!("train id {train} outside 0..{} and not {IGNORE}", NUM_CLASSES - 1)));
            }
            raw_to_train.insert(raw, train);
        }
        Ok(Self { raw_to_train })
    }

    /// Maps a full 32-bit label (instance bits ignored) to a train ID.
    pub fn to_train(&self, raw: u32) -> u8 {
        self.raw_to_train.get(&((raw & 0xFFFF) as u16)).copied().unwrap_or(IGNORE)
    }

    pub fn train_to_name(&self, train: u8) -> Option<&'static str> {
        CLASS_NAMES.get(train as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn sequences(self) -> Vec<u32> {
        match self {
            Split::Train => (0..=7).chain(9..=10).collect(),
            Split::Val => vec![8],
            Split::Test => (11..=21).collect(),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanEntry {
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Lists `root/sequences/NN/velodyne/*.bin` for the split's sequences in
/// lexicographic order. Sequences absent on disk are skipped; test entries carry no labels.
pub fn sequence_split(root: &Path, split: Split) -> Result<Vec<ScanEntry>, KittiError> {
    let seq_root = root.join("sequences");
    if !seq_root.is_dir() {
        return Err(KittiError::MissingDirectory { path: seq_root });
    }
    let mut out = Vec::new();
    for seq in split.sequences() {
        let dir = seq_root.join(format!("{seq:02}"));
        let velo = dir.join("velodyne");
        if !velo.is_dir() {
            continue;
        }
        let mut scans: Vec<PathBuf> = fs::read_dir(&velo)
            .map_err(|e| io_err(&velo, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        scans.sort();
        for scan in scans {
            let labels = (split != Split::Test).then(|| {
                let stem = scan.file_stem().expect("bin file has a stem");
                dir.join("labels").join(stem).with_extension("label")
            });
            out.push(ScanEntry { scan, labels });
        }
    }
    Ok(out)
}
