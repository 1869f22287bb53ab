//! Binary matrix/label files and the key=value manifest.
//!
//! Matrix file: `BVLM`, version byte, u32 LE rows, u32 LE cols, then row-major
//! LE floats. Version 1 holds f32 (feature data); version 2 holds f64 and is
//! used for model parameters, preprocessing models and optimizer state where
//! exact reload matters. Label file: `BVLL`, version 1, u32 count, u32
//! n_classes, then `count` u32 class indices.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{
    ClassSplit, ExtraPool, FeatureMatrix, LabelVector, NovelSplit, RoiMap, SeenSplit, TestSplit,
    TrimodalDataset,
};
use crate::error::{Error, Result};

const MATRIX_MAGIC: &[u8; 4] = b"BVLM";
const LABEL_MAGIC: &[u8; 4] = b"BVLL";
const VERSION_F32: u8 = 0x01;
const VERSION_F64: u8 = 0x02;
const HEADER_LEN: usize = 4 + 1 + 8;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(magic: &[u8; 4], version: u8, a: usize, b: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.push(version);
    out.extend_from_slice(&(a as u32).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out
}

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<(u8, usize, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != magic {
        return Err(Error::format(path, "bad magic or truncated header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    Ok((bytes[4], u32_at(5), u32_at(9)))
}

/// Writes single-precision feature data (version 1).
pub fn write_matrix(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut out = header(MATRIX_MAGIC, VERSION_F32, m.rows(), m.cols());
    out.reserve(m.rows() * m.cols() * 4);
    for ((row, col), v) in m.view().indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

/// Writes double-precision data (version 2).
pub fn write_matrix_f64(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = header(MATRIX_MAGIC, VERSION_F64, m.nrows(), m.ncols());
    out.reserve(m.len() * 8);
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &out)
}

enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

fn read_payload(path: &Path) -> Result<(usize, usize, Payload)> {
    let bytes = read_file(path)?;
    let (version, rows, cols) = parse_header(path, &bytes, MATRIX_MAGIC)?;
    let body = &bytes[HEADER_LEN..];
    let width = match version {
        VERSION_F32 => 4,
        VERSION_F64 => 8,
        v => return Err(Error::format(path, format!("unsupported version {v}"))),
    };
    if body.len() != rows * cols * width {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes, found {}", rows * cols * width, body.len()),
        ));
    }
    let payload = if width == 4 {
        Payload::F32(
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        Payload::F64(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    Ok((rows, cols, payload))
}

/// Reads a version-1 feature matrix.
pub fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    match read_payload(path)? {
        (rows, cols, Payload::F32(v)) => FeatureMatrix::from_rows(rows, cols, v),
        _ => Err(Error::format(path, "expected single-precision feature matrix")),
    }
}

/// Reads either version into double precision. Empty matrices are allowed here.
pub fn read_matrix_f64(path: &Path) -> Result<Array2<f64>> {
    let (rows, cols, payload) = read_payload(path)?;
    let values = match payload {
        Payload::F32(v) => v.into_iter().map(f64::from).collect(),
        Payload::F64(v) => v,
    };
    if let Some(i) = values.iter().position(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i / cols.max(1),
            col: i % cols.max(1),
        });
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &LabelVector) -> Result<()> {
    let mut out = header(LABEL_MAGIC, VERSION_F32, labels.len(), labels.n_classes() as usize);
    for l in labels.entries() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    write_file(path, &out)
}

pub fn read_labels(path: &Path) -> Result<LabelVector> {
    let bytes = read_file(path)?;
    let (version, count, n_classes) = parse_header(path, &bytes, LABEL_MAGIC)?;
    if version != VERSION_F32 {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 4 {
        return Err(Error::format(path, "label payload length mismatch"));
    }
    let entries = body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelVector::new(entries, n_classes as u32)
}

/// Ordered UTF-8 `key=value` lines; `#` starts a comment line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn require(&self, key: &str, path: &Path) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::format(path, format!("manifest is missing key `{key}`")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let raw = self.require(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("bad value for `{key}`: {raw}")))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut m = Manifest::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(path, format!("line {}: expected key=value", lineno + 1))
            })?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}

fn join_classes<'a>(it: impl Iterator<Item = &'a u32>) -> String {
    it.map(u32::to_string).collect::<Vec<_>>().join(",")
}

fn parse_classes(raw: &str, path: &Path) -> Result<Vec<u32>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad class index `{s}`")))
        })
        .collect()
}

pub fn save_dataset(ds: &TrimodalDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::new();
    m.set("kind", "dataset");
    m.set("version", 1);
    m.set("n_classes", ds.n_classes());
    m.set("seen_classes", join_classes(ds.classes.seen().iter()));
    m.set("novel_classes", join_classes(ds.classes.novel().iter()));
    m.set("repeats_per_stimulus", ds.repeats_per_stimulus);

    let mut matrix = |key: String, file: String, mat: &FeatureMatrix| -> Result<()> {
        write_matrix(&dir.join(&file), mat)?;
        m.set(key, file);
        Ok(())
    };
    matrix("matrix.seen.brain".into(), "seen_brain.bvlm".into(), &ds.seen.brain)?;
    matrix("matrix.seen.visual".into(), "seen_visual.bvlm".into(), &ds.seen.visual)?;
    matrix("matrix.seen.textual".into(), "seen_textual.bvlm".into(), &ds.seen.textual)?;
    matrix("matrix.novel.visual".into(), "novel_visual.bvlm".into(), &ds.novel.visual)?;
    matrix("matrix.novel.textual".into(), "novel_textual.bvlm".into(), &ds.novel.textual)?;
    if let Some(test) = &ds.test {
        matrix("matrix.test.brain".into(), "test_brain.bvlm".into(), &test.brain)?;
    }
    for (i, pool) in ds.extra.iter().enumerate() {
        match pool {
            ExtraPool::Pairs { visual, textual } => {
                matrix(format!("matrix.extra{i}.visual"), format!("extra{i}_visual.bvlm"), visual)?;
                matrix(format!("matrix.extra{i}.textual"), format!("extra{i}_textual.bvlm"), textual)?;
            }
            ExtraPool::Visual(v) => {
                matrix(format!("matrix.extra{i}.visual"), format!("extra{i}_visual.bvlm"), v)?
            }
            ExtraPool::Textual(t) => {
                matrix(format!("matrix.extra{i}.textual"), format!("extra{i}_textual.bvlm"), t)?
            }
        }
    }
    m.set("extra_pools", ds.extra.len());

    let mut labels = |key: &str, file: &str, l: &LabelVector| -> Result<()> {
        write_labels(&dir.join(file), l)?;
        m.set(key, file);
        Ok(())
    };
    labels("labels.seen", "seen_labels.bvll", &ds.seen.labels)?;
    labels("labels.novel", "novel_labels.bvll", &ds.novel.labels)?;
    if let Some(test) = &ds.test {
        labels("labels.test", "test_labels.bvll", &test.labels)?;
    }
    if let Some(roi) = &ds.roi_map {
        let mut text = String::new();
        for (voxel, name) in roi.assignment() {
            text.push_str(&format!("{voxel},{name}\n"));
        }
        write_file(&dir.join("roi_map.csv"), text.as_bytes())?;
        m.set("roi_map", "roi_map.csv");
    }
    m.write(&dir.join(MANIFEST_FILE))
}

fn read_roi_map(path: &Path) -> Result<RoiMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut assignment = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (voxel, name) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("expected voxel_index,roi_name: {line}")))?;
        let voxel = voxel
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("bad voxel index: {voxel}")))?;
        assignment.push((voxel, name.trim().to_string()));
    }
    Ok(RoiMap::new(assignment))
}

pub fn load_dataset(dir: &Path) -> Result<TrimodalDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let m = Manifest::read(&manifest_path)?;
    let p = manifest_path.as_path();
    let file = |key: &str| -> Result<PathBuf> { Ok(dir.join(m.require(key, p)?)) };

    let seen_classes = parse_classes(m.require("seen_classes", p)?, p)?;
    let novel_classes = parse_classes(m.require("novel_classes", p)?, p)?;
    let classes = ClassSplit::new(seen_classes, novel_classes)?;
    let repeats_per_stimulus: usize = m.parse_value("repeats_per_stimulus", p)?;
    let n_classes: u32 = m.parse_value("n_classes", p)?;

    let seen = SeenSplit {
        brain: read_matrix(&file("matrix.seen.brain")?)?,
        visual: read_matrix(&file("matrix.seen.visual")?)?,
        textual: read_matrix(&file("matrix.seen.textual")?)?,
        labels: read_labels(&file("labels.seen")?)?,
    };
    if seen.labels.n_classes() != n_classes {
        return Err(Error::format(p, "n_classes disagrees with the seen label file"));
    }
    let novel = NovelSplit {
        visual: read_matrix(&file("matrix.novel.visual")?)?,
        textual: read_matrix(&file("matrix.novel.textual")?)?,
        labels: read_labels(&file("labels.novel")?)?,
    };
    let test = match m.get("matrix.test.brain") {
        Some(f) => Some(TestSplit {
            brain: read_matrix(&dir.join(f))?,
            labels: read_labels(&file("labels.test")?)?,
        }),
        None => None,
    };
    let n_extra: usize = m.get("extra_pools").map_or(Ok(0), |_| m.parse_value("extra_pools", p))?;
    let mut extra = Vec::with_capacity(n_extra);
    for i in 0..n_extra {
        let v = m.get(&format!("matrix.extra{i}.visual"));
        let t = m.get(&format!("matrix.extra{i}.textual"));
        let pool = match (v, t) {
            (Some(v), Some(t)) => ExtraPool::Pairs {
                visual: read_matrix(&dir.join(v))?,
                textual: read_matrix(&dir.join(t))?,
            },
            (Some(v), None) => ExtraPool::Visual(read_matrix(&dir.join(v))?),
            (None, Some(t)) => ExtraPool::Textual(read_matrix(&dir.join(t))?),
            (None, None) => return Err(Error::format(p, format!("extra pool {i} has no matrices"))),
        };
        extra.push(pool);
    }
    let roi_map = match m.get("roi_map") {
        Some(f) => Some(read_roi_map(&dir.join(f))?),
        None => None,
    };
    let ds = TrimodalDataset {
        classes,
        seen,
        novel,
        test,
        extra,
        repeats_per_stimulus,
        roi_map,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn three_by_two_matrix_is_37_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bvlm");
        let m = FeatureMatrix::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        write_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 37);
        assert_eq!(&bytes[..5], b"BVLM\x01");
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1.0f32.to_le_bytes());
        assert_eq!(read_matrix(&path).unwrap(), m);
    }

    #[test]
    fn f64_matrices_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bvlm");
        let m = array![[0.1f64, -1.0 / 3.0], [1e-300, 7.0]];
        write_matrix_f64(&path, &m).unwrap();
        assert_eq!(read_matrix_f64(&path).unwrap(), m);
        assert!(read_matrix(&path).is_err());
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bvlm");
        let m = FeatureMatrix::new(array![[1.0, 2.0]]).unwrap();
        write_matrix(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.bvll");
        let l = LabelVector::new(vec![3, 0, 2], 4).unwrap();
        write_labels(&path, &l).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 13 + 12);
        assert_eq!(read_labels(&path).unwrap(), l);
    }

    #[test]
    fn manifest_parse_skips_comments() {
        let m = Manifest::parse("# hi\na=1\n\nb = two\n", Path::new("x")).unwrap();
        assert_eq!(m.get("a"), Some("1"));
        assert_eq!(m.get("b"), Some("two"));
        assert!(Manifest::parse("novalue\n", Path::new("x")).is_err());
    }
}
