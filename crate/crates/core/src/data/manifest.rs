use std::fs::File;
use std::path::{Component, Path, PathBuf};

use super::DataError;

/// Required first line; the third column is optional.
pub const MANIFEST_HEADER: &str = "image_path,apparent_age,annotator_stddev";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Relative to the images root.
    pub image_path: PathBuf,
    pub apparent_age: f64,
    pub annotator_stddev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingImage {
    pub line: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLoad {
    /// Rows whose image exists, in file order.
    pub records: Vec<SampleRecord>,
    pub missing: Vec<MissingImage>,
}

impl ManifestLoad {
    pub fn row_count(&self) -> usize {
        self.records.len() + self.missing.len()
    }
}

fn is_contained(path: &Path) -> bool {
    !path.as_os_str().is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn parse_number(field: &str, name: &str) -> Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("{name} '{field}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{name} '{field}' is not finite"));
    }
    Ok(v)
}

/// Reads `image_path,apparent_age[,annotator_stddev]` rows.
pub fn load_manifest(manifest_path: &Path, images_root: &Path) -> Result<ManifestLoad, DataError> {
    let file = File::open(manifest_path).map_err(|source| DataError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: u64, message: String| DataError::Parse {
        path: manifest_path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let expected: Vec<&str> = MANIFEST_HEADER.split(',').collect();
    if names.len() < 2 || names.len() > 3 || names[..] != expected[..names.len()] {
        return Err(parse_err(
            1,
            format!("header must be '{}' (last column optional)", MANIFEST_HEADER),
        ));
    }

    let mut records = Vec::new();
    let mut missing = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() < 2 || row.len() > 3 {
            return Err(parse_err(line, format!("expected 2 or 3 fields, found {}", row.len())));
        }
        let image_path = PathBuf::from(&row[0]);
        if !is_contained(&image_path) {
            return Err(parse_err(
                line,
                format!(
                    "image path '{}' must be relative and stay under the images root",
                    &row[0]
                ),
            ));
        }
        let apparent_age = parse_number(&row[1], "apparent_age").map_err(|m| parse_err(line, m))?;
        let annotator_stddev = match row.get(2) {
            Some(s) if !s.is_empty() => Some(parse_number(s, "annotator_stddev").map_err(|m| parse_err(line, m))?),
            _ => None,
        };
        if images_root.join(&image_path).is_file() {
            records.push(SampleRecord {
                image_path,
                apparent_age,
                annotator_stddev,
            });
        } else {
            missing.push(MissingImage { line, path: image_path });
        }
    }
    if records.is_empty() && missing.is_empty() {
        return Err(DataError::EmptyManifest(manifest_path.to_path_buf()));
    }
    Ok(ManifestLoad { records, missing })
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let with_stddev = records.iter().any(|r| r.annotator_stddev.is_some());
    let mut out = String::new();
    if with_stddev {
        out.push_str(MANIFEST_HEADER);
    } else {
        out.push_str("image_path,apparent_age");
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.image_path.to_string_lossy());
        out.push(',');
        out.push_str(&r.apparent_age.to_string());
        if with_stddev {
            out.push(',');
            if let Some(s) = r.annotator_stddev {
                out.push_str(&s.to_string());
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn fixture(rows: &str, images: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        for img in images {
            let p = dir.path().join(img);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, b"x").unwrap();
        }
        let manifest = dir.path().join("train.csv");
        fs::write(&manifest, rows).unwrap();
        (dir, manifest)
    }

    #[test]
    fn three_valid_rows() {
        let (dir, m) = fixture(
            "image_path,apparent_age,annotator_stddev\na.png,44,3.2\nb.png,12.5,\nsub/c.png,80,1\n",
            &["a.png", "b.png", "sub/c.png"],
        );
        let load = load_manifest(&m, dir.path()).unwrap();
        assert_eq!(load.records.len(), 3);
        assert!(load.missing.is_empty());
        assert_eq!(load.records[1].apparent_age, 12.5);
        assert_eq!(load.records[1].annotator_stddev, None);
        assert_eq!(load.records[2].image_path, PathBuf::from("sub/c.png"));
        assert_eq!(load_manifest(&m, dir.path()).unwrap(), load);
    }

    #[test]
    fn two_column_header() {
        let (dir, m) = fixture("image_path,apparent_age\na.png,44\n", &["a.png"]);
        assert_eq!(load_manifest(&m, dir.path()).unwrap().records.len(), 1);
    }

    #[test]
    fn malformed_age_names_line() {
        let (dir, m) = fixture("image_path,apparent_age\na.png,44\nb.png,forty\n", &["a.png", "b.png"]);
        match load_manifest(&m, dir.path()) {
            Err(DataError::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("forty"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_image_is_reported() {
        let (dir, m) = fixture(
            "image_path,apparent_age\na.png,44\ngone.png,30\nc.png,2\n",
            &["a.png", "c.png"],
        );
        let load = load_manifest(&m, dir.path()).unwrap();
        assert_eq!(load.records.len(), 2);
        assert_eq!(
            load.missing,
            vec![MissingImage {
                line: 3,
                path: "gone.png".into()
            }]
        );
        assert_eq!(load.row_count(), 3);
    }

    #[test]
    fn empty_and_bad_headers() {
        let (dir, m) = fixture("image_path,apparent_age\n", &[]);
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(DataError::EmptyManifest(_))
        ));
        let (dir, m) = fixture("path,age\na.png,3\n", &["a.png"]);
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(DataError::Parse { line: 1, .. })
        ));
        let (dir, m) = fixture("image_path,apparent_age\n../a.png,3\n", &[]);
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(DataError::Parse { line: 2, .. })
        ));
        let (dir, m) = fixture("image_path,apparent_age\na.png,inf\n", &["a.png"]);
        assert!(matches!(
            load_manifest(&m, dir.path()),
            Err(DataError::Parse { line: 2, .. })
        ));
        let missing = dir.path().join("nope.csv");
        assert!(matches!(load_manifest(&missing, dir.path()), Err(DataError::Io { .. })));
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let records = vec![SampleRecord {
            image_path: "a.png".into(),
            apparent_age: 33.3,
            annotator_stddev: Some(2.5),
        }];
        let m = dir.path().join("m.csv");
        write_manifest(&m, &records).unwrap();
        assert_eq!(load_manifest(&m, dir.path()).unwrap().records, records);
    }
}
