//! Dataset manifest: CSV with header `image,heatmap,label[,expected_class]`.
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path exactly as written in the manifest; used as the record id.
    pub id: String,
    pub image: PathBuf,
    pub heatmap: PathBuf,
    pub label: usize,
    /// Reference prediction recorded by the converter, if any.
    pub expected_class: Option<usize>,
}

const REQUIRED: [&str; 3] = ["image", "heatmap", "label"];
const OPTIONAL: &str = "expected_class";

pub fn load_manifest(path: &Path, num_classes: usize) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    parse_manifest(file, path, &base, num_classes)
}

pub fn parse_manifest<R: std::io::Read>(
    reader: R,
    path: &Path,
    base: &Path,
    num_classes: usize,
) -> Result<Vec<ManifestEntry>> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(parse_err(1, e.to_string())),
    };
    let names: Vec<&str> = headers.iter().collect();
    let valid = names.len() >= 3
        && names[..3] == REQUIRED
        && (names.len() == 3 || (names.len() == 4 && names[3] == OPTIONAL));
    if !valid && !names.iter().all(|n| n.is_empty()) {
        return Err(parse_err(
            1,
            format!("expected header image,heatmap,label[,expected_class], got {}", names.join(",")),
        ));
    }

    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let class = |field: &str, what: &str| -> Result<usize> {
            let v: usize = field
                .parse()
                .map_err(|_| parse_err(line, format!("{what} {field:?} is not a class index")))?;
            if v >= num_classes {
                return Err(parse_err(
                    line,
                    format!("{what} {v} outside [0, {num_classes})"),
                ));
            }
            Ok(v)
        };
        let label = class(&rec[2], "label")?;
        let expected_class = match rec.get(3) {
            Some(s) if !s.is_empty() => Some(class(s, "expected_class")?),
            _ => None,
        };
        let resolve = |field: &str, what: &str| -> Result<PathBuf> {
            if field.is_empty() {
                return Err(parse_err(line, format!("empty {what} path")));
            }
            let p = base.join(field);
            if !p.is_file() {
                return Err(parse_err(line, format!("{what} {} does not exist", p.display())));
            }
            Ok(p)
        };
        entries.push(ManifestEntry {
            id: rec[0].to_string(),
            image: resolve(&rec[0], "image")?,
            heatmap: resolve(&rec[1], "heatmap")?,
            label,
            expected_class,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, names: &[&str]) {
        for n in names {
            std::fs::write(dir.join(n), b"x").unwrap();
        }
    }

    fn parse(dir: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
        let p = dir.join("manifest.csv");
        std::fs::write(&p, text).unwrap();
        load_manifest(&p, 1000)
    }

    #[test]
    fn empty_body() {
        let dir = tempfile::tempdir().unwrap();
        assert!(parse(dir.path(), "image,heatmap,label\n").unwrap().is_empty());
        assert!(parse(dir.path(), "").unwrap().is_empty());
    }

    #[test]
    fn rows_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["a.png", "b.png", "c.png", "a.f32", "b.f32", "c.f32"]);
        let m = parse(
            dir.path(),
            "image,heatmap,label,expected_class\nc.png,c.f32,3,\na.png,a.f32,1,7\nb.png,b.f32,999,0\n",
        )
        .unwrap();
        let ids: Vec<&str> = m.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["c.png", "a.png", "b.png"]);
        assert_eq!(m[0].expected_class, None);
        assert_eq!(m[1].expected_class, Some(7));
        assert_eq!(m[2].label, 999);
        assert_eq!(m[1].image, dir.path().join("a.png"));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), &["a.png", "a.f32"]);
        let line_of = |r: Result<Vec<ManifestEntry>>| match r {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of(parse(dir.path(), "image,heatmap,label\na.png,a.f32,1\na.png,a.f32,1000\n")), 3);
        assert_eq!(line_of(parse(dir.path(), "image,heatmap,label\na.png,a.f32,cat\n")), 2);
        assert_eq!(line_of(parse(dir.path(), "image,heatmap,label\nmissing.png,a.f32,1\n")), 2);
        assert_eq!(line_of(parse(dir.path(), "img,map,label\n")), 1);
        assert!(load_manifest(&dir.path().join("nope.csv"), 10).is_err());
    }
}
