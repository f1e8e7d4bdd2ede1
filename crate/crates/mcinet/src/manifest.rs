//! CSV manifests: header `subject_id,label,plane,image_path`.
//!
//! Relative image paths are resolved against the manifest's directory on
//! load; written paths are made relative to the output file when possible.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mcinet_core::data::{DatasetManifest, SubjectRecord};

use crate::error::{self, AppError, Result};

pub const HEADER: [&str; 4] = ["subject_id", "label", "plane", "image_path"];

pub fn parse_manifest(text: &[u8], base: &Path, origin: &Path) -> Result<DatasetManifest> {
    let fail = |line: u64, msg: String| AppError::format(origin, format!("line {line}: {msg}"));
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text);
    let header = reader
        .headers()
        .map_err(|e| AppError::format(origin, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(fail(1, format!("header must be `{}`", HEADER.join(","))));
    }
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, format!("malformed row ({e})"))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or_default();
        let label = field(1)
            .parse()
            .map_err(|_| fail(line, format!("unknown label `{}`", field(1))))?;
        let plane = field(2)
            .parse()
            .map_err(|_| fail(line, format!("unknown plane `{}`", field(2))))?;
        if field(0).is_empty() {
            return Err(fail(line, "empty subject_id".into()));
        }
        if !seen.insert((field(0).to_string(), plane)) {
            return Err(fail(
                line,
                format!("duplicate record for subject `{}`, plane {plane}", field(0)),
            ));
        }
        let raw = Path::new(field(3));
        let resolved = if raw.is_absolute() {
            raw.to_path_buf()
        } else {
            base.join(raw)
        };
        records.push(SubjectRecord {
            subject_id: field(0).to_string(),
            label,
            plane,
            image_path: resolved.to_string_lossy().into_owned(),
        });
    }
    DatasetManifest::new(records).map_err(|e| AppError::format(origin, e.to_string()))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = error::read(path)?;
    let base = std::path::absolute(path)
        .map_err(|e| AppError::io(path, e))?
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    parse_manifest(&bytes, &base, path)
}

pub fn manifest_csv(m: &DatasetManifest, relative_to: Option<&Path>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in m.records() {
        let p = PathBuf::from(&r.image_path);
        let shown = relative_to.and_then(|base| p.strip_prefix(base).ok()).unwrap_or(&p);
        w.write_record([&r.subject_id, r.label.name(), r.plane.name(), &shown.to_string_lossy()])
            .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let dir = std::path::absolute(path).map_err(|e| AppError::io(path, e))?;
    error::write(path, &manifest_csv(m, dir.parent()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mcinet_core::data::{ClassSummary, Label, Plane};

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text.as_bytes(), Path::new("/data"), Path::new("m.csv"))
    }

    #[test]
    fn parses_and_resolves() {
        let m =
            parse("subject_id,label,plane,image_path\ns1,MCI,Axial,img/a.pgm\ns2,normal,frontal,/abs/b.pgm\n").unwrap();
        assert_eq!(m.records()[0].label, Label::Mci);
        assert_eq!(m.records()[0].plane, Plane::Axial);
        assert_eq!(m.records()[0].image_path, "/data/img/a.pgm");
        assert_eq!(m.records()[1].image_path, "/abs/b.pgm");
        assert_eq!(m.class_summary(), ClassSummary { normal: 1, mci: 1 });
        let text = String::from_utf8(manifest_csv(&m, Some(Path::new("/data")))).unwrap();
        assert_eq!(
            text,
            "subject_id,label,plane,image_path\ns1,mci,axial,img/a.pgm\ns2,normal,frontal,/abs/b.pgm\n"
        );
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse("subject_id,label,plane,image_path\n").unwrap().is_empty());
    }

    #[test]
    fn errors_name_line_and_value() {
        let err = parse("subject_id,label,plane,image_path\ns1,normal,axial,a\ns2,AD,axial,b\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("AD"), "{msg}");
        let err = parse("subject_id,label,plane,image_path\ns1,normal,axial,a\ns1,normal,axial,b\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse("subject_id,label,plane,image_path\ns1,normal,axial\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse("id,label,plane,path\n").is_err());
        assert!(parse("subject_id,label,plane,image_path\ns1,normal,coronal,a\n").is_err());
    }
}
