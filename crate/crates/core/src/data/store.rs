//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.txt` (one `key=value` per line) and one
//! flat file per image, `<subject_id>_<index>.<role>.bin`, containing
//! `height * width` little-endian `f32` values in row-major order. Roles are
//! `input` and `target`; target-domain datasets carry `target` files only for
//! hidden evaluation labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, DomainTag, ImageGrid, PairedSample, UnpairedSample};
use crate::error::{Error, IoContext, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn valid_subject_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

pub(crate) fn write_f32_file(path: &Path, grid: &ImageGrid) -> Result<()> {
    if !grid.is_f32_exact() {
        return Err(format_err(path, "values are not exactly representable as f32"));
    }
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for &v in grid.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).at(path)
}

/// Writes values lossily as `f32` (debug dumps of derived maps).
pub(crate) fn write_f32_lossy(path: &Path, grid: &ImageGrid) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.len() * 4);
    for &v in grid.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).at(path)
}

pub(crate) fn read_f32_file(path: &Path, height: usize, width: usize, range: (f64, f64)) -> Result<ImageGrid> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() != height * width * 4 {
        return Err(format_err(
            path,
            format!("expected {} bytes, found {}", height * width * 4, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ImageGrid::new(height, width, values, range.0, range.1)
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(dir).at(dir)?;
    let (height, width) = ds.dims().expect("nonempty");
    let range = ds.input(0).range();

    let mut grids: Vec<(usize, &str, &ImageGrid)> = Vec::new();
    match (ds.paired(), ds.unpaired()) {
        (Some(samples), _) => {
            for (i, s) in samples.iter().enumerate() {
                grids.push((i, "input", s.input()));
                grids.push((i, "target", s.target()));
            }
        }
        (_, Some(samples)) => {
            for (i, s) in samples.iter().enumerate() {
                grids.push((i, "input", s.input()));
                if let Some(t) = s.hidden_target() {
                    grids.push((i, "target", t));
                }
            }
        }
        _ => unreachable!(),
    }

    for (i, role, grid) in &grids {
        let subject = ds.subject_id(*i);
        if !valid_subject_id(subject) {
            return Err(Error::InvalidDataset(format!(
                "subject id {subject:?} must be nonempty ASCII alphanumerics, '-' or '_'"
            )));
        }
        if grid.range() != range {
            return Err(Error::InvalidDataset(
                "all images in a dataset must share one intensity range".into(),
            ));
        }
        let path = dir.join(format!("{subject}_{i:04}.{role}.bin"));
        write_f32_file(&path, grid)?;
    }

    let mut manifest = String::from("# gstuda dataset\n");
    manifest.push_str(&format!("domain_tag={}\n", ds.domain_tag().as_str()));
    manifest.push_str(&format!("count={}\n", ds.len()));
    manifest.push_str(&format!("height={height}\n"));
    manifest.push_str(&format!("width={width}\n"));
    manifest.push_str(&format!("range={} {}\n", range.0, range.1));
    manifest.push_str(&format!("seed={}\n", ds.seed()));
    for w in ds.warnings() {
        manifest.push_str(&format!("warning={}\n", w.replace('\n', " ")));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).at(&path)
}

struct Manifest {
    domain: DomainTag,
    count: usize,
    height: usize,
    width: usize,
    range: (f64, f64),
    seed: u64,
    warnings: Vec<String>,
}

fn parse_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).at(path)?;
    let mut kv: BTreeMap<&str, &str> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format_err(path, format!("line {}: expected key=value", lineno + 1)))?;
        if k == "warning" {
            warnings.push(v.to_string());
        } else {
            kv.insert(k.trim(), v.trim());
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| format_err(path, format!("missing key {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| format_err(path, format!("{k} is not an integer")))
    };
    let range_text = get("range")?;
    let range: Vec<f64> = range_text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(path, "range must be two numbers"))?;
    if range.len() != 2 {
        return Err(format_err(path, "range must be two numbers"));
    }
    Ok(Manifest {
        domain: get("domain_tag")?.parse()?,
        count: num("count")?,
        height: num("height")?,
        width: num("width")?,
        range: (range[0], range[1]),
        seed: get("seed")?
            .parse()
            .map_err(|_| format_err(path, "seed is not an integer"))?,
        warnings,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = parse_manifest(&dir.join(MANIFEST_FILE))?;

    // index -> (subject, has_input, has_target)
    let mut files: BTreeMap<usize, (String, bool, bool)> = BTreeMap::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let entry = entry.at(dir)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".bin") else {
            continue;
        };
        let Some((base, role)) = stem.rsplit_once('.') else {
            continue;
        };
        let Some((subject, index)) = base.rsplit_once('_') else {
            continue;
        };
        let index: usize = index
            .parse()
            .map_err(|_| format_err(&entry.path(), "bad sample index"))?;
        let slot = files
            .entry(index)
            .or_insert_with(|| (subject.to_string(), false, false));
        if slot.0 != subject {
            return Err(format_err(&entry.path(), "conflicting subject ids for one index"));
        }
        match role {
            "input" => slot.1 = true,
            "target" => slot.2 = true,
            other => return Err(format_err(&entry.path(), format!("unknown role {other:?}"))),
        }
    }
    if files.len() != manifest.count || files.keys().copied().ne(0..manifest.count) {
        return Err(format_err(
            dir,
            format!("manifest declares {} samples, found {}", manifest.count, files.len()),
        ));
    }

    let load = |subject: &str, index: usize, role: &str| {
        read_f32_file(
            &dir.join(format!("{subject}_{index:04}.{role}.bin")),
            manifest.height,
            manifest.width,
            manifest.range,
        )
    };

    let mut ds = match manifest.domain {
        DomainTag::Source => {
            let mut samples = Vec::with_capacity(manifest.count);
            for (&i, (subject, has_input, has_target)) in &files {
                if !(*has_input && *has_target) {
                    return Err(format_err(dir, format!("source sample {i} needs input and target")));
                }
                samples.push(PairedSample::new(
                    load(subject, i, "input")?,
                    load(subject, i, "target")?,
                    subject.clone(),
                )?);
            }
            Dataset::source(samples, manifest.seed)?
        }
        DomainTag::Target => {
            let mut samples = Vec::with_capacity(manifest.count);
            for (&i, (subject, has_input, has_target)) in &files {
                if !has_input {
                    return Err(format_err(dir, format!("target sample {i} has no input")));
                }
                let hidden = if *has_target {
                    Some(load(subject, i, "target")?)
                } else {
                    None
                };
                samples.push(UnpairedSample::new(load(subject, i, "input")?, subject.clone(), hidden)?);
            }
            Dataset::target(samples, manifest.seed)?
        }
    };
    for w in manifest.warnings {
        ds.add_warning(w);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::filled(2, 2, 0.1, 0.0, 1.0).unwrap();
        let s = PairedSample::new(g.clone(), g, "a").unwrap();
        let ds = Dataset::source(vec![s], 0).unwrap();
        assert!(write_dataset(&ds, dir.path()).is_err());
    }

    #[test]
    fn rejects_bad_subject_ids() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::filled(2, 2, 0.5, 0.0, 1.0).unwrap();
        let s = PairedSample::new(g.clone(), g, "a.b").unwrap();
        let ds = Dataset::source(vec![s], 0).unwrap();
        assert!(write_dataset(&ds, dir.path()).is_err());
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let g = ImageGrid::filled(2, 2, 0.5, 0.0, 1.0).unwrap();
        let s = UnpairedSample::new(g, "t", None).unwrap();
        let ds = Dataset::target(vec![s], 0).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::write(dir.path().join("t_0000.input.bin"), [0u8; 6]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
