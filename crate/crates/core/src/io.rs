//! On-disk formats.
//!
//! A volume is a pair of files: `<name>.vol` holds little-endian `f32`
//! values in `h, w, d` order (d fastest) and `<name>.json` holds
//! `{"dims":[H,W,D],"voxel_size_mm":3.0}`. A cohort directory holds
//! `<subject_id>/<index>.vol` (plus sidecars) and a `labels.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{Cohort, Label, Subject, Volume3D};

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    voxel_size_mm: VoxelSize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum VoxelSize {
    Isotropic(f64),
    PerAxis([f64; 3]),
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("vol")
}

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Invalid(format!(
            "payload of {} bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_f64(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(f64::to_le_bytes).collect()
}

pub fn decode_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Invalid(format!(
            "payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Writes `<path>.vol` and `<path>.json`; any extension on `path` is replaced.
pub fn save_volume<T: Scalar>(v: &Volume3D<T>, path: &Path) -> Result<()> {
    let header = VolumeHeader {
        dims: v.dims(),
        voxel_size_mm: VoxelSize::Isotropic(v.voxel_size_mm()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    write_atomic(
        &payload_path(path),
        &encode_f32(v.data().iter().map(|x| x.to_f32_())),
    )?;
    write_atomic(&sidecar_path(path), &json)
}

pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume3D<T>> {
    let header_path = sidecar_path(path);
    let raw = read_file(&header_path)?;
    let header: VolumeHeader = serde_json::from_slice(&raw).map_err(|e| Error::Header {
        path: header_path.clone(),
        msg: e.to_string(),
    })?;
    let voxel = match header.voxel_size_mm {
        VoxelSize::Isotropic(v) => v,
        VoxelSize::PerAxis([a, b, c]) if a == b && b == c => a,
        VoxelSize::PerAxis(sizes) => {
            return Err(Error::Header {
                path: header_path,
                msg: format!("anisotropic voxels {sizes:?} are not supported"),
            })
        }
    };
    let values = decode_f32(&read_file(&payload_path(path))?)?;
    let expected = header.dims.iter().product::<usize>();
    if values.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: values.len(),
        });
    }
    Volume3D::new(
        header.dims,
        voxel,
        values.into_iter().map(|x| T::lit(x as f64)).collect(),
    )
}

/// Writes a cohort as `<dir>/<subject>/<index>.vol` plus `<dir>/labels.csv`.
pub fn save_cohort<T: Scalar>(cohort: &Cohort<T>, dir: &Path) -> Result<()> {
    let mut csv = String::from("subject_id,index,label\n");
    for s in cohort.subjects() {
        for (i, v) in s.volumes.iter().enumerate() {
            save_volume(v, &dir.join(&s.id).join(format!("{i}.vol")))?;
        }
        if let Some(labels) = &s.labels {
            for (i, l) in labels.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", s.id, i, l));
            }
        }
    }
    write_atomic(&dir.join("labels.csv"), csv.as_bytes())
}

pub fn load_cohort<T: Scalar>(dir: &Path) -> Result<Cohort<T>> {
    let mut subject_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subject_dirs.sort();

    let mut labels: BTreeMap<(String, usize), Label> = BTreeMap::new();
    let labels_path = dir.join("labels.csv");
    if labels_path.exists() {
        let text = String::from_utf8(read_file(&labels_path)?)
            .map_err(|e| Error::Invalid(format!("labels.csv: {e}")))?;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Invalid(format!(
                    "labels.csv line {}: expected 3 columns",
                    lineno + 1
                )));
            }
            let idx = cols[1]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Invalid(format!("labels.csv line {}: {e}", lineno + 1)))?;
            labels.insert((cols[0].trim().to_string(), idx), cols[2].parse()?);
        }
    }

    let mut subjects = Vec::new();
    for sd in subject_dirs {
        let id = sd
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Invalid(format!("bad subject dir {}", sd.display())))?
            .to_string();
        let mut indices: Vec<usize> = fs::read_dir(&sd)
            .map_err(|e| Error::io(&sd, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "vol"))
            .filter_map(|p| p.file_stem()?.to_str()?.parse().ok())
            .collect();
        indices.sort_unstable();
        if indices.iter().enumerate().any(|(i, &k)| i != k) {
            return Err(Error::Invalid(format!(
                "subject {id}: volume indices are not contiguous from 0"
            )));
        }
        let volumes = indices
            .iter()
            .map(|i| load_volume(&sd.join(format!("{i}.vol"))))
            .collect::<Result<Vec<_>>>()?;
        let subject_labels: Vec<Option<Label>> = indices
            .iter()
            .map(|&i| labels.get(&(id.clone(), i)).copied())
            .collect();
        let labels = if subject_labels.iter().all(Option::is_some) && !indices.is_empty() {
            Some(subject_labels.into_iter().flatten().collect())
        } else if subject_labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Invalid(format!(
                "subject {id}: labels.csv covers only some volumes"
            )));
        };
        subjects.push(Subject {
            id,
            volumes,
            labels,
        });
    }
    Cohort::new(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v = Volume3D::<f32>::from_fn([4, 4, 4], 3.0, |_, _, _| rng.random::<f32>() - 0.5);
        let p = dir.path().join("x.vol");
        save_volume(&v, &p).unwrap();
        let back: Volume3D<f32> = load_volume(&p).unwrap();
        assert_eq!(back.dims(), [4, 4, 4]);
        assert_eq!(back.voxel_size_mm(), 3.0);
        for (a, b) in v.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vol");
        fs::write(&p, encode_f32(vec![0.0; 63])).unwrap();
        fs::write(
            p.with_extension("json"),
            br#"{"dims":[4,4,4],"voxel_size_mm":3.0}"#,
        )
        .unwrap();
        assert!(matches!(
            load_volume::<f64>(&p),
            Err(Error::SizeMismatch {
                expected: 64,
                found: 63
            })
        ));
    }

    #[test]
    fn missing_file_and_nan_payload_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume::<f64>(&dir.path().join("nope.vol")),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("nan.vol");
        fs::write(&p, encode_f32(vec![0.0, f32::NAN])).unwrap();
        fs::write(
            p.with_extension("json"),
            br#"{"dims":[1,1,2],"voxel_size_mm":3.0}"#,
        )
        .unwrap();
        assert!(matches!(load_volume::<f64>(&p), Err(Error::NonFinite(1))));
    }

    #[test]
    fn anisotropic_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        fs::write(&p, encode_f32(vec![0.0])).unwrap();
        fs::write(
            p.with_extension("json"),
            br#"{"dims":[1,1,1],"voxel_size_mm":[3.0,3.0,2.0]}"#,
        )
        .unwrap();
        assert!(matches!(load_volume::<f64>(&p), Err(Error::Header { .. })));
    }

    #[test]
    fn single_zero_voxel_is_four_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.vol");
        save_volume(&Volume3D::<f64>::zeros([1, 1, 1], 3.0), &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), vec![0u8; 4]);
    }

    #[test]
    fn unwritable_location_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        // a regular file cannot act as a parent directory
        let err = save_volume(&Volume3D::<f64>::zeros([1, 1, 1], 3.0), &blocker.join("v.vol"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn cohort_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |v: f32| Volume3D::<f32>::filled([2, 2, 2], 3.0, v);
        let c = Cohort::new(vec![
            Subject {
                id: "sub01".into(),
                volumes: vec![mk(0.0), mk(1.0), mk(2.0)],
                labels: Some(vec![Label::Left, Label::Rest, Label::Right]),
            },
            Subject {
                id: "sub02".into(),
                volumes: vec![mk(3.0)],
                labels: Some(vec![Label::Right]),
            },
        ])
        .unwrap();
        save_cohort(&c, dir.path()).unwrap();
        let back: Cohort<f32> = load_cohort(dir.path()).unwrap();
        assert_eq!(back, c);
    }
}
