//! Dense 3D volumes, subject series and cohorts.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense `H x W x D` grid stored with `d` varying fastest, then `w`, then `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T> {
    data: Vec<T>,
    dims: [usize; 3],
    voxel_size_mm: f64,
}

impl<T: Scalar> Volume3D<T> {
    pub fn new(dims: [usize; 3], voxel_size_mm: f64, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if !(voxel_size_mm > 0.0 && voxel_size_mm.is_finite()) {
            return Err(Error::Invalid(format!(
                "voxel size must be positive, got {voxel_size_mm}"
            )));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self {
            data,
            dims,
            voxel_size_mm,
        })
    }

    pub fn filled(dims: [usize; 3], voxel_size_mm: f64, value: T) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, voxel_size_mm, vec![value; n]).expect("valid filled volume")
    }

    pub fn zeros(dims: [usize; 3], voxel_size_mm: f64) -> Self {
        Self::filled(dims, voxel_size_mm, T::zero())
    }

    pub fn from_fn(
        dims: [usize; 3],
        voxel_size_mm: f64,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                for d in 0..dims[2] {
                    data.push(f(h, w, d));
                }
            }
        }
        Self::new(dims, voxel_size_mm, data).expect("from_fn produced invalid volume")
    }

    /// Same geometry as `self`, new contents. Panics on length mismatch.
    pub fn with_data(&self, data: Vec<T>) -> Self {
        assert_eq!(data.len(), self.data.len(), "data length mismatch");
        Self {
            data,
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> f64 {
        self.voxel_size_mm
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn flat_index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    /// Value at signed coordinates, zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, h: isize, w: isize, d: isize) -> T {
        let [nh, nw, nd] = self.dims;
        if h < 0 || w < 0 || d < 0 || h >= nh as isize || w >= nw as isize || d >= nd as isize {
            T::zero()
        } else {
            self.data[self.flat_index(h as usize, w as usize, d as usize)]
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.same_shape(other), "zip_map on mismatched dims");
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize_(self.len())
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum()
    }

    /// Sum of squared voxelwise differences.
    pub fn sq_dist(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn cast<U: Scalar>(&self) -> Volume3D<U> {
        Volume3D {
            data: self.data.iter().map(|v| U::lit(v.to_f64_())).collect(),
            dims: self.dims,
            voxel_size_mm: self.voxel_size_mm,
        }
    }
}

impl<T> Index<[usize; 3]> for Volume3D<T> {
    type Output = T;
    fn index(&self, [h, w, d]: [usize; 3]) -> &T {
        &self.data[(h * self.dims[1] + w) * self.dims[2] + d]
    }
}

impl<T> IndexMut<[usize; 3]> for Volume3D<T> {
    fn index_mut(&mut self, [h, w, d]: [usize; 3]) -> &mut T {
        &mut self.data[(h * self.dims[1] + w) * self.dims[2] + d]
    }
}

/// Experimental condition of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Left,
    Right,
    Rest,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Left => "left",
            Label::Right => "right",
            Label::Rest => "rest",
        }
    }

    /// Binary decoding target: right = 1, left = 0, rest has none.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Left => Some(0.0),
            Label::Right => Some(1.0),
            Label::Rest => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "left" => Ok(Label::Left),
            "right" => Ok(Label::Right),
            "rest" => Ok(Label::Rest),
            other => Err(Error::Invalid(format!("unknown label {other:?}"))),
        }
    }
}

/// One subject's time series.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject<T> {
    pub id: String,
    pub volumes: Vec<Volume3D<T>>,
    pub labels: Option<Vec<Label>>,
}

impl<T: Scalar> Subject<T> {
    /// Left/right volumes with their binary targets, rest dropped.
    pub fn labelled(&self) -> Vec<(&Volume3D<T>, f64)> {
        match &self.labels {
            None => Vec::new(),
            Some(labels) => self
                .volumes
                .iter()
                .zip(labels)
                .filter_map(|(v, l)| l.target().map(|y| (v, y)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort<T> {
    subjects: Vec<Subject<T>>,
}

impl<T: Scalar> Cohort<T> {
    pub fn new(subjects: Vec<Subject<T>>) -> Result<Self> {
        let mut geometry: Option<([usize; 3], f64)> = None;
        for s in &subjects {
            if let Some(labels) = &s.labels {
                if labels.len() != s.volumes.len() {
                    return Err(Error::DimMismatch(format!(
                        "subject {}: {} labels for {} volumes",
                        s.id,
                        labels.len(),
                        s.volumes.len()
                    )));
                }
            }
            for v in &s.volumes {
                match geometry {
                    None => geometry = Some((v.dims(), v.voxel_size_mm())),
                    Some((dims, vox)) => {
                        if v.dims() != dims || v.voxel_size_mm() != vox {
                            return Err(Error::DimMismatch(format!(
                                "subject {}: volume {:?}@{} differs from cohort {:?}@{}",
                                s.id,
                                v.dims(),
                                v.voxel_size_mm(),
                                dims,
                                vox
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { subjects })
    }

    pub fn subjects(&self) -> &[Subject<T>] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dims(&self) -> Option<[usize; 3]> {
        self.first_volume().map(|v| v.dims())
    }

    pub fn voxel_size_mm(&self) -> Option<f64> {
        self.first_volume().map(|v| v.voxel_size_mm())
    }

    fn first_volume(&self) -> Option<&Volume3D<T>> {
        self.subjects.iter().flat_map(|s| s.volumes.first()).next()
    }

    /// Sub-cohort made of the subjects at `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            subjects: self.subjects[range].to_vec(),
        }
    }

    pub fn map_subjects(&self, f: impl Fn(&Subject<T>) -> Result<Subject<T>>) -> Result<Self> {
        Self::new(self.subjects.iter().map(f).collect::<Result<_>>()?)
    }
}

/// Extrema used to map one subject series onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: f64,
    pub max: f64,
}

/// Maps a whole series onto `[0, 1]` with one affine map shared by all of its
/// volumes.
pub fn normalize_subject<T: Scalar>(
    series: &[Volume3D<T>],
) -> Result<(Vec<Volume3D<T>>, NormalizationStats)> {
    if series.is_empty() {
        return Err(Error::Degenerate("empty series".into()));
    }
    let lo = series.iter().map(|v| v.min()).fold(T::infinity(), T::min);
    let hi = series.iter().map(|v| v.max()).fold(T::neg_infinity(), T::max);
    if hi <= lo {
        return Err(Error::Degenerate(format!("constant series (value {lo})")));
    }
    let span = hi - lo;
    let out = series
        .iter()
        .map(|v| v.map(|x| ((x - lo) / span).max(T::zero()).min(T::one())))
        .collect();
    Ok((
        out,
        NormalizationStats {
            min: lo.to_f64_(),
            max: hi.to_f64_(),
        },
    ))
}

pub fn normalize_cohort<T: Scalar>(cohort: &Cohort<T>) -> Result<Cohort<T>> {
    cohort.map_subjects(|s| {
        let (volumes, _) = normalize_subject(&s.volumes)?;
        Ok(Subject {
            id: s.id.clone(),
            volumes,
            labels: s.labels.clone(),
        })
    })
}

/// Voxelwise mean of every subject's first volume.
pub fn make_reference<T: Scalar>(cohort: &Cohort<T>) -> Result<Volume3D<T>> {
    let firsts: Vec<&Volume3D<T>> = cohort
        .subjects()
        .iter()
        .map(|s| {
            s.volumes
                .first()
                .ok_or_else(|| Error::Degenerate(format!("subject {} has no volumes", s.id)))
        })
        .collect::<Result<_>>()?;
    let Some(first) = firsts.first() else {
        return Err(Error::Degenerate("empty cohort".into()));
    };
    let n = T::from_usize_(firsts.len());
    let mut acc = vec![T::zero(); first.len()];
    for v in &firsts {
        for (a, &x) in acc.iter_mut().zip(v.data()) {
            *a += x;
        }
    }
    Ok(first.with_data(acc.into_iter().map(|a| a / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], vals: Vec<f64>) -> Volume3D<f64> {
        Volume3D::new(dims, 3.0, vals).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            Volume3D::new([1, 1, 2], 3.0, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(matches!(
            Volume3D::<f64>::new([4, 4, 4], 3.0, vec![0.0; 63]),
            Err(Error::SizeMismatch {
                expected: 64,
                found: 63
            })
        ));
        assert!(Volume3D::<f64>::new([1, 1, 1], 0.0, vec![0.0]).is_err());
    }

    #[test]
    fn flat_index_is_d_fastest() {
        let v = Volume3D::<f64>::from_fn([2, 3, 4], 3.0, |h, w, d| (100 * h + 10 * w + d) as f64);
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[4], 10.0);
        assert_eq!(v.data()[12], 100.0);
        assert_eq!(v[[1, 2, 3]], 123.0);
    }

    #[test]
    fn normalize_uses_series_extrema() {
        let a = vol([1, 1, 2], vec![2.0, 4.0]);
        let b = vol([1, 1, 2], vec![6.0, 3.0]);
        let (out, stats) = normalize_subject(&[a, b]).unwrap();
        assert_eq!(stats, NormalizationStats { min: 2.0, max: 6.0 });
        assert_eq!(out[0].data(), &[0.0, 0.5]);
        assert_eq!(out[1].data(), &[1.0, 0.25]);
    }

    #[test]
    fn normalize_unit_range_is_identity() {
        let a = vol([1, 1, 3], vec![0.0, 0.25, 1.0]);
        let (out, _) = normalize_subject(std::slice::from_ref(&a)).unwrap();
        assert_eq!(out[0], a);
    }

    #[test]
    fn normalize_constant_series_is_degenerate() {
        let a = vol([1, 1, 2], vec![5.0, 5.0]);
        assert!(matches!(
            normalize_subject(&[a.clone(), a]),
            Err(Error::Degenerate(_))
        ));
        assert!(normalize_subject::<f64>(&[]).is_err());
    }

    fn subject(id: &str, vols: Vec<Volume3D<f64>>) -> Subject<f64> {
        Subject {
            id: id.into(),
            volumes: vols,
            labels: None,
        }
    }

    #[test]
    fn reference_of_one_subject_is_its_first_volume() {
        let a = vol([1, 1, 3], vec![1.0, 2.0, 3.0]);
        let b = vol([1, 1, 3], vec![9.0, 9.0, 9.0]);
        let c = Cohort::new(vec![subject("a", vec![a.clone(), b])]).unwrap();
        assert_eq!(make_reference(&c).unwrap(), a);
    }

    #[test]
    fn reference_of_zero_and_one_is_half() {
        let c = Cohort::new(vec![
            subject("a", vec![Volume3D::zeros([2, 2, 2], 3.0)]),
            subject("b", vec![Volume3D::filled([2, 2, 2], 3.0, 1.0)]),
        ])
        .unwrap();
        let r = make_reference(&c).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn reference_matches_per_voxel_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = [3, 4, 5];
        let subjects: Vec<_> = (0..15)
            .map(|i| {
                let v = Volume3D::from_fn(dims, 3.0, |_, _, _| rng.random::<f64>());
                subject(&format!("s{i}"), vec![v])
            })
            .collect();
        let c = Cohort::new(subjects.clone()).unwrap();
        let r = make_reference(&c).unwrap();
        for h in 0..3 {
            for w in 0..4 {
                for d in 0..5 {
                    let mut s = 0.0;
                    for sub in &subjects {
                        s += sub.volumes[0][[h, w, d]];
                    }
                    assert!((r[[h, w, d]] - s / 15.0).abs() < 1e-15);
                }
            }
        }
        let mut rev = subjects;
        rev.reverse();
        let r2 = make_reference(&Cohort::new(rev).unwrap()).unwrap();
        for (a, b) in r.data().iter().zip(r2.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_cohort_has_no_reference() {
        let c = Cohort::<f64>::new(vec![]).unwrap();
        assert!(make_reference(&c).is_err());
    }

    #[test]
    fn cohort_rejects_mixed_dims_and_label_count() {
        let a = Volume3D::<f64>::zeros([2, 2, 2], 3.0);
        let b = Volume3D::<f64>::zeros([2, 2, 3], 3.0);
        assert!(Cohort::new(vec![subject("a", vec![a.clone()]), subject("b", vec![b])]).is_err());
        let bad = Subject {
            id: "x".into(),
            volumes: vec![a],
            labels: Some(vec![Label::Left, Label::Right]),
        };
        assert!(Cohort::new(vec![bad]).is_err());
    }
}
