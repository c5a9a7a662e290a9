use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::NnError;

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Named tensors packed into one contiguous buffer.
///
/// Models hold [`ParamId`]s and read their weights from a store, so the same
/// architecture runs against `f32` training weights or an `f64` copy used for
/// finite-difference checks. A store with identical layout doubles as the
/// gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry>,
    data: Vec<T>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), data: Vec::new() }
    }

    /// Registers a zero-initialised tensor.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate param {name}");
        let len = shape.iter().product();
        let offset = self.data.len();
        self.data.resize(offset + len, T::zero());
        self.entries.push(Entry { name, shape: shape.to_vec(), offset, len });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: T) -> ParamId {
        let id = self.add(name, shape);
        self.get_mut(id).iter_mut().for_each(|v| *v = value);
        id
    }

    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let id = self.add(name, shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in self.get_mut(id) {
            *v = T::c(dist.sample(rng));
        }
        id
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.len]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        let e = &self.entries[id.0];
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Maps a flat index back to `(tensor, offset within tensor)`.
    pub fn locate(&self, flat: usize) -> (ParamId, usize) {
        let i = self
            .entries
            .partition_point(|e| e.offset + e.len <= flat);
        (ParamId(i), flat - self.entries[i].offset)
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self { entries: self.entries.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn same_layout<U>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// `self += other` elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    /// Iterates `(name, shape, values)` in registration order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.shape.as_slice(), &self.data[e.offset..e.offset + e.len]))
    }

    /// Overwrites the named tensor, checking its shape.
    pub fn load(&mut self, name: &str, shape: &[usize], values: &[T]) -> Result<(), NnError> {
        let id = self
            .find(name)
            .ok_or_else(|| NnError::Format(format!("unexpected tensor `{name}`")))?;
        if self.shape(id) != shape {
            return Err(NnError::Shape(format!(
                "tensor `{name}`: expected {:?}, found {:?}",
                self.shape(id),
                shape
            )));
        }
        self.get_mut(id).copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_locate() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", &[2, 3]);
        let b = s.add_filled("b", &[4], 1.5);
        assert_eq!(s.len(), 10);
        assert_eq!(s.get(b), &[1.5; 4]);
        assert_eq!(s.locate(0), (a, 0));
        assert_eq!(s.locate(5), (a, 5));
        assert_eq!(s.locate(6), (b, 0));
        assert_eq!(s.locate(9), (b, 3));
        let d = s.cast::<f64>();
        assert!(s.same_layout(&d));
        assert_eq!(d.get(b)[2], 1.5);
    }

    #[test]
    fn load_rejects_bad_shape() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", &[2, 2]);
        assert!(s.load("w", &[4], &[0.0; 4]).is_err());
        assert!(s.load("nope", &[2, 2], &[0.0; 4]).is_err());
        s.load("w", &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.flat(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
