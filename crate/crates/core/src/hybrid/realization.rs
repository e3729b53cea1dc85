use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::classifier::ClassLabel;
use crate::gaussian::ObjectId;

/// Joint class assignment of a set of objects, ordered by object ID.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassRealization(BTreeMap<ObjectId, ClassLabel>);

impl ClassRealization {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, object: ObjectId) -> Option<ClassLabel> {
        self.0.get(&object).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn objects(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ObjectId, ClassLabel)> + '_ {
        self.0.iter().map(|(o, c)| (*o, *c))
    }

    pub fn as_map(&self) -> &BTreeMap<ObjectId, ClassLabel> {
        &self.0
    }

    pub fn with(&self, object: ObjectId, class: ClassLabel) -> Self {
        let mut out = self.clone();
        out.0.insert(object, class);
        out
    }

    /// Assignment restricted to `objects`; `None` if one of them is missing.
    pub fn restrict(&self, objects: &BTreeSet<ObjectId>) -> Option<Self> {
        objects
            .iter()
            .map(|o| self.get(*o).map(|c| (*o, c)))
            .collect::<Option<BTreeMap<_, _>>>()
            .map(ClassRealization)
    }

    /// Stable 64-bit FNV-1a hash over (object, class) pairs.
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (o, c) in self.iter() {
            for b in o.to_le_bytes().into_iter().chain(c.0.to_le_bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

impl FromIterator<(ObjectId, ClassLabel)> for ClassRealization {
    fn from_iter<I: IntoIterator<Item = (ObjectId, ClassLabel)>>(iter: I) -> Self {
        ClassRealization(iter.into_iter().collect())
    }
}

impl fmt::Display for ClassRealization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, (o, c)) in self.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{o}:{c}")?;
        }
        write!(f, "}}")
    }
}
