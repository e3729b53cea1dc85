//! Little-endian binary encoding of stacks.
//!
//! ```text
//! stack       := version:u16 owner:u32 slot_count:u16 slot*
//! slot        := robot:u32 timestamp:u64 entry_count:u32 entry*
//! entry       := object_count:u32 (object:u64 class:u16)* phi:f64 density
//! density     := var_count:u32 key* lower(Λ):f64* η:f64* (x y θ):f64*
//! key         := 0:u8 object:u64 | 1:u8 owner:u32 step:u64
//! ```
//!
//! `lower(Λ)` is the row-major lower triangle including the diagonal.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use super::{SlotEntry, Stack, StackSlot};
use crate::classifier::ClassLabel;
use crate::gaussian::{GaussianDensity, VariableKey};
use crate::geometry::Pose2;
use crate::hybrid::ClassRealization;

pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("unsupported stack version {0} (expected {VERSION})")]
    Version(u16),
    #[error("payload truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt payload: {0}")]
    Corrupt(String),
    #[error("{0} trailing bytes after stack")]
    TrailingBytes(usize),
}

pub fn serialize_stack(stack: &Stack) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(VERSION.to_le_bytes());
    out.extend(stack.owner.to_le_bytes());
    out.extend((stack.slots.len() as u16).to_le_bytes());
    for slot in stack.slots.values() {
        out.extend(slot.robot.to_le_bytes());
        out.extend(slot.timestamp.to_le_bytes());
        out.extend((slot.entries.len() as u32).to_le_bytes());
        for e in &slot.entries {
            out.extend((e.realization.len() as u32).to_le_bytes());
            for (o, c) in e.realization.iter() {
                out.extend(o.to_le_bytes());
                out.extend(c.0.to_le_bytes());
            }
            out.extend(e.phi.to_le_bytes());
            write_density(&mut out, &e.xi);
        }
    }
    out
}

fn write_density(out: &mut Vec<u8>, d: &GaussianDensity) {
    out.extend((d.len() as u32).to_le_bytes());
    for k in d.keys() {
        match k {
            VariableKey::Object(id) => {
                out.push(0);
                out.extend(id.to_le_bytes());
            }
            VariableKey::Robot { owner, step } => {
                out.push(1);
                out.extend(owner.to_le_bytes());
                out.extend(step.to_le_bytes());
            }
        }
    }
    let info = d.information();
    for i in 0..d.dim() {
        for j in 0..=i {
            out.extend(info[(i, j)].to_le_bytes());
        }
    }
    for v in d.information_vector().iter() {
        out.extend(v.to_le_bytes());
    }
    for p in d.linearization_points() {
        for v in [p.x, p.y, p.theta] {
            out.extend(v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated(self.buf.len()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.take().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.take().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.take().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        self.take().map(f64::from_le_bytes)
    }

    /// Guards allocations against counts larger than the remaining payload.
    fn count(&mut self, n: usize, min_item_bytes: usize) -> Result<usize, DecodeError> {
        if n.saturating_mul(min_item_bytes) > self.buf.len() - self.pos {
            return Err(DecodeError::Truncated(self.buf.len()));
        }
        Ok(n)
    }
}

pub fn deserialize_stack(bytes: &[u8]) -> Result<Stack, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.u16()?;
    if version != VERSION {
        return Err(DecodeError::Version(version));
    }
    let owner = r.u32()?;
    let n_slots = r.u16()? as usize;
    let mut stack = Stack::new(owner);
    for _ in 0..n_slots {
        let robot = r.u32()?;
        let timestamp = r.u64()?;
        let n_entries = r.u32()? as usize;
        let n_entries = r.count(n_entries, 12)?;
        let mut entries: Vec<SlotEntry> = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let n_obj = r.u32()? as usize;
            let n_obj = r.count(n_obj, 10)?;
            let mut realization = ClassRealization::new();
            for _ in 0..n_obj {
                let id = r.u64()?;
                let class = r.u16()?;
                if class == 0 || realization.get(id).is_some() {
                    return Err(DecodeError::Corrupt(format!("bad class entry for object {id}")));
                }
                realization = realization.with(id, ClassLabel(class));
            }
            let phi = r.f64()?;
            if !(phi.is_finite() && phi > 0.0) {
                return Err(DecodeError::Corrupt(format!("phi {phi} is not a positive number")));
            }
            let xi = read_density(&mut r)?;
            if xi.keys().iter().copied().ne(realization.objects().map(VariableKey::object)) {
                return Err(DecodeError::Corrupt("xi variables do not match the realization".into()));
            }
            if let Some(prev) = entries.last() {
                if prev.realization >= realization || prev.realization.objects().ne(realization.objects()) {
                    return Err(DecodeError::Corrupt("slot entries are unordered or inconsistent".into()));
                }
            }
            entries.push(SlotEntry { realization, xi, phi });
        }
        if stack.slots.insert(robot, StackSlot { robot, timestamp, entries }).is_some() {
            return Err(DecodeError::Corrupt(format!("duplicate slot for robot {robot}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(stack)
}

fn read_density(r: &mut Reader<'_>) -> Result<GaussianDensity, DecodeError> {
    let n = r.u32()? as usize;
    let n = r.count(n, 9)?;
    let mut keys = Vec::with_capacity(n);
    for _ in 0..n {
        keys.push(match r.u8()? {
            0 => VariableKey::object(r.u64()?),
            1 => {
                let owner = r.u32()?;
                VariableKey::robot(owner, r.u64()?)
            }
            tag => return Err(DecodeError::Corrupt(format!("unknown variable tag {tag}"))),
        });
    }
    let dim = 3 * n;
    r.count(dim * (dim + 1) / 2 + dim + dim, 8)?;
    let mut info = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let v = r.f64()?;
            info[(i, j)] = v;
            info[(j, i)] = v;
        }
    }
    let vec = DVector::from_iterator(dim, (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?);
    let mut lin = Vec::with_capacity(n);
    for _ in 0..n {
        let (x, y, t) = (r.f64()?, r.f64()?, r.f64()?);
        lin.push(Pose2 { x, y, theta: t });
    }
    if info.iter().chain(vec.iter()).any(|v| !v.is_finite()) || lin.iter().any(|p| !p.is_finite()) {
        return Err(DecodeError::Corrupt("non-finite density entries".into()));
    }
    GaussianDensity::new(keys, lin, info, vec).map_err(|e| DecodeError::Corrupt(e.to_string()))
}
