//! Answer labels, per-label value maps and label permutations.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One of the four answer labels. The derived order `A < B < C < D` is the
/// tie-break order used by every argmax in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChoiceLabel {
    A,
    B,
    C,
    D,
}

impl ChoiceLabel {
    pub const ALL: [ChoiceLabel; 4] = [ChoiceLabel::A, ChoiceLabel::B, ChoiceLabel::C, ChoiceLabel::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChoiceLabel::A => "A",
            ChoiceLabel::B => "B",
            ChoiceLabel::C => "C",
            ChoiceLabel::D => "D",
        }
    }
}

impl fmt::Display for ChoiceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid choice label {0:?}")]
pub struct InvalidLabel(pub String);

impl FromStr for ChoiceLabel {
    type Err = InvalidLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" => Ok(ChoiceLabel::A),
            "B" => Ok(ChoiceLabel::B),
            "C" => Ok(ChoiceLabel::C),
            "D" => Ok(ChoiceLabel::D),
            other => Err(InvalidLabel(other.to_string())),
        }
    }
}

/// A value for each of the four labels.
///
/// Serializes as a JSON object keyed by label letter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelMap<T>(pub [T; 4]);

impl<T> LabelMap<T> {
    pub fn from_fn(mut f: impl FnMut(ChoiceLabel) -> T) -> Self {
        LabelMap(ChoiceLabel::ALL.map(&mut f))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ChoiceLabel, &T)> {
        ChoiceLabel::ALL.into_iter().zip(self.0.iter())
    }

    pub fn values(&self) -> &[T; 4] {
        &self.0
    }

    pub fn map<U>(&self, mut f: impl FnMut(ChoiceLabel, &T) -> U) -> LabelMap<U> {
        LabelMap::from_fn(|l| f(l, &self.0[l.index()]))
    }
}

impl<T: PartialOrd> LabelMap<T> {
    /// Label holding the largest value; ties go to the earliest label.
    /// Incomparable values (NaN) never win against a comparable one.
    pub fn argmax(&self) -> ChoiceLabel {
        let mut best = ChoiceLabel::A;
        for label in &ChoiceLabel::ALL[1..] {
            if self.0[label.index()] > self.0[best.index()] {
                best = *label;
            }
        }
        best
    }
}

impl<T> Index<ChoiceLabel> for LabelMap<T> {
    type Output = T;

    fn index(&self, label: ChoiceLabel) -> &T {
        &self.0[label.index()]
    }
}

impl<T> IndexMut<ChoiceLabel> for LabelMap<T> {
    fn index_mut(&mut self, label: ChoiceLabel) -> &mut T {
        &mut self.0[label.index()]
    }
}

impl<T: Serialize> Serialize for LabelMap<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(4))?;
        for (label, value) in self.iter() {
            map.serialize_entry(label.as_str(), value)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for LabelMap<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = std::collections::BTreeMap::<ChoiceLabel, T>::deserialize(deserializer)?;
        let mut slots: [Option<T>; 4] = [None, None, None, None];
        for (label, value) in raw {
            slots[label.index()] = Some(value);
        }
        let mut out = Vec::with_capacity(4);
        for (label, slot) in ChoiceLabel::ALL.iter().zip(slots) {
            match slot {
                Some(v) => out.push(v),
                None => {
                    return Err(serde::de::Error::custom(format!("missing label {label}")));
                }
            }
        }
        let arr: [T; 4] = out
            .try_into()
            .map_err(|_| serde::de::Error::custom("expected four labels"))?;
        Ok(LabelMap(arr))
    }
}

/// Assignment of labels to the four rendered choice slots.
///
/// Slot `i` of a rendered prompt carries `slot_to_label()[i]`; choice text
/// stays in canonical order and only the labels move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPermutation {
    index: u8,
    slot_to_label: [ChoiceLabel; 4],
}

pub const PERMUTATION_COUNT: usize = 24;

impl LabelPermutation {
    pub fn identity() -> Self {
        LabelPermutation {
            index: 0,
            slot_to_label: ChoiceLabel::ALL,
        }
    }

    /// Permutation at position `index` of the lexicographic enumeration.
    pub fn from_index(index: usize) -> Option<Self> {
        if index >= PERMUTATION_COUNT {
            return None;
        }
        // Lehmer code decoding.
        let mut pool: Vec<ChoiceLabel> = ChoiceLabel::ALL.to_vec();
        let mut rest = index;
        let mut out = [ChoiceLabel::A; 4];
        let factorials = [6, 2, 1, 1];
        for (slot, f) in factorials.iter().enumerate() {
            let k = rest / f;
            rest %= f;
            out[slot] = pool.remove(k);
        }
        Some(LabelPermutation {
            index: index as u8,
            slot_to_label: out,
        })
    }

    pub fn from_labels(slot_to_label: [ChoiceLabel; 4]) -> Option<Self> {
        let mut seen = [false; 4];
        for l in slot_to_label {
            if std::mem::replace(&mut seen[l.index()], true) {
                return None;
            }
        }
        let mut index = 0usize;
        let factorials = [6, 2, 1, 1];
        for slot in 0..4 {
            let smaller_later = slot_to_label[slot + 1..]
                .iter()
                .filter(|l| **l < slot_to_label[slot])
                .count();
            index += smaller_later * factorials[slot];
        }
        Some(LabelPermutation {
            index: index as u8,
            slot_to_label,
        })
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn slot_to_label(&self) -> [ChoiceLabel; 4] {
        self.slot_to_label
    }

    pub fn label_at(&self, slot: usize) -> ChoiceLabel {
        self.slot_to_label[slot]
    }

    /// Slot that carries `label`.
    pub fn slot_of(&self, label: ChoiceLabel) -> usize {
        self.slot_to_label
            .iter()
            .position(|l| *l == label)
            .expect("permutation is a bijection")
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [ChoiceLabel::A; 4];
        for (slot, label) in self.slot_to_label.iter().enumerate() {
            inv[label.index()] = ChoiceLabel::ALL[slot];
        }
        Self::from_labels(inv).expect("inverse of a bijection")
    }

    /// Applies `self` after `first`: label `l` becomes `self[first[l]]` when
    /// labels are read as slot indices.
    pub fn compose(&self, first: &Self) -> Self {
        let labels = first
            .slot_to_label
            .map(|l| self.slot_to_label[l.index()]);
        Self::from_labels(labels).expect("composition of bijections")
    }
}

impl fmt::Display for LabelPermutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in self.slot_to_label {
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// All 24 label orderings in lexicographic order; the identity comes first.
pub fn enumerate_label_permutations() -> Vec<LabelPermutation> {
    (0..PERMUTATION_COUNT)
        .map(|i| LabelPermutation::from_index(i).expect("index below 24"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ChoiceLabel::*;

    #[test]
    fn twenty_four_lexicographic_permutations() {
        let perms = enumerate_label_permutations();
        assert_eq!(perms.len(), 24);
        assert_eq!(perms[0].slot_to_label(), [A, B, C, D]);
        assert_eq!(perms[23].slot_to_label(), [D, C, B, A]);
        for (i, p) in perms.iter().enumerate() {
            assert_eq!(p.index(), i);
        }
        for w in perms.windows(2) {
            assert!(w[0].slot_to_label() < w[1].slot_to_label());
        }
    }

    #[test]
    fn each_label_fills_each_slot_six_times() {
        let perms = enumerate_label_permutations();
        for slot in 0..4 {
            for label in ChoiceLabel::ALL {
                let n = perms.iter().filter(|p| p.label_at(slot) == label).count();
                assert_eq!(n, 6, "label {label} slot {slot}");
            }
        }
    }

    #[test]
    fn from_labels_matches_enumeration_index() {
        for p in enumerate_label_permutations() {
            assert_eq!(LabelPermutation::from_labels(p.slot_to_label()), Some(p));
        }
        assert_eq!(LabelPermutation::from_labels([A, A, C, D]), None);
    }

    #[test]
    fn inverse_composes_to_identity() {
        for p in enumerate_label_permutations() {
            assert_eq!(p.compose(&p.inverse()), LabelPermutation::identity());
            assert_eq!(p.inverse().compose(&p), LabelPermutation::identity());
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_a() {
        assert_eq!(LabelMap([0.1, 0.2, 0.6, 0.1]).argmax(), C);
        assert_eq!(LabelMap([0.3, 0.3, 0.1, 0.1]).argmax(), A);
        assert_eq!(LabelMap([0.2, 0.2, 0.2, 0.2]).argmax(), A);
        assert_eq!(LabelMap([0.1, 0.5, 0.2, 0.5]).argmax(), B);
    }

    #[test]
    fn label_map_json_round_trip() {
        let m = LabelMap([0.4, 0.1, 0.1, 0.4]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"A":0.4,"B":0.1,"C":0.1,"D":0.4}"#);
        let back: LabelMap<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<LabelMap<f64>>(r#"{"A":1.0}"#).is_err());
    }

    #[test]
    fn parse_labels() {
        assert_eq!("C".parse::<ChoiceLabel>(), Ok(C));
        assert!("E".parse::<ChoiceLabel>().is_err());
    }
}
