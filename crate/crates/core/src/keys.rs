//! Fixed-width key-state vectors for an 88-key keyboard.

use serde::{Deserialize, Serialize};

/// Number of keys on the keyboard.
pub const NUM_KEYS: usize = 88;
/// MIDI pitch of key index 0 (A0).
pub const LOWEST_PITCH: u8 = 21;
/// MIDI pitch of key index 87 (C8).
pub const HIGHEST_PITCH: u8 = 108;

const MASK: u128 = (1u128 << NUM_KEYS) - 1;

/// Binary state of all 88 keys, bit `k` holding key index `k`.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<usize>", from = "Vec<usize>")]
pub struct KeyFrame(u128);

impl KeyFrame {
    pub const EMPTY: KeyFrame = KeyFrame(0);

    pub fn from_keys<I: IntoIterator<Item = usize>>(keys: I) -> Self {
        let mut frame = KeyFrame::EMPTY;
        for k in keys {
            frame.set(k);
        }
        frame
    }

    pub fn from_bits(bits: u128) -> Self {
        KeyFrame(bits & MASK)
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    /// Sets key `k`. Indices outside the keyboard are ignored.
    pub fn set(&mut self, k: usize) {
        if k < NUM_KEYS {
            self.0 |= 1u128 << k;
        }
    }

    pub fn clear(&mut self, k: usize) {
        if k < NUM_KEYS {
            self.0 &= !(1u128 << k);
        }
    }

    pub fn is_set(self, k: usize) -> bool {
        k < NUM_KEYS && (self.0 >> k) & 1 == 1
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn intersection(self, other: KeyFrame) -> KeyFrame {
        KeyFrame(self.0 & other.0)
    }

    pub fn union(self, other: KeyFrame) -> KeyFrame {
        KeyFrame(self.0 | other.0)
    }

    /// Keys in `self` that are not in `other`.
    pub fn difference(self, other: KeyFrame) -> KeyFrame {
        KeyFrame(self.0 & !other.0)
    }

    /// Active key indices in ascending order.
    pub fn keys(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..NUM_KEYS).filter(move |k| (bits >> k) & 1 == 1)
    }

    /// Dense 0/1 encoding, one entry per key.
    pub fn to_dense(self) -> [f64; NUM_KEYS] {
        let mut out = [0.0; NUM_KEYS];
        for k in self.keys() {
            out[k] = 1.0;
        }
        out
    }
}

impl std::fmt::Debug for KeyFrame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.keys()).finish()
    }
}

impl From<KeyFrame> for Vec<usize> {
    fn from(frame: KeyFrame) -> Self {
        frame.keys().collect()
    }
}

impl From<Vec<usize>> for KeyFrame {
    fn from(keys: Vec<usize>) -> Self {
        KeyFrame::from_keys(keys)
    }
}

/// Key index for a MIDI pitch, if it lies on the keyboard.
pub fn key_for_pitch(pitch: u8) -> Option<usize> {
    (LOWEST_PITCH..=HIGHEST_PITCH)
        .contains(&pitch)
        .then(|| (pitch - LOWEST_PITCH) as usize)
}

pub fn pitch_for_key(key: usize) -> u8 {
    LOWEST_PITCH + key as u8
}
