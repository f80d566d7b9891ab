//! Index newtypes for the three index spaces the cache juggles.
//!
//! A raw id comes from the dataset, a [`RowIdx`] addresses the
//! frequency-reordered slow tier (it equals the id's static frequency rank),
//! and a [`Slot`] addresses the fast tier. Keeping them distinct means the
//! slow tier can never be indexed by a raw id by accident.

use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! index_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<u32> for $name {
            #[inline]
            fn from(v: u32) -> Self {
                Self(v)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

index_newtype!(
    /// Raw categorical id as it appears in the dataset.
    RawId
);
index_newtype!(
    /// Slow-tier row index. Equals the id's static frequency rank (0 = hottest).
    RowIdx
);
index_newtype!(
    /// Fast-tier slot.
    Slot
);
