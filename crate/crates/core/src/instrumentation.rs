//! Process-wide construction counters for the discriminator families.
//!
//! Counters only grow. Callers take a [`snapshot`] before and after the code
//! under observation and compare.

use core::sync::atomic::{AtomicUsize, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DiscriminatorFamily {
    Mpd,
    Msd,
    Mmd,
}

impl DiscriminatorFamily {
    pub const ALL: [DiscriminatorFamily; 3] = [Self::Mpd, Self::Msd, Self::Mmd];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mpd => "MPD",
            Self::Msd => "MSD",
            Self::Mmd => "MMD",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

static CONSTRUCTED: [AtomicUsize; 3] = [AtomicUsize::new(0), AtomicUsize::new(0), AtomicUsize::new(0)];

pub(crate) fn record_construction(family: DiscriminatorFamily) {
    CONSTRUCTED[family.index()].fetch_add(1, Ordering::SeqCst);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConstructionCounts {
    pub mpd: usize,
    pub msd: usize,
    pub mmd: usize,
}

impl ConstructionCounts {
    pub fn total(&self) -> usize {
        self.mpd + self.msd + self.mmd
    }

    pub fn get(&self, family: DiscriminatorFamily) -> usize {
        match family {
            DiscriminatorFamily::Mpd => self.mpd,
            DiscriminatorFamily::Msd => self.msd,
            DiscriminatorFamily::Mmd => self.mmd,
        }
    }

    /// Constructions that happened between `earlier` and `self`.
    pub fn since(&self, earlier: &ConstructionCounts) -> ConstructionCounts {
        ConstructionCounts {
            mpd: self.mpd - earlier.mpd,
            msd: self.msd - earlier.msd,
            mmd: self.mmd - earlier.mmd,
        }
    }
}

pub fn snapshot() -> ConstructionCounts {
    let load = |f: DiscriminatorFamily| CONSTRUCTED[f.index()].load(Ordering::SeqCst);
    ConstructionCounts {
        mpd: load(DiscriminatorFamily::Mpd),
        msd: load(DiscriminatorFamily::Msd),
        mmd: load(DiscriminatorFamily::Mmd),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_only_grow() {
        let before = snapshot();
        record_construction(DiscriminatorFamily::Mmd);
        let delta = snapshot().since(&before);
        assert!(delta.mmd >= 1);
        assert_eq!(DiscriminatorFamily::Mmd.name(), "MMD");
    }
}
