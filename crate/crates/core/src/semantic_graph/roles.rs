//! Closed vocabulary of semantic roles attached to graph nodes and edges.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleLabel {
    Event,
    Action,
    Arg0,
    Arg1,
    Arg2,
    Arg3,
    Arg4,
    ArgmLoc,
    ArgmMnr,
    ArgmTmp,
    ArgmDir,
    ArgmAdv,
    Others,
}

/// Number of role labels.
pub const NUM_ROLES: usize = 13;

impl RoleLabel {
    pub const ALL: [RoleLabel; NUM_ROLES] = [
        RoleLabel::Event,
        RoleLabel::Action,
        RoleLabel::Arg0,
        RoleLabel::Arg1,
        RoleLabel::Arg2,
        RoleLabel::Arg3,
        RoleLabel::Arg4,
        RoleLabel::ArgmLoc,
        RoleLabel::ArgmMnr,
        RoleLabel::ArgmTmp,
        RoleLabel::ArgmDir,
        RoleLabel::ArgmAdv,
        RoleLabel::Others,
    ];

    /// Position in [`RoleLabel::ALL`], used as the one-hot index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RoleLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RoleLabel::Event => "Event",
            RoleLabel::Action => "Action",
            RoleLabel::Arg0 => "ARG0",
            RoleLabel::Arg1 => "ARG1",
            RoleLabel::Arg2 => "ARG2",
            RoleLabel::Arg3 => "ARG3",
            RoleLabel::Arg4 => "ARG4",
            RoleLabel::ArgmLoc => "ARGM-LOC",
            RoleLabel::ArgmMnr => "ARGM-MNR",
            RoleLabel::ArgmTmp => "ARGM-TMP",
            RoleLabel::ArgmDir => "ARGM-DIR",
            RoleLabel::ArgmAdv => "ARGM-ADV",
            RoleLabel::Others => "OTHERS",
        }
    }

    /// Exact match against the canonical spelling.
    pub fn parse_exact(s: &str) -> Option<RoleLabel> {
        Self::ALL.iter().copied().find(|r| r.as_str() == s)
    }

    /// Maps any string outside the vocabulary to `OTHERS`, logging a warning.
    /// The flag is false when the fallback was taken.
    pub fn parse_lossy(s: &str) -> (RoleLabel, bool) {
        match Self::parse_exact(s) {
            Some(r) => (r, true),
            None => {
                log::warn!("unknown role `{s}` mapped to OTHERS");
                (RoleLabel::Others, false)
            }
        }
    }

    /// Roles an entity (argument) node may carry.
    pub fn is_argument(self) -> bool {
        !matches!(self, RoleLabel::Event | RoleLabel::Action)
    }
}

impl fmt::Display for RoleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_round_trips() {
        for (i, r) in RoleLabel::ALL.iter().enumerate() {
            assert_eq!(r.index(), i);
            assert_eq!(RoleLabel::parse_exact(r.as_str()), Some(*r));
        }
    }

    #[test]
    fn unknown_maps_to_others() {
        assert_eq!(
            RoleLabel::parse_lossy("ARGM-PRP"),
            (RoleLabel::Others, false)
        );
        assert_eq!(RoleLabel::parse_lossy("ARG1"), (RoleLabel::Arg1, true));
    }
}
