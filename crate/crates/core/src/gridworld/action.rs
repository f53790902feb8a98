use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discrete controls. `Null` is the learned "no action" conditioning token
/// and is rejected by the environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveForward = 0,
    MoveBackward = 1,
    StrafeLeft = 2,
    StrafeRight = 3,
    TurnLeft = 4,
    TurnRight = 5,
    Noop = 6,
    Null = 7,
}

/// Size of the action embedding table, including `Null`.
pub const NUM_ACTIONS: usize = 8;
/// Actions the environment accepts.
pub const NUM_ENV_ACTIONS: usize = 7;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::MoveForward,
        Action::MoveBackward,
        Action::StrafeLeft,
        Action::StrafeRight,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Noop,
        Action::Null,
    ];

    pub const ENV: [Action; NUM_ENV_ACTIONS] = [
        Action::MoveForward,
        Action::MoveBackward,
        Action::StrafeLeft,
        Action::StrafeRight,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Noop,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::UnknownAction(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveForward => "move_forward",
            Action::MoveBackward => "move_backward",
            Action::StrafeLeft => "strafe_left",
            Action::StrafeRight => "strafe_right",
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Noop => "noop",
            Action::Null => "null",
        }
    }

    /// The action that undoes this one when it is not blocked.
    pub fn inverse(self) -> Self {
        match self {
            Action::MoveForward => Action::MoveBackward,
            Action::MoveBackward => Action::MoveForward,
            Action::StrafeLeft => Action::StrafeRight,
            Action::StrafeRight => Action::StrafeLeft,
            Action::TurnLeft => Action::TurnRight,
            Action::TurnRight => Action::TurnLeft,
            a => a,
        }
    }

    pub fn is_env_action(self) -> bool {
        self != Action::Null
    }

    pub fn env_names() -> Vec<&'static str> {
        Self::ENV.iter().map(|a| a.name()).collect()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownActionName(s.to_string()))
    }
}
