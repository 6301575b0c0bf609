use std::fmt;

use serde::{Deserialize, Serialize};

use crate::scene::{Intention, Vec2};

/// One of the four arms of the intersection, counter-clockwise from east.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    East,
    North,
    West,
    South,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::East, Arm::North, Arm::West, Arm::South];

    pub fn index(self) -> usize {
        match self {
            Arm::East => 0,
            Arm::North => 1,
            Arm::West => 2,
            Arm::South => 3,
        }
    }

    pub fn from_index(i: usize) -> Arm {
        Arm::ALL[i % 4]
    }

    /// Unit vector pointing from the arm towards the centre.
    pub fn inbound(self) -> Vec2 {
        match self {
            Arm::East => [-1.0, 0.0],
            Arm::North => [0.0, -1.0],
            Arm::West => [1.0, 0.0],
            Arm::South => [0.0, 1.0],
        }
    }

    /// Unit vector pointing from the centre out along the arm.
    pub fn outbound(self) -> Vec2 {
        let d = self.inbound();
        [-d[0], -d[1]]
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Arm::North | Arm::South)
    }

    pub fn opposite(self) -> Arm {
        Arm::from_index(self.index() + 2)
    }

    /// Arm whose centre-line region contains `p` (dominant-axis rule).
    pub fn of_point(p: Vec2) -> Arm {
        if p[0].abs() >= p[1].abs() {
            if p[0] >= 0.0 {
                Arm::East
            } else {
                Arm::West
            }
        } else if p[1] >= 0.0 {
            Arm::North
        } else {
            Arm::South
        }
    }

    /// Exit arm reached from this entry arm under right-hand traffic.
    pub fn exit_for(self, intention: Intention) -> Arm {
        match intention {
            Intention::Right => Arm::from_index(self.index() + 1),
            Intention::Straight => Arm::from_index(self.index() + 2),
            Intention::Left => Arm::from_index(self.index() + 3),
        }
    }

    /// Intention implied by an (entry, exit) pair; `None` for U-turns.
    pub fn intention_to(self, exit: Arm) -> Option<Intention> {
        match (exit.index() + 4 - self.index()) % 4 {
            1 => Some(Intention::Right),
            2 => Some(Intention::Straight),
            3 => Some(Intention::Left),
            _ => None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Arm::East => "east",
            Arm::North => "north",
            Arm::West => "west",
            Arm::South => "south",
        };
        f.write_str(s)
    }
}
