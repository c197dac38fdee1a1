//! Cooperative Navigation, Coin Game and Stag Hunt gridworlds.
//!
//! All three games share one simulator: agents move simultaneously on a
//! `width x height` grid, entities sit on cells and switch between
//! available and unavailable. Every step reports the events that produced
//! its rewards so they can be recomputed and analysed later.

mod render;
mod state;

pub use render::{GraphOptions, Observation, VertexRole, ACTION_SLOTS, TYPE_SLOTS, VERTEX_DIM};
pub use state::{rewards_from_events, CoinRoles, EnvState, StepResult};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, idx_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    Stay = 4,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| idx_err!("action index {} outside 0..5", i))
    }

    /// Grid offset; `Up` decreases `y`.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Stay => (0, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn manhattan(self, other: Pos) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }

    pub fn offset(self, (dx, dy): (i32, i32)) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Game {
    CoopNav,
    Coin,
    StagHunt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "color")]
pub enum EntityKind {
    Tile,
    Coin(usize),
    Apple,
    Stag,
}

impl EntityKind {
    /// Position in the vertex type one-hot (slot 0 is the agent type).
    pub fn type_slot(self) -> usize {
        match self {
            EntityKind::Tile => 1,
            EntityKind::Coin(c) => 2 + c,
            EntityKind::Apple => 5,
            EntityKind::Stag => 6,
        }
    }

    /// Side length of the square block the entity covers.
    pub fn size(self) -> i32 {
        if self == EntityKind::Stag {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    pub kind: EntityKind,
    /// Top-left cell.
    pub pos: Pos,
    pub available: bool,
    /// Agent that collected a coin, for the coin analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collected_by: Option<usize>,
}

impl Entity {
    pub fn covers(&self, p: Pos) -> bool {
        let s = self.kind.size();
        p.x >= self.pos.x && p.x < self.pos.x + s && p.y >= self.pos.y && p.y < self.pos.y + s
    }

    pub fn cells(&self) -> Vec<Pos> {
        let s = self.kind.size();
        let mut out = Vec::with_capacity((s * s) as usize);
        for dy in 0..s {
            for dx in 0..s {
                out.push(Pos::new(self.pos.x + dx, self.pos.y + dy));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    /// CoopNav, to both agents on every step with both tiles covered.
    pub cover: f64,
    pub good_coin: f64,
    pub bad_coin: f64,
    pub apple: f64,
    /// Paid to each agent taking part in a capture.
    pub stag: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        RewardTable {
            cover: 1.0,
            good_coin: 1.0,
            bad_coin: -1.0,
            apple: 5.0,
            stag: 10.0,
        }
    }
}

/// Complete description of one game variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    pub game: Game,
    pub width: i32,
    pub height: i32,
    pub n_agents: usize,
    pub episode_length: usize,
    pub n_tiles: usize,
    pub n_colors: usize,
    pub coins_per_color: usize,
    pub n_apples: usize,
    pub n_stags: usize,
    pub p_respawn: f64,
    pub rewards: RewardTable,
}

impl GameConfig {
    pub fn coop_nav() -> Self {
        GameConfig {
            game: Game::CoopNav,
            width: 6,
            height: 6,
            n_agents: 2,
            episode_length: 20,
            n_tiles: 2,
            n_colors: 0,
            coins_per_color: 0,
            n_apples: 0,
            n_stags: 0,
            p_respawn: 0.0,
            rewards: RewardTable::default(),
        }
    }

    pub fn coin_game() -> Self {
        GameConfig {
            game: Game::Coin,
            width: 8,
            height: 8,
            n_agents: 2,
            episode_length: 10,
            n_tiles: 0,
            n_colors: 3,
            coins_per_color: 4,
            n_apples: 0,
            n_stags: 0,
            p_respawn: 0.0,
            rewards: RewardTable::default(),
        }
    }

    pub fn stag_hunt(n_agents: usize) -> Self {
        GameConfig {
            game: Game::StagHunt,
            width: 10,
            height: 10,
            n_agents,
            episode_length: 32,
            n_tiles: 0,
            n_colors: 0,
            coins_per_color: 0,
            n_apples: 12,
            n_stags: 3,
            p_respawn: 0.05,
            rewards: RewardTable::default(),
        }
    }

    /// Short name used on the command line.
    pub fn name(&self) -> String {
        match self.game {
            Game::CoopNav => "coopnav".into(),
            Game::Coin => "coin".into(),
            Game::StagHunt => format!("staghunt{}", self.n_agents),
        }
    }

    pub fn n_entities(&self) -> usize {
        self.n_tiles + self.n_colors * self.coins_per_color + self.n_apples + self.n_stags
    }

    pub fn n_vertices(&self) -> usize {
        self.n_agents + self.n_entities()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(cfg_err!("arena {}x{} is empty", self.width, self.height));
        }
        if self.episode_length == 0 {
            return Err(cfg_err!("episode length must be positive"));
        }
        let players_ok = match self.game {
            Game::StagHunt => self.n_agents == 2 || self.n_agents == 4,
            _ => self.n_agents == 2,
        };
        if !players_ok {
            return Err(cfg_err!("{:?} does not support {} players", self.game, self.n_agents));
        }
        if self.game == Game::Coin && self.n_colors != 3 {
            return Err(cfg_err!("the coin game needs exactly 3 colors, got {}", self.n_colors));
        }
        if self.n_colors > 3 {
            return Err(cfg_err!("at most 3 coin colors are supported"));
        }
        if !(0.0..=1.0).contains(&self.p_respawn) {
            return Err(cfg_err!("respawn probability {} outside [0, 1]", self.p_respawn));
        }
        Ok(())
    }

    /// Channels of the observation image: self, other agents, one per
    /// entity type present, and the dimmed plane.
    pub fn observation_kinds(&self) -> Vec<EntityKind> {
        let mut kinds = Vec::new();
        if self.n_tiles > 0 {
            kinds.push(EntityKind::Tile);
        }
        for c in 0..self.n_colors {
            if self.coins_per_color > 0 {
                kinds.push(EntityKind::Coin(c));
            }
        }
        if self.n_apples > 0 {
            kinds.push(EntityKind::Apple);
        }
        if self.n_stags > 0 {
            kinds.push(EntityKind::Stag);
        }
        kinds
    }
}

impl FromStr for GameConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coopnav" => Ok(GameConfig::coop_nav()),
            "coin" => Ok(GameConfig::coin_game()),
            "staghunt2" | "staghunt" => Ok(GameConfig::stag_hunt(2)),
            "staghunt4" => Ok(GameConfig::stag_hunt(4)),
            _ => Err(cfg_err!(
                "unknown game '{}' (expected coopnav, coin, staghunt2 or staghunt4)",
                s
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TilesCovered,
    CoinCollected,
    AppleCollected,
    StagCaptured,
    AppleRespawn,
    StagRespawn,
}

/// Something that happened during one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "type")]
    pub kind: EventKind,
    /// Transition index, 0 for the first step.
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<usize>,
    /// For coins: whether the color was a rewarded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub good: Option<bool>,
}

impl fmt::Display for Game {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Game::CoopNav => "coopnav",
            Game::Coin => "coin",
            Game::StagHunt => "staghunt",
        })
    }
}
