use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Policy;
use crate::envs::{Action, EntityKind, EnvState, Game, Pos};
use crate::error::{idx_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    /// Probability of a uniformly random action.
    pub epsilon: f64,
    /// Stag Hunt: a stag is worth chasing when another agent is this close.
    pub stag_radius: i32,
    /// Stag Hunt: leave apples to a teammate that is strictly closer.
    pub yield_apples: bool,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        ScriptedConfig {
            epsilon: 0.05,
            stag_radius: 2,
            yield_apples: true,
        }
    }
}

/// Heuristic expert for all three games. Ties between equally distant
/// targets go to the one first in reading order, so the choice depends only
/// on what the agents can see.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub config: ScriptedConfig,
    rng: ChaCha8Rng,
    /// Coin Game: a good color learned from watching the teammate.
    inferred_good: Option<usize>,
}

/// One greedy step from `from` toward `to`: along the axis with the larger
/// gap, horizontal first on ties.
pub fn step_toward(from: Pos, to: Pos) -> Action {
    let (dx, dy) = (to.x - from.x, to.y - from.y);
    if dx == 0 && dy == 0 {
        Action::Stay
    } else if dx.abs() >= dy.abs() {
        if dx > 0 {
            Action::Right
        } else {
            Action::Left
        }
    } else if dy > 0 {
        Action::Down
    } else {
        Action::Up
    }
}

/// Closest cell of an entity block to `p`.
fn nearest_cell(cells: &[Pos], p: Pos) -> Pos {
    *cells.iter().min_by_key(|c| (c.manhattan(p), c.y, c.x)).expect("entity has cells")
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

impl ScriptedPolicy {
    pub fn new(config: ScriptedConfig, seed: u64) -> Self {
        ScriptedPolicy {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            inferred_good: None,
        }
    }

    /// Action before exploration noise.
    pub fn greedy(&mut self, state: &EnvState, agent: usize) -> Result<Action> {
        let me = *state
            .agents()
            .get(agent)
            .ok_or_else(|| idx_err!("no agent {}", agent))?;
        let target = match state.config().game {
            Game::CoopNav => self.coop_target(state, agent),
            Game::Coin => self.coin_target(state, agent),
            Game::StagHunt => self.stag_hunt_target(state, agent),
        };
        Ok(target.map_or(Action::Stay, |t| step_toward(me, t)))
    }

    fn coop_target(&self, state: &EnvState, agent: usize) -> Option<Pos> {
        let mut tiles: Vec<Pos> = state
            .entities()
            .iter()
            .filter(|e| e.kind == EntityKind::Tile)
            .map(|e| e.pos)
            .collect();
        tiles.sort_by_key(|p| (p.y, p.x));
        let agents = state.agents();
        if tiles.is_empty() {
            return None;
        }
        // Brute force over assignments of tiles to agents; first minimum wins.
        let n = agents.len().max(tiles.len());
        let mut best: Option<(i32, Vec<usize>)> = None;
        for perm in permutations(n) {
            // perm[a] = tile index for agent a (indices >= tiles.len() mean none)
            let cost: i32 = (0..agents.len())
                .filter(|&a| perm[a] < tiles.len())
                .map(|a| agents[a].manhattan(tiles[perm[a]]))
                .sum();
            if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                best = Some((cost, perm));
            }
        }
        let (_, perm) = best?;
        tiles.get(perm[agent]).copied()
    }

    fn coin_target(&mut self, state: &EnvState, agent: usize) -> Option<Pos> {
        let roles = state.coin_roles()?;
        let own = roles.revealed[agent];
        if state.step_count() == 0 {
            self.inferred_good = None;
        }
        if self.inferred_good.is_none() {
            // The teammate goes for its own good color, so the first color
            // it collects that differs from ours is taken to be good.
            self.inferred_good = state
                .entities()
                .iter()
                .filter(|e| e.collected_by.is_some_and(|a| a != agent))
                .find_map(|e| match e.kind {
                    EntityKind::Coin(c) if c != own => Some(c),
                    _ => None,
                });
        }
        let me = state.agents()[agent];
        state
            .entities()
            .iter()
            .filter(|e| e.available)
            .filter(|e| matches!(e.kind, EntityKind::Coin(c) if c == own || Some(c) == self.inferred_good))
            .min_by_key(|e| (e.pos.manhattan(me), e.pos.y, e.pos.x))
            .map(|e| e.pos)
    }

    fn stag_hunt_target(&self, state: &EnvState, agent: usize) -> Option<Pos> {
        let me = state.agents()[agent];
        let others: Vec<Pos> = state
            .agents()
            .iter()
            .enumerate()
            .filter(|(a, _)| *a != agent)
            .map(|(_, p)| *p)
            .collect();
        let stags: Vec<(Pos, Vec<Pos>)> = state
            .entities()
            .iter()
            .filter(|e| e.available && e.kind == EntityKind::Stag)
            .map(|e| (e.pos, e.cells()))
            .collect();
        let dist = |cells: &[Pos], p: Pos| cells.iter().map(|c| c.manhattan(p)).min().unwrap_or(i32::MAX);
        let hunted = stags
            .iter()
            .filter(|(_, cells)| others.iter().any(|o| dist(cells, *o) <= self.config.stag_radius))
            .min_by_key(|(p, cells)| (dist(cells, me), p.y, p.x));
        if let Some((_, cells)) = hunted {
            return Some(nearest_cell(cells, me));
        }
        let apple = state
            .entities()
            .iter()
            .filter(|e| e.available && e.kind == EntityKind::Apple)
            .filter(|e| {
                !self.config.yield_apples || others.iter().all(|o| o.manhattan(e.pos) >= me.manhattan(e.pos))
            })
            .min_by_key(|e| (e.pos.manhattan(me), e.pos.y, e.pos.x));
        if let Some(a) = apple {
            return Some(a.pos);
        }
        stags
            .iter()
            .min_by_key(|(p, cells)| (dist(cells, me), p.y, p.x))
            .map(|(_, cells)| nearest_cell(cells, me))
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, state: &EnvState, agent: usize) -> Result<Action> {
        // The noise draw happens every step so the RNG stream does not
        // depend on the state.
        let explore = self.rng.gen::<f64>() < self.config.epsilon;
        let random = Action::ALL[self.rng.gen_range(0..Action::COUNT)];
        let greedy = self.greedy(state, agent)?;
        Ok(if explore { random } else { greedy })
    }

    fn describe(&self) -> String {
        format!(
            "scripted(epsilon={}, stag_radius={}, yield_apples={})",
            self.config.epsilon, self.config.stag_radius, self.config.yield_apples
        )
    }
}
