use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, Entity, EntityKind, Event, EventKind, Game, GameConfig, Pos};
use crate::error::{cfg_err, idx_err, state_err, Result};

/// Color roles of one Coin Game episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinRoles {
    pub bad: usize,
    /// `revealed[a]` is the good color agent `a` is told about.
    pub revealed: Vec<usize>,
}

impl CoinRoles {
    pub fn is_good(&self, color: usize) -> bool {
        color != self.bad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    pub done: bool,
    pub events: Vec<Event>,
}

/// Full simulator state, including the RNG used for respawns.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    config: GameConfig,
    agents: Vec<Pos>,
    entities: Vec<Entity>,
    step: usize,
    coin_roles: Option<CoinRoles>,
    last_actions: Vec<Option<Action>>,
    last_rewards: Vec<f64>,
    rng: ChaCha8Rng,
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T], what: &str) -> Result<T> {
    if items.is_empty() {
        return Err(cfg_err!("arena too small to place {}", what));
    }
    Ok(items[rng.gen_range(0..items.len())])
}

impl EnvState {
    /// Random layout: stags first on non-overlapping blocks, then single-cell
    /// entities on free cells, then agents on the remaining cells.
    pub fn reset(config: &GameConfig, seed: u64) -> Result<EnvState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (config.width, config.height);
        let mut occupied = vec![false; (w * h) as usize];
        let idx = |p: Pos| (p.y * w + p.x) as usize;

        let mut stags = Vec::with_capacity(config.n_stags);
        for _ in 0..config.n_stags {
            let mut candidates = Vec::new();
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let cells = [Pos::new(x, y), Pos::new(x + 1, y), Pos::new(x, y + 1), Pos::new(x + 1, y + 1)];
                    if cells.iter().all(|c| !occupied[idx(*c)]) {
                        candidates.push(Pos::new(x, y));
                    }
                }
            }
            let p = pick(&mut rng, &candidates, "stags")?;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                occupied[idx(p.offset((dx, dy)))] = true;
            }
            stags.push(p);
        }
        let place_single = |rng: &mut ChaCha8Rng, occupied: &mut Vec<bool>, what: &str| -> Result<Pos> {
            let free: Vec<Pos> = (0..h)
                .flat_map(|y| (0..w).map(move |x| Pos::new(x, y)))
                .filter(|p| !occupied[idx(*p)])
                .collect();
            let p = pick(rng, &free, what)?;
            occupied[idx(p)] = true;
            Ok(p)
        };
        let mut layout: Vec<(EntityKind, Pos)> = Vec::with_capacity(config.n_entities());
        for _ in 0..config.n_tiles {
            layout.push((EntityKind::Tile, place_single(&mut rng, &mut occupied, "tiles")?));
        }
        for c in 0..config.n_colors {
            for _ in 0..config.coins_per_color {
                layout.push((EntityKind::Coin(c), place_single(&mut rng, &mut occupied, "coins")?));
            }
        }
        for _ in 0..config.n_apples {
            layout.push((EntityKind::Apple, place_single(&mut rng, &mut occupied, "apples")?));
        }
        layout.extend(stags.into_iter().map(|p| (EntityKind::Stag, p)));
        let mut agents = Vec::with_capacity(config.n_agents);
        for _ in 0..config.n_agents {
            agents.push(place_single(&mut rng, &mut occupied, "agents")?);
        }
        let roles = if config.game == Game::Coin {
            let mut colors: Vec<usize> = (0..config.n_colors).collect();
            colors.shuffle(&mut rng);
            Some(CoinRoles {
                bad: colors[0],
                revealed: (0..config.n_agents).map(|a| colors[1 + a % 2]).collect(),
            })
        } else {
            None
        };
        Self::build(config, agents, layout, roles, rng)
    }

    /// State from an explicit layout, for tests and external drivers.
    /// Entities are given in canonical order (tiles, coins by color,
    /// apples, stags) and start available.
    pub fn from_layout(
        config: &GameConfig,
        agents: Vec<Pos>,
        entities: Vec<(EntityKind, Pos)>,
        coin_roles: Option<CoinRoles>,
        seed: u64,
    ) -> Result<EnvState> {
        config.validate()?;
        let mut sorted = entities.clone();
        sorted.sort_by_key(|(k, _)| *k);
        if sorted != entities {
            return Err(cfg_err!("entities must be listed in canonical type order"));
        }
        if config.game == Game::Coin && coin_roles.is_none() {
            return Err(cfg_err!("coin game layouts need color roles"));
        }
        Self::build(config, agents, entities, coin_roles, ChaCha8Rng::seed_from_u64(seed))
    }

    fn build(
        config: &GameConfig,
        agents: Vec<Pos>,
        layout: Vec<(EntityKind, Pos)>,
        coin_roles: Option<CoinRoles>,
        rng: ChaCha8Rng,
    ) -> Result<EnvState> {
        if agents.len() != config.n_agents {
            return Err(cfg_err!("{} agent positions for {} agents", agents.len(), config.n_agents));
        }
        let inside = |p: Pos, s: i32| p.x >= 0 && p.y >= 0 && p.x + s <= config.width && p.y + s <= config.height;
        if let Some(p) = agents.iter().find(|p| !inside(**p, 1)) {
            return Err(idx_err!("agent position {:?} outside the arena", p));
        }
        if let Some((k, p)) = layout.iter().find(|(k, p)| !inside(*p, k.size())) {
            return Err(idx_err!("{:?} at {:?} does not fit inside the arena", k, p));
        }
        let entities = layout
            .into_iter()
            .enumerate()
            .map(|(id, (kind, pos))| Entity {
                id,
                kind,
                pos,
                available: true,
                collected_by: None,
            })
            .collect();
        Ok(EnvState {
            config: config.clone(),
            last_actions: vec![None; agents.len()],
            last_rewards: vec![0.0; agents.len()],
            agents,
            entities,
            step: 0,
            coin_roles,
            rng,
        })
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn agents(&self) -> &[Pos] {
        &self.agents
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    /// Marks an entity unavailable, as if it had been collected earlier.
    pub fn set_available(&mut self, entity: usize, available: bool) -> Result<()> {
        let e = self
            .entities
            .get_mut(entity)
            .ok_or_else(|| idx_err!("no entity {}", entity))?;
        e.available = available;
        Ok(())
    }

    /// Transitions taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.episode_length
    }

    pub fn coin_roles(&self) -> Option<&CoinRoles> {
        self.coin_roles.as_ref()
    }

    pub fn last_actions(&self) -> &[Option<Action>] {
        &self.last_actions
    }

    pub fn last_rewards(&self) -> &[f64] {
        &self.last_rewards
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.config.width && p.y < self.config.height
    }

    /// Where `action` would take an agent standing at `p`.
    pub fn target(&self, p: Pos, action: Action) -> Pos {
        let q = p.offset(action.delta());
        Pos::new(q.x.clamp(0, self.config.width - 1), q.y.clamp(0, self.config.height - 1))
    }

    /// Advances one step: simultaneous moves, collection and captures,
    /// terminal accounting, then respawns.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.is_done() {
            return Err(state_err!("episode already finished after {} steps", self.step));
        }
        let n = self.config.n_agents;
        if actions.len() != n {
            return Err(idx_err!("{} actions for {} agents", actions.len(), n));
        }
        let t = self.step;
        let r = self.config.rewards.clone();
        let unavailable_before: Vec<bool> = self.entities.iter().map(|e| !e.available).collect();
        for (a, act) in actions.iter().enumerate() {
            self.agents[a] = self.target(self.agents[a], *act);
        }
        let mut rewards = vec![0.0; n];
        let mut events = Vec::new();

        if self.config.game == Game::CoopNav {
            let tiles: Vec<Pos> = self
                .entities
                .iter()
                .filter(|e| e.kind == EntityKind::Tile)
                .map(|e| e.pos)
                .collect();
            if !tiles.is_empty() && distinct_cover(&tiles, &self.agents, &mut vec![false; n]) {
                rewards.iter_mut().for_each(|x| *x += r.cover);
                events.push(Event {
                    kind: EventKind::TilesCovered,
                    step: t,
                    entity: None,
                    agents: (0..n).collect(),
                    good: None,
                });
            }
        }

        for e in self.entities.iter_mut() {
            if !e.available || e.kind == EntityKind::Tile {
                continue;
            }
            let on: Vec<usize> = (0..n).filter(|&a| e.covers(self.agents[a])).collect();
            if on.is_empty() {
                continue;
            }
            match e.kind {
                EntityKind::Coin(color) => {
                    let winner = on[0];
                    e.available = false;
                    e.collected_by = Some(winner);
                    let good = self.coin_roles.as_ref().map_or(true, |roles| roles.is_good(color));
                    events.push(Event {
                        kind: EventKind::CoinCollected,
                        step: t,
                        entity: Some(e.id),
                        agents: vec![winner],
                        good: Some(good),
                    });
                }
                EntityKind::Apple => {
                    let winner = on[0];
                    e.available = false;
                    rewards[winner] += r.apple;
                    events.push(Event {
                        kind: EventKind::AppleCollected,
                        step: t,
                        entity: Some(e.id),
                        agents: vec![winner],
                        good: None,
                    });
                }
                EntityKind::Stag if on.len() >= 2 => {
                    e.available = false;
                    for &a in &on {
                        rewards[a] += r.stag;
                    }
                    events.push(Event {
                        kind: EventKind::StagCaptured,
                        step: t,
                        entity: Some(e.id),
                        agents: on,
                        good: None,
                    });
                }
                _ => {}
            }
        }

        if self.config.game == Game::Coin && t + 1 == self.config.episode_length {
            let total = coin_total(&self.entities, self.coin_roles.as_ref(), &r);
            rewards.iter_mut().for_each(|x| *x += total);
        }

        if self.config.p_respawn > 0.0 {
            for (e, was_unavailable) in self.entities.iter_mut().zip(unavailable_before) {
                if !was_unavailable || !matches!(e.kind, EntityKind::Apple | EntityKind::Stag) {
                    continue;
                }
                if self.rng.gen::<f64>() < self.config.p_respawn {
                    e.available = true;
                    events.push(Event {
                        kind: if e.kind == EntityKind::Apple {
                            EventKind::AppleRespawn
                        } else {
                            EventKind::StagRespawn
                        },
                        step: t,
                        entity: Some(e.id),
                        agents: Vec::new(),
                        good: None,
                    });
                }
            }
        }

        self.step += 1;
        self.last_actions = actions.iter().map(|a| Some(*a)).collect();
        self.last_rewards = rewards.clone();
        Ok(StepResult {
            rewards,
            done: self.is_done(),
            events,
        })
    }
}

/// True if every tile can be matched to its own agent standing on it.
fn distinct_cover(tiles: &[Pos], agents: &[Pos], used: &mut Vec<bool>) -> bool {
    let Some((first, rest)) = tiles.split_first() else {
        return true;
    };
    for a in 0..agents.len() {
        if !used[a] && agents[a] == *first {
            used[a] = true;
            if distinct_cover(rest, agents, used) {
                used[a] = false;
                return true;
            }
            used[a] = false;
        }
    }
    false
}

fn coin_total(entities: &[Entity], roles: Option<&CoinRoles>, r: &super::RewardTable) -> f64 {
    entities
        .iter()
        .filter(|e| e.collected_by.is_some())
        .map(|e| match (e.kind, roles) {
            (EntityKind::Coin(c), Some(roles)) if !roles.is_good(c) => r.bad_coin,
            _ => r.good_coin,
        })
        .sum()
}

/// Per-step, per-agent rewards rebuilt from an episode's event log alone.
pub fn rewards_from_events(config: &GameConfig, events: &[Event], n_steps: usize) -> Vec<Vec<f64>> {
    let r = &config.rewards;
    let mut out = vec![vec![0.0; config.n_agents]; n_steps];
    let mut coin_total = 0.0;
    for e in events {
        let Some(row) = out.get_mut(e.step) else { continue };
        match e.kind {
            EventKind::TilesCovered => e.agents.iter().for_each(|&a| row[a] += r.cover),
            EventKind::AppleCollected => e.agents.iter().for_each(|&a| row[a] += r.apple),
            EventKind::StagCaptured => e.agents.iter().for_each(|&a| row[a] += r.stag),
            EventKind::CoinCollected => {
                coin_total += if e.good.unwrap_or(true) { r.good_coin } else { r.bad_coin };
            }
            EventKind::AppleRespawn | EventKind::StagRespawn => {}
        }
    }
    if config.game == Game::Coin && n_steps == config.episode_length && n_steps > 0 {
        out[n_steps - 1].iter_mut().for_each(|x| *x += coin_total);
    }
    out
}
