//! Deterministic synthetic crowds.
//!
//! Agents move in groups that share a base velocity. Each frame an agent's
//! reported position is its base position plus Gaussian jitter, so the
//! underlying motion stays linear. Interior agents bounce off the map
//! borders; edge-in groups walk in from outside and despawn once they leave.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{Annotation, AnnotationStream};
use crate::error::{Error, Result};

/// Largest distance an agent may travel between two consecutive frames.
pub const MAX_STEP: f64 = 2.0;

/// Jitter samples are truncated at this many standard deviations.
const JITTER_TRUNCATION: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpawnPolicy {
    Interior,
    EdgeIn,
}

/// A group with a fixed start and velocity instead of random draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub agents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub width: usize,
    pub height: usize,
    pub n_groups: usize,
    /// Inclusive range of agents drawn per random group.
    pub agents_per_group: (usize, usize),
    /// Inclusive range of group speeds in cells per frame.
    pub speed: (f64, f64),
    /// Standard deviation of agent offsets around the group center.
    pub group_spread: f64,
    /// Per-frame positional jitter standard deviation.
    pub jitter_std: f64,
    pub spawn: SpawnPolicy,
    pub n_frames: usize,
    pub seed: u64,
    /// Explicit groups; when non-empty they replace the random draws.
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
}

impl Scenario {
    /// Named scenarios: `two-groups`, `static`, `edge-in`, `crowd`.
    pub fn preset(name: &str) -> Option<Self> {
        let base = Scenario {
            width: 80,
            height: 80,
            n_groups: 2,
            agents_per_group: (6, 10),
            speed: (0.5, 1.0),
            group_spread: 2.5,
            jitter_std: 0.1,
            spawn: SpawnPolicy::Interior,
            n_frames: 200,
            seed: 0,
            groups: Vec::new(),
        };
        match name {
            "two-groups" => Some(base),
            "static" => Some(Scenario {
                speed: (0.0, 0.0),
                jitter_std: 0.0,
                ..base
            }),
            "edge-in" => Some(Scenario {
                n_groups: 4,
                spawn: SpawnPolicy::EdgeIn,
                ..base
            }),
            "crowd" => Some(Scenario {
                n_groups: 5,
                agents_per_group: (4, 12),
                ..base
            }),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["two-groups", "static", "edge-in", "crowd"]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("scenario: {e}")))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Upper bound on simultaneously active agents.
    pub fn max_agents(&self) -> usize {
        if self.groups.is_empty() {
            self.n_groups * self.agents_per_group.1
        } else {
            self.groups.iter().map(|g| g.agents).sum()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_frames == 0 {
            return bad("scenario needs at least one frame".into());
        }
        if self.n_groups == 0 {
            return bad("scenario needs at least one group".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("map extents must be positive, got {}x{}", self.width, self.height));
        }
        if !self.groups.is_empty() && self.groups.len() != self.n_groups {
            return bad(format!(
                "{} explicit groups but n_groups = {}",
                self.groups.len(),
                self.n_groups
            ));
        }
        let (lo, hi) = self.agents_per_group;
        if self.groups.is_empty() && (lo == 0 || lo > hi) {
            return bad(format!("invalid agents_per_group range ({lo}, {hi})"));
        }
        if self.groups.iter().any(|g| g.agents == 0) {
            return bad("explicit groups need at least one agent".into());
        }
        let (smin, smax) = self.speed;
        if !(smin >= 0.0 && smin <= smax && smax.is_finite()) {
            return bad(format!("invalid speed range ({smin}, {smax})"));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return bad(format!("invalid jitter_std {}", self.jitter_std));
        }
        if !(self.group_spread >= 0.0 && self.group_spread.is_finite()) {
            return bad(format!("invalid group_spread {}", self.group_spread));
        }
        let fastest = self
            .groups
            .iter()
            .map(|g| g.velocity.0.hypot(g.velocity.1))
            .fold(smax, f64::max);
        let jitter_reach = 2.0 * JITTER_TRUNCATION * self.jitter_std * std::f64::consts::SQRT_2;
        if fastest + jitter_reach > MAX_STEP {
            return bad(format!(
                "speed {fastest} plus jitter reach {jitter_reach:.3} exceeds {MAX_STEP} cells/frame"
            ));
        }
        Ok(())
    }
}

/// One simulated pedestrian.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: u32,
    pub group: usize,
    /// Base (jitter-free) position at the current simulation time.
    pub position: (f64, f64),
    pub velocity: (f64, f64),
    /// First frame with an annotation, if any.
    pub entry_frame: Option<usize>,
    /// First frame after the agent left the map, if it did.
    pub exit_frame: Option<usize>,
}

fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, 0.0);
    }
    for _ in 0..4 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            break;
        }
    }
    (p.clamp(lo, hi), v)
}

fn inside(p: (f64, f64), w: f64, h: f64) -> bool {
    p.0 >= 0.0 && p.0 < w && p.1 >= 0.0 && p.1 < h
}

/// Runs the scenario and returns annotations plus final agent states.
pub fn simulate_detailed(scenario: &Scenario) -> Result<(AnnotationStream, Vec<Agent>)> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let (w, h) = (scenario.width as f64, scenario.height as f64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let groups: Vec<GroupSpec> = if scenario.groups.is_empty() {
        (0..scenario.n_groups)
            .map(|_| random_group(scenario, &mut rng))
            .collect()
    } else {
        scenario.groups.clone()
    };

    let mut agents = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        for _ in 0..g.agents {
            let offset = if g.agents == 1 || scenario.group_spread == 0.0 {
                (0.0, 0.0)
            } else {
                (
                    scenario.group_spread * unit.sample(&mut rng),
                    scenario.group_spread * unit.sample(&mut rng),
                )
            };
            let mut pos = (g.center.0 + offset.0, g.center.1 + offset.1);
            if scenario.spawn == SpawnPolicy::Interior {
                pos = (pos.0.clamp(0.5, w - 0.5), pos.1.clamp(0.5, h - 0.5));
            }
            agents.push(Agent {
                id: agents.len() as u32,
                group: gi,
                position: pos,
                velocity: g.velocity,
                entry_frame: None,
                exit_frame: None,
            });
        }
    }

    let bound = JITTER_TRUNCATION * scenario.jitter_std;
    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if scenario.jitter_std == 0.0 {
            0.0
        } else {
            (scenario.jitter_std * unit.sample(rng)).clamp(-bound, bound)
        }
    };

    let mut records = Vec::new();
    for frame in 0..scenario.n_frames {
        for agent in agents.iter_mut() {
            if frame > 0 {
                let (px, py) = agent.position;
                let (vx, vy) = agent.velocity;
                agent.position = (px + vx, py + vy);
                if scenario.spawn == SpawnPolicy::Interior {
                    let (x, vx) = reflect(agent.position.0, vx, 0.5, w - 0.5);
                    let (y, vy) = reflect(agent.position.1, vy, 0.5, h - 0.5);
                    agent.position = (x, y);
                    agent.velocity = (vx, vy);
                }
            }
            // jitter is drawn for every agent every frame so that the random
            // stream does not depend on who happens to be visible
            let (jx, jy) = (jitter(&mut rng), jitter(&mut rng));
            if agent.exit_frame.is_some() {
                continue;
            }
            let base_inside = inside(agent.position, w, h);
            match (agent.entry_frame, base_inside) {
                (Some(_), false) => {
                    agent.exit_frame = Some(frame);
                    continue;
                }
                (None, false) => continue,
                _ => {}
            }
            let x = (agent.position.0 + jx).clamp(0.0, w - 1e-6);
            let y = (agent.position.1 + jy).clamp(0.0, h - 1e-6);
            agent.entry_frame.get_or_insert(frame);
            records.push(Annotation {
                frame: frame as u32,
                id: agent.id,
                x,
                y,
            });
        }
    }
    Ok((AnnotationStream::new(records)?, agents))
}

fn random_group(s: &Scenario, rng: &mut ChaCha8Rng) -> GroupSpec {
    let (w, h) = (s.width as f64, s.height as f64);
    let agents = rng.gen_range(s.agents_per_group.0..=s.agents_per_group.1);
    let speed = if s.speed.1 > s.speed.0 {
        rng.gen_range(s.speed.0..=s.speed.1)
    } else {
        s.speed.0
    };
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut velocity = (speed * angle.cos(), speed * angle.sin());
    let center = match s.spawn {
        SpawnPolicy::Interior => {
            let margin = (3.0 * s.group_spread).min(w / 4.0).min(h / 4.0);
            (
                rng.gen_range(margin..=w - margin),
                rng.gen_range(margin..=h - margin),
            )
        }
        SpawnPolicy::EdgeIn => {
            // start just beyond a border, heading inwards
            let reach = 3.0 * s.group_spread + 1.0;
            let along = rng.gen_range(0.2..=0.8);
            let side = rng.gen_range(0..4);
            let tilt = rng.gen_range(-std::f64::consts::FRAC_PI_6..=std::f64::consts::FRAC_PI_6);
            let (normal, origin) = match side {
                0 => ((1.0, 0.0), (-reach, along * h)),
                1 => ((-1.0, 0.0), (w + reach, along * h)),
                2 => ((0.0, 1.0), (along * w, -reach)),
                _ => ((0.0, -1.0), (along * w, h + reach)),
            };
            let (c, sn) = (tilt.cos(), tilt.sin());
            velocity = (
                speed * (normal.0 * c - normal.1 * sn),
                speed * (normal.0 * sn + normal.1 * c),
            );
            origin
        }
    };
    GroupSpec {
        center,
        velocity,
        agents,
    }
}

pub fn simulate(scenario: &Scenario) -> Result<AnnotationStream> {
    simulate_detailed(scenario).map(|(stream, _)| stream)
}

/// Ground-truth track of one person.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u32,
    /// `(frame, x, y)` in increasing frame order.
    pub points: Vec<(u32, f64, f64)>,
    /// Inclusive frame ranges with no observation between the first and last point.
    pub gaps: Vec<(u32, u32)>,
}

impl Trajectory {
    pub fn position_at(&self, frame: u32) -> Option<(f64, f64)> {
        self.points
            .binary_search_by_key(&frame, |p| p.0)
            .ok()
            .map(|i| (self.points[i].1, self.points[i].2))
    }
}

/// Groups annotations by identity. Trajectories are ordered by id.
pub fn track_oracle(ann: &AnnotationStream) -> Vec<Trajectory> {
    let mut by_id: BTreeMap<u32, Vec<(u32, f64, f64)>> = BTreeMap::new();
    for r in ann.records() {
        by_id.entry(r.id).or_default().push((r.frame, r.x, r.y));
    }
    by_id
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_by_key(|p| p.0);
            let gaps = points
                .windows(2)
                .filter(|w| w[1].0 > w[0].0 + 1)
                .map(|w| (w[0].0 + 1, w[1].0 - 1))
                .collect();
            Trajectory { id, points, gaps }
        })
        .collect()
}
