"""Kinematic 2D surrogate of a ball-balancing push task on a tilted table.

Coordinates: ``x`` runs across the table (centre 0), ``y`` runs up the
slope with ``y = 0`` at the bottom edge. A finger (disc of diameter
``finger_width``) carries the ball on its uphill side. While supported, the
ball's lateral offset ``d`` relative to the finger tip follows

    d'' = q g_t sin(phi) - k d - c d' - rho a_fx

(``g_t`` the downhill gravity component, ``phi`` the finger rotation, ``q``
how strongly rotation tilts the contact, ``k`` the restoring stiffness of
the rounded finger tip, ``c`` contact damping, ``rho`` the part of the finger's
lateral acceleration not transmitted by friction). Once ``|d|`` or ``|d'|``
crosses its threshold the ball is dropped for good and slides down the
table. Holes capture the ball permanently.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np
import yaml

OBS_DIM = 10
ACTION_DIM = 3


@dataclass(frozen=True)
class Rect:
    x0: float
    x1: float
    y0: float
    y1: float

    def contains(self, x, y) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass
class EnvConfig:
    table_width: float = 0.50
    table_length: float = 0.57
    tilt: float = 0.2
    ball_radius: float = 0.02
    finger_width: float = 0.02
    target_width: float = 0.08
    target_height: float = 0.05
    target_top_gap: float = 0.08
    control_period: float = 0.25
    substeps: int = 10
    rotation_limit: float = 0.3
    action_penalty: float = 0.001
    gravity: float = 9.81
    mu_ball_finger: float = 0.8
    mu_ball_table: float = 0.0
    grip_gain: float = 1.25
    max_speed: float = 0.12
    max_velocity_change: float = 0.05
    max_rotation_speed: float = 0.5
    contact_stiffness: float = 4.0
    rotation_coupling: float = 0.2
    contact_damping: float = 2.0
    drop_offset: float = 0.02
    drop_speed: float = 0.1
    start_y: float = 0.01
    start_jitter: float = 0.0
    episode_length: int = 50
    freeze_rotation: bool = False
    holes: tuple = ()

    def __post_init__(self):
        self.holes = tuple(h if isinstance(h, Rect) else Rect(*h) for h in self.holes)
        tz = self.target_zone
        hw = 0.5 * self.table_width
        if not (-hw <= tz.x0 and tz.x1 <= hw and 0.0 <= tz.y0 and tz.y1 <= self.table_length):
            raise ValueError("target zone must lie inside the table")
        for h in self.holes:
            if not (-hw <= h.x0 < h.x1 <= hw and 0.0 <= h.y0 < h.y1 <= self.table_length):
                raise ValueError(f"hole {h} is not inside the table")
            if h.contains(0.0, self.start_ball_y) or h.contains(0.0, self.start_y):
                raise ValueError(f"hole {h} overlaps the start position")
        if self.substeps < 1 or self.episode_length < 1:
            raise ValueError("substeps and episode_length must be >= 1")

    @property
    def target_zone(self) -> Rect:
        top = self.table_length - self.target_top_gap
        hw = 0.5 * self.target_width
        return Rect(-hw, hw, top - self.target_height, top)

    @property
    def contact_offset(self) -> float:
        return self.ball_radius + 0.5 * self.finger_width

    @property
    def start_ball_y(self) -> float:
        return self.start_y + self.contact_offset

    @property
    def slope_gravity(self) -> float:
        return self.gravity * np.sin(self.tilt)

    @property
    def slip(self) -> float:
        """Fraction of the finger's lateral acceleration the ball does not follow."""
        return 1.0 / (1.0 + self.grip_gain * self.mu_ball_finger)

    def finger_bounds(self):
        r = 0.5 * self.finger_width
        hw = 0.5 * self.table_width
        lo = np.array([-hw + r, r])
        hi = np.array([hw - r, self.table_length - self.contact_offset - self.ball_radius])
        return lo, hi

    def ball_bounds(self):
        r = self.ball_radius
        hw = 0.5 * self.table_width
        return np.array([-hw + r, r]), np.array([hw - r, self.table_length - r])

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["holes"] = [list(dataclasses.astuple(h)) for h in self.holes]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown environment fields: {sorted(unknown)}")
        d = dict(d)
        d["holes"] = tuple(tuple(h) for h in d.get("holes", ()))
        return cls(**d)


def _maze_holes(width, length):
    """Two lower holes leaving a corridor left of centre, then an upper band open on the right."""
    hw = 0.5 * width
    return (
        Rect(-hw, -0.37 * width, 0.30 * length, 0.40 * length),
        Rect(-0.10 * width, hw, 0.30 * length, 0.40 * length),
        Rect(-hw, 0.20 * width, 0.50 * length, 0.58 * length),
    )


def _maze_small_holes(width, length):
    """Desk-scale maze: a lower corridor left of centre and an exit on the right just below the halfway line.

    The gap between the bands and the exit are wider than in the full maze so the upper half is reachable
    within a few dozen episodes.
    """
    hw = 0.5 * width
    return (
        Rect(-hw, -0.37 * width, 0.20 * length, 0.28 * length),
        Rect(-0.10 * width, hw, 0.20 * length, 0.28 * length),
        Rect(-hw, 0.05 * width, 0.44 * length, 0.50 * length),
    )


def _small(**kw):
    # shrunk table; the goal sits clear of the far wall so that pushing the ball into the wall does not score
    return dict(table_width=0.30, table_length=0.34, target_width=0.10, target_height=0.05, target_top_gap=0.06, **kw)


PRESETS = {
    "sim": {},
    "sim_small": _small(),
    "maze": dict(mu_ball_finger=1.0, holes=_maze_holes(0.50, 0.57)),
    "maze_small": _small(mu_ball_finger=1.0, holes=_maze_small_holes(0.30, 0.34)),
    # the printed length of the real table is ambiguous; 0.48 m is used
    "real": dict(table_width=0.54, table_length=0.48, episode_length=30, freeze_rotation=True),
}


def make_config(preset: str = "sim", **overrides) -> EnvConfig:
    if preset not in PRESETS:
        raise KeyError(f"unknown environment preset {preset!r}; choose from {sorted(PRESETS)}")
    d = dict(PRESETS[preset])
    d.update(overrides)
    return EnvConfig(**d)


def load_env_spec(path) -> EnvConfig:
    """Read a YAML environment config; an optional ``preset`` key supplies defaults."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    preset = raw.pop("preset", "sim")
    base = make_config(preset).to_dict()
    base.update(raw)
    return EnvConfig.from_dict(base)


def save_env_spec(cfg: EnvConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


@dataclass
class EnvState:
    finger_pos: np.ndarray
    finger_vel: np.ndarray
    rotation: float
    rotation_vel: float
    ball_pos: np.ndarray
    ball_vel: np.ndarray
    supported: bool = True
    trapped: bool = False
    offset: float = 0.0        # lateral ball offset from the finger tip
    offset_vel: float = 0.0
    t: int = 0

    @property
    def ball_on_table(self) -> bool:
        return not self.trapped

    def observation(self) -> np.ndarray:
        return np.concatenate([self.finger_pos, self.finger_vel, [self.rotation, self.rotation_vel],
                               self.ball_pos, self.ball_vel])

    def copy(self) -> "EnvState":
        return dataclasses.replace(self, finger_pos=self.finger_pos.copy(), finger_vel=self.finger_vel.copy(),
                                   ball_pos=self.ball_pos.copy(), ball_vel=self.ball_vel.copy())

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("finger_pos", "finger_vel", "ball_pos", "ball_vel"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


def initial_state(cfg: EnvConfig, rng=None) -> EnvState:
    x = 0.0
    if cfg.start_jitter > 0:
        x = float(np.random.default_rng(rng).uniform(-cfg.start_jitter, cfg.start_jitter))
    fpos = np.array([x, cfg.start_y])
    return EnvState(finger_pos=fpos, finger_vel=np.zeros(2), rotation=0.0, rotation_vel=0.0,
                    ball_pos=fpos + [0.0, cfg.contact_offset], ball_vel=np.zeros(2))


def goal_indicator(cfg: EnvConfig, state: EnvState) -> float:
    if state.trapped:
        return 0.0
    return float(cfg.target_zone.contains(state.ball_pos[0], state.ball_pos[1]))


def reward(cfg: EnvConfig, state: EnvState, action) -> float:
    """Goal indicator of the resulting state minus the quadratic action penalty."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    return goal_indicator(cfg, state) - cfg.action_penalty * float(a @ a)


def _check_action(action):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have {ACTION_DIM} entries, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("action contains non-finite values")
    return np.clip(a, -1.0, 1.0)


def _in_hole(cfg, pos):
    return any(h.contains(pos[0], pos[1]) for h in cfg.holes)


def transition(cfg: EnvConfig, state: EnvState, action) -> tuple[EnvState, float]:
    """Integrate one control period. Returns the new state and the step reward."""
    a = _check_action(action)
    s = state.copy()
    dt = cfg.control_period / cfg.substeps
    lo, hi = cfg.finger_bounds()
    blo, bhi = cfg.ball_bounds()
    g_t = cfg.slope_gravity

    v_target = np.clip(s.finger_vel + cfg.max_velocity_change * a[:2], -cfg.max_speed, cfg.max_speed)
    accel = (v_target - s.finger_vel) / cfg.control_period
    omega = 0.0 if cfg.freeze_rotation else cfg.max_rotation_speed * a[2]

    for _ in range(cfg.substeps):
        v_old = s.finger_vel.copy()
        v = v_old + accel * dt
        p = s.finger_pos + v * dt
        # the low-level controller drops velocity components that leave the table
        for j in range(2):
            if p[j] < lo[j] or p[j] > hi[j]:
                p[j] = min(max(p[j], lo[j]), hi[j])
                v[j] = 0.0
                accel[j] = 0.0
        a_fx = (v[0] - v_old[0]) / dt
        s.finger_pos, s.finger_vel = p, v

        phi = s.rotation + omega * dt
        s.rotation_vel = omega
        if abs(phi) >= cfg.rotation_limit:
            phi = float(np.clip(phi, -cfg.rotation_limit, cfg.rotation_limit))
            s.rotation_vel = 0.0
        s.rotation = phi

        if s.trapped:
            continue
        if s.supported:
            acc_d = (cfg.rotation_coupling * g_t * np.sin(s.rotation) - cfg.contact_stiffness * s.offset
                     - cfg.contact_damping * s.offset_vel - cfg.slip * a_fx)
            s.offset_vel += acc_d * dt
            s.offset += s.offset_vel * dt
            bx = s.finger_pos[0] + s.offset
            if bx < blo[0] or bx > bhi[0]:
                # ball pressed against a side rail
                bx = min(max(bx, blo[0]), bhi[0])
                s.offset = bx - s.finger_pos[0]
                s.offset_vel = 0.0
            s.ball_pos = np.array([bx, s.finger_pos[1] + cfg.contact_offset])
            s.ball_vel = np.array([s.finger_vel[0] + s.offset_vel, s.finger_vel[1]])
            if abs(s.offset) > cfg.drop_offset or abs(s.offset_vel) > cfg.drop_speed:
                s.supported = False
        else:
            bv = s.ball_vel + np.array([0.0, -g_t * dt])
            if cfg.mu_ball_table > 0:
                speed = np.linalg.norm(bv)
                if speed > 0:
                    dec = cfg.mu_ball_table * cfg.gravity * np.cos(cfg.tilt) * dt
                    bv = bv * max(0.0, 1.0 - dec / speed)
            bp = s.ball_pos + bv * dt
            for j in range(2):
                if bp[j] < blo[j] or bp[j] > bhi[j]:
                    bp[j] = min(max(bp[j], blo[j]), bhi[j])
                    bv[j] = 0.0
            s.ball_pos, s.ball_vel = bp, bv
        if _in_hole(cfg, s.ball_pos):
            s.trapped = True
            s.supported = False
            s.ball_vel = np.zeros(2)
    s.t = state.t + 1
    return s, reward(cfg, s, a)


class TiltedPushingEnv:
    """Stateful wrapper: ``reset`` then ``step(action) -> (obs, reward, done)``."""

    observation_dim = OBS_DIM
    action_dim = ACTION_DIM

    def __init__(self, config: EnvConfig | None = None):
        self.config = config if config is not None else EnvConfig()
        self.state: EnvState | None = None

    @classmethod
    def from_preset(cls, preset="sim", **overrides):
        return cls(make_config(preset, **overrides))

    @property
    def episode_length(self) -> int:
        return self.config.episode_length

    @property
    def ball_on_table(self) -> bool:
        return self.state is not None and self.state.ball_on_table

    def state_bounds(self, margin=0.05):
        """Observation box for clipping model rollouts."""
        c = self.config
        hw = 0.5 * c.table_width + margin
        vmax = max(c.max_speed, 2.0) + margin
        lo = np.array([-hw, -margin, -vmax, -vmax, -c.rotation_limit - margin, -c.max_rotation_speed - margin,
                       -hw, -margin, -vmax, -vmax])
        hi = -lo
        hi[1] = hi[7] = c.table_length + margin
        return lo, hi

    def reset(self, rng=None) -> np.ndarray:
        self.state = initial_state(self.config, rng)
        return self.state.observation()

    def reset_to(self, state: EnvState) -> np.ndarray:
        self.state = state.copy()
        return self.state.observation()

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, r = transition(self.config, self.state, action)
        done = self.state.t >= self.config.episode_length
        return self.state.observation(), r, done


def visitation_histogram(episodes, cfg: EnvConfig, bins=(10, 12)) -> np.ndarray:
    """Count ball positions per table cell, shape ``(ny, nx)`` with row 0 at the bottom.

    ``episodes`` is an iterable of ``(observations, on_table)`` pairs (or bare
    observation arrays, taken as always on the table). ``on_table`` may be one
    entry shorter than ``observations`` (one flag per step); the initial
    observation is then skipped so the total equals the on-table step count.
    """
    nx, ny = bins
    hw = 0.5 * cfg.table_width
    grid = np.zeros((ny, nx), dtype=np.int64)
    for ep in episodes:
        obs, mask = ep if isinstance(ep, tuple) else (ep, None)
        obs = np.asarray(obs, dtype=np.float64).reshape(-1, OBS_DIM)
        mask = np.ones(len(obs), dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        if len(mask) == len(obs) - 1:
            obs = obs[1:]
        if len(mask) != len(obs):
            raise ValueError("on_table mask does not match the observations")
        if len(obs) == 0:
            continue
        h, _, _ = np.histogram2d(obs[mask, 7], obs[mask, 6], bins=(ny, nx),
                                 range=((0.0, cfg.table_length), (-hw, hw)))
        grid += h.astype(np.int64)
    return grid


def upper_half_coverage(grid: np.ndarray) -> int:
    """Number of visited cells whose centre lies in the upper half of the table."""
    ny = grid.shape[0]
    return int((grid[ny // 2:] > 0).sum())


def write_histogram_csv(grid: np.ndarray, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"x{j}" for j in range(grid.shape[1])])
        for i, row in enumerate(grid):
            w.writerow([i] + row.tolist())


def read_histogram_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "row":
        raise ValueError(f"{path} is not a histogram CSV")
    return np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)


# ------------------------------------------------------------ point mass

@dataclass
class PointMassConfig:
    """A point in the unit square, moved by at most ``step_size`` per axis and step.

    Reward is 1 inside the goal square ``[goal_low, 1]^2`` minus the action
    penalty, so from the start corner the return is flat (zero) for every
    plan shorter than the distance to the goal.
    """
    step_size: float = 0.05
    start: tuple = (0.05, 0.05)
    goal_low: float = 0.85
    action_penalty: float = 0.001
    episode_length: int = 30

    def __post_init__(self):
        if not 0.0 < self.goal_low < 1.0:
            raise ValueError("goal_low must lie in (0, 1)")
        if max(self.start) >= self.goal_low:
            raise ValueError("start must lie outside the goal")


class PointMassEnv:
    observation_dim = 2
    action_dim = 2

    def __init__(self, config: PointMassConfig | None = None):
        self.config = config if config is not None else PointMassConfig()
        self.pos = None
        self.t = 0

    @property
    def episode_length(self) -> int:
        return self.config.episode_length

    def in_goal(self, pos) -> bool:
        return bool(np.all(np.asarray(pos) >= self.config.goal_low))

    def state_bounds(self, margin=0.05):
        return np.full(2, -margin), np.full(2, 1.0 + margin)

    def reset(self, rng=None) -> np.ndarray:
        self.pos = np.array(self.config.start, dtype=np.float64)
        self.t = 0
        return self.pos.copy()

    def step(self, action):
        if self.pos is None:
            raise RuntimeError("call reset() before step()")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ValueError("action must be 2 finite numbers")
        a = np.clip(a, -1.0, 1.0)
        self.pos = np.clip(self.pos + self.config.step_size * a, 0.0, 1.0)
        self.t += 1
        r = float(self.in_goal(self.pos)) - self.config.action_penalty * float(a @ a)
        return self.pos.copy(), r, self.t >= self.config.episode_length
