"""Synthetic-city grid simulator.

A world is a height field (cells of obstacle altitude, 0 = free
ground) plus named landmarks. The vehicle moves over a discrete
six-action space at integer altitudes; the top-down observation is a
square patch whose visible radius grows with altitude, which is what
makes the vertical actions worth taking.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ContractError, GenerationError
from .util import stable_hash_bytes, substream


class Action(IntEnum):
    GO_UP = 0
    GO_DOWN = 1
    FORWARD = 2
    TURN_LEFT = 3
    TURN_RIGHT = 4
    STOP = 5


# heading index -> unit step, heading 0 = +x, turns left = counterclockwise
DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))

LANDMARK_TOKENS = (
    "arch", "basin", "crane", "depot", "fountain", "gallery", "harbor", "kiln",
    "lookout", "market", "obelisk", "pylon", "quarry", "rotunda", "silo", "tower",
    "viaduct", "windmill", "yard", "ziggurat",
)

TARGET_TAGS = ("pad", "lot", "gate", "roof")

BANDS = ("near", "mid", "far")

# straight-line distance brackets in cells, upper bound exclusive
DEFAULT_TIERS = {"easy": (8.0, 24.0), "medium": (24.0, 48.0), "hard": (48.0, float("inf"))}


@dataclass(frozen=True)
class Landmark:
    id: int
    token: str
    x: int
    y: int
    radius: int


@dataclass
class WorldConfig:
    width: int = 96
    height: int = 96
    cell_size: float = 5.0
    z_min: int = 1
    z_max: int = 4
    cruise_z: int = 2
    r_base: int = 4
    r_gain: int = 2
    n_landmarks: int = 12
    obstacle_density: float = 0.25
    building_min: int = 2
    building_max: int = 6
    max_retries: int = 40


@dataclass
class CityWorld:
    width: int
    height: int
    cell_size: float
    height_field: np.ndarray  # [height, width] ints, indexed [y, x]
    landmarks: list
    z_min: int
    z_max: int
    cruise_z: int
    r_base: int
    r_gain: int
    world_id: str = ""

    @property
    def patch_side(self) -> int:
        return 2 * (self.r_base + self.r_gain * self.z_max) + 1

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def landmark_by_id(self, lid: int) -> Landmark:
        for lm in self.landmarks:
            if lm.id == lid:
                return lm
        raise ContractError(f"unknown landmark id {lid}")


@dataclass
class UavState:
    x: float
    y: float
    z: int
    heading: int  # 0..3, theta = heading * pi/2

    @property
    def theta(self) -> float:
        return self.heading * (math.pi / 2.0)

    def cell(self):
        return int(round(self.x)), int(round(self.y))


@dataclass(frozen=True)
class GoalDescriptor:
    landmark_id: int
    sector: int  # 0..7 compass sector of goal relative to the landmark
    band: str  # near | mid | far
    tag: int  # small categorical token index into TARGET_TAGS


@dataclass
class EpisodeSpec:
    world_id: str
    start: UavState
    goal: tuple
    descriptor: GoalDescriptor
    difficulty: str
    shortest_path_length: float  # meters
    max_steps: int


@dataclass
class Observation:
    patch: np.ndarray  # [3, P, P]: relative height, landmark presence, invalid mask
    z_max: int  # scale needed to invert the relative-height encoding


def validate_state(world: CityWorld, state: UavState):
    cx, cy = state.cell()
    if not world.in_bounds(cx, cy):
        raise ContractError(f"state cell ({cx},{cy}) outside {world.width}x{world.height} grid")
    if not (world.z_min <= state.z <= world.z_max):
        raise ContractError(f"altitude {state.z} outside [{world.z_min},{world.z_max}]")
    if state.z <= world.height_field[cy, cx]:
        raise ContractError(f"altitude {state.z} interpenetrates obstacle of height {world.height_field[cy, cx]}")
    if state.heading not in (0, 1, 2, 3):
        raise ContractError(f"heading index {state.heading} not in 0..3")


def step(world: CityWorld, state: UavState, action: Action):
    """Pure transition. Returns (next_state, blocked, terminal)."""
    validate_state(world, state)
    a = Action(action)
    if a == Action.STOP:
        return replace(state), False, True
    if a == Action.TURN_LEFT:
        return replace(state, heading=(state.heading + 1) % 4), False, False
    if a == Action.TURN_RIGHT:
        return replace(state, heading=(state.heading - 1) % 4), False, False
    cx, cy = state.cell()
    if a == Action.GO_UP:
        if state.z + 1 > world.z_max:
            return replace(state), True, False
        return replace(state, z=state.z + 1), False, False
    if a == Action.GO_DOWN:
        # descending into an obstacle is blocked the same way the ceiling is
        if state.z - 1 < world.z_min or state.z - 1 <= world.height_field[cy, cx]:
            return replace(state), True, False
        return replace(state, z=state.z - 1), False, False
    # forward
    dx, dy = DIRS[state.heading]
    nx, ny = cx + dx, cy + dy
    if not world.in_bounds(nx, ny) or world.height_field[ny, nx] >= state.z:
        return replace(state), True, False
    return replace(state, x=state.x + dx, y=state.y + dy), False, False


def distance_to_goal(state: UavState, goal, cell_size: float) -> float:
    """Horizontal Euclidean distance in meters (goals are ground cells)."""
    return math.hypot(state.x - goal[0], state.y - goal[1]) * cell_size


def render_observation(world: CityWorld, state: UavState) -> Observation:
    validate_state(world, state)
    p = world.patch_side
    half = p // 2
    cx, cy = state.cell()
    offs = np.arange(-half, half + 1)
    gy, gx = np.meshgrid(offs, offs, indexing="ij")
    ax = gx + cx
    ay = gy + cy
    in_bounds = (ax >= 0) & (ax < world.width) & (ay >= 0) & (ay < world.height)
    radius = world.r_base + world.r_gain * state.z
    visible = (gx * gx + gy * gy <= radius * radius) & in_bounds
    axc = np.clip(ax, 0, world.width - 1)
    ayc = np.clip(ay, 0, world.height - 1)
    hf = world.height_field[ayc, axc].astype(np.float64)
    rel = np.clip((hf - state.z + world.z_max) / (2.0 * world.z_max), 0.0, 1.0)
    height_ch = np.where(visible, rel, 0.0)
    lm_ch = np.zeros((p, p))
    for lm in world.landmarks:
        d2 = (ax - lm.x) ** 2 + (ay - lm.y) ** 2
        lm_ch = np.maximum(lm_ch, (d2 <= lm.radius * lm.radius).astype(np.float64))
    lm_ch = np.where(visible, lm_ch, 0.0)
    mask_ch = 1.0 - visible.astype(np.float64)
    return Observation(patch=np.stack([height_ch, lm_ch, mask_ch]), z_max=world.z_max)


# --------------------------------------------------------------- generation


def _passable(world_hf: np.ndarray, z: int) -> np.ndarray:
    return world_hf < z


def _connected(hf: np.ndarray, centers, z: int) -> bool:
    """Flood fill at altitude z; True iff all centers share a component."""
    h, w = hf.shape
    free = _passable(hf, z)
    if not all(free[y, x] for x, y in centers):
        return False
    seen = np.zeros_like(free, dtype=bool)
    sx, sy = centers[0]
    seen[sy, sx] = True
    q = deque([(sx, sy)])
    while q:
        x, y = q.popleft()
        for dx, dy in DIRS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and free[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                q.append((nx, ny))
    return all(seen[y, x] for x, y in centers)


def generate_world(seed: int, cfg: WorldConfig | None = None) -> CityWorld:
    """Deterministic city layout: rectangular buildings + cleared landmark disks."""
    cfg = cfg or WorldConfig()
    if cfg.width < 32 or cfg.height < 32:
        raise ConfigError(f"world dimensions {cfg.width}x{cfg.height} below the 32x32 minimum")
    if cfg.n_landmarks < 2:
        raise ConfigError(f"need at least 2 landmarks, got {cfg.n_landmarks}")
    if not (0 < cfg.z_min <= cfg.cruise_z <= cfg.z_max):
        raise ConfigError(f"altitude range [{cfg.z_min},{cfg.z_max}] with cruise {cfg.cruise_z} is inconsistent")
    rng = substream(seed, "world-gen")
    avg_area = ((cfg.building_min + cfg.building_max) / 2.0) ** 2
    n_buildings = int(cfg.obstacle_density * cfg.width * cfg.height / avg_area)
    for _ in range(cfg.max_retries):
        hf = np.zeros((cfg.height, cfg.width), dtype=np.int64)
        for _ in range(n_buildings):
            bw = int(rng.integers(cfg.building_min, cfg.building_max + 1))
            bh = int(rng.integers(cfg.building_min, cfg.building_max + 1))
            bx = int(rng.integers(0, cfg.width - bw + 1))
            by = int(rng.integers(0, cfg.height - bh + 1))
            hz = int(rng.integers(1, cfg.z_max + 1))
            hf[by : by + bh, bx : bx + bw] = np.maximum(hf[by : by + bh, bx : bx + bw], hz)
        # landmark centers: spread out, then carve their footprints clear
        min_sep = max(4, min(cfg.width, cfg.height) // 8)
        centers = []
        for _ in range(cfg.n_landmarks * 50):
            if len(centers) == cfg.n_landmarks:
                break
            x = int(rng.integers(2, cfg.width - 2))
            y = int(rng.integers(2, cfg.height - 2))
            if all((x - ox) ** 2 + (y - oy) ** 2 >= min_sep * min_sep for ox, oy in centers):
                centers.append((x, y))
        if len(centers) < cfg.n_landmarks:
            continue
        landmarks = []
        for i, (x, y) in enumerate(centers):
            radius = int(rng.integers(2, 4))
            yy, xx = np.ogrid[: cfg.height, : cfg.width]
            disk = (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius
            hf[disk] = 0
            token = LANDMARK_TOKENS[i % len(LANDMARK_TOKENS)]
            if i >= len(LANDMARK_TOKENS):
                token = f"{token}{i // len(LANDMARK_TOKENS)}"
            landmarks.append(Landmark(id=i, token=token, x=x, y=y, radius=radius))
        if not _connected(hf, centers, cfg.cruise_z):
            continue
        world = CityWorld(
            width=cfg.width,
            height=cfg.height,
            cell_size=cfg.cell_size,
            height_field=hf,
            landmarks=landmarks,
            z_min=cfg.z_min,
            z_max=cfg.z_max,
            cruise_z=cfg.cruise_z,
            r_base=cfg.r_base,
            r_gain=cfg.r_gain,
        )
        world.world_id = world_hash(world)
        return world
    raise GenerationError(
        f"no connected layout within {cfg.max_retries} retries (seed={seed}, density={cfg.obstacle_density})"
    )


def world_hash(world: CityWorld) -> str:
    return stable_hash_bytes(serialize_world(world).encode("utf-8"))[:16]


# ------------------------------------------------------------------ episodes


def _sector_of(dx: float, dy: float) -> int:
    """8 compass sectors, 0 = +x, counterclockwise, each 45 deg wide."""
    ang = math.atan2(dy, dx) % (2.0 * math.pi)
    return int((ang + math.pi / 8.0) // (math.pi / 4.0)) % 8


def _band_of(dist: float, band_edges) -> str:
    if dist < band_edges[0]:
        return "near"
    if dist < band_edges[1]:
        return "mid"
    return "far"


def sample_episode(
    world: CityWorld,
    difficulty: str,
    rng: np.random.Generator,
    tiers: dict | None = None,
    band_edges=(4.0, 8.0),
    band_max: float = 12.0,
    budget_factor: float = 4.0,
    max_tries: int = 400,
    stats: dict | None = None,
) -> EpisodeSpec:
    """Goal near a landmark, start in the difficulty's distance bracket.

    Reachability is teacher-verified, so a returned spec always carries
    the true shortest-path length. Failed draws are retried; if the
    caller passes a stats dict, each retry bumps stats["resampled"].
    """
    from .errors import InfeasibleError
    from .teacher import plan_path  # planner lives downstream; cycle broken lazily

    if difficulty not in (tiers or DEFAULT_TIERS):
        raise ConfigError(f"unknown difficulty tier {difficulty!r}")
    lo, hi = (tiers or DEFAULT_TIERS)[difficulty]
    free_y, free_x = np.nonzero(world.height_field == 0)
    if free_x.size == 0:
        raise GenerationError("world has no free ground cells")

    def miss():
        if stats is not None:
            stats["resampled"] = stats.get("resampled", 0) + 1

    for _ in range(max_tries):
        lm = world.landmarks[int(rng.integers(len(world.landmarks)))]
        dist = float(rng.uniform(1.5, band_max))
        ang = float(rng.uniform(0.0, 2.0 * math.pi))
        gx = int(round(lm.x + dist * math.cos(ang)))
        gy = int(round(lm.y + dist * math.sin(ang)))
        if not world.in_bounds(gx, gy) or world.height_field[gy, gx] != 0 or (gx, gy) == (lm.x, lm.y):
            miss()
            continue
        start = None
        for _ in range(60):
            i = int(rng.integers(free_x.size))
            sx, sy = int(free_x[i]), int(free_y[i])
            sl = math.hypot(sx - gx, sy - gy)
            if lo <= sl < hi and (sx, sy) != (gx, gy):
                start = UavState(x=float(sx), y=float(sy), z=world.cruise_z, heading=int(rng.integers(4)))
                break
        if start is None:
            miss()
            continue
        try:
            plan = plan_path(world, start, (gx, gy))
        except InfeasibleError:
            miss()
            continue
        n_forward = sum(1 for a in plan.actions if a == Action.FORWARD)
        ell = n_forward * world.cell_size
        desc = GoalDescriptor(
            landmark_id=lm.id,
            sector=_sector_of(gx - lm.x, gy - lm.y),
            band=_band_of(math.hypot(gx - lm.x, gy - lm.y), band_edges),
            tag=int(rng.integers(len(TARGET_TAGS))),
        )
        return EpisodeSpec(
            world_id=world.world_id,
            start=start,
            goal=(gx, gy),
            descriptor=desc,
            difficulty=difficulty,
            shortest_path_length=ell,
            max_steps=int(math.ceil(budget_factor * ell / world.cell_size)),
        )
    raise GenerationError(f"no feasible ({difficulty}) episode after {max_tries} tries in world {world.world_id}")


# ------------------------------------------------------------------- file IO


def serialize_world(world: CityWorld) -> str:
    lines = [
        "tiernav-world 1",
        f"width {world.width}",
        f"height {world.height}",
        f"cell_size {world.cell_size!r}",
        f"z_min {world.z_min}",
        f"z_max {world.z_max}",
        f"cruise_z {world.cruise_z}",
        f"r_base {world.r_base}",
        f"r_gain {world.r_gain}",
        "heights",
    ]
    for y in range(world.height):
        lines.append(" ".join(str(int(v)) for v in world.height_field[y]))
    lines.append(f"landmarks {len(world.landmarks)}")
    for lm in world.landmarks:
        lines.append(f"{lm.id} {lm.token} {lm.x} {lm.y} {lm.radius}")
    return "\n".join(lines) + "\n"


def save_world(world: CityWorld, path):
    with open(path, "w") as f:
        f.write(serialize_world(world))


def load_world(path) -> CityWorld:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("tiernav-world"):
        raise ContractError(f"{path}: not a world file")
    head = {}
    i = 1
    while lines[i] != "heights":
        key, val = lines[i].split(maxsplit=1)
        head[key] = val
        i += 1
    i += 1
    h, w = int(head["height"]), int(head["width"])
    hf = np.array([[int(v) for v in lines[i + y].split()] for y in range(h)], dtype=np.int64)
    i += h
    n_lm = int(lines[i].split()[1])
    i += 1
    landmarks = []
    for j in range(n_lm):
        lid, token, x, y, r = lines[i + j].split()
        landmarks.append(Landmark(id=int(lid), token=token, x=int(x), y=int(y), radius=int(r)))
    world = CityWorld(
        width=w,
        height=h,
        cell_size=float(head["cell_size"]),
        height_field=hf,
        landmarks=landmarks,
        z_min=int(head["z_min"]),
        z_max=int(head["z_max"]),
        cruise_z=int(head["cruise_z"]),
        r_base=int(head["r_base"]),
        r_gain=int(head["r_gain"]),
    )
    world.world_id = world_hash(world)
    return world


def episode_to_dict(ep: EpisodeSpec) -> dict:
    return {
        "world_id": ep.world_id,
        "start": {"x": ep.start.x, "y": ep.start.y, "z": ep.start.z, "heading": ep.start.heading},
        "goal": [ep.goal[0], ep.goal[1]],
        "descriptor": {
            "landmark_id": ep.descriptor.landmark_id,
            "sector": ep.descriptor.sector,
            "band": ep.descriptor.band,
            "tag": ep.descriptor.tag,
        },
        "difficulty": ep.difficulty,
        "shortest_path_length": ep.shortest_path_length,
        "max_steps": ep.max_steps,
    }


def episode_from_dict(d: dict) -> EpisodeSpec:
    return EpisodeSpec(
        world_id=d["world_id"],
        start=UavState(x=d["start"]["x"], y=d["start"]["y"], z=d["start"]["z"], heading=d["start"]["heading"]),
        goal=(d["goal"][0], d["goal"][1]),
        descriptor=GoalDescriptor(
            landmark_id=d["descriptor"]["landmark_id"],
            sector=d["descriptor"]["sector"],
            band=d["descriptor"]["band"],
            tag=d["descriptor"]["tag"],
        ),
        difficulty=d["difficulty"],
        shortest_path_length=d["shortest_path_length"],
        max_steps=d["max_steps"],
    )


def save_episodes(episodes, path):
    with open(path, "w") as f:
        for ep in episodes:
            f.write(json.dumps(episode_to_dict(ep), sort_keys=True) + "\n")


def load_episodes(path):
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(episode_from_dict(json.loads(line)))
    return out


def corridor_world(length: int = 40, half_width: int = 1, cell_size: float = 5.0) -> CityWorld:
    """Thin walled strip used by the policy-gradient sanity task."""
    h = 2 * half_width + 3
    hf = np.zeros((h, length), dtype=np.int64)
    hf[0, :] = 4
    hf[-1, :] = 4
    landmarks = [
        Landmark(id=0, token="gatehouse", x=1, y=h // 2, radius=1),
        Landmark(id=1, token="beacon", x=length - 2, y=h // 2, radius=1),
    ]
    world = CityWorld(
        width=length,
        height=h,
        cell_size=cell_size,
        height_field=hf,
        landmarks=landmarks,
        z_min=1,
        z_max=4,
        cruise_z=2,
        r_base=4,
        r_gain=2,
    )
    world.world_id = world_hash(world)
    return world
