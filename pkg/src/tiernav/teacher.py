"""Expert demonstrator.

plan_path runs A* over (x, y, z, heading) with unit move cost and a
small turn cost, so paths come out smooth and their corners are
informative waypoints. build_demonstration replays a plan through the
simulator to attach observations, map state, progress, and exact
discounted value labels.
"""

from __future__ import annotations

import heapq
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GenerationError, InfeasibleError
from .mapper import NavMap, init_map, update_map
from .util import substream
from .world import (
    DIRS,
    Action,
    CityWorld,
    EpisodeSpec,
    Observation,
    UavState,
    episode_from_dict,
    episode_to_dict,
    render_observation,
    sample_episode,
    step,
)

TURN_COST = 0.1
S_MAX = 12  # max waypoint spacing in forward moves
R_ANCHOR = 3.0  # landmark-to-path snap distance
EPS_WP = 1.5  # waypoint-reached radius in cells


@dataclass
class ExpertPath:
    states: list  # (x, y, z, heading) tuples, len = len(actions)+1
    actions: list  # Action values, no trailing stop
    remaining: np.ndarray  # geodesic meters left before each state

    @property
    def cells(self):
        return [(s[0], s[1], s[2]) for s in self.states]


def plan_path(world: CityWorld, start: UavState, goal) -> ExpertPath:
    """A* to the goal cell. Deterministic tie-break on (f, h, state index)."""
    gx, gy = int(goal[0]), int(goal[1])
    if not world.in_bounds(gx, gy):
        raise ContractError(f"goal ({gx},{gy}) outside grid")
    hf = world.height_field
    w, h = world.width, world.height
    zs = world.z_max + 1
    sx, sy = start.cell()
    s0 = (sx, sy, start.z, start.heading)

    def idx(s):
        return ((s[1] * w + s[0]) * zs + s[2]) * 4 + s[3]

    def heur(s):
        return math.hypot(s[0] - gx, s[1] - gy)

    g_score = {s0: 0.0}
    came: dict = {}
    h0 = heur(s0)
    open_heap = [(h0, h0, idx(s0), s0)]
    closed = set()
    while open_heap:
        f, _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        closed.add(cur)
        x, y, z, hd = cur
        if x == gx and y == gy:
            return _reconstruct(world, came, cur, start)
        g_cur = g_score[cur]
        succs = []
        dx, dy = DIRS[hd]
        nx, ny = x + dx, y + dy
        if 0 <= nx < w and 0 <= ny < h and hf[ny, nx] < z:
            succs.append(((nx, ny, z, hd), 1.0, Action.FORWARD))
        succs.append(((x, y, z, (hd + 1) % 4), TURN_COST, Action.TURN_LEFT))
        succs.append(((x, y, z, (hd - 1) % 4), TURN_COST, Action.TURN_RIGHT))
        if z + 1 <= world.z_max:
            succs.append(((x, y, z + 1, hd), 1.0, Action.GO_UP))
        if z - 1 >= world.z_min and z - 1 > hf[y, x]:
            succs.append(((x, y, z - 1, hd), 1.0, Action.GO_DOWN))
        for nxt, cost, act in succs:
            ng = g_cur + cost
            if ng < g_score.get(nxt, math.inf):
                g_score[nxt] = ng
                came[nxt] = (cur, act)
                hn = heur(nxt)
                heapq.heappush(open_heap, (ng + hn, hn, idx(nxt), nxt))
    raise InfeasibleError(f"no path from ({sx},{sy},z{start.z}) to ({gx},{gy})")


def _reconstruct(world: CityWorld, came, goal_state, start: UavState) -> ExpertPath:
    states = [goal_state]
    actions = []
    cur = goal_state
    while cur in came:
        cur, act = came[cur]
        states.append(cur)
        actions.append(act)
    states.reverse()
    actions.reverse()
    n_fwd_after = np.zeros(len(actions) + 1)
    acc = 0
    for i in range(len(actions) - 1, -1, -1):
        if actions[i] == Action.FORWARD:
            acc += 1
        n_fwd_after[i] = acc
    return ExpertPath(states=states, actions=actions, remaining=n_fwd_after * world.cell_size)


def extract_waypoints(path: ExpertPath, world: CityWorld):
    """Corner + landmark-anchored waypoints, spacing-capped, goal last."""
    states = path.states
    n = len(states)
    marked = set()
    for i, act in enumerate(path.actions):
        if act in (Action.TURN_LEFT, Action.TURN_RIGHT):
            marked.add(i)  # cell where the heading change happens
    for lm in world.landmarks:
        best_i, best_d = None, math.inf
        for i, s in enumerate(states):
            d = math.hypot(s[0] - lm.x, s[1] - lm.y)
            if d < best_d:
                best_i, best_d = i, d
        if best_d <= R_ANCHOR:
            marked.add(best_i)
    marked.add(n - 1)
    order = sorted(marked)
    # cap spacing: at most S_MAX forward moves between consecutive marks
    capped = []
    prev = 0
    for m in order:
        cnt = 0
        for j in range(prev, m):
            if path.actions[j] == Action.FORWARD:
                cnt += 1
                if cnt == S_MAX:
                    capped.append(j + 1)
                    cnt = 0
        capped.append(m)
        prev = m
    waypoints = []
    for i in capped:
        cell = (states[i][0], states[i][1])
        if not waypoints or waypoints[-1] != cell:
            waypoints.append(cell)
    goal_cell = (states[-1][0], states[-1][1])
    if waypoints[-1] != goal_cell:
        waypoints.append(goal_cell)
    return waypoints


@dataclass
class DemoStep:
    state: UavState
    obs: Observation
    snapshot_id: int
    expert_action: int
    waypoint: tuple
    k: int
    progress: float
    value: float
    reward: float
    dist: float


@dataclass
class Demonstration:
    episode: EpisodeSpec
    waypoints: list
    steps: list
    maps: list  # NavMap snapshots, indexed by DemoStep.snapshot_id


def advance_waypoint(k: int, waypoints, state: UavState, eps: float = EPS_WP) -> int:
    """Index of the first unreached waypoint at or after k."""
    while k < len(waypoints) - 1 and math.hypot(state.x - waypoints[k][0], state.y - waypoints[k][1]) < eps:
        k += 1
    return k


def build_demonstration(
    world: CityWorld,
    episode: EpisodeSpec,
    reward_cfg,
    gamma: float,
    r_prior: float = 12.0,
    use_prior: bool = True,
    keep_maps: bool = True,
    keep_obs: bool = True,
) -> Demonstration:
    """Replay the expert plan, labeling every step.

    Steps cover the planned actions plus the final stop. Value labels
    are exact discounted suffix sums of the replayed rewards, so the
    one-step Bellman identity holds to float precision. keep_maps /
    keep_obs=False drop the bulky arrays for corpora that are only
    written to disk (loading replays them back).
    """
    from .training import compute_reward  # local import, avoids a module cycle

    path = plan_path(world, episode.start, episode.goal)
    waypoints = extract_waypoints(path, world)
    nav = init_map(world, episode, r_prior=r_prior, use_prior=use_prior)
    state = episode.start
    actions = list(path.actions) + [Action.STOP]
    t_total = len(actions)
    steps = []
    maps = []
    n_snapshots = 0
    k = 0
    rewards = []
    for i, act in enumerate(actions):
        obs = render_observation(world, state)
        update_map(nav, state, obs)
        k = advance_waypoint(k, waypoints, state)
        if i == 0 or k != steps[-1].k:
            n_snapshots += 1
            if keep_maps:
                maps.append(NavMap(grid=nav.grid.copy()))
        snapshot_id = n_snapshots - 1
        nxt, blocked, terminal = step(world, state, act)
        if blocked:
            raise ContractError(f"expert action {act.name} blocked at ({state.x},{state.y},z{state.z}) during replay")
        r = compute_reward(state, nxt, episode.goal, world, reward_cfg, waypoint=waypoints[k], stopped=terminal)
        rewards.append(r)
        steps.append(
            DemoStep(
                state=state,
                obs=obs if keep_obs else None,
                snapshot_id=snapshot_id,
                expert_action=int(act),
                waypoint=waypoints[k],
                k=k,
                progress=(i + 1) / t_total,
                value=0.0,
                reward=r,
                dist=math.hypot(state.x - episode.goal[0], state.y - episode.goal[1]) * world.cell_size,
            )
        )
        state = nxt
    acc = 0.0
    for i in range(t_total - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        steps[i].value = acc
    return Demonstration(episode=episode, waypoints=waypoints, steps=steps, maps=maps)


def build_dataset(worlds, n_episodes: int, tiers, master_seed: int, reward_cfg, gamma: float,
                  tier_brackets=None, **demo_kw):
    """Tier-stratified demonstration corpus over one or more worlds.

    Episode i draws from substream (master_seed, "corpus", i), so the
    corpus is independent of construction order. Returns (demos,
    manifest dict).
    """
    tiers = list(tiers)
    stats: dict = {}
    demos = []
    tier_counts = {t: 0 for t in tiers}
    for i in range(n_episodes):
        tier = tiers[i % len(tiers)]
        world = worlds[i % len(worlds)]
        rng = substream(master_seed, "corpus", i)
        ep = sample_episode(world, tier, rng, tiers=tier_brackets, stats=stats)
        demos.append(build_demonstration(world, ep, reward_cfg, gamma, **demo_kw))
        tier_counts[tier] += 1
    order = substream(master_seed, "corpus-shuffle").permutation(len(demos))
    demos = [demos[int(i)] for i in order]
    manifest = {
        "master_seed": master_seed,
        "episodes": n_episodes,
        "resampled": stats.get("resampled", 0),
        "tier_counts": tier_counts,
        "world_ids": [w.world_id for w in worlds],
        "gamma": gamma,
    }
    return demos, manifest


# ------------------------------------------------------------------ corpus IO

TRAJ_COLUMNS = ("t", "x", "y", "z", "theta", "action", "k", "w_x", "w_y",
                "g_hat_x", "g_hat_y", "p_hat", "v_hat", "r", "d")
LABEL_COLUMNS = ("expert_action", "wstar_x", "wstar_y", "p", "v", "g_x", "g_y")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def save_corpus(corpus_dir, demos, manifest: dict):
    os.makedirs(corpus_dir, exist_ok=True)
    with open(os.path.join(corpus_dir, "manifest.txt"), "w") as f:
        f.write("tiernav-corpus 1\n")
        f.write(f"master_seed {manifest['master_seed']}\n")
        f.write(f"episodes {manifest['episodes']}\n")
        f.write(f"resampled {manifest['resampled']}\n")
        f.write(f"gamma {manifest['gamma']!r}\n")
        for t, c in sorted(manifest["tier_counts"].items()):
            f.write(f"tier {t} {c}\n")
        for wid in manifest["world_ids"]:
            f.write(f"world {wid}\n")
    with open(os.path.join(corpus_dir, "episodes.jsonl"), "w") as f:
        for demo in demos:
            f.write(json.dumps(episode_to_dict(demo.episode), sort_keys=True) + "\n")
    for i, demo in enumerate(demos):
        rows = []
        for t, s in enumerate(demo.steps):
            row = [t, s.state.x, s.state.y, s.state.z, s.state.theta, s.expert_action, s.k,
                   s.waypoint[0], s.waypoint[1], 0.0, 0.0, 0.0, 0.0, s.reward, s.dist,
                   s.expert_action, s.waypoint[0], s.waypoint[1], s.progress, s.value,
                   demo.episode.goal[0], demo.episode.goal[1]]
            rows.append(",".join(_fmt(v) for v in row))
        with open(os.path.join(corpus_dir, f"episode_{i:05d}.csv"), "w") as f:
            f.write(",".join(TRAJ_COLUMNS + LABEL_COLUMNS) + "\n")
            f.write("\n".join(rows) + "\n")


def load_manifest(corpus_dir) -> dict:
    manifest = {"tier_counts": {}, "world_ids": []}
    with open(os.path.join(corpus_dir, "manifest.txt")) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("tiernav-corpus"):
        raise ContractError(f"{corpus_dir}: not a corpus directory")
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "tier":
            manifest["tier_counts"][parts[1]] = int(parts[2])
        elif parts[0] == "world":
            manifest["world_ids"].append(parts[1])
        elif parts[0] == "gamma":
            manifest["gamma"] = float(parts[1])
        else:
            manifest[parts[0]] = int(parts[1])
    return manifest


def load_corpus(corpus_dir, worlds_by_id, r_prior: float = 12.0, use_prior: bool = True):
    """Rebuild demonstrations by deterministic replay of stored actions."""
    manifest = load_manifest(corpus_dir)
    with open(os.path.join(corpus_dir, "episodes.jsonl")) as f:
        episodes = [episode_from_dict(json.loads(line)) for line in f if line.strip()]
    demos = []
    for i, ep in enumerate(episodes):
        world = worlds_by_id.get(ep.world_id)
        if world is None:
            raise ContractError(f"corpus references unknown world {ep.world_id}")
        with open(os.path.join(corpus_dir, f"episode_{i:05d}.csv")) as f:
            lines = f.read().splitlines()
        header = lines[0].split(",")
        cols = {name: j for j, name in enumerate(header)}
        demo = _replay_records(world, ep, lines[1:], cols, r_prior, use_prior)
        demos.append(demo)
    return demos, manifest


def _replay_records(world, ep, rows, cols, r_prior, use_prior) -> Demonstration:
    nav = init_map(world, ep, r_prior=r_prior, use_prior=use_prior)
    state = ep.start
    steps = []
    maps = []
    waypoints = []
    for row in rows:
        vals = row.split(",")
        act = Action(int(vals[cols["action"]]))
        k = int(vals[cols["k"]])
        wp = (int(float(vals[cols["wstar_x"]])), int(float(vals[cols["wstar_y"]])))
        while len(waypoints) <= k:
            waypoints.append(wp)
        waypoints[k] = wp
        obs = render_observation(world, state)
        update_map(nav, state, obs)
        if not steps or k != steps[-1].k:
            maps.append(NavMap(grid=nav.grid.copy()))
        nxt, blocked, terminal = step(world, state, act)
        if blocked:
            raise ContractError(f"stored expert action {act.name} blocked during corpus replay")
        steps.append(
            DemoStep(
                state=state,
                obs=obs,
                snapshot_id=len(maps) - 1,
                expert_action=int(act),
                waypoint=wp,
                k=k,
                progress=float(vals[cols["p"]]),
                value=float(vals[cols["v"]]),
                reward=float(vals[cols["r"]]),
                dist=float(vals[cols["d"]]),
            )
        )
        state = nxt
    return Demonstration(episode=ep, waypoints=waypoints, steps=steps, maps=maps)
