"""Navigation metrics, benchmark runs, and the ablation harness.

Four per-episode numbers: final-distance error, success (stopped in
range), oracle success (ever in range), and path-efficiency-weighted
success. Success requires the stop action; drifting through the goal
region only sets the oracle flag. Aggregation uses exact summation so
cell values are independent of episode order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .agent import Trajectory, run_episode, write_trajectory_log
from .errors import ContractError
from .teacher import TRAJ_COLUMNS, _fmt
from .util import substream
from .world import EpisodeSpec, sample_episode

SPLITS = ("seen", "unseen")
TIERS = ("easy", "medium", "hard")


@dataclass
class EpisodeResult:
    episode_id: str
    final_pos: tuple
    ne_m: float
    success: bool
    oracle: bool
    path_len_m: float
    shortest_m: float
    steps_used: int
    truncated: bool
    tier: str

    @property
    def spl_term(self) -> float:
        if not self.success:
            return 0.0
        denom = max(self.shortest_m, self.path_len_m)
        return self.shortest_m / denom if denom > 0 else 1.0

    def validate(self, threshold_m: float):
        if self.success and not self.oracle:
            raise ContractError(f"{self.episode_id}: success without oracle")
        if self.path_len_m < 0:
            raise ContractError(f"{self.episode_id}: negative path length")
        if self.success and self.ne_m > threshold_m:
            raise ContractError(f"{self.episode_id}: success beyond {threshold_m} m")


def episode_metrics(traj: Trajectory, episode: EpisodeSpec, threshold_m: float = 20.0,
                    cell_size: float = 5.0, episode_id: str = "") -> EpisodeResult:
    """Score one trajectory. Distances are horizontal and in meters;
    altitude moves contribute nothing to the path length."""
    if not traj.steps:
        raise ContractError("cannot score an empty trajectory")
    if episode.goal is None or len(episode.goal) != 2:
        raise ContractError(f"episode {episode_id or episode.world_id}: missing goal")
    gx, gy = episode.goal
    pts = [(s.state.x, s.state.y) for s in traj.steps]
    pts.append((traj.final_state.x, traj.final_state.y))
    ne = math.hypot(pts[-1][0] - gx, pts[-1][1] - gy) * cell_size
    closest = min(math.hypot(x - gx, y - gy) for x, y in pts) * cell_size
    path = sum(
        math.hypot(x1 - x0, y1 - y0) for (x0, y0), (x1, y1) in zip(pts, pts[1:])
    ) * cell_size
    success = traj.stopped and ne <= threshold_m
    result = EpisodeResult(
        episode_id=episode_id,
        final_pos=(traj.final_state.x, traj.final_state.y),
        ne_m=ne,
        success=success,
        oracle=closest <= threshold_m,
        path_len_m=path,
        shortest_m=float(episode.shortest_path_length),
        steps_used=len(traj.steps),
        truncated=traj.truncated,
        tier=episode.difficulty,
    )
    result.validate(threshold_m)
    return result


@dataclass
class BenchmarkCell:
    ne: float  # mean meters
    sr: float  # percent
    osr: float  # percent
    spl: float  # percent
    n: int

    def validate(self):
        if self.spl > self.sr + 1e-9:
            raise ContractError(f"cell invariant broken: SPL {self.spl} > SR {self.sr}")
        if self.osr < self.sr - 1e-9:
            raise ContractError(f"cell invariant broken: OSR {self.osr} < SR {self.sr}")


def aggregate(results) -> BenchmarkCell:
    """Mean NE, percentage SR/OSR, and mean SPL x100 over a result set.

    fsum keeps every cell value independent of input order.
    """
    results = list(results)
    if not results:
        raise ContractError("aggregate of an empty result set")
    n = len(results)
    cell = BenchmarkCell(
        ne=math.fsum(r.ne_m for r in results) / n,
        sr=100.0 * math.fsum(1.0 for r in results if r.success) / n,
        osr=100.0 * math.fsum(1.0 for r in results if r.oracle) / n,
        spl=100.0 * math.fsum(r.spl_term for r in results) / n,
        n=n,
    )
    cell.validate()
    return cell


# ------------------------------------------------------------------ benchmark


@dataclass
class BenchmarkRecord:
    split: str
    tier: str
    seed: int
    index: int
    result: EpisodeResult
    traj: Trajectory


@dataclass
class BenchmarkReport:
    cells: dict  # (split, tier) -> BenchmarkCell
    seeds: list
    episodes_per_tier: int
    threshold_m: float
    config_echo: dict

    def cell(self, split: str, tier: str) -> BenchmarkCell:
        return self.cells[(split, tier)]

    def validate(self):
        for c in self.cells.values():
            c.validate()


def run_benchmark(
    policy,
    worlds_by_split: dict,
    episodes_per_tier: int,
    seeds,
    tiers=TIERS,
    tier_brackets=None,
    threshold_m: float = 20.0,
    mode: str = "greedy",
    use_prior: bool = True,
    r_prior: float = 12.0,
    max_steps=None,
    config_echo=None,
):
    """Stratified evaluation over splits, tiers, and seeds.

    Episode i of (split, tier, seed) draws from its own substream and a
    round-robin world, so reports depend only on the seed list. Returns
    (report, records); records keep the trajectories for step logs.
    """
    seeds = list(seeds)
    records = []
    for split, worlds in worlds_by_split.items():
        if not worlds:
            continue
        for tier in tiers:
            for seed in seeds:
                for i in range(episodes_per_tier):
                    world = worlds[i % len(worlds)]
                    ep = sample_episode(world, tier, substream(seed, "bench", split, tier, i),
                                        tiers=tier_brackets)
                    traj = run_episode(
                        policy, world, ep, mode=mode,
                        rng=substream(seed, "bench-rng", split, tier, i),
                        r_prior=r_prior, use_prior=use_prior, max_steps=max_steps,
                    )
                    result = episode_metrics(
                        traj, ep, threshold_m=threshold_m, cell_size=world.cell_size,
                        episode_id=f"{split}/{tier}/s{seed}/{i}",
                    )
                    records.append(BenchmarkRecord(split=split, tier=tier, seed=seed,
                                                   index=i, result=result, traj=traj))
    cells = {}
    for split in worlds_by_split:
        if not worlds_by_split[split]:
            continue
        for tier in tiers:
            group = [r.result for r in records if r.split == split and r.tier == tier]
            cells[(split, tier)] = aggregate(group)
    report = BenchmarkReport(cells=cells, seeds=seeds, episodes_per_tier=episodes_per_tier,
                             threshold_m=threshold_m, config_echo=dict(config_echo or {}))
    report.validate()
    return report, records


def per_seed_sr(records, split=None, tier=None) -> dict:
    """seed -> SR percent over the matching records (paired comparisons)."""
    out = {}
    for rec in records:
        if split is not None and rec.split != split:
            continue
        if tier is not None and rec.tier != tier:
            continue
        out.setdefault(rec.seed, []).append(rec.result)
    return {seed: aggregate(group).sr for seed, group in sorted(out.items())}


# ----------------------------------------------------------------- report IO


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_benchmark_csv(path, report: BenchmarkReport):
    lines = ["split,tier,NE,SR,OSR,SPL,n,seeds"]
    for (split, tier), c in sorted(report.cells.items()):
        seeds = ";".join(str(s) for s in report.seeds)
        lines.append(",".join([split, tier, repr(c.ne), repr(c.sr), repr(c.osr),
                               repr(c.spl), str(c.n), seeds]))
    _atomic_write(path, "\n".join(lines) + "\n")


def render_table(report: BenchmarkReport) -> str:
    header = f"{'split':<8}{'tier':<8}{'NE(m)':>9}{'SR%':>8}{'OSR%':>8}{'SPL%':>8}{'n':>6}"
    rows = [header, "-" * len(header)]
    for (split, tier), c in sorted(report.cells.items()):
        rows.append(f"{split:<8}{tier:<8}{c.ne:>9.2f}{c.sr:>8.2f}{c.osr:>8.2f}{c.spl:>8.2f}{c.n:>6d}")
    rows.append(f"seeds: {', '.join(str(s) for s in report.seeds)}"
                f"  threshold: {report.threshold_m} m")
    return "\n".join(rows) + "\n"


def write_benchmark_table(path, report: BenchmarkReport):
    _atomic_write(path, render_table(report))


STEP_LOG_COLUMNS = ("split", "tier", "seed", "episode") + TRAJ_COLUMNS


def write_step_log(path, records):
    """All benchmark trajectories, one row per step, log schema columns."""
    lines = [",".join(STEP_LOG_COLUMNS)]
    for rec in records:
        prefix = [rec.split, rec.tier, str(rec.seed), str(rec.index)]
        for s in rec.traj.steps:
            row = [s.t, s.state.x, s.state.y, s.state.z, s.state.theta, s.action, s.k,
                   s.waypoint[0], s.waypoint[1], s.goal_hat[0], s.goal_hat[1],
                   s.progress_hat, s.value_hat, s.reward, s.dist]
            lines.append(",".join(prefix + [_fmt(v) for v in row]))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_episode_trajectories(out_dir, records):
    os.makedirs(out_dir, exist_ok=True)
    for rec in records:
        name = f"{rec.split}_{rec.tier}_s{rec.seed}_{rec.index:03d}.csv"
        write_trajectory_log(os.path.join(out_dir, name), rec.traj)


# ------------------------------------------------------------------ ablations


@dataclass
class AblationRow:
    name: str
    trained: bool
    report: BenchmarkReport | None
    sr_by_seed: dict | None  # pooled over tiers
    delta_sr_by_seed: dict | None  # vs the base variant, same seeds
    mean_delta_sr: float


@dataclass
class AblationReport:
    base: str
    seeds: list
    rows: list

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise ContractError(f"no ablation row named {name!r}")


def ablation_suite(
    variants: dict,
    worlds_by_split: dict,
    episodes_per_tier: int,
    seeds,
    base: str,
    tiers=TIERS,
    tier_brackets=None,
    threshold_m: float = 20.0,
    options: dict | None = None,
) -> AblationReport:
    """One benchmark row per variant over shared episode seeds.

    variants maps name -> policy (None marks an untrained variant: the
    row is kept, flagged, and the run continues). options maps name ->
    extra run_benchmark keyword arguments, e.g. use_prior=False for the
    channel-drop axis. Paired per-seed SR deltas are taken against the
    named base variant.
    """
    if base not in variants:
        raise ContractError(f"base variant {base!r} missing from the variant set")
    options = options or {}
    rows = []
    sr_maps = {}
    for name, policy in variants.items():
        if policy is None:
            rows.append(AblationRow(name=name, trained=False, report=None,
                                    sr_by_seed=None, delta_sr_by_seed=None,
                                    mean_delta_sr=math.nan))
            continue
        kw = dict(options.get(name, {}))
        report, records = run_benchmark(
            policy, worlds_by_split, episodes_per_tier, seeds,
            tiers=tiers, tier_brackets=tier_brackets, threshold_m=threshold_m, **kw,
        )
        sr_map = per_seed_sr(records)
        sr_maps[name] = sr_map
        rows.append(AblationRow(name=name, trained=True, report=report,
                                sr_by_seed=sr_map, delta_sr_by_seed=None,
                                mean_delta_sr=math.nan))
    base_sr = sr_maps.get(base)
    if base_sr is None:
        raise ContractError(f"base variant {base!r} has no trained policy")
    for row in rows:
        if not row.trained:
            continue
        deltas = {seed: row.sr_by_seed[seed] - base_sr[seed] for seed in base_sr}
        row.delta_sr_by_seed = deltas
        row.mean_delta_sr = math.fsum(deltas.values()) / len(deltas)
    return AblationReport(base=base, seeds=list(seeds), rows=rows)


def write_ablation_table(path, report: AblationReport, tiers=TIERS):
    lines = [f"ablation vs base {report.base!r}, seeds {report.seeds}"]
    for row in report.rows:
        if not row.trained:
            lines.append(f"{row.name:<24} UNTRAINED")
            continue
        cells = []
        for (split, tier), c in sorted(row.report.cells.items()):
            cells.append(f"{split}/{tier} SR {c.sr:.2f} SPL {c.spl:.2f}")
        lines.append(f"{row.name:<24} dSR {row.mean_delta_sr:+.2f}  " + "  ".join(cells))
    _atomic_write(path, "\n".join(lines) + "\n")
