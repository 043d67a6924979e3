"""Reward shaping, advantage estimation, the loss family, and the
two-stage trainers (imitation, then clipped policy-gradient blending).

The reward is shaped: a distance-progress term, a heading-alignment
term, an in-range bonus, a constant step penalty, then a hard clip.
Stage 1 regresses goal/progress/value/waypoint/action labels from
teacher demonstrations; stage 2 runs PPO on collected rollouts while
keeping an imitation term in the blend.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericsError
from .layers import Linear, Module, fan_in_uniform
from .mapper import init_map, update_map
from .optim import AdamW, clip_grad_norm
from .util import substream
from .world import (
    Action,
    UavState,
    corridor_world,
    distance_to_goal,
    render_observation,
    sample_episode,
    step as env_step,
)


@dataclass
class RewardConfig:
    alpha: float = 1.0  # per meter of approach
    beta: float = 0.5
    eta: float = 10.0
    delta: float = -0.01
    d_goal: float = 10.0  # meters
    r_min: float = -5.0
    r_max: float = 5.0
    heading_reference: str = "final_goal"  # or current_waypoint
    # Extension: gate the eta bonus on the stop action. The plain
    # in-range bonus saturates the clip on every in-range step, so a
    # policy trained on it farms the zone instead of stopping. Off by
    # default to keep the published form.
    goal_bonus_on_stop: bool = False

    def validate(self):
        if not self.r_min < self.r_max:
            raise ConfigError(f"reward clip bounds inverted: [{self.r_min}, {self.r_max}]")
        if not self.d_goal > 0:
            raise ConfigError(f"d_goal must be positive, got {self.d_goal}")
        if self.heading_reference not in ("final_goal", "current_waypoint"):
            raise ConfigError(f"unknown heading_reference {self.heading_reference!r}")


def _wrapped_angle(a: float, b: float) -> float:
    """|a-b| wrapped into [0, pi]."""
    d = abs(a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def compute_reward(
    prev_state: UavState,
    state: UavState,
    goal,
    world,
    cfg: RewardConfig,
    waypoint=None,
    stopped: bool = False,
) -> float:
    """Shaped step reward, clipped to [r_min, r_max].

    raw = alpha*(d_prev - d) + beta*(1 - |theta - theta*|/pi)
          + eta*[d < d_goal] + delta
    theta* points from the current position toward the reference target
    (final goal, or the active waypoint when so configured).
    """
    d_prev = distance_to_goal(prev_state, goal, world.cell_size)
    d = distance_to_goal(state, goal, world.cell_size)
    ref = goal
    if cfg.heading_reference == "current_waypoint" and waypoint is not None:
        ref = waypoint
    theta_star = math.atan2(ref[1] - state.y, ref[0] - state.x)
    heading_term = cfg.beta * (1.0 - _wrapped_angle(state.theta, theta_star) / math.pi)
    in_range = d < cfg.d_goal
    bonus = cfg.eta if (in_range and (stopped or not cfg.goal_bonus_on_stop)) else 0.0
    raw = cfg.alpha * (d_prev - d) + heading_term + bonus + cfg.delta
    return float(min(max(raw, cfg.r_min), cfg.r_max))


def discounted_return(rewards, gamma: float) -> np.ndarray:
    """Suffix sums G_t = sum_k gamma^k r_{t+k}."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class PPOConfig:
    gamma: float = 0.99
    lam_gae: float = 0.95
    eps_clip: float = 0.2
    lambda_rl: float = 0.2
    rollout_steps: int = 1024
    epochs_per_update: int = 4
    minibatch_size: int = 64
    lr: float = 3e-5
    entropy_weight: float = 0.01
    value_weight: float = 0.5
    max_updates: int = 30
    max_grad_norm: float = 5.0

    def validate(self):
        if not (0.0 <= self.lambda_rl <= 1.0):
            raise ConfigError(f"lambda_rl must satisfy λ_RL ∈ [0,1], got {self.lambda_rl}")
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must lie in (0,1), got {self.gamma}")
        if not (0.0 <= self.lam_gae <= 1.0):
            raise ConfigError(f"lam_gae must lie in [0,1], got {self.lam_gae}")
        if self.eps_clip <= 0:
            raise ConfigError(f"eps_clip must be positive, got {self.eps_clip}")


@dataclass
class Rollout:
    """Flat arrays over T collected steps; feature context is whatever
    the policy needs to recompute log-probs and values during updates."""

    actions: np.ndarray
    log_probs_old: np.ndarray
    values_old: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap_value: float = 0.0
    obs: np.ndarray | None = None  # [T,3,P,P]
    state_feats: np.ndarray | None = None
    desc_feats: np.ndarray | None = None
    map_feats: np.ndarray | None = None
    wp_feats: np.ndarray | None = None
    masks: np.ndarray | None = None  # [T,6] action legality at collection time
    episode_returns: list = field(default_factory=list)

    def __len__(self):
        return len(self.rewards)


def compute_gae(rollout: Rollout, gamma: float, lam: float):
    """Raw GAE advantages and value targets (targets = adv + V_old).

    Episode boundaries come from done flags; the final segment, if
    truncated, bootstraps from rollout.bootstrap_value. Normalization
    happens per update batch in the trainer, not here.
    """
    r = np.asarray(rollout.rewards, dtype=np.float64)
    v = np.asarray(rollout.values_old, dtype=np.float64)
    done = np.asarray(rollout.dones, dtype=bool)
    if not (r.shape == v.shape == done.shape):
        raise ContractError(f"rollout arrays disagree: rewards {r.shape}, values {v.shape}, dones {done.shape}")
    t_max = r.size
    adv = np.zeros(t_max)
    last = 0.0
    for t in range(t_max - 1, -1, -1):
        if done[t]:
            next_v = 0.0
            last = 0.0
        else:
            next_v = v[t + 1] if t + 1 < t_max else float(rollout.bootstrap_value)
        delta = r[t] + gamma * next_v - v[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + v


def ppo_clip_objective(log_prob_new, log_prob_old, advantages, eps_clip: float):
    """Per-sample clipped surrogate min(r*A, clip(r,1-e,1+e)*A).

    log_prob_new may be a Tensor (training) or an array (analysis);
    the old log-probs and advantages are always constants. The training
    loss is the negated batch mean of this objective.
    """
    lpn = log_prob_new if isinstance(log_prob_new, Tensor) else Tensor(np.asarray(log_prob_new, dtype=np.float64))
    lpo = np.asarray(log_prob_old, dtype=np.float64)
    adv = Tensor(np.asarray(advantages, dtype=np.float64))
    ratio = ad.exp(ad.sub(lpn, Tensor(lpo)))
    surr1 = ad.mul(ratio, adv)
    surr2 = ad.mul(ad.clip_value(ratio, 1.0 - eps_clip, 1.0 + eps_clip), adv)
    return ad.minimum(surr1, surr2)


def il_loss(goal_pred, goal_true, progress_pred, progress_true):
    """MSE(goal) + MSE(progress), each a mean over batch and dims."""
    gp = goal_pred if isinstance(goal_pred, Tensor) else Tensor(np.asarray(goal_pred, dtype=np.float64))
    pp = progress_pred if isinstance(progress_pred, Tensor) else Tensor(np.asarray(progress_pred, dtype=np.float64))
    gt = Tensor(np.asarray(goal_true, dtype=np.float64))
    pt = Tensor(np.asarray(progress_true, dtype=np.float64))
    return ad.add(ad.mse(gp, gt), ad.mse(pp, pt))


def value_loss(value_pred, value_true):
    vp = value_pred if isinstance(value_pred, Tensor) else Tensor(np.asarray(value_pred, dtype=np.float64))
    vt = Tensor(np.asarray(value_true, dtype=np.float64))
    return ad.mse(vp, vt)


def total_loss(l_il, l_v, l_rl, lambda_rl: float, rl_enabled: bool):
    """Piecewise blend: IL + value + weighted RL when enabled, else IL."""
    if not (0.0 <= lambda_rl <= 1.0):
        raise ConfigError(f"lambda_rl must satisfy λ_RL ∈ [0,1], got {lambda_rl}")

    def as_t(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(float(x)))

    if not rl_enabled:
        return as_t(l_il)
    return ad.add(ad.add(as_t(l_il), as_t(l_v)), ad.scale(as_t(l_rl), lambda_rl))


@dataclass
class LossReport:
    l_il: float
    l_v: float
    l_rl: float
    l_total: float
    entropy: float
    clip_fraction: float
    mean_ratio: float

    def check(self, lambda_rl: float, rl_enabled: bool):
        expected = (self.l_il + self.l_v + lambda_rl * self.l_rl) if rl_enabled else self.l_il
        if abs(self.l_total - expected) > 1e-12:
            raise ContractError(f"loss report inconsistent: total {self.l_total} vs composition {expected}")


# ------------------------------------------------------------- curve files

RL_CURVE_COLUMNS = ("update", "L_IL", "L_V", "L_RL", "L_total", "entropy",
                    "clip_fraction", "mean_return", "probe_SR")
IL_CURVE_COLUMNS = ("epoch", "L_IL", "L_V", "L_BC", "L_WP", "L_total")


def write_curve(path, rows, columns):
    """Curve rows -> CSV, atomically, with repr-exact floats."""
    from .teacher import _fmt  # shared cell formatting

    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


# --------------------------------------------------------- param bookkeeping


def _entries(model: Module, freeze=()):
    return [e for e in model.named_params() if not any(e[0].startswith(p) for p in freeze)]


def _snapshot(model: Module) -> dict:
    snap = {name: t.data.copy() for name, t, _ in model.named_params()}
    for name, arr in model.named_state():
        snap[name] = arr.copy()
    return snap


def _restore(model: Module, snap: dict):
    for name, t, _ in model.named_params():
        t.data[...] = snap[name]
    for name, arr in model.named_state():
        arr[...] = snap[name]


def reinit_value_head(model, rng: np.random.Generator):
    """Fresh fan-in init for the critic, in place (warm-start ablation)."""
    w = model.value_head.weight
    w.data[...] = fan_in_uniform(rng, w.data.shape, w.data.shape[0])
    model.value_head.bias.data[...] = 0.0


# ------------------------------------------------------------ stage 1 (IL)


@dataclass
class Stage1Config:
    epochs: int = 200
    lr: float = 1.5e-3
    weight_decay: float = 1e-4
    minibatch_size: int = 64
    # value targets are discounted returns, O(100); unit weight lets the
    # value MSE monopolize the clipped gradient through the shared trunk
    lambda_v: float = 0.05
    lambda_bc: float = 1.0
    lambda_wp: float = 1.0
    max_grad_norm: float = 5.0
    seed: int = 0
    early_stop_ratio: float | None = None  # stop when L_IL < ratio * epoch-1 L_IL
    freeze: tuple = ()


@dataclass
class Stage1Data:
    """Flattened demonstration tensors, ready for minibatching.

    Map snapshots are deduplicated: each sample carries an index into
    the stacked snapshot array, so a minibatch encodes each distinct
    map once and gathers rows.
    """

    patches: np.ndarray
    poses: np.ndarray
    ids: np.ndarray
    wps: np.ndarray
    snap_idx: np.ndarray
    snapshots: np.ndarray
    actions: np.ndarray
    wstar: np.ndarray
    progress: np.ndarray
    value: np.ndarray
    goal: np.ndarray

    @property
    def n(self) -> int:
        return len(self.actions)


def prepare_stage1_data(demos, model) -> Stage1Data:
    from .agent import descriptor_ids, pose_features, waypoint_context  # lazy, breaks the module cycle

    w, h, zm = model.width, model.height, model.z_max
    patches, poses, ids, wps, snap_idx = [], [], [], [], []
    actions, wstar, progress, value, goal = [], [], [], [], []
    snapshots = []
    for demo in demos:
        if not demo.maps:
            raise ContractError("demonstration lacks map snapshots (built with keep_maps=False?)")
        base = len(snapshots)
        snapshots.extend(m.grid for m in demo.maps)
        gx, gy = demo.episode.goal
        d_ids = descriptor_ids(demo.episode.descriptor)
        for st in demo.steps:
            if st.obs is None:
                raise ContractError("demonstration lacks observations (built with keep_obs=False?)")
            patches.append(st.obs.patch)
            poses.append(pose_features(st.state, w, h, zm))
            ids.append(d_ids)
            wps.append(waypoint_context(st.state, st.waypoint, w, h))
            snap_idx.append(base + st.snapshot_id)
            actions.append(st.expert_action)
            wstar.append((st.waypoint[0] / w, st.waypoint[1] / h))
            progress.append([st.progress])
            value.append([st.value])
            goal.append((gx / w, gy / h))
    return Stage1Data(
        patches=np.array(patches),
        poses=np.array(poses),
        ids=np.array(ids, dtype=np.int64),
        wps=np.array(wps),
        snap_idx=np.array(snap_idx, dtype=np.int64),
        snapshots=np.array(snapshots),
        actions=np.array(actions, dtype=np.int64),
        wstar=np.array(wstar),
        progress=np.array(progress),
        value=np.array(value),
        goal=np.array(goal),
    )


def _stage1_forward(model, data: Stage1Data, idx, mode: str):
    # encode each distinct snapshot once, then gather per-sample rows
    uniq, inv = np.unique(data.snap_idx[idx], return_inverse=True)
    feats = model.map_encoder(Tensor(data.snapshots[uniq]), mode)
    map_rows = ad.embedding(feats, inv)
    return model.forward_heads(map_rows, data.poses[idx], data.ids[idx], data.patches[idx], data.wps[idx])


@dataclass
class Stage1Result:
    curve: list
    aborted: bool
    epochs_run: int
    first_epoch_il: float
    final_il: float


def train_stage1(demos, model, cfg: Stage1Config) -> Stage1Result:
    """Supervised pass over the corpus: goal/progress regression, value
    regression, action cross-entropy, and waypoint regression, all
    teacher-forced. A non-finite loss or gradient rolls the model back
    to the end of the last clean epoch and aborts."""
    data = prepare_stage1_data(demos, model)
    entries = _entries(model, cfg.freeze)
    opt = AdamW(entries, lr=cfg.lr, weight_decay=cfg.weight_decay)
    mb = min(cfg.minibatch_size, data.n)
    curve = []
    aborted = False
    first_il = math.nan
    last_good = _snapshot(model)
    for epoch in range(cfg.epochs):
        perm = substream(cfg.seed, "stage1-shuffle", epoch).permutation(data.n)
        acc = {"L_IL": 0.0, "L_V": 0.0, "L_BC": 0.0, "L_WP": 0.0, "L_total": 0.0}
        n_mb = 0
        failed = False
        for lo in range(0, data.n - mb + 1, mb):
            idx = perm[lo : lo + mb]
            out = _stage1_forward(model, data, idx, "train")
            l_il = il_loss(out.goal, data.goal[idx], out.progress, data.progress[idx])
            l_v = value_loss(out.value, data.value[idx])
            l_bc = ad.neg(ad.mean_all(ad.pick(ad.log_softmax(out.logits), data.actions[idx])))
            l_wp = ad.mse(out.waypoint, Tensor(data.wstar[idx]))
            loss = ad.add(
                ad.add(l_il, ad.scale(l_v, cfg.lambda_v)),
                ad.add(ad.scale(l_bc, cfg.lambda_bc), ad.scale(l_wp, cfg.lambda_wp)),
            )
            if not np.isfinite(loss.item()):
                failed = True
                break
            model.zero_grad()
            ad.backward(loss)
            clip_grad_norm(entries, cfg.max_grad_norm)
            try:
                opt.step()
            except NumericsError:
                failed = True
                break
            acc["L_IL"] += l_il.item()
            acc["L_V"] += l_v.item()
            acc["L_BC"] += l_bc.item()
            acc["L_WP"] += l_wp.item()
            acc["L_total"] += loss.item()
            n_mb += 1
        if failed:
            _restore(model, last_good)
            aborted = True
            break
        row = {"epoch": epoch}
        row.update({k: v / max(n_mb, 1) for k, v in acc.items()})
        curve.append(row)
        if math.isnan(first_il):
            first_il = row["L_IL"]
        last_good = _snapshot(model)
        if cfg.early_stop_ratio is not None and row["L_IL"] < cfg.early_stop_ratio * first_il:
            break
    final_il = curve[-1]["L_IL"] if curve else math.nan
    return Stage1Result(curve=curve, aborted=aborted, epochs_run=len(curve),
                        first_epoch_il=first_il, final_il=final_il)


# --------------------------------------------------------- rollout collection


def _state_value(model, ctrl, world, state, episode) -> float:
    """Critic bootstrap at a state the buffer cut before acting on."""
    from .agent import descriptor_ids, pose_features, waypoint_context

    obs = render_observation(world, state)
    pose = pose_features(state, model.width, model.height, model.z_max)
    ids = descriptor_ids(episode.descriptor)
    wp = waypoint_context(state, ctrl.waypoint, model.width, model.height)
    with ad.no_grad():
        out = model.forward_heads(ctrl.map_feat[None], pose[None], ids[None], obs.patch[None], wp[None])
    return float(out.value.data[0, 0])


def collect_rollouts(
    model,
    worlds,
    tiers,
    reward_cfg: RewardConfig,
    n_steps: int,
    rng: np.random.Generator,
    flat: bool = False,
    encode_every_step: bool = False,
    use_prior: bool = True,
    r_prior: float = 12.0,
    max_steps=None,
    tier_brackets=None,
    avoid_blocked: bool = True,
    replan_patience: int = 16,
) -> Rollout:
    """Exactly n_steps of sampled experience across fresh episodes.

    An episode ending in stop, or hitting its step budget, closes with
    done=True (the budget is part of the task, so the horizon is
    genuinely finite there). Only a buffer cut mid-episode leaves
    done=False and records a critic bootstrap for the dangling tail.
    """
    from .agent import ControllerState, tiered_step

    patches, poses, idss, mfs, wpfs, masks = [], [], [], [], [], []
    acts, lps, vals, rews, dones = [], [], [], [], []
    episode_returns = []
    bootstrap = 0.0
    n = 0
    while n < n_steps:
        world = worlds[int(rng.integers(len(worlds)))]
        tier = tiers[int(rng.integers(len(tiers)))]
        ep = sample_episode(world, tier, rng, tiers=tier_brackets)
        nav = init_map(world, ep, r_prior=r_prior, use_prior=use_prior)
        ctrl = ControllerState()
        state = ep.start
        ep_ret = 0.0
        cap = int(max_steps if max_steps is not None else ep.max_steps)
        for t in range(cap):
            obs = render_observation(world, state)
            update_map(nav, state, obs)
            action, ctrl, rec = tiered_step(
                ctrl, model, world, state, nav, obs, ep.descriptor, "sample", rng,
                flat=flat, encode_every_step=encode_every_step, keep_feats=True,
                avoid_blocked=avoid_blocked, replan_patience=replan_patience,
            )
            nxt, _, terminal = env_step(world, state, Action(action))
            r = compute_reward(state, nxt, ep.goal, world, reward_cfg,
                               waypoint=rec.waypoint, stopped=terminal)
            f = rec.feats
            patches.append(f["patch"])
            poses.append(f["pose"])
            idss.append(f["desc_ids"])
            mfs.append(f["map_feat"])
            wpfs.append(f["wp_feats"])
            masks.append(f["mask"])
            acts.append(action)
            lps.append(rec.log_prob)
            vals.append(rec.value_hat)
            rews.append(r)
            dones.append(False)
            ep_ret += r
            state = nxt
            n += 1
            if terminal or t == cap - 1:
                dones[-1] = True
                episode_returns.append(ep_ret)
                break
            if n == n_steps:
                bootstrap = _state_value(model, ctrl, world, state, ep)
                break
    return Rollout(
        actions=np.array(acts, dtype=np.int64),
        log_probs_old=np.array(lps),
        values_old=np.array(vals),
        rewards=np.array(rews),
        dones=np.array(dones, dtype=bool),
        bootstrap_value=bootstrap,
        obs=np.array(patches),
        state_feats=np.array(poses),
        desc_feats=np.array(idss, dtype=np.int64),
        map_feats=np.array(mfs),
        wp_feats=np.array(wpfs),
        masks=np.array(masks, dtype=bool),
        episode_returns=episode_returns,
    )


def monte_carlo_targets(rollout: Rollout, gamma: float) -> np.ndarray:
    """Plain discounted returns per segment (= GAE(lambda=1) targets)."""
    r = np.asarray(rollout.rewards)
    done = np.asarray(rollout.dones, dtype=bool)
    out = np.zeros_like(r)
    acc = float(rollout.bootstrap_value)
    for t in range(r.size - 1, -1, -1):
        if done[t]:
            acc = 0.0
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def _forward_rollout(model, ro: Rollout, idx):
    # stored map features enter as constants: during PPO updates the
    # encoder trains only through the blended expert batches
    return model.forward_heads(ro.map_feats[idx], ro.state_feats[idx],
                               ro.desc_feats[idx], ro.obs[idx], ro.wp_feats[idx])


def _masked_log_probs(out_logits, ro: Rollout, idx):
    """Log-softmax restricted to the actions legal at collection time.

    The additive offset reproduces the controller's masked decode
    exactly, so a first-minibatch ratio is 1 to the last bit; masked
    entries carry zero probability and zero gradient.
    """
    from .agent import MASK_OFF

    if ro.masks is None:
        return ad.log_softmax(out_logits)
    off = np.where(ro.masks[idx], 0.0, MASK_OFF)
    return ad.log_softmax(ad.add(out_logits, Tensor(off)))


def critic_value_loss(model, rollout: Rollout, targets) -> float:
    """Mean squared critic error over a rollout, no training."""
    targets = np.asarray(targets, dtype=np.float64)
    total = 0.0
    t_max = len(rollout)
    for lo in range(0, t_max, 256):
        idx = np.arange(lo, min(lo + 256, t_max))
        with ad.no_grad():
            out = _forward_rollout(model, rollout, idx)
        total += float(((out.value.data[:, 0] - targets[idx]) ** 2).sum())
    return total / t_max


# ------------------------------------------------------------ stage 2 (PPO)


def _probe_success(traj, world, threshold_m: float) -> bool:
    gx, gy = traj.episode.goal
    ne = math.hypot(traj.final_state.x - gx, traj.final_state.y - gy) * world.cell_size
    return traj.stopped and ne <= threshold_m


def probe_success_rate(model, probe, threshold_m: float = 20.0, flat: bool = False,
                       use_prior: bool = True, r_prior: float = 12.0,
                       avoid_blocked: bool = True, replan_patience: int = 16) -> float:
    """Greedy SR over a fixed (world, episode) probe list."""
    from .agent import NeuralPolicy, run_episode

    wins = 0
    for world, ep in probe:
        policy = NeuralPolicy(model, flat=flat, avoid_blocked=avoid_blocked,
                              replan_patience=replan_patience)
        traj = run_episode(policy, world, ep, mode="greedy",
                           r_prior=r_prior, use_prior=use_prior)
        if _probe_success(traj, world, threshold_m):
            wins += 1
    return wins / len(probe)


@dataclass
class Stage2Result:
    curve: list
    aborted: bool
    updates_run: int
    env_steps: int
    first_minibatch_ratio: float
    final_probe_sr: float


def train_stage2(
    model,
    worlds,
    ppo_cfg: PPOConfig,
    reward_cfg: RewardConfig,
    corpus=None,
    seed: int = 0,
    tiers=("easy", "medium"),
    probe=None,
    probe_every: int = 1,
    probe_threshold_m: float = 20.0,
    expert_batch: int = 32,
    lambda_v: float = 0.05,  # same trunk cross-talk as stage 1
    freeze: tuple = (),
    flat: bool = False,
    use_prior: bool = True,
    r_prior: float = 12.0,
    curve_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    tier_brackets=None,
    avoid_blocked: bool = True,
    replan_patience: int = 16,
) -> Stage2Result:
    """On-policy fine-tuning blended with imitation per the piecewise
    total loss. The critic arrives warm: whatever the stage-1 value
    head learned is the starting critic.

    Each update collects a fixed-size rollout, normalizes advantages
    batch-wide, then runs minibatch epochs minimizing
    L_IL + L_V + lambda_rl * (policy + c_v*value - c_ent*entropy),
    the imitation terms coming from fresh expert batches. A non-finite
    loss or a ratio explosion rolls back to the last clean update and
    halves the learning rate once; the second blow-up aborts.
    """
    ppo_cfg.validate()
    reward_cfg.validate()
    entries = _entries(model, freeze)
    opt = AdamW(entries, lr=ppo_cfg.lr)
    data = prepare_stage1_data(corpus, model) if corpus else None
    rng_exp = substream(seed, "stage2-expert")
    curve = []
    aborted = False
    halved = False
    first_ratio = math.nan
    probe_sr = math.nan
    env_steps = 0
    last_good = _snapshot(model)
    for u in range(ppo_cfg.max_updates):
        rollout = collect_rollouts(
            model, worlds, tiers, reward_cfg, ppo_cfg.rollout_steps,
            substream(seed, "stage2-collect", u),
            flat=flat, use_prior=use_prior, r_prior=r_prior,
            tier_brackets=tier_brackets, avoid_blocked=avoid_blocked,
            replan_patience=replan_patience,
        )
        env_steps += len(rollout)
        adv, targets = compute_gae(rollout, ppo_cfg.gamma, ppo_cfg.lam_gae)
        adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
        t_max = len(rollout)
        mb = min(ppo_cfg.minibatch_size, t_max)
        sums = {"l_il": 0.0, "l_v": 0.0, "l_rl": 0.0, "entropy": 0.0}
        clip_hits = 0
        n_samples = 0
        n_mb = 0
        blew = False
        for e in range(ppo_cfg.epochs_per_update):
            perm = substream(seed, "stage2-shuffle", u, e).permutation(t_max)
            for lo in range(0, t_max - mb + 1, mb):
                idx = perm[lo : lo + mb]
                out = _forward_rollout(model, rollout, idx)
                lp_all = _masked_log_probs(out.logits, rollout, idx)
                lp_new = ad.pick(lp_all, rollout.actions[idx])
                obj = ppo_clip_objective(lp_new, rollout.log_probs_old[idx], adv_n[idx], ppo_cfg.eps_clip)
                ratio = np.exp(lp_new.data - rollout.log_probs_old[idx])
                if math.isnan(first_ratio):
                    first_ratio = float(ratio.mean())
                l_v_roll = value_loss(out.value, targets[idx][:, None])
                probs = ad.exp(lp_all)
                ent = ad.neg(ad.scale(ad.sum_all(ad.mul(probs, lp_all)), 1.0 / len(idx)))
                l_rl = ad.add(
                    ad.neg(ad.mean_all(obj)),
                    ad.sub(ad.scale(l_v_roll, ppo_cfg.value_weight), ad.scale(ent, ppo_cfg.entropy_weight)),
                )
                if data is not None:
                    eidx = rng_exp.integers(0, data.n, size=min(expert_batch, data.n))
                    eout = _stage1_forward(model, data, eidx, "train")
                    l_il = il_loss(eout.goal, data.goal[eidx], eout.progress, data.progress[eidx])
                    l_v = ad.scale(value_loss(eout.value, data.value[eidx]), lambda_v)
                else:
                    l_il = Tensor(np.zeros(()))
                    l_v = Tensor(np.zeros(()))
                l_total = total_loss(l_il, l_v, l_rl, ppo_cfg.lambda_rl, rl_enabled=True)
                if not (np.isfinite(l_total.item()) and np.all(np.isfinite(ratio)) and ratio.mean() < 100.0):
                    blew = True
                    break
                model.zero_grad()
                ad.backward(l_total)
                clip_grad_norm(entries, ppo_cfg.max_grad_norm)
                try:
                    opt.step()
                except NumericsError:
                    blew = True
                    break
                sums["l_il"] += l_il.item()
                sums["l_v"] += l_v.item()
                sums["l_rl"] += l_rl.item()
                sums["entropy"] += ent.item()
                clip_hits += int(np.sum(np.abs(ratio - 1.0) > ppo_cfg.eps_clip))
                n_samples += len(idx)
                n_mb += 1
            if blew:
                break
        if blew:
            _restore(model, last_good)
            if halved:
                aborted = True
                break
            halved = True
            opt = AdamW(entries, lr=opt.lr * 0.5)
            continue
        means = {k: v / max(n_mb, 1) for k, v in sums.items()}
        if probe is not None and u % probe_every == 0:
            probe_sr = probe_success_rate(model, probe, threshold_m=probe_threshold_m,
                                          flat=flat, use_prior=use_prior, r_prior=r_prior,
                                          avoid_blocked=avoid_blocked,
                                          replan_patience=replan_patience)
        report = LossReport(
            l_il=means["l_il"],
            l_v=means["l_v"],
            l_rl=means["l_rl"],
            l_total=means["l_il"] + means["l_v"] + ppo_cfg.lambda_rl * means["l_rl"],
            entropy=means["entropy"],
            clip_fraction=clip_hits / max(n_samples, 1),
            mean_ratio=first_ratio,
        )
        report.check(ppo_cfg.lambda_rl, rl_enabled=True)
        curve.append({
            "update": u,
            "L_IL": report.l_il,
            "L_V": report.l_v,
            "L_RL": report.l_rl,
            "L_total": report.l_total,
            "entropy": report.entropy,
            "clip_fraction": report.clip_fraction,
            "mean_return": float(np.mean(rollout.episode_returns)) if rollout.episode_returns else math.nan,
            "probe_SR": probe_sr,
        })
        last_good = _snapshot(model)
        if checkpoint_dir and checkpoint_every and (u + 1) % checkpoint_every == 0:
            from .agent import save_policy

            save_policy(os.path.join(checkpoint_dir, f"update_{u + 1:04d}.ckpt"), model,
                        meta={"stage": "rl", "update": str(u + 1)})
    if curve_path is not None:
        write_curve(curve_path, curve, RL_CURVE_COLUMNS)
    return Stage2Result(curve=curve, aborted=aborted, updates_run=len(curve),
                        env_steps=env_steps, first_minibatch_ratio=first_ratio,
                        final_probe_sr=probe_sr)


# ------------------------------------------------------- corridor sanity task


class CorridorNet(Module):
    """Two-logit actor plus critic on a four-number feature vector."""

    def __init__(self, rng, d_in: int = 4, hidden: int = 32):
        self.fc = Linear(rng, d_in, hidden)
        self.pi = Linear(rng, hidden, 2)
        self.v = Linear(rng, hidden, 1)

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        h = ad.relu(self.fc(x))
        return self.pi(h), self.v(h)


def _corridor_features(state: UavState, goal, world, cfg: RewardConfig) -> np.ndarray:
    d = distance_to_goal(state, goal, world.cell_size)
    span = world.width * world.cell_size
    return np.array([d / span, 1.0 if d < cfg.d_goal else 0.0, state.x / world.width, 1.0])


# corridor actions: logit 0 -> forward, logit 1 -> stop
_CORRIDOR_ACTIONS = (int(Action.FORWARD), int(Action.STOP))


@dataclass
class CorridorResult:
    reached: bool
    env_steps: int
    sr: float
    updates: int
    curve: list


def _corridor_probe_sr(net, world, goal, cfg, threshold_m: float, max_steps: int, starts) -> float:
    wins = 0
    mid = world.height // 2
    for x0 in starts:
        state = UavState(x=float(x0), y=float(mid), z=world.cruise_z, heading=0)
        stopped = False
        for _ in range(max_steps):
            with ad.no_grad():
                logits, _ = net(_corridor_features(state, goal, world, cfg)[None])
            a = int(np.argmax(logits.data[0]))
            state, _, terminal = env_step(world, state, Action(_CORRIDOR_ACTIONS[a]))
            if terminal:
                stopped = True
                break
        ne = math.hypot(state.x - goal[0], state.y - goal[1]) * world.cell_size
        if stopped and ne <= threshold_m:
            wins += 1
    return wins / len(starts)


def corridor_sanity(
    seed: int,
    max_env_steps: int = 20000,
    target_sr: float = 0.95,
    rollout_steps: int = 512,
    lr: float = 3e-3,
    hidden: int = 32,
    probe_n: int = 20,
    threshold_m: float = 20.0,
    gamma: float = 0.99,
    lam_gae: float = 0.95,
    eps_clip: float = 0.2,
    epochs: int = 4,
    minibatch: int = 64,
    value_weight: float = 0.5,
    entropy_weight: float = 0.03,  # 0.01 lets the stop logit die before it ever pays off
) -> CorridorResult:
    """Forward/stop policy gradient check on the walled strip.

    The net must learn to drive toward the beacon and stop inside the
    success radius. Returns as soon as the greedy probe clears the
    target rate, reporting how many environment steps that took.
    """
    world = corridor_world()
    goal = (world.width - 2, world.height // 2)
    cfg = RewardConfig(goal_bonus_on_stop=True)
    net = CorridorNet(substream(seed, "corridor-net"), hidden=hidden)
    entries = net.named_params()
    opt = AdamW(entries, lr=lr)
    rng = substream(seed, "corridor-env")
    mid = world.height // 2
    ep_cap = 60
    starts = np.unique(np.linspace(1, world.width - 6, probe_n).round().astype(int))
    env_steps = 0
    curve = []
    update = 0
    sr = _corridor_probe_sr(net, world, goal, cfg, threshold_m, ep_cap, starts)
    while env_steps < max_env_steps and sr < target_sr:
        feats, acts, lps, vals, rews, dones = [], [], [], [], [], []
        bootstrap = 0.0
        ep_returns = []
        n = 0
        while n < rollout_steps:
            state = UavState(x=float(rng.integers(1, world.width - 5)), y=float(mid),
                             z=world.cruise_z, heading=0)
            ep_ret = 0.0
            for t in range(ep_cap):
                phi = _corridor_features(state, goal, world, cfg)
                with ad.no_grad():
                    logits, v = net(phi[None])
                lp = ad.log_softmax(logits).data[0]
                a = int(rng.choice(2, p=np.exp(lp) / np.exp(lp).sum()))
                nxt, _, terminal = env_step(world, state, Action(_CORRIDOR_ACTIONS[a]))
                r = compute_reward(state, nxt, goal, world, cfg, stopped=terminal)
                feats.append(phi)
                acts.append(a)
                lps.append(float(lp[a]))
                vals.append(float(v.data[0, 0]))
                rews.append(r)
                dones.append(False)
                ep_ret += r
                state = nxt
                n += 1
                if terminal or t == ep_cap - 1:
                    dones[-1] = True
                    ep_returns.append(ep_ret)
                    break
                if n == rollout_steps:
                    with ad.no_grad():
                        _, vb = net(_corridor_features(state, goal, world, cfg)[None])
                    bootstrap = float(vb.data[0, 0])
                    break
        env_steps += n
        rollout = Rollout(
            actions=np.array(acts, dtype=np.int64),
            log_probs_old=np.array(lps),
            values_old=np.array(vals),
            rewards=np.array(rews),
            dones=np.array(dones, dtype=bool),
            bootstrap_value=bootstrap,
            state_feats=np.array(feats),
            episode_returns=ep_returns,
        )
        adv, targets = compute_gae(rollout, gamma, lam_gae)
        adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
        t_max = len(rollout)
        mb = min(minibatch, t_max)
        for e in range(epochs):
            perm = substream(seed, "corridor-shuffle", update, e).permutation(t_max)
            for lo in range(0, t_max - mb + 1, mb):
                idx = perm[lo : lo + mb]
                logits, v = net(rollout.state_feats[idx])
                lp_all = ad.log_softmax(logits)
                lp_new = ad.pick(lp_all, rollout.actions[idx])
                obj = ppo_clip_objective(lp_new, rollout.log_probs_old[idx], adv_n[idx], eps_clip)
                l_v = value_loss(v, targets[idx][:, None])
                probs = ad.exp(lp_all)
                ent = ad.neg(ad.scale(ad.sum_all(ad.mul(probs, lp_all)), 1.0 / len(idx)))
                loss = ad.add(ad.neg(ad.mean_all(obj)),
                              ad.sub(ad.scale(l_v, value_weight), ad.scale(ent, entropy_weight)))
                net.zero_grad()
                ad.backward(loss)
                clip_grad_norm(entries, 5.0)
                opt.step()
        update += 1
        sr = _corridor_probe_sr(net, world, goal, cfg, threshold_m, ep_cap, starts)
        curve.append({"update": update, "env_steps": env_steps, "sr": sr,
                      "mean_return": float(np.mean(ep_returns)) if ep_returns else math.nan})
    return CorridorResult(reached=sr >= target_sr, env_steps=env_steps, sr=sr,
                          updates=update, curve=curve)
