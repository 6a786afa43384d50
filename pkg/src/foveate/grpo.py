"""Group-relative policy optimization for the gaze policy (stage 2).

The encoder and task head stay frozen. For each image we roll out a group of
G stochastic episodes, score every action with one of two reward schemes,
normalize advantages across the group separately per time step, and ascend
the clipped-ratio surrogate for a fixed number of inner epochs before
collecting the next batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import IterativeEncoder
from .policy import GazePolicy, sample_action
from .tensor import DiffTensor

__all__ = [
    "Trace",
    "rollout_group",
    "advantage_terminal",
    "advantage_improvement",
    "group_normalize",
    "grpo_objective",
    "grpo_train",
    "GrpoConfig",
]


@dataclass
class Trace:
    """One episode's record: n actions bracketed by n+1 states and losses."""

    states: np.ndarray        # (n+1, N, D) — s_1 .. s_{n+1}, gradient-free
    actions: np.ndarray       # (n, 2)
    old_logprobs: np.ndarray  # (n,)
    losses: np.ndarray        # (n+1,) task loss after the head at each state
    preds: np.ndarray         # (n+1,) argmax class at each state
    final_logits: np.ndarray  # (K,)
    label: int

    def __post_init__(self):
        n = len(self.actions)
        if len(self.states) != n + 1 or len(self.losses) != n + 1 \
                or len(self.old_logprobs) != n:
            raise ValueError("trace lengths inconsistent")
        if (self.losses < 0).any():
            raise ValueError("task losses must be >= 0")


@dataclass
class GrpoConfig:
    group: int = 16
    episode_len: int = 8
    outer_steps: int = 40
    batch_images: int = 8
    inner_epochs: int = 8
    eps_clip: float = 0.2
    advantage: str = "improvement"   # or "terminal"
    lr: float = 1e-4
    weight_decay: float = 0.0


def rollout_group(image: np.ndarray, label: int, policy: GazePolicy,
                  encoder: IterativeEncoder, n: int, group: int,
                  rng: np.random.Generator) -> list[Trace]:
    """Collect G stochastic episodes on one image with the current policy.

    States and log-probs are recorded as plain arrays at collection time
    (this is the pi_old snapshot for the inner epochs). Each trace draws from
    its own generator spawned off `rng`, so the set is reproducible and
    order-independent.
    """
    if n < 1:
        raise ValueError("episode length must be >= 1")
    if group < 2:
        raise ValueError("a group needs at least 2 traces")
    trace_rngs = rng.spawn(group)
    k = encoder.config.num_classes
    target = np.zeros((group, k), dtype=np.float32)
    target[:, label] = 1.0
    images = np.broadcast_to(image, (group,) + image.shape)

    with T.no_grad():
        state = encoder.initial_state(group)
        states = [np.array(state.values.data, copy=True)]
        logits = encoder.task_head(state)
        losses = [np.array(T.cross_entropy(logits, target, reduction="none").data)]
        preds = [np.argmax(logits.data, axis=-1)]
        actions, old_lps = [], []
        for _ in range(n):
            out = policy(state.values)
            acts = np.empty((group, 2))
            for i in range(group):
                a = sample_action(out[i], trace_rngs[i])
                acts[i] = (a.x, a.y)
            old_lps.append(np.array(out.log_prob(acts).data, dtype=np.float64))
            actions.append(acts)
            tokens = encoder.glimpse_tokens(images, acts)
            state = encoder.encoder_step(state, tokens)
            logits = encoder.task_head(state)
            states.append(np.array(state.values.data, copy=True))
            losses.append(np.array(T.cross_entropy(logits, target, reduction="none").data))
            preds.append(np.argmax(logits.data, axis=-1))
        final_logits = np.array(logits.data, copy=True)

    states_arr = np.stack(states)       # (n+1, G, N, D)
    losses_arr = np.stack(losses)       # (n+1, G)
    preds_arr = np.stack(preds)
    actions_arr = np.stack(actions)     # (n, G, 2)
    old_arr = np.stack(old_lps)         # (n, G)
    return [
        Trace(
            states=states_arr[:, i],
            actions=actions_arr[:, i],
            old_logprobs=old_arr[:, i],
            losses=losses_arr[:, i],
            preds=preds_arr[:, i],
            final_logits=final_logits[i],
            label=label,
        )
        for i in range(group)
    ]


def advantage_terminal(traces: list[Trace]) -> np.ndarray:
    """(G, n) raw advantages: end-of-episode log-likelihood, shared per action."""
    n = len(traces[0].actions)
    terminal = np.array([-t.losses[-1] for t in traces])
    return np.repeat(terminal[:, None], n, axis=1)


def advantage_improvement(traces: list[Trace]) -> np.ndarray:
    """(G, n) raw advantages: per-action symmetric loss-improvement ratio."""
    rows = []
    for t in traces:
        l_now = t.losses[:-1]
        l_next = t.losses[1:]
        denom = l_now + l_next
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(denom > 0, (l_now - l_next) / np.where(denom > 0, denom, 1.0), 0.0)
        rows.append(ratio)
    return np.stack(rows)


def group_normalize(raw: np.ndarray, degenerate_eps: float = 1e-8) -> np.ndarray:
    """Normalize advantages across the group, separately per time step.

    Uses the population standard deviation. A step where every trace got the
    same reward carries no signal and normalizes to zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 2:
        raise ValueError(f"need a (G>=2, n) advantage table, got shape {raw.shape}")
    mean = raw.mean(axis=0, keepdims=True)
    std = raw.std(axis=0, keepdims=True)
    safe = np.where(std < degenerate_eps, 1.0, std)
    return np.where(std < degenerate_eps, 0.0, (raw - mean) / safe)


def grpo_objective(new_logprobs: DiffTensor, old_logprobs: np.ndarray,
                   advantages: np.ndarray, eps_clip: float) -> DiffTensor:
    """Negated clipped surrogate, averaged over traces and steps.

    loss = -(1/G) sum_i (1/n) sum_t min(r * A, clip(r, 1-eps, 1+eps) * A)
    with r = exp(new - old). Differentiable in `new_logprobs` only.
    """
    if not 0.0 < eps_clip < 1.0:
        raise ValueError(f"eps_clip must be in (0,1), got {eps_clip}")
    old = np.asarray(old_logprobs, dtype=new_logprobs.dtype)
    adv = np.asarray(advantages, dtype=new_logprobs.dtype)
    if new_logprobs.shape != old.shape or old.shape != adv.shape:
        raise T.ShapeError(
            f"shape mismatch: new {new_logprobs.shape}, old {old.shape}, adv {adv.shape}"
        )
    ratio = (new_logprobs - DiffTensor(old)).exp()
    bad = ~np.isfinite(ratio.data)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise FloatingPointError(f"non-finite likelihood ratio at trace {i}, step {t}")
    adv_t = DiffTensor(adv)
    surrogate = T.minimum(ratio * adv_t, T.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * adv_t)
    return -surrogate.mean()


def clip_fraction(ratio: np.ndarray, eps_clip: float) -> float:
    return float(((ratio < 1.0 - eps_clip) | (ratio > 1.0 + eps_clip)).mean())


def grpo_train(dataset, encoder: IterativeEncoder, policy: GazePolicy,
               cfg: GrpoConfig, seed: int, metrics_out=None) -> dict:
    """Stage-2 loop: rollout groups, normalize advantages, inner-epoch ascent.

    The encoder/task-head parameters are flagged frozen for the duration; the
    optimizer only ever sees policy parameters. Returns summary metrics.
    """
    from .optim import AdamW

    encoder.set_requires_grad(False)
    opt = AdamW(policy.parameters(), base_lr=cfg.lr, weight_decay=cfg.weight_decay)
    master = np.random.default_rng((seed, 1001))
    order_rng = np.random.default_rng((seed, 1002))
    n_img = len(dataset)
    records = []

    for outer in range(cfg.outer_steps):
        idxs = order_rng.choice(n_img, size=cfg.batch_images, replace=False)
        all_states, all_actions, all_old, all_adv = [], [], [], []
        acc_steps = None
        for idx in idxs:
            traces = rollout_group(dataset.images[idx], int(dataset.labels[idx]),
                                   policy, encoder, cfg.episode_len, cfg.group,
                                   master.spawn(1)[0])
            raw = (advantage_terminal(traces) if cfg.advantage == "terminal"
                   else advantage_improvement(traces))
            adv = group_normalize(raw)
            for t, trace in enumerate(traces):
                all_states.append(trace.states[:-1])   # s_1..s_n observe actions
                all_actions.append(trace.actions)
                all_old.append(trace.old_logprobs)
                all_adv.append(adv[t])
            correct = np.stack([t.preds == t.label for t in traces])  # (G, n+1)
            acc = correct.mean(axis=0)
            acc_steps = acc if acc_steps is None else acc_steps + acc
        acc_steps = acc_steps / len(idxs)

        n_steps = cfg.episode_len
        flat_states = np.concatenate(all_states)            # (R*n, N, D)
        flat_actions = np.concatenate(all_actions)           # (R*n, 2)
        old = np.stack(all_old)                              # (R, n)
        adv = np.stack(all_adv)                              # (R, n)

        for inner in range(cfg.inner_epochs):
            out = policy(flat_states)
            new_lp = out.log_prob(flat_actions).reshape(old.shape)
            loss = grpo_objective(new_lp, old, adv, cfg.eps_clip)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(
                    f"non-finite GRPO loss at outer step {outer}, inner epoch {inner}"
                )
            ratio = np.exp(np.asarray(new_lp.data, dtype=np.float64) - old)
            loss.backward()
            opt.step()
            opt.zero_grad()
            rec = {
                "phase": "grpo",
                "outer_step": outer,
                "inner_epoch": inner,
                "objective": -float(loss.data),
                "mean_ratio": float(ratio.mean()),
                "clip_fraction": clip_fraction(ratio, cfg.eps_clip),
                "per_step_accuracy": [float(a) for a in acc_steps],
            }
            records.append(rec)
            if metrics_out is not None:
                metrics_out.write(json.dumps(rec) + "\n")

    return {
        "outer_steps": cfg.outer_steps,
        "records": len(records),
        "final_per_step_accuracy": records[-1]["per_step_accuracy"] if records else [],
    }
