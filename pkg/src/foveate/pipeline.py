"""Experiment driver: two-stage training, the shuffled-groups study, and eval.

Every run writes four artifacts into its output directory: the resolved
config (config.txt), per-epoch metrics (metrics.jsonl), a final summary
(summary.json), and checkpoints in the FVE1 container. Runs are a pure
function of their config, seed included.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (LabeledDataset, epoch_order, load_idx, load_manifest,
                   make_cluttered_dataset, make_digit_dataset, mixup, one_hot)
from .grpo import grpo_train
from .model import EncoderConfig, IterativeEncoder
from .optim import AdamW, cosine_lr
from .policy import GazePolicy

__all__ = [
    "TrainingDiverged",
    "build_datasets",
    "pretrain_stage1",
    "train_stage2",
    "shuffled_vit_experiment",
    "train_vit_baseline",
    "evaluate_encoder",
    "overfit_probe",
]


class TrainingDiverged(RuntimeError):
    pass


# -- data -------------------------------------------------------------------------


def build_datasets(cfg: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    kind = cfg["data.kind"]
    seed = cfg["train.seed"]
    if kind == "cluttered":
        source = make_digit_dataset(np.random.default_rng((seed, 101)), 512,
                                    side=cfg["data.digit_side"])
        train = make_cluttered_dataset(
            np.random.default_rng((seed, 102)), cfg["data.train_size"],
            cfg["data.canvas"], source, cfg["data.distractors"], split="train")
        val = make_cluttered_dataset(
            np.random.default_rng((seed, 103)), cfg["data.val_size"],
            cfg["data.canvas"], source, cfg["data.distractors"], split="val")
        return train, val
    if kind == "idx":
        full = load_idx(cfg["data.idx_images"], cfg["data.idx_labels"])
    elif kind == "manifest":
        full = load_manifest(cfg["data.manifest"])
    else:
        raise ValueError(f"unknown data.kind {kind!r}")
    n_val = min(cfg["data.val_size"], len(full) // 5)
    train = LabeledDataset(full.images[:-n_val], full.labels[:-n_val],
                           full.num_classes, split="train")
    val = LabeledDataset(full.images[-n_val:], full.labels[-n_val:],
                         full.num_classes, split="val")
    return train, val


# -- shared helpers -----------------------------------------------------------------


def _write_run_header(cfg: RunConfig, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        f.write(cfg.echo())


def _episode_loss(encoder: IterativeEncoder, images: np.ndarray, targets: np.ndarray,
                  centers: np.ndarray):
    """Mean per-step cross-entropy over one batched episode (states detached)."""
    n = centers.shape[0]
    state = encoder.initial_state(len(images))
    total = None
    for t in range(n):
        tokens = encoder.glimpse_tokens(images, centers[t])
        state = encoder.encoder_step(state, tokens)
        step_loss = T.cross_entropy(encoder.task_head(state), targets)
        total = step_loss if total is None else total + step_loss
        state = state.detach()
    return total * (1.0 / n)


def _check_finite(loss, context: str):
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"non-finite loss during {context}")


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    topk = np.argsort(-logits, axis=-1)[:, :k]
    return (topk == labels[:, None]).any(axis=1)


def evaluate_encoder(encoder: IterativeEncoder, dataset: LabeledDataset,
                     policy_mode: str, n: int, seed: int,
                     policy: GazePolicy | None = None,
                     fixed_centers: np.ndarray | None = None,
                     batch: int = 256, subset: int | None = None) -> dict:
    """Per-step top-1/top-5 accuracy over the dataset.

    policy_mode: "random" draws uniform centers, "learned" takes the policy's
    deterministic action from the current state, "fixed" replays
    `fixed_centers` (n, 2) on every image. Deterministic given `seed`.
    """
    if policy_mode == "learned" and policy is None:
        raise ValueError("learned mode needs a policy")
    if policy_mode == "fixed" and (fixed_centers is None or len(fixed_centers) != n):
        raise ValueError("fixed mode needs (n, 2) centers")
    rng = np.random.default_rng((seed, 2001))
    count = len(dataset) if subset is None else min(subset, len(dataset))
    hits1 = np.zeros(n)
    hits5 = np.zeros(n)
    stacked = dataset.stacked()[:count]
    labels = dataset.labels[:count]
    with T.no_grad():
        for lo in range(0, count, batch):
            images = stacked[lo:lo + batch]
            labs = labels[lo:lo + batch]
            b = len(images)
            state = encoder.initial_state(b)
            for t in range(n):
                if policy_mode == "random":
                    centers = rng.uniform(0.0, 1.0, size=(b, 2))
                elif policy_mode == "fixed":
                    centers = np.broadcast_to(fixed_centers[t], (b, 2))
                else:
                    out = policy(state.values.detach())
                    comp = np.argmax(out.logits.data, axis=-1)
                    centers = out.means.data[np.arange(b), comp].astype(np.float64)
                tokens = encoder.glimpse_tokens(images, centers)
                state = encoder.encoder_step(state, tokens)
                logits = encoder.task_head(state).data
                hits1[t] += _topk_hits(logits, labs, 1).sum()
                hits5[t] += _topk_hits(logits, labs, 5).sum()
    return {
        "top1": (hits1 / count).tolist(),
        "top5": (hits5 / count).tolist(),
        "count": count,
        "mode": policy_mode,
    }


# -- stage 1 --------------------------------------------------------------------------


def pretrain_stage1(cfg: RunConfig, out_dir: str,
                    datasets: tuple[LabeledDataset, LabeledDataset] | None = None) -> dict:
    """Train encoder + task head with uniformly random gaze centers."""
    _write_run_header(cfg, out_dir)
    train, val = datasets if datasets is not None else build_datasets(cfg)
    seed = cfg["train.seed"]
    enc_rng = np.random.default_rng((seed, 201))
    encoder = IterativeEncoder(cfg.encoder_config(), enc_rng)
    params = {f"encoder.{k}": v for k, v in encoder.parameters().items()}
    opt = AdamW(encoder.parameters(), base_lr=cfg["train.base_lr"],
                beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                eps=cfg["train.eps"], weight_decay=cfg["train.weight_decay"])

    epochs = cfg["train.epochs"]
    batch_size = cfg["train.batch_size"]
    n = cfg["train.episode_len"]
    steps_per_epoch = max(1, len(train) // batch_size)
    total_steps = max(2, epochs * steps_per_epoch)
    warmup = max(1, int(cfg["train.warmup_frac"] * total_steps))
    stacked = train.stacked()
    targets_all = one_hot(train.labels, train.num_classes)
    ckpt_path = os.path.join(out_dir, "stage1.fve")

    step = 0
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        for epoch in range(epochs):
            order = epoch_order(len(train), seed, epoch)
            aug_rng = np.random.default_rng((seed, 301, epoch))
            gaze_rng = np.random.default_rng((seed, 302, epoch))
            epoch_loss = 0.0
            for bstart in range(0, steps_per_epoch * batch_size, batch_size):
                idx = order[bstart:bstart + batch_size]
                images = stacked[idx]
                targets = targets_all[idx]
                if cfg["train.mixup_alpha"] > 0 and len(images) >= 2:
                    images, targets = mixup(images, targets,
                                            cfg["train.mixup_alpha"], aug_rng)
                centers = gaze_rng.uniform(0.0, 1.0, size=(n, len(images), 2))
                loss = _episode_loss(encoder, images, targets, centers)
                _check_finite(loss, f"stage1 epoch {epoch}")
                loss.backward()
                lr = cosine_lr(min(step, total_steps), warmup, total_steps,
                               cfg["train.base_lr"])
                opt.step(lr)
                opt.zero_grad()
                epoch_loss += float(loss.data)
                step += 1
            val_metrics = evaluate_encoder(
                encoder, val, "random", n, seed=seed + epoch,
                batch=cfg["train.eval_batch"], subset=cfg["train.eval_subset"])
            save_checkpoint(params, ckpt_path)
            metrics.write(json.dumps({
                "phase": "stage1", "epoch": epoch,
                "train_loss": epoch_loss / steps_per_epoch,
                "lr": lr,
                "val_top1": val_metrics["top1"],
                "val_top5": val_metrics["top5"],
            }) + "\n")

    final = evaluate_encoder(encoder, val, "random", n, seed=seed,
                             batch=cfg["train.eval_batch"])
    summary = {
        "run": "stage1",
        "epochs": epochs,
        "per_step_top1": final["top1"],
        "per_step_top5": final["top5"],
        "checkpoint": ckpt_path,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


# -- stage 2 ---------------------------------------------------------------------------


def train_stage2(cfg: RunConfig, stage1_checkpoint: str, out_dir: str,
                 datasets: tuple[LabeledDataset, LabeledDataset] | None = None) -> dict:
    """Freeze the encoder from the stage-1 checkpoint and GRPO-train the policy."""
    _write_run_header(cfg, out_dir)
    train, val = datasets if datasets is not None else build_datasets(cfg)
    seed = cfg["train.seed"]
    values = load_checkpoint(stage1_checkpoint)
    encoder = IterativeEncoder(cfg.encoder_config(), np.random.default_rng((seed, 201)))
    _load_encoder(encoder, values)

    policy = GazePolicy(cfg.policy_config(), cfg["model.dim"],
                        np.random.default_rng((seed, 401)))
    gcfg = cfg.grpo_config()
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        grpo_train(train, encoder, policy, gcfg, seed=seed, metrics_out=metrics)

    ckpt_path = os.path.join(out_dir, "stage2.fve")
    combined = {f"encoder.{k}": v for k, v in encoder.parameters().items()}
    combined.update({f"policy.{k}": v for k, v in policy.parameters().items()})
    save_checkpoint(combined, ckpt_path)

    n = gcfg.episode_len
    learned = evaluate_encoder(encoder, val, "learned", n, seed=seed, policy=policy,
                               batch=cfg["train.eval_batch"])
    random_eval = evaluate_encoder(encoder, val, "random", n, seed=seed,
                                   batch=cfg["train.eval_batch"])
    summary = {
        "run": "stage2",
        "learned_top1": learned["top1"],
        "learned_top5": learned["top5"],
        "random_top1": random_eval["top1"],
        "random_top5": random_eval["top5"],
        "checkpoint": ckpt_path,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def _load_encoder(encoder: IterativeEncoder, values: dict):
    model_params = encoder.parameters()
    ckpt_keys = {k[len("encoder."):] for k in values if k.startswith("encoder.")}
    missing = sorted(set(model_params) - ckpt_keys)
    unexpected = sorted(ckpt_keys - set(model_params))
    shape_diffs = [
        f"{k}: checkpoint {values['encoder.' + k].shape} vs model {model_params[k].shape}"
        for k in model_params if k in ckpt_keys
        and values["encoder." + k].shape != model_params[k].shape
    ]
    if missing or unexpected or shape_diffs:
        raise ValueError(
            "checkpoint/model mismatch: "
            f"missing={missing} unexpected={unexpected} shapes={shape_diffs}"
        )
    encoder.load_parameters(values, prefix="encoder.")


# -- shuffled-groups experiment -----------------------------------------------------------


def _grid_tiles(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, _ = images.shape
    tiles = images.reshape(b, h // patch, patch, w // patch, patch, 3)
    return tiles.transpose(0, 1, 3, 2, 4, 5).reshape(
        b, (h // patch) * (w // patch), patch, patch, 3)


def _shuffled_episode_loss(encoder, tiles, coords, targets, perms, groups):
    b, n_tiles = perms.shape
    gsize = n_tiles // groups
    state = encoder.initial_state(b)
    total = None
    rows = np.arange(b)[:, None]
    for g in range(groups):
        idx = perms[:, g * gsize:(g + 1) * gsize]
        tok = encoder.tokenizer(tiles[rows, idx], coords[idx])
        state = encoder.encoder_step(state, tok)
        step_loss = T.cross_entropy(encoder.task_head(state), targets)
        total = step_loss if total is None else total + step_loss
        state = state.detach()
    return total * (1.0 / groups)


def _eval_shuffled(encoder, baseline, dataset, groups, seed, batch=256):
    from .patchify import grid_coords

    stacked = dataset.stacked()
    labels = dataset.labels
    patch = encoder.config.patch
    h, w = stacked.shape[1:3]
    coords = grid_coords(h, w, patch, encoder.config.max_z)
    n_tiles = coords.shape[0]
    gsize = n_tiles // groups
    rng = np.random.default_rng((seed, 2101))
    hits1 = np.zeros(groups)
    hits5 = np.zeros(groups)
    base1 = 0.0
    base5 = 0.0
    with T.no_grad():
        for lo in range(0, len(stacked), batch):
            images = stacked[lo:lo + batch]
            labs = labels[lo:lo + batch]
            b = len(images)
            tiles = _grid_tiles(images, patch)
            perms = np.stack([rng.permutation(n_tiles) for _ in range(b)])
            state = encoder.initial_state(b)
            rows = np.arange(b)[:, None]
            for g in range(groups):
                idx = perms[:, g * gsize:(g + 1) * gsize]
                tok = encoder.tokenizer(tiles[rows, idx], coords[idx])
                state = encoder.encoder_step(state, tok)
                logits = encoder.task_head(state).data
                hits1[g] += _topk_hits(logits, labs, 1).sum()
                hits5[g] += _topk_hits(logits, labs, 5).sum()
            blogits = baseline.baseline_forward(images).data
            base1 += _topk_hits(blogits, labs, 1).sum()
            base5 += _topk_hits(blogits, labs, 5).sum()
    n = len(stacked)
    return {
        "step_top1": (hits1 / n).tolist(),
        "step_top5": (hits5 / n).tolist(),
        "baseline_top1": base1 / n,
        "baseline_top5": base5 / n,
    }


def shuffled_vit_experiment(cfg: RunConfig, out_dir: str,
                            datasets=None) -> dict:
    """Iterative training over shuffled groups of fixed-grid patches.

    Each episode partitions the image's grid tiles into `train.episode_len`
    random groups; the encoder consumes one group per step. A full-attention
    twin (all tiles in a single pass) trains on the same batches for
    reference.
    """
    _write_run_header(cfg, out_dir)
    train, val = datasets if datasets is not None else build_datasets(cfg)
    seed = cfg["train.seed"]
    groups = cfg["train.episode_len"]
    enc_cfg = cfg.encoder_config()
    encoder = IterativeEncoder(enc_cfg, np.random.default_rng((seed, 201)))
    baseline = IterativeEncoder(enc_cfg, np.random.default_rng((seed, 202)))

    stacked = train.stacked()
    h, w = stacked.shape[1:3]
    patch = enc_cfg.patch
    if h % patch or w % patch:
        raise ValueError(f"images {h}x{w} not divisible by patch {patch}")
    from .patchify import grid_coords

    coords = grid_coords(h, w, patch, enc_cfg.max_z)
    n_tiles = coords.shape[0]
    if n_tiles % groups:
        raise ValueError(f"{n_tiles} tiles cannot split into {groups} equal groups")

    targets_all = one_hot(train.labels, train.num_classes)
    opt = AdamW(encoder.parameters(), base_lr=cfg["train.base_lr"],
                beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                eps=cfg["train.eps"], weight_decay=cfg["train.weight_decay"])
    opt_base = AdamW(baseline.parameters(), base_lr=cfg["train.base_lr"],
                     beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                     eps=cfg["train.eps"], weight_decay=cfg["train.weight_decay"])

    epochs = cfg["train.epochs"]
    batch_size = cfg["train.batch_size"]
    steps_per_epoch = max(1, len(train) // batch_size)
    total_steps = max(2, epochs * steps_per_epoch)
    warmup = max(1, int(cfg["train.warmup_frac"] * total_steps))

    step = 0
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        for epoch in range(epochs):
            order = epoch_order(len(train), seed, epoch)
            aug_rng = np.random.default_rng((seed, 301, epoch))
            group_rng = np.random.default_rng((seed, 303, epoch))
            epoch_loss = 0.0
            base_loss = 0.0
            for bstart in range(0, steps_per_epoch * batch_size, batch_size):
                idx = order[bstart:bstart + batch_size]
                images = stacked[idx]
                targets = targets_all[idx]
                if cfg["train.mixup_alpha"] > 0 and len(images) >= 2:
                    images, targets = mixup(images, targets,
                                            cfg["train.mixup_alpha"], aug_rng)
                tiles = _grid_tiles(images, patch)
                perms = np.stack([group_rng.permutation(n_tiles)
                                  for _ in range(len(images))])
                loss = _shuffled_episode_loss(encoder, tiles, coords, targets,
                                              perms, groups)
                _check_finite(loss, f"shuffled epoch {epoch}")
                loss.backward()
                lr = cosine_lr(min(step, total_steps), warmup, total_steps,
                               cfg["train.base_lr"])
                opt.step(lr)
                opt.zero_grad()

                bl = T.cross_entropy(baseline.baseline_forward(images), targets)
                _check_finite(bl, f"baseline epoch {epoch}")
                bl.backward()
                opt_base.step(lr)
                opt_base.zero_grad()

                epoch_loss += float(loss.data)
                base_loss += float(bl.data)
                step += 1
            metrics.write(json.dumps({
                "phase": "shuffled", "epoch": epoch,
                "train_loss": epoch_loss / steps_per_epoch,
                "baseline_loss": base_loss / steps_per_epoch,
                "lr": lr,
            }) + "\n")

    result = _eval_shuffled(encoder, baseline, val, groups, seed,
                            batch=cfg["train.eval_batch"])
    ckpt_path = os.path.join(out_dir, "shuffled.fve")
    combined = {f"encoder.{k}": v for k, v in encoder.parameters().items()}
    combined.update({f"baseline.{k}": v for k, v in baseline.parameters().items()})
    save_checkpoint(combined, ckpt_path)
    summary = {"run": "shuffled_vit", **result, "checkpoint": ckpt_path}
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def train_vit_baseline(cfg: RunConfig, out_dir: str, datasets=None) -> dict:
    """Single-pass full-attention training over all grid tiles."""
    _write_run_header(cfg, out_dir)
    train, val = datasets if datasets is not None else build_datasets(cfg)
    seed = cfg["train.seed"]
    encoder = IterativeEncoder(cfg.encoder_config(), np.random.default_rng((seed, 202)))
    stacked = train.stacked()
    targets_all = one_hot(train.labels, train.num_classes)
    opt = AdamW(encoder.parameters(), base_lr=cfg["train.base_lr"],
                beta1=cfg["train.beta1"], beta2=cfg["train.beta2"],
                eps=cfg["train.eps"], weight_decay=cfg["train.weight_decay"])
    epochs = cfg["train.epochs"]
    batch_size = cfg["train.batch_size"]
    steps_per_epoch = max(1, len(train) // batch_size)
    total_steps = max(2, epochs * steps_per_epoch)
    warmup = max(1, int(cfg["train.warmup_frac"] * total_steps))
    step = 0
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    with open(metrics_path, "w") as metrics:
        for epoch in range(epochs):
            order = epoch_order(len(train), seed, epoch)
            aug_rng = np.random.default_rng((seed, 301, epoch))
            epoch_loss = 0.0
            for bstart in range(0, steps_per_epoch * batch_size, batch_size):
                idx = order[bstart:bstart + batch_size]
                images = stacked[idx]
                targets = targets_all[idx]
                if cfg["train.mixup_alpha"] > 0 and len(images) >= 2:
                    images, targets = mixup(images, targets,
                                            cfg["train.mixup_alpha"], aug_rng)
                loss = T.cross_entropy(encoder.baseline_forward(images), targets)
                _check_finite(loss, f"vit baseline epoch {epoch}")
                loss.backward()
                lr = cosine_lr(min(step, total_steps), warmup, total_steps,
                               cfg["train.base_lr"])
                opt.step(lr)
                opt.zero_grad()
                epoch_loss += float(loss.data)
                step += 1
            metrics.write(json.dumps({
                "phase": "vit_baseline", "epoch": epoch,
                "train_loss": epoch_loss / steps_per_epoch, "lr": lr,
            }) + "\n")

    stacked_val = val.stacked()
    hits1 = hits5 = 0.0
    with T.no_grad():
        for lo in range(0, len(stacked_val), cfg["train.eval_batch"]):
            images = stacked_val[lo:lo + cfg["train.eval_batch"]]
            labs = val.labels[lo:lo + cfg["train.eval_batch"]]
            logits = encoder.baseline_forward(images).data
            hits1 += _topk_hits(logits, labs, 1).sum()
            hits5 += _topk_hits(logits, labs, 5).sum()
    ckpt_path = os.path.join(out_dir, "baseline.fve")
    save_checkpoint({f"encoder.{k}": v for k, v in encoder.parameters().items()},
                    ckpt_path)
    summary = {
        "run": "vit_baseline",
        "top1": hits1 / len(stacked_val),
        "top5": hits5 / len(stacked_val),
        "checkpoint": ckpt_path,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


# -- sanity probe ------------------------------------------------------------------------


def overfit_probe(enc_cfg: EncoderConfig, steps: int = 200, batch: int = 8,
                  episode_len: int = 4, seed: int = 0, lr: float = 3e-3,
                  canvas: int = 64) -> list[float]:
    """Drive one fixed batch toward zero loss; returns the loss trace."""
    rng = np.random.default_rng((seed, 901))
    source = make_digit_dataset(rng, 64)
    ds = make_cluttered_dataset(rng, batch, canvas, source, distractors=2)
    images = ds.stacked()
    targets = one_hot(ds.labels, ds.num_classes)
    encoder = IterativeEncoder(enc_cfg, np.random.default_rng((seed, 902)))
    opt = AdamW(encoder.parameters(), base_lr=lr, weight_decay=0.0)
    gaze_rng = np.random.default_rng((seed, 903))
    centers = gaze_rng.uniform(0.0, 1.0, size=(episode_len, batch, 2))
    losses = []
    for _ in range(steps):
        loss = _episode_loss(encoder, images, targets, centers)
        _check_finite(loss, "overfit probe")
        loss.backward()
        opt.step()
        opt.zero_grad()
        losses.append(float(loss.data))
    return losses
