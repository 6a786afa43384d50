"""Iterative transformer with an evolving internal state.

The encoder never sees a whole image. Each step it receives the M tokens of
one glimpse together with its N state vectors, runs full self-attention over
all N+M tokens, then discards the transformed patch tokens and keeps the
evolved state. The state both accumulates evidence across glimpses and serves
as the observation for the gaze policy. Gradients never cross step
boundaries: the state is detached before it re-enters the next step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Attention, LayerNorm, Linear, Mlp, Module
from .patchify import GazeCenter, extract_multizoom_batch, grid_coords
from .tensor import DiffTensor

__all__ = ["EncoderConfig", "EncoderState", "IterativeEncoder", "StepOutput"]


@dataclass
class EncoderConfig:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    state_size: int = 8     # N state vectors
    patch: int = 16         # P, resampled patch side
    zooms: int = 8          # M patches per glimpse
    max_z: float = 4.0
    num_classes: int = 10
    mlp_ratio: float = 4.0
    pos_hidden: int = 64

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.state_size < 1 or self.zooms < 1:
            raise ValueError("state_size and zooms must be >= 1")


@dataclass
class EncoderState:
    """Batched internal state: (B, N, D) values plus the step index (1-based)."""

    values: DiffTensor
    step: int = 1

    def detach(self) -> "EncoderState":
        return EncoderState(self.values.detach(), self.step)


@dataclass
class StepOutput:
    state: EncoderState
    logits: DiffTensor
    loss: DiffTensor | None = None


class PosEmbed(Module):
    """MLP positional embedding over (x, y, z_norm), all inputs in [0, 1]."""

    def __init__(self, rng, hidden: int, dim: int, dtype=np.float32):
        self.fc1 = Linear(rng, 3, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype=dtype)

    def __call__(self, coords: np.ndarray) -> DiffTensor:
        coords = np.asarray(coords)
        if coords.min() < 0.0 or coords.max() > 1.0:
            raise ValueError(
                f"positional inputs must lie in [0,1], got range "
                f"[{coords.min():.4f}, {coords.max():.4f}]"
            )
        x = DiffTensor(coords.astype(self.fc1.w.dtype))
        return self.fc2(T.gelu(self.fc1(x)))


class Tokenizer(Module):
    """Flatten P x P x 3 patches, project to D, add the positional embedding."""

    def __init__(self, rng, patch: int, dim: int, pos_hidden: int, dtype=np.float32):
        self.patch = patch
        self.proj = Linear(rng, patch * patch * 3, dim, dtype=dtype)
        self.pos = PosEmbed(rng, pos_hidden, dim, dtype=dtype)

    def __call__(self, patches: np.ndarray, coords: np.ndarray) -> DiffTensor:
        patches = np.asarray(patches)
        p = self.patch
        if patches.shape[-3:] != (p, p, 3):
            raise ValueError(f"expected (...,{p},{p},3) patches, got {patches.shape}")
        flat = patches.reshape(patches.shape[:-3] + (p * p * 3,))
        x = DiffTensor(flat.astype(self.proj.w.dtype))
        return self.proj(x) + self.pos(coords)


class EncoderBlock(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = Attention(rng, dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio), dim, dtype=dtype)

    def __call__(self, x: DiffTensor) -> DiffTensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class IterativeEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        cfg = config
        self.config = cfg
        self.dtype = dtype
        self.tokenizer = Tokenizer(rng, cfg.patch, cfg.dim, cfg.pos_hidden, dtype=dtype)
        self.prompt = T.randn(rng, (cfg.state_size, cfg.dim), std=0.02,
                              requires_grad=True, dtype=dtype)
        self.blocks = [EncoderBlock(rng, cfg.dim, cfg.heads, cfg.mlp_ratio, dtype=dtype)
                       for _ in range(cfg.layers)]
        self.head_weights = DiffTensor(
            np.full((cfg.state_size,), 1.0 / cfg.state_size, dtype=dtype),
            requires_grad=True)
        self.head_mlp = Mlp(rng, cfg.dim, cfg.dim, cfg.num_classes, dtype=dtype)

    # -- state ------------------------------------------------------------

    def initial_state(self, batch: int) -> EncoderState:
        n, d = self.prompt.shape
        tiled = self.prompt.reshape(1, n, d) + T.zeros((batch, n, d), dtype=self.dtype)
        return EncoderState(tiled, step=1)

    # -- glimpse tokens -----------------------------------------------------

    def glimpse_tokens(self, images: np.ndarray, centers: np.ndarray) -> DiffTensor:
        """Extract + tokenize one glimpse per image: (B,H,W,3), (B,2) -> (B,M,D)."""
        cfg = self.config
        patches = extract_multizoom_batch(images, centers, cfg.patch, cfg.zooms, cfg.max_z)
        m = cfg.zooms
        z_norm = (np.linspace(0.0, 1.0, m) if cfg.max_z > 0 and m > 1 else np.zeros(m))
        coords = np.empty((len(images), m, 3))
        coords[:, :, 0] = np.asarray(centers)[:, 0:1]
        coords[:, :, 1] = np.asarray(centers)[:, 1:2]
        coords[:, :, 2] = z_norm[None, :]
        return self.tokenizer(patches, coords)

    def grid_tokens(self, images: np.ndarray) -> DiffTensor:
        """Tokenize every fixed-grid tile of same-sized images: -> (B, T, D)."""
        cfg = self.config
        b, h, w, _ = images.shape
        p = cfg.patch
        tiles = images.reshape(b, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
        tiles = tiles.reshape(b, (h // p) * (w // p), p, p, 3)
        coords = np.broadcast_to(grid_coords(h, w, p, cfg.max_z)[None],
                                 (b, tiles.shape[1], 3))
        return self.tokenizer(tiles, coords)

    # -- one iteration -------------------------------------------------------

    def encoder_step(self, state: EncoderState, tokens: DiffTensor) -> EncoderState:
        """Evolve the state with one glimpse; the patch tokens are discarded."""
        n = self.config.state_size
        vals = state.values
        if vals.ndim != 3 or tokens.ndim != 3 or vals.shape[0] != tokens.shape[0] \
                or vals.shape[2] != tokens.shape[2]:
            raise T.ShapeError(
                f"state {vals.shape} and tokens {tokens.shape} do not align"
            )
        x = T.concat([vals, tokens], axis=1)
        if self.blocks:
            # the incoming state re-enters every block at the state positions
            b, m = tokens.shape[0], tokens.shape[1]
            pad = T.zeros((b, m, self.config.dim), dtype=self.dtype)
            skip = T.concat([vals, pad], axis=1)
            for block in self.blocks:
                x = block(x + skip)
        return EncoderState(x[:, :n, :], step=state.step + 1)

    def task_head(self, state: EncoderState) -> DiffTensor:
        """Pool the N state vectors with learned weights, then MLP to K logits."""
        n = self.config.state_size
        pooled = self.head_weights.reshape(1, 1, n) @ state.values  # (B,1,D)
        pooled = pooled.reshape(state.values.shape[0], self.config.dim)
        return self.head_mlp(pooled)

    # -- episodes --------------------------------------------------------------

    def run_episode(self, image: np.ndarray, centers: list[GazeCenter],
                    label: int | None = None,
                    detach_between: bool = True) -> list[StepOutput]:
        """Single-image episode: one StepOutput per glimpse.

        With detach_between (training semantics), each step's state is
        detached before feeding the next step, so no gradient crosses the
        iteration boundary. The initial prompt state is *not* detached: the
        first step's loss is what trains it.
        """
        if not centers:
            raise ValueError("an episode needs at least one gaze center")
        images = image[None]
        state = self.initial_state(1)
        outputs = []
        target = None
        if label is not None:
            target = np.zeros((1, self.config.num_classes), dtype=np.float32)
            target[0, label] = 1.0
        for c in centers:
            tokens = self.glimpse_tokens(images, np.array([[c.x, c.y]]))
            state = self.encoder_step(state, tokens)
            logits = self.task_head(state)
            loss = T.cross_entropy(logits, target) if target is not None else None
            outputs.append(StepOutput(state=state, logits=logits, loss=loss))
            if detach_between:
                state = state.detach()
        return outputs

    def baseline_forward(self, images: np.ndarray) -> DiffTensor:
        """Full-attention reference: one pass over every grid tile at once."""
        tokens = self.grid_tokens(images)
        state = self.encoder_step(self.initial_state(len(images)), tokens)
        return self.task_head(state)
