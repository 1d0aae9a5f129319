"""Noise-prediction network with temporal and feature attention.

Layout inside the network is ``(batch, K, L, C)``: ``K = X*Y`` cells,
``L = L1 + L2`` window positions, ``C`` channels. Each residual block runs a
transformer over L for every cell, then over K for every position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..tensor_core import ParamStore, Tensor, nn
from ..tensor_core import tensor as T
from ..tensor_core.tensor import DimensionError


@dataclass
class DenoiserConfig:
    X: int = 10
    Y: int = 10
    L1: int = 12
    L2: int = 12
    channels: int = 64
    heads: int = 8
    layers: int = 4
    ff_dim: int = 64
    step_emb_dim: int = 128
    time_emb_dim: int = 128
    feature_emb_dim: int = 16
    extra_cond: int = 0
    T: int = 50
    seed: int = 0

    @property
    def K(self) -> int:
        return self.X * self.Y

    @property
    def in_channels(self) -> int:
        # noisy target, history values, history mask, DeepONet forecast, extras
        return 4 + self.extra_cond


class ResidualBlock:
    def __init__(self, store: ParamStore, name: str, cfg: DenoiserConfig, side_dim: int, rng):
        C = cfg.channels
        self.C = C
        self.step_proj = nn.Dense(store, f"{name}.step_proj", cfg.step_emb_dim, C, rng)
        self.time_layer = nn.TransformerLayer(store, f"{name}.time", C, cfg.heads, rng, cfg.ff_dim)
        self.feature_layer = nn.TransformerLayer(store, f"{name}.feature", C, cfg.heads, rng, cfg.ff_dim)
        self.mid_proj = nn.Dense(store, f"{name}.mid_proj", C, 2 * C, rng)
        self.cond_proj = nn.Dense(store, f"{name}.cond_proj", side_dim, 2 * C, rng)
        self.out_proj = nn.Dense(store, f"{name}.out_proj", C, 2 * C, rng)

    def side_term(self, time_emb, feat, is_target):
        """cond_proj applied to [time_emb | feat | is_target] without building the (K, L) concat."""
        W, b = self.cond_proj.W, self.cond_proj.b
        dt, df = time_emb.shape[-1], feat.shape[-1]
        t_part = T.dense_forward(Tensor(time_emb), W[:dt], b)                     # (L, 2C)
        t_part = t_part + T.dense_forward(Tensor(is_target[:, None]), W[dt + df:])
        f_part = T.dense_forward(feat, W[dt:dt + df])                            # (K, 2C)
        return f_part.reshape((feat.shape[0], 1, -1)) + t_part

    def __call__(self, x, step_emb, side, key_mask):
        Bn, K, L, C = x.shape
        y = x + self.step_proj(step_emb).reshape((Bn, 1, 1, C))
        y = self.time_layer(y.reshape((Bn * K, L, C)), key_mask=key_mask).reshape((Bn, K, L, C))
        y = y.transpose(0, 2, 1, 3).reshape((Bn * L, K, C))
        y = self.feature_layer(y).reshape((Bn, L, K, C)).transpose(0, 2, 1, 3)
        y = self.mid_proj(y) + self.side_term(*side)
        y = T.sigmoid(y[..., :C]) * T.tanh(y[..., C:])
        y = self.out_proj(y)
        return (x + y[..., :C]) * (1.0 / math.sqrt(2.0)), y[..., C:]


class Denoiser:
    def __init__(self, cfg: DenoiserConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        s = self.store = ParamStore()
        C = cfg.channels
        self.in_proj = nn.Dense(s, "in_proj", cfg.in_channels, C, rng)
        self.step_mlp1 = nn.Dense(s, "step_mlp1", cfg.step_emb_dim, cfg.step_emb_dim, rng)
        self.step_mlp2 = nn.Dense(s, "step_mlp2", cfg.step_emb_dim, cfg.step_emb_dim, rng)
        self.feature_emb = s.add("feature_emb", rng.normal(0, 1, size=(cfg.K, cfg.feature_emb_dim)))
        side_dim = cfg.time_emb_dim + cfg.feature_emb_dim + 1
        self.blocks = [ResidualBlock(s, f"block{i}", cfg, side_dim, rng) for i in range(cfg.layers)]
        self.skip_proj = nn.Dense(s, "skip_proj", C, C, rng)
        self.out_proj = nn.Dense(s, "out_proj", C, 1, rng, zero=True)

    def __call__(self, v_t, t, cond: np.ndarray, pad_mask: np.ndarray | None = None) -> Tensor:
        """Predict noise.

        v_t: (B, L2, X, Y) noisy target (Tensor or array); t: (B,) ints in 1..T;
        cond: (B, L, X, Y, in_channels - 1) conditioning channels (array or Tensor) aligned to the
        full window; pad_mask: optional (B, L) booleans, False on zero-padded
        positions, which are then excluded as attention keys.
        Returns (B, L2, X, Y).
        """
        c = self.cfg
        v_t = v_t if isinstance(v_t, Tensor) else Tensor(v_t)
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, float))
        Bn = v_t.shape[0]
        L = cond.shape[1]
        L1 = L - c.L2
        if v_t.shape[1:] != (c.L2, c.X, c.Y) or cond.shape[2:] != (c.X, c.Y, c.in_channels - 1) or L1 < 1:
            raise DimensionError(f"denoiser got target {v_t.shape} and cond {cond.shape} for config "
                                 f"L2={c.L2} X={c.X} Y={c.Y} channels={c.in_channels}")
        t = np.broadcast_to(np.asarray(t), (Bn,))
        # noisy target sits on the last L2 positions of the window
        noisy = T.concat([Tensor(np.zeros((Bn, L1, c.X, c.Y))), v_t], axis=1)
        inp = T.concat([noisy.reshape((Bn, L, c.X, c.Y, 1)), cond], axis=-1)
        inp = inp.reshape((Bn, L, c.K, c.in_channels)).transpose(0, 2, 1, 3)
        x = T.relu(self.in_proj(inp))                                     # (B, K, L, C)

        emb = nn.sinusoidal(t.astype(float), c.step_emb_dim)
        emb = T.silu(self.step_mlp2(T.silu(self.step_mlp1(Tensor(emb)))))

        pos = np.arange(L, dtype=float)
        # side information: window-position embedding, per-cell embedding, target flag
        side = (nn.sinusoidal(pos, c.time_emb_dim), self.feature_emb, (pos >= L1).astype(float))

        key_mask = None
        if pad_mask is not None:
            key_mask = np.repeat(np.asarray(pad_mask, bool).reshape(Bn, L), c.K, axis=0)

        skips = None
        for block in self.blocks:
            x, skip = block(x, emb, side, key_mask)
            skips = skip if skips is None else skips + skip
        h = T.relu(self.skip_proj(skips * (1.0 / math.sqrt(len(self.blocks)))))
        out = self.out_proj(h).reshape((Bn, c.K, L)).transpose(0, 2, 1)   # (B, L, K)
        return out[:, L1:].reshape((Bn, c.L2, c.X, c.Y))

    def records(self, prefix: str = "denoiser.") -> dict[str, np.ndarray]:
        return self.store.state_dict(prefix)

    def load_records(self, rec: dict[str, np.ndarray], prefix: str = "denoiser.") -> None:
        self.store.load_state_dict(rec, prefix)
