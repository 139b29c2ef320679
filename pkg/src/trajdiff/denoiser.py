"""Conditioned diffusion Transformer that predicts the clean path.

Path waypoints become tokens; each block runs self-attention over them,
cross-attention into BEV and context tokens, and a feed-forward layer, all
pre-normalized with residual connections. The four ablation switches are
``use_tse`` (timestep embedding), ``use_caf`` (cross-attention fusion; when off,
the mean condition token is added instead), ``use_cap`` (context average
pooling) and ``use_bfc`` (BEV block pooling before projection).

Gradients are computed by hand (see ``trajdiff.nn``) in float64.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .diffusion import (
    DiffusionSchedule,
    Standardizer,
    TrainingExample,
    make_schedule,
    reverse_time_to_timestep,
)
from .errors import ArtifactError, ConfigError, TrainingError
from .proposer import ContextEmbedding
from .scene import BevGrid, Path

ARTIFACT_MAGIC = b"TRAJDIFF"
ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    bev_tokens: tuple[int, int] = (8, 8)
    use_tse: bool = True
    use_caf: bool = True
    use_cap: bool = True
    use_bfc: bool = True
    bev_channels: int = 6
    horizon: int = 6
    ff_mult: int = 4

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"denoiser.d_model must be positive and even, got {self.d_model}")
        if self.heads <= 0 or self.d_model % self.heads:
            raise ConfigError(f"denoiser.d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.layers < 0:
            raise ConfigError("denoiser.layers must be >= 0")
        if min(self.bev_tokens) < 1:
            raise ConfigError(f"denoiser.bev_tokens must be positive, got {self.bev_tokens}")
        if self.bev_channels < 1 or self.horizon < 1 or self.ff_mult < 1:
            raise ConfigError("denoiser.bev_channels, horizon and ff_mult must be >= 1")

    def flags(self) -> dict:
        return {"TSE": self.use_tse, "CAF": self.use_caf, "CAP": self.use_cap, "BFC": self.use_bfc}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bev_tokens"] = list(self.bev_tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DenoiserConfig:
        d = dict(d)
        if "bev_tokens" in d:
            d["bev_tokens"] = tuple(int(v) for v in d["bev_tokens"])
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    waypoint_mse: float
    cumsum_mse: float

    @property
    def total(self) -> float:
        return self.waypoint_mse + self.cumsum_mse


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    steps: int = 2000
    lr_schedule: str = "constant"  # or "cosine"
    log_every: int = 1

    def validate(self) -> None:
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0 or self.log_every < 1:
            raise ConfigError("optimizer needs lr >= 0, batch_size >= 1, steps >= 0, log_every >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"optimizer.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "cosine" and self.steps > 0:
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.steps))
        return self.lr


# --------------------------------------------------------------------------- fixed encodings

def embed_timestep(t, d_model: int) -> np.ndarray:
    """Sinusoidal embedding; component 2k is sin(t / 10000^(2k/d)), 2k+1 the matching cos.

    Accepts a scalar (returns ``(d,)``) or an array of shape ``(B,)`` (returns ``(B, d)``).
    """
    if d_model <= 0 or d_model % 2:
        raise ConfigError(f"timestep embedding needs an even d_model, got {d_model}")
    t_arr = np.asarray(t, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (np.arange(0, d_model, 2) / d_model)
    ang = t_arr[..., None] * freq
    out = np.empty(t_arr.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _position_code_2d(xy: np.ndarray, d_model: int) -> np.ndarray:
    """Sinusoidal code of metric cell centres, wavelengths 2 m to 128 m, half the channels per axis."""
    quarter = d_model // 4
    if quarter == 0:
        return np.zeros((xy.shape[0], d_model))
    wavelengths = 2.0 * 64.0 ** (np.arange(quarter) / max(quarter - 1, 1))
    omega = 2 * math.pi / wavelengths
    parts = []
    for axis in range(2):
        ang = xy[:, axis:axis + 1] * omega
        parts += [np.sin(ang), np.cos(ang)]
    code = np.concatenate(parts, axis=1)
    return np.pad(code, ((0, 0), (0, d_model - code.shape[1])))


def _token_grid(grid: BevGrid, config: DenoiserConfig) -> tuple[int, int]:
    H, W = grid.height, grid.width
    if not config.use_bfc:
        return H, W
    th, tw = config.bev_tokens
    if th > H or tw > W or H % th or W % tw:
        raise ConfigError(f"BEV token grid {th}x{tw} must divide the {H}x{W} BEV grid")
    return th, tw


def compress_bev(grid: BevGrid, config: DenoiserConfig) -> np.ndarray:
    """Pooled BEV cells as ``(tokens, C)`` features, before the learned projection.

    With ``use_bfc`` each channel is block-averaged down to ``bev_tokens``;
    otherwise every original cell becomes a token. Tokens are in row-major order.
    """
    th, tw = _token_grid(grid, config)
    C, H, W = grid.data.shape
    pooled = grid.data.reshape(C, th, H // th, tw, W // tw).mean(axis=(2, 4))
    return pooled.reshape(C, th * tw).T.copy()


def bev_positions(grid: BevGrid, config: DenoiserConfig) -> np.ndarray:
    """Metric ego-frame centres ``(tokens, 2)`` of the pooled BEV cells."""
    th, tw = _token_grid(grid, config)
    H, W, res = grid.height, grid.width, grid.resolution
    xs = (np.arange(th) + 0.5) * (H / th) * res - 0.5 * H * res
    ys = (np.arange(tw) + 0.5) * (W / tw) * res - 0.5 * W * res
    return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)


def pool_context(tokens: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Mean over the token axis when ``use_cap``, otherwise the tokens unchanged."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if config.use_cap:
        return tokens.mean(axis=0, keepdims=True)
    return tokens


# --------------------------------------------------------------------------- batches

@dataclass
class Condition:
    """Per-scenario conditioning inputs that do not depend on the model parameters."""

    bev: np.ndarray  # (m_bev, C) pooled features
    bev_pos: np.ndarray  # (m_bev, d) fixed positional code
    ctx: np.ndarray  # (m_ctx, d) context tokens after optional pooling


@dataclass
class Batch:
    z: np.ndarray  # (B, n, 2) standardized noisy paths
    bev: np.ndarray  # (B, m_bev, C)
    bev_pos: np.ndarray  # (m_bev, d)
    ctx: np.ndarray  # (B, m_ctx, d) zero-padded
    ctx_mask: np.ndarray  # (B, m_ctx) bool
    timestep: np.ndarray  # (B,) value fed to the timestep embedding
    target: np.ndarray | None = None  # (B, n, 2) clean paths in meters


def stack_conditions(conds: Sequence[Condition], z: np.ndarray, timestep: np.ndarray,
                     target: np.ndarray | None = None) -> Batch:
    B = len(conds)
    m_ctx = max(c.ctx.shape[0] for c in conds)
    d = conds[0].ctx.shape[1]
    ctx = np.zeros((B, m_ctx, d))
    mask = np.zeros((B, m_ctx), dtype=bool)
    for b, c in enumerate(conds):
        ctx[b, :c.ctx.shape[0]] = c.ctx
        mask[b, :c.ctx.shape[0]] = True
    return Batch(z, np.stack([c.bev for c in conds]), conds[0].bev_pos, ctx, mask,
                 np.asarray(timestep, dtype=np.float64), target)


def build_layout(config: DenoiserConfig) -> nn.ParamLayout:
    d, C, f = config.d_model, config.bev_channels, config.ff_mult * config.d_model
    lay = nn.ParamLayout()
    lay.add("in.W", 2, d)
    lay.add("in.b", d)
    if config.use_tse:
        lay.add("time.W", d, d)
        lay.add("time.b", d)
    lay.add("bev.W", C, d)
    lay.add("bev.b", d)
    lay.add("ctx.W", d, d)
    lay.add("ctx.b", d)
    for l in range(config.layers):
        pre = f"blocks.{l}"
        lay.add(f"{pre}.ln1.g", d)
        lay.add(f"{pre}.ln1.b", d)
        for name in ("q", "k", "v", "o"):
            lay.add(f"{pre}.self.W{name}", d, d)
            lay.add(f"{pre}.self.b{name}", d)
        if config.use_caf:
            lay.add(f"{pre}.ln2.g", d)
            lay.add(f"{pre}.ln2.b", d)
            for name in ("q", "k", "v", "o"):
                lay.add(f"{pre}.cross.W{name}", d, d)
                lay.add(f"{pre}.cross.b{name}", d)
        else:
            lay.add(f"{pre}.cond.W", d, d)
            lay.add(f"{pre}.cond.b", d)
        lay.add(f"{pre}.ln3.g", d)
        lay.add(f"{pre}.ln3.b", d)
        lay.add(f"{pre}.ff1.W", d, f)
        lay.add(f"{pre}.ff1.b", f)
        lay.add(f"{pre}.ff2.W", f, d)
        lay.add(f"{pre}.ff2.b", d)
    lay.add("final.g", d)
    lay.add("final.b", d)
    lay.add("head.W", d, 2)
    lay.add("head.b", 2)
    return lay


def init_params(config: DenoiserConfig, seed: int) -> np.ndarray:
    layout = build_layout(config)
    flat = np.zeros(layout.size)
    views = layout.views(flat)
    rng = np.random.default_rng(int(seed))
    residual_scale = 1.0 / math.sqrt(2.0 * max(config.layers, 1))
    for name, view in views.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            view[...] = 1.0
        elif leaf.startswith("W") and view.ndim == 2:
            std = 1.0 / math.sqrt(view.shape[0])
            if name.endswith(("Wo", "ff2.W", "cond.W")):
                std *= residual_scale
            if name == "head.W":
                std = 0.02
            view[...] = rng.normal(0.0, std, view.shape)
    return flat


@dataclass
class Denoiser:
    """Model parameters plus everything needed to run it on raw inputs.

    ``schedule`` and ``time_mapping`` decide how reverse-process times are fed to
    the timestep embedding at sampling time (see
    ``trajdiff.diffusion.reverse_time_to_timestep``).
    """

    config: DenoiserConfig
    params: np.ndarray
    standardizer: Standardizer = field(default_factory=Standardizer.identity)
    schedule: DiffusionSchedule = field(default_factory=make_schedule)
    schedule_args: tuple[int, float, float] = (100, 1e-4, 0.02)
    time_mapping: str = "matched"

    def __post_init__(self):
        self.config.validate()
        self.layout = build_layout(self.config)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} parameters, got {self.params.shape}")
        self._path_pos = embed_timestep(np.arange(self.config.horizon), self.config.d_model)
        self._pos_cache: dict = {}

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0, **kwargs) -> Denoiser:
        config.validate()
        return cls(config, init_params(config, seed), **kwargs)

    @property
    def parameter_count(self) -> int:
        return self.layout.size

    def copy(self) -> Denoiser:
        return replace(self, params=self.params.copy())

    # ------------------------------------------------------------------ conditioning

    def condition(self, bev: BevGrid, context: ContextEmbedding) -> Condition:
        if bev.channels != self.config.bev_channels:
            raise ConfigError(f"BEV has {bev.channels} channels, model expects {self.config.bev_channels}")
        if context.tokens.shape[1] != self.config.d_model:
            raise ConfigError(f"context tokens have dimension {context.tokens.shape[1]}, "
                              f"model expects {self.config.d_model}")
        key = (bev.height, bev.width, bev.resolution)
        if key not in self._pos_cache:
            self._pos_cache[key] = _position_code_2d(bev_positions(bev, self.config), self.config.d_model)
        return Condition(compress_bev(bev, self.config), self._pos_cache[key],
                         pool_context(context.tokens, self.config))

    def timestep_for(self, t_reverse: float) -> float:
        return reverse_time_to_timestep(t_reverse, self.schedule, self.time_mapping)

    # ------------------------------------------------------------------ forward / backward

    def forward(self, batch: Batch, params: np.ndarray | None = None):
        cfg = self.config
        P = self.layout.views(self.params if params is None else params)
        B, n, _ = batch.z.shape
        if n != cfg.horizon:
            raise ValueError(f"noisy path has {n} waypoints, model horizon is {cfg.horizon}")
        cache: dict = {"batch": batch, "P": P}

        h, _ = nn.linear(batch.z, P["in.W"], P["in.b"])
        h = h + self._path_pos[None]
        if cfg.use_tse:
            te = embed_timestep(batch.timestep, cfg.d_model)
            tp, _ = nn.linear(te, P["time.W"], P["time.b"])
            h = h + tp[:, None, :]
            cache["te"] = te

        bev_tok = batch.bev @ P["bev.W"] + P["bev.b"] + batch.bev_pos[None]
        ctx_tok = batch.ctx @ P["ctx.W"] + P["ctx.b"]
        cond = np.concatenate([bev_tok, ctx_tok], axis=1)
        cmask = np.concatenate([np.ones(batch.bev.shape[:2], dtype=bool), batch.ctx_mask], axis=1)
        cache["cond"], cache["cmask"] = cond, cmask
        if not cfg.use_caf:
            w = cmask / cmask.sum(axis=1, keepdims=True)
            cache["cbar_w"] = w
            cache["cbar"] = np.einsum("bm,bmd->bd", w, cond)

        blocks = []
        for l in range(cfg.layers):
            pre = f"blocks.{l}"
            bc: dict = {}
            a1, bc["ln1"] = nn.layer_norm(h, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
            sa, bc["self"] = nn.attention(a1, a1, self.layout.group(P, f"{pre}.self"), cfg.heads)
            h = h + sa
            if cfg.use_caf:
                a2, bc["ln2"] = nn.layer_norm(h, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
                ca, bc["cross"] = nn.attention(a2, cond, self.layout.group(P, f"{pre}.cross"), cfg.heads, cmask)
                h = h + ca
            else:
                cp, _ = nn.linear(cache["cbar"], P[f"{pre}.cond.W"], P[f"{pre}.cond.b"])
                h = h + cp[:, None, :]
            a3, bc["ln3"] = nn.layer_norm(h, P[f"{pre}.ln3.g"], P[f"{pre}.ln3.b"])
            f1, bc["ff1_in"] = nn.linear(a3, P[f"{pre}.ff1.W"], P[f"{pre}.ff1.b"])
            g, bc["gelu"] = nn.gelu(f1)
            f2, bc["ff2_in"] = nn.linear(g, P[f"{pre}.ff2.W"], P[f"{pre}.ff2.b"])
            h = h + f2
            blocks.append(bc)
        cache["blocks"] = blocks
        hf, cache["final"] = nn.layer_norm(h, P["final.g"], P["final.b"])
        out, cache["head_in"] = nn.linear(hf, P["head.W"], P["head.b"])
        return out, cache

    def backward(self, dout: np.ndarray, cache: dict) -> np.ndarray:
        cfg = self.config
        P = cache["P"]
        batch: Batch = cache["batch"]
        grad = np.zeros(self.layout.size)
        G = self.layout.views(grad)

        dh = nn.linear_backward(dout, cache["head_in"], P["head.W"], G["head.W"], G["head.b"])
        dh = nn.layer_norm_backward(dh, cache["final"], P["final.g"], G["final.g"], G["final.b"])
        dcond = np.zeros_like(cache["cond"])
        dcbar = np.zeros((dh.shape[0], cfg.d_model)) if not cfg.use_caf else None

        for l in reversed(range(cfg.layers)):
            pre = f"blocks.{l}"
            bc = cache["blocks"][l]
            dg = nn.linear_backward(dh, bc["ff2_in"], P[f"{pre}.ff2.W"], G[f"{pre}.ff2.W"], G[f"{pre}.ff2.b"])
            df1 = nn.gelu_backward(dg, bc["gelu"])
            da3 = nn.linear_backward(df1, bc["ff1_in"], P[f"{pre}.ff1.W"], G[f"{pre}.ff1.W"], G[f"{pre}.ff1.b"])
            dh = dh + nn.layer_norm_backward(da3, bc["ln3"], P[f"{pre}.ln3.g"], G[f"{pre}.ln3.g"], G[f"{pre}.ln3.b"])
            if cfg.use_caf:
                dq, dkv = nn.attention_backward(dh, bc["cross"], self.layout.group(P, f"{pre}.cross"),
                                                self.layout.group(G, f"{pre}.cross"), cfg.heads)
                dcond += dkv
                dh = dh + nn.layer_norm_backward(dq, bc["ln2"], P[f"{pre}.ln2.g"], G[f"{pre}.ln2.g"],
                                                 G[f"{pre}.ln2.b"])
            else:
                dcp = dh.sum(axis=1)
                dcbar += nn.linear_backward(dcp, cache["cbar"], P[f"{pre}.cond.W"], G[f"{pre}.cond.W"],
                                            G[f"{pre}.cond.b"])
            dq, dkv = nn.attention_backward(dh, bc["self"], self.layout.group(P, f"{pre}.self"),
                                            self.layout.group(G, f"{pre}.self"), cfg.heads)
            dh = dh + nn.layer_norm_backward(dq + dkv, bc["ln1"], P[f"{pre}.ln1.g"], G[f"{pre}.ln1.g"],
                                             G[f"{pre}.ln1.b"])

        if not cfg.use_caf:
            dcond += cache["cbar_w"][..., None] * dcbar[:, None, :]
        m_bev = batch.bev.shape[1]
        nn.linear_backward(dcond[:, :m_bev], batch.bev, P["bev.W"], G["bev.W"], G["bev.b"])
        nn.linear_backward(dcond[:, m_bev:], batch.ctx, P["ctx.W"], G["ctx.W"], G["ctx.b"])
        if cfg.use_tse:
            nn.linear_backward(dh.sum(axis=1), cache["te"], P["time.W"], G["time.W"], G["time.b"])
        nn.linear_backward(dh, batch.z, P["in.W"], G["in.W"], G["in.b"])
        return grad

    # ------------------------------------------------------------------ losses

    def loss_and_grad(self, batch: Batch, params: np.ndarray | None = None, need_grad: bool = True):
        out, cache = self.forward(batch, params)
        lb, dpred = path_loss(self.standardizer.inverse(out), batch.target, need_grad)
        if not need_grad:
            return lb, None
        return lb, self.backward(dpred * self.standardizer.std, cache)

    # ------------------------------------------------------------------ inference

    def predict(self, noisy: np.ndarray, conds: Sequence[Condition], timesteps) -> np.ndarray:
        """Batched prediction in standardized space."""
        batch = stack_conditions(conds, noisy, np.broadcast_to(np.asarray(timesteps, float), (len(conds),)))
        out, _ = self.forward(batch)
        return out

    def __call__(self, noisy: Path, bev: BevGrid, context: ContextEmbedding, t: float) -> Path:
        if noisy.n != self.config.horizon:
            raise ValueError(f"noisy path has {noisy.n} waypoints, model horizon is {self.config.horizon}")
        out = self.predict(noisy.waypoints[None], [self.condition(bev, context)], self.timestep_for(t))
        return Path(out[0], noisy.dt)


def path_loss(pred: np.ndarray, target: np.ndarray, need_grad: bool = True):
    """Waypoint MSE plus MSE of per-prefix cumulative sums, both over all ``B*n*2`` coordinates.

    Returns the breakdown and d(total)/d(pred).
    """
    diff = pred - target
    csum = np.cumsum(diff, axis=-2)
    count = diff.size
    lb = LossBreakdown(float(np.mean(diff * diff)), float(np.mean(csum * csum)))
    if not need_grad:
        return lb, None
    dcs = 2.0 * csum / count
    dcs_rev = np.flip(np.cumsum(np.flip(dcs, axis=-2), axis=-2), axis=-2)
    return lb, 2.0 * diff / count + dcs_rev


# --------------------------------------------------------------------------- training

class _ExampleTable:
    """Stacked arrays for a training set; conditions are shared per scenario."""

    def __init__(self, model: Denoiser, dataset: Sequence[TrainingExample]):
        st = model.standardizer
        self.z = np.stack([st.forward(ex.noised_path.waypoints) for ex in dataset])
        self.target = np.stack([ex.target.waypoints for ex in dataset])
        self.timestep = np.array([float(ex.timestep) for ex in dataset])
        self.ids = [ex.scenario_id for ex in dataset]
        index: dict = {}
        self.conds: list[Condition] = []
        self.cond_of = np.empty(len(dataset), dtype=np.int64)
        for k, ex in enumerate(dataset):
            key = (id(ex.bev), id(ex.context))
            if key not in index:
                index[key] = len(self.conds)
                self.conds.append(model.condition(ex.bev, ex.context))
            self.cond_of[k] = index[key]

    def __len__(self):
        return self.z.shape[0]

    def batch(self, idx: np.ndarray) -> Batch:
        return stack_conditions([self.conds[c] for c in self.cond_of[idx]], self.z[idx],
                                self.timestep[idx], self.target[idx])


def loss(model: Denoiser, example: TrainingExample) -> LossBreakdown:
    table = _ExampleTable(model, [example])
    lb, _ = model.loss_and_grad(table.batch(np.arange(1)), need_grad=False)
    return lb


def train(model: Denoiser, dataset: Sequence[TrainingExample], optimizer: OptimizerConfig | None = None,
          seed: int = 0, progress=None) -> tuple[Denoiser, list[tuple[int, float, float, float]]]:
    """Mini-batch Adam on the two-term path loss. Returns a new model and the loss curve.

    The curve has one row per logged step: ``(step, waypoint_mse, cumsum_mse, total)``,
    measured on that step's mini-batch before the update.
    """
    opt = optimizer or OptimizerConfig()
    opt.validate()
    if len(dataset) == 0:
        raise TrainingError("training set is empty")
    table = _ExampleTable(model, dataset)
    out = model.copy()
    adam = nn.Adam(out.parameter_count, opt.lr, opt.beta1, opt.beta2, opt.eps)
    rng = np.random.default_rng(int(seed))
    N = len(table)
    B = min(opt.batch_size, N)
    order = rng.permutation(N)
    cursor = 0
    curve = []
    for step in range(opt.steps):
        if cursor + B > N:
            order = rng.permutation(N)
            cursor = 0
        idx = np.sort(order[cursor:cursor + B])
        cursor += B
        lb, grad = out.loss_and_grad(table.batch(idx))
        if not (math.isfinite(lb.total) and np.all(np.isfinite(grad))):
            ids = sorted({table.ids[i] for i in idx})
            raise TrainingError(f"non-finite loss at step {step} (batch scenarios: {', '.join(ids[:8])}"
                                f"{' ...' if len(ids) > 8 else ''})")
        if step % opt.log_every == 0 or step == opt.steps - 1:
            curve.append((step, lb.waypoint_mse, lb.cumsum_mse, lb.total))
        adam.step(out.params, grad, opt.lr_at(step))
        if progress is not None:
            progress(step, lb)
    return out, curve


def evaluate_loss(model: Denoiser, dataset: Sequence[TrainingExample], batch_size: int = 256) -> LossBreakdown:
    """Loss over a whole dataset (means weighted by batch size)."""
    table = _ExampleTable(model, dataset)
    N = len(table)
    w = c = 0.0
    for start in range(0, N, batch_size):
        idx = np.arange(start, min(start + batch_size, N))
        lb, _ = model.loss_and_grad(table.batch(idx), need_grad=False)
        w += lb.waypoint_mse * idx.size
        c += lb.cumsum_mse * idx.size
    return LossBreakdown(w / N, c / N)


def write_loss_curve(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "waypoint_mse", "cumsum_mse", "total"])
        for step, w, c, t in curve:
            writer.writerow([step, repr(w), repr(c), repr(t)])


# --------------------------------------------------------------------------- gradient check

def random_batch(config: DenoiserConfig, rng: np.random.Generator, batch_size: int = 3,
                 grid_hw: tuple[int, int] = (64, 64), resolution: float = 0.5,
                 timestep_range: float = 100.0) -> tuple[list[Condition], Batch]:
    """Synthetic inputs with varied context lengths, for gradient checks and shape tests."""
    probe = Denoiser.create(config, 0)
    conds = []
    for _ in range(batch_size):
        bev = BevGrid(rng.random((config.bev_channels, *grid_hw)), resolution)
        ctx = ContextEmbedding(rng.standard_normal((int(rng.integers(1, 5)), config.d_model)))
        conds.append(probe.condition(bev, ctx))
    z = rng.standard_normal((batch_size, config.horizon, 2))
    target = rng.standard_normal((batch_size, config.horizon, 2)) * 2.0
    ts = rng.uniform(0, timestep_range, batch_size)
    return conds, stack_conditions(conds, z, ts, target)


def grad_check(config: DenoiserConfig, eps: float = 1e-5, n_params: int = 200, seed: int = 0,
               batch_size: int = 3, grid_hw: tuple[int, int] = (64, 64)) -> float:
    """Max relative error between analytic and central-difference gradients of the total loss.

    Parameters are randomized, gains and biases included. Relative error is
    ``|a - f| / max(|a|, |f|)``. Pairs where both values sit below the
    central-difference rounding floor ``10 * machine_eps * max(1, |loss|) / eps``
    are skipped: they are gradients that vanish identically (key biases under
    softmax shift invariance, inputs unused when ``layers == 0``) and carry no
    signal at that step size.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(int(seed))
    _, batch = random_batch(config, rng, batch_size, grid_hw)
    model = Denoiser.create(config, int(rng.integers(2**31)),
                            standardizer=Standardizer(0.3, -0.2, 1.7, 0.8))
    model.params = model.params + rng.normal(0.0, 0.1, model.parameter_count)
    base, analytic = model.loss_and_grad(batch)
    floor = 10 * np.finfo(np.float64).eps * max(1.0, abs(base.total)) / eps
    chosen = rng.choice(model.parameter_count, size=min(n_params, model.parameter_count), replace=False)
    worst = 0.0
    for i in chosen:
        p = model.params.copy()
        p[i] += eps
        up, _ = model.loss_and_grad(batch, p, need_grad=False)
        p[i] -= 2 * eps
        down, _ = model.loss_and_grad(batch, p, need_grad=False)
        fd = (up.total - down.total) / (2 * eps)
        scale = max(abs(fd), abs(analytic[i]))
        if scale < floor:
            continue
        worst = max(worst, abs(fd - analytic[i]) / scale)
    return worst


# --------------------------------------------------------------------------- artifact

def save_model(model: Denoiser, path) -> None:
    """Write ``MAGIC | u32 version | u32 header length | JSON header | float64 LE parameters``."""
    T, b0, b1 = model.schedule_args
    header = {
        "config": model.config.to_dict(),
        "standardizer": model.standardizer.to_dict(),
        "schedule": {"T": T, "beta_start": b0, "beta_end": b1},
        "time_mapping": model.time_mapping,
        "param_count": model.parameter_count,
        "dtype": "float64",
        "byte_order": "little",
        "layout": [[name, list(shape)] for name, (_, shape) in model.layout.entries.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<II", ARTIFACT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(model.params.astype("<f8").tobytes())


def load_model(path) -> Denoiser:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ArtifactError(f"cannot read model artifact {path}: {exc}") from None
    if raw[:len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
        raise ArtifactError(f"{path}: not a model artifact (bad magic)")
    off = len(ARTIFACT_MAGIC)
    if len(raw) < off + 8:
        raise ArtifactError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[off:off + 8])
    if version != ARTIFACT_VERSION:
        raise ArtifactError(f"{path}: artifact version {version}, expected {ARTIFACT_VERSION}")
    off += 8
    try:
        header = json.loads(raw[off:off + hlen])
        config = DenoiserConfig.from_dict(header["config"])
        sched = header["schedule"]
        args = (int(sched["T"]), float(sched["beta_start"]), float(sched["beta_end"]))
        standardizer = Standardizer.from_dict(header["standardizer"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactError(f"{path}: corrupt header ({exc})") from None
    params = np.frombuffer(raw[off + hlen:], dtype="<f8")
    if params.size != header.get("param_count") or params.size != build_layout(config).size:
        raise ArtifactError(f"{path}: parameter block has {params.size} values, "
                            f"header declares {header.get('param_count')}")
    return Denoiser(config, params.astype(np.float64), standardizer, make_schedule(*args), args,
                    header.get("time_mapping", "matched"))
