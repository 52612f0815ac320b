"""Spectrally normalized conditional MLP generator and discriminator.

Weights are stored ``(in_features, out_features)`` so a layer computes
``x @ W + b``.  Each normalized weight carries a persistent power-iteration
vector ``u`` of length ``in_features``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import projection_term

LOSSES = ("none", "acgan", "projgan", "ntxent", "pnca", "eq7", "2c", "2c-aps")
MODE_ALIASES = {"contra": "2c", "uncond": "none"}
# modes whose discriminator carries a projection head h
EMBEDDING_MODES = frozenset({"ntxent", "pnca", "eq7", "2c", "2c-aps"})
# modes that additionally learn a contrastive class table e(.)
CLASS_TABLE_MODES = frozenset({"pnca", "eq7", "2c"})
CHECKPOINT_FORMAT = 1
SIGMA_FLOOR = 1e-12


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in LOSSES:
        raise ValueError(f"unknown conditioning mode {mode!r}; valid: {', '.join(LOSSES)}")
    return mode


@dataclass
class ModelConfig:
    data_dim: int = 2
    num_classes: int = 8
    noise_dim: int = 8
    g_hidden: list[int] = field(default_factory=lambda: [64, 64])
    g_embed_dim: int = 16
    # generator class table N(0, std^2); discriminator tables keep 0.02
    g_embed_std: float = 1.0
    # "zero" starts the conditional scale/shift maps at 0 so the generator begins class-agnostic
    g_cond_init: str = "zero"
    d_hidden: list[int] = field(default_factory=lambda: [64, 64])
    proj_dim: int = 16
    proj_type: str = "linear"
    spectral_norm: bool = True
    sn_iters: int = 1

    def __post_init__(self) -> None:
        if self.g_cond_init not in ("orthogonal", "zero"):
            raise ValueError(f"g_cond_init must be 'orthogonal' or 'zero', got {self.g_cond_init!r}")
        if self.proj_type not in ("linear", "mlp"):
            raise ValueError(f"proj_type must be 'linear' or 'mlp', got {self.proj_type!r}")
        if self.num_classes < 1 or self.data_dim < 1 or self.noise_dim < 1:
            raise ValueError("model dimensions must be positive")
        if self.sn_iters < 1:
            raise ValueError("sn_iters must be >= 1")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(float(np.linalg.norm(x)), SIGMA_FLOOR)


def spectral_normalize(w: Tensor, u: np.ndarray, n_power_iters: int = 1) -> tuple[Tensor, np.ndarray, float]:
    """Divide ``w`` by its power-iteration estimate of the top singular value.

    Returns the normalized tensor, the refreshed ``u`` and ``sigma``.  The
    estimate is a constant for differentiation purposes.
    """
    if n_power_iters < 1:
        raise ValueError("n_power_iters must be >= 1")
    mat = w.data
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = None
    for _ in range(n_power_iters):
        v = _unit(mat.T @ u)
        u = _unit(mat @ v)
    sigma = float(u @ mat @ v)
    if sigma < SIGMA_FLOOR:
        warnings.warn("spectral_normalize: near-zero weight matrix, sigma floored", RuntimeWarning, stacklevel=2)
        sigma = SIGMA_FLOOR
    return ad.scale(w, 1.0 / sigma), u, sigma


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n_in >= n_out else q.T


class _Network:
    """Named parameter tensors plus spectral-norm state."""

    prefix = ""
    n_power_iters = 1

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.u: dict[str, np.ndarray] = {}
        self.last_sigmas: dict[str, float] = {}

    def _linear(self, rng, name: str, n_in: int, n_out: int, bias: bool = True, sn: bool = True) -> None:
        key = f"{self.prefix}{name}"
        self.params[f"{key}.w"] = ad.parameter(_orthogonal(rng, n_in, n_out), f"{key}.w")
        if bias:
            self.params[f"{key}.b"] = ad.parameter(np.zeros((1, n_out)), f"{key}.b")
        if sn:
            self.u[f"{key}.w"] = _unit(rng.standard_normal(n_in))

    def _table(self, rng, name: str, rows: int, cols: int, std: float = 0.02) -> None:
        key = f"{self.prefix}{name}"
        self.params[key] = ad.parameter(rng.normal(0.0, std, size=(rows, cols)), key)

    def effective_weights(
        self, update_u: bool = False, sigmas: dict[str, float] | None = None
    ) -> dict[str, Tensor]:
        """Parameter tensors with spectral normalization applied.

        ``sigmas`` freezes the divisors (used by gradient checks so that finite
        differences see the same constant-sigma map as backward).
        """
        out = dict(self.params)
        for name, u in self.u.items():
            if sigmas is not None:
                out[name] = ad.scale(self.params[name], 1.0 / sigmas[name])
                continue
            w_sn, u_new, sigma = spectral_normalize(self.params[name], u, self.n_power_iters)
            out[name] = w_sn
            self.last_sigmas[name] = sigma
            if update_u:
                self.u[name] = u_new
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], u: dict[str, np.ndarray] | None = None) -> None:
        for k, v in arrays.items():
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"{k}: shape {np.shape(v)} does not match {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
        if u is not None:
            for k, v in u.items():
                self.u[k] = np.array(v, dtype=np.float64)

    def weight_names(self) -> list[str]:
        return [k for k in self.params if k.endswith(".w")]


class GeneratorParams(_Network):
    """MLP generator with class-conditional scale/shift after each hidden layer."""

    prefix = "g."

    def __init__(self, cfg: ModelConfig, conditional: bool, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.conditional = conditional
        self.n_power_iters = cfg.sn_iters
        sn = cfg.spectral_norm
        if conditional:
            self._table(rng, "embed", cfg.num_classes, cfg.g_embed_dim, cfg.g_embed_std)
        width = cfg.noise_dim
        for i, h in enumerate(cfg.g_hidden):
            self._linear(rng, f"fc{i}", width, h, sn=sn)
            if conditional:
                self._linear(rng, f"fc{i}.gain", cfg.g_embed_dim, h, bias=False, sn=False)
                self._linear(rng, f"fc{i}.shift", cfg.g_embed_dim, h, bias=False, sn=False)
                if cfg.g_cond_init == "zero":
                    for part in ("gain", "shift"):
                        self.params[f"g.fc{i}.{part}.w"].data[:] = 0.0
            width = h
        self._linear(rng, "out", width, cfg.data_dim, sn=sn)

    def clone(self) -> "GeneratorParams":
        twin = object.__new__(GeneratorParams)
        _Network.__init__(twin)
        twin.cfg, twin.conditional, twin.n_power_iters = self.cfg, self.conditional, self.n_power_iters
        twin.params = {k: ad.parameter(v.data.copy(), k) for k, v in self.params.items()}
        twin.u = {k: v.copy() for k, v in self.u.items()}
        return twin


def generator_forward(
    gen: GeneratorParams,
    z,
    labels,
    *,
    weights: dict[str, Tensor] | None = None,
    update_u: bool = False,
) -> Tensor:
    """Map noise rows and labels to samples in (-1, 1)^data_dim."""
    z = z if isinstance(z, Tensor) else ad.constant(z)
    cfg = gen.cfg
    if z.shape[1] != cfg.noise_dim:
        raise ad.DimensionError(f"noise has {z.shape[1]} columns, generator expects {cfg.noise_dim}")
    labels = _check_labels(labels, z.shape[0], cfg.num_classes)
    w = weights if weights is not None else gen.effective_weights(update_u=update_u)
    h = z
    emb = ad.take_rows(w["g.embed"], labels) if gen.conditional else None
    for i in range(len(cfg.g_hidden)):
        h = ad.add_row_vector(ad.matmul(h, w[f"g.fc{i}.w"]), w[f"g.fc{i}.b"])
        if emb is not None:
            gain = ad.shift(ad.matmul(emb, w[f"g.fc{i}.gain.w"]), 1.0)
            h = ad.add(ad.mul(h, gain), ad.matmul(emb, w[f"g.fc{i}.shift.w"]))
        h = ad.relu(h)
    out = ad.add_row_vector(ad.matmul(h, w["g.out.w"]), w["g.out.b"])
    return ad.tanh(out)


class DiscriminatorParams(_Network):
    """Shared trunk S with adversarial head and mode-dependent conditioning heads."""

    prefix = "d."

    def __init__(self, cfg: ModelConfig, mode: str, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.mode = canonical_mode(mode)
        self.n_power_iters = cfg.sn_iters
        sn = cfg.spectral_norm
        width = cfg.data_dim
        for i, h in enumerate(cfg.d_hidden):
            self._linear(rng, f"trunk{i}", width, h, sn=sn)
            width = h
        self.k = width
        self._linear(rng, "adv", width, 1, sn=sn)
        if self.mode in EMBEDDING_MODES:
            if cfg.proj_type == "mlp":
                self._linear(rng, "proj0", width, width, sn=sn)
            self._linear(rng, "proj", width, cfg.proj_dim, sn=sn)
        if self.mode in CLASS_TABLE_MODES:
            self._table(rng, "class_embed", cfg.num_classes, cfg.proj_dim)
        if self.mode == "projgan":
            self._table(rng, "proj_embed", cfg.num_classes, width)
        if self.mode == "acgan":
            self._linear(rng, "cls", width, cfg.num_classes, sn=sn)

    @property
    def has_embedding(self) -> bool:
        return self.mode in EMBEDDING_MODES

    @property
    def class_table(self) -> Tensor | None:
        return self.params.get("d.class_embed")


@dataclass
class DiscOutput:
    adv_score: Tensor
    embedding: Tensor | None
    class_logits: Tensor | None
    trunk: Tensor


def discriminator_forward(
    disc: DiscriminatorParams,
    x,
    labels=None,
    mode: str | None = None,
    *,
    weights: dict[str, Tensor] | None = None,
    update_u: bool = False,
) -> DiscOutput:
    if mode is not None and canonical_mode(mode) != disc.mode:
        raise ValueError(f"discriminator was built for mode {disc.mode!r}, not {mode!r}")
    x = x if isinstance(x, Tensor) else ad.constant(x)
    cfg = disc.cfg
    if x.shape[1] != cfg.data_dim:
        raise ad.DimensionError(f"input has {x.shape[1]} columns, discriminator expects {cfg.data_dim}")
    w = weights if weights is not None else disc.effective_weights(update_u=update_u)
    h = x
    for i in range(len(cfg.d_hidden)):
        h = ad.leaky_relu(ad.add_row_vector(ad.matmul(h, w[f"d.trunk{i}.w"]), w[f"d.trunk{i}.b"]))
    trunk = h
    score = ad.add_row_vector(ad.matmul(trunk, w["d.adv.w"]), w["d.adv.b"])
    if disc.mode == "projgan":
        labels = _check_labels(labels, x.shape[0], cfg.num_classes)
        score = ad.add(score, projection_term(trunk, w["d.proj_embed"], labels))
    embedding = None
    if disc.has_embedding:
        z = trunk
        if cfg.proj_type == "mlp":
            z = ad.leaky_relu(ad.add_row_vector(ad.matmul(z, w["d.proj0.w"]), w["d.proj0.b"]))
        embedding = ad.l2_normalize_rows(ad.add_row_vector(ad.matmul(z, w["d.proj.w"]), w["d.proj.b"]))
    logits = None
    if disc.mode == "acgan":
        logits = ad.add_row_vector(ad.matmul(trunk, w["d.cls.w"]), w["d.cls.b"])
    return DiscOutput(score, embedding, logits, trunk)


def _check_labels(labels, m: int, n_classes: int) -> np.ndarray:
    if labels is None:
        raise ValueError("labels are required for this conditioning mode")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != m:
        raise ValueError(f"{m} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


@dataclass
class EmaShadow:
    """Exponential moving average of generator arrays."""

    params: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    decay: float = 0.9999
    start: int = 20_000

    @classmethod
    def from_generator(cls, gen: GeneratorParams, decay: float = 0.9999, start: int = 20_000) -> "EmaShadow":
        return cls(gen.arrays(), {k: v.copy() for k, v in gen.u.items()}, decay, start)

    def as_generator(self, template: GeneratorParams) -> GeneratorParams:
        gen = template.clone()
        gen.load_arrays(self.params, self.u)
        return gen


def ema_update(shadow: EmaShadow, live: GeneratorParams, iteration: int) -> EmaShadow:
    """Copy ``live`` into the shadow before ``shadow.start``, blend afterwards."""
    for k, t in live.params.items():
        if k not in shadow.params or shadow.params[k].shape != t.shape:
            raise ValueError(f"EMA shadow does not match live parameter {k}")
        if iteration < shadow.start:
            shadow.params[k] = t.data.copy()
        else:
            shadow.params[k] = shadow.decay * shadow.params[k] + (1.0 - shadow.decay) * t.data
    shadow.u = {k: v.copy() for k, v in live.u.items()}
    return shadow


# ---------------------------------------------------------------------------
# checkpoints


def _pack(arrays: dict[str, np.ndarray]) -> dict[str, Any]:
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()} for k, v in arrays.items()}


def _unpack(packed: dict[str, Any]) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in packed.items()}


def checkpoint_dict(
    gen: GeneratorParams,
    disc: DiscriminatorParams,
    ema: EmaShadow | None,
    config: dict[str, Any],
    iteration: int,
) -> dict[str, Any]:
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "config": config,
        "iteration": iteration,
        "mode": disc.mode,
        "generator": _pack(gen.arrays()),
        "discriminator": _pack(disc.arrays()),
        "u": _pack({**gen.u, **disc.u}),
        "ema": None,
    }
    if ema is not None:
        doc["ema"] = {"decay": ema.decay, "start": ema.start, "params": _pack(ema.params), "u": _pack(ema.u)}
    return doc


def save_checkpoint(path: str | Path, doc: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(
    path: str | Path, cfg: ModelConfig | None = None
) -> tuple[GeneratorParams, DiscriminatorParams, EmaShadow | None, dict[str, Any]]:
    """Rebuild networks from a checkpoint; ``cfg`` defaults to the echoed config."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    if cfg is None:
        cfg = ModelConfig(**doc["config"]["model"])
    rng = np.random.default_rng(0)
    mode = doc["mode"]
    gen = GeneratorParams(cfg, conditional=mode != "none", rng=rng)
    disc = DiscriminatorParams(cfg, mode, rng)
    u = _unpack(doc["u"])
    gen.load_arrays(_unpack(doc["generator"]), {k: v for k, v in u.items() if k.startswith("g.")})
    disc.load_arrays(_unpack(doc["discriminator"]), {k: v for k, v in u.items() if k.startswith("d.")})
    ema = None
    if doc.get("ema"):
        e = doc["ema"]
        ema = EmaShadow(_unpack(e["params"]), _unpack(e["u"]), e["decay"], e["start"])
    return gen, disc, ema, doc


def model_config_dict(cfg: ModelConfig) -> dict[str, Any]:
    return asdict(cfg)
