"""Alternating discriminator/generator optimisation with a conditioning loss.

One outer iteration runs ``n_dis`` discriminator updates followed by a single
generator update.  Each update samples its own noise and fake labels; the
conditioning loss is evaluated on real samples in the discriminator update and
on generated samples in the generator update.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import LabeledDataset
from .evaluation import authenticity_accuracy, class_conditional_frechet, collapse_detector, spectral_trend
from .losses import EmbeddingBatch, acgan_aux_loss, loss_2c, loss_2c_aps, loss_eq7, nt_xent, proxy_nca
from .models import (
    DiscriminatorParams,
    EmaShadow,
    GeneratorParams,
    ModelConfig,
    canonical_mode,
    checkpoint_dict,
    discriminator_forward,
    ema_update,
    generator_forward,
    save_checkpoint,
)

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8
ADV_LOSSES = ("hinge", "alg1_literal")

# (alpha1, alpha2, beta1, beta2, n_dis)
PRESETS: dict[str, dict[str, float]] = {
    "A": dict(alpha1=0.0001, alpha2=0.0001, beta1=0.5, beta2=0.999, n_dis=2),
    "B": dict(alpha1=0.0001, alpha2=0.0001, beta1=0.5, beta2=0.999, n_dis=1),
    "C": dict(alpha1=0.0002, alpha2=0.0002, beta1=0.5, beta2=0.999, n_dis=1),
    "D": dict(alpha1=0.0002, alpha2=0.0002, beta1=0.5, beta2=0.999, n_dis=2),
    "E": dict(alpha1=0.0002, alpha2=0.0002, beta1=0.5, beta2=0.999, n_dis=5),
    "F": dict(alpha1=0.0004, alpha2=0.0001, beta1=0.0, beta2=0.999, n_dis=1),
}


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, iteration: int, reason: str):
        super().__init__(f"training aborted at iteration {iteration}: {reason}")
        self.iteration = iteration
        self.reason = reason


@dataclass
class EmaConfig:
    decay: float = 0.9999
    start: int = 20_000


@dataclass
class CrConfig:
    enabled: bool = False
    coefficient: float = 10.0
    jitter_sigma: float = 0.05


@dataclass
class TrainConfig:
    alpha1: float = 0.0002
    alpha2: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    temperature: float = 1.0
    n_dis: int = 5
    lam: float = 1.0
    loss: str = "2c"
    adv_loss: str = "hinge"
    iterations: int = 5000
    eval_interval: int = 500
    eval_samples_per_class: int = 256
    # Gaussian jitter for the augmented views used by ntxent and 2c-aps
    aug_sigma: float = 0.05
    seed: int = 0
    preset: str = "E"
    ema: EmaConfig = field(default_factory=EmaConfig)
    cr: CrConfig = field(default_factory=CrConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if not (self.alpha1 >= 0 and self.alpha2 >= 0):
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.n_dis < 1:
            raise ConfigError("n_dis must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.adv_loss not in ADV_LOSSES:
            raise ConfigError(f"adv_loss must be one of {ADV_LOSSES}, got {self.adv_loss!r}")
        if self.iterations < 1 or self.eval_interval < 1:
            raise ConfigError("iterations and eval_interval must be positive")
        if self.cr.jitter_sigma < 0:
            raise ConfigError("cr.jitter_sigma must be >= 0")
        try:
            self.loss = canonical_mode(self.loss)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; valid: {', '.join(PRESETS)}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            ema = EmaConfig(**doc.pop("ema", {}))
            cr = CrConfig(**doc.pop("cr", {}))
            model = ModelConfig(**doc.pop("model", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(**doc, ema=ema, cr=cr, model=model)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def apply_preset(config: TrainConfig, name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    return config.replace(preset=name, **PRESETS[name])


# ---------------------------------------------------------------------------
# optimiser and loss pieces


@dataclass
class AdamState:
    beta1: float
    beta2: float
    eps: float = ADAM_EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place.  Parameters without a gradient
    (no path to the objective) are left untouched."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise ad.NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)


def adv_d_loss(real_scores: Tensor, fake_scores: Tensor, kind: str = "hinge") -> Tensor:
    if real_scores.shape[0] != fake_scores.shape[0]:
        raise ad.DimensionError(f"real/fake score counts differ: {real_scores.shape} vs {fake_scores.shape}")
    if kind == "hinge":
        return ad.add(ad.mean(ad.relu(ad.shift(ad.scale(real_scores, -1.0), 1.0))), ad.mean(ad.relu(ad.shift(fake_scores, 1.0))))
    if kind == "alg1_literal":
        return ad.sub(ad.mean(fake_scores), ad.mean(real_scores))
    raise ConfigError(f"unknown adversarial loss {kind!r}")


def adv_g_loss(fake_scores: Tensor, kind: str = "hinge") -> Tensor:
    if kind not in ADV_LOSSES:
        raise ConfigError(f"unknown adversarial loss {kind!r}")
    return ad.scale(ad.mean(fake_scores), -1.0)


def consistency_regularization(
    disc: DiscriminatorParams,
    x,
    labels,
    jitter_sigma: float,
    rng: np.random.Generator,
    weights: dict[str, Tensor] | None = None,
) -> Tensor:
    """Mean squared change of the adversarial score under Gaussian input jitter."""
    if jitter_sigma < 0:
        raise ConfigError("jitter_sigma must be >= 0")
    x = x if isinstance(x, Tensor) else ad.constant(x)
    if jitter_sigma == 0:
        return ad.constant(0.0)
    noise = ad.constant(jitter_sigma * rng.standard_normal(x.shape))
    w = weights if weights is not None else disc.effective_weights()
    clean = discriminator_forward(disc, x, labels, weights=w).adv_score
    jittered = discriminator_forward(disc, ad.add(x, noise), labels, weights=w).adv_score
    diff = ad.sub(clean, jittered)
    return ad.mean(ad.mul(diff, diff))


def _interleave_index(m: int) -> np.ndarray:
    # rows [x_0..x_{m-1}, T(x_0)..T(x_{m-1})] -> x_0, T(x_0), x_1, T(x_1), ...
    return np.stack([np.arange(m), np.arange(m) + m], axis=1).reshape(-1)


def conditioning_loss(
    config: TrainConfig,
    disc: DiscriminatorParams,
    weights: dict[str, Tensor],
    x: Tensor,
    labels: np.ndarray,
    out,
    rng: np.random.Generator,
) -> Tensor | None:
    """The configured conditioning objective on one batch; ``None`` when the
    mode conditions only through the score (projgan) or not at all."""
    mode, t = config.loss, config.temperature
    if mode in ("none", "projgan"):
        return None
    if mode == "acgan":
        return acgan_aux_loss(out.class_logits, labels)
    if mode in ("2c", "eq7", "pnca"):
        batch = EmbeddingBatch(out.embedding, labels, disc.class_table if weights is None else weights["d.class_embed"])
        return {"2c": loss_2c, "eq7": loss_eq7, "pnca": proxy_nca}[mode](batch, t)
    noise = ad.constant(config.aug_sigma * rng.standard_normal(x.shape))
    augmented = discriminator_forward(disc, ad.add(x, noise), labels, weights=weights).embedding
    if mode == "ntxent":
        pairs = ad.take_rows(ad.concat_rows(out.embedding, augmented), _interleave_index(x.shape[0]))
        return nt_xent(pairs, t)
    if mode == "2c-aps":
        return loss_2c_aps(EmbeddingBatch(out.embedding, labels, None), augmented, t)
    raise ConfigError(f"unhandled conditioning mode {mode!r}")


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainHistory:
    records: list[dict[str, Any]] = field(default_factory=list)

    def append(self, record: dict[str, Any]) -> None:
        if self.records and record["iteration"] <= self.records[-1]["iteration"]:
            raise ValueError("history iterations must be strictly increasing")
        self.records.append(record)

    @property
    def best(self) -> dict[str, Any] | None:
        if not self.records:
            return None
        return min(self.records, key=lambda r: r["class_frechet"])

    def __len__(self) -> int:
        return len(self.records)


# fields written to metrics.jsonl; wallclock stays in memory so reruns are byte-identical
JSONL_FIELDS = (
    "iteration",
    "L_D",
    "L_G",
    "L_C_real",
    "L_C_fake",
    "frechet",
    "class_frechet",
    "per_class_frechet",
    "acc_train",
    "acc_val",
    "acc_fake",
    "gap",
    "sigmas",
    "collapse_flag",
)


class Trainer:
    """Owns the networks, optimiser states and random streams of one run."""

    def __init__(self, config: TrainConfig, train_set: LabeledDataset, val_set: LabeledDataset | None = None):
        config.validate()
        cfg = config.model
        if train_set.num_classes > cfg.num_classes:
            raise ConfigError(f"dataset has {train_set.num_classes} classes, config declares {cfg.num_classes}")
        if train_set.dim != cfg.data_dim:
            raise ConfigError(f"dataset is {train_set.dim}-D, config declares data_dim={cfg.data_dim}")
        if len(train_set) < config.batch_size:
            raise ConfigError(f"batch_size {config.batch_size} exceeds the {len(train_set)} training samples")
        self.config = config
        self.train_set = train_set
        self.val_set = val_set
        init_seq, step_seq, eval_seq = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.rng = np.random.default_rng(step_seq)
        self.gen = GeneratorParams(cfg, conditional=config.loss != "none", rng=init_rng)
        self.disc = DiscriminatorParams(cfg, config.loss, init_rng)
        self.ema = EmaShadow.from_generator(self.gen, config.ema.decay, config.ema.start)
        self.opt_d = AdamState(config.beta1, config.beta2)
        self.opt_g = AdamState(config.beta1, config.beta2)
        self.iteration = 0
        eval_rng = np.random.default_rng(eval_seq)
        n_eval = config.eval_samples_per_class
        self.eval_labels = np.repeat(np.arange(cfg.num_classes), n_eval)
        self.eval_z = eval_rng.standard_normal((self.eval_labels.size, cfg.noise_dim))

    # -- sampling ---------------------------------------------------------

    def _sample_real(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.rng.choice(len(self.train_set), size=self.config.batch_size, replace=False)
        return self.train_set.samples[idx], self.train_set.labels[idx]

    def _sample_latent(self) -> tuple[np.ndarray, np.ndarray]:
        m, cfg = self.config.batch_size, self.config.model
        z = self.rng.standard_normal((m, cfg.noise_dim))
        y = self.rng.integers(0, cfg.num_classes, size=m)
        return z, y

    # -- updates ----------------------------------------------------------

    def train_discriminator_step(self, real_batch: tuple[np.ndarray, np.ndarray] | None = None) -> dict[str, float]:
        cfg = self.config
        x_real, y_real = real_batch if real_batch is not None else self._sample_real()
        if len(y_real) != cfg.batch_size:
            raise ConfigError(f"real batch has {len(y_real)} rows, expected {cfg.batch_size}")
        z, y_fake = self._sample_latent()
        with ad.no_grad():
            fake = generator_forward(self.gen, z, y_fake).data
        with ad.Tape():
            w = self.disc.effective_weights(update_u=True)
            real_t = ad.constant(x_real)
            out_real = discriminator_forward(self.disc, real_t, y_real, weights=w)
            out_fake = discriminator_forward(self.disc, ad.constant(fake), y_fake, weights=w)
            total = adv_d_loss(out_real.adv_score, out_fake.adv_score, cfg.adv_loss)
            lc = conditioning_loss(cfg, self.disc, w, real_t, y_real, out_real, self.rng)
            if lc is not None:
                total = ad.add(total, ad.scale(lc, cfg.lam))
            if cfg.cr.enabled:
                cr = consistency_regularization(self.disc, real_t, y_real, cfg.cr.jitter_sigma, self.rng, weights=w)
                total = ad.add(total, ad.scale(cr, cfg.cr.coefficient))
            ad.backward(total)
        self._apply(self.disc, self.opt_d, cfg.alpha1)
        return {"L_D": total.item(), "L_C_real": lc.item() if lc is not None else 0.0}

    def train_generator_step(self) -> dict[str, float]:
        cfg = self.config
        z, y_fake = self._sample_latent()
        with ad.Tape():
            fake = generator_forward(self.gen, z, y_fake, update_u=True)
            with ad.no_grad():
                w_frozen = self.disc.effective_weights(update_u=False)
            w = {k: ad.constant(v.data) for k, v in w_frozen.items()}
            out = discriminator_forward(self.disc, fake, y_fake, weights=w)
            total = adv_g_loss(out.adv_score, cfg.adv_loss)
            lc = conditioning_loss(cfg, self.disc, w, fake, y_fake, out, self.rng)
            if lc is not None:
                total = ad.add(total, ad.scale(lc, cfg.lam))
            ad.backward(total)
        self._apply(self.gen, self.opt_g, cfg.alpha2)
        self.iteration += 1
        ema_update(self.ema, self.gen, self.iteration)
        return {"L_G": total.item(), "L_C_fake": lc.item() if lc is not None else 0.0}

    def _apply(self, net, state: AdamState, lr: float) -> None:
        grads = {k: t.grad for k, t in net.params.items()}
        adam_step(net.params, grads, state, lr)
        ad.zero_grad(net.parameters())

    # -- evaluation -------------------------------------------------------

    def eval_generator(self) -> GeneratorParams:
        return self.ema.as_generator(self.gen)

    def sample(self, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return generator_forward(self.eval_generator(), z, labels).data

    def evaluate(self) -> dict[str, Any]:
        fake = self.sample(self.eval_z, self.eval_labels)
        fd = class_conditional_frechet(self.train_set.samples, self.train_set.labels, fake, self.eval_labels)
        val = self.val_set if self.val_set is not None else self.train_set
        acc = authenticity_accuracy(
            self.disc,
            (self.train_set.samples, self.train_set.labels),
            (val.samples, val.labels),
            (fake, self.eval_labels),
        )
        return {
            "frechet": fd["pooled"],
            "class_frechet": fd["mean"],
            "per_class_frechet": fd["per_class"],
            "acc_train": acc.acc_train,
            "acc_val": acc.acc_val,
            "acc_fake": acc.acc_fake,
            "gap": acc.gap,
            "sigmas": spectral_trend(self.disc),
        }

    def checkpoint(self) -> dict[str, Any]:
        return checkpoint_dict(self.gen, self.disc, self.ema, self.config.to_dict(), self.iteration)


def _check_finite(values: dict[str, float], iteration: int) -> None:
    for k, v in values.items():
        if not np.isfinite(v):
            raise TrainingAborted(iteration, f"{k} is not finite")


def run_training(
    config: TrainConfig,
    train_set: LabeledDataset,
    val_set: LabeledDataset | None = None,
    out_dir: str | Path | None = None,
) -> tuple[TrainHistory, dict[str, Any]]:
    """Train for ``config.iterations`` generator updates.

    Returns the evaluation history and the final checkpoint document.  With
    ``out_dir`` the history is streamed to ``metrics.jsonl`` and the best and
    final checkpoints are written beside it.
    """
    trainer = Trainer(config, train_set, val_set)
    history = TrainHistory()
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
    started = time.perf_counter()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    best_score = np.inf
    try:
        for it in range(1, config.iterations + 1):
            try:
                for _ in range(config.n_dis):
                    d = trainer.train_discriminator_step()
                    _check_finite(d, it)
                    _accumulate(sums, counts, d)
                g = trainer.train_generator_step()
                _check_finite(g, it)
                _accumulate(sums, counts, g)
            except (ad.NumericError, FloatingPointError) as exc:
                raise TrainingAborted(it, str(exc)) from exc
            if it % config.eval_interval == 0 or it == config.iterations:
                rec: dict[str, Any] = {"iteration": it}
                rec.update({k: sums[k] / counts[k] for k in ("L_D", "L_G", "L_C_real", "L_C_fake")})
                sums.clear()
                counts.clear()
                rec.update(trainer.evaluate())
                flags = collapse_detector(history.records + [rec])
                idx = len(history.records)
                rec["collapse_flag"] = flags.gap_index == idx or idx in flags.sigma_layers
                rec["wallclock"] = time.perf_counter() - started
                history.append(rec)
                log.info("iter %d class_frechet %.5f gap %.3f", it, rec["class_frechet"], rec["gap"])
                if metrics is not None:
                    metrics.write(json.dumps({k: rec[k] for k in JSONL_FIELDS}) + "\n")
                    metrics.flush()
                if out is not None and rec["class_frechet"] < best_score:
                    best_score = rec["class_frechet"]
                    save_checkpoint(out / "ckpt-best.json", trainer.checkpoint())
    finally:
        if metrics is not None:
            metrics.close()
    final = trainer.checkpoint()
    if out is not None:
        save_checkpoint(out / "ckpt-final.json", final)
    return history, final


def _accumulate(sums: dict[str, float], counts: dict[str, int], values: dict[str, float]) -> None:
    for k, v in values.items():
        sums[k] = sums.get(k, 0.0) + v
        counts[k] = counts.get(k, 0) + 1
