"""Finite-difference verification of every differentiable piece at small sizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (
    EmbeddingBatch,
    acgan_aux_loss,
    loss_2c,
    loss_2c_aps,
    loss_eq7,
    nt_xent,
    projection_term,
    proxy_nca,
)
from .models import DiscriminatorParams, GeneratorParams, ModelConfig, discriminator_forward, generator_forward

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float
    passed: bool


def _unit_rows(x: Tensor) -> Tensor:
    return ad.l2_normalize_rows(x)


def _op_checks(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of one tensor, evaluation point)."""
    u = lambda *shape: rng.uniform(-2.0, 2.0, size=shape)  # noqa: E731
    b = ad.constant(u(4, 2))
    other = ad.constant(u(3, 4))
    weights = ad.constant(u(3, 4))
    m, d, C = 8, 4, 3
    labels = rng.integers(0, C, size=m)
    labels[:C] = np.arange(C)
    table = ad.constant(u(C, d))
    feats = ad.constant(u(m, d))
    aug = ad.constant(u(m, d))
    w_sum = lambda t: ad.sum_(ad.mul(t, weights))  # noqa: E731
    c32, c31, c14, cm1 = (ad.constant(u(*s)) for s in ((3, 2), (3, 1), (1, 4), (m, 1)))
    return {
        "matmul": (lambda a: ad.sum_(ad.mul(ad.matmul(a, b), c32)), u(3, 4)),
        "add": (lambda a: w_sum(ad.add(a, other)), u(3, 4)),
        "sub": (lambda a: w_sum(ad.sub(other, a)), u(3, 4)),
        "mul": (lambda a: w_sum(ad.mul(a, a)), u(3, 4)),
        "scale": (lambda a: w_sum(ad.scale(a, -1.7)), u(3, 4)),
        "relu": (lambda a: w_sum(ad.relu(a)), u(3, 4)),
        "leaky_relu": (lambda a: w_sum(ad.leaky_relu(a)), u(3, 4)),
        "tanh": (lambda a: w_sum(ad.tanh(a)), u(3, 4)),
        "exp": (lambda a: w_sum(ad.exp(a)), u(3, 4)),
        "log": (lambda a: w_sum(ad.log(a)), rng.uniform(0.5, 2.0, size=(3, 4))),
        "log_sum_exp_rows": (lambda a: ad.sum_(ad.mul(ad.log_sum_exp_rows(a), c31)), u(3, 4)),
        "l2_normalize_rows": (lambda a: w_sum(ad.l2_normalize_rows(a)), u(3, 4)),
        "reduce": (lambda a: ad.sum_(ad.mul(ad.mean(a, axis="cols"), c14)), u(3, 4)),
        "nt_xent": (lambda a: nt_xent(_unit_rows(a), 0.7), u(m, d)),
        "eq7": (lambda a: loss_eq7(EmbeddingBatch(_unit_rows(a), labels, table), 0.7), u(m, d)),
        "eq7/class_table": (lambda tb: loss_eq7(EmbeddingBatch(_unit_rows(feats), labels, tb), 0.7), u(C, d)),
        "2c": (lambda a: loss_2c(EmbeddingBatch(_unit_rows(a), labels, table), 0.7), u(m, d)),
        "2c/class_table": (lambda tb: loss_2c(EmbeddingBatch(_unit_rows(feats), labels, tb), 0.7), u(C, d)),
        "2c-aps": (lambda a: loss_2c_aps(EmbeddingBatch(_unit_rows(a), labels), _unit_rows(aug), 0.7), u(m, d)),
        "2c-aps/augmented": (
            lambda a: loss_2c_aps(EmbeddingBatch(_unit_rows(feats), labels), _unit_rows(a), 0.7),
            u(m, d),
        ),
        "pnca": (lambda a: proxy_nca(EmbeddingBatch(_unit_rows(a), labels, table), 0.7), u(m, d)),
        "pnca/class_table": (lambda tb: proxy_nca(EmbeddingBatch(_unit_rows(feats), labels, tb), 0.7), u(C, d)),
        "acgan": (lambda a: acgan_aux_loss(a, labels), u(m, C)),
        "projection_term": (
            lambda a: ad.sum_(ad.mul(projection_term(a, table, labels), cm1)),
            u(m, d),
        ),
    }


def _small_config(proj_type: str = "linear") -> ModelConfig:
    return ModelConfig(
        data_dim=2, num_classes=3, noise_dim=3, g_hidden=[6, 5], g_embed_dim=4, d_hidden=[6, 5], proj_dim=4,
        proj_type=proj_type,
    )


def _network_checks(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Full discriminator and generator objectives, one entry per parameter.

    Spectral-norm divisors are frozen so both differentiation routes see the
    same map.
    """
    from .training import adv_d_loss, adv_g_loss

    checks = {}
    m = 6
    for mode, proj_type in (("2c", "mlp"), ("acgan", "linear"), ("projgan", "linear")):
        cfg = _small_config(proj_type)
        disc = DiscriminatorParams(cfg, mode, rng)
        gen = GeneratorParams(cfg, conditional=True, rng=rng)
        # move off the zero-bias init, where dead units can give exactly-zero embeddings
        for net in (disc, gen):
            for name, p in net.params.items():
                if name.endswith(".b"):
                    p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
        with ad.no_grad():
            disc.effective_weights(update_u=True)
            gen.effective_weights(update_u=True)
        d_sig, g_sig = dict(disc.last_sigmas), dict(gen.last_sigmas)
        x_real = rng.uniform(-1, 1, size=(m, 2))
        x_fake = rng.uniform(-1, 1, size=(m, 2))
        y_real = rng.integers(0, 3, size=m)
        y_fake = rng.integers(0, 3, size=m)
        z = rng.standard_normal((m, 3))

        def d_objective(w, mode=mode, disc=disc, x_real=x_real, x_fake=x_fake, y_real=y_real, y_fake=y_fake):
            r = discriminator_forward(disc, x_real, y_real, weights=w)
            f = discriminator_forward(disc, x_fake, y_fake, weights=w)
            total = adv_d_loss(r.adv_score, f.adv_score)
            if mode == "2c":
                total = ad.add(total, loss_2c(EmbeddingBatch(r.embedding, y_real, w["d.class_embed"]), 1.0))
            elif mode == "acgan":
                total = ad.add(total, acgan_aux_loss(r.class_logits, y_real))
            return total

        for name, p in disc.params.items():
            checks[f"discriminator[{mode}]/{name}"] = (_substitute(disc, d_sig, name, d_objective), p.data.copy())

        if mode == "2c":
            with ad.no_grad():
                frozen = dict(disc.effective_weights(sigmas=d_sig))

            def g_objective(w, gen=gen, disc=disc, frozen=frozen, z=z, y_fake=y_fake):
                fake = generator_forward(gen, z, y_fake, weights=w)
                out = discriminator_forward(disc, fake, y_fake, weights=frozen)
                lc = loss_2c(EmbeddingBatch(out.embedding, y_fake, frozen["d.class_embed"]), 1.0)
                return ad.add(adv_g_loss(out.adv_score), lc)

            for name, p in gen.params.items():
                checks[f"generator/{name}"] = (_substitute(gen, g_sig, name, g_objective), p.data.copy())

            def d_input(x, disc=disc, y_real=y_real, d_sig=d_sig):
                w = disc.effective_weights(sigmas=d_sig)
                out = discriminator_forward(disc, x, y_real, weights=w)
                return ad.add(ad.sum_(out.adv_score), loss_2c(EmbeddingBatch(out.embedding, y_real, w["d.class_embed"]), 1.0))

            checks["discriminator[2c]/input"] = (d_input, x_real)
    return checks


def _substitute(net, sigmas, name, objective):
    def f(t: Tensor) -> Tensor:
        w = net.effective_weights(sigmas=sigmas)
        w[name] = ad.scale(t, 1.0 / sigmas[name]) if name in net.u else t
        return objective(w)

    return f


def run_gradchecks(seeds: Iterable[int] = range(10), eps: float = 1e-6, include_networks: bool = True) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        checks = _op_checks(rng)
        if include_networks:
            checks.update(_network_checks(rng))
        for name, (f, x0) in checks.items():
            try:
                err = ad.grad_check(f, x0, eps)
            except (ad.NumericError, ValueError):
                err = float("inf")
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(k, v, v < TOLERANCE) for k, v in worst.items()]
