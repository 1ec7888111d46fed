"""Splitting a FLOPs budget ``C = 6 N D`` between model size and tokens."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from abcscale.laws import DomainError, Law, LawParams, predict
from abcscale.tokenizer import FULL_CORPUS_VOCAB_SIZE

FLOPS_PER_PARAM_TOKEN = 6.0
MIN_PARAMS = 1e6
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class AllocationResult:
    n_opt: float
    d_opt: float
    predicted_loss: float
    epochs: Optional[float] = None
    g_const: Optional[float] = None
    a_exp: Optional[float] = None
    b_exp: Optional[float] = None
    at_bound: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def _check_budget(flops: float) -> None:
    if not (math.isfinite(flops) and flops > 0):
        raise DomainError(f"FLOPs budget must be positive and finite, got {flops}")


def closed_form_allocation(params: LawParams, flops: float, u_d: Optional[float] = None) -> AllocationResult:
    """``N = G (C/6)^a``, ``D = (C/6)^b / G`` with ``G = (alpha A / (beta B))^(1/(alpha+beta))``.

    ``a = beta/(alpha+beta)`` and ``b = 1 - a`` so the exponents sum to one
    exactly.
    """
    if params.variant is not Law.CHINCHILLA:
        raise DomainError("the closed form needs chinchilla parameters")
    _check_budget(flops)
    if params.a <= 0 or params.b <= 0:
        raise DomainError("closed form needs A > 0 and B > 0")
    s = params.alpha + params.beta
    a_exp = params.beta / s
    b_exp = 1.0 - a_exp
    log_g = (math.log(params.alpha * params.a) - math.log(params.beta * params.b)) / s
    g = math.exp(log_g)
    log_c6 = math.log(flops / FLOPS_PER_PARAM_TOKEN)
    n = math.exp(log_g + a_exp * log_c6)
    d = math.exp(b_exp * log_c6 - log_g)
    return AllocationResult(
        n_opt=n, d_opt=d, predicted_loss=float(predict(params, n, d)),
        epochs=d / u_d if u_d else None, g_const=g, a_exp=a_exp, b_exp=b_exp,
    )


def loss_along_budget(params: LawParams, flops: float, n, u_d: Optional[float] = None):
    n = np.asarray(n, dtype=float)
    d = flops / (FLOPS_PER_PARAM_TOKEN * n)
    if params.variant is Law.CHINCHILLA:
        return predict(params, n, d)
    return predict(params, n, d, np.full_like(d, u_d))


def golden_section(f, lo: float, hi: float, rel_width: float = 1e-6) -> tuple[float, float]:
    """Minimise a unimodal ``f`` on ``[lo, hi]`` until ``hi - lo <= rel_width * max(1, |x|)``."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > rel_width * max(1.0, abs(a), abs(b)):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    x = (a + b) / 2.0
    return x, f(x)


def constrained_search(params: LawParams, flops: float, u_d: Optional[float] = None,
                       lo: float = MIN_PARAMS, rel_width: float = 1e-6) -> AllocationResult:
    """Golden-section search over ``log N`` on ``[lo, C/6]`` with ``D = C/(6N)``.

    Works for every law. ``at_bound`` is set when the optimum sits within the
    search tolerance of either end, i.e. the loss is monotone on the interval.
    """
    _check_budget(flops)
    if params.variant is not Law.CHINCHILLA and not (u_d and u_d > 0):
        raise DomainError(f"the {params.variant.value} law needs u_d > 0")
    hi = flops / FLOPS_PER_PARAM_TOKEN
    if not hi > lo:
        raise DomainError(f"budget {flops} leaves no room above {lo} parameters")
    log_lo, log_hi = math.log(lo), math.log(hi)

    def f(log_n):
        return float(loss_along_budget(params, flops, math.exp(log_n), u_d))

    # the width criterion acts on log N, so it is relative in N
    log_n, loss = golden_section(f, log_lo, log_hi, rel_width)
    tol = 2 * rel_width * max(1.0, abs(log_n))
    at_bound = log_n - log_lo <= tol or log_hi - log_n <= tol
    n = math.exp(log_n)
    d = flops / (FLOPS_PER_PARAM_TOKEN * n)
    return AllocationResult(
        n_opt=n, d_opt=d, predicted_loss=loss,
        epochs=d / u_d if u_d else None, at_bound=at_bound,
    )


def sweep(params: LawParams, flops: float, u_d: Optional[float] = None, points: int = 200,
          lo: float = MIN_PARAMS) -> list[tuple[float, float, float]]:
    """``(N, D, L)`` rows on a log-spaced N grid along ``6 N D = C``."""
    _check_budget(flops)
    n = np.geomspace(lo, flops / FLOPS_PER_PARAM_TOKEN, points)
    loss = np.asarray(loss_along_budget(params, flops, n, u_d), dtype=float)
    return [(float(a), float(flops / (FLOPS_PER_PARAM_TOKEN * a)), float(b)) for a, b in zip(n, loss)]


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    layers: int
    ff_hidden: int
    heads: int
    head_size: int
    vocab: int

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k == "layers":
                if v < 0:
                    raise ValueError("layers must be non-negative")
            elif not v > 0:
                raise ValueError(f"{k} must be positive")


def param_count(cfg: ModelConfig) -> int:
    """Parameter count under one fixed convention.

    * tied input/output embedding: ``vocab * hidden``
    * attention: Q, K, V and O each ``hidden x heads*head_size``, no biases
    * gated MLP: three ``hidden x ff_hidden`` matrices
    * two RMS-norm weight vectors per layer, no final norm
    """
    attn = 4 * cfg.hidden * cfg.heads * cfg.head_size
    mlp = 3 * cfg.hidden * cfg.ff_hidden
    norms = 2 * cfg.hidden
    return cfg.vocab * cfg.hidden + cfg.layers * (attn + mlp + norms)


# Model shapes of the five reference sizes, keyed by nominal size. The shapes
# do not fix a vocabulary, so the full-corpus BPE size is assumed.
TABLE_VOCAB = FULL_CORPUS_VOCAB_SIZE
TABLE_CONFIGS: dict[str, ModelConfig] = {
    "190M": ModelConfig(768, 12, 3072, 12, 256, TABLE_VOCAB),
    "505M": ModelConfig(1024, 16, 4096, 16, 256, TABLE_VOCAB),
    "1.07B": ModelConfig(1280, 20, 5120, 20, 256, TABLE_VOCAB),
    "1.97B": ModelConfig(1536, 24, 6144, 24, 256, TABLE_VOCAB),
    "4.23B": ModelConfig(2048, 32, 8192, 32, 256, TABLE_VOCAB),
}
TABLE_NOMINAL = {"190M": 190e6, "505M": 505e6, "1.07B": 1.07e9, "1.97B": 1.97e9, "4.23B": 4.23e9}
# Largest relative gap between param_count and the nominal label (190M: +24%).
TABLE_TOLERANCE = 0.25
