"""Loss laws for symbolic-music scaling.

Five variants share one parameter container:

* ``chinchilla``  ``A/N^a + B/D^b + E``
* ``dc``          data-constrained: ``A/N'^a + B/D'^b + E`` with effective
                  (repetition-discounted) parameters ``N'`` and data ``D'``
* ``dpp``         ``A/N^a + B/D''^b + E`` with continuous effective data ``D''``
* ``nd``          ``dpp`` plus the cross term ``d/(N^a D''^b)``
* ``sms``         ``nd`` plus ``act(k_d D + k_n log N - k_u log U_D - k_in)``

Besides the plain evaluators, the module exposes each law in "fit space": a
flat parameter vector with positive coefficients stored as logs and ``k`` as
a logit, together with the log of every additive term and its exact Jacobian.
The fitter builds its log-sum-exp objective from those.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

LEAKY_SLOPE = 0.01
SELU_SCALE = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


class DomainError(ValueError):
    pass


class Law(str, enum.Enum):
    CHINCHILLA = "chinchilla"
    DATA_CONSTRAINED = "dc"
    CONTINUOUS = "dpp"
    ND_TERM = "nd"
    SMS = "sms"

    def __str__(self) -> str:
        return self.value


_USES_K = {Law.CONTINUOUS, Law.ND_TERM, Law.SMS}
_USES_D = {Law.ND_TERM, Law.SMS}


# --- activations -----------------------------------------------------------

def _gelu(x):
    return x * special.ndtr(x)


def _gelu_prime(x):
    return special.ndtr(x) + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _selu(x):
    return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _selu_prime(x):
    return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _sigmoid_prime(x):
    s = special.expit(x)
    return s * (1.0 - s)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "gelu": (_gelu, _gelu_prime),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (np.asarray(x) > 0).astype(float)),
    "leaky_relu": (
        lambda x: np.where(x > 0, x, LEAKY_SLOPE * x),
        lambda x: np.where(np.asarray(x) > 0, 1.0, LEAKY_SLOPE),
    ),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "selu": (_selu, _selu_prime),
    "sigmoid": (special.expit, _sigmoid_prime),
}


def _activation(name: str) -> tuple[Callable, Callable]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise DomainError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --- parameters ------------------------------------------------------------

@dataclass(frozen=True)
class OverfitParams:
    k_d: float
    k_n: float
    k_u: float
    k_in: float


@dataclass(frozen=True)
class LawParams:
    """Fitted coefficients of one law. Fields a variant does not use are None.

    ``k_eff`` is the effective-data decay of ``D''`` and is unrelated to the
    overfit slope ``overfit.k_d``.
    """

    variant: Law
    a: float
    b: float
    e: float
    alpha: float
    beta: float
    d: Optional[float] = None
    k_eff: Optional[float] = None
    rd_star: Optional[float] = None
    rn_star: Optional[float] = None
    overfit: Optional[OverfitParams] = None
    activation: Optional[str] = None

    def __post_init__(self):
        v = Law(self.variant)
        object.__setattr__(self, "variant", v)
        if v is Law.SMS and self.activation is None:
            object.__setattr__(self, "activation", "gelu")
        if isinstance(self.overfit, dict):
            object.__setattr__(self, "overfit", OverfitParams(**self.overfit))

        wanted = {
            "d": v in _USES_D,
            "k_eff": v in _USES_K,
            "rd_star": v is Law.DATA_CONSTRAINED,
            "rn_star": v is Law.DATA_CONSTRAINED,
            "overfit": v is Law.SMS,
            "activation": v is Law.SMS,
        }
        for name, needed in wanted.items():
            present = getattr(self, name) is not None
            if needed and not present:
                raise DomainError(f"{v.value} law requires {name}")
            if present and not needed:
                raise DomainError(f"{name} is not a parameter of the {v.value} law")
        for name in ("a", "b", "e", "d"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise DomainError(f"{name} must be non-negative, got {val}")
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError(f"exponents must be positive, got alpha={self.alpha}, beta={self.beta}")
        if self.k_eff is not None and not 0 < self.k_eff <= 1:
            raise DomainError(f"k_eff must lie in (0, 1], got {self.k_eff}")
        for name in ("rd_star", "rn_star"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise DomainError(f"{name} must be positive, got {val}")
        if self.activation is not None:
            _activation(self.activation)

    def to_json(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if v is not None}
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LawParams":
        obj = dict(obj)
        if "params" in obj and "variant" not in obj:  # a whole fit report
            obj = dict(obj["params"])
        overfit = obj.pop("overfit", None)
        if overfit is not None:
            overfit = OverfitParams(**overfit)
        return cls(overfit=overfit, **obj)


# --- plain evaluators ------------------------------------------------------

def _positive(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0):
        raise DomainError(f"{name} must be positive")
    return arr


def _nonnegative(name: str, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(arr >= 0):
        raise DomainError(f"{name} must be non-negative")
    return arr


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def chinchilla_loss(p: LawParams, n, d):
    n = _positive("N", n)
    d = _positive("D", d)
    return _out(p.a / n ** p.alpha + p.b / d ** p.beta + p.e)


def _saturating(unique, repeats, r_star):
    return unique + unique * r_star * (-np.expm1(-repeats / r_star))


def effective_data_discrete(u_d, r_d, rd_star: float):
    """``D' = U_D + U_D R* (1 - exp(-R_D / R*))`` for ``R_D`` repeats."""
    u_d = _positive("U_D", u_d)
    r_d = _nonnegative("R_D", r_d)
    if not rd_star > 0:
        raise DomainError("rd_star must be positive")
    return _out(_saturating(u_d, r_d, rd_star))


def effective_params(n, u_n, rn_star: float):
    """Effective parameter count ``N'``.

    The unique-parameter count is ``min(u_n, N)`` so a compute-optimal size can
    be passed directly as ``u_n``; the repeat count is ``N / U_N - 1``.
    """
    n = _positive("N", n)
    u = np.minimum(_positive("U_N", u_n), n)
    if not rn_star > 0:
        raise DomainError("rn_star must be positive")
    r_n = np.maximum(n / u - 1.0, 0.0)
    return _out(_saturating(u, r_n, rn_star))


def effective_data_continuous(u_d, d, k_eff: float):
    """``D'' = U_D (1 - k^(D/U_D)) / (1 - k)``; equals ``D`` at ``k = 1``."""
    u_d = _positive("U_D", u_d)
    d = _nonnegative("D", d)
    if not 0 < k_eff <= 1:
        raise DomainError("k_eff must lie in (0, 1]")
    if k_eff == 1.0:
        return _out(d * np.ones_like(u_d))
    x = d / u_d
    y = u_d * -np.expm1(x * math.log(k_eff)) / (1.0 - k_eff)
    # one epoch is exact by definition; expm1(log k) can differ from k - 1 in the last bit
    return _out(np.where(x == 1.0, u_d, y))


def compute_optimal_params_for_data(a: float, b: float, alpha: float, beta: float, u_d):
    """Size whose Chinchilla compute-optimal token count equals ``u_d``.

    From ``N_opt = G (C/6)^a``, ``D_opt = G^-1 (C/6)^b`` with ``D_opt = U_D``:
    ``N_opt = (alpha A / (beta B))^(1/alpha) * U_D^(beta/alpha)``.
    """
    return (alpha * a / (beta * b)) ** (1.0 / alpha) * np.asarray(u_d, dtype=float) ** (beta / alpha)


def data_constrained_loss(p: LawParams, n, d, u_d):
    n = _positive("N", n)
    d = _positive("D", d)
    u_d = np.minimum(_positive("U_D", u_d), d)
    r_d = np.maximum(d / u_d - 1.0, 0.0)
    d_eff = _saturating(u_d, r_d, p.rd_star)
    n_opt = compute_optimal_params_for_data(p.a, p.b, p.alpha, p.beta, u_d)
    n_eff = effective_params(n, n_opt, p.rn_star)
    return _out(p.a / n_eff ** p.alpha + p.b / d_eff ** p.beta + p.e)


def continuous_loss(p: LawParams, n, d, u_d):
    n = _positive("N", n)
    d = _positive("D", d)
    dpp = np.asarray(effective_data_continuous(u_d, d, p.k_eff))
    return _out(p.a / n ** p.alpha + p.b / dpp ** p.beta + p.e)


def nd_term_loss(p: LawParams, n, d, u_d):
    n = _positive("N", n)
    d = _positive("D", d)
    dpp = np.asarray(effective_data_continuous(u_d, d, p.k_eff))
    na = n ** p.alpha
    db = dpp ** p.beta
    return _out(p.d / (na * db) + p.a / na + p.b / db + p.e)


def overfit_linear(p: LawParams, n, d, u_d):
    o = p.overfit
    return o.k_d * np.asarray(d, dtype=float) + o.k_n * np.log(n) - o.k_u * np.log(u_d) - o.k_in


def overfit_term(p: LawParams, n, d, u_d):
    """Activation of the linear overfit form (natural logs)."""
    if p.variant is not Law.SMS:
        raise DomainError("overfit term belongs to the sms law")
    n = _positive("N", n)
    d = _positive("D", d)
    u_d = _positive("U_D", u_d)
    act, _ = _activation(p.activation)
    return _out(act(overfit_linear(p, n, d, u_d)))


def sms_loss(p: LawParams, n, d, u_d):
    return _out(np.asarray(nd_term_loss(p, n, d, u_d)) + np.asarray(overfit_term(p, n, d, u_d)))


def predict(p: LawParams, n, d, u_d=None):
    """Evaluate whichever law ``p`` describes."""
    if p.variant is Law.CHINCHILLA:
        return chinchilla_loss(p, n, d)
    if u_d is None:
        raise DomainError(f"the {p.variant.value} law needs U_D")
    return {
        Law.DATA_CONSTRAINED: data_constrained_loss,
        Law.CONTINUOUS: continuous_loss,
        Law.ND_TERM: nd_term_loss,
        Law.SMS: sms_loss,
    }[p.variant](p, n, d, u_d)


# --- fit space -------------------------------------------------------------

_CORE = ("log_a", "log_b", "log_e", "alpha", "beta")
PARAM_NAMES: dict[Law, tuple[str, ...]] = {
    Law.CHINCHILLA: _CORE,
    Law.DATA_CONSTRAINED: _CORE + ("log_rd_star", "log_rn_star"),
    Law.CONTINUOUS: _CORE + ("logit_k",),
    Law.ND_TERM: _CORE + ("logit_k", "log_d"),
    Law.SMS: _CORE + ("logit_k", "log_d", "k_d", "k_n", "k_u", "k_in"),
}
OVERFIT_NAMES = ("k_d", "k_n", "k_u", "k_in")


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def to_vector(p: LawParams) -> np.ndarray:
    vals = {
        "log_a": _log(p.a), "log_b": _log(p.b), "log_e": _log(p.e),
        "alpha": p.alpha, "beta": p.beta,
    }
    if p.k_eff is not None:
        vals["logit_k"] = math.inf if p.k_eff == 1 else float(special.logit(p.k_eff))
    if p.d is not None:
        vals["log_d"] = _log(p.d)
    if p.rd_star is not None:
        vals["log_rd_star"] = math.log(p.rd_star)
        vals["log_rn_star"] = math.log(p.rn_star)
    if p.overfit is not None:
        vals.update(asdict(p.overfit))
    return np.array([vals[k] for k in PARAM_NAMES[p.variant]], dtype=float)


def from_vector(variant, theta, activation: Optional[str] = None) -> LawParams:
    variant = Law(variant)
    v = dict(zip(PARAM_NAMES[variant], (float(t) for t in theta)))
    kw = dict(
        variant=variant,
        a=math.exp(v["log_a"]), b=math.exp(v["log_b"]), e=math.exp(v["log_e"]),
        alpha=v["alpha"], beta=v["beta"],
    )
    if "logit_k" in v:
        kw["k_eff"] = float(special.expit(v["logit_k"]))
    if "log_d" in v:
        kw["d"] = math.exp(v["log_d"])
    if "log_rd_star" in v:
        kw["rd_star"] = math.exp(v["log_rd_star"])
        kw["rn_star"] = math.exp(v["log_rn_star"])
    if variant is Law.SMS:
        kw["overfit"] = OverfitParams(*(v[k] for k in OVERFIT_NAMES))
        kw["activation"] = activation or "gelu"
    return LawParams(**kw)


def _log_dpp(s: float, x: np.ndarray, log_u: np.ndarray):
    """log D'' and d(log D'')/d(logit k), written to stay finite for k -> 0, 1."""
    log_k = -np.logaddexp(0.0, -s)
    one_minus_k = special.expit(-s)
    k = special.expit(s)
    xl = x * log_k
    one_minus_kx = -np.expm1(xl)
    log_dpp = log_u + np.log(one_minus_kx) + np.logaddexp(0.0, s)
    dlog = k - x * np.exp(xl) * one_minus_k / one_minus_kx
    return log_dpp, dlog


def _saturating_log(log_u, r, r_star):
    """log of U (1 + R* (1 - e^(-R/R*))) plus its derivatives w.r.t. log R* and log U."""
    e = np.exp(-r / r_star)
    g = 1.0 + r_star * (1.0 - e)
    d_log_rstar = r_star * ((1.0 - e) - e * r / r_star) / g
    return log_u + np.log(g), d_log_rstar, e, g


def log_terms(variant, theta, n, d, u_d=None):
    """Log of each additive non-overfit term and its Jacobian in fit space.

    Returns ``(T, J)`` with ``T`` of shape (terms, obs) and ``J`` of shape
    (terms, obs, params). The core loss is ``exp(T).sum(0)``.
    """
    variant = Law(variant)
    theta = np.asarray(theta, dtype=float)
    names = PARAM_NAMES[variant]
    idx = {k: i for i, k in enumerate(names)}
    log_n = np.log(np.asarray(n, dtype=float))
    d = np.asarray(d, dtype=float)
    log_d = np.log(d)
    m = log_n.shape[0]
    P = len(names)
    la, lb, le, alpha, beta = theta[:5]

    if variant is Law.CHINCHILLA:
        log_dd = log_d
        dlog_dd = {}
    elif variant is Law.DATA_CONSTRAINED:
        u = np.minimum(np.asarray(u_d, dtype=float), d)
        log_u = np.log(u)
        rd_star = float(np.exp(theta[idx["log_rd_star"]]))
        log_dd, dd_rstar, _, _ = _saturating_log(log_u, np.maximum(d / u - 1.0, 0.0), rd_star)
        dlog_dd = {"log_rd_star": dd_rstar}
    else:
        log_u = np.log(np.asarray(u_d, dtype=float))
        s = theta[idx["logit_k"]]
        log_dd, dlog_ds = _log_dpp(s, d / np.exp(log_u), log_u)
        dlog_dd = {"logit_k": dlog_ds}

    # Model-size side: N itself, or N' for the data-constrained law.
    dlog_nn: dict[str, np.ndarray] = {}
    if variant is Law.DATA_CONSTRAINED:
        if not (alpha > 0 and beta > 0):
            raise DomainError("the data-constrained law needs positive exponents")
        q = math.log(alpha) + la - math.log(beta) - lb + beta * log_u
        log_nopt = q / alpha
        active = log_nopt < log_n
        log_un = np.where(active, log_nopt, log_n)
        rn_star = float(np.exp(theta[idx["log_rn_star"]]))
        r_n = np.maximum(np.exp(log_n - log_un) - 1.0, 0.0)
        log_nn, nn_rstar, e_n, g_n = _saturating_log(log_un, r_n, rn_star)
        # d log N' / d log U_N, zero where U_N = N.
        dlogn_dlogu = np.where(active, (g_n - np.exp(log_n - log_un) * e_n) / g_n, 0.0)
        dlogu = {
            "log_a": np.full(m, 1.0 / alpha),
            "log_b": np.full(m, -1.0 / alpha),
            "alpha": (1.0 - q) / alpha ** 2,
            "beta": (-1.0 / beta + log_u) / alpha,
        }
        for k, v in dlogu.items():
            dlog_nn[k] = dlogn_dlogu * v
        dlog_nn["log_rn_star"] = np.where(active, nn_rstar, 0.0)
    else:
        log_nn = log_n

    terms = [
        la - alpha * log_nn,
        lb - beta * log_dd,
        np.full(m, le),
    ]
    J = np.zeros((4 if variant in _USES_D else 3, m, P))
    J[0, :, idx["log_a"]] = 1.0
    J[0, :, idx["alpha"]] = -log_nn
    for k, v in dlog_nn.items():
        J[0, :, idx[k]] += -alpha * v
    J[1, :, idx["log_b"]] = 1.0
    J[1, :, idx["beta"]] = -log_dd
    for k, v in dlog_dd.items():
        J[1, :, idx[k]] += -beta * v
    J[2, :, idx["log_e"]] = 1.0
    if variant in _USES_D:
        terms.append(theta[idx["log_d"]] - alpha * log_nn - beta * log_dd)
        J[3, :, idx["log_d"]] = 1.0
        J[3, :, idx["alpha"]] = -log_nn
        J[3, :, idx["beta"]] = -log_dd
        for k, v in dlog_dd.items():
            J[3, :, idx[k]] += -beta * v
    return np.vstack(terms), J


def value_and_grad(variant, theta, n, d, u_d=None, activation: str = "gelu"):
    """Loss and its gradient w.r.t. the fit-space vector, per observation.

    Returns ``(loss, grad)`` with shapes (obs,) and (obs, params).
    """
    variant = Law(variant)
    theta = np.asarray(theta, dtype=float)
    T, J = log_terms(variant, theta, n, d, u_d)
    w = np.exp(T)
    loss = w.sum(axis=0)
    grad = np.einsum("to,top->op", w, J)
    if variant is Law.SMS:
        idx = {k: i for i, k in enumerate(PARAM_NAMES[variant])}
        k_d, k_n, k_u, k_in = (theta[idx[k]] for k in OVERFIT_NAMES)
        d = np.asarray(d, dtype=float)
        feats = np.stack([d, np.log(n), -np.log(u_d), -np.ones_like(d)], axis=1)
        z = feats @ np.array([k_d, k_n, k_u, k_in])
        act, act_prime = _activation(activation)
        loss = loss + act(z)
        grad[:, [idx[k] for k in OVERFIT_NAMES]] = act_prime(z)[:, None] * feats
    return loss, grad
