"""Fitting loss laws to training logs.

Stage 1 minimises ``sum_i Huber(LSE(log terms_i) - log L_i)`` with a
hand-written L-BFGS from the best few points of an initialisation grid.
For the SMS law, stage 2 regresses the residuals of the stage-1 fit, taken
after each curve's early-stop point, on ``[D, log N, -log U_D, -1]`` by
ordinary least squares to get the overfit coefficients.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

from abcscale.laws import (
    OVERFIT_NAMES,
    PARAM_NAMES,
    DomainError,
    Law,
    LawParams,
    OverfitParams,
    from_vector,
    log_terms,
    predict,
)

logger = logging.getLogger(__name__)

DEFAULT_HUBER_DELTA = 1e-3
# Used when a law has no post-early-stop data: the activation of -k_in is ~0.
_DORMANT_K_IN = 10.0


class FitError(ValueError):
    pass


class InsufficientData(FitError):
    pass


class NoConvergence(FitError):
    pass


class DegenerateData(FitError):
    pass


class TooFewPoints(FitError):
    pass


class NonFinite(FitError):
    pass


@dataclass(frozen=True)
class LossObservation:
    n: float
    d: float
    u_d: float
    loss: float
    run_id: str = ""

    def __post_init__(self):
        if not (self.n > 0 and self.d > 0 and self.u_d > 0):
            raise DomainError(f"n, d and u_d must be positive: {self}")
        if not (math.isfinite(self.loss) and self.loss > 0):
            raise DomainError(f"loss must be finite and positive: {self}")

    def sort_key(self):
        return (self.n, self.u_d, self.d, self.loss, self.run_id)


def load_observations(path) -> list[LossObservation]:
    """Read a JSON-lines loss log (``n``, ``u_d``, ``d``, ``loss``, ``run_id``)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(LossObservation(
                    n=float(rec["n"]), d=float(rec["d"]), u_d=float(rec["u_d"]),
                    loss=float(rec["loss"]), run_id=str(rec.get("run_id", "")),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise FitError(f"{path}:{lineno}: bad observation ({exc})") from exc
    return out


def write_observations(path, observations: Iterable[LossObservation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for o in observations:
            rec = {"n": int(o.n), "u_d": int(o.u_d), "d": int(o.d), "loss": o.loss, "run_id": o.run_id}
            fh.write(json.dumps(rec) + "\n")


# --- metrics ---------------------------------------------------------------

def huber(residual, delta: float = DEFAULT_HUBER_DELTA):
    """Elementwise Huber loss: ``r^2/2`` inside ``delta``, linear outside."""
    r = np.abs(np.asarray(residual, dtype=float))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(residual, delta: float = DEFAULT_HUBER_DELTA):
    r = np.asarray(residual, dtype=float)
    return np.clip(r, -delta, delta)


def r_squared(predictions, observations) -> float:
    pred = np.asarray(predictions, dtype=float)
    obs = np.asarray(observations, dtype=float)
    if obs.shape != pred.shape or obs.size < 2:
        raise DegenerateData("need at least two paired observations")
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateData("observations are constant")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / ss_tot


# --- objective -------------------------------------------------------------

def _arrays(observations: Sequence[LossObservation]):
    n = np.array([o.n for o in observations], dtype=float)
    d = np.array([o.d for o in observations], dtype=float)
    u = np.array([o.u_d for o in observations], dtype=float)
    y = np.array([o.loss for o in observations], dtype=float)
    return n, d, u, y


def lse_objective(theta, variant, observations: Sequence[LossObservation],
                  delta: float = DEFAULT_HUBER_DELTA, with_grad: bool = False):
    """Sum of Huber losses between log-sum-exp log predictions and log losses.

    ``theta`` is the fit-space vector of ``variant`` (see
    :data:`abcscale.laws.PARAM_NAMES`). Non-finite values propagate so that
    the line search rejects them; so does a parameter vector outside the
    law's domain, which scores ``inf``.
    """
    n, d, u, y = _arrays(observations)
    with np.errstate(all="ignore"):
        try:
            T, J = log_terms(variant, theta, n, d, u)
        except DomainError:
            return (math.inf, np.full(len(theta), np.nan)) if with_grad else math.inf
        log_pred = special.logsumexp(T, axis=0)
        r = log_pred - np.log(y)
        val = float(np.sum(huber(r, delta)))
        if not with_grad:
            return val
        w = special.softmax(T, axis=0)
        dlog = np.einsum("to,top->op", w, J)
        grad = huber_grad(r, delta) @ dlog
    return val, grad


# --- L-BFGS ----------------------------------------------------------------

@dataclass
class FitConfig:
    huber_delta: float = DEFAULT_HUBER_DELTA
    lbfgs_history: int = 10
    lbfgs_learning_rate: float = 1e-1
    max_iterations: int = 1000
    init_grid: Optional[list] = None
    early_stop_detection: Optional[bool] = None  # None: on for sms only
    n_starts: int = 8
    gtol: float = 1e-8
    armijo_c: float = 1e-4
    max_halvings: int = 20
    unit_scaling: bool = False
    activation: str = "gelu"

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.lbfgs_history < 1:
            raise ValueError("lbfgs_history must be at least 1")
        if not self.lbfgs_learning_rate > 0:
            raise ValueError("lbfgs_learning_rate must be positive")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    trace: list[float]
    n_iter: int
    converged: bool
    message: str

    def __iter__(self):
        # allows ``x, trace = lbfgs_minimize(...)``
        return iter((self.x, self.trace))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray) -> np.ndarray:
    """Central differences with step ``1e-6 * (1 + |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def two_loop_direction(g: np.ndarray, s_hist: Sequence[np.ndarray], y_hist: Sequence[np.ndarray],
                       unit_scaling: bool = False) -> np.ndarray:
    """Return ``-H g`` for the limited-memory inverse Hessian.

    ``H`` is built from ``H0`` by the updates ``H <- V^T H V + rho s s^T``
    with ``rho = 1/(y^T s)`` and ``V = I - rho y s^T`` over the stored
    pairs (oldest first). ``H0`` is the identity with ``unit_scaling``,
    otherwise ``(s^T y / y^T y) I`` from the newest pair.
    """
    q = g.copy()
    k = len(s_hist)
    rho = [1.0 / float(y_hist[i] @ s_hist[i]) for i in range(k)]
    alpha = [0.0] * k
    for i in range(k - 1, -1, -1):
        alpha[i] = rho[i] * float(s_hist[i] @ q)
        q -= alpha[i] * y_hist[i]
    if k and not unit_scaling:
        q *= float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
    for i in range(k):
        b = rho[i] * float(y_hist[i] @ q)
        q += (alpha[i] - b) * s_hist[i]
    return -q


def lbfgs_minimize(objective: Callable[[np.ndarray], float], gradient: Optional[Callable], x0,
                   cfg: Optional[FitConfig] = None) -> LbfgsResult:
    """Minimise ``objective`` from ``x0``.

    The first iteration steps ``learning_rate`` along ``-g``; later
    iterations try the full quasi-Newton step. Either is halved until the
    Armijo condition holds, so every recorded objective value is no larger
    than the previous one. Stops when ``|g| < gtol``, after
    ``max_iterations``, or when no halving gives a decrease.

    ``gradient=None`` falls back to :func:`central_difference`.

    Raises:
        NonFinite: the objective is not finite at ``x0``.
    """
    cfg = cfg or FitConfig()
    if gradient is None:
        def gradient(x):
            return central_difference(objective, x)

    x = np.array(x0, dtype=float)
    f = float(objective(x))
    if not math.isfinite(f):
        raise NonFinite(f"objective is {f} at the starting point")
    g = np.asarray(gradient(x), dtype=float)
    trace = [f]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    message = "max_iterations reached"
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if not np.all(np.isfinite(g)):
            message = "non-finite gradient"
            break
        if np.linalg.norm(g) < cfg.gtol:
            converged, message = True, "gradient norm below tolerance"
            break
        p = two_loop_direction(g, s_hist, y_hist, cfg.unit_scaling)
        slope = float(g @ p)
        if not slope < 0:
            s_hist.clear()
            y_hist.clear()
            p = -g
            slope = float(g @ p)
        t = cfg.lbfgs_learning_rate if not s_hist else 1.0
        for _ in range(cfg.max_halvings + 1):
            x_new = x + t * p
            f_new = float(objective(x_new))
            if math.isfinite(f_new) and f_new <= f + cfg.armijo_c * t * slope:
                break
            t *= 0.5
        else:
            converged, message = True, "no decrease along the search direction"
            break
        g_new = np.asarray(gradient(x_new), dtype=float)
        s = x_new - x
        y = g_new - g
        if float(s @ y) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.lbfgs_history:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
    return LbfgsResult(x=x, fun=f, trace=trace, n_iter=it, converged=converged, message=message)


# --- early stopping --------------------------------------------------------

def detect_early_stop(run: Sequence[LossObservation]) -> float:
    """Token count at the minimum of the 3-point moving average of one curve.

    The window is centred and shrinks at the ends; ties go to the smaller
    ``D``. Points beyond the returned value are the overfitting regime.
    """
    if len(run) < 3:
        raise TooFewPoints(f"need at least 3 points, got {len(run)}")
    pts = sorted(run, key=lambda o: o.d)
    loss = np.array([o.loss for o in pts])
    smooth = np.array([loss[max(i - 1, 0):i + 2].mean() for i in range(len(loss))])
    return pts[int(np.argmin(smooth))].d


def curves(observations: Iterable[LossObservation]) -> dict[tuple[float, float], list[LossObservation]]:
    """Group observations by (N, U_D)."""
    out: dict[tuple[float, float], list[LossObservation]] = defaultdict(list)
    for o in observations:
        out[(o.n, o.u_d)].append(o)
    return dict(sorted(out.items()))


def split_at_early_stop(observations: Sequence[LossObservation]):
    """Return ``(before, after)``; curves shorter than 3 points are all ``before``."""
    before, after = [], []
    for pts in curves(observations).values():
        if len(pts) < 3:
            before.extend(pts)
            continue
        stop = detect_early_stop(pts)
        for o in pts:
            (after if o.d > stop else before).append(o)
    key = LossObservation.sort_key
    return sorted(before, key=key), sorted(after, key=key)


# --- fitting ---------------------------------------------------------------

@dataclass
class FitReport:
    params: LawParams
    train_r2: float
    train_huber: float
    test_r2: Optional[float]
    test_huber: Optional[float]
    n_train: int
    n_test: int
    objective_trace: list[float] = field(default_factory=list)
    train_huber_log: float = float("nan")
    test_huber_log: Optional[float] = None
    n_overfit_points: int = 0

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "train_r2": self.train_r2,
            "train_huber": self.train_huber,
            "train_huber_log": self.train_huber_log,
            "test_r2": self.test_r2,
            "test_huber": self.test_huber,
            "test_huber_log": self.test_huber_log,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_overfit_points": self.n_overfit_points,
            "objective_trace": list(self.objective_trace),
        }


def split_largest_n(observations: Sequence[LossObservation], k: int = 2):
    """Hold out every observation of the ``k`` largest model sizes."""
    sizes = sorted({o.n for o in observations})
    held = set(sizes[-k:]) if len(sizes) > k else set()
    train = [o for o in observations if o.n not in held]
    test = [o for o in observations if o.n in held]
    return train, test


def default_init_grid(variant, observations: Sequence[LossObservation]) -> list[np.ndarray]:
    """Three values per axis; ``log E`` is anchored below the smallest loss."""
    variant = Law(variant)
    log_min = math.log(min(o.loss for o in observations))
    axes = {
        "log_a": (0.0, 5.0, 10.0),
        "log_b": (0.0, 5.0, 10.0),
        "log_e": (log_min - 1.5, log_min - 0.7, log_min - 0.2),
        "alpha": (0.2, 0.35, 0.5),
        "beta": (0.2, 0.35, 0.5),
        "logit_k": tuple(float(special.logit(k)) for k in (0.3, 0.7, 0.95)),
        "log_d": (0.0, 5.0, 10.0),
        "log_rd_star": tuple(math.log(r) for r in (1.0, 5.0, 15.0)),
        "log_rn_star": tuple(math.log(r) for r in (1.0, 5.0, 15.0)),
    }
    names = PARAM_NAMES[variant]
    if variant is Law.SMS:
        names = PARAM_NAMES[Law.ND_TERM]
    return [np.array(v, dtype=float) for v in itertools.product(*(axes[k] for k in names))]


def _fit_core(variant: Law, train: Sequence[LossObservation], cfg: FitConfig):
    delta = cfg.huber_delta

    def obj(th):
        return lse_objective(th, variant, train, delta)

    def grad(th):
        return lse_objective(th, variant, train, delta, with_grad=True)[1]

    grid = cfg.init_grid if cfg.init_grid is not None else default_init_grid(variant, train)
    grid = [np.asarray(g, dtype=float) for g in grid]
    scored = []
    for i, th in enumerate(grid):
        v = obj(th)
        if math.isfinite(v):
            scored.append((v, i))
    scored.sort()
    best = None
    for _, i in scored[: cfg.n_starts]:
        try:
            res = lbfgs_minimize(obj, grad, grid[i], cfg)
        except NonFinite:
            continue
        th = res.x
        alpha, beta = th[3], th[4]
        if not (math.isfinite(res.fun) and alpha > 0 and beta > 0 and np.all(np.isfinite(th))):
            continue
        try:
            from_vector(variant, th)
        except (OverflowError, DomainError):
            continue
        if best is None or (res.fun, i) < (best[0].fun, best[1]):
            best = (res, i)
    if best is None:
        raise NoConvergence(f"no start of the {variant.value} fit reached a valid optimum")
    return best[0]


def fit_overfit_term(core: LawParams, after: Sequence[LossObservation]) -> OverfitParams:
    """OLS of ``L_obs - L_core`` on ``[D, log N, -log U_D, -1]``.

    Columns are scaled to unit max-magnitude before solving; rank-deficient
    designs get the minimum-norm solution.
    """
    if not after:
        logger.warning("no observations past an early-stop point; overfit term left dormant")
        return OverfitParams(0.0, 0.0, 0.0, _DORMANT_K_IN)
    n, d, u, y = _arrays(after)
    resid = y - np.asarray(predict(core, n, d, u))
    X = np.stack([d, np.log(n), -np.log(u), -np.ones_like(d)], axis=1)
    scale = np.max(np.abs(X), axis=0)
    coef, *_ = np.linalg.lstsq(X / scale, resid, rcond=None)
    coef = coef / scale
    return OverfitParams(*(float(c) for c in coef))


def _metrics(p: LawParams, obs: Sequence[LossObservation], delta: float):
    n, d, u, y = _arrays(obs)
    pred = np.asarray(predict(p, n, d, u), dtype=float)
    try:
        r2 = r_squared(pred, y)
    except DegenerateData:
        r2 = float("nan")
    h = float(np.mean(huber(pred - y, delta)))
    with np.errstate(all="ignore"):
        h_log = float(np.mean(huber(np.log(pred) - np.log(y), delta)))
    return r2, h, h_log


def fit_law(variant, observations: Sequence[LossObservation], split: str = "largest-n",
            cfg: Optional[FitConfig] = None, holdout_sizes: int = 2) -> FitReport:
    """Fit one law and score it on the held-out largest model sizes.

    ``split`` is ``"largest-n"`` (test = the ``holdout_sizes`` largest N) or
    ``"none"``.
    With early-stop detection (default for ``sms`` only), non-SMS laws are
    fitted and scored only on points up to each curve's early-stop point;
    the SMS law fits its core there and its overfit term on the rest.
    Reported Huber values are per-observation means, on the loss scale and
    (``*_huber_log``) on the log scale.

    Raises:
        InsufficientData: fewer than 2 model sizes or 3 token counts to fit.
        NoConvergence: no start produced a finite optimum with positive exponents.
    """
    variant = Law(variant)
    cfg = cfg or FitConfig()
    obs = sorted(observations, key=LossObservation.sort_key)
    if split == "largest-n":
        train, test = split_largest_n(obs, holdout_sizes)
    elif split == "none":
        train, test = obs, []
    else:
        raise ValueError(f"unknown split {split!r}")

    early = cfg.early_stop_detection
    if early is None:
        early = variant is Law.SMS
    after: list[LossObservation] = []
    fit_set = train
    if early:
        fit_set, after = split_at_early_stop(train)
        if variant is not Law.SMS:
            train = fit_set
            test = split_at_early_stop(test)[0] if test else []

    if len({o.n for o in fit_set}) < 2 or len({o.d for o in fit_set}) < 3:
        raise InsufficientData("need at least 2 distinct N and 3 distinct D in the training set")

    core_variant = Law.ND_TERM if variant is Law.SMS else variant
    res = _fit_core(core_variant, fit_set, cfg)
    params = from_vector(core_variant, res.x)
    if variant is Law.SMS:
        overfit = fit_overfit_term(params, after)
        kw = params.to_json()
        kw.update(variant=Law.SMS, overfit=overfit, activation=cfg.activation)
        params = LawParams(**kw)

    train_r2, train_h, train_hl = _metrics(params, train, cfg.huber_delta)
    if test:
        test_r2, test_h, test_hl = _metrics(params, test, cfg.huber_delta)
    else:
        test_r2 = test_h = test_hl = None
    return FitReport(
        params=params,
        train_r2=train_r2, train_huber=train_h, train_huber_log=train_hl,
        test_r2=test_r2, test_huber=test_h, test_huber_log=test_hl,
        n_train=len(train), n_test=len(test),
        objective_trace=list(res.trace),
        n_overfit_points=len(after),
    )


def fit_report_from_json(obj: dict) -> FitReport:
    kw = dict(obj)
    kw["params"] = LawParams.from_json(kw["params"])
    return FitReport(**kw)


def save_report(report: FitReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2) + "\n")
