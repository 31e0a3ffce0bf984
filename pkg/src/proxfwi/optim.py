"""Proximal Newton solvers with black-box denoiser regularization.

The outer iteration is m_{k+1} = m_k + alpha_k * dm_k where dm_k approximately
minimizes the local quadratic misfit model plus the regularizer.  Two
direction solvers are provided: an accelerated proximal-gradient inner loop
driven purely by Hessian-vector products (``nista_direction``) and an
operator-splitting step that combines a damped Newton solve, a prox/denoise
step, and a dual update (``nadmm_step``).

The Hessian can be the oracle's exact/Gauss-Newton operator, a dense matrix
for toy sizes, a limited-memory quasi-Newton approximation built from outer
gradient pairs, a diagonal, or the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, NumericalError
from .linsys import spectral_norm

_CURVATURE_FLOOR = 1e-12


def _dot(a, b) -> float:
    return float(np.dot(np.ravel(a), np.ravel(b)))


def _norm(a) -> float:
    return float(np.linalg.norm(np.ravel(a)))


class CallbackOracle:
    """Misfit oracle assembled from plain callables.

    ``value(m)`` and ``gradient(m)`` are required; ``hvp(m, v)`` returns the
    (approximate) Hessian applied to v, and ``hessian_diag`` /
    ``hessian_dense`` are optional extras used by the corresponding inner
    solvers.
    """

    def __init__(self, value, gradient, hvp=None, hessian_diag=None, hessian_dense=None):
        self._value = value
        self._gradient = gradient
        self._hvp = hvp
        self._hessian_diag = hessian_diag
        self._hessian_dense = hessian_dense

    def value(self, m):
        return float(self._value(m))

    def gradient(self, m):
        return np.asarray(self._gradient(m), dtype=np.float64)

    def hvp(self, m, v):
        if self._hvp is None:
            raise ConfigError("oracle provides no Hessian-vector product")
        return np.asarray(self._hvp(m, v), dtype=np.float64)

    def hessian_diag(self, m):
        if self._hessian_diag is None:
            raise ConfigError("oracle provides no Hessian diagonal")
        return np.asarray(self._hessian_diag(m), dtype=np.float64)

    def hessian_dense(self, m):
        if self._hessian_dense is None:
            raise ConfigError("oracle provides no dense Hessian")
        return np.asarray(self._hessian_dense(m), dtype=np.float64)


def least_squares_oracle(a: np.ndarray, data: np.ndarray) -> CallbackOracle:
    """Oracle for the linear misfit 0.5 ||data - A m||^2."""
    a = np.asarray(a, dtype=np.float64)
    data = np.asarray(data, dtype=np.float64)
    gram = a.T @ a

    def value(m):
        r = data - a @ np.ravel(m)
        return 0.5 * float(np.dot(r, r))

    def gradient(m):
        m = np.asarray(m)
        return (gram @ np.ravel(m) - a.T @ data).reshape(m.shape)

    def hvp(m, v):
        v = np.asarray(v)
        return (gram @ np.ravel(v)).reshape(v.shape)

    return CallbackOracle(value, gradient, hvp, hessian_dense=lambda m: gram)


# ---------------------------------------------------------------------------
# limited-memory quasi-Newton Hessian


def lbfgs_apply_inverse(pairs, g, gamma_scaling: bool = True) -> np.ndarray:
    """Two-loop recursion: apply the quasi-Newton *inverse* Hessian to g.

    ``pairs`` is a sequence of (s, y) steps/gradient-differences; entries with
    nonpositive curvature s.y are skipped.  Empty history with unit scaling
    returns g unchanged.
    """
    g = np.asarray(g, dtype=np.float64)
    kept = [(s, y, 1.0 / _dot(s, y)) for s, y in pairs if _curvature_ok(s, y)]
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(kept):
        alpha = rho * _dot(s, q)
        q = q - alpha * np.asarray(y)
        alphas.append(alpha)
    if kept and gamma_scaling:
        s_last, y_last, _ = kept[-1]
        gamma = _dot(s_last, y_last) / _dot(y_last, y_last)
    else:
        gamma = 1.0
    r = gamma * q
    for (s, y, rho), alpha in zip(kept, reversed(alphas)):
        beta = rho * _dot(y, r)
        r = r + np.asarray(s) * (alpha - beta)
    return r


def _curvature_ok(s, y) -> bool:
    return _dot(s, y) > _CURVATURE_FLOOR * max(_norm(s) * _norm(y), 1e-300)


class LbfgsHessian:
    """Compact-form limited-memory BFGS Hessian (the direct operator B).

    Stores up to ``memory`` curvature pairs from the outer iteration and.
    supports applying B and solving (c*B + I) x = rhs exactly via a low-rank
    update formula, which is what the splitting step needs.
    """

    def __init__(self, memory: int = 10):
        if memory < 0:
            raise ConfigError("lbfgs memory must be nonnegative")
        self.memory = memory
        self._s: list[np.ndarray] = []
        self._y: list[np.ndarray] = []
        self.skipped = 0

    def __len__(self):
        return len(self._s)

    def update(self, s, y):
        if not _curvature_ok(s, y):
            self.skipped += 1
            return
        self._s.append(np.ravel(np.asarray(s, dtype=np.float64)).copy())
        self._y.append(np.ravel(np.asarray(y, dtype=np.float64)).copy())
        if len(self._s) > self.memory:
            self._s.pop(0)
            self._y.pop(0)

    @property
    def pairs(self):
        return list(zip(self._s, self._y))

    def _delta(self) -> float:
        if not self._s:
            return 1.0
        s, y = self._s[-1], self._y[-1]
        return _dot(y, y) / _dot(s, y)

    def _compact(self):
        s_mat = np.column_stack(self._s)
        y_mat = np.column_stack(self._y)
        delta = self._delta()
        sty = s_mat.T @ y_mat
        lower = np.tril(sty, k=-1)
        diag = np.diag(np.diag(sty))
        u = np.hstack([delta * s_mat, y_mat])
        mid = np.block([[delta * (s_mat.T @ s_mat), lower], [lower.T, -diag]])
        return delta, u, mid

    def apply(self, v) -> np.ndarray:
        """B v, matching the dense BFGS recursion started from delta*I."""
        v = np.asarray(v, dtype=np.float64)
        flat = np.ravel(v)
        if not self._s:
            return v.copy()
        delta, u, mid = self._compact()
        out = delta * flat - u @ np.linalg.solve(mid, u.T @ flat)
        return out.reshape(v.shape)

    def solve_shifted(self, c: float, rhs) -> np.ndarray:
        """Exact solve of (c*B + I) x = rhs via the low-rank structure."""
        rhs = np.asarray(rhs, dtype=np.float64)
        flat = np.ravel(rhs)
        delta = self._delta()
        a = c * delta + 1.0
        if not self._s or c == 0.0:
            return (rhs / a).copy() if c != 0.0 else rhs.copy()
        _, u, mid = self._compact()
        # (a I - U (c M^-1) U^T)^-1 = I/a + U (M/c - U^T U / a)^-1 U^T / a^2
        inner = mid / c - (u.T @ u) / a
        x = flat / a + u @ np.linalg.solve(inner, u.T @ flat / a) / a
        return x.reshape(rhs.shape)

    def apply_inverse(self, g, gamma_scaling: bool = True) -> np.ndarray:
        return lbfgs_apply_inverse(self.pairs, g, gamma_scaling)

    def norm_estimate(self, seed: int = 0) -> float:
        if not self._s:
            return 1.0
        n = self._s[0].size
        est = spectral_norm(lambda v: np.ravel(self.apply(v)), n, seed=seed)
        return est.value


# ---------------------------------------------------------------------------
# proximal gradient (the first-order kernel)


def proximal_gradient(
    oracle,
    denoiser,
    lam: float,
    m0,
    iters: int,
    accelerate: bool = True,
    c: float | None = None,
    seed: int = 0,
):
    """Accelerated proximal-gradient iteration on a smooth misfit.

    Each sweep takes a gradient step at the extrapolated point, applies the
    prox/denoiser with weight c*lam, then extrapolates with coefficient
    (k-1)/(k+2).  With ``accelerate=False`` this is the plain
    forward-backward iteration.
    """
    if lam < 0.0:
        raise ValueError("regularization weight must be nonnegative")
    m = np.asarray(m0, dtype=np.float64).copy()
    if c is None:
        est = spectral_norm(lambda v: np.ravel(oracle.hvp(m, v.reshape(m.shape))), m.size, seed=seed)
        c = 0.9 / est.value if est.value > 0.0 else 1.0
    p = m.copy()
    for k in range(1, iters + 1):
        g = oracle.gradient(p)
        m_new = denoiser.apply(p - c * g, c * lam)
        if not np.all(np.isfinite(m_new)):
            raise NumericalError(f"proximal gradient diverged at iteration {k} (step {c:g})")
        if accelerate:
            p = m_new + ((k - 1.0) / (k + 2.0)) * (m_new - m)
        else:
            p = m_new
        m = m_new
    if not math.isfinite(oracle.value(m)):
        raise NumericalError("proximal gradient produced a non-finite objective")
    return m


# ---------------------------------------------------------------------------
# line search


class LineSearchResult(NamedTuple):
    alpha: float
    value: float
    accepted: bool
    trials: int


def line_search(
    f: Callable,
    m,
    dm,
    sigma_ls: float = 1e-4,
    beta_ls: float = 0.5,
    max_trials: int = 25,
    ck: float = 1.0,
    f0: float | None = None,
) -> LineSearchResult:
    """Backtracking over alpha in {1, beta, beta^2, ...}.

    Accepts the largest alpha satisfying
    f(m + alpha dm) <= f(m) - sigma_ls * alpha * ||dm||^2 / ck  (ties accept).
    If no trial passes, the best-objective trial is returned flagged.
    """
    if _norm(dm) == 0.0:
        raise ValueError("line search needs a nonzero direction")
    if f0 is None:
        f0 = float(f(m))
    if not math.isfinite(f0):
        raise NumericalError("line search started from a non-finite objective")
    decrease = sigma_ls * _dot(dm, dm) / ck
    alpha = 1.0
    best = (math.inf, 1.0)
    for trial in range(1, max_trials + 1):
        f_trial = float(f(m + alpha * np.asarray(dm)))
        if math.isfinite(f_trial):
            if f_trial <= f0 - alpha * decrease:
                return LineSearchResult(alpha, f_trial, True, trial)
            if f_trial < best[0]:
                best = (f_trial, alpha)
        alpha *= beta_ls
    if math.isinf(best[0]):
        raise NumericalError("line search found no finite objective value")
    return LineSearchResult(best[1], best[0], False, max_trials)


# ---------------------------------------------------------------------------
# direction solvers


def nista_direction(
    oracle,
    m_k,
    denoiser,
    lam: float,
    ck: float,
    n_inner: int,
    dp0=None,
    h_apply: Callable | None = None,
    grad=None,
):
    """Search direction from the accelerated proximal-gradient inner loop.

    Runs exactly ``n_inner`` sweeps of: gradient step on the quadratic model
    (one Hessian-vector product), prox of the shifted point, Nesterov
    extrapolation with coefficient (l-1)/(l+2), starting from ``dp0`` (zero
    by default).  Returns (dm, dp_final); dp_final can warm-start the next
    outer iteration.
    """
    if ck <= 0.0:
        raise ValueError("step size ck must be positive")
    if n_inner < 1:
        raise ValueError("need at least one inner iteration")
    m_k = np.asarray(m_k, dtype=np.float64)
    if grad is None:
        grad = oracle.gradient(m_k)
    if h_apply is None:
        h_apply = lambda v: oracle.hvp(m_k, v)
    dp = np.zeros_like(m_k) if dp0 is None else np.asarray(dp0, dtype=np.float64).copy()
    dm = dp.copy()
    scale = ck * lam
    for ell in range(1, n_inner + 1):
        dm_half = dp - ck * (np.asarray(h_apply(dp)) + grad)
        dm_new = denoiser.apply(m_k + dm_half, scale) - m_k
        if not np.all(np.isfinite(dm_new)):
            raise NumericalError(f"inner iterate diverged at sweep {ell} (ck={ck:g})")
        dp = dm_new + ((ell - 1.0) / (ell + 2.0)) * (dm_new - dm)
        dm = dm_new
    return dm, dp


@dataclass
class InversionState:
    """Iterate plus splitting auxiliaries and per-step diagnostics."""

    m: np.ndarray
    p: np.ndarray
    q: np.ndarray
    ck: float = 1.0
    k: int = 0
    history: list = field(default_factory=list)
    last_dm: np.ndarray | None = None
    last_alpha: float = 1.0
    last_accepted: bool = True
    last_misfit: float = math.nan

    @classmethod
    def initial(cls, m0) -> "InversionState":
        m0 = np.asarray(m0, dtype=np.float64).copy()
        return cls(m=m0, p=np.zeros_like(m0), q=np.zeros_like(m0))


def _materialize_hessian(oracle, m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if hasattr(oracle, "hessian_dense"):
        try:
            h = np.asarray(oracle.hessian_dense(m), dtype=np.float64)
            return 0.5 * (h + h.T)
        except ConfigError:
            pass
    n = m.size
    if n > 64:
        raise ConfigError(f"dense Hessian solver limited to 64 unknowns, got {n}")
    h = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        h[:, j] = np.ravel(oracle.hvp(m, e.reshape(m.shape)))
    return 0.5 * (h + h.T)


def _psd_guard(h: np.ndarray) -> np.ndarray:
    """Shift eigenvalues so the quadratic model is convex (inner loops need it)."""
    eigs = np.linalg.eigvalsh(h)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(eigs))))
    if eigs[0] < floor:
        h = h + (floor - eigs[0]) * np.eye(h.shape[0])
    return h


def nadmm_step(
    oracle,
    state: InversionState,
    denoiser,
    lam: float,
    ck: float,
    inner_solver: str = "exact-dense",
    solve_shifted: Callable | None = None,
    grad=None,
    value: float | None = None,
    ls_sigma: float = 1e-4,
    ls_shrink: float = 0.5,
    ls_max_trials: int = 25,
) -> InversionState:
    """One splitting step: damped Newton solve, line search, prox, dual update.

    Solves (ck*H + I) dm = -ck*grad + (p + q - m) with the chosen inner
    solver, line-searches the damped merit M(m) + ||m - (p+q)||^2 / (2 ck),
    then updates p by denoising (m_new - q) and q by the running constraint
    mismatch.
    """
    if ck <= 0.0:
        raise ValueError("step size ck must be positive")
    m, p, q = state.m, state.p, state.q
    if grad is None:
        grad = oracle.gradient(m)
    grad = np.asarray(grad, dtype=np.float64)

    if solve_shifted is None:
        if inner_solver == "exact-dense":
            h = _psd_guard(_materialize_hessian(oracle, m))
            solve_shifted = lambda c, rhs: np.linalg.solve(
                c * h + np.eye(h.shape[0]), np.ravel(rhs)
            ).reshape(np.asarray(rhs).shape)
        elif inner_solver == "diagonal":
            d = np.maximum(np.asarray(oracle.hessian_diag(m), dtype=np.float64), 0.0)
            solve_shifted = lambda c, rhs: np.asarray(rhs) / (c * d + 1.0)
        elif inner_solver == "lbfgs":
            raise ConfigError("lbfgs inner solver needs the driver's pair history")
        else:
            raise ConfigError(f"unknown inner solver {inner_solver!r}")

    prior = p + q
    rhs = -ck * grad + (prior - m)
    dm = np.asarray(solve_shifted(ck, rhs), dtype=np.float64)
    if not np.all(np.isfinite(dm)):
        raise NumericalError("inner solver produced a non-finite direction")

    def damped(mm):
        diff = mm - prior
        return oracle.value(mm) + _dot(diff, diff) / (2.0 * ck)

    f0 = None
    if value is not None:
        diff0 = m - prior
        f0 = value + _dot(diff0, diff0) / (2.0 * ck)
    if f0 is None:
        diff0 = m - prior
        f0 = oracle.value(m) + _dot(diff0, diff0) / (2.0 * ck)
    ls = line_search(
        damped, m, dm, sigma_ls=ls_sigma, beta_ls=ls_shrink,
        max_trials=ls_max_trials, ck=ck, f0=f0,
    )
    if ls.accepted or ls.value < f0:
        alpha = ls.alpha
        m_new = m + alpha * dm
        merit_new = ls.value
    else:  # never move uphill; hold the iterate and let the caller decide
        alpha = 0.0
        m_new = m
        merit_new = f0
    diff_new = m_new - prior
    misfit_new = merit_new - _dot(diff_new, diff_new) / (2.0 * ck)
    p_new = denoiser.apply(m_new - q, ck * lam)
    q_new = q + p_new - m_new
    if not (np.all(np.isfinite(m_new)) and np.all(np.isfinite(p_new))):
        raise NumericalError("splitting update produced non-finite values")

    state.m, state.p, state.q = m_new, p_new, q_new
    state.ck = ck
    state.k += 1
    state.last_dm = dm
    state.last_alpha = alpha
    state.last_accepted = ls.accepted
    state.last_misfit = misfit_new
    return state


# ---------------------------------------------------------------------------
# outer driver


@dataclass
class OptConfig:
    """Outer-loop settings shared by both direction solvers."""

    lam: float = 0.0
    c_rule: str = "auto-spectral"  # or "fixed"
    c_fixed: float = 1.0
    c_safety: float = 0.9  # ck = c_safety / sigma_max(H_k)
    c_literal_squared: bool = False  # ck = 1 / sigma_max^2 instead
    max_outer: int = 70
    inner_iters: int = 100
    ls_shrink: float = 0.5
    ls_sigma: float = 1e-4
    ls_max_trials: int = 25
    lbfgs_memory: int = 10
    warm_start: bool = False
    hessian: str = "hvp"  # hvp | exact-dense | lbfgs | diagonal | identity
    c_freeze_after: int = 3  # splitting method: stop re-estimating ck after this outer
    stopping: str = "max-iter"  # max-iter | model-error-target | data-residual-target
    stop_target: float | None = None
    stop_metric: Callable | None = None
    step_floor: float = 1e-14
    seed: int = 0

    def validate(self):
        if self.lam < 0.0:
            raise ConfigError("regularization weight must be nonnegative")
        if not (0.0 < self.ls_shrink < 1.0):
            raise ConfigError("line search shrink factor must be in (0, 1)")
        if not (0.0 < self.ls_sigma < 1.0):
            raise ConfigError("sufficient-decrease constant must be in (0, 1)")
        if self.lbfgs_memory < 0:
            raise ConfigError("lbfgs memory must be nonnegative")
        if self.hessian not in ("hvp", "exact-dense", "lbfgs", "diagonal", "identity"):
            raise ConfigError(f"unknown hessian mode {self.hessian!r}")
        if self.c_rule not in ("auto-spectral", "fixed"):
            raise ConfigError(f"unknown c rule {self.c_rule!r}")
        if self.stopping not in ("max-iter", "model-error-target", "data-residual-target"):
            raise ConfigError(f"unknown stopping rule {self.stopping!r}")
        if self.stopping != "max-iter" and self.stop_target is None:
            raise ConfigError("target stopping rules need stop_target")


class HistoryRow(NamedTuple):
    iteration: int
    objective: float
    misfit: float
    reg_value: float
    alpha: float
    step_norm: float
    ck: float


@dataclass
class SolveResult:
    m: np.ndarray
    history: list
    status: str
    n_outer: int


def _cg_shifted(h_apply, c, rhs, tol=1e-12, max_iter=None):
    rhs = np.asarray(rhs, dtype=np.float64)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = _dot(r, r)
    rhs_norm = math.sqrt(rs)
    if rhs_norm == 0.0:
        return x
    limit = max_iter if max_iter is not None else max(200, 2 * rhs.size)
    for _ in range(limit):
        hp = c * np.asarray(h_apply(p)) + p
        alpha = rs / _dot(p, hp)
        x = x + alpha * p
        r = r - alpha * hp
        rs_new = _dot(r, r)
        if math.sqrt(rs_new) <= tol * rhs_norm:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def _hessian_ops(mode, oracle, m, lbfgs_hess, seed):
    """Per-outer (h_apply, solve_shifted, sigma_max) for the chosen mode."""
    m = np.asarray(m, dtype=np.float64)
    if mode == "identity":
        return (lambda v: np.asarray(v)), (lambda c, rhs: np.asarray(rhs) / (c + 1.0)), 1.0
    if mode == "diagonal":
        d = np.maximum(np.asarray(oracle.hessian_diag(m), dtype=np.float64), 0.0)
        return (
            lambda v: d * np.asarray(v),
            lambda c, rhs: np.asarray(rhs) / (c * d + 1.0),
            float(np.max(d)) if d.size else 0.0,
        )
    if mode == "exact-dense":
        h = _psd_guard(_materialize_hessian(oracle, m))
        eye = np.eye(h.shape[0])

        def h_apply(v):
            v = np.asarray(v)
            return (h @ np.ravel(v)).reshape(v.shape)

        def solve_shifted(c, rhs):
            rhs = np.asarray(rhs)
            return np.linalg.solve(c * h + eye, np.ravel(rhs)).reshape(rhs.shape)

        return h_apply, solve_shifted, float(np.max(np.abs(np.linalg.eigvalsh(h))))
    if mode == "lbfgs":
        return (
            lbfgs_hess.apply,
            lbfgs_hess.solve_shifted,
            lbfgs_hess.norm_estimate(seed=seed),
        )
    # raw Hessian-vector products
    h_apply = lambda v: np.asarray(oracle.hvp(m, v))
    est = spectral_norm(lambda v: np.ravel(h_apply(v.reshape(m.shape))), m.size, seed=seed)
    return h_apply, (lambda c, rhs: _cg_shifted(h_apply, c, rhs)), est.value


def _step_size(config: OptConfig, sigma: float) -> float:
    if config.c_rule == "fixed":
        return config.c_fixed
    if sigma <= 0.0:
        return config.c_fixed
    if config.c_literal_squared:
        return 1.0 / sigma**2
    return config.c_safety / sigma


def proximal_newton_solve(
    oracle,
    denoiser,
    config: OptConfig,
    m0,
    method: str = "nadmm",
) -> SolveResult:
    """Outer proximal-Newton loop with either direction solver.

    Stops on the configured rule, on three consecutive failed line searches
    (returning the best iterate seen), or when the step collapses to rounding
    level.  History rows carry (objective, misfit, reg, alpha, step, ck).
    """
    if method not in ("nista", "nadmm"):
        raise ConfigError(f"unknown method {method!r}")
    config.validate()
    lam = config.lam
    state = InversionState.initial(np.asarray(m0, dtype=np.float64))
    lbfgs_hess = LbfgsHessian(config.lbfgs_memory) if config.hessian == "lbfgs" else None
    pen = getattr(denoiser, "penalty", None)

    stop_metric = config.stop_metric
    if config.stopping == "data-residual-target" and stop_metric is None:
        if not hasattr(oracle, "data_residual_norm"):
            raise ConfigError("oracle provides no data residual for this stopping rule")
        stop_metric = oracle.data_residual_norm
    if config.stopping == "model-error-target" and stop_metric is None:
        raise ConfigError("model-error-target stopping needs an explicit stop_metric")

    def composite(mm, misfit=None):
        val = oracle.value(mm) if misfit is None else misfit
        if pen is None:
            return val, math.nan
        r = pen(mm)
        if r is None:
            return val, math.nan
        return val + lam * r, lam * r

    prev_m = prev_g = None
    dp_warm = None
    stagnation = 0
    status = "max-iter"
    best_obj, best_m = math.inf, state.m.copy()
    n_outer = 0

    for k in range(config.max_outer):
        if hasattr(oracle, "begin_outer"):
            oracle.begin_outer(state.m)
        if stop_metric is not None and stop_metric(state.m) <= config.stop_target:
            status = "target-reached"
            break
        g = oracle.gradient(state.m)
        val = oracle.value(state.m)
        if lbfgs_hess is not None and prev_g is not None:
            lbfgs_hess.update(state.m - prev_m, g - prev_g)
        if lbfgs_hess is not None and len(lbfgs_hess) == 0:
            # empty memory means B = I, which can be wildly misscaled; probe
            # the curvature along the gradient with one extra evaluation
            g_norm = _norm(g)
            if g_norm > 0.0:
                probe = (-1e-4 * (1.0 + _norm(state.m)) / g_norm) * g
                lbfgs_hess.update(probe, oracle.gradient(state.m + probe) - g)
        prev_m, prev_g = state.m.copy(), g.copy()

        h_apply, solve_shifted, sigma = _hessian_ops(
            config.hessian, oracle, state.m, lbfgs_hess, config.seed
        )
        if method == "nadmm" and k >= config.c_freeze_after and k > 0:
            ck = state.ck
        else:
            ck = _step_size(config, sigma)
        if ck <= 0.0 or not math.isfinite(ck):
            raise NumericalError(f"invalid step size ck={ck!r} at outer {k}")

        if method == "nista":
            dm, dp_next = nista_direction(
                oracle, state.m, denoiser, lam, ck, config.inner_iters,
                dp0=dp_warm if config.warm_start else None,
                h_apply=h_apply, grad=g,
            )
            if _norm(dm) == 0.0:
                status = "step-floor"
                break
            f0, _ = composite(state.m, misfit=val)
            merit = lambda mm: composite(mm)[0]
            ls = line_search(
                merit, state.m, dm, sigma_ls=config.ls_sigma, beta_ls=config.ls_shrink,
                max_trials=config.ls_max_trials, ck=ck, f0=f0,
            )
            if ls.accepted or ls.value < f0:
                state.last_alpha = ls.alpha
                state.m = state.m + ls.alpha * dm
                obj = ls.value
            else:
                state.last_alpha = 0.0
                obj = f0
            state.ck = ck
            state.k += 1
            state.last_dm = dm
            state.last_accepted = ls.accepted
            dp_warm = dp_next
            reg = lam * pen(state.m) if pen is not None and pen(state.m) is not None else math.nan
            misfit = obj - reg if math.isfinite(reg) else obj
        else:
            state = nadmm_step(
                oracle, state, denoiser, lam, ck,
                solve_shifted=solve_shifted, grad=g, value=val,
                ls_sigma=config.ls_sigma, ls_shrink=config.ls_shrink,
                ls_max_trials=config.ls_max_trials,
            )
            misfit = state.last_misfit
            obj, reg = composite(state.m, misfit=misfit)

        step_norm = state.last_alpha * _norm(state.last_dm)
        state.history.append(
            HistoryRow(state.k, obj, misfit, reg, state.last_alpha, step_norm, ck)
        )
        n_outer = k + 1
        if obj < best_obj:
            best_obj, best_m = obj, state.m.copy()

        if not state.last_accepted:
            stagnation += 1
            if stagnation >= 3:
                status = "stagnated"
                state.m = best_m
                break
        else:
            stagnation = 0
            if step_norm <= config.step_floor * (1.0 + _norm(state.m)):
                status = "step-floor"
                break

    return SolveResult(m=state.m, history=state.history, status=status, n_outer=n_outer)


def history_to_csv(history, path):
    """Write the convergence history in the exported CSV layout."""
    with open(path, "w") as fh:
        fh.write("iter,objective,misfit,reg_value,alpha,step_norm,ck\n")
        for row in history:
            fh.write(
                f"{row.iteration},{row.objective:.17g},{row.misfit:.17g},"
                f"{row.reg_value:.17g},{row.alpha:.17g},{row.step_norm:.17g},{row.ck:.17g}\n"
            )
