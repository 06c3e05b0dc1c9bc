"""Linear mixed-effects regression with crossed random effects.

The model is ``y = X beta + Z b + e`` with ``b = Lambda(theta) u``,
``u ~ N(0, sigma^2 I)`` and ``e ~ N(0, sigma^2 I)``.  For a given relative
covariance factor ``theta`` the fixed effects and ``sigma^2`` are profiled
out in closed form from the penalized least-squares system, leaving a
deviance in ``theta`` alone that is minimized numerically (ML or REML).

Random-effects columns are ordered term-major within each grouping factor,
so a factor with k terms and L levels has ``Lambda = kron(T, I_L)`` where
``T`` is the k x k lower-triangular relative Cholesky factor (diagonal
when ``covariance="diagonal"``).

The largest scalar random term (e.g. a by-word intercept) has a diagonal
block in ``Z'Z`` and is eliminated analytically; the remaining block is
handled densely.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaincc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError, UsageError

log = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"
SINGULAR_TOL = 1e-10


@dataclass(frozen=True)
class LMMSpec:
    """Model formula.

    ``random_slopes`` are ``(factor, column)`` pairs.  A slope column does
    not have to be a fixed effect, so a reduced model may drop a fixed
    effect while keeping its by-subject slope (the usual way to test a
    single fixed effect with one degree of freedom).
    """

    response: str = "rt"
    fixed: tuple = ()
    random_intercepts: tuple = ()
    random_slopes: tuple = ()
    covariance: str = "diagonal"
    criterion: str = "REML"

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random_intercepts", tuple(self.random_intercepts))
        object.__setattr__(self, "random_slopes", tuple(tuple(s) for s in self.random_slopes))
        if self.covariance not in ("diagonal", "full"):
            raise ConfigurationError(f"covariance must be 'diagonal' or 'full', got {self.covariance!r}")
        if self.criterion not in ("ML", "REML"):
            raise ConfigurationError(f"criterion must be 'ML' or 'REML', got {self.criterion!r}")
        if len(set(self.fixed)) != len(self.fixed):
            raise ConfigurationError("duplicate fixed effects")

    def factors(self) -> list:
        out = []
        for f in list(self.random_intercepts) + [f for f, _ in self.random_slopes]:
            if f not in out:
                out.append(f)
        return out

    def terms(self) -> list:
        """Random terms as ``(factor, column)``, column None for intercepts."""
        out = []
        for f in self.factors():
            if f in self.random_intercepts:
                out.append((f, None))
            out.extend((f, c) for g, c in self.random_slopes if g == f)
        return out

    def columns(self) -> list:
        cols = [self.response, *self.fixed, *self.factors()]
        cols += [c for _, c in self.random_slopes]
        return list(dict.fromkeys(cols))

    def validate(self, table: pd.DataFrame):
        missing = [c for c in self.columns() if c not in table.columns]
        if missing:
            raise ConfigurationError(f"columns missing from table: {missing}")
        if len(set(self.terms())) != len(self.terms()):
            raise ConfigurationError("duplicate random terms")
        return self

    def drop_fixed(self, name: str) -> "LMMSpec":
        if name not in self.fixed:
            raise ConfigurationError(f"{name!r} is not a fixed effect")
        return replace(self, fixed=tuple(f for f in self.fixed if f != name))

    def with_criterion(self, criterion: str) -> "LMMSpec":
        return replace(self, criterion=criterion)

    def n_theta(self) -> int:
        if self.covariance == "diagonal":
            return len(self.terms())
        n = 0
        for f in self.factors():
            k = sum(1 for g, _ in self.terms() if g == f)
            n += k * (k + 1) // 2
        return n

    def n_params(self) -> int:
        """Fixed effects (with intercept) + covariance parameters + residual."""
        return 1 + len(self.fixed) + self.n_theta() + 1


@dataclass
class _Block:
    """One covariance block: a factor's terms sharing a relative Cholesky factor."""

    factor: str
    names: list
    n_levels: int
    start: int
    theta_slice: slice

    @property
    def k(self):
        return len(self.names)

    @property
    def width(self):
        return self.k * self.n_levels


@dataclass
class Design:
    X: np.ndarray
    y: np.ndarray
    Z: sp.csc_matrix
    fixed_names: list
    blocks: list
    levels: dict
    spec: LMMSpec

    @property
    def n_theta(self):
        return sum(b.theta_slice.stop - b.theta_slice.start for b in self.blocks)


def build_design(table: pd.DataFrame, spec: LMMSpec) -> Design:
    """Fixed-effects matrix (intercept first) and sparse random-effects matrix."""
    spec.validate(table)
    n = len(table)
    y = table[spec.response].to_numpy(dtype=float)
    X = np.column_stack([np.ones(n)] + [table[c].to_numpy(dtype=float) for c in spec.fixed])
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ConfigurationError("design contains non-finite values")

    blocks, levels, cols = [], {}, []
    start = t0 = 0
    terms = spec.terms()
    for factor in spec.factors():
        codes, uniques = pd.factorize(table[factor], sort=True)
        levels[factor] = list(uniques)
        L = len(uniques)
        names = [c if c is not None else INTERCEPT for g, c in terms if g == factor]
        for name in names:
            vals = np.ones(n) if name == INTERCEPT else table[name].to_numpy(dtype=float)
            cols.append(sp.csc_matrix((vals, (np.arange(n), codes)), shape=(n, L)))
        if spec.covariance == "diagonal":
            for j, name in enumerate(names):
                blocks.append(_Block(factor, [name], L, start + j * L, slice(t0, t0 + 1)))
                t0 += 1
        else:
            k = len(names)
            blocks.append(_Block(factor, names, L, start, slice(t0, t0 + k * (k + 1) // 2)))
            t0 += k * (k + 1) // 2
        start += len(names) * L
    Z = sp.hstack(cols, format="csc") if cols else sp.csc_matrix((n, 0))
    return Design(X, y, Z, [INTERCEPT, *spec.fixed], blocks, levels, spec)


def _tri(theta_block, k):
    T = np.zeros((k, k))
    T[np.tril_indices(k)] = theta_block
    return T


class _Deviance:
    """Profiled (RE)ML deviance as a function of theta."""

    def __init__(self, design: Design, reml: bool):
        self.d = design
        self.reml = reml
        X, y, Z = design.X, design.y, design.Z
        self.n, self.p = X.shape
        self.q = Z.shape[1]
        XY = np.column_stack([X, y])
        self.cross = XY.T @ XY

        # diagonal block: the scalar block with the most levels
        scalar = [b for b in design.blocks if b.k == 1]
        self.dblock = max(scalar, key=lambda b: b.n_levels) if scalar else None
        idx = np.arange(self.q)
        if self.dblock is not None:
            dcols = np.arange(self.dblock.start, self.dblock.start + self.dblock.n_levels)
        else:
            dcols = np.empty(0, dtype=int)
        rcols = np.setdiff1d(idx, dcols)
        self.dcols, self.rcols = dcols, rcols
        ZD, ZR = Z[:, dcols], Z[:, rcols]
        self.zdd = np.asarray(ZD.multiply(ZD).sum(axis=0)).ravel()
        self.ZDR = (ZD.T @ ZR).toarray()
        self.ZRR = (ZR.T @ ZR).toarray()
        self.ZD_XY = np.asarray(ZD.T @ XY)
        self.ZR_XY = np.asarray(ZR.T @ XY)
        self.rblocks = [b for b in design.blocks if b is not self.dblock]
        self.lower = np.concatenate([_lower_bounds(b) for b in design.blocks]) if design.blocks else np.empty(0)
        self.evals = 0

    def lambda_r(self, theta):
        """Relative covariance factor of the non-diagonal part, dense or as a vector."""
        pos = 0
        if all(b.k == 1 for b in self.rblocks):
            lam = np.empty(len(self.rcols))
            for b in self.rblocks:
                lam[pos : pos + b.width] = theta[b.theta_slice][0]
                pos += b.width
            return lam
        lam = np.zeros((len(self.rcols), len(self.rcols)))
        for b in self.rblocks:
            T = _tri(theta[b.theta_slice], b.k)
            lam[pos : pos + b.width, pos : pos + b.width] = np.kron(T, np.eye(b.n_levels))
            pos += b.width
        return lam

    def solve(self, theta):
        """Everything the deviance and the estimates need at ``theta``."""
        self.evals += 1
        lam_r = self.lambda_r(theta)
        lam_d = theta[self.dblock.theta_slice][0] if self.dblock is not None else 0.0
        if lam_r.ndim == 1:
            A_RR = self.ZRR * np.outer(lam_r, lam_r)
            A_DR = lam_d * self.ZDR * lam_r[None, :]
            G_R = lam_r[:, None] * self.ZR_XY
        else:
            A_RR = lam_r.T @ self.ZRR @ lam_r
            A_DR = lam_d * self.ZDR @ lam_r
            G_R = lam_r.T @ self.ZR_XY
        A_RR[np.diag_indices_from(A_RR)] += 1.0
        Dd = lam_d**2 * self.zdd + 1.0
        G_D = lam_d * self.ZD_XY
        S = A_RR - A_DR.T @ (A_DR / Dd[:, None])
        if S.size:
            L_S = np.linalg.cholesky(S)
            logdet = np.log(Dd).sum() + 2.0 * np.log(np.diag(L_S)).sum()
            rhs = G_R - A_DR.T @ (G_D / Dd[:, None])
            y_R = sla.cho_solve((L_S, True), rhs)
        else:
            logdet = np.log(Dd).sum()
            y_R = np.zeros((0, G_D.shape[1]))
        y_D = (G_D - A_DR @ y_R) / Dd[:, None]
        Q = G_D.T @ y_D + G_R.T @ y_R
        C = self.cross - Q
        p = self.p
        Sxx, Sxy, Syy = C[:p, :p], C[:p, p], C[p, p]
        L_X = np.linalg.cholesky(Sxx)
        beta = sla.cho_solve((L_X, True), Sxy)
        r2 = max(Syy - Sxy @ beta, 1e-300)
        return dict(logdet=logdet, L_X=L_X, beta=beta, r2=r2, y_D=y_D, y_R=y_R, lam_r=lam_r, lam_d=lam_d)

    def deviance_from(self, s):
        n, p = self.n, self.p
        if self.reml:
            dof = n - p
            return (
                s["logdet"]
                + 2.0 * np.log(np.diag(s["L_X"])).sum()
                + dof * (1.0 + math.log(2.0 * math.pi * s["r2"] / dof))
            )
        return s["logdet"] + n * (1.0 + math.log(2.0 * math.pi * s["r2"] / n))

    def __call__(self, theta):
        try:
            return self.deviance_from(self.solve(np.asarray(theta, dtype=float)))
        except np.linalg.LinAlgError:
            return np.inf

    def gradient(self, theta, h=1e-6):
        theta = np.asarray(theta, dtype=float)
        g = np.empty_like(theta)
        for j in range(theta.size):
            step = h * max(1.0, abs(theta[j]))
            up = theta.copy()
            up[j] += step
            down = theta.copy()
            down[j] -= step
            if down[j] < self.lower[j]:
                g[j] = (self(up) - self(theta)) / step
            else:
                g[j] = (self(up) - self(down)) / (2 * step)
        return g


def _lower_bounds(block):
    if block.k == 1:
        return np.zeros(1)
    rows, cols = np.tril_indices(block.k)
    return np.where(rows == cols, 0.0, -np.inf)


def _initial_theta(design):
    parts = []
    for b in design.blocks:
        rows, cols = np.tril_indices(b.k)
        parts.append(np.where(rows == cols, 1.0, 0.0))
    return np.concatenate(parts) if parts else np.empty(0)


@dataclass
class LMMFit:
    spec: LMMSpec
    beta: pd.Series
    se: pd.Series
    t: pd.Series
    vcov: pd.DataFrame
    varcomp: dict
    covariances: dict
    sigma2: float
    loglik: float
    deviance: float
    converged: bool
    iterations: int
    singular: list
    nobs: int
    n_params: int
    theta: np.ndarray
    ranef: dict = field(repr=False, default_factory=dict)
    message: str = ""

    @property
    def criterion(self):
        return self.spec.criterion

    def coef_table(self) -> pd.DataFrame:
        """Fixed effects as columns ``term, beta, se, t``."""
        return pd.DataFrame(
            {"term": self.beta.index, "beta": self.beta.values, "se": self.se.values, "t": self.t.values}
        )

    def varcomp_table(self) -> pd.DataFrame:
        rows = [{"component": k, "variance": v, "sd": math.sqrt(v)} for k, v in self.varcomp.items()]
        return pd.DataFrame(rows)

    def report(self) -> str:
        lines = [
            f"criterion: {self.criterion}  loglik: {self.loglik:.4f}  nobs: {self.nobs}  "
            f"converged: {self.converged}  iterations: {self.iterations}",
            self.coef_table().to_string(index=False, float_format=lambda v: f"{v:.4f}"),
            "",
            self.varcomp_table().to_string(index=False, float_format=lambda v: f"{v:.6g}"),
        ]
        if self.singular:
            lines.append("singular components: " + ", ".join(self.singular))
        return "\n".join(lines)


def fit_lmm(table: pd.DataFrame, spec: LMMSpec, max_iter: int = 500, tol: float = 1e-8) -> LMMFit:
    """Fit ``spec`` to ``table`` by minimizing the profiled (RE)ML deviance.

    Covariance parameters are optimized with bounded L-BFGS-B (lower bound 0
    on every relative standard deviation, so singular fits reach the
    boundary exactly); a bounded Nelder-Mead pass polishes the optimum.
    """
    design = build_design(table, spec)
    n, p = design.X.shape
    if n <= p + design.n_theta:
        raise ConfigurationError(f"{n} rows cannot identify {p + design.n_theta + 1} parameters")
    if np.linalg.matrix_rank(design.X) < p:
        raise ConfigurationError("fixed-effects design is rank deficient")
    dev = _Deviance(design, reml=spec.criterion == "REML")
    theta0 = _initial_theta(design)
    iterations, converged, message = 0, True, "no covariance parameters"
    theta = theta0
    if theta0.size:
        bounds = [(lo if np.isfinite(lo) else None, None) for lo in dev.lower]
        res = minimize(
            dev,
            theta0,
            jac=dev.gradient,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-9},
        )
        theta, iterations = res.x, res.nit
        best = res.fun
        nm = minimize(
            dev,
            theta,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": max_iter * max(1, theta.size), "fatol": tol, "xatol": 1e-7, "initial_simplex": _simplex(theta, dev.lower)},
        )
        iterations += nm.nit
        if nm.fun < best - 1e-12:
            theta, best = nm.x, nm.fun
        converged = bool(res.success or nm.success) and np.isfinite(best)
        message = f"L-BFGS-B: {res.message}; Nelder-Mead: {nm.message}"
        theta = np.maximum(theta, np.where(np.isfinite(dev.lower), dev.lower, -np.inf))
    return _assemble(design, dev, theta, spec, converged, iterations, message)


def _simplex(theta, lower):
    """Small simplex around ``theta`` that stays inside the bounds."""
    k = theta.size
    sim = np.tile(theta, (k + 1, 1))
    for j in range(k):
        step = 0.05 * max(abs(theta[j]), 0.05)
        sim[j + 1, j] = theta[j] + step
    return sim


def _assemble(design, dev, theta, spec, converged, iterations, message) -> LMMFit:
    s = dev.solve(theta)
    deviance = dev.deviance_from(s)
    n, p = dev.n, dev.p
    sigma2 = s["r2"] / (n - p if dev.reml else n)
    Linv = sla.solve_triangular(s["L_X"], np.eye(p), lower=True)
    vcov = sigma2 * (Linv.T @ Linv)
    beta = s["beta"]
    se = np.sqrt(np.diag(vcov))
    names = design.fixed_names
    varcomp, covariances, singular = {}, {}, []
    for b in design.blocks:
        T = _tri(theta[b.theta_slice], b.k)
        cov = sigma2 * (T @ T.T)
        for a, name in enumerate(b.names):
            key = f"{b.factor}:{name}"
            varcomp[key] = float(cov[a, a])
            if cov[a, a] < SINGULAR_TOL:
                singular.append(key)
            for c in range(a):
                covariances[f"{b.factor}:{b.names[c]}~{name}"] = float(cov[a, c])
    varcomp["Residual"] = float(sigma2)

    # conditional modes of the random effects, b = Lambda u
    u_cols = np.zeros(dev.q)
    coef_vec = np.concatenate([-beta, [1.0]])
    if dev.q:
        u_cols[dev.dcols] = s["y_D"] @ coef_vec
        u_cols[dev.rcols] = s["y_R"] @ coef_vec
        b_cols = np.zeros(dev.q)
        b_cols[dev.dcols] = s["lam_d"] * u_cols[dev.dcols]
        lam_r = s["lam_r"]
        b_cols[dev.rcols] = lam_r * u_cols[dev.rcols] if lam_r.ndim == 1 else lam_r @ u_cols[dev.rcols]
    ranef = {}
    for b in design.blocks:
        vals = b_cols[b.start : b.start + b.width].reshape(b.k, b.n_levels).T
        frame = pd.DataFrame(vals, index=design.levels[b.factor], columns=b.names)
        ranef[b.factor] = pd.concat([ranef[b.factor], frame], axis=1) if b.factor in ranef else frame

    return LMMFit(
        spec=spec,
        beta=pd.Series(beta, index=names),
        se=pd.Series(se, index=names),
        t=pd.Series(beta / se, index=names),
        vcov=pd.DataFrame(vcov, index=names, columns=names),
        varcomp=varcomp,
        covariances=covariances,
        sigma2=float(sigma2),
        loglik=-0.5 * float(deviance),
        deviance=float(deviance),
        converged=bool(converged),
        iterations=int(iterations),
        singular=singular,
        nobs=n,
        n_params=spec.n_params(),
        theta=np.asarray(theta),
        ranef=ranef,
        message=message,
    )


def profiled_deviance(table, spec, theta) -> float:
    """Deviance at an explicit ``theta`` (for diagnostics and tests)."""
    design = build_design(table, spec)
    return _Deviance(design, reml=spec.criterion == "REML")(np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class LRTResult:
    chi2: float
    df: int
    p: float
    loglik_full: float
    loglik_reduced: float

    def line(self) -> str:
        ptxt = "p < 0.001" if self.p < 0.001 else f"p = {self.p:.3f}"
        return f"chi2({self.df}) = {self.chi2:.2f}, {ptxt}"


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution via the regularized gamma Q."""
    if df <= 0:
        return 1.0
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def _check_nested(full: LMMSpec, reduced: LMMSpec):
    if full.response != reduced.response:
        raise UsageError("models have different responses")
    if not set(reduced.fixed) <= set(full.fixed):
        raise UsageError("reduced model has fixed effects the full model lacks")
    if not set(reduced.terms()) <= set(full.terms()):
        raise UsageError("reduced model has random terms the full model lacks")
    if full.covariance != reduced.covariance:
        raise UsageError("models use different covariance structures")


def lrt(full: LMMFit, reduced: LMMFit) -> LRTResult:
    """Likelihood-ratio test of ``reduced`` nested in ``full``."""
    _check_nested(full.spec, reduced.spec)
    if full.nobs != reduced.nobs:
        raise UsageError("models were fitted to different numbers of observations")
    if set(full.spec.fixed) != set(reduced.spec.fixed) and "REML" in (full.criterion, reduced.criterion):
        raise UsageError("REML likelihoods are not comparable across fixed effects; refit with ML")
    if full.criterion != reduced.criterion:
        raise UsageError("models were fitted with different criteria")
    chi2 = 2.0 * (full.loglik - reduced.loglik)
    if chi2 < -1e-6:
        warnings.warn(f"negative LRT statistic {chi2:.3g}; optimizer may not have converged", RuntimeWarning)
    chi2 = max(chi2, 0.0)
    df = full.n_params - reduced.n_params
    return LRTResult(chi2, df, chi2_sf(chi2, df), full.loglik, reduced.loglik)


def compare_fixed_effect(table, spec: LMMSpec, name: str, **kw):
    """ML fits with and without fixed effect ``name`` and their LRT."""
    full_spec = spec.with_criterion("ML")
    full = fit_lmm(table, full_spec, **kw)
    reduced = fit_lmm(table, full_spec.drop_fixed(name), **kw)
    return full, reduced, lrt(full, reduced)


class MixedLM(RegressorMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_lmm`.

    ``X`` is a DataFrame holding the fixed predictors, grouping factors and
    slope columns; ``y`` defaults to ``X[response]``.

    >>> m = MixedLM(fixed=("x",), random_intercepts=("subject",)).fit(df)  # doctest: +SKIP
    >>> m.result_.coef_table()  # doctest: +SKIP
    """

    def __init__(
        self,
        fixed=(),
        random_intercepts=(),
        random_slopes=(),
        covariance="diagonal",
        criterion="REML",
        response="rt",
        max_iter=500,
        tol=1e-8,
    ):
        self.fixed = fixed
        self.random_intercepts = random_intercepts
        self.random_slopes = random_slopes
        self.covariance = covariance
        self.criterion = criterion
        self.response = response
        self.max_iter = max_iter
        self.tol = tol

    @property
    def spec(self) -> LMMSpec:
        return LMMSpec(
            self.response, self.fixed, self.random_intercepts, self.random_slopes, self.covariance, self.criterion
        )

    def fit(self, X: pd.DataFrame, y=None):
        table = X.copy()
        if y is not None:
            table[self.response] = np.asarray(y, dtype=float)
        self.result_ = fit_lmm(table, self.spec, max_iter=self.max_iter, tol=self.tol)
        self.coef_ = self.result_.beta.to_numpy()
        if not self.result_.converged:
            warnings.warn("mixed model did not converge: " + self.result_.message, RuntimeWarning)
        return self

    def predict(self, X: pd.DataFrame, include_random=True) -> np.ndarray:
        check_is_fitted(self, "result_")
        res = self.result_
        pred = np.full(len(X), res.beta[INTERCEPT])
        for name in self.spec.fixed:
            pred = pred + res.beta[name] * X[name].to_numpy(dtype=float)
        if include_random:
            for factor, frame in res.ranef.items():
                eff = frame.reindex(X[factor].to_numpy()).fillna(0.0)
                for name in frame.columns:
                    vals = eff[name].to_numpy()
                    pred = pred + (vals if name == INTERCEPT else vals * X[name].to_numpy(dtype=float))
        return pred
