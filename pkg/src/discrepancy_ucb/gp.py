"""Gaussian-process regression with non-zero prior means.

The model works over state-action points ``z = (x, u)`` stored as rows of a
2-D array. All outputs share one Gram matrix and Cholesky factor; each output
coordinate is an independent residual regression against the prior mean.

Observations at an identical input location are folded into a single
factor row carrying a count ``c``: the block ``G + reg*I`` over ``c`` copies is
replaced by the exact sufficient statistic ``k(z, z) + reg / c`` with averaged
residual targets. Predictions are identical to the full-Gram formulas; the
factor simply stays small when a policy revisits points on a finite grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTER = 1e-10
VARIANCE_FLOOR = -1e-10
SNAPSHOT_VERSION = 1


class GpNumericError(ArithmeticError):
    """Raised when a factorization or a prediction is numerically invalid."""


def _as_rows(z, dim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(z, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a point or a 2-D batch of points, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"point dimension {arr.shape[1]} does not match model input dimension {dim}")
    return arr


@dataclass(frozen=True)
class RBFKernel:
    """Squared-exponential kernel ``exp(-gamma * |z - z'|^2)``.

    Coordinates flagged in ``wrap_mask`` are angles. Their contribution is the
    chord length ``2 sin(|d| / 2)`` of the angular difference ``d``: periodic,
    close to the arc length ``|d|`` for small differences, and unlike the arc
    length it keeps the kernel positive definite on the circle.
    """

    gamma: float = 0.5
    wrap_mask: tuple = ()

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        object.__setattr__(self, "wrap_mask", tuple(bool(w) for w in self.wrap_mask))

    def _wrap_index(self, dim: int) -> np.ndarray:
        if not self.wrap_mask:
            return np.zeros(dim, dtype=bool)
        if len(self.wrap_mask) != dim:
            raise ValueError(f"wrap mask has {len(self.wrap_mask)} entries for {dim}-dimensional points")
        return np.asarray(self.wrap_mask, dtype=bool)

    def sqdist(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        diff = a[:, None, :] - b[None, :, :]
        wrap = self._wrap_index(a.shape[1])
        if wrap.any():
            diff[..., wrap] = 2.0 * np.sin(0.5 * diff[..., wrap])
        return np.einsum("ijk,ijk->ij", diff, diff)

    def __call__(self, a, b) -> np.ndarray:
        a = _as_rows(a)
        b = _as_rows(b)
        return np.exp(-self.gamma * self.sqdist(a, b))

    def diag(self, a) -> np.ndarray:
        return np.ones(_as_rows(a).shape[0])

    def to_dict(self) -> dict:
        return {"kind": "rbf", "gamma": self.gamma, "wrap_mask": list(self.wrap_mask)}

    @classmethod
    def from_dict(cls, d: dict) -> "RBFKernel":
        if d.get("kind", "rbf") != "rbf":
            raise ValueError(f"unsupported kernel kind {d['kind']!r}")
        return cls(gamma=float(d["gamma"]), wrap_mask=tuple(d.get("wrap_mask", ())))


def kernel_eval(kernel: RBFKernel, z, z_prime) -> float:
    """Kernel value between two single points."""
    a = np.asarray(z, dtype=float).ravel()
    b = np.asarray(z_prime, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(kernel(a, b)[0, 0])


# --------------------------------------------------------------------------
# Prior means
# --------------------------------------------------------------------------


class PriorMean:
    """Base class for prior mean functions ``m: Z -> R^d``."""

    output_dim: int

    def __call__(self, z) -> np.ndarray:
        raise NotImplementedError

    @property
    def depth(self) -> int:
        """Number of frozen-GP links above the analytic root."""
        return 0

    def describe(self) -> dict:
        raise NotImplementedError


class ZeroPrior(PriorMean):
    def __init__(self, output_dim: int):
        self.output_dim = int(output_dim)

    def __call__(self, z) -> np.ndarray:
        return np.zeros((_as_rows(z).shape[0], self.output_dim))

    def describe(self) -> dict:
        return {"kind": "zero", "output_dim": self.output_dim}


class AnalyticPrior(PriorMean):
    """Wraps a batched physics model ``fn(Z) -> (n, d)``.

    ``descriptor`` is an opaque, JSON-serializable record that lets
    :func:`from_snapshot` rebuild the same function through a resolver.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], output_dim: int,
                 descriptor: Optional[dict] = None):
        self.fn = fn
        self.output_dim = int(output_dim)
        self.descriptor = descriptor or {}

    def __call__(self, z) -> np.ndarray:
        out = np.asarray(self.fn(_as_rows(z)), dtype=float)
        return out.reshape(-1, self.output_dim)

    def describe(self) -> dict:
        return {"kind": "analytic", "output_dim": self.output_dim, **self.descriptor}


class FrozenGpPrior(PriorMean):
    """Posterior mean of an immutable GP snapshot, used as the next prior.

    With ``memo_size > 0`` the values at individual query rows are cached;
    the snapshot never changes, so cached values stay valid. This only pays
    off when queries repeat, as on a finite state-action grid.
    """

    def __init__(self, snapshot: "GpModel", memo_size: int = 0):
        self.snapshot = snapshot
        self.output_dim = snapshot.output_dim
        self.memo_size = int(memo_size)
        self._memo: dict = {}

    @property
    def depth(self) -> int:
        return 1 + self.snapshot.prior.depth

    def __call__(self, z, kq: Optional[np.ndarray] = None) -> np.ndarray:
        q = _as_rows(z, self.snapshot.input_dim)
        if not self.memo_size:
            return self.snapshot._mean(q, kq)
        keys = [row.tobytes() for row in q]
        out = np.empty((q.shape[0], self.output_dim))
        miss = []
        for i, key in enumerate(keys):
            hit = self._memo.get(key)
            if hit is None:
                miss.append(i)
            else:
                out[i] = hit
        if miss:
            sub_kq = None if kq is None else kq[miss]
            vals = self.snapshot._mean(q[miss], sub_kq)
            out[miss] = vals
            if len(self._memo) < self.memo_size:
                for j, i in enumerate(miss):
                    self._memo[keys[i]] = vals[j].copy()
        return out

    def describe(self) -> dict:
        return {"kind": "frozen-gp", "output_dim": self.output_dim, "depth": self.depth}


# --------------------------------------------------------------------------
# The model
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GpModel:
    """Immutable GP posterior over ``input_dim``-dimensional inputs.

    Use :meth:`empty` to build one and :meth:`update` / :meth:`with_reg` to
    derive new models; the receiver is never modified.
    """

    kernel: RBFKernel
    prior: PriorMean
    reg: float
    input_dim: int
    output_dim: int
    X: np.ndarray            # every observed input, in arrival order
    Y: np.ndarray            # every observed target
    U: np.ndarray            # distinct input locations, first-seen order
    counts: np.ndarray       # multiplicity of each row of U
    ysum: np.ndarray         # per-location sum of targets
    prior_at_U: np.ndarray   # prior mean at U
    chol: np.ndarray         # lower factor of K(U, U) + diag(max(reg / counts, jitter))
    alpha: np.ndarray        # factor solve against averaged residual targets
    prior_prefix: bool = False
    _index: dict = field(default_factory=dict, repr=False)

    # -- construction ------------------------------------------------------

    @classmethod
    def empty(cls, kernel: RBFKernel, prior: PriorMean, reg: float, input_dim: int) -> "GpModel":
        if not reg > 0:
            raise ValueError(f"regularization must be positive, got {reg}")
        d = prior.output_dim
        return cls(
            kernel=kernel, prior=prior, reg=float(reg), input_dim=int(input_dim), output_dim=d,
            X=np.empty((0, input_dim)), Y=np.empty((0, d)), U=np.empty((0, input_dim)),
            counts=np.empty(0), ysum=np.empty((0, d)), prior_at_U=np.empty((0, d)),
            chol=np.empty((0, 0)), alpha=np.empty((0, d)), prior_prefix=_shares_prefix(prior, kernel, np.empty((0, input_dim))),
        )

    @classmethod
    def fit(cls, kernel: RBFKernel, prior: PriorMean, reg: float, X, Y) -> "GpModel":
        """Build a model from a whole dataset with one factorization."""
        X = _as_rows(X)
        Y = np.asarray(Y, dtype=float).reshape(X.shape[0], -1)
        if Y.shape[1] != prior.output_dim:
            raise ValueError(f"targets have {Y.shape[1]} columns, prior has {prior.output_dim}")
        base = cls.empty(kernel, prior, reg, X.shape[1])
        index: dict = {}
        U, counts, ysum = [], [], []
        for x, y in zip(X, Y):
            key = x.tobytes()
            j = index.get(key)
            if j is None:
                index[key] = len(U)
                U.append(x)
                counts.append(1.0)
                ysum.append(y.copy())
            else:
                counts[j] += 1.0
                ysum[j] = ysum[j] + y
        U = np.array(U).reshape(-1, X.shape[1])
        prior_at_U = prior(U) if len(U) else np.empty((0, base.output_dim))
        model = _replace(base, X=X.copy(), Y=Y.copy(), U=U,
                         counts=np.array(counts), ysum=np.array(ysum).reshape(-1, base.output_dim),
                         prior_at_U=prior_at_U, _index=index,
                         prior_prefix=_shares_prefix(prior, kernel, U))
        return model._refactor()

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_unique(self) -> int:
        return self.U.shape[0]

    def _residual_means(self) -> np.ndarray:
        return self.ysum / self.counts[:, None] - self.prior_at_U

    def _system_matrix(self) -> np.ndarray:
        A = self.kernel(self.U, self.U) if self.n_unique else np.empty((0, 0))
        A[np.diag_indices_from(A)] += np.maximum(self.reg / self.counts, JITTER)
        return A

    def _refactor(self) -> "GpModel":
        if self.n_unique == 0:
            return _replace(self, chol=np.empty((0, 0)), alpha=np.empty((0, self.output_dim)))
        A = self._system_matrix()
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError as exc:
            raise GpNumericError("Cholesky factorization failed; system matrix is not positive definite") from exc
        if np.min(np.diag(L)) ** 2 <= JITTER:
            raise GpNumericError("Cholesky pivot fell below the jitter floor")
        alpha = cho_solve((L, True), self._residual_means())
        return _replace(self, chol=L, alpha=alpha)

    def with_reg(self, reg: float) -> "GpModel":
        """Same data under a different regularizer (full refactorization)."""
        if not reg > 0:
            raise ValueError(f"regularization must be positive, got {reg}")
        if reg == self.reg:
            return self
        return _replace(self, reg=float(reg))._refactor()

    def with_prior(self, prior: PriorMean) -> "GpModel":
        """Same data and regularizer, residuals taken against a new prior."""
        prior_at_U = prior(self.U) if self.n_unique else np.empty((0, self.output_dim))
        return _replace(self, prior=prior, prior_at_U=prior_at_U,
                        prior_prefix=_shares_prefix(prior, self.kernel, self.U))._refactor()

    def update(self, z, y) -> "GpModel":
        """Return the model conditioned on one more observation ``(z, y)``.

        A new input location appends one row to the Cholesky factor; a repeat
        of an existing location changes that location's count and
        refactorizes. Raises :class:`GpNumericError` if the factor breaks down.
        """
        z = np.asarray(z, dtype=float).ravel()
        y = np.asarray(y, dtype=float).ravel()
        if z.shape[0] != self.input_dim:
            raise ValueError(f"point dimension {z.shape[0]} does not match model input dimension {self.input_dim}")
        if y.shape[0] != self.output_dim:
            raise ValueError(f"target dimension {y.shape[0]} does not match model output dimension {self.output_dim}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            raise ValueError("observation contains non-finite values")

        X = np.vstack([self.X, z])
        Y = np.vstack([self.Y, y])
        key = z.tobytes()
        j = self._index.get(key)
        if j is not None:
            counts = self.counts.copy()
            counts[j] += 1.0
            ysum = self.ysum.copy()
            ysum[j] += y
            return _replace(self, X=X, Y=Y, counts=counts, ysum=ysum)._refactor()

        k_new = self.kernel(self.U, z)[:, 0] if self.n_unique else np.empty(0)
        if self.n_unique:
            row = solve_triangular(self.chol, k_new, lower=True, check_finite=False)
        else:
            row = np.empty(0)
        pivot_sq = 1.0 + max(self.reg, JITTER) - row @ row
        if pivot_sq <= JITTER:
            raise GpNumericError("Cholesky pivot fell below the jitter floor")
        m = self.n_unique
        L = np.zeros((m + 1, m + 1))
        L[:m, :m] = self.chol
        L[m, :m] = row
        L[m, m] = np.sqrt(pivot_sq)
        index = dict(self._index)
        index[key] = m
        model = _replace(
            self, X=X, Y=Y,
            U=np.vstack([self.U, z]),
            counts=np.append(self.counts, 1.0),
            ysum=np.vstack([self.ysum, y]),
            prior_at_U=np.vstack([self.prior_at_U, self.prior(z)]),
            chol=L, _index=index,
        )
        alpha = cho_solve((L, True), model._residual_means(), check_finite=False)
        return _replace(model, alpha=alpha)

    # -- prediction --------------------------------------------------------

    def cross_kernel(self, q) -> np.ndarray:
        """``K(q, U)`` for a batch of queries."""
        q = _as_rows(q, self.input_dim)
        if self.n_unique == 0:
            return np.empty((q.shape[0], 0))
        return self.kernel(q, self.U)

    def _prior_values(self, q: np.ndarray, kq: np.ndarray) -> np.ndarray:
        if isinstance(self.prior, FrozenGpPrior):
            sub = kq[:, : self.prior.snapshot.n_unique] if self.prior_prefix else None
            return self.prior(q, sub)
        return self.prior(q)

    def _mean(self, q: np.ndarray, kq: Optional[np.ndarray] = None) -> np.ndarray:
        if kq is None:
            kq = self.cross_kernel(q)
        prior_vals = self._prior_values(q, kq)
        if self.n_unique == 0:
            return prior_vals
        out = prior_vals + kq @ self.alpha
        if not np.all(np.isfinite(out)):
            raise GpNumericError("non-finite predictive mean")
        return out

    def predict_mean(self, z) -> np.ndarray:
        """Posterior mean, shape ``(n, d)`` for a batch or ``(d,)`` for one point."""
        q = _as_rows(z, self.input_dim)
        out = self._mean(q)
        return out[0] if np.ndim(z) == 1 else out

    def _variance_from_kq(self, q: np.ndarray, kq: np.ndarray) -> np.ndarray:
        prior_var = self.kernel.diag(q)
        if self.n_unique == 0:
            return prior_var
        v = solve_triangular(self.chol, kq.T, lower=True, check_finite=False)
        var = prior_var - np.einsum("ij,ij->j", v, v)
        return _clamp_variance(var)

    def predict_variance(self, z):
        """Posterior variance, shared by every output coordinate."""
        q = _as_rows(z, self.input_dim)
        var = self._variance_from_kq(q, self.cross_kernel(q))
        return float(var[0]) if np.ndim(z) == 1 else var

    def predict(self, z):
        """Mean, variance and prior-mean values for a batch, sharing one kernel evaluation."""
        q = _as_rows(z, self.input_dim)
        kq = self.cross_kernel(q)
        prior_vals = self._prior_values(q, kq)
        mean = prior_vals + kq @ self.alpha if self.n_unique else prior_vals
        if not np.all(np.isfinite(mean)):
            raise GpNumericError("non-finite predictive mean")
        return mean, self._variance_from_kq(q, kq), prior_vals

    def posterior_covariance(self, a, b) -> np.ndarray:
        """``k(a, b) - k_a^T (G + reg I)^{-1} k_b`` between two batches."""
        a = _as_rows(a, self.input_dim)
        b = _as_rows(b, self.input_dim)
        prior_cov = self.kernel(a, b)
        if self.n_unique == 0:
            return prior_cov
        va = solve_triangular(self.chol, self.cross_kernel(a).T, lower=True, check_finite=False)
        vb = solve_triangular(self.chol, self.cross_kernel(b).T, lower=True, check_finite=False)
        return prior_cov - va.T @ vb

    def gram(self) -> np.ndarray:
        """Kernel Gram matrix over every observation (duplicates included)."""
        return self.kernel(self.X, self.X) if self.n else np.empty((0, 0))


def _clamp_variance(var: np.ndarray) -> np.ndarray:
    if np.any(var < VARIANCE_FLOOR):
        raise GpNumericError(f"negative predictive variance {var.min():.3e}")
    return np.maximum(var, 0.0)


def _replace(model: GpModel, **changes) -> GpModel:
    fields = dict(model.__dict__)
    fields.update(changes)
    return GpModel(**fields)


def _shares_prefix(prior: PriorMean, kernel: RBFKernel, U: np.ndarray) -> bool:
    # A frozen link can reuse the caller's cross-kernel columns only when its
    # distinct inputs are the leading rows of the caller's, under the same kernel.
    if not isinstance(prior, FrozenGpPrior):
        return False
    snap = prior.snapshot
    if snap.kernel != kernel or snap.n_unique > U.shape[0]:
        return False
    return bool(np.array_equal(U[: snap.n_unique], snap.U))


# --------------------------------------------------------------------------
# Free functions matching the operation vocabulary
# --------------------------------------------------------------------------


def predict_mean(model: GpModel, z) -> np.ndarray:
    return model.predict_mean(z)


def predict_variance(model: GpModel, z):
    return model.predict_variance(z)


def update_with_observation(model: GpModel, z, y) -> GpModel:
    return model.update(z, y)


def lemma2_variance_update(model: GpModel, z_star, z):
    """Variance at ``z`` after a hypothetical observation at ``z_star``.

    ``var_n(z) - cov_n(z_star, z)^2 / (var_n(z_star) + reg)``, evaluated with
    the current regularizer and without touching the model.
    """
    z_star = np.asarray(z_star, dtype=float).ravel()
    q = _as_rows(z, model.input_dim)
    cov = model.posterior_covariance(z_star, q)[0]
    var_star = model.predict_variance(z_star)
    var_q = model.predict_variance(q)
    out = _clamp_variance(var_q - cov**2 / (var_star + model.reg))
    return float(out[0]) if np.ndim(z) == 1 else out


def freeze_as_prior(model: GpModel, memo_size: int = 0) -> FrozenGpPrior:
    """Snapshot ``model``'s posterior mean as an immutable prior."""
    return FrozenGpPrior(model, memo_size=memo_size)


def episode_model(previous: GpModel, memo_size: int = 0) -> GpModel:
    """Start a new episode: same data, prior replaced by the frozen ``previous`` mean."""
    return previous.with_prior(freeze_as_prior(previous, memo_size=memo_size))


# --------------------------------------------------------------------------
# Snapshots
# --------------------------------------------------------------------------


def _model_record(model: GpModel, base: Optional[GpModel] = None) -> dict:
    rec = {"reg": model.reg, "kernel": model.kernel.to_dict(), "input_dim": model.input_dim,
           "output_dim": model.output_dim, "n": model.n}
    n = model.n
    if (base is not None and n <= base.n and np.array_equal(base.X[:n], model.X)
            and np.array_equal(base.Y[:n], model.Y)):
        rec["prefix"] = n
    else:
        rec["X"] = model.X.tolist()
        rec["Y"] = model.Y.tolist()
    return rec


def to_snapshot(model: GpModel) -> dict:
    """Serialize a model and its prior chain to plain JSON-compatible data.

    Frozen links are stored root-last. A link whose dataset is a prefix of
    the outer model's (the usual case within a campaign) stores only the
    prefix length.
    """
    chain = []
    node: PriorMean = model.prior
    while isinstance(node, FrozenGpPrior):
        chain.append(_model_record(node.snapshot, base=model))
        node = node.snapshot.prior
    if isinstance(node, (AnalyticPrior, ZeroPrior)):
        root = node.describe()
    else:
        raise TypeError(f"cannot serialize prior of type {type(node).__name__}")
    return {
        "format": "discrepancy-ucb-gp",
        "version": SNAPSHOT_VERSION,
        "model": _model_record(model),
        "chain": chain,
        "root": root,
    }


def from_snapshot(data: dict, resolve_analytic: Callable[[dict], AnalyticPrior],
                  memo_size: int = 0) -> GpModel:
    """Rebuild a model written by :func:`to_snapshot`.

    ``resolve_analytic`` maps the stored analytic descriptor back to a prior.
    """
    if data.get("format") != "discrepancy-ucb-gp":
        raise ValueError("not a GP snapshot")
    if data.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {data.get('version')}")
    root = data["root"]
    if root["kind"] == "zero":
        prior: PriorMean = ZeroPrior(root["output_dim"])
    elif root["kind"] == "analytic":
        prior = resolve_analytic(root)
    else:
        raise ValueError(f"unknown prior root kind {root['kind']!r}")

    top = data["model"]
    X_top = np.asarray(top["X"], dtype=float).reshape(-1, top["input_dim"])
    Y_top = np.asarray(top["Y"], dtype=float).reshape(-1, top["output_dim"])

    def build(rec: dict, prior: PriorMean) -> GpModel:
        kernel = RBFKernel.from_dict(rec["kernel"])
        if "prefix" in rec:
            X, Y = X_top[:rec["prefix"]], Y_top[:rec["prefix"]]
        else:
            X = np.asarray(rec["X"], dtype=float).reshape(-1, rec["input_dim"])
            Y = np.asarray(rec["Y"], dtype=float).reshape(-1, rec["output_dim"])
        if X.shape[0] == 0:
            return GpModel.empty(kernel, prior, rec["reg"], rec["input_dim"])
        return GpModel.fit(kernel, prior, rec["reg"], X, Y)

    for rec in reversed(data["chain"]):
        prior = FrozenGpPrior(build(rec, prior), memo_size=memo_size)
    return build(data["model"], prior)
