"""GP regression with the tangent kernel of a trained network.

The kernel is k(x_i, x_j) = J(x_i)' J(x_j), built from the Jacobian of a
trained network at fixed parameters. Posteriors can be fitted in function
space (an n*o dimensional system) or parameter space (a p dimensional
system); both store a length-p mean cache m, so prediction means cost a
single forward-mode product J*' m, plus low-rank variance caches.

Parameter-space subtlety: a single-probe Lanczos run on J J' + s*I lives
inside range(J) and exhausts after about n*o steps, far below p. On the
orthogonal complement the operator is exactly s*I, so the inverse is
completed analytically there (Q T^-1 Q' + (1/s)(I - Q Q')). At Krylov
exhaustion this completion is exact, which is what makes the two spaces
agree; without it the truncated root would undercount variance for every
p > n*o.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractViolationError, FitError
from .linalg import (
    SymmetricLinearOperator,
    cg_solve,
    lanczos_factorize,
    lowrank_inverse_root,
    slq_logdet,
)
from .net import DENSE_JACOBIAN_CAP, JacobianOperator, MlpNetwork, TaskDataset
from .seeding import substream

MEAN_KINDS = ("zero", "jacobian_mean", "linearized_nn")
SPACES = ("function", "parameter")
DEFAULT_VARIANCE_RANK = 256
POSTERIOR_FILE_VERSION = 1

# Residual threshold (relative to the right-hand side) beyond which a
# non-converged CG solve is a fit failure rather than acceptable slack.
FIT_RESIDUAL_LIMIT = 1e-4


class _ChannelView:
    """Restriction of a JacobianOperator to a subset of output channels.

    Used for heteroscedastic networks, where regression targets pair with
    the mean-head channels only; the scale-head columns of the Jacobian
    are excluded from the kernel.
    """

    def __init__(self, jac: JacobianOperator, channels: tuple[int, ...]):
        full = jac.out_dim
        channels = tuple(int(c) for c in channels)
        if len(channels) == 0 or len(set(channels)) != len(channels):
            raise ContractViolationError("channels must be a nonempty set of distinct indices")
        if any(c < 0 or c >= full for c in channels):
            raise ContractViolationError(f"channel indices must lie in [0, {full}), got {channels}")
        self._jac = jac
        self.channels = channels
        self.outputs = jac.outputs[:, list(channels)]

    @property
    def n_data(self):
        return self._jac.n_data

    @property
    def out_dim(self):
        return len(self.channels)

    @property
    def out_len(self):
        return self.n_data * self.out_dim

    @property
    def param_count(self):
        return self._jac.param_count

    def vjp(self, u):
        u = np.asarray(u, dtype=np.float64)
        full = np.zeros((self.n_data, self._jac.out_dim))
        full[:, list(self.channels)] = u.reshape(self.n_data, self.out_dim)
        return self._jac.vjp(full.ravel())

    def jvp(self, v):
        full = self._jac.jvp(v).reshape(self.n_data, self._jac.out_dim)
        return full[:, list(self.channels)].ravel()

    def dense(self, cap: int = DENSE_JACOBIAN_CAP):
        full = self._jac.dense(cap)
        cols = full.reshape(self.param_count, self.n_data, self._jac.out_dim)
        return cols[:, :, list(self.channels)].reshape(self.param_count, self.out_len)


def _view(jac: JacobianOperator, channels):
    return jac if channels is None else _ChannelView(jac, channels)


def _mean_surface(view, theta: np.ndarray, kind: str) -> np.ndarray:
    """Prior mean values mu(X), shaped like the (selected) network outputs."""
    if kind == "zero":
        return np.zeros_like(view.outputs)
    if kind == "jacobian_mean":
        return view.jvp(theta).reshape(view.n_data, view.out_dim)
    if kind == "linearized_nn":
        return view.outputs + view.jvp(theta).reshape(view.n_data, view.out_dim)
    raise ContractViolationError(f"mean kind must be one of {MEAN_KINDS}, got {kind!r}")


def _prepare(network: MlpNetwork, data: TaskDataset, mean_kind: str, channels):
    jac = JacobianOperator(network, data.x)
    view = _view(jac, channels)
    if data.y.shape[1] != view.out_dim:
        raise ContractViolationError(
            f"targets have {data.y.shape[1]} channels but the regression view has {view.out_dim}"
        )
    mu = _mean_surface(view, network.params, mean_kind)
    return view, (data.y - mu).ravel()


def _variance_probe(resid: np.ndarray, dim: int) -> np.ndarray:
    # The data residual is the natural probe (it is the direction the
    # posterior actually uses); fall back to a fixed random draw when the
    # residual vanishes, since Lanczos needs any nonzero start.
    if float(np.linalg.norm(resid)) > 0.0:
        return resid
    return substream(0, "gp-variance-probe").standard_normal(dim)


@dataclass
class NtkPosterior:
    """Fitted tangent-kernel posterior with low-rank variance caches.

    ``mean_cache`` has length p in both spaces. ``variance_root`` is
    R = J Q T^(-1/2) in function space (R R' approximates
    J (J'J + s I)^-1 J') and B = Q T^(-1/2) in parameter space
    (completed with ``basis`` Q as described in the module docstring).
    ``clamp_count`` accumulates how many predictive variances were
    clamped up to zero; it is a diagnostic, not part of the posterior
    state proper.
    """

    space: str
    mean_kind: str
    channels: tuple[int, ...] | None
    mean_cache: np.ndarray
    variance_root: np.ndarray
    basis: np.ndarray | None
    noise_variance: float
    theta_fingerprint: str
    clamp_count: int = 0


def kernel_matrix(network: MlpNetwork, x1, x2=None, channels=None, cap: int = DENSE_JACOBIAN_CAP):
    """Tangent-kernel Gram block K[a, b] = <j_a(X1), j_b(X2)>."""
    jac1 = JacobianOperator(network, x1)
    view1 = _view(jac1, channels)
    if x2 is None:
        view2 = view1
    else:
        view2 = _view(JacobianOperator(network, x2), channels)
    entries = view1.out_len * view2.out_len
    if entries > cap:
        raise ContractViolationError(
            f"kernel matrix needs {entries} entries (cap {cap}); use the matrix-free fits"
        )
    # Column b of K is J1' (J2 e_b); each pass is one reverse plus one
    # forward product, so nothing p-sized is ever materialized.
    k = np.empty((view1.out_len, view2.out_len))
    for b in range(view2.out_len):
        e = np.zeros(view2.out_len)
        e[b] = 1.0
        k[:, b] = view1.jvp(view2.vjp(e))
    if x2 is None:
        k = 0.5 * (k + k.T)
    return k


def _solve_or_fail(op, rhs, what: str):
    result = cg_solve(op, rhs)
    rhs_norm = float(np.linalg.norm(rhs))
    if not result.converged and result.residual_norm > FIT_RESIDUAL_LIMIT * rhs_norm:
        raise FitError(
            f"{what} solve did not converge: residual {result.residual_norm:.3e} "
            f"against right-hand side norm {rhs_norm:.3e}",
            residual_norm=result.residual_norm,
        )
    return result.x


def fit_function_space(
    network: MlpNetwork,
    data: TaskDataset,
    mean_kind: str = "zero",
    rank: int | None = None,
    channels=None,
) -> NtkPosterior:
    """Fit in function space: solve (J'J + s I) c = resid, cache m = J c."""
    view, resid = _prepare(network, data, mean_kind, channels)
    sigma2 = data.noise_variance
    op = SymmetricLinearOperator(
        dim=view.out_len, base=lambda v: view.jvp(view.vjp(v)), shift=sigma2
    )
    coeffs = _solve_or_fail(op, resid, "function-space")
    mean_cache = view.vjp(coeffs)
    r = min(rank if rank is not None else DEFAULT_VARIANCE_RANK, view.out_len)
    factors = lanczos_factorize(op, _variance_probe(resid, view.out_len), r)
    small_root = lowrank_inverse_root(factors)
    variance_root = np.column_stack(
        [view.vjp(small_root[:, k]) for k in range(small_root.shape[1])]
    )
    return NtkPosterior(
        space="function",
        mean_kind=mean_kind,
        channels=tuple(channels) if channels is not None else None,
        mean_cache=mean_cache,
        variance_root=variance_root,
        basis=None,
        noise_variance=sigma2,
        theta_fingerprint=network.fingerprint(),
    )


def fit_parameter_space(
    network: MlpNetwork,
    data: TaskDataset,
    mean_kind: str = "zero",
    rank: int | None = None,
    channels=None,
) -> NtkPosterior:
    """Fit in parameter space: solve (J J' + s I_p) m = J resid directly."""
    view, resid = _prepare(network, data, mean_kind, channels)
    sigma2 = data.noise_variance
    p = view.param_count
    op = SymmetricLinearOperator(dim=p, base=lambda v: view.vjp(view.jvp(v)), shift=sigma2)
    rhs = view.vjp(resid)
    mean_cache = _solve_or_fail(op, rhs, "parameter-space")
    r = min(rank if rank is not None else DEFAULT_VARIANCE_RANK, p)
    factors = lanczos_factorize(op, _variance_probe(rhs, p), r)
    bmat = lowrank_inverse_root(factors)
    return NtkPosterior(
        space="parameter",
        mean_kind=mean_kind,
        channels=tuple(channels) if channels is not None else None,
        mean_cache=mean_cache,
        variance_root=bmat,
        basis=factors.q,
        noise_variance=sigma2,
        theta_fingerprint=network.fingerprint(),
    )


def fit_posterior(
    network: MlpNetwork,
    data: TaskDataset,
    mean_kind: str = "zero",
    rank: int | None = None,
    channels=None,
    space: str = "auto",
) -> NtkPosterior:
    """Fit in the requested space; "auto" picks the smaller linear system."""
    if space == "auto":
        jac_out = data.y.size if channels is None else data.x.shape[0] * len(channels)
        space = "function" if jac_out <= network.architecture.parameter_count else "parameter"
    if space == "function":
        return fit_function_space(network, data, mean_kind, rank, channels)
    if space == "parameter":
        return fit_parameter_space(network, data, mean_kind, rank, channels)
    raise ContractViolationError(f"space must be 'auto' or one of {SPACES}, got {space!r}")


def _variance_terms(view, root: np.ndarray, basis, cap: int):
    """Per-test-column quantities: ||j*||^2, ||root' j*||^2, ||basis' j*||^2."""
    entries = view.param_count * view.out_len
    if entries <= cap:
        jt = view.dense(cap)
        col_sq = np.einsum("pj,pj->j", jt, jt)
        rp = root.T @ jt
        root_sq = np.einsum("rj,rj->j", rp, rp)
        basis_sq = None
        if basis is not None:
            bp = basis.T @ jt
            basis_sq = np.einsum("rj,rj->j", bp, bp)
        return col_sq, root_sq, basis_sq
    col_sq = np.empty(view.out_len)
    root_sq = np.empty(view.out_len)
    basis_sq = np.empty(view.out_len) if basis is not None else None
    for idx in range(view.out_len):
        e = np.zeros(view.out_len)
        e[idx] = 1.0
        col = view.vjp(e)
        col_sq[idx] = col @ col
        proj = root.T @ col
        root_sq[idx] = proj @ proj
        if basis is not None:
            bproj = basis.T @ col
            basis_sq[idx] = bproj @ bproj
    return col_sq, root_sq, basis_sq


def predict(
    posterior: NtkPosterior,
    network: MlpNetwork,
    x,
    cap: int = DENSE_JACOBIAN_CAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and per-channel variance at new inputs."""
    if network.fingerprint() != posterior.theta_fingerprint:
        raise ContractViolationError(
            "posterior is stale: the network parameters differ from the ones it was fitted at"
        )
    jac = JacobianOperator(network, x)
    view = _view(jac, posterior.channels)
    n_test = view.n_data
    mu = _mean_surface(view, network.params, posterior.mean_kind)
    mean = view.jvp(posterior.mean_cache).reshape(n_test, view.out_dim) + mu

    col_sq, root_sq, basis_sq = _variance_terms(view, posterior.variance_root, posterior.basis, cap)
    if posterior.space == "function":
        var = col_sq - root_sq
    else:
        var = posterior.noise_variance * root_sq + (col_sq - basis_sq)
    negative = var < 0.0
    if np.any(negative):
        posterior.clamp_count += int(np.count_nonzero(negative))
        var = np.maximum(var, 0.0)
    return mean, var.reshape(n_test, view.out_dim)


def dense_log_marginal(kernel: np.ndarray, resid: np.ndarray, sigma2: float) -> float:
    """Closed-form Gaussian log marginal for an explicit kernel matrix."""
    dim = resid.shape[0]
    evals, evecs = np.linalg.eigh(kernel + sigma2 * np.eye(dim))
    if np.any(evals <= 0.0):
        raise FitError(f"covariance has nonpositive eigenvalue {evals.min():.3e}")
    w = evecs.T @ resid
    quad = float(w @ (w / evals))
    logdet = float(np.sum(np.log(evals)))
    return -0.5 * (quad + logdet + dim * math.log(2.0 * math.pi))


def log_marginal_likelihood(
    network: MlpNetwork,
    data: TaskDataset,
    mean_kind: str = "zero",
    channels=None,
    method: str = "auto",
    rank: int = 64,
    n_probes: int = 16,
    seed: int = 0,
    dense_threshold: int = 256,
) -> float:
    """Gaussian log marginal likelihood of the tangent-kernel model.

    Below ``dense_threshold`` the kernel is assembled and eigendecomposed
    exactly; above it the quadratic term is solved by CG and the log
    determinant estimated by stochastic Lanczos quadrature (seeded, so
    the estimate is deterministic).
    """
    view, resid = _prepare(network, data, mean_kind, channels)
    sigma2 = data.noise_variance
    dim = view.out_len
    if method == "auto":
        method = "dense" if dim <= dense_threshold else "lanczos"
    if method == "dense":
        kern = np.empty((dim, dim))
        for b in range(dim):
            e = np.zeros(dim)
            e[b] = 1.0
            kern[:, b] = view.jvp(view.vjp(e))
        kern = 0.5 * (kern + kern.T)
        return dense_log_marginal(kern, resid, sigma2)
    if method != "lanczos":
        raise ContractViolationError(
            f"method must be 'auto', 'dense' or 'lanczos', got {method!r}"
        )
    op = SymmetricLinearOperator(dim=dim, base=lambda v: view.jvp(view.vjp(v)), shift=sigma2)
    alpha = _solve_or_fail(op, resid, "marginal-likelihood")
    quad = float(resid @ alpha)
    logdet = slq_logdet(op, rank=min(rank, dim), n_probes=n_probes, rng=substream(seed, "slq"))
    return -0.5 * (quad + logdet + dim * math.log(2.0 * math.pi))


def save_posterior(posterior: NtkPosterior, path) -> None:
    """Write a posterior cache; arrays in f64, metadata as embedded JSON."""
    meta = json.dumps(
        {
            "version": POSTERIOR_FILE_VERSION,
            "space": posterior.space,
            "mean_kind": posterior.mean_kind,
            "channels": list(posterior.channels) if posterior.channels is not None else None,
            "noise_variance": posterior.noise_variance,
            "theta_fingerprint": posterior.theta_fingerprint,
        },
        sort_keys=True,
    )
    path = Path(path)
    arrays = {"meta": np.array(meta), "mean_cache": posterior.mean_cache,
              "variance_root": posterior.variance_root}
    if posterior.basis is not None:
        arrays["basis"] = posterior.basis
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_posterior(path) -> NtkPosterior:
    with np.load(path, allow_pickle=False) as archive:
        try:
            meta = json.loads(str(archive["meta"]))
        except (KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: not a posterior cache: {exc}") from exc
        if meta.get("version") != POSTERIOR_FILE_VERSION:
            raise ConfigError(f"{path}: unsupported posterior file version {meta.get('version')}")
        channels = meta["channels"]
        return NtkPosterior(
            space=meta["space"],
            mean_kind=meta["mean_kind"],
            channels=tuple(channels) if channels is not None else None,
            mean_cache=archive["mean_cache"],
            variance_root=archive["variance_root"],
            basis=archive["basis"] if "basis" in archive.files else None,
            noise_variance=float(meta["noise_variance"]),
            theta_fingerprint=meta["theta_fingerprint"],
        )
