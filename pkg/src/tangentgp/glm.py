"""Classification through a linearized network, with Bayesian variants.

The model keeps the trained parameters theta frozen and learns separate
coefficients theta' for logits J' theta' (optionally plus the network's
own output, the full Taylor view). Inference over theta' comes in three
strengths: a MAP point estimate, a factorized Gaussian fitted by
stochastic variational inference, and a Laplace approximation whose
precision is the Fisher at the MAP plus the prior, kept matrix-free and
sampled through a Lanczos inverse root.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolationError, TrainingDivergenceError
from .fisher import CategoricalLikelihood, _hessian_block_apply, _log_softmax
from .linalg import SymmetricLinearOperator, lanczos_factorize, lowrank_inverse_root
from .net import JacobianOperator, MlpNetwork, _sigmoid, _softplus
from .seeding import substream
from .serialize import fmt_float, render_csv

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SVI_RAW_SCALE_INIT = -5.0


@dataclass(frozen=True)
class LinearizedGlm:
    """Linearization point plus the coefficients that actually move."""

    network: MlpNetwork
    coefficients: np.ndarray
    include_network_output: bool = False
    prior_variance: float = 1.0

    def __post_init__(self):
        arch = self.network.architecture
        if arch.heteroscedastic:
            raise ContractViolationError("classification nets must not be heteroscedastic")
        if arch.output_dim < 2:
            raise ContractViolationError(
                f"need at least 2 output classes, got {arch.output_dim}"
            )
        coeff = np.asarray(self.coefficients, dtype=np.float64)
        if coeff.shape != (arch.parameter_count,):
            raise ContractViolationError(
                f"coefficients of shape {coeff.shape} do not match "
                f"parameter count {arch.parameter_count}"
            )
        if not np.all(np.isfinite(coeff)):
            raise ContractViolationError("coefficients contain non-finite entries")
        if not self.prior_variance > 0:
            raise ContractViolationError(
                f"prior variance must be positive, got {self.prior_variance}"
            )
        coeff = coeff.copy()
        coeff.setflags(write=False)
        object.__setattr__(self, "coefficients", coeff)

    @property
    def num_classes(self) -> int:
        return self.network.architecture.output_dim

    def with_coefficients(self, coefficients: np.ndarray) -> "LinearizedGlm":
        return replace(self, coefficients=coefficients)


def zero_coefficients_glm(
    network: MlpNetwork,
    include_network_output: bool = False,
    prior_variance: float = 1.0,
) -> LinearizedGlm:
    return LinearizedGlm(
        network=network,
        coefficients=np.zeros(network.architecture.parameter_count),
        include_network_output=include_network_output,
        prior_variance=prior_variance,
    )


@dataclass(frozen=True)
class ClassificationData:
    """Inputs with integer class labels."""

    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        labels = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractViolationError(f"inputs must be a nonempty 2-d array, got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractViolationError("inputs contain non-finite entries")
        if labels.shape != (x.shape[0],):
            raise ContractViolationError(
                f"labels of shape {labels.shape} do not match {x.shape[0]} inputs"
            )
        if not np.issubdtype(labels.dtype, np.integer):
            raise ContractViolationError("labels must be integers")
        if labels.min() < 0:
            raise ContractViolationError("labels must be nonnegative")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _check_labels(model: LinearizedGlm, data: ClassificationData):
    if data.labels.max() >= model.num_classes:
        raise ContractViolationError(
            f"label {data.labels.max()} out of range for {model.num_classes} classes"
        )


def glm_logits(model: LinearizedGlm, x: np.ndarray) -> np.ndarray:
    """Logits J' theta' (plus f(X; theta) in the full Taylor view), one row per datum."""
    jac = JacobianOperator(model.network, x)
    logits = jac.jvp(model.coefficients).reshape(jac.n_data, model.num_classes)
    if model.include_network_output:
        logits = logits + jac.outputs
    return logits


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


@dataclass(frozen=True)
class GlmFitConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractViolationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ContractViolationError(f"epochs must be nonnegative, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractViolationError(f"batch size must be positive, got {self.batch_size}")


@dataclass(frozen=True)
class MapPosterior:
    kind = "map"
    coefficients: np.ndarray


@dataclass(frozen=True)
class MeanFieldPosterior:
    kind = "meanfield"
    mu: np.ndarray
    raw_scales: np.ndarray

    @property
    def scales(self) -> np.ndarray:
        return _softplus(self.raw_scales)


@dataclass(frozen=True)
class LaplacePosterior:
    """MAP mean with Fisher-plus-prior precision.

    ``fisher_x`` fixes the inputs the Fisher is estimated on; ``None``
    defers to the prediction batch, which makes predictions depend on
    batch composition and exists to mirror that published variant.
    """

    kind = "laplace"
    mean: np.ndarray
    n_train: int
    prior_variance: float
    fisher_x: np.ndarray | None


GaussianPosteriorApprox = MapPosterior | MeanFieldPosterior | LaplacePosterior


@dataclass(frozen=True)
class GlmMapResult:
    model: LinearizedGlm
    loss_trace: np.ndarray

    @property
    def posterior(self) -> MapPosterior:
        return MapPosterior(coefficients=self.model.coefficients)


@dataclass(frozen=True)
class GlmSviResult:
    posterior: MeanFieldPosterior
    elbo_trace: np.ndarray


def _batch_nll_grad(model: LinearizedGlm, coeff: np.ndarray, x, labels):
    """Summed NLL over the batch, its logit gradient, and the Jacobian view."""
    jac = JacobianOperator(model.network, x)
    logits = jac.jvp(coeff).reshape(jac.n_data, model.num_classes)
    if model.include_network_output:
        logits = logits + jac.outputs
    log_q = _log_softmax(logits)
    nll = -float(log_q[np.arange(len(labels)), labels].sum())
    grad_logits = np.exp(log_q)
    grad_logits[np.arange(len(labels)), labels] -= 1.0
    return nll, grad_logits, jac


def _map_objective(model: LinearizedGlm, coeff: np.ndarray, data: ClassificationData) -> float:
    nll, _, _ = _batch_nll_grad(model, coeff, data.x, data.labels)
    return nll + float(coeff @ coeff) / (2.0 * model.prior_variance)


class _Adam:
    def __init__(self, dim: int, learning_rate: float):
        self.learning_rate = learning_rate
        self.m = np.zeros(dim)
        self.u = np.zeros(dim)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.u = ADAM_BETA2 * self.u + (1 - ADAM_BETA2) * grad * grad
        m_hat = self.m / (1 - ADAM_BETA1**self.step_count)
        u_hat = self.u / (1 - ADAM_BETA2**self.step_count)
        return params - self.learning_rate * m_hat / (np.sqrt(u_hat) + ADAM_EPS)


def fit_map(model: LinearizedGlm, data: ClassificationData, cfg: GlmFitConfig) -> GlmMapResult:
    """Adam on the penalized NLL; the linearization point never moves."""
    _check_labels(model, data)
    rng = substream(cfg.seed, "glm-map")
    coeff = model.coefficients.copy()
    adam = _Adam(coeff.size, cfg.learning_rate)
    n = data.n
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            nll, grad_logits, jac = _batch_nll_grad(
                model, coeff, data.x[batch], data.labels[batch]
            )
            scale = n / len(batch)
            grad = scale * jac.vjp(grad_logits.ravel()) + coeff / model.prior_variance
            coeff = adam.step(coeff, grad)
        epoch_loss = _map_objective(model, coeff, data)
        if not (np.isfinite(epoch_loss) and np.all(np.isfinite(coeff))):
            raise TrainingDivergenceError(
                f"MAP objective became non-finite at epoch {epoch}", epoch=epoch
            )
        trace.append(epoch_loss)
    return GlmMapResult(model=model.with_coefficients(coeff), loss_trace=np.array(trace))


def kl_meanfield_to_prior(mu: np.ndarray, scales: np.ndarray, prior_variance: float) -> float:
    """KL(N(mu, diag(scales^2)) || N(0, prior_variance I)), coordinatewise closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0):
        raise ContractViolationError("posterior scales must be strictly positive")
    if not prior_variance > 0:
        raise ContractViolationError(f"prior variance must be positive, got {prior_variance}")
    var_ratio = scales * scales / prior_variance
    return float(np.sum(0.5 * (var_ratio + mu * mu / prior_variance - 1.0) - 0.5 * np.log(var_ratio)))


def fit_svi(model: LinearizedGlm, data: ClassificationData, cfg: GlmFitConfig) -> GlmSviResult:
    """Mean-field Gaussian over the coefficients by a one-sample reparameterized ELBO."""
    _check_labels(model, data)
    rng = substream(cfg.seed, "glm-svi")
    p = model.coefficients.size
    mu = np.zeros(p)
    raw = np.full(p, SVI_RAW_SCALE_INIT)
    adam = _Adam(2 * p, cfg.learning_rate)
    n = data.n
    prior = model.prior_variance
    elbo_trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            scales = _softplus(raw)
            z = rng.standard_normal(p)
            theta = mu + scales * z
            nll, grad_logits, jac = _batch_nll_grad(
                model, theta, data.x[batch], data.labels[batch]
            )
            scale = n / len(batch)
            g_theta = scale * jac.vjp(grad_logits.ravel())
            kl = kl_meanfield_to_prior(mu, scales, prior)
            grad_mu = g_theta + mu / prior
            grad_raw = (g_theta * z + scales / prior - 1.0 / scales) * _sigmoid(raw)
            loss = scale * nll + kl
            if not np.isfinite(loss):
                raise TrainingDivergenceError(
                    f"ELBO became non-finite at epoch {epoch}", epoch=epoch
                )
            elbo_trace.append(-loss)
            packed = adam.step(np.concatenate([mu, raw]), np.concatenate([grad_mu, grad_raw]))
            mu, raw = packed[:p], packed[p:]
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(raw))):
            raise TrainingDivergenceError(
                f"variational parameters became non-finite at epoch {epoch}", epoch=epoch
            )
    return GlmSviResult(
        posterior=MeanFieldPosterior(mu=mu, raw_scales=raw),
        elbo_trace=np.array(elbo_trace),
    )


def fit_laplace(
    model: LinearizedGlm,
    data: ClassificationData,
    cfg: GlmFitConfig,
    fisher_source: str = "train",
) -> LaplacePosterior:
    """MAP fit followed by a Fisher-plus-prior precision around it.

    ``fisher_source="train"`` pins the Fisher to the training inputs;
    ``"test_batch"`` leaves it to be estimated on each prediction batch.
    """
    if fisher_source not in ("train", "test_batch"):
        raise ContractViolationError(
            f"fisher_source must be 'train' or 'test_batch', got {fisher_source!r}"
        )
    fitted = fit_map(model, data, cfg)
    return LaplacePosterior(
        mean=fitted.model.coefficients,
        n_train=data.n,
        prior_variance=model.prior_variance,
        fisher_x=data.x if fisher_source == "train" else None,
    )


def laplace_precision(
    model: LinearizedGlm,
    posterior: LaplacePosterior,
    x: np.ndarray | None = None,
) -> SymmetricLinearOperator:
    """n F(theta_MAP) + prior_variance^{-1} I as a matrix-free operator.

    The Fisher blocks use the linearized model's own predictive
    probabilities at the MAP coefficients, averaged over the pinned
    inputs (or over ``x`` in test-batch mode) and upscaled to the
    training-set size.
    """
    fisher_x = posterior.fisher_x if posterior.fisher_x is not None else x
    if fisher_x is None:
        raise ContractViolationError(
            "test-batch Fisher needs the prediction inputs; pass x"
        )
    at_map = model.with_coefficients(posterior.mean)
    jac = JacobianOperator(at_map.network, fisher_x)
    logits = glm_logits(at_map, fisher_x)
    like = CategoricalLikelihood(model.num_classes)
    n_batch = jac.n_data
    upscale = posterior.n_train / n_batch

    def base(v):
        tangent = jac.jvp(v).reshape(n_batch, model.num_classes)
        return upscale * jac.vjp(_hessian_block_apply(like, logits, tangent).ravel())

    return SymmetricLinearOperator(
        dim=jac.param_count, base=base, shift=1.0 / posterior.prior_variance
    )


def sample_gaussian_from_precision(
    op: SymmetricLinearOperator,
    mean: np.ndarray,
    rng: np.random.Generator,
    rank: int | None = None,
) -> np.ndarray:
    """One draw from N(mean, op^{-1}) via a Lanczos inverse root.

    Exact (up to roundoff) whenever the Krylov space of the probe
    exhausts, which happens after rank(op - shift I) + 1 steps; the
    default rank budget runs to the full dimension.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if mean.shape != (op.dim,):
        raise ContractViolationError(
            f"mean of shape {mean.shape} does not match operator dim {op.dim}"
        )
    z = rng.standard_normal(op.dim)
    factors = lanczos_factorize(op, z, rank if rank is not None else op.dim)
    root = lowrank_inverse_root(factors)
    return mean + float(np.linalg.norm(z)) * root[:, 0]


def _laplace_sample_rank(posterior: LaplacePosterior, model: LinearizedGlm, fisher_x) -> int:
    p = model.coefficients.size
    budget = fisher_x.shape[0] * (model.num_classes - 1) + 2
    return min(p, budget)


def predict_class(
    model: LinearizedGlm,
    approx: GaussianPosteriorApprox,
    x: np.ndarray,
    mode: str = "mean",
    seed: int = 0,
):
    """Class probabilities and argmax labels under a fitted posterior.

    ``mode="mean"`` evaluates at the posterior mean; ``"single_sample"``
    draws one coefficient vector for the whole batch. Ties in the argmax
    resolve to the lowest class index.
    """
    if mode not in ("mean", "single_sample"):
        raise ContractViolationError(f"mode must be 'mean' or 'single_sample', got {mode!r}")
    if isinstance(approx, MapPosterior):
        coeff = approx.coefficients
    elif isinstance(approx, MeanFieldPosterior):
        if mode == "mean":
            coeff = approx.mu
        else:
            rng = substream(seed, "glm-predict")
            coeff = approx.mu + approx.scales * rng.standard_normal(approx.mu.size)
    elif isinstance(approx, LaplacePosterior):
        if mode == "mean":
            coeff = approx.mean
        else:
            fisher_x = approx.fisher_x if approx.fisher_x is not None else np.asarray(x, dtype=np.float64)
            op = laplace_precision(model, approx, x)
            rng = substream(seed, "glm-predict")
            coeff = sample_gaussian_from_precision(
                op, approx.mean, rng, rank=_laplace_sample_rank(approx, model, fisher_x)
            )
    else:
        raise ContractViolationError(f"unknown posterior kind {type(approx).__name__}")
    probs = _softmax(glm_logits(model.with_coefficients(coeff), x))
    labels = np.argmax(probs, axis=1)
    return probs, labels


def prediction_csv(probs: np.ndarray, labels: np.ndarray) -> str:
    header = ["index", "label"] + [f"prob_{c}" for c in range(probs.shape[1])]
    rows = [
        [str(i), str(int(labels[i]))] + [fmt_float(v) for v in probs[i]]
        for i in range(probs.shape[0])
    ]
    return render_csv(header, rows)
