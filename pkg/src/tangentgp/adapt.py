"""Fast adaptation: train a network once, refit a tangent-kernel GP per task.

The workflow trains a source network a single time, then treats each new
task as GP regression with the source's Jacobian features: no gradients,
no retraining, one linear solve per task. Baselines (no retraining at
all, refitting only the final layer) and seeded synthetic task
generators for the sinusoid and surface benchmarks live here too.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolationError, TangentGpError
from .gp import NtkPosterior, fit_posterior, kernel_matrix, predict
from .net import (
    MlpArchitecture,
    MlpNetwork,
    OptimizerConfig,
    TaskDataset,
    _forward_trace,
    forward,
    init_network,
    train,
)
from .seeding import substream
from .serialize import canonical_json, fmt_float, render_csv

RESULT_COLUMNS = ("task_id", "method", "context_size", "mse", "nll", "wall_ms")


@dataclass(frozen=True)
class Metrics:
    """Evaluation metrics for one method on one task."""

    mse: float
    nll: float
    wall_ms: float | None = None


def _mean_columns(arch: MlpArchitecture):
    """Indices of the mean channels among the network's raw outputs."""
    if arch.heteroscedastic:
        return list(range(0, 2 * arch.output_dim, 2))
    return list(range(arch.output_dim))


def _mean_channel_spec(arch: MlpArchitecture):
    """Channel selection to hand the GP: None when nothing is excluded."""
    return tuple(_mean_columns(arch)) if arch.heteroscedastic else None


def gaussian_nll(mean: np.ndarray, variance: np.ndarray, targets: np.ndarray) -> float:
    """Average negative log density per scalar target under N(mean, variance)."""
    variance = np.broadcast_to(np.asarray(variance, dtype=np.float64), mean.shape)
    if np.any(variance <= 0.0):
        raise ContractViolationError("predictive variance must be positive for the NLL")
    dev = targets - mean
    return float(np.mean(0.5 * (np.log(2.0 * np.pi * variance) + dev * dev / variance)))


def mean_squared_error(pred: np.ndarray, targets: np.ndarray) -> float:
    dev = pred - targets
    return float(np.mean(dev * dev))


# ---------------------------------------------------------------------------
# Task generators


@dataclass(frozen=True)
class SinusoidTaskSpec:
    """Generator for y = A sin(w x + b) + noise regression tasks.

    Amplitudes are Uniform(0.1, 5), frequencies and phases Uniform(0, 2pi),
    and the noise is Gaussian with variance 0.01 A, so harder (larger
    amplitude) tasks are also noisier. Inputs are 1-D uniform draws.
    """

    points_per_task: int = 50
    x_low: float = -5.0
    x_high: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.points_per_task < 1:
            raise ContractViolationError("tasks need at least one point")
        if not self.x_low < self.x_high:
            raise ContractViolationError(
                f"input interval [{self.x_low}, {self.x_high}] is empty"
            )


def sinusoid_targets(amplitude: float, frequency: float, phase: float, x) -> np.ndarray:
    """Noise-free sinusoid values; the deterministic part of the generator."""
    return amplitude * np.sin(frequency * np.asarray(x, dtype=np.float64) + phase)


def sample_sinusoid_tasks(spec: SinusoidTaskSpec, num_tasks: int) -> list[TaskDataset]:
    if num_tasks < 1:
        raise ContractViolationError(f"num_tasks must be >= 1, got {num_tasks}")
    rng = substream(spec.seed, "sinusoid-tasks")
    tasks = []
    for _ in range(num_tasks):
        amplitude = rng.uniform(0.1, 5.0)
        frequency = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        x = rng.uniform(spec.x_low, spec.x_high, size=(spec.points_per_task, 1))
        noise_variance = 0.01 * amplitude
        y = sinusoid_targets(amplitude, frequency, phase, x)
        y = y + rng.normal(0.0, np.sqrt(noise_variance), size=y.shape)
        tasks.append(TaskDataset(x, y, noise_variance=noise_variance))
    return tasks


def split_task(data: TaskDataset, context_size: int, seed: int = 0):
    """Split one task into disjoint (context, evaluation) sets by index.

    Returns (context, None) when the context swallows every point.
    """
    n = data.x.shape[0]
    if not 1 <= context_size <= n:
        raise ContractViolationError(
            f"context size must lie in [1, {n}], got {context_size}"
        )
    order = substream(seed, "task-split").permutation(n)
    return _split_by_picks(data, order[:context_size])


def stratified_split(data: TaskDataset, context_size: int):
    """Deterministic (context, evaluation) split with spread-out context points.

    Sorts by the first input coordinate and takes one context point from
    the middle of each of ``context_size`` equal slices, so the context
    covers the input range instead of leaving random gaps. Intended for
    1-D inputs; higher dimensions stratify on the first coordinate only.
    """
    n = data.x.shape[0]
    if not 1 <= context_size <= n:
        raise ContractViolationError(
            f"context size must lie in [1, {n}], got {context_size}"
        )
    order = np.argsort(data.x[:, 0], kind="stable")
    picks = order[(np.arange(context_size) * n + n // 2) // context_size]
    return _split_by_picks(data, picks)


def _split_by_picks(data: TaskDataset, picks: np.ndarray):
    mask = np.zeros(data.x.shape[0], dtype=bool)
    mask[picks] = True
    context = TaskDataset(data.x[mask], data.y[mask], data.noise_variance)
    if mask.all():
        return context, None
    return context, TaskDataset(data.x[~mask], data.y[~mask], data.noise_variance)


def select_noise_by_loo(kernel: np.ndarray, targets: np.ndarray, grid) -> float:
    """Pick the noise variance whose GP has the smallest leave-one-out MSE.

    Uses the closed-form identity: with G = K + sigma^2 I and alpha =
    G^{-1} y, the leave-one-out residual at point i is alpha_i divided by
    (G^{-1})_{ii}, so each candidate costs one factorization instead of
    n refits. Ties resolve to the earlier grid entry.
    """
    grid = tuple(float(g) for g in grid)
    if not grid or any(not g > 0 for g in grid):
        raise ContractViolationError("noise grid must be positive variances")
    y = np.asarray(targets, dtype=np.float64).ravel()
    if kernel.shape[0] != y.size:
        raise ContractViolationError(
            f"kernel is {kernel.shape[0]}x{kernel.shape[1]} but there are {y.size} targets"
        )
    eye = np.eye(kernel.shape[0])
    best, best_score = grid[0], np.inf
    for sigma2 in grid:
        inv = np.linalg.inv(kernel + sigma2 * eye)
        residuals = (inv @ y) / np.diag(inv)
        score = float(np.mean(residuals * residuals))
        if score < best_score:
            best, best_score = sigma2, score
    return best


# ---------------------------------------------------------------------------
# The adaptation run


@dataclass(frozen=True)
class AdaptConfig:
    """Settings shared by every task in an adaptation run.

    ``center_on_network`` regresses the residual y - f(X) and adds f back
    at prediction, so an uninformative posterior falls back to the source
    network exactly; it requires the zero prior mean (any other
    ``mean_kind`` would count the network's output twice).
    ``noise_variance`` overrides each context's own value (the usual
    choice is the source network's training MSE), while ``noise_grid``
    instead picks the variance per task by leave-one-out error over the
    given candidates; ``timing`` adds wall-clock milliseconds to the
    metrics at the cost of byte-reproducible outputs.
    """

    space: str = "auto"
    mean_kind: str = "zero"
    rank: int | None = None
    center_on_network: bool = True
    noise_variance: float | None = None
    noise_grid: tuple[float, ...] | None = None
    timing: bool = False

    def __post_init__(self):
        if self.center_on_network and self.mean_kind != "zero":
            raise ContractViolationError(
                "centering on the network requires mean_kind 'zero'"
            )
        if self.noise_variance is not None and not self.noise_variance > 0:
            raise ContractViolationError(
                f"noise variance override must be positive, got {self.noise_variance}"
            )
        if self.noise_grid is not None:
            if self.noise_variance is not None:
                raise ContractViolationError(
                    "give either a fixed noise variance or a selection grid, not both"
                )
            if len(self.noise_grid) == 0 or any(not g > 0 for g in self.noise_grid):
                raise ContractViolationError("noise grid must be positive variances")


@dataclass(frozen=True)
class TaskAdaptation:
    """Outcome of adapting to one task: a status plus whatever was produced."""

    task_id: int
    status: str  # "ok" | "no-eval" | "failed"
    posterior: NtkPosterior | None = None
    metrics: Metrics | None = None
    error: str | None = None


@dataclass(frozen=True)
class AdaptationRun:
    source_fingerprint: str
    config: AdaptConfig
    tasks: tuple[TaskAdaptation, ...]

    @property
    def failures(self) -> tuple[TaskAdaptation, ...]:
        return tuple(t for t in self.tasks if t.status == "failed")

    def metric_rows(self, method: str = "finite-ntk"):
        rows = []
        for t in self.tasks:
            if t.metrics is None:
                continue
            rows.append(_result_row(t.task_id, method, None, t.metrics))
        return rows


def _result_row(task_id, method: str, context_size, metrics: Metrics):
    return [
        str(task_id),
        method,
        "" if context_size is None else str(context_size),
        fmt_float(metrics.mse),
        fmt_float(metrics.nll),
        "" if metrics.wall_ms is None else fmt_float(metrics.wall_ms),
    ]


def results_csv(rows) -> str:
    return render_csv(list(RESULT_COLUMNS), rows)


def adapt_task(
    source: MlpNetwork,
    context: TaskDataset,
    eval_set: TaskDataset | None,
    cfg: AdaptConfig = AdaptConfig(),
):
    """Fit the tangent-kernel posterior on one context set and evaluate it.

    Returns (posterior, metrics); metrics is None without an eval set.
    Adaptation is linear algebra only: the source parameters are never
    stepped, so the Jacobian is computed fresh here and discarded after.
    """
    arch = source.architecture
    mean_cols = _mean_columns(arch)
    channels = _mean_channel_spec(arch)
    sigma2 = cfg.noise_variance if cfg.noise_variance is not None else context.noise_variance
    targets = context.y
    if cfg.center_on_network:
        targets = context.y - forward(source, context.x)[:, mean_cols]
    if cfg.noise_grid is not None:
        kernel = kernel_matrix(source, context.x, channels=channels)
        sigma2 = select_noise_by_loo(kernel, targets, cfg.noise_grid)
    fit_data = TaskDataset(context.x, targets, noise_variance=sigma2)
    posterior = fit_posterior(
        source,
        fit_data,
        mean_kind=cfg.mean_kind,
        rank=cfg.rank,
        channels=channels,
        space=cfg.space,
    )
    if eval_set is None:
        return posterior, None
    mean, var = predict(posterior, source, eval_set.x)
    if cfg.center_on_network:
        mean = mean + forward(source, eval_set.x)[:, mean_cols]
    return posterior, Metrics(
        mse=mean_squared_error(mean, eval_set.y),
        nll=gaussian_nll(mean, var + sigma2, eval_set.y),
    )


def _adapt_one(source: MlpNetwork, task_id: int, context, eval_set, cfg: AdaptConfig):
    started = time.perf_counter() if cfg.timing else None
    try:
        posterior, metrics = adapt_task(source, context, eval_set, cfg)
    except TangentGpError as exc:
        return TaskAdaptation(task_id, "failed", error=str(exc))
    if metrics is None:
        return TaskAdaptation(task_id, "no-eval", posterior=posterior)
    if started is not None:
        metrics = replace(metrics, wall_ms=(time.perf_counter() - started) * 1e3)
    return TaskAdaptation(task_id, "ok", posterior=posterior, metrics=metrics)


def run_adaptation(
    source: MlpNetwork,
    tasks,
    cfg: AdaptConfig = AdaptConfig(),
    threads: int = 1,
) -> AdaptationRun:
    """Adapt one source network to a list of (context, eval) task pairs.

    Each task is independent: a failure is recorded on its entry (status
    "failed") and the run continues. Tasks without an eval set get status
    "no-eval" and no metrics. With ``threads`` > 1 the tasks run on a
    thread pool; results stay in task order either way.
    """
    if threads < 1:
        raise ContractViolationError(f"threads must be >= 1, got {threads}")
    pairs = list(tasks)
    for task_id, (context, _) in enumerate(pairs):
        if not isinstance(context, TaskDataset):
            raise ContractViolationError(f"task {task_id} has no context dataset")
    if threads == 1:
        records = [
            _adapt_one(source, i, context, eval_set, cfg)
            for i, (context, eval_set) in enumerate(pairs)
        ]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(
                pool.map(
                    lambda item: _adapt_one(source, item[0], *item[1], cfg),
                    enumerate(pairs),
                )
            )
    return AdaptationRun(
        source_fingerprint=source.fingerprint(), config=cfg, tasks=tuple(records)
    )


# ---------------------------------------------------------------------------
# Baselines


def baseline_no_retrain(
    source: MlpNetwork, eval_set: TaskDataset, noise_variance: float | None = None
) -> Metrics:
    """Evaluate the unmodified source network; the floor every method must beat."""
    sigma2 = noise_variance if noise_variance is not None else eval_set.noise_variance
    pred = forward(source, eval_set.x)[:, _mean_columns(source.architecture)]
    return Metrics(
        mse=mean_squared_error(pred, eval_set.y),
        nll=gaussian_nll(pred, np.full_like(pred, sigma2), eval_set.y),
    )


def refit_last_layer(
    source: MlpNetwork, context: TaskDataset, cfg: OptimizerConfig
) -> MlpNetwork:
    """Retrain only the final layer on the context set, features frozen.

    The head of an MLP is itself an affine network over the last hidden
    activations, so this reuses the ordinary training loop on that
    one-layer view and splices the result back; everything before the
    final layer stays bit-identical.
    """
    arch = source.architecture
    w_slice, b_slice, fan_in, _ = arch.layer_slices()[-1]
    _, layer_inputs, _ = _forward_trace(source, context.x)
    head_arch = MlpArchitecture(
        fan_in, (), arch.output_dim, activation="identity", heteroscedastic=arch.heteroscedastic
    )
    head = MlpNetwork(head_arch, np.concatenate([source.params[w_slice], source.params[b_slice]]))
    head_data = TaskDataset(layer_inputs[-1], context.y, context.noise_variance)
    refit = train(head, head_data, cfg).network
    w_count = w_slice.stop - w_slice.start
    params = source.params.copy()
    params[w_slice] = refit.params[:w_count]
    params[b_slice] = refit.params[w_count:]
    return source.with_params(params)


def baseline_last_layer(
    source: MlpNetwork,
    context: TaskDataset,
    eval_set: TaskDataset,
    cfg: OptimizerConfig,
    noise_variance: float | None = None,
) -> Metrics:
    """Fixed-budget final-layer fine-tuning, evaluated like the other methods."""
    refit = refit_last_layer(source, context, cfg)
    return baseline_no_retrain(refit, eval_set, noise_variance)


# ---------------------------------------------------------------------------
# Sinusoid experiment (source task -> many target tasks)


@dataclass(frozen=True)
class SinusoidExperimentConfig:
    """Defaults for the sinusoid transfer experiment.

    The source task is sampled densely (200 points) so the network is fit
    rather than memorized; a 40-point source reaches a training MSE below
    the task's own noise floor and its tangent features inherit the
    wiggles. ``noise_grid_decades`` spans the per-task noise search from
    the source training MSE upward, letting leave-one-out error back off
    to the prior on target tasks the context undersamples.
    """

    num_tasks: int = 20
    context_size: int = 10
    points_per_task: int = 50
    source_points: int = 200
    source_epochs: int = 2500
    source_learning_rate: float = 1e-3
    source_batch_size: int = 3
    noise_grid_decades: int = 10
    space: str = "auto"
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ContractViolationError("experiment needs at least one task")
        if not 1 <= self.context_size < self.points_per_task:
            raise ContractViolationError(
                "context size must leave at least one evaluation point per task"
            )
        if self.noise_grid_decades < 1:
            raise ContractViolationError("the noise grid needs at least one decade")


SOURCE_ARCHITECTURE = MlpArchitecture(1, (40, 40), 1, activation="tanh")


def train_sinusoid_source(cfg: SinusoidExperimentConfig):
    """Train the shared source network on a single sampled sinusoid task."""
    spec = SinusoidTaskSpec(points_per_task=cfg.source_points, seed=cfg.seed)
    source_task = sample_sinusoid_tasks(spec, 1)[0]
    net = init_network(SOURCE_ARCHITECTURE, seed=cfg.seed)
    opt = OptimizerConfig(
        optimizer="sgd-momentum",
        learning_rate=cfg.source_learning_rate,
        epochs=cfg.source_epochs,
        batch_size=cfg.source_batch_size,
        loss="mse",
        seed=cfg.seed,
    )
    result = train(net, source_task, opt)
    return result.network, source_task, opt


@dataclass(frozen=True)
class SinusoidExperiment:
    config: SinusoidExperimentConfig
    source_fingerprint: str
    source_training_mse: float
    rows: tuple[tuple[str, ...], ...]
    win_rate_vs_no_retrain: float
    win_rate_vs_last_layer: float

    def to_csv(self) -> str:
        return results_csv([list(r) for r in self.rows])

    def summary_json(self) -> str:
        return canonical_json(
            {
                "num_tasks": self.config.num_tasks,
                "context_size": self.config.context_size,
                "seed": self.config.seed,
                "source_training_mse": self.source_training_mse,
                "win_rate_vs_no_retrain": self.win_rate_vs_no_retrain,
                "win_rate_vs_last_layer": self.win_rate_vs_last_layer,
            }
        )


def sinusoid_experiment(cfg: SinusoidExperimentConfig = SinusoidExperimentConfig()):
    """Head-to-head on fresh sinusoid tasks: adapted GP vs both baselines.

    Context points are spread across the input range (quantile split), the
    GP regresses the raw targets under a zero prior mean, and each task
    picks its noise level by leave-one-out error over a decade grid
    anchored at the source network's training MSE. The last-layer baseline
    gets the source's full training budget, so each method sees the same
    information.
    """
    source, source_task, source_opt = train_sinusoid_source(cfg)
    source_mse = mean_squared_error(forward(source, source_task.x), source_task.y)
    spec = SinusoidTaskSpec(points_per_task=cfg.points_per_task, seed=cfg.seed + 1)
    raw_tasks = sample_sinusoid_tasks(spec, cfg.num_tasks)
    pairs = [stratified_split(t, cfg.context_size) for t in raw_tasks]
    grid = tuple(source_mse * 10.0**d for d in range(cfg.noise_grid_decades))
    run = run_adaptation(
        source,
        pairs,
        AdaptConfig(
            space=cfg.space, center_on_network=False, noise_grid=grid, timing=cfg.timing
        ),
    )
    rows = []
    ntk_wins_plain = 0
    ntk_wins_head = 0
    for record, (context, eval_set) in zip(run.tasks, pairs):
        if record.status != "ok":
            raise TangentGpError(
                f"task {record.task_id} did not adapt: {record.error or record.status}"
            )
        started = time.perf_counter() if cfg.timing else None
        plain = baseline_no_retrain(source, eval_set, noise_variance=source_mse)
        if started is not None:
            plain = replace(plain, wall_ms=(time.perf_counter() - started) * 1e3)
        started = time.perf_counter() if cfg.timing else None
        head = baseline_last_layer(source, context, eval_set, source_opt, noise_variance=source_mse)
        if started is not None:
            head = replace(head, wall_ms=(time.perf_counter() - started) * 1e3)
        ntk = record.metrics
        ntk_wins_plain += ntk.mse < plain.mse
        ntk_wins_head += ntk.mse < head.mse
        rows.append(_result_row(record.task_id, "finite-ntk", cfg.context_size, ntk))
        rows.append(_result_row(record.task_id, "no-retrain", cfg.context_size, plain))
        rows.append(_result_row(record.task_id, "last-layer", cfg.context_size, head))
    return SinusoidExperiment(
        config=cfg,
        source_fingerprint=run.source_fingerprint,
        source_training_mse=source_mse,
        rows=tuple(tuple(r) for r in rows),
        win_rate_vs_no_retrain=ntk_wins_plain / cfg.num_tasks,
        win_rate_vs_last_layer=ntk_wins_head / cfg.num_tasks,
    )


# ---------------------------------------------------------------------------
# Heteroscedastic surface benchmark over context sizes


@dataclass(frozen=True)
class SurfaceBenchmarkConfig:
    """Synthetic stand-in for the real-data transfer benchmarks: a smooth
    2-D surface as the source task and the same surface plus an additive
    shift as the target, scanned over context-set sizes."""

    context_grid: tuple[int, ...] = (0, 5, 10, 20, 40)
    eval_points: int = 80
    source_points: int = 150
    source_epochs: int = 300
    source_learning_rate: float = 1e-2
    source_batch_size: int = 32
    noise_std: float = 0.1
    noise_grid_decades: int = 4
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        if len(self.context_grid) == 0 or any(s < 0 for s in self.context_grid):
            raise ContractViolationError("context grid must be nonnegative sizes")
        if list(self.context_grid) != sorted(set(self.context_grid)):
            raise ContractViolationError("context grid must be strictly increasing")
        if self.eval_points < 1 or self.source_points < 2:
            raise ContractViolationError("need evaluation points and a source sample")
        if self.noise_grid_decades < 1:
            raise ContractViolationError("the noise grid needs at least one decade")


SURFACE_ARCHITECTURE = MlpArchitecture(2, (32,), 1, activation="tanh", heteroscedastic=True)


def _source_surface(x: np.ndarray) -> np.ndarray:
    return 2.0 * np.sin(x[:, :1]) * np.cos(x[:, 1:2])


def _target_surface(x: np.ndarray) -> np.ndarray:
    return _source_surface(x) + 1.2 * np.tanh(x[:, :1] + x[:, 1:2])


def _surface_sample(rng, n: int, surface, noise_std: float) -> TaskDataset:
    x = rng.uniform(-2.0, 2.0, size=(n, 2))
    y = surface(x) + rng.normal(0.0, noise_std, size=(n, 1))
    return TaskDataset(x, y, noise_variance=noise_std * noise_std)


def heteroscedastic_adaptation_benchmark(cfg: SurfaceBenchmarkConfig = SurfaceBenchmarkConfig()):
    """MSE of each method as the target context grows, one row per cell.

    Contexts are nested (each size extends the previous one) so the
    columns isolate the effect of more data. Each GP fit picks its noise
    level by leave-one-out error over a short decade grid anchored at the
    source training MSE. At context size 0 the adapted methods degenerate
    to the unmodified source network.
    """
    source_data = _surface_sample(
        substream(cfg.seed, "surface-source"), cfg.source_points, _source_surface, cfg.noise_std
    )
    net = init_network(SURFACE_ARCHITECTURE, seed=cfg.seed)
    opt = OptimizerConfig(
        optimizer="adam",
        learning_rate=cfg.source_learning_rate,
        epochs=cfg.source_epochs,
        batch_size=cfg.source_batch_size,
        loss="heteroscedastic-gaussian",
        seed=cfg.seed,
    )
    source = train(net, source_data, opt).network
    source_pred = forward(source, source_data.x)[:, _mean_columns(SURFACE_ARCHITECTURE)]
    sigma2 = mean_squared_error(source_pred, source_data.y)
    pool = _surface_sample(
        substream(cfg.seed, "surface-target"),
        max(cfg.context_grid) if max(cfg.context_grid) > 0 else 1,
        _target_surface,
        cfg.noise_std,
    )
    eval_set = _surface_sample(
        substream(cfg.seed, "surface-eval"), cfg.eval_points, _target_surface, cfg.noise_std
    )
    grid = tuple(sigma2 * 10.0**d for d in range(cfg.noise_grid_decades))
    adapt_cfg = AdaptConfig(noise_grid=grid)
    rows = []
    started = time.perf_counter() if cfg.timing else None
    plain = baseline_no_retrain(source, eval_set, noise_variance=sigma2)
    if started is not None:
        plain = replace(plain, wall_ms=(time.perf_counter() - started) * 1e3)
    for size in cfg.context_grid:
        if size == 0:
            # With nothing to condition on, both adapted methods are the
            # source network itself.
            for method in ("finite-ntk", "no-retrain", "last-layer"):
                rows.append(_result_row(0, method, 0, plain))
            continue
        context = TaskDataset(pool.x[:size], pool.y[:size], pool.noise_variance)
        started = time.perf_counter() if cfg.timing else None
        _, ntk = adapt_task(source, context, eval_set, adapt_cfg)
        if started is not None:
            ntk = replace(ntk, wall_ms=(time.perf_counter() - started) * 1e3)
        started = time.perf_counter() if cfg.timing else None
        head = baseline_last_layer(source, context, eval_set, opt, noise_variance=sigma2)
        if started is not None:
            head = replace(head, wall_ms=(time.perf_counter() - started) * 1e3)
        rows.append(_result_row(0, "finite-ntk", size, ntk))
        rows.append(_result_row(0, "no-retrain", size, plain))
        rows.append(_result_row(0, "last-layer", size, head))
    return rows


def benchmark_ntk_mse(rows) -> list[float]:
    """The finite-NTK MSE column of a benchmark table, in grid order."""
    return [float(r[3]) for r in rows if r[1] == "finite-ntk"]
