"""Command-line front end: train, adapt, predict, benchmark, study.

Every command reads local files, writes one output file atomically, and
embeds provenance (tool version, resolved-config hash) in what it
writes. Exit codes: 0 success, 2 input or parse error, 3 consistency
error (stale or mismatched artifacts), 4 numeric failure. The only
environment influence is TANGENTGP_LOG_LEVEL.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapt import (
    RESULT_COLUMNS,
    AdaptConfig,
    SinusoidTaskSpec,
    _result_row,
    baseline_last_layer,
    baseline_no_retrain,
    results_csv,
    run_adaptation,
    sample_sinusoid_tasks,
    sinusoid_experiment,
    stratified_split,
)
from .analysis import SimilarityReport, jacobian_similarity, task_similarity_study
from .config import (
    CONFIG_VERSION,
    architecture_from,
    block_or_defaults,
    config_hash,
    experiment_config_from,
    glm_fit_config_from,
    load_checkpoint,
    load_config,
    optimizer_from,
    read_task_manifest,
    resolve_config,
    save_checkpoint,
    study_config_from,
)
from .errors import (
    ConfigError,
    ContractViolationError,
    FitError,
    NumericBreakdownError,
    ResourceLimitError,
    TrainingDivergenceError,
)
from .fisher import CategoricalLikelihood, GaussianLikelihood, fvp_error_sweep, sweep_csv
from .glm import (
    ClassificationData,
    LaplacePosterior,
    MapPosterior,
    MeanFieldPosterior,
    fit_laplace,
    fit_map,
    fit_svi,
    predict_class,
    prediction_csv,
    zero_coefficients_glm,
)
from .gp import load_posterior, predict, save_posterior
from .net import JacobianOperator, TaskDataset, init_network, train
from .serialize import (
    atomic_write_text,
    canonical_json,
    fmt_float,
    read_classification_csv,
    read_dataset_csv,
    read_inputs_csv,
    render_csv,
)

log = logging.getLogger("tangentgp")

GLM_FIT_VERSION = 1


class ConsistencyError(Exception):
    """Artifacts that should describe the same object do not (exit 3)."""


# ---------------------------------------------------------------------------
# Provenance plumbing


def _default_config(seed) -> dict:
    return resolve_config({"version": CONFIG_VERSION, "seed": seed or 0})


def _load_or_default(args) -> dict:
    if args.config is not None:
        return load_config(args.config, args.seed)
    return _default_config(args.seed)


def _provenance(resolved: dict) -> dict:
    return {"tool_version": __version__, "config_hash": config_hash(resolved)}


def _csv_provenance(resolved: dict) -> str:
    compact = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return (
        f"# tool_version: {__version__}\n"
        f"# config_hash: {config_hash(resolved)}\n"
        f"# config: {compact}\n"
    )


def _emit_rows(args, resolved: dict, columns, rows) -> None:
    if args.format == "json":
        doc = {**_provenance(resolved), "config": resolved, "columns": list(columns), "rows": rows}
        atomic_write_text(args.out, canonical_json(doc))
    else:
        atomic_write_text(args.out, _csv_provenance(resolved) + render_csv(list(columns), rows))
    log.info("wrote %s", args.out)


# ---------------------------------------------------------------------------
# Input assembly


def _training_data(resolved: dict) -> TaskDataset:
    task = block_or_defaults(resolved, "task")
    if task["kind"] == "csv":
        if task["train_csv"] is None:
            raise ConfigError("task.kind 'csv' needs task.train_csv")
        x, y = read_dataset_csv(task["train_csv"])
        return TaskDataset(x, y, noise_variance=task["noise_variance"] or 1.0)
    if task["kind"] == "sinusoid":
        spec = SinusoidTaskSpec(
            points_per_task=task["points_per_task"],
            x_low=float(task["x_low"]),
            x_high=float(task["x_high"]),
            seed=resolved["seed"],
        )
        return sample_sinusoid_tasks(spec, 1)[0]
    raise ConfigError(f"unknown task.kind {task['kind']!r}, expected 'sinusoid' or 'csv'")


def _adapt_config(resolved: dict) -> AdaptConfig:
    gp = block_or_defaults(resolved, "gp")
    noise_variance = gp["noise_variance"]
    noise_grid = None
    if gp["noise_grid_decades"] is not None:
        if noise_variance is None:
            raise ConfigError("gp.noise_grid_decades needs gp.noise_variance as the anchor")
        noise_grid = tuple(
            float(noise_variance) * 10.0**d for d in range(gp["noise_grid_decades"])
        )
        noise_variance = None
    return AdaptConfig(
        space=gp["space"],
        mean_kind=gp["mean_kind"],
        rank=gp["rank"],
        center_on_network=gp["center_on_network"],
        noise_variance=noise_variance,
        noise_grid=noise_grid,
    )


def _check_architecture(resolved: dict, network) -> None:
    if resolved.get("architecture") is None:
        return
    declared = architecture_from(resolved)
    if declared != network.architecture:
        raise ConsistencyError(
            "config architecture does not match the checkpoint: "
            f"{declared.to_dict()} vs {network.architecture.to_dict()}"
        )


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    resolved = load_config(args.config, args.seed)
    arch = architecture_from(resolved)
    opt = optimizer_from(resolved)
    data = _training_data(resolved)
    network = init_network(arch, seed=resolved["seed"])
    result = train(network, data, opt)
    save_checkpoint(result.network, args.out, _provenance(resolved))
    trace_rows = [[str(i), fmt_float(v)] for i, v in enumerate(result.loss_trace)]
    trace = _csv_provenance(resolved) + render_csv(["epoch", "loss"], trace_rows)
    atomic_write_text(_trace_path(args.out), trace)
    log.info("wrote %s and %s", args.out, _trace_path(args.out))
    return 0


def _trace_path(out) -> Path:
    p = Path(out)
    stem = p.name[: -len(".json")] if p.name.endswith(".json") else p.name
    return p.with_name(stem + ".trace.csv")


def cmd_adapt(args) -> int:
    resolved = load_config(args.config, args.seed)
    network = load_checkpoint(args.checkpoint)
    _check_architecture(resolved, network)
    task = block_or_defaults(resolved, "task")
    if args.tasks is not None:
        pairs = read_task_manifest(args.tasks)
    else:
        spec = SinusoidTaskSpec(
            points_per_task=task["points_per_task"],
            x_low=float(task["x_low"]),
            x_high=float(task["x_high"]),
            seed=resolved["seed"],
        )
        raw = sample_sinusoid_tasks(spec, task["num_tasks"])
        pairs = [stratified_split(t, task["context_size"]) for t in raw]
    cfg = _adapt_config(resolved)
    run = run_adaptation(network, pairs, cfg, threads=args.threads)
    gp = block_or_defaults(resolved, "gp")
    rows = []
    for record, (context, eval_set) in zip(run.tasks, pairs):
        if record.status == "failed":
            log.warning("task %d failed: %s", record.task_id, record.error)
            continue
        if record.metrics is None:
            continue
        size = context.x.shape[0]
        rows.append(_result_row(record.task_id, "finite-ntk", size, record.metrics))
        if gp["baselines"] and eval_set is not None:
            sigma2 = gp["noise_variance"]
            plain = baseline_no_retrain(network, eval_set, noise_variance=sigma2)
            head = baseline_last_layer(
                network, context, eval_set, optimizer_from(resolved), noise_variance=sigma2
            )
            rows.append(_result_row(record.task_id, "no-retrain", size, plain))
            rows.append(_result_row(record.task_id, "last-layer", size, head))
    if args.posterior_out is not None:
        fitted = [t for t in run.tasks if t.posterior is not None]
        if len(fitted) != 1:
            raise ConfigError(
                f"--posterior-out needs exactly one fitted task, got {len(fitted)}"
            )
        save_posterior(fitted[0].posterior, args.posterior_out)
    _emit_rows(args, resolved, RESULT_COLUMNS, rows)
    return 0


def cmd_predict(args) -> int:
    resolved = _load_or_default(args)
    network = load_checkpoint(args.checkpoint)
    posterior = load_posterior(args.posterior)
    if posterior.theta_fingerprint != network.fingerprint():
        raise ConsistencyError(
            "stale posterior cache: it was fitted at different network parameters"
        )
    x = read_inputs_csv(args.inputs)
    if posterior.channels is not None:
        width = len(posterior.channels)
    else:
        width = network.architecture.internal_output_dim
    columns = (
        [f"x_{j}" for j in range(x.shape[1])]
        + [f"mean_{c}" for c in range(width)]
        + [f"var_{c}" for c in range(width)]
    )
    rows = []
    if x.shape[0] > 0:
        mean, var = predict(posterior, network, x)
        rows = [
            [fmt_float(v) for v in x[i]]
            + [fmt_float(v) for v in mean[i]]
            + [fmt_float(v) for v in var[i]]
            for i in range(x.shape[0])
        ]
    _emit_rows(args, resolved, columns, rows)
    return 0


def cmd_fvp_bench(args) -> int:
    resolved = load_config(args.config, args.seed)
    network = load_checkpoint(args.checkpoint)
    _check_architecture(resolved, network)
    fvp = block_or_defaults(resolved, "fvp")
    if fvp["likelihood"] == "gaussian":
        like = GaussianLikelihood(noise_variance=float(fvp["noise_variance"]))
    elif fvp["likelihood"] == "categorical":
        like = CategoricalLikelihood(num_classes=network.architecture.output_dim)
    else:
        raise ConfigError(
            f"unknown fvp.likelihood {fvp['likelihood']!r}, expected 'gaussian' or 'categorical'"
        )
    x = _training_data(resolved).x
    sweep = fvp_error_sweep(
        network, x, like, fvp["epsilons"], num_probes=fvp["probes"], seed=resolved["seed"]
    )
    if args.format == "json":
        doc = {
            **_provenance(resolved),
            "config": resolved,
            "epsilons": [fmt_float(e) for e in sweep.epsilons],
            "mean_rel_err": [fmt_float(e) for e in sweep.mean_rel_err],
            "max_rel_err": [fmt_float(e) for e in sweep.max_rel_err],
            "probes": sweep.num_probes,
            "seed": sweep.seed,
        }
        atomic_write_text(args.out, canonical_json(doc))
    else:
        atomic_write_text(args.out, _csv_provenance(resolved) + sweep_csv(sweep))
    log.info("wrote %s", args.out)
    return 0


def cmd_similarity(args) -> int:
    resolved = load_config(args.config, args.seed)
    if args.checkpoints:
        if args.inputs is None:
            raise ConfigError("pairwise similarity needs --inputs with shared evaluation points")
        networks = [load_checkpoint(p) for p in args.checkpoints]
        counts = {net.architecture.parameter_count for net in networks}
        if len(counts) > 1:
            raise ConsistencyError(
                "checkpoints have different parameter counts; pairwise similarity "
                "needs a shared parameter space"
            )
        x = read_inputs_csv(args.inputs)
        if x.shape[0] == 0:
            raise ConfigError(f"{args.inputs}: need at least one evaluation point")
        jacs = [JacobianOperator(net, x).dense() for net in networks]
        m = len(jacs)
        matrix = np.eye(m)
        for i in range(m):
            for j in range(i + 1, m):
                matrix[i, j] = matrix[j, i] = jacobian_similarity(jacs[i], jacs[j])
        report = SimilarityReport(
            matrix=matrix,
            model_ids=tuple(Path(p).stem for p in args.checkpoints),
            distribution_ids=tuple(range(m)),
            n_eval=x.shape[0],
            seed=resolved["seed"],
        )
    else:
        report = task_similarity_study(study_config_from(resolved))
    if args.format == "csv":
        atomic_write_text(args.out, _csv_provenance(resolved) + report.to_csv())
    else:
        doc = {**_provenance(resolved), "config": resolved, **json.loads(report.to_json())}
        atomic_write_text(args.out, canonical_json(doc))
    log.info("wrote %s", args.out)
    return 0


def cmd_glm_fit(args) -> int:
    resolved = load_config(args.config, args.seed)
    network = load_checkpoint(args.checkpoint)
    _check_architecture(resolved, network)
    glm = block_or_defaults(resolved, "glm")
    x, labels = read_classification_csv(args.data)
    data = ClassificationData(x, labels)
    model = zero_coefficients_glm(
        network,
        include_network_output=glm["include_network_output"],
        prior_variance=float(glm["prior_variance"]),
    )
    cfg = glm_fit_config_from(resolved)
    doc = {
        "kind": "glm-fit",
        "version": GLM_FIT_VERSION,
        **_provenance(resolved),
        "method": glm["method"],
        "prior_variance": float(glm["prior_variance"]),
        "include_network_output": glm["include_network_output"],
        "network_fingerprint": network.fingerprint(),
    }
    if glm["method"] == "map":
        fitted = fit_map(model, data, cfg)
        doc["coefficients"] = [float(v) for v in fitted.model.coefficients]
    elif glm["method"] == "svi":
        fitted = fit_svi(model, data, cfg)
        doc["mu"] = [float(v) for v in fitted.posterior.mu]
        doc["raw_scales"] = [float(v) for v in fitted.posterior.raw_scales]
    elif glm["method"] == "laplace":
        approx = fit_laplace(model, data, cfg, fisher_source=glm["fisher_source"])
        doc["mean"] = [float(v) for v in approx.mean]
        doc["n_train"] = approx.n_train
        doc["fisher_on_train"] = approx.fisher_x is not None
        if approx.fisher_x is not None:
            doc["fisher_x"] = [[float(v) for v in row] for row in approx.fisher_x]
    else:
        raise ConfigError(
            f"unknown glm.method {glm['method']!r}, expected 'map', 'svi', or 'laplace'"
        )
    atomic_write_text(args.out, canonical_json(doc))
    log.info("wrote %s", args.out)
    return 0


def _load_glm_fit(path, network):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "glm-fit":
        raise ConfigError(f"{path}: not a GLM fit file")
    if doc.get("version") != GLM_FIT_VERSION:
        raise ConfigError(f"{path}: unsupported GLM fit version {doc.get('version')!r}")
    if doc.get("network_fingerprint") != network.fingerprint():
        raise ConsistencyError(
            "stale GLM fit: it was produced for different network parameters"
        )
    model = zero_coefficients_glm(
        network,
        include_network_output=doc["include_network_output"],
        prior_variance=float(doc["prior_variance"]),
    )
    method = doc.get("method")
    if method == "map":
        approx = MapPosterior(coefficients=np.asarray(doc["coefficients"], dtype=np.float64))
    elif method == "svi":
        approx = MeanFieldPosterior(
            mu=np.asarray(doc["mu"], dtype=np.float64),
            raw_scales=np.asarray(doc["raw_scales"], dtype=np.float64),
        )
    elif method == "laplace":
        fisher_x = None
        if doc.get("fisher_on_train"):
            fisher_x = np.asarray(doc["fisher_x"], dtype=np.float64)
        approx = LaplacePosterior(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            n_train=int(doc["n_train"]),
            prior_variance=float(doc["prior_variance"]),
            fisher_x=fisher_x,
        )
    else:
        raise ConfigError(f"{path}: unknown fit method {method!r}")
    return model, approx


def cmd_glm_predict(args) -> int:
    resolved = _load_or_default(args)
    network = load_checkpoint(args.checkpoint)
    model, approx = _load_glm_fit(args.fit, network)
    glm = block_or_defaults(resolved, "glm")
    x = read_inputs_csv(args.inputs)
    if x.shape[0] == 0:
        header = ["index", "label"] + [f"prob_{c}" for c in range(model.num_classes)]
        _emit_rows(args, resolved, header, [])
        return 0
    probs, labels = predict_class(
        model, approx, x, mode=glm["predict_mode"], seed=resolved["seed"]
    )
    if args.format == "json":
        doc = {
            **_provenance(resolved),
            "config": resolved,
            "labels": [int(v) for v in labels],
            "probs": [[fmt_float(v) for v in row] for row in probs],
        }
        atomic_write_text(args.out, canonical_json(doc))
    else:
        atomic_write_text(args.out, _csv_provenance(resolved) + prediction_csv(probs, labels))
    log.info("wrote %s", args.out)
    return 0


def cmd_sinusoid_exp(args) -> int:
    resolved = load_config(args.config, args.seed)
    exp = sinusoid_experiment(experiment_config_from(resolved))
    if args.format == "json":
        doc = {
            **_provenance(resolved),
            "config": resolved,
            "summary": json.loads(exp.summary_json()),
            "columns": list(RESULT_COLUMNS),
            "rows": [list(r) for r in exp.rows],
        }
        atomic_write_text(args.out, canonical_json(doc))
    else:
        atomic_write_text(args.out, _csv_provenance(resolved) + exp.to_csv())
    log.info(
        "win rates: %.2f vs no-retrain, %.2f vs last-layer",
        exp.win_rate_vs_no_retrain,
        exp.win_rate_vs_last_layer,
    )
    log.info("wrote %s", args.out)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch


def _add_common(sub, config_required=True, default_format="csv"):
    sub.add_argument("--config", required=config_required, help="experiment config JSON")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--out", required=True, help="output file path")
    sub.add_argument("--format", choices=("csv", "json"), default=default_format)
    sub.add_argument("--threads", type=int, default=1, help="worker threads for independent tasks")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tangentgp",
        description="Tangent-kernel GP workflows: train, adapt, benchmark, compare.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write a checkpoint")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="fit a GP per task around a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="JSON manifest of context/eval CSV pairs")
    p.add_argument("--posterior-out", help="save the fitted posterior (single-task runs)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("predict", help="evaluate a cached posterior at new inputs")
    _add_common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--posterior", required=True)
    p.add_argument("--inputs", required=True, help="inputs-only CSV (x_0..x_{d-1})")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("fvp-bench", help="finite-difference Fisher product error sweep")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_fvp_bench)

    p = sub.add_parser("similarity", help="tangent-kernel similarity study or pairwise compare")
    _add_common(p, default_format="json")
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--inputs", help="shared evaluation inputs CSV for pairwise mode")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("glm-fit", help="fit a linearized softmax GLM around a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="classification CSV (x_0..x_{d-1},label)")
    p.set_defaults(func=cmd_glm_fit)

    p = sub.add_parser("glm-predict", help="class probabilities under a fitted GLM posterior")
    _add_common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fit", required=True, help="GLM fit file from glm-fit")
    p.add_argument("--inputs", required=True, help="inputs-only CSV")
    p.set_defaults(func=cmd_glm_predict)

    p = sub.add_parser("sinusoid-exp", help="source-to-sinusoid adaptation experiment")
    _add_common(p)
    p.set_defaults(func=cmd_sinusoid_exp)

    return parser


def _init_logging() -> None:
    name = os.environ.get("TANGENTGP_LOG_LEVEL", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _init_logging()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tangentgp: {exc}", file=sys.stderr)
        return 2
    except ContractViolationError as exc:
        print(f"tangentgp: {exc}", file=sys.stderr)
        return 2
    except ConsistencyError as exc:
        print(f"tangentgp: {exc}", file=sys.stderr)
        return 3
    except (FitError, NumericBreakdownError, ResourceLimitError, TrainingDivergenceError) as exc:
        print(f"tangentgp: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"tangentgp: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
