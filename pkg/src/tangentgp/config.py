"""Versioned experiment configs and the on-disk checkpoint format.

A config is one JSON document with a mandatory ``version`` and a global
``seed``; everything else lives in optional blocks (architecture,
optimizer, gp, fvp, task, study, glm, experiment). Parsing is strict:
unknown keys are rejected rather than ignored, so a typo fails loudly
instead of silently running defaults. Blocks that were absent stay null
in the resolved document; commands that need them say so.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .adapt import SinusoidExperimentConfig
from .analysis import StudyConfig
from .errors import ConfigError
from .glm import GlmFitConfig
from .net import MlpArchitecture, MlpNetwork, OptimizerConfig, TaskDataset
from .serialize import atomic_write_text, canonical_json, read_dataset_csv

CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1

_REQUIRED = object()


def _int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _num(v):
    return _int(v) or isinstance(v, float)


_CHECKS = {
    "int": _int,
    "number": _num,
    "bool": lambda v: isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "int list": lambda v: isinstance(v, list) and all(_int(e) for e in v),
    "number list": lambda v: isinstance(v, list) and all(_num(e) for e in v),
    "int or null": lambda v: v is None or _int(v),
    "number or null": lambda v: v is None or _num(v),
    "string or null": lambda v: v is None or isinstance(v, str),
}

# block -> key -> (default, type name); _REQUIRED defaults must be supplied
# whenever the block itself is present.
_SCHEMA = {
    "architecture": {
        "input_dim": (_REQUIRED, "int"),
        "hidden_widths": ([], "int list"),
        "output_dim": (_REQUIRED, "int"),
        "activation": ("tanh", "string"),
        "heteroscedastic": (False, "bool"),
    },
    "optimizer": {
        "optimizer": ("adam", "string"),
        "learning_rate": (_REQUIRED, "number"),
        "epochs": (_REQUIRED, "int"),
        "batch_size": (32, "int"),
        "loss": ("mse", "string"),
        "momentum": (0.9, "number"),
    },
    "gp": {
        "space": ("auto", "string"),
        "mean_kind": ("zero", "string"),
        "rank": (None, "int or null"),
        "noise_variance": (None, "number or null"),
        "noise_grid_decades": (None, "int or null"),
        "center_on_network": (True, "bool"),
        "baselines": (False, "bool"),
    },
    "fvp": {
        "epsilons": ([1e-8, 1e-6, 1e-4, 1e-2], "number list"),
        "probes": (8, "int"),
        "likelihood": ("gaussian", "string"),
        "noise_variance": (1.0, "number"),
    },
    "task": {
        "kind": ("sinusoid", "string"),
        "num_tasks": (3, "int"),
        "points_per_task": (50, "int"),
        "context_size": (10, "int"),
        "x_low": (-5.0, "number"),
        "x_high": (5.0, "number"),
        "train_csv": (None, "string or null"),
        "noise_variance": (None, "number or null"),
    },
    "study": {
        "models_per_group": (5, "int"),
        "train_points": (100, "int"),
        "eval_points": (64, "int"),
        "epochs": (150, "int"),
        "learning_rate": (5e-3, "number"),
        "batch_size": (32, "int"),
        "realign_steps": (200, "int"),
        "realign_learning_rate": (0.01, "number"),
    },
    "glm": {
        "method": ("map", "string"),
        "prior_variance": (1.0, "number"),
        "learning_rate": (1e-3, "number"),
        "epochs": (10, "int"),
        "batch_size": (32, "int"),
        "include_network_output": (False, "bool"),
        "fisher_source": ("train", "string"),
        "predict_mode": ("mean", "string"),
    },
    "experiment": {
        "num_tasks": (20, "int"),
        "context_size": (10, "int"),
        "points_per_task": (50, "int"),
        "source_points": (200, "int"),
        "source_epochs": (2500, "int"),
        "source_learning_rate": (1e-3, "number"),
        "source_batch_size": (3, "int"),
        "noise_grid_decades": (10, "int"),
        "space": ("auto", "string"),
        "timing": (False, "bool"),
    },
}


def _resolve_block(name: str, given: dict) -> dict:
    schema = _SCHEMA[name]
    for key in given:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} in block {name!r}")
    resolved = {}
    for key, (default, type_name) in schema.items():
        if key in given:
            value = given[key]
        elif default is _REQUIRED:
            raise ConfigError(f"block {name!r} is missing the mandatory key {key!r}")
        else:
            value = default
        if key in given and not _CHECKS[type_name](value):
            raise ConfigError(f"config key {name}.{key} must be {type_name}, got {value!r}")
        resolved[key] = value
    return resolved


def resolve_config(raw: dict, seed_override: int | None = None) -> dict:
    """Validate a parsed config document and fill in every default.

    The result is the provenance record: blocks the document never
    mentioned stay null, present blocks carry all their keys.
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    if "version" not in raw:
        raise ConfigError("config is missing the mandatory 'version' field")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config version {raw['version']!r}, this tool reads version {CONFIG_VERSION}"
        )
    known = {"version", "seed", *_SCHEMA}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    seed = raw.get("seed", 0)
    if not _int(seed):
        raise ConfigError(f"config key 'seed' must be int, got {seed!r}")
    resolved = {"version": CONFIG_VERSION, "seed": seed}
    for name in _SCHEMA:
        block = raw.get(name)
        if block is None:
            resolved[name] = None
            continue
        if not isinstance(block, dict):
            raise ConfigError(f"config block {name!r} must be a JSON object")
        resolved[name] = _resolve_block(name, block)
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    return resolved


def load_config(path, seed_override: int | None = None) -> dict:
    """Read, parse, and resolve a config file; parse errors name the byte offset."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at byte {exc.pos}: {exc.msg}") from exc
    return resolve_config(raw, seed_override)


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()[:16]


def _need(resolved: dict, block: str) -> dict:
    if resolved.get(block) is None:
        raise ConfigError(f"this command needs a {block!r} block in the config")
    return resolved[block]


def block_or_defaults(resolved: dict, block: str) -> dict:
    """The resolved block, or its all-defaults form when the config omitted it."""
    if resolved.get(block) is not None:
        return resolved[block]
    return _resolve_block(block, {})


def architecture_from(resolved: dict) -> MlpArchitecture:
    return MlpArchitecture.from_dict(_need(resolved, "architecture"))


def optimizer_from(resolved: dict) -> OptimizerConfig:
    block = _need(resolved, "optimizer")
    return OptimizerConfig(
        optimizer=block["optimizer"],
        learning_rate=float(block["learning_rate"]),
        epochs=block["epochs"],
        batch_size=block["batch_size"],
        loss=block["loss"],
        seed=resolved["seed"],
        momentum=float(block["momentum"]),
    )


def glm_fit_config_from(resolved: dict) -> GlmFitConfig:
    block = block_or_defaults(resolved, "glm")
    return GlmFitConfig(
        learning_rate=float(block["learning_rate"]),
        epochs=block["epochs"],
        batch_size=block["batch_size"],
        seed=resolved["seed"],
    )


def study_config_from(resolved: dict) -> StudyConfig:
    block = block_or_defaults(resolved, "study")
    kwargs = dict(
        models_per_group=block["models_per_group"],
        train_points=block["train_points"],
        eval_points=block["eval_points"],
        epochs=block["epochs"],
        learning_rate=float(block["learning_rate"]),
        batch_size=block["batch_size"],
        realign_steps=block["realign_steps"],
        realign_learning_rate=float(block["realign_learning_rate"]),
        seed=resolved["seed"],
    )
    if resolved.get("architecture") is not None:
        kwargs["architecture"] = architecture_from(resolved)
    return StudyConfig(**kwargs)


def experiment_config_from(resolved: dict) -> SinusoidExperimentConfig:
    block = block_or_defaults(resolved, "experiment")
    return SinusoidExperimentConfig(
        num_tasks=block["num_tasks"],
        context_size=block["context_size"],
        points_per_task=block["points_per_task"],
        source_points=block["source_points"],
        source_epochs=block["source_epochs"],
        source_learning_rate=float(block["source_learning_rate"]),
        source_batch_size=block["source_batch_size"],
        noise_grid_decades=block["noise_grid_decades"],
        space=block["space"],
        seed=resolved["seed"],
        timing=block["timing"],
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(network: MlpNetwork, path, provenance: dict) -> None:
    """Write a network as JSON: architecture, exact parameters, fingerprint."""
    doc = {
        "kind": "mlp-checkpoint",
        "version": CHECKPOINT_VERSION,
        **provenance,
        "architecture": network.architecture.to_dict(),
        "params": [float(v) for v in network.params],
        "fingerprint": network.fingerprint(),
    }
    atomic_write_text(path, canonical_json(doc))


def load_checkpoint(path) -> MlpNetwork:
    """Read a checkpoint back; the stored fingerprint must match the contents."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "mlp-checkpoint":
        raise ConfigError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    arch = MlpArchitecture.from_dict(doc["architecture"])
    params = np.asarray(doc["params"], dtype=np.float64)
    network = MlpNetwork(arch, params)
    if network.fingerprint() != doc.get("fingerprint"):
        raise ConfigError(f"{path}: fingerprint does not match the stored parameters")
    return network


# ---------------------------------------------------------------------------
# Task manifests (file-backed adaptation runs)


def read_task_manifest(path) -> list[tuple[TaskDataset, TaskDataset | None]]:
    """Read a JSON list of {"context": csv, "eval": csv|null, "noise_variance": v}.

    CSV paths are resolved relative to the manifest's directory. Eval may
    be null for fit-only tasks.
    """
    base = Path(path).parent
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: manifest must be a nonempty JSON list")
    pairs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "context" not in entry:
            raise ConfigError(f"{path}: entry {i} needs at least a 'context' CSV path")
        unknown = set(entry) - {"context", "eval", "noise_variance"}
        if unknown:
            raise ConfigError(f"{path}: entry {i} has unknown keys {sorted(unknown)}")
        noise = entry.get("noise_variance", 1.0)
        if not _num(noise) or not noise > 0:
            raise ConfigError(f"{path}: entry {i} noise_variance must be positive")
        cx, cy = read_dataset_csv(base / entry["context"])
        context = TaskDataset(cx, cy, noise_variance=float(noise))
        eval_set = None
        if entry.get("eval") is not None:
            ex, ey = read_dataset_csv(base / entry["eval"])
            eval_set = TaskDataset(ex, ey, noise_variance=float(noise))
        pairs.append((context, eval_set))
    return pairs
