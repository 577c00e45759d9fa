"""End-to-end command tests driven through main(argv)."""

import json

import numpy as np
import pytest

from tangentgp.adapt import SinusoidTaskSpec, sample_sinusoid_tasks, stratified_split
from tangentgp.cli import main
from tangentgp.config import load_checkpoint, save_checkpoint
from tangentgp.net import MlpArchitecture, forward, init_network
from tangentgp.serialize import fmt_float, write_classification_csv, write_dataset_csv

TRAIN_CONFIG = {
    "version": 1,
    "seed": 0,
    "architecture": {"input_dim": 1, "hidden_widths": [16, 16], "output_dim": 1},
    "optimizer": {"learning_rate": 5e-3, "epochs": 150, "batch_size": 8},
    "task": {"kind": "sinusoid", "points_per_task": 40},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def write_inputs_csv(path, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    header = ",".join(f"x_{j}" for j in range(x.shape[1]))
    lines = [header] + [",".join(fmt_float(v) for v in row) for row in x]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def data_lines(path):
    """CSV rows with the provenance comments and header stripped."""
    lines = [l for l in path.read_text().splitlines() if l and not l.startswith("#")]
    return lines[0].split(","), [l.split(",") for l in lines[1:]]


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A trained checkpoint shared by the read-only command tests."""
    root = tmp_path_factory.mktemp("cli")
    config = write_json(root / "train.json", TRAIN_CONFIG)
    ckpt = str(root / "ckpt.json")
    assert main(["train", "--config", config, "--out", ckpt]) == 0
    return {"root": root, "config": config, "ckpt": ckpt}


class TestTrain:
    def test_checkpoint_roundtrips_and_trace_written(self, ws):
        net = load_checkpoint(ws["ckpt"])
        assert net.architecture == MlpArchitecture(1, (16, 16), 1)
        assert np.all(np.isfinite(net.params))
        header, rows = data_lines(ws["root"] / "ckpt.trace.csv")
        assert header == ["epoch", "loss"]
        assert len(rows) == TRAIN_CONFIG["optimizer"]["epochs"]
        assert float(rows[-1][1]) < float(rows[0][1])

    def test_same_seed_gives_byte_identical_checkpoints(self, ws, tmp_path):
        a, b = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        assert main(["train", "--config", ws["config"], "--out", a]) == 0
        assert main(["train", "--config", ws["config"], "--out", b]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_seed_override_changes_checkpoint(self, ws, tmp_path):
        out = str(tmp_path / "c.json")
        assert main(["train", "--config", ws["config"], "--seed", "1", "--out", out]) == 0
        other = load_checkpoint(out)
        assert not np.array_equal(other.params, load_checkpoint(ws["ckpt"]).params)

    def test_malformed_config_reports_byte_offset(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"version": 1,,}')
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "x.json")])
        assert code == 2
        err = capsys.readouterr().err
        assert "parse error at byte 14" in err

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {"version": 1, "sede": 3})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "x.json")]) == 2

    def test_missing_config_file(self, tmp_path):
        code = main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.json")])
        assert code == 2


def make_manifest(root, num_tasks=3, noise_variance=None, context_only=False):
    spec = SinusoidTaskSpec(points_per_task=30, seed=4)
    entries = []
    for i, task in enumerate(sample_sinusoid_tasks(spec, num_tasks)):
        context, eval_set = stratified_split(task, 10)
        write_dataset_csv(root / f"ctx{i}.csv", context.x, context.y)
        entry = {"context": f"ctx{i}.csv"}
        if not context_only:
            write_dataset_csv(root / f"ev{i}.csv", eval_set.x, eval_set.y)
            entry["eval"] = f"ev{i}.csv"
        if noise_variance is not None:
            entry["noise_variance"] = noise_variance
        entries.append(entry)
    return write_json(root / "tasks.json", entries)


class TestAdapt:
    def test_three_tasks_with_baselines(self, ws, tmp_path):
        manifest = make_manifest(tmp_path)
        cfg = write_json(
            tmp_path / "adapt.json",
            {
                "version": 1,
                "gp": {"baselines": True, "noise_variance": 0.01},
                "optimizer": {"learning_rate": 5e-3, "epochs": 60, "batch_size": 8},
            },
        )
        out = tmp_path / "results.csv"
        code = main(
            ["adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--tasks", manifest, "--out", str(out)]
        )
        assert code == 0
        header, rows = data_lines(out)
        assert header == ["task_id", "method", "context_size", "mse", "nll", "wall_ms"]
        by_method = {}
        for row in rows:
            by_method.setdefault(row[1], []).append(row)
        assert set(by_method) == {"finite-ntk", "no-retrain", "last-layer"}
        assert all(len(v) == 3 for v in by_method.values())
        assert all(float(r[3]) >= 0.0 for r in rows)

    def test_identical_invocations_are_byte_identical(self, ws, tmp_path):
        manifest = make_manifest(tmp_path)
        cfg = write_json(tmp_path / "adapt.json", {"version": 1})
        outs = []
        for name in ("r1.csv", "r2.csv"):
            out = tmp_path / name
            assert (
                main(["adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--tasks", manifest, "--out", str(out)])
                == 0
            )
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_threads_do_not_change_output(self, ws, tmp_path):
        manifest = make_manifest(tmp_path, num_tasks=4)
        cfg = write_json(tmp_path / "adapt.json", {"version": 1})
        outs = []
        for name, threads in (("t1.csv", "1"), ("t3.csv", "3")):
            out = tmp_path / name
            code = main(
                [
                    "adapt", "--config", cfg, "--checkpoint", ws["ckpt"],
                    "--tasks", manifest, "--threads", threads, "--out", str(out),
                ]
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_generated_tasks_when_no_manifest(self, ws, tmp_path):
        cfg = write_json(
            tmp_path / "adapt.json",
            {"version": 1, "seed": 2, "task": {"num_tasks": 2, "points_per_task": 24, "context_size": 8}},
        )
        out = tmp_path / "gen.csv"
        assert main(["adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--out", str(out)]) == 0
        _, rows = data_lines(out)
        assert len(rows) == 2
        assert all(r[2] == "8" for r in rows)

    def test_missing_checkpoint_is_input_error(self, ws, tmp_path):
        cfg = write_json(tmp_path / "adapt.json", {"version": 1})
        code = main(
            ["adapt", "--config", cfg, "--checkpoint", str(tmp_path / "ghost.json"), "--out", str(tmp_path / "o.csv")]
        )
        assert code == 2

    def test_architecture_mismatch_is_consistency_error(self, ws, tmp_path):
        cfg = write_json(
            tmp_path / "adapt.json",
            {"version": 1, "architecture": {"input_dim": 2, "hidden_widths": [16, 16], "output_dim": 1}},
        )
        code = main(["adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--out", str(tmp_path / "o.csv")])
        assert code == 3

    def test_posterior_out_needs_single_task(self, ws, tmp_path):
        manifest = make_manifest(tmp_path)
        cfg = write_json(tmp_path / "adapt.json", {"version": 1})
        code = main(
            [
                "adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--tasks", manifest,
                "--posterior-out", str(tmp_path / "post.json"), "--out", str(tmp_path / "o.csv"),
            ]
        )
        assert code == 2


@pytest.fixture(scope="module")
def cached_posterior(ws, tmp_path_factory):
    """Fit one near-noiseless context and cache the posterior for predict tests."""
    root = tmp_path_factory.mktemp("post")
    rng = np.random.default_rng(9)
    x = np.sort(rng.uniform(-3.0, 3.0, size=(8, 1)), axis=0)
    y = 1.3 * np.sin(2.0 * x + 0.4)
    write_dataset_csv(root / "ctx.csv", x, y)
    manifest = write_json(
        root / "tasks.json", [{"context": "ctx.csv", "noise_variance": 1e-8}]
    )
    cfg = write_json(
        root / "adapt.json", {"version": 1, "gp": {"center_on_network": False}}
    )
    posterior = root / "posterior.json"
    code = main(
        [
            "adapt", "--config", cfg, "--checkpoint", ws["ckpt"], "--tasks", manifest,
            "--posterior-out", str(posterior), "--out", str(root / "o.csv"),
        ]
    )
    assert code == 0
    return {"root": root, "posterior": str(posterior), "x": x, "y": y}


class TestPredict:
    def test_reproduces_cached_context_points(self, ws, cached_posterior, tmp_path):
        inputs = write_inputs_csv(tmp_path / "in.csv", cached_posterior["x"])
        out = tmp_path / "pred.csv"
        code = main(
            [
                "predict", "--checkpoint", ws["ckpt"], "--posterior", cached_posterior["posterior"],
                "--inputs", inputs, "--out", str(out),
            ]
        )
        assert code == 0
        header, rows = data_lines(out)
        assert header == ["x_0", "mean_0", "var_0"]
        mean = np.array([float(r[1]) for r in rows])
        var = np.array([float(r[2]) for r in rows])
        assert np.max(np.abs(mean - cached_posterior["y"].ravel())) <= 1e-3
        assert np.all(var >= 0.0)

    def test_empty_inputs_give_header_only_output(self, ws, cached_posterior, tmp_path):
        inputs = tmp_path / "empty.csv"
        inputs.write_text("x_0\n")
        out = tmp_path / "pred.csv"
        code = main(
            [
                "predict", "--checkpoint", ws["ckpt"], "--posterior", cached_posterior["posterior"],
                "--inputs", str(inputs), "--out", str(out),
            ]
        )
        assert code == 0
        header, rows = data_lines(out)
        assert header == ["x_0", "mean_0", "var_0"]
        assert rows == []

    def test_stale_posterior_is_consistency_error(self, ws, cached_posterior, tmp_path):
        other = str(tmp_path / "other.json")
        assert main(["train", "--config", ws["config"], "--seed", "5", "--out", other]) == 0
        inputs = write_inputs_csv(tmp_path / "in.csv", cached_posterior["x"][:2])
        code = main(
            [
                "predict", "--checkpoint", other, "--posterior", cached_posterior["posterior"],
                "--inputs", inputs, "--out", str(tmp_path / "pred.csv"),
            ]
        )
        assert code == 3


class TestFvpBench:
    def test_default_grid_accuracy(self, ws, tmp_path):
        cfg = write_json(tmp_path / "fvp.json", {"version": 1, "task": {"points_per_task": 40}})
        out = tmp_path / "sweep.csv"
        assert main(["fvp-bench", "--config", cfg, "--checkpoint", ws["ckpt"], "--out", str(out)]) == 0
        header, rows = data_lines(out)
        assert header == ["epsilon", "mean_rel_err", "max_rel_err", "probes", "seed"]
        assert len(rows) == 4
        by_eps = {float(r[0]): float(r[1]) for r in rows}
        assert by_eps[1e-4] <= 1e-2

    def test_reproducible(self, ws, tmp_path):
        cfg = write_json(tmp_path / "fvp.json", {"version": 1})
        outs = []
        for name in ("s1.csv", "s2.csv"):
            out = tmp_path / name
            assert main(["fvp-bench", "--config", cfg, "--checkpoint", ws["ckpt"], "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


def save_relu_checkpoint(path, w1, b1, w2, b2):
    arch = MlpArchitecture(2, (4,), 1, activation="relu")
    params = np.concatenate(
        [np.asarray(a, dtype=float).ravel() for a in (w1, b1, w2, b2)]
    )
    save_checkpoint(init_network(arch, seed=0).with_params(params), path, {})
    return str(path)


class TestSimilarity:
    def test_self_similarity_is_one(self, ws, tmp_path):
        cfg = write_json(tmp_path / "sim.json", {"version": 1})
        inputs = write_inputs_csv(tmp_path / "in.csv", np.linspace(-2, 2, 6)[:, None])
        out = tmp_path / "sim.json.out"
        code = main(
            [
                "similarity", "--config", cfg, "--checkpoints", ws["ckpt"], ws["ckpt"],
                "--inputs", inputs, "--out", str(out),
            ]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert float(doc["matrix"][0][1]) == pytest.approx(1.0, abs=1e-12)
        assert float(doc["matrix"][0][0]) == 1.0

    def test_disjoint_tangent_support_scores_near_zero(self, tmp_path):
        # Net A keeps every hidden unit inactive on the eval inputs, so its
        # only nonzero parameter gradient is the output bias.  Net B runs all
        # units in the active regime at large weight scale, which makes that
        # shared bias coordinate negligible after normalization.
        dead = save_relu_checkpoint(
            tmp_path / "dead.json", np.ones((4, 2)), np.full(4, -1e3), np.ones((1, 4)), [0.0]
        )
        alive = save_relu_checkpoint(
            tmp_path / "alive.json", np.ones((4, 2)), np.full(4, 1e3), np.full((1, 4), 1e4), [0.0]
        )
        cfg = write_json(tmp_path / "sim.json", {"version": 1})
        rng = np.random.default_rng(0)
        inputs = write_inputs_csv(tmp_path / "in.csv", rng.uniform(-1, 1, size=(8, 2)))
        out = tmp_path / "report.json"
        code = main(
            ["similarity", "--config", cfg, "--checkpoints", dead, alive, "--inputs", inputs, "--out", str(out)]
        )
        assert code == 0
        doc = json.loads(out.read_text())
        assert float(doc["matrix"][0][1]) <= 1e-6

    def test_report_schema(self, ws, tmp_path):
        cfg = write_json(tmp_path / "sim.json", {"version": 1})
        inputs = write_inputs_csv(tmp_path / "in.csv", np.linspace(-1, 1, 5)[:, None])
        out = tmp_path / "report.json"
        assert (
            main(["similarity", "--config", cfg, "--checkpoints", ws["ckpt"], ws["ckpt"], "--inputs", inputs, "--out", str(out)])
            == 0
        )
        doc = json.loads(out.read_text())
        for key in ("model_ids", "distribution_ids", "n_eval", "seed", "matrix", "summary", "config_hash", "tool_version"):
            assert key in doc
        assert doc["model_ids"] == ["ckpt", "ckpt"]
        assert doc["n_eval"] == 5

    def test_mismatched_parameter_counts_rejected(self, ws, tmp_path):
        small = tmp_path / "small.json"
        save_checkpoint(init_network(MlpArchitecture(1, (3,), 1), seed=0), small, {})
        cfg = write_json(tmp_path / "sim.json", {"version": 1})
        inputs = write_inputs_csv(tmp_path / "in.csv", np.zeros((2, 1)))
        code = main(
            ["similarity", "--config", cfg, "--checkpoints", ws["ckpt"], str(small), "--inputs", inputs, "--out", str(tmp_path / "o.json")]
        )
        assert code == 3

    def test_study_mode_produces_summary(self, tmp_path):
        cfg = write_json(
            tmp_path / "study.json",
            {
                "version": 1,
                "seed": 0,
                "study": {
                    "models_per_group": 1,
                    "train_points": 40,
                    "eval_points": 12,
                    "epochs": 8,
                    "realign_steps": 20,
                },
            },
        )
        out = tmp_path / "report.json"
        assert main(["similarity", "--config", cfg, "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["model_ids"] == ["base-a-0", "base-b-0", "shifted-0"]
        assert doc["summary"]["within_pairs"] >= 1
        assert doc["summary"]["cross_pairs"] >= 1


@pytest.fixture(scope="module")
def blob_data(tmp_path_factory):
    """Two well separated gaussian blobs with integer class labels."""
    root = tmp_path_factory.mktemp("glm")
    rng = np.random.default_rng(3)
    a = rng.normal(loc=(-2.0, -2.0), scale=0.4, size=(20, 2))
    b = rng.normal(loc=(2.0, 2.0), scale=0.4, size=(20, 2))
    x = np.vstack([a, b])
    labels = np.array([0] * 20 + [1] * 20)
    write_classification_csv(root / "blobs.csv", x, labels)
    ckpt = root / "clf.json"
    save_checkpoint(init_network(MlpArchitecture(2, (8,), 2), seed=1), ckpt, {})
    return {"root": root, "data": str(root / "blobs.csv"), "ckpt": str(ckpt)}


class TestGlm:
    def fit(self, blob_data, tmp_path, method):
        cfg = write_json(
            tmp_path / "glm.json",
            {"version": 1, "glm": {"method": method, "epochs": 40, "learning_rate": 0.01}},
        )
        fit_path = tmp_path / "fit.json"
        code = main(
            [
                "glm-fit", "--config", cfg, "--checkpoint", blob_data["ckpt"],
                "--data", blob_data["data"], "--out", str(fit_path),
            ]
        )
        assert code == 0
        return cfg, str(fit_path)

    def test_fit_then_predict_separates_blobs(self, blob_data, tmp_path):
        cfg, fit_path = self.fit(blob_data, tmp_path, "map")
        inputs = write_inputs_csv(tmp_path / "centers.csv", [[-2.0, -2.0], [2.0, 2.0]])
        out = tmp_path / "pred.csv"
        code = main(
            [
                "glm-predict", "--config", cfg, "--checkpoint", blob_data["ckpt"],
                "--fit", fit_path, "--inputs", inputs, "--out", str(out),
            ]
        )
        assert code == 0
        header, rows = data_lines(out)
        assert header == ["index", "label", "prob_0", "prob_1"]
        assert [r[1] for r in rows] == ["0", "1"]
        for row in rows:
            probs = [float(row[2]), float(row[3])]
            assert sum(probs) == pytest.approx(1.0, abs=1e-9)
            assert max(probs) > 0.8

    def test_laplace_fit_roundtrips(self, blob_data, tmp_path):
        cfg, fit_path = self.fit(blob_data, tmp_path, "laplace")
        inputs = write_inputs_csv(tmp_path / "in.csv", [[-2.0, -2.0]])
        out = tmp_path / "pred.csv"
        code = main(
            [
                "glm-predict", "--config", cfg, "--checkpoint", blob_data["ckpt"],
                "--fit", fit_path, "--inputs", inputs, "--out", str(out),
            ]
        )
        assert code == 0
        _, rows = data_lines(out)
        assert rows[0][1] == "0"

    def test_stale_fit_is_consistency_error(self, blob_data, tmp_path):
        cfg, fit_path = self.fit(blob_data, tmp_path, "map")
        other = tmp_path / "other.json"
        save_checkpoint(init_network(MlpArchitecture(2, (8,), 2), seed=9), other, {})
        inputs = write_inputs_csv(tmp_path / "in.csv", [[0.0, 0.0]])
        code = main(
            [
                "glm-predict", "--config", cfg, "--checkpoint", str(other),
                "--fit", fit_path, "--inputs", inputs, "--out", str(tmp_path / "p.csv"),
            ]
        )
        assert code == 3


class TestSinusoidExp:
    def test_small_run_summary_and_rows(self, tmp_path):
        cfg = write_json(
            tmp_path / "exp.json",
            {
                "version": 1,
                "seed": 0,
                "experiment": {
                    "num_tasks": 3,
                    "context_size": 8,
                    "points_per_task": 30,
                    "source_points": 60,
                    "source_epochs": 200,
                    "noise_grid_decades": 6,
                },
            },
        )
        out = tmp_path / "exp.json.out"
        code = main(["sinusoid-exp", "--config", cfg, "--format", "json", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        summary = doc["summary"]
        assert 0.0 <= summary["win_rate_vs_no_retrain"] <= 1.0
        assert 0.0 <= summary["win_rate_vs_last_layer"] <= 1.0
        assert summary["source_training_mse"] > 0.0
        assert len(doc["rows"]) == 9
        assert doc["columns"] == ["task_id", "method", "context_size", "mse", "nll", "wall_ms"]
