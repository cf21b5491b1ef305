"""End-to-end CLI tests on miniature datasets."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from lmacnet.cli import main

TINY_SPEC = {
    "n_samples": 20,
    "T": 8,
    "dims": {"rgb": 6, "flow": 6, "audio": 4},
    "K_events": 2,
    "noise_sigma": 0.1,
    "event_alignment_jitter": 0,
    "seed": 11,
}

TINY_CONFIG = {
    "data": TINY_SPEC,
    "model": {"dims": {"rgb": 6, "flow": 6, "audio": 4}, "n_queries": 2,
              "n_layers": 1, "self_attn_heads": 2},
    "optim": {"epochs": 2, "batch_size": 8, "seed": 5},
    "losses": {"lambda_feature": 0.001},
}


@pytest.fixture()
def tiny_dataset_dir(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(TINY_SPEC))
    data_dir = tmp_path / "data"
    assert main(["gen-synthetic", "--spec", str(spec_path), "--out", str(data_dir)]) == 0
    return data_dir


def write_config(tmp_path, extra=None) -> Path:
    doc = json.loads(json.dumps(TINY_CONFIG))
    for dotted, value in (extra or {}).items():
        section, key = dotted.split(".")
        doc.setdefault(section, {})[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def read_tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenSynthetic:
    def test_writes_triples_and_manifest(self, tiny_dataset_dir):
        files = list(tiny_dataset_dir.glob("*.lmfv"))
        assert len(files) == 3 * TINY_SPEC["n_samples"]
        manifest = json.loads((tiny_dataset_dir / "manifest.json").read_text())
        assert len(manifest["samples"]) == TINY_SPEC["n_samples"]
        assert (tiny_dataset_dir / "spec.resolved.json").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(TINY_SPEC))
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen-synthetic", "--spec", str(spec_path), "--out", str(a)]) == 0
        assert main(["gen-synthetic", "--spec", str(spec_path), "--out", str(b)]) == 0
        assert read_tree_bytes(a) == read_tree_bytes(b)

    def test_unknown_spec_key_rejected(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"n_samples": 4, "bogus_knob": 1}))
        out = tmp_path / "out"
        assert main(["gen-synthetic", "--spec", str(spec_path), "--out", str(out)]) == 1
        assert "bogus_knob" in capsys.readouterr().err


class TestTrain:
    def test_training_outputs(self, tiny_dataset_dir, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                     "--out", str(run)]) == 0
        assert (run / "config.resolved.json").exists()
        assert (run / "model.lmac").exists()
        assert (run / "checkpoints" / "epoch0.lmac").exists()
        assert (run / "checkpoints" / "epoch1.lmac").exists()
        assert not (run / ".failed").exists()

        lines = [json.loads(l) for l in (run / "log.jsonl").read_text().splitlines()]
        step_lines = [l for l in lines if "step" in l]
        assert len(step_lines) == 2 * 2   # 15 train samples -> 2 batches, 2 epochs
        assert set(step_lines[0]) == {"step", "score", "rank", "sparsity", "consistency", "total"}

        with (run / "attention_centers.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        # 2 epochs x 3 tracked samples x 3 modalities x 2 queries
        assert len(rows) == 2 * 3 * 3 * 2
        centers = [float(r["center"]) for r in rows]
        assert all(1.0 <= c <= TINY_SPEC["T"] for c in centers)

        with (run / "alignment.csv").open() as fh:
            arow = next(csv.DictReader(fh))
        assert set(arow) == {"epoch", "sample", "pair", "center_distance", "cosine"}

    def test_resolved_config_reproduces_run_byte_for_byte(self, tiny_dataset_dir, tmp_path):
        cfg = write_config(tmp_path)
        run1, run2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                     "--out", str(run1)]) == 0
        assert main(["train", "--config", str(run1 / "config.resolved.json"),
                     "--data", str(tiny_dataset_dir), "--out", str(run2)]) == 0
        a, b = read_tree_bytes(run1), read_tree_bytes(run2)
        assert a == b

    def test_dotted_override_disables_consistency(self, tiny_dataset_dir, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                     "--out", str(run), "--losses.consistency", "false"]) == 0
        resolved = json.loads((run / "config.resolved.json").read_text())
        assert resolved["losses"]["consistency"] is False
        for line in (run / "log.jsonl").read_text().splitlines():
            rec = json.loads(line)
            if "step" in rec:
                assert rec["consistency"] == 0.0

    def test_summation_fusion_override(self, tiny_dataset_dir, tmp_path):
        cfg = write_config(tmp_path, {"model.dims": {"rgb": 6, "flow": 6, "audio": 6}})
        run = tmp_path / "run"
        # dataset audio dim is 4, so summation must be rejected up front
        rc = main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                   "--out", str(run), "--model.fusion", "summation"])
        assert rc == 1

        run2 = tmp_path / "run2"
        rc = main(["train", "--config", write_config(tmp_path).as_posix(),
                   "--data", str(tiny_dataset_dir), "--out", str(run2),
                   "--model.fusion", "summation", "--modalities", "rgb,flow"])
        assert rc == 0
        resolved = json.loads((run2 / "config.resolved.json").read_text())
        assert resolved["model"]["fusion"] == "summation"
        assert resolved["model"]["modalities"] == ["rgb", "flow"]

    def test_bimodal_training_without_audio_files(self, tiny_dataset_dir, tmp_path):
        for f in tiny_dataset_dir.glob("*.audio.lmfv"):
            f.unlink()
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                     "--out", str(run), "--modalities", "rgb,flow"]) == 0

    def test_unknown_config_key_fails_preflight(self, tiny_dataset_dir, tmp_path):
        run = tmp_path / "run"
        rc = main(["train", "--config", write_config(tmp_path).as_posix(),
                   "--data", str(tiny_dataset_dir), "--out", str(run),
                   "--optim.bogus", "1"])
        assert rc == 1
        assert not (run / "model.lmac").exists()

    def test_failure_leaves_marker(self, tiny_dataset_dir, tmp_path):
        run = tmp_path / "run"
        run.mkdir()
        rc = main(["train", "--config", write_config(tmp_path).as_posix(),
                   "--data", str(tmp_path / "nope"), "--out", str(run)])
        assert rc == 1
        assert (run / ".failed").exists()


class TestEvalAndInspect:
    @pytest.fixture()
    def trained_run(self, tiny_dataset_dir, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(tiny_dataset_dir),
                     "--out", str(run)]) == 0
        return run

    def test_eval_outputs_and_determinism(self, tiny_dataset_dir, tmp_path, trained_run):
        e1, e2 = tmp_path / "e1", tmp_path / "e2"
        for out in (e1, e2):
            assert main(["eval", "--ckpt", str(trained_run / "model.lmac"),
                         "--data", str(tiny_dataset_dir), "--out", str(out)]) == 0
        assert read_tree_bytes(e1) == read_tree_bytes(e2)

        with (e1 / "predictions.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == TINY_SPEC["n_samples"]
        assert {"stem", "split", "label", "pred", "pred_denormalized"} == set(rows[0])

        metrics = json.loads((e1 / "metrics.json").read_text())
        assert set(metrics["spearman"]) >= {"train", "test"}

        breakdowns = [json.loads(l) for l in (e1 / "breakdowns.jsonl").read_text().splitlines()]
        assert len(breakdowns) == TINY_SPEC["n_samples"]
        for b in breakdowns:
            assert sum(b["weights"]) == pytest.approx(1.0, abs=1e-6)
            assert len(b["query_scores"]) == 2

    def test_eval_rejects_mismatched_checkpoint(self, tiny_dataset_dir, tmp_path, trained_run):
        out = tmp_path / "e"
        cfg = write_config(tmp_path, {"model.n_queries": 3})
        rc = main(["eval", "--ckpt", str(trained_run / "model.lmac"),
                   "--data", str(tiny_dataset_dir), "--out", str(out),
                   "--config", str(cfg)])
        assert rc == 1

    def test_inspect_attention_export(self, tiny_dataset_dir, tmp_path, trained_run):
        out = tmp_path / "inspect"
        stem = "sample00003"
        assert main(["inspect-attention", "--ckpt", str(trained_run / "model.lmac"),
                     "--sample", stem, "--data", str(tiny_dataset_dir),
                     "--out", str(out)]) == 0

        with (out / f"attention_{stem}.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        t_len, k, layers = TINY_SPEC["T"], 2, 1
        for m in ("rgb", "flow", "audio"):
            mod_rows = [r for r in rows if r["modality"] == m]
            assert len(mod_rows) == layers * k * t_len
        # per (modality, layer, query) rows sum to 1
        sums = {}
        for r in rows:
            key = (r["modality"], r["layer"], r["query"])
            sums[key] = sums.get(key, 0.0) + float(r["weight"])
        assert all(abs(s - 1.0) < 1e-5 for s in sums.values())

        with (out / f"centers_{stem}.csv").open() as fh:
            center_rows = list(csv.DictReader(fh))
        # centers equal the attention-weighted averages of the exported rows
        for cr in center_rows:
            agg = np.zeros(t_len)
            for r in rows:
                if r["modality"] == cr["modality"] and r["query"] == cr["query"]:
                    agg[int(r["t"]) - 1] += float(r["weight"])
            agg /= layers
            want = float(np.sum(np.arange(1, t_len + 1) * agg))
            assert float(cr["center"]) == pytest.approx(want, abs=1e-6)

    def test_overfit_memorization_reaches_high_train_spearman(self, tmp_path):
        # noise-free memorization run: train-split correlation approaches 1
        spec = dict(TINY_SPEC, n_samples=16, noise_sigma=0.0, seed=3)
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(spec))
        data_dir = tmp_path / "data"
        assert main(["gen-synthetic", "--spec", str(spec_path), "--out", str(data_dir)]) == 0

        cfg = write_config(tmp_path, {"optim.epochs": 100, "optim.lr": 5e-3,
                                      "optim.batch_size": 12,
                                      "losses.lambda_feature": 0.0001})
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--data", str(data_dir),
                     "--out", str(run)]) == 0
        out = tmp_path / "eval"
        assert main(["eval", "--ckpt", str(run / "model.lmac"),
                     "--data", str(data_dir), "--out", str(out)]) == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["spearman"]["train"] > 0.9
