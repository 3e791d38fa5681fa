import hashlib
import json

import numpy as np
import pytest

from cmma.backbone import Wiring, init_model, save_checkpoint
from cmma.cli import build_run_config, main, read_manifest
from cmma.synthetic import generate_dataset

from oracles import TINY

TINY_RUN = {
    "seed": 1,
    "backbone": {"widths": [4, 6], "factors": [2, 2], "tap1": 0, "input_size": [8, 8], "K": 2, "d1": 3},
    "dataset": {"C": 6, "clips_per_id": 2, "T": 8, "n_train": 4},
    "train": {"P": 2, "Q": 2, "N": 2, "steps": 3, "lr": 0.001},
    "eval": {"frames": 2},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("CMMA_SEED", raising=False)
    (tmp_path / "tiny.json").write_text(json.dumps(TINY_RUN))
    return tmp_path


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_checkpoint_and_log(workdir):
    assert main(["train", "--config", "tiny.json", "--out", "run"]) == 0
    assert (workdir / "run/model.ckpt").exists() and (workdir / "run/model.ckpt.json").exists()
    lines = (workdir / "run/train_log.csv").read_text().splitlines()
    assert len(lines) == 1 + 3


def test_train_is_idempotent_and_leaves_config_alone(workdir):
    before = digest(workdir / "tiny.json")
    for out in ("a", "b"):
        assert main(["train", "--config", "tiny.json", "--out", out, "--eval"]) == 0
    for name in ("model.ckpt", "train_log.csv", "metrics.json"):
        assert digest(workdir / "a" / name) == digest(workdir / "b" / name)
    assert digest(workdir / "tiny.json") == before


def test_seed_env_override(workdir, monkeypatch):
    main(["train", "--config", "tiny.json", "--out", "s1"])
    monkeypatch.setenv("CMMA_SEED", "5")
    main(["train", "--config", "tiny.json", "--out", "s5"])
    assert digest(workdir / "s1/model.ckpt") != digest(workdir / "s5/model.ckpt")
    assert build_run_config(TINY_RUN, 5).train.seed == 5


def test_ablation_flag(workdir):
    assert main(["train", "--config", "tiny.json", "--out", "base", "--ablation", "baseline"]) == 0
    meta = json.loads((workdir / "base/model.ckpt.json").read_text())
    assert meta["wiring"] == "baseline"


def test_missing_config_exits_2(workdir, capsys):
    assert main(["train", "--config", "absent.json"]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_malformed_json_reports_position(workdir, capsys):
    (workdir / "bad.json").write_text('{"seed": 1,\n  "train": {"P": 2,,}}')
    assert main(["train", "--config", "bad.json"]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_invalid_config_lists_every_violation(workdir, capsys):
    bad = dict(TINY_RUN, bogus=1, train={"P": 1, "lr": 0}, backbone={"K": 3})
    (workdir / "inv.json").write_text(json.dumps(bad))
    assert main(["train", "--config", "inv.json"]) == 3
    err = capsys.readouterr().err
    for needle in ("bogus", "P=1", "lr=0", "K=3"):
        assert needle in err
    assert not (workdir / "model.ckpt").exists()


def test_gen_data_manifest_roundtrip(workdir):
    assert main(["gen-data", "--config", "tiny.json", "--out", "data"]) == 0
    manifest = json.loads((workdir / "data/manifest.json").read_text())
    assert len(manifest["identities"]) == 6
    assert {c["camera"] for c in manifest["identities"][0]["clips"]} == {0, 1}
    loaded = read_manifest(workdir / "data/manifest.json")
    direct = generate_dataset(6, 2, 8, 1, n_train=4, frame_size=(8, 8))
    assert loaded.train_ids == direct.train_ids and loaded.test_ids == direct.test_ids
    for a, b in zip(loaded.videos, direct.videos):
        assert a.key == b.key and np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.occluded, b.occluded)


def test_eval_json(workdir, capsys):
    main(["gen-data", "--config", "tiny.json", "--out", "data"])
    main(["train", "--config", "tiny.json", "--out", "run"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "run/model.ckpt", "--manifest", "data/manifest.json",
                 "--frames", "2", "--out", "m.json"]) == 0
    metrics = json.loads((workdir / "m.json").read_text())
    assert set(metrics) == {"rank1", "rank5", "rank10", "rank20", "mAP", "excluded_queries"}
    assert json.loads(capsys.readouterr().out) == metrics


def _untrained(workdir):
    state = init_model(TINY, Wiring.MULTI_MAM_CON, 4, 0)
    save_checkpoint(workdir / "init.ckpt", state)
    main(["gen-data", "--config", "tiny.json", "--out", "data"])


def test_heatmap_exports(workdir):
    _untrained(workdir)
    assert main(["heatmap", "--checkpoint", "init.ckpt", "--manifest", "data/manifest.json",
                 "--clip", "id0005_c1", "--frames", "2", "--out", "hm"]) == 0
    summary = json.loads((workdir / "hm/manifest.json").read_text())
    assert set(summary["mams"]) == {"mam1", "mam2"}
    assert len(summary["maps"]) == 2 * 2 * 2
    for m in summary["maps"]:
        values = np.loadtxt(workdir / "hm" / m["csv"], delimiter=",", ndmin=2)
        assert abs(values.sum() - 1) < 1e-6
        # zero outer biases at init: close to uniform
        assert m["max_weight"] == pytest.approx(1 / values.size, rel=0.25)
        raw = (workdir / "hm" / m["pgm"]).read_bytes()
        assert raw.startswith(b"P5\n8 8\n255\n") and len(raw) == len(b"P5\n8 8\n255\n") + 64
    assert 0 <= summary["mams"]["mam2"]["mean_diag"] <= 1


def test_heatmap_unknown_clip_exits_4(workdir):
    _untrained(workdir)
    assert main(["heatmap", "--checkpoint", "init.ckpt", "--manifest", "data/manifest.json",
                 "--clip", "id9999_c0", "--out", "hm"]) == 4


def test_sample_check_histogram_span(capsys):
    assert main(["sample-check", "--T", "73", "--N", "6", "--draws", "10000", "--summary-only"]) == 0
    summary = json.loads(capsys.readouterr().out)["summary"]
    assert summary["g_range"] == [1, 12] and all(c > 0 for c in summary["g_histogram"])
    assert summary["g_p"] > 0.01 and summary["s_p"] > 0.01


def test_sample_check_single_draw_and_determinism(capsys):
    main(["sample-check", "--T", "40", "--N", "6", "--draws", "1", "--seed", "3"])
    first = capsys.readouterr().out
    plan_lines = [line for line in first.splitlines() if not line.startswith('{"summary"')]
    assert len(plan_lines) == 1
    plan = json.loads(plan_lines[0])
    assert all(0 <= i < 40 for i in plan["indices"])
    main(["sample-check", "--T", "40", "--N", "6", "--draws", "1", "--seed", "3"])
    assert capsys.readouterr().out == first


def test_sample_check_padded_warning(capsys):
    assert main(["sample-check", "--T", "4", "--N", "6", "--draws", "2"]) == 0
    captured = capsys.readouterr()
    assert "padded" in captured.err
    assert json.loads(captured.out.splitlines()[0])["padded"] is True
