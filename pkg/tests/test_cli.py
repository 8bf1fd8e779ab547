import csv
import json

import numpy as np
import pytest

from helpers import tiny_config
from retrocast import __version__, cli, fileformat, kbase, pipeline
from retrocast.fusion import load_fuser
from retrocast.numkit import mse
from retrocast.retriever import Retriever
from retrocast.trainer import TrainConfig, TrainingDiverged


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """The full command chain on a tiny config, stage by stage."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config()
    (root / "cfg.json").write_text(json.dumps(cfg.to_dict()))
    common = ["--config", str(root / "cfg.json")]
    data = ["--data", str(root / "data" / "manifest.json")]
    stages = data + ["--backbone", str(root / "bb.tsck"), "--kb", str(root / "kb.tskb")]
    steps = [
        ["gen-data", *common, "--out", str(root / "data")],
        ["pretrain", *common, *data, "--out", str(root / "bb.tsck")],
        ["build-kb", *common, *data, "--out", str(root / "kb.tskb")],
        ["train", *common, *stages, "--out", str(root / "train")],
        ["eval", *common, *stages, "--checkpoints", str(root / "train"), "--residuals", "--out", str(root / "eval.json")],
        ["eval", *common, *stages, "--out", str(root / "bare.json")],
        ["case-study", *common, *stages, "--checkpoints", str(root / "train"), "--queries", "0,3", "--out", str(root / "cases")],
        ["ablate", *common, *stages, "--axes", "source", "--out", str(root / "ablate")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    return root, cfg


def _csv_provenance(path):
    first = open(path).readline()
    assert first.startswith("# ")
    return json.loads(first[2:])["provenance"]


def test_every_artifact_embeds_provenance(run):
    root, cfg = run
    found = [
        json.loads((root / "data" / "manifest.json").read_text())["provenance"],
        fileformat.read_tsck(root / "bb.tsck")[1]["provenance"],
        fileformat.read_tskb(root / "kb.tskb")[1]["provenance"],
        json.loads((root / "eval.json").read_text())["provenance"],
        json.loads((root / "bare.json").read_text())["provenance"],
        json.loads((root / "ablate" / "ablation.json").read_text())["provenance"],
        json.loads((root / "cases" / "case_0000.json").read_text())["provenance"],
        _csv_provenance(root / "train" / "log.csv"),
        _csv_provenance(root / "ablate" / "ablation.csv"),
        _csv_provenance(root / "cases" / "case_0003.csv"),
    ]
    found += [fileformat.read_tsck(p)[1]["provenance"] for p in sorted((root / "train").glob("*.tsck"))]
    assert len(found) == 10 + 6
    for prov in found:
        assert prov == {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}


def test_train_outputs(run):
    root, cfg = run
    names = sorted(p.name for p in (root / "train").iterdir())
    assert names == [
        "fusion.tsck",
        "fusion_epoch1.tsck",
        "fusion_epoch2.tsck",
        "log.csv",
        "retriever.tsck",
        "retriever_epoch1.tsck",
        "retriever_epoch2.tsck",
    ]
    rows = list(csv.reader(open(root / "train" / "log.csv")))[1:]
    assert rows[0] == ["step", "epoch", "L", "L_Pred", "L_R_aug"]
    assert len(rows) - 1 == cfg.train.epochs * cfg.pairs.n_train
    assert (root / "train" / "fusion.tsck").read_bytes() != (root / "train" / "fusion_epoch1.tsck").read_bytes()


def test_loaded_data_matches_generated(run):
    root, cfg = run
    loaded = cli.load_manifest(root / "data" / "manifest.json")
    generated = pipeline.generate_series(cfg)
    assert [s.values.tobytes() for s in loaded] == [s.values.tobytes() for s in generated]


def test_bare_eval_equals_bare_ablation_cell(run):
    root, _ = run
    bare = json.loads((root / "bare.json").read_text())
    cells = json.loads((root / "ablate" / "ablation.json").read_text())["cells"]
    (none,) = [c for c in cells if c["kb_source"] == "none"]
    assert none["mse"] == bare["mse"]


def test_case_study_dump(run):
    root, cfg = run
    dump = json.loads((root / "cases" / "case_0003.json").read_text())
    assert len(dump["candidates"]) == cfg.train.k
    kb = kbase.load(root / "kb.tskb")
    retriever = Retriever.load(root / "train" / "retriever.tsck")
    scores = retriever.score_all(np.array(dump["lookback"]), kb, np.arange(kb.n_kb))
    for c in dump["candidates"]:
        assert c["score"] == pytest.approx(scores[c["kb_index"]], rel=1e-12, abs=1e-12)
        assert np.array_equal(np.float32(c["values"]), kb.values[c["kb_index"]].astype(np.float32))
    assert sum(c["target"] for c in dump["candidates"]) == pytest.approx(1.0, abs=1e-12)
    # Round trip: recomputed MSE matches the eval report's residuals for that window.
    report = json.loads((root / "eval.json").read_text())
    residual = np.array(report["residuals"][3])
    recomputed = mse(np.array(dump["y_raf"]), np.array(dump["ground_truth"]))
    assert recomputed == pytest.approx(float(np.mean(residual**2)), rel=1e-12)
    assert recomputed == dump["mse_raf"]
    rows = list(csv.reader(open(root / "cases" / "case_0003.csv")))[1:]
    assert rows[0] == ["series", "t", "value"]
    assert sum(r[0] == "y_raf" for r in rows) == cfg.backbone.fl


def test_checkpoint_config_is_train_config(run):
    root, cfg = run
    meta = fileformat.read_tsck(root / "train" / "fusion.tsck")[1]
    assert TrainConfig.from_dict(meta["config"]) == cfg.train
    assert load_fuser(root / "train" / "fusion.tsck").name == cfg.train.fusion_policy


def test_set_overrides_and_seed(tmp_path):
    args = cli.build_parser().parse_args(
        ["eval", "--out", "x", "--set", "train.k=3", "--set", "kb.source=pooled", "--seed", "4"]
    )
    cfg = cli.load_config(args)
    assert cfg.train.k == 3 and cfg.kb.source == "pooled" and cfg.seed == 4 and cfg.train.seed == 4


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--out", "x", "--bogus"],
        ["frobnicate"],
        ["eval", "--out", "x", "--set", "train.nope=1"],
        ["eval", "--out", "x", "--set", "k"],
        ["eval", "--out", "x", "--set", "nope.k=1"],
        ["eval", "--out", "x", "--config", "/nonexistent/cfg.json"],
    ],
)
def test_config_errors_exit_1(argv, capsys):
    assert cli.main(argv) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_query_out_of_range_exit_1(run):
    root, _ = run
    argv = ["case-study", "--config", str(root / "cfg.json"), "--data", str(root / "data" / "manifest.json")]
    argv += ["--checkpoints", str(root / "train"), "--queries", "999", "--out", str(root / "c2")]
    assert cli.main(argv) == cli.EXIT_CONFIG


def test_data_errors_exit_2(run, tmp_path):
    root, _ = run
    base = ["eval", "--config", str(root / "cfg.json"), "--out", str(tmp_path / "r.json")]
    assert cli.main(base + ["--data", str(tmp_path / "missing.json")]) == cli.EXIT_DATA
    blob = bytearray((root / "kb.tskb").read_bytes())
    blob[40] ^= 0xFF
    (tmp_path / "bad.tskb").write_bytes(bytes(blob))
    assert cli.main(base + ["--data", str(root / "data" / "manifest.json"), "--kb", str(tmp_path / "bad.tskb")]) == 2
    (tmp_path / "short.tsck").write_bytes((root / "bb.tsck").read_bytes()[:30])
    assert cli.main(base + ["--backbone", str(tmp_path / "short.tsck")]) == cli.EXIT_DATA


def test_numerical_failures_exit_3(tmp_path, monkeypatch):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config().to_dict()))
    argv = ["pretrain", "--config", str(cfg_path), "--set", "backbone.lr=1e300", "--out", str(tmp_path / "bb")]
    with np.errstate(all="ignore"):
        assert cli.main(argv) == cli.EXIT_NUMERIC

    def diverge(args, cfg):
        raise TrainingDiverged("smoothed loss exploded")

    monkeypatch.setitem(cli.COMMANDS, "train", diverge)
    assert cli.main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "t")]) == cli.EXIT_NUMERIC


def test_ablate_grid_outputs(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(tiny_config().to_dict()))
    assert cli.main(["ablate", "--config", str(cfg_path), "--axes", "size", "--out", str(tmp_path / "a")]) == 0
    cells = json.loads((tmp_path / "a" / "ablation.json").read_text())["cells"]
    assert [c["kb_fraction"] for c in cells] == [1.0, 0.5, 0.3, 0.1, 0.01]
    assert [c["status"] for c in cells] == ["ok", "ok", "ok", "skipped", "skipped"]
    rows = list(csv.DictReader(line for line in open(tmp_path / "a" / "ablation.csv") if not line.startswith("#")))
    assert [r["cell"] for r in rows] == [c["cell"] for c in cells]
    assert rows[3]["reason"] and rows[3]["mse"] == ""
    assert float(rows[0]["mse"]) == cells[0]["mse"]
