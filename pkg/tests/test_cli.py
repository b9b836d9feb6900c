import json

import numpy as np
import pytest

from densitynet import cli
from densitynet import cnn
from densitynet import evalkit as ek
from densitynet import synthgen as sg
from densitynet.common import VIEWS

BALANCED = {"class_marginals": [0.25, 0.25, 0.25, 0.25], "height": 32, "width": 24}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 else None), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small balanced corpus with its split, a baseline and a briefly trained CNN."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "config.json"
    config.write_text(json.dumps({"phantom": BALANCED, "exams": 600, "epochs": 1, "baseline_epochs": 5,
                                  "bins": [10], "pretrain_epochs": 1}))
    corpus = root / "corpus"
    for argv in (
        ["generate", "--config", config, "--seed", 3, "--out", corpus],
        ["split", "--corpus", corpus, "--out", corpus],
        ["train-baseline", "--config", config, "--corpus", corpus, "--out", root / "models"],
        ["train-cnn", "--config", config, "--corpus", corpus, "--out", root / "models"],
    ):
        assert cli.main([str(a) for a in argv]) == 0
    return {"root": root, "config": config, "corpus": corpus, "models": root / "models"}


def test_generate_is_byte_identical_for_fixed_seed(tmp_path, capsys):
    for name in ("a", "b"):
        code, summary, _ = run(capsys, "generate", "--exams", 100, "--seed", 7, "--height", 32, "--width", 24,
                               "--out", tmp_path / name)
        assert code == 0 and summary["exams"] == 100
    for fname in ("manifest.jsonl", "truth.json", "phantom.json"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


def test_missing_density_fraction_is_excluded(tmp_path, capsys):
    run(capsys, "generate", "--exams", 2000, "--seed", 8, "--height", 16, "--width", 12,
        "--missing-fraction", 0.003, "--out", tmp_path)
    code, summary, _ = run(capsys, "split", "--corpus", tmp_path, "--out", tmp_path)
    assert code == 0
    truth = json.loads((tmp_path / "truth.json").read_text())
    flagged = sum(1 for t in truth if t["missing_density"])
    assert summary["excluded_exams"] == flagged
    assert summary["retained_exams"] == 2000 - flagged
    assert abs(flagged - 6) <= 3 * np.sqrt(6)
    assert summary["exams"]["test"] == summary["patients"]["test"]


def test_missing_artifact_is_reported(tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--corpus", tmp_path, "--model", tmp_path / "nothing")
    assert code != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith("error: missing-artifact: ")
    assert str(tmp_path / "nothing.json") in lines[0]


def test_bad_config_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"epochz": 3}')
    code, _, err = run(capsys, "split", "--config", path, "--corpus", tmp_path)
    assert code != 0 and err.startswith("error: config-error: ") and "epochz" in err
    code, _, err = run(capsys, "train-cnn", "--corpus", tmp_path, "--fraction", 0)
    assert code != 0 and err.startswith("error: config-error: ")


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"epochs": 7, "seed": 4, "lr": 0.5, "phantom": {"noise_sigma": 10.0}}))
    args = cli.build_parser().parse_args(["generate", "--config", str(path), "--seed", "9", "--noise-sigma", "3"])
    cfg = cli.resolve_config(args)
    assert cfg["seed"] == 9 and cfg["epochs"] == 7 and cfg["lr"] == 0.5
    assert cfg["phantom"] == {"noise_sigma": 3.0}
    cfg = cli.resolve_config(cli.build_parser().parse_args(["generate"]))
    assert cfg["seed"] == 0 and cfg["epochs"] == cli.DEFAULTS["epochs"]


def test_rounding_keeps_six_significant_digits():
    assert cli.rounded({"a": [1 / 3, np.float32(2.0)], "b": np.int64(4)}) == {"a": [0.333333, 2.0], "b": 4}
    assert cli.rounded(float("inf")) == float("inf")


def test_training_subset():
    data = cli.SplitData(np.zeros((200, 4, 2, 2)), np.arange(200) % 4, -np.ones(200), [f"E{i}" for i in range(200)])
    assert len(cli.training_subset(data, 0.01, 0)) == 2
    assert len(cli.training_subset(data, 0.001, 0)) == 1
    assert cli.training_subset(data, 1.0, 0) is data
    a = cli.training_subset(data, 0.1, 5).exam_ids
    assert a == cli.training_subset(data, 0.1, 5).exam_ids and len(a) == 20


def test_eval_and_roc_agree(workspace, capsys):
    out = workspace["root"] / "eval"
    code, report, _ = run(capsys, "eval", "--corpus", workspace["corpus"], "--model", workspace["models"] / "cnn",
                          "--out", out)
    assert code == 0
    for key in ("top1", "top2", "top3", "superclass", "mac_auc", "class_auc"):
        assert key in report
    assert report["superclass"] >= report["top1"] - 1e-12
    saved = json.loads((out / "eval.json").read_text())
    assert saved["report"] == report and saved["kind"] == "cnn"
    code, aucs, _ = run(capsys, "roc", "--corpus", workspace["corpus"], "--model", workspace["models"] / "cnn",
                        "--out", out)
    assert code == 0
    for c in range(4):
        path = out / f"roc_class{c}.csv"
        assert path.read_text().rstrip().splitlines()[-1].startswith("# auc=")
        curve = ek.read_roc_csv(path)
        assert float(f"{curve.auc:.6g}") == report["class_auc"][c]


def test_baseline_model_can_be_evaluated(workspace, capsys):
    code, report, _ = run(capsys, "eval", "--corpus", workspace["corpus"],
                          "--model", workspace["models"] / "baseline", "--out", workspace["root"] / "beval")
    assert code == 0 and 0 <= report["top1"] <= 1
    meta = json.loads((workspace["models"] / "baseline_training.json").read_text())
    assert meta["bins"] == 10 and meta["variant"] in ("linear", "hidden100")


def test_untrained_cnn_is_at_chance():
    rng = np.random.default_rng(41)
    cfg = sg.PhantomConfig(seed=41, height=64, width=48)
    labels = np.repeat(np.arange(4), 60)
    stack = np.stack([np.stack([sg.render_view(d, v, cfg, rng).pixels for v in VIEWS]) for d in labels])
    config = cnn.MultiColumnConfig(height=64, width=48)
    params = cnn.build_model(config, np.random.default_rng(42))
    report = ek.evaluate(cnn.predict_stack(params, config, stack), labels)
    assert abs(report.top1 - 0.25) <= 0.05


def test_transfer_initialisation_from_file(workspace, capsys):
    models = workspace["models"]
    code, _, _ = run(capsys, "pretrain-birads", "--config", workspace["config"], "--corpus", workspace["corpus"],
                     "--out", models)
    assert code == 0
    sidecar = json.loads((models / "birads.json").read_text())
    assert sidecar["n_classes"] == 3
    code, summary, _ = run(capsys, "train-cnn", "--config", workspace["config"], "--corpus", workspace["corpus"],
                           "--init", models / "birads", "--epochs", 0, "--out", workspace["root"] / "tr")
    assert code == 0 and summary["best_epoch"] == 0
    pre, _, _ = cnn.load_model(models / "birads")
    init, _, meta = cnn.load_model(workspace["root"] / "tr" / "cnn")
    assert cli.bit_copied(init, pre) == []
    assert meta["init"] == str(models / "birads")


def write_rankings(path, exam_ids, truths, readers=("R1", "R2")):
    rng = np.random.default_rng(43)
    rankings = [ek.ReaderRanking(r, e, ek.ranking_from_top(int(t), rng))
                for r in readers for e, t in zip(exam_ids, truths)]
    ek.write_rankings_csv(rankings, path)


def test_reader_study_with_perfect_readers(workspace, capsys):
    data = cli.load_partitions(workspace["corpus"], workspace["corpus"] / "split.json", ("test",))["test"]
    path = workspace["root"] / "rankings.csv"
    write_rankings(path, data.exam_ids, data.density)
    out = workspace["root"] / "reader"
    code, summary, _ = run(capsys, "reader-study", "--corpus", workspace["corpus"], "--rankings", path,
                           "--cnn-model", workspace["models"] / "cnn",
                           "--baseline-model", workspace["models"] / "baseline", "--out", out)
    assert code == 0
    assert summary["sample_size"] == min(100, len(data)) and summary["human_mac_auc"] == 1.0
    report = json.loads((out / "reader_study.json").read_text())
    assert report["kappa_4class"]["raters"] == report["kappa_2class"]["raters"] == ["L", "N", "H", "R1", "R2"]
    for key in ("L-R1", "L-R2", "R1-R2"):
        assert report["kappa_4class"]["kappa"][key] == 1.0
        assert report["kappa_2class"]["kappa"][key] == 1.0


def test_reader_study_names_missing_exams(workspace, capsys):
    data = cli.load_partitions(workspace["corpus"], workspace["corpus"] / "split.json", ("test",))["test"]
    path = workspace["root"] / "partial.csv"
    write_rankings(path, data.exam_ids[1:], data.density[1:])
    code, _, err = run(capsys, "reader-study", "--corpus", workspace["corpus"], "--rankings", path,
                       "--cnn-model", workspace["models"] / "cnn",
                       "--baseline-model", workspace["models"] / "baseline", "--out", workspace["root"])
    assert code != 0 and err.startswith("error: metric-error: ") and data.exam_ids[0] in err


def test_transfer_study_report(workspace, capsys):
    out = workspace["root"] / "transfer"
    code, summary, _ = run(capsys, "transfer-study", "--config", workspace["config"], "--corpus", workspace["corpus"],
                           "--pretrained", workspace["models"] / "birads", "--seeds", 2, "--epochs", 2,
                           "--out", out)
    assert code == 0
    report = json.loads((out / "transfer_study.json").read_text())
    assert len(report["runs"]) == 2
    for run_ in report["runs"]:
        assert run_["non_final_weights_copied"]
        for variant in ("scratch", "transfer"):
            assert len(run_[variant]["history"]) == 2
            assert run_[variant]["epochs_to_threshold"] is not None
    assert set(summary["median_epochs_to_threshold"]) == {"scratch", "transfer"}
