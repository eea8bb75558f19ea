import json
from pathlib import Path

import pytest
import yaml

from src import cli_commands
from src.cli import main
from src.constants import (
    CHECKPOINT_FILE,
    DETECTIONS_FILE,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    EXIT_VALIDATION_ERROR,
    METRICS_FILE,
    REPORT_FILE,
    RESOLVED_CONFIG,
    ROC_FILE,
    SWEEP_TABLE,
)
from src.querybank import QueryStore
from src.stream_renderer import format_event

REPO_ROOT = Path(__file__).resolve().parent.parent
SMOKE = str(REPO_ROOT / "configs" / "smoke.yaml")
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def test_every_command_is_registered():
    assert cli_commands.names() == ["eval", "gen", "infer", "query-sweep", "selftest", "train"]
    with pytest.raises(ValueError):
        cli_commands.register(cli_commands.get("gen"))


def test_eval_on_stored_detections(tmp_path):
    code = main(
        [
            "eval",
            "--detections", str(FIXTURES / "detections.json"),
            "--references", str(FIXTURES / "references.tsv"),
            "-o", str(tmp_path),
        ]
    )
    assert code == EXIT_OK
    report = json.loads((tmp_path / REPORT_FILE).read_text(encoding="utf-8"))
    assert report["psds"] == pytest.approx(5 / 6)
    assert report["psds_c"] == pytest.approx(0.5) and report["psds_r"] == pytest.approx(1.0)
    assert report["primary"] == report["psds_r"]
    rows = [json.loads(line) for line in (tmp_path / ROC_FILE).read_text(encoding="utf-8").splitlines()]
    assert sum(r["type"] == "operating_point" for r in rows) == 3
    assert (tmp_path / RESOLVED_CONFIG).is_file()


def test_invalid_override_exits_with_validation_code(tmp_path):
    args = ["eval", "--detections", str(FIXTURES / "detections.json"), "--references", str(FIXTURES / "references.tsv")]
    assert main(args + ["-o", str(tmp_path / "a"), "--set", "eval.median_window=4"]) == EXIT_VALIDATION_ERROR
    assert main(args + ["-o", str(tmp_path / "b"), "--set", "eval.median_window"]) == EXIT_VALIDATION_ERROR


def test_unknown_detection_class_is_rejected(tmp_path):
    doc = json.loads((FIXTURES / "detections.json").read_text(encoding="utf-8"))
    doc["clips"][0]["events"][0]["class_id"] = "horse"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc), encoding="utf-8")
    code = main(["eval", "--detections", str(bad), "--references", str(FIXTURES / "references.tsv"), "-o", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION_ERROR


def test_missing_query_store_is_a_runtime_failure(tmp_path):
    (tmp_path / "empty").mkdir()
    code = main(["train", "-c", SMOKE, "--data", str(tmp_path / "empty"), "-o", str(tmp_path / "run")])
    assert code == EXIT_RUNTIME_ERROR


def test_smoke_pipeline(tmp_path):
    data, run, det, ev = (tmp_path / n for n in ("data", "run", "infer", "eval"))
    assert main(["gen", "-c", SMOKE, "-o", str(data)]) == EXIT_OK
    assert (data / "manifest.json").is_file() and (data / "querystore.tsv").is_file()

    code = main(["train", "-c", SMOKE, "--data", str(data), "-o", str(run), "--set", "train.rare_threshold_seconds=1"])
    assert code == EXIT_OK
    assert (run / CHECKPOINT_FILE).is_file()
    metrics = [json.loads(line) for line in (run / METRICS_FILE).read_text(encoding="utf-8").splitlines()]
    assert [m["step"] for m in metrics] == [1, 2, 3, 4]
    resolved = yaml.safe_load((run / RESOLVED_CONFIG).read_text(encoding="utf-8"))
    assert resolved["train"]["rare_threshold_seconds"] == 1

    code = main(["infer", "-c", SMOKE, "--checkpoint", str(run / CHECKPOINT_FILE), "--data", str(data), "-o", str(det), "--dump-scores"])
    assert code == EXIT_OK
    detections = json.loads((det / DETECTIONS_FILE).read_text(encoding="utf-8"))
    assert len(detections["clips"]) == 3 and len(detections["thresholds"]) == 5
    assert detections["mask_strategy"] == "visible"

    code = main(["eval", "-c", SMOKE, "--detections", str(det / DETECTIONS_FILE), "--data", str(data), "-o", str(ev), "--subset", "all"])
    assert code == EXIT_OK
    report = json.loads((ev / REPORT_FILE).read_text(encoding="utf-8"))
    assert report["psds"] is None or 0.0 <= report["psds"] <= 1.0


# ---------------------------------------------------------------------------
#  gen / infer / query-sweep contracts on the smoke dataset
# ---------------------------------------------------------------------------
DATASET_FILES = [
    "manifest.json",
    "querystore.tsv",
    "ontology.tsv",
    *(f"{split}/{name}" for split in ("train", "eval", "queries") for name in ("strong.tsv", "strong_augmented.tsv")),
]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Smoke dataset plus a checkpoint trained only on the most annotated class."""
    from src.events import read_roster
    from src.labels import class_durations

    root = tmp_path_factory.mktemp("smoke")
    data, run = root / "data", root / "run"
    assert main(["gen", "-c", SMOKE, "-o", str(data)]) == EXIT_OK
    seconds = class_durations(read_roster(data / "train" / "strong_augmented.tsv"))
    threshold = max(seconds.values())
    code = main(["train", "-c", SMOKE, "--data", str(data), "-o", str(run), "--set", f"train.rare_threshold_seconds={threshold}"])
    assert code == EXIT_OK
    return data, run / CHECKPOINT_FILE


def test_gen_is_byte_identical_for_a_seed(trained, tmp_path):
    data, _ = trained
    again = tmp_path / "again"
    assert main(["gen", "-c", SMOKE, "-o", str(again)]) == EXIT_OK
    for name in DATASET_FILES:
        assert (again / name).read_bytes() == (data / name).read_bytes(), name


def test_gen_refuses_a_non_empty_directory(tmp_path):
    out = tmp_path / "data"
    out.mkdir()
    (out / "stale.txt").write_text("x", encoding="utf-8")
    assert main(["gen", "-c", SMOKE, "-o", str(out)]) == EXIT_VALIDATION_ERROR
    assert not (out / "manifest.json").exists()
    assert main(["gen", "-c", SMOKE, "-o", str(out), "--force"]) == EXIT_OK
    assert (out / "manifest.json").is_file()


def test_base_only_detections_ignore_the_mask_strategy(trained, tmp_path):
    data, checkpoint = trained
    docs = {}
    for strategy in ("visible", "invisible"):
        out = tmp_path / strategy
        args = ["infer", "-c", SMOKE, "--checkpoint", str(checkpoint), "--data", str(data), "-o", str(out)]
        assert main(args + ["--base-only", "--mask-strategy", strategy]) == EXIT_OK
        docs[strategy] = json.loads((out / DETECTIONS_FILE).read_text(encoding="utf-8"))
    visible, invisible = docs["visible"], docs["invisible"]
    assert visible["mask_strategy"] == "visible" and invisible["mask_strategy"] == "invisible"
    assert visible["n_base"] == len(visible["class_ids"]) == invisible["n_base"]
    assert [c["events"] for c in visible["clips"]] == [c["events"] for c in invisible["clips"]]
    stored = set(QueryStore.load(data / "querystore.tsv").class_ids())
    emitted = {ev["class_id"] for c in visible["clips"] for ev in c["events"]}
    assert set(visible["class_ids"]) <= stored and emitted <= set(visible["class_ids"])


def _sweep(trained, out, durations):
    data, checkpoint = trained
    args = ["query-sweep", "-c", SMOKE, "--checkpoint", str(checkpoint), "--data", str(data), "-o", str(out)]
    assert main(args + ["--durations", durations]) == EXIT_OK
    return [json.loads(line) for line in (out / SWEEP_TABLE).read_text(encoding="utf-8").splitlines()]


def test_query_sweep_rows_and_repeatability(trained, tmp_path):
    first = _sweep(trained, tmp_path / "a", "0.5,1000,2000")
    second = _sweep(trained, tmp_path / "b", "0.5,1000,2000")
    assert [r["duration_s"] for r in first] == [0.5, 1000.0, 2000.0]
    assert first == second
    assert all(r["n_novel"] >= 1 for r in first)
    assert first[0]["mean_used_s"] <= first[1]["mean_used_s"]
    # past the available audio every segment is used
    assert first[1]["psds_r"] == first[2]["psds_r"]
    assert first[1]["mean_used_s"] == first[2]["mean_used_s"]


def test_format_event_renders_known_kinds_only():
    line = format_event({"type": "sweep_row", "duration_s": 2.0, "psds_r": None})
    assert "📊" in line and "n/a" in line
    assert "❌ boom" in format_event({"type": "error", "message": "boom"})
    assert format_event({"type": "mystery"}) is None
