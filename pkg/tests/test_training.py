import math
from pathlib import Path

import numpy as np
import pytest

from src.dataset_io import Split, load_manifest, load_split, write_dataset
from src.decoder import PredictionGrid
from src.events import Event, ValidationError
from src.frontend import InputError
from src.labels import (
    Ontology,
    class_durations,
    frame_targets,
    label_augment,
    merge_spans,
    read_ontology,
    resample_weights,
    split_common_rare,
    write_ontology,
)
from src.losses import asymmetric_focal_loss, total_loss
from src.model_config import LossConfig, load_run_config
from src.model_integration import load_model, model_from_run
from src.numerics import Tensor, file_hash
from src.numerics.core_defs import ConfigurationError
from src.querybank import QueryStore
from src.synth import SpecError, SynthSpec, band_snr_db, generate_synthetic_clip, validate_clip
from src.trainer import Trainer, plan_training, trim_frames

REPO_ROOT = Path(__file__).resolve().parent.parent

PLAIN = LossConfig(gamma_pos=0.0, gamma_neg=0.0, prob_margin=0.0)


# ---------------------------------------------------------------------------
#  Loss
# ---------------------------------------------------------------------------
def test_loss_without_focusing_is_binary_cross_entropy(rng):
    p = rng.uniform(0.05, 0.95, (6, 3))
    y = (rng.random((6, 3)) > 0.5).astype(np.float64)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert asymmetric_focal_loss(p, y, PLAIN).item() == pytest.approx(bce, rel=1e-9)


def test_focal_negative_term_example():
    cfg = LossConfig(gamma_neg=2.0, prob_margin=0.0)
    value = asymmetric_focal_loss(np.array([0.3]), np.array([0.0]), cfg).item()
    assert value == pytest.approx(0.09 * -math.log(0.7), rel=1e-9)
    assert value == pytest.approx(0.0321, abs=1e-4)


def test_probability_margin_discards_easy_negatives():
    cfg = LossConfig(gamma_neg=2.0, prob_margin=0.05)
    assert asymmetric_focal_loss(np.array([0.04]), np.array([0.0]), cfg).item() == 0.0
    expected = 0.25**2 * -math.log(0.75)
    assert asymmetric_focal_loss(np.array([0.3]), np.array([0.0]), cfg).item() == pytest.approx(expected, rel=1e-9)


def test_perfect_prediction_has_near_zero_loss():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert asymmetric_focal_loss(y.copy(), y, LossConfig()).item() < 1e-6


def _grid(rng, t=8, n=3):
    clip = rng.uniform(0.2, 0.9, n)
    frame = rng.uniform(0.0, 1.0, (t, n)) * clip
    return PredictionGrid(Tensor(clip), Tensor(frame))


def test_total_loss_clip_weighting(rng):
    pred = _grid(rng)
    y = (rng.random((8, 3)) > 0.7).astype(np.float64)
    base, parts = total_loss(pred, y, LossConfig(alpha=0.0))
    assert base.item() == pytest.approx(parts["frame_loss"])
    one, parts1 = total_loss(pred, y, LossConfig(alpha=0.5))
    two, _ = total_loss(pred, y, LossConfig(alpha=1.0))
    assert two.item() - one.item() == pytest.approx(0.5 * parts1["clip_loss"], rel=1e-9)


def test_total_loss_rejects_inconsistent_targets(rng):
    pred = _grid(rng)
    y = np.zeros((8, 3))
    y[2, 1] = 1.0
    with pytest.raises(ValidationError):
        total_loss(pred, y, LossConfig(), clip_targets=np.zeros(3))
    with pytest.raises(ValidationError):
        total_loss(pred, np.zeros((7, 3)), LossConfig())


# ---------------------------------------------------------------------------
#  Labels
# ---------------------------------------------------------------------------
ONT = Ontology.from_pairs([("leaf", "mid"), ("mid", "root"), ("root", ""), ("other", "root"), ("shared", "mid"), ("shared", "other")])


def test_label_augment_adds_ancestors_with_same_timing():
    roster, dropped = label_augment({"c": [Event(1.0, 2.0, "leaf")]}, ONT)
    assert dropped == []
    assert sorted((e.class_id, e.onset, e.offset) for e in roster["c"]) == [
        ("leaf", 1.0, 2.0),
        ("mid", 1.0, 2.0),
        ("root", 1.0, 2.0),
    ]


def test_label_augment_root_only_and_merge():
    roster, _ = label_augment({"c": [Event(0.0, 1.0, "root"), Event(1.0, 2.0, "root")]}, ONT)
    assert roster["c"] == [Event(0.0, 2.0, "root")]


def test_label_augment_follows_every_parent():
    roster, _ = label_augment({"c": [Event(0.5, 1.5, "shared")]}, ONT)
    assert {e.class_id for e in roster["c"]} == {"shared", "mid", "other", "root"}


def test_label_augment_is_idempotent_and_drops_unknown_clips():
    roster = {"a": [Event(0.0, 1.0, "leaf"), Event(0.5, 2.5, "other")], "b": [Event(0.0, 1.0, "mystery")]}
    once, dropped = label_augment(roster, ONT)
    assert dropped == ["b"] and list(once) == ["a"]
    twice, _ = label_augment(once, ONT)
    assert twice == once


def _covered(events, span, class_id):
    return any(e.class_id == class_id and e.onset <= span.onset and span.offset <= e.offset for e in events)


@pytest.mark.parametrize("seed", range(100))
def test_label_augment_properties_on_random_hierarchies(seed):
    rng = np.random.default_rng(seed)
    nodes = [f"k{i}" for i in range(int(rng.integers(2, 9)))]
    pairs = [(nodes[0], "")]
    for i, node in enumerate(nodes[1:], start=1):
        parents = rng.choice(i, size=int(rng.integers(0, min(i, 2) + 1)), replace=False)
        pairs.extend((node, nodes[int(p)]) for p in parents)
        if parents.size == 0:
            pairs.append((node, ""))
    ont = Ontology.from_pairs(pairs)
    roster = {}
    for c in range(int(rng.integers(1, 4))):
        events = []
        for _ in range(int(rng.integers(1, 5))):
            onset = 0.5 * int(rng.integers(0, 16))
            events.append(Event(onset, onset + 0.5 * int(rng.integers(1, 5)), nodes[int(rng.integers(len(nodes)))]))
        roster[f"c{c}"] = events
    out, dropped = label_augment(roster, ont)
    assert dropped == [] and label_augment(out, ont)[0] == out
    for clip, events in out.items():
        for ev in roster[clip]:
            assert _covered(events, ev, ev.class_id)
        for ev in events:
            assert all(_covered(events, ev, a) for a in ont.ancestors(ev.class_id))
        for class_id in {ev.class_id for ev in events}:
            spans = [ev for ev in events if ev.class_id == class_id]
            assert all(a.offset < b.onset for a, b in zip(spans, spans[1:]))


def test_ontology_rejects_cycles_and_round_trips(tmp_path):
    with pytest.raises(ValidationError):
        Ontology.from_pairs([("a", "b"), ("b", "a")])
    write_ontology(tmp_path / "ont.tsv", ONT)
    back = read_ontology(tmp_path / "ont.tsv")
    assert back.pairs() == ONT.pairs()
    assert back.ancestors("shared") == frozenset({"mid", "other", "root"})
    assert ONT.leaves() == ["leaf", "shared"] and ONT.roots() == ["root"]


def test_merge_spans_keeps_gaps():
    merged = merge_spans([Event(0.0, 1.0, "a"), Event(0.5, 1.5, "a"), Event(2.0, 3.0, "a")])
    assert merged == [Event(0.0, 1.5, "a"), Event(2.0, 3.0, "a")]


def test_common_rare_split_boundary():
    roster = {"c": [Event(0.0, 359.0, "a"), Event(0.0, 360.0, "b")]}
    common, rare = split_common_rare(roster, 360.0)
    assert common == {"b"} and rare == {"a"}
    assert split_common_rare({}, 360.0) == (set(), set())


def test_class_durations_count_overlap_once():
    roster = {"c": [Event(0.0, 2.0, "a"), Event(1.0, 3.0, "a")], "d": [Event(0.0, 1.0, "a")]}
    assert class_durations(roster) == {"a": pytest.approx(4.0)}


def test_resample_weights_favour_rare_classes():
    roster = {"c1": [Event(0, 1, "a")], "c2": [Event(0, 1, "a")], "c3": [Event(0, 1, "a"), Event(0, 1, "b")]}
    weights = resample_weights(roster)
    assert weights == pytest.approx([0.6, 0.6, 1.8])
    assert weights.mean() == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        resample_weights({"x": []})


def test_frame_targets_use_frame_centres():
    grid = frame_targets([Event(0.1, 0.2, "a"), Event(0.0, 1.0, "z")], ["a", "b"], 20, 50.0)
    assert grid.shape == (20, 2)
    assert np.flatnonzero(grid[:, 0]).tolist() == [5, 6, 7, 8, 9]
    assert not grid[:, 1].any()


# ---------------------------------------------------------------------------
#  Synthetic data
# ---------------------------------------------------------------------------
@pytest.fixture
def synth_spec(smoke_cfg):
    return SynthSpec.from_config(smoke_cfg.dataset)


def test_zero_event_clip_is_noise_only(synth_spec, rng):
    wave, events = generate_synthetic_clip(synth_spec, rng, n_events=0)
    assert events == []
    assert wave.samples.shape == (32000,)
    assert np.sqrt(np.mean(wave.samples.astype(np.float64) ** 2)) == pytest.approx(synth_spec.noise_rms, rel=0.05)


def test_placed_events_meet_their_band_snr(synth_spec, rng):
    placements = [(c, 0.2 + 0.4 * i, 0.3) for i, c in enumerate(synth_spec.classes)]
    wave, events = generate_synthetic_clip(synth_spec, rng, placements=placements)
    assert [(e.class_id, e.onset) for e in events] == [(c, pytest.approx(o)) for c, o, _ in placements]
    assert validate_clip(wave, events, synth_spec) == []
    for ev in events:
        lo, hi = synth_spec.snr_db
        assert lo <= ev.score <= hi
        assert band_snr_db(wave, ev, synth_spec.classes[ev.class_id], synth_spec.noise_rms) > lo - 1.5


def test_random_events_sit_on_the_ten_ms_grid(synth_spec, rng):
    _, events = generate_synthetic_clip(synth_spec, rng, n_events=3)
    assert len(events) == 3
    for ev in events:
        assert round(ev.onset * 100) == pytest.approx(ev.onset * 100, abs=1e-6)
        assert 0.0 <= ev.onset < ev.offset <= synth_spec.clip_seconds + 1e-9


def test_impossible_generation_requests(synth_spec, rng):
    with pytest.raises(SpecError):
        generate_synthetic_clip(synth_spec, rng, placements=[("no_such_class", 0.0, 0.5)])
    some_class = next(iter(synth_spec.classes))
    with pytest.raises(SpecError):
        generate_synthetic_clip(synth_spec, rng, placements=[(some_class, 1.8, 0.5)])
    synth_spec.event_seconds = (3.0, 3.0)
    with pytest.raises(SpecError):
        generate_synthetic_clip(synth_spec, rng, n_events=1)


# ---------------------------------------------------------------------------
#  Training loop
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    cfg = load_run_config(REPO_ROOT / "configs" / "smoke.yaml")
    write_dataset(root, cfg)
    return root


def _run_cfg(tmp_path: Path, **train):
    return load_run_config(
        REPO_ROOT / "configs" / "smoke.yaml",
        {"output_dir": str(tmp_path), "train": {"protocol": "full", **train}},
    )


def test_generated_dataset_layout(smoke_dataset):
    manifest = load_manifest(smoke_dataset)
    assert manifest["splits"]["train"]["count"] == 6
    split = load_split(smoke_dataset, "eval")
    assert len(split.clip_ids) == 3 and split.total_seconds == pytest.approx(6.0)
    store = QueryStore.load(smoke_dataset / "querystore.tsv")
    assert set(store.class_ids()) == set(manifest["names"])


def test_zero_learning_rate_leaves_parameters_unchanged(smoke_dataset, tmp_path):
    cfg = _run_cfg(tmp_path, lr=0.0, lr_backbone=0.0)
    model = model_from_run(cfg)
    before = model.state_dict()
    Trainer(model, cfg, QueryStore.load(smoke_dataset / "querystore.tsv")).fit(load_split(smoke_dataset, "train"))
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_backbone_is_frozen_during_warmup(smoke_dataset, tmp_path):
    cfg = _run_cfg(tmp_path, steps=2, freeze_steps=2)
    model = model_from_run(cfg)
    backbone = {id(p) for p in model.backbone_parameters()}
    named = dict(model.named_parameters())
    before = model.state_dict()
    result = Trainer(model, cfg, QueryStore.load(smoke_dataset / "querystore.tsv")).fit(load_split(smoke_dataset, "train"))
    after = model.state_dict()
    assert len(result.losses) == 2 and all(math.isfinite(v) for v in result.losses)
    frozen_same = [np.array_equal(before[k], after[k]) for k, p in named.items() if id(p) in backbone]
    head_same = [np.array_equal(before[k], after[k]) for k, p in named.items() if id(p) not in backbone]
    assert all(frozen_same)
    assert not all(head_same)


def test_same_seed_reproduces_the_loss_curve(smoke_dataset, tmp_path):
    cfg = _run_cfg(tmp_path)
    store = QueryStore.load(smoke_dataset / "querystore.tsv")
    runs = [Trainer(model_from_run(cfg), cfg, store).fit(load_split(smoke_dataset, "train")).losses for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_writes_a_loadable_checkpoint(smoke_dataset, tmp_path):
    cfg = _run_cfg(tmp_path)
    model = model_from_run(cfg)
    result = Trainer(model, cfg, QueryStore.load(smoke_dataset / "querystore.tsv")).fit(
        load_split(smoke_dataset, "train"), checkpoint=tmp_path / "model.npz"
    )
    assert result.checkpoint_hash == file_hash(tmp_path / "model.npz")
    loaded, meta = load_model(tmp_path / "model.npz")
    assert meta["train_classes"] == result.class_ids and meta["protocol"] == "full"
    assert all(np.array_equal(v, loaded.state_dict()[k]) for k, v in model.state_dict().items())


def test_partial_protocol_trains_common_classes_only(tmp_path):
    cfg = load_run_config(REPO_ROOT / "configs" / "smoke.yaml", {"train": {"rare_threshold_seconds": 2.0}})
    roster = {
        "c1": [Event(0.0, 1.5, "common"), Event(0.0, 0.5, "rare")],
        "c2": [Event(0.0, 1.0, "common")],
        "c3": [Event(0.0, 0.5, "rare")],
    }
    split = Split("train", tmp_path, ["c1", "c2", "c3"], {c: 2.0 for c in roster}, roster)
    plan = plan_training(split, cfg, None)
    assert plan.class_ids == ["common"] and plan.rare_classes == ["rare"]
    assert plan.clip_ids == ["c1", "c2"] and plan.dropped_clips == ["c3"]
    assert all(ev.class_id == "common" for evs in plan.roster.values() for ev in evs)
    with pytest.raises(ConfigurationError):
        plan_training(Split("train", tmp_path, ["c3"], {"c3": 2.0}, {"c3": [Event(0.0, 0.5, "rare")]}), cfg, None)


def test_trim_frames_to_patch_multiple():
    assert trim_frames(np.zeros((37, 4)), 8).shape == (32, 4)
    with pytest.raises(InputError):
        trim_frames(np.zeros((5, 4)), 8)
