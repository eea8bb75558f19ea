import math

import numpy as np
import pytest

from src.constants import CNN_PRESETS
from src.decoder import (
    DASM,
    ClipHead,
    ContextNetwork,
    MapHead,
    MaskStrategy,
    build_mask,
    dasm_forward,
    frame_prediction,
)
from src.encoder import DualBranchEncoder, FineEncoder, fuse
from src.losses import total_loss
from src.model_config import LossConfig
from src.model_integration import ABLATIONS, check_store_compatible, create_model, load_model, save_model
from src.numerics import CompatibilityError, ConfigurationError, DimensionError, Tensor, grad_check, ops
from src.querybank import QueryStore

MEL_FRAMES, MEL_BINS, HOP = 32, 16, 0.01


def _mel(rng, frames=MEL_FRAMES):
    return rng.standard_normal((frames, MEL_BINS)).astype(np.float32)


def _queries(rng, n, dim=32):
    q = rng.standard_normal((n, dim))
    return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def model(tiny_model_cfg):
    return DASM(tiny_model_cfg, MEL_BINS, HOP)


# ---------------------------------------------------------------------------
#  Encoder
# ---------------------------------------------------------------------------
def test_coarse_branch_shape_and_position_sensitivity(tiny_model_cfg, rng):
    enc = DualBranchEncoder(tiny_model_cfg, MEL_BINS, HOP, np.random.default_rng(0))
    mel = _mel(rng)
    coarse = enc.coarse_encode(mel)
    assert coarse.values.shape == (4, 32)
    assert coarse.frames_per_second == pytest.approx(12.5)
    shuffled = mel[rng.permutation(MEL_FRAMES)]
    assert not np.allclose(enc.coarse_encode(shuffled).values.data, coarse.values.data)


def test_coarse_branch_zero_input_is_finite_and_deterministic(tiny_model_cfg):
    enc = DualBranchEncoder(tiny_model_cfg, MEL_BINS, HOP, np.random.default_rng(0))
    zeros = np.zeros((MEL_FRAMES, MEL_BINS), np.float32)
    a, b = enc.coarse_encode(zeros).values.data, enc.coarse_encode(zeros).values.data
    assert np.all(np.isfinite(a)) and np.array_equal(a, b)


def test_coarse_branch_rejects_indivisible_frames(tiny_model_cfg, rng):
    enc = DualBranchEncoder(tiny_model_cfg, MEL_BINS, HOP, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        enc.coarse_encode(_mel(rng, 30))


@pytest.mark.parametrize("preset", sorted(CNN_PRESETS))
def test_fine_branch_time_extent(tiny_model_cfg, preset, rng):
    cfg = tiny_model_cfg.model_copy(update=CNN_PRESETS[preset])
    fine = FineEncoder(cfg, MEL_BINS, np.random.default_rng(0))
    out = fine(Tensor(_mel(rng)))
    assert out.shape == (MEL_FRAMES // cfg.time_pool_product, 32)


def test_fine_branch_receptive_field(tiny_model_cfg, rng):
    fine = FineEncoder(tiny_model_cfg, MEL_BINS, np.random.default_rng(0))
    mel = _mel(rng)
    base = fine(Tensor(mel)).data
    probe = 13
    bumped = mel.copy()
    bumped[probe] += 5.0
    changed = np.abs(fine(Tensor(bumped)).data - base).max(axis=1) > 1e-9
    reachable = np.array([lo <= probe <= hi for lo, hi in map(fine.input_span, range(base.shape[0]))])
    assert changed.any()
    assert not np.any(changed & ~reachable)


def test_fuse_edge_cases(rng):
    coarse = rng.standard_normal((4, 8))
    fine = rng.standard_normal((16, 8))
    up = ops.linear_upsample(coarse, 4).data
    assert np.allclose(fuse(np.zeros((16, 8)), coarse, 4).data, up)
    assert np.allclose(fuse(fine, np.zeros((4, 8)), 4).data, fine)
    assert np.allclose(fuse(fine[:4], coarse, 1).data, fine[:4] + coarse)
    with pytest.raises(DimensionError):
        fuse(fine[:15], coarse, 4)


def test_fuse_is_linear_in_each_argument(rng):
    c1, c2 = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
    f = rng.standard_normal((16, 8))
    lhs = fuse(f, 2.0 * c1 + c2, 4).data
    rhs = 2.0 * fuse(np.zeros_like(f), c1, 4).data + fuse(f, c2, 4).data
    assert np.allclose(lhs, rhs, atol=1e-10)


def test_encoder_gradient(tiny_model_cfg, rng):
    enc = DualBranchEncoder(tiny_model_cfg, MEL_BINS, HOP, np.random.default_rng(0))
    mel = _mel(rng).astype(np.float64)
    weights = rng.standard_normal((16, 32))

    def objective():
        fused, _ = enc(mel)
        return ops.sum_(fused * weights)

    assert grad_check(objective, enc.parameters(), h=1e-4, max_coords=120, rng=rng) < 1e-3


# ---------------------------------------------------------------------------
#  Query masks
# ---------------------------------------------------------------------------
def test_mask_examples():
    visible = build_mask(2, 1, MaskStrategy.VISIBLE).allowed.astype(int)
    invisible = build_mask(2, 1, "invisible").allowed.astype(int)
    assert visible.tolist() == [[1, 1, 0], [1, 1, 0], [1, 1, 1]]
    assert invisible.tolist() == [[1, 1, 0], [1, 1, 0], [0, 0, 1]]
    for strategy in MaskStrategy:
        assert build_mask(3, 0, strategy).allowed.all()
    assert build_mask(2, 2, MaskStrategy.TRAIN).allowed.all()


def test_mask_diagonal_and_base_rows(rng):
    for strategy in (MaskStrategy.VISIBLE, MaskStrategy.INVISIBLE):
        for novel_self_only in (False, True):
            allowed = build_mask(3, 4, strategy, novel_self_only).allowed
            assert np.all(np.diag(allowed))
            assert not allowed[:3, 3:].any() and allowed[:3, :3].all()


def test_novel_self_only_narrows_the_invisible_novel_block():
    invisible = build_mask(1, 2, MaskStrategy.INVISIBLE, novel_self_only=True).allowed.astype(int)
    assert invisible.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    visible = build_mask(1, 2, MaskStrategy.VISIBLE, novel_self_only=True).allowed
    assert np.array_equal(visible, build_mask(1, 2, MaskStrategy.VISIBLE).allowed)


def test_mask_needs_a_base_query():
    with pytest.raises(ConfigurationError):
        build_mask(0, 2, MaskStrategy.VISIBLE)


# ---------------------------------------------------------------------------
#  Heads and context stream
# ---------------------------------------------------------------------------
def test_clip_head_zero_weights_give_one_half(rng):
    head = ClipHead(8, np.random.default_rng(0))
    for p in head.parameters():
        p.data[...] = 0.0
    out = head(Tensor(rng.standard_normal((5, 8)))).data
    assert np.all(out == 0.5)


def test_clip_head_range_and_map_head_rows(rng):
    clip, mapper = ClipHead(8, np.random.default_rng(0)), MapHead(8, np.random.default_rng(1))
    x = rng.standard_normal((4, 8)) * 3
    out = clip(Tensor(x)).data
    assert np.all((out > 0) & (out < 1))
    before = mapper(Tensor(x)).data
    x2 = x.copy()
    x2[2] += 1.0
    after = mapper(Tensor(x2)).data
    assert before.shape == (4, 8)
    assert np.allclose(np.delete(after, 2, axis=0), np.delete(before, 2, axis=0))
    assert not np.allclose(after[2], before[2])


def test_heads_gradient(rng):
    clip, mapper = ClipHead(8, np.random.default_rng(0)), MapHead(8, np.random.default_rng(1))
    x = rng.standard_normal((3, 8))
    w = rng.standard_normal((3, 8))
    assert grad_check(lambda: ops.sum_(clip(x) * w[:, 0]), clip.parameters(), h=1e-4) < 1e-4
    assert grad_check(lambda: ops.sum_(mapper(x) * w), mapper.parameters(), h=1e-4, max_coords=100, rng=rng) < 1e-4


def test_context_network_shape_and_conv_locality(tiny_model_cfg, rng):
    ctx = ContextNetwork(tiny_model_cfg, np.random.default_rng(0))
    x = rng.standard_normal((16, 32))
    base = ctx(x).data
    assert base.shape == x.shape
    ctx.attention_enabled = False
    base = ctx(x).data
    bumped = x.copy()
    bumped[7] += 3.0
    changed = np.flatnonzero(np.abs(ctx(bumped).data - base).max(axis=1) > 1e-9)
    assert changed.min() >= 7 - ctx.conv_radius and changed.max() <= 7 + ctx.conv_radius


def test_context_network_gradient(tiny_model_cfg, rng):
    ctx = ContextNetwork(tiny_model_cfg, np.random.default_rng(0))
    x = rng.standard_normal((8, 32))
    w = rng.standard_normal((8, 32))
    assert grad_check(lambda: ops.sum_(ctx(x) * w), ctx.parameters(), h=1e-4, max_coords=120, rng=rng) < 1e-3


def test_frame_prediction_examples():
    z = np.array([[math.log(3.0)], [0.0]])
    c = np.array([[1.0], [1.0]])
    out = frame_prediction(z, c, np.array([0.8, 1.0])).data
    assert out[0, 0] == pytest.approx(0.6) and out[1, 1] == pytest.approx(0.5)
    zeroed = frame_prediction(z, c, np.array([0.0, 1.0])).data
    assert np.all(zeroed[:, 0] == 0.0)


def test_frame_prediction_is_monotone_in_clip_prior(rng):
    z, c = rng.standard_normal((10, 4)), rng.standard_normal((3, 4))
    low = frame_prediction(z, c, np.array([0.2, 0.5, 0.7])).data
    high = frame_prediction(z, c, np.array([0.3, 0.5, 0.9])).data
    assert np.all(high >= low)


# ---------------------------------------------------------------------------
#  Full detector
# ---------------------------------------------------------------------------
def test_forward_shapes_and_frame_below_clip(model, rng):
    pred = dasm_forward(model, _mel(rng), _queries(rng, 3))
    assert pred.clip.shape == (3,) and pred.frame.shape == (16, 3)
    assert np.all(pred.frame.data <= pred.clip.data[None, :] + 1e-7)
    assert np.all(pred.clip.data <= 1.0)


def test_frame_never_exceeds_clip_across_random_models(tiny_model_cfg, rng):
    for seed in range(20):
        m = DASM(tiny_model_cfg.model_copy(update={"init_seed": seed}), MEL_BINS, HOP)
        for _ in range(5):
            pred = dasm_forward(m, _mel(rng), _queries(rng, int(rng.integers(1, 6))))
            assert np.all(pred.frame.data <= pred.clip.data[None, :] + 1e-7)


def test_without_clip_prior_frames_can_exceed_clip(tiny_model_cfg, rng):
    cfg = tiny_model_cfg.model_copy(update={"clip_prior": False})
    exceeded = False
    for seed in range(20):
        m = DASM(cfg.model_copy(update={"init_seed": seed}), MEL_BINS, HOP)
        pred = dasm_forward(m, _mel(rng), _queries(rng, 3))
        exceeded |= bool(np.any(pred.frame.data > pred.clip.data[None, :]))
    assert exceeded


def test_forward_is_deterministic_per_seed(tiny_model_cfg, rng):
    mel, q = _mel(rng), _queries(rng, 2)
    a = dasm_forward(DASM(tiny_model_cfg, MEL_BINS, HOP), mel, q).frame.data
    b = dasm_forward(DASM(tiny_model_cfg, MEL_BINS, HOP), mel, q).frame.data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("strategy", [MaskStrategy.VISIBLE, MaskStrategy.INVISIBLE])
def test_novel_queries_leave_base_predictions_unchanged(model, rng, strategy):
    mel, base, novel = _mel(rng).astype(np.float64), _queries(rng, 3).astype(np.float64), _queries(rng, 4).astype(np.float64)
    alone = dasm_forward(model, mel, base, strategy, 3)
    joined = dasm_forward(model, mel, np.vstack([base, novel]), strategy, 3)
    assert np.allclose(joined.clip.data[:3], alone.clip.data, atol=1e-6)
    assert np.allclose(joined.frame.data[:, :3], alone.frame.data, atol=1e-6)


@pytest.mark.parametrize("novel_self_only", [False, True])
def test_base_invariance_across_random_models(tiny_model_cfg, rng, novel_self_only):
    for seed in range(20):
        cfg = tiny_model_cfg.model_copy(update={"init_seed": seed, "novel_self_only": novel_self_only})
        m = DASM(cfg, MEL_BINS, HOP)
        n_base = int(rng.integers(1, 4))
        mel, base = _mel(rng).astype(np.float64), _queries(rng, n_base).astype(np.float64)
        novel = _queries(rng, int(rng.integers(1, 6))).astype(np.float64)
        for strategy in (MaskStrategy.VISIBLE, MaskStrategy.INVISIBLE):
            alone = dasm_forward(m, mel, base, strategy, n_base)
            joined = dasm_forward(m, mel, np.vstack([base, novel]), strategy, n_base)
            assert np.max(np.abs(joined.clip.data[:n_base] - alone.clip.data)) <= 1e-6
            assert np.max(np.abs(joined.frame.data[:, :n_base] - alone.frame.data)) <= 1e-6


def test_permuting_novel_queries_permutes_their_outputs(model, rng):
    mel, base, novel = _mel(rng).astype(np.float64), _queries(rng, 2).astype(np.float64), _queries(rng, 3).astype(np.float64)
    perm = np.array([2, 0, 1])
    a = dasm_forward(model, mel, np.vstack([base, novel]), MaskStrategy.VISIBLE, 2)
    b = dasm_forward(model, mel, np.vstack([base, novel[perm]]), MaskStrategy.VISIBLE, 2)
    assert np.allclose(b.extras["refined"].data[:2], a.extras["refined"].data[:2], atol=1e-6)
    assert np.allclose(b.extras["refined"].data[2:], a.extras["refined"].data[2:][perm], atol=1e-6)


def test_clip_prior_ablation_uses_conditional_scores(tiny_model_cfg, rng):
    cfg = tiny_model_cfg.model_copy(update=ABLATIONS["no-clip-prior"]["model"])
    m = DASM(cfg, MEL_BINS, HOP)
    pred = dasm_forward(m, _mel(rng), _queries(rng, 3))
    expected = ops.sigmoid(pred.extras["context"] @ ops.transpose(pred.extras["classifiers"])).data
    assert np.allclose(pred.frame.data, expected)


@pytest.mark.parametrize("name", ["no-event-decoder", "no-context"])
def test_structural_ablations_keep_output_shapes(tiny_model_cfg, rng, name):
    cfg = tiny_model_cfg.model_copy(update=ABLATIONS[name]["model"])
    m = DASM(cfg, MEL_BINS, HOP)
    pred = dasm_forward(m, _mel(rng), _queries(rng, 3))
    assert pred.frame.shape == (16, 3) and pred.clip.shape == (3,)
    if name == "no-context":
        assert m.context is None


def test_linear_head_needs_and_uses_class_list(tiny_model_cfg, rng):
    cfg = tiny_model_cfg.model_copy(update={"head": "linear"})
    with pytest.raises(ConfigurationError):
        DASM(cfg, MEL_BINS, HOP)
    m = DASM(cfg, MEL_BINS, HOP, ["a", "b"])
    pred = m(Tensor(_mel(rng)))
    assert pred.frame.shape == (16, 2)
    assert np.allclose(pred.clip.data, pred.frame.data.max(axis=0))


def test_query_head_rejects_wrong_query_width(model, rng):
    with pytest.raises(DimensionError):
        model(Tensor(_mel(rng)), _queries(rng, 2, dim=8))


def test_backbone_and_head_parameters_partition_the_model(model):
    backbone = {id(p) for p in model.backbone_parameters()}
    head = {id(p) for p in model.head_parameters()}
    assert backbone and head and not backbone & head
    assert backbone | head == {id(p) for p in model.parameters()}


def test_full_model_gradient(model, rng):
    """T=16, N=3, D=32 on a two-clip batch."""
    mels = [_mel(rng).astype(np.float64) for _ in range(2)]
    queries = _queries(rng, 3).astype(np.float64)
    targets = [(rng.random((16, 3)) > 0.6).astype(np.float64) for _ in range(2)]
    loss_cfg = LossConfig(prob_margin=0.0)

    def objective():
        total = None
        for mel, y in zip(mels, targets):
            loss, _ = total_loss(dasm_forward(model, mel, queries), y, loss_cfg)
            total = loss if total is None else total + loss
        return total

    assert grad_check(objective, model.parameters(), h=1e-4, max_coords=150, rng=rng) < 1e-3


# ---------------------------------------------------------------------------
#  Persistence
# ---------------------------------------------------------------------------
def test_model_checkpoint_round_trip(tiny_model_cfg, tiny_frontend_cfg, tmp_path, rng):
    m = create_model(tiny_model_cfg, tiny_frontend_cfg)
    for p in m.parameters():
        p.data = p.data + np.float32(0.01)
    save_model(tmp_path / "m.npz", m, tiny_frontend_cfg, {"train_classes": ["a"]})
    loaded, meta = load_model(tmp_path / "m.npz")
    assert meta["train_classes"] == ["a"] and meta["frontend"]["mel_bins"] == MEL_BINS
    mel, q = _mel(rng), _queries(rng, 2)
    assert np.array_equal(dasm_forward(loaded, mel, q).frame.data, dasm_forward(m, mel, q).frame.data)


def test_store_dimension_must_match_model(model):
    check_store_compatible(model, QueryStore(32))
    with pytest.raises(CompatibilityError):
        check_store_compatible(model, QueryStore(16))
