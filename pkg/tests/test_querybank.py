import numpy as np
import pytest

from src.events import Event
from src.frontend import InputError, MelSpectrogram
from src.numerics.core_defs import ConfigurationError
from src.querybank import (
    QueryStore,
    QueryVector,
    StubEmbeddingProvider,
    assemble_inference_queries,
    build_audio_query,
    build_text_query,
    event_segments,
    normalize,
    sample_modality,
    subsample_segments,
)

PROVIDER = StubEmbeddingProvider(dim=16, seed=3, mel_bins=8)


def _spec(frames, rng=None, value=None):
    if value is not None:
        return MelSpectrogram(np.tile(np.asarray(value, np.float32), (frames, 1)), 0.01)
    return MelSpectrogram(rng.standard_normal((frames, 8)).astype(np.float32), 0.01)


def test_text_queries_are_deterministic_distinct_and_unit_norm():
    cat1 = build_text_query("cat", PROVIDER)
    cat2 = build_text_query("cat", PROVIDER)
    dog = build_text_query("dog", PROVIDER)
    assert np.array_equal(cat1.embedding, cat2.embedding)
    assert float(cat1.embedding @ dog.embedding) < 1 - 1e-6
    assert np.linalg.norm(cat1.embedding) == pytest.approx(1.0, abs=1e-6)
    assert cat1.modality == "text"


def test_text_query_rejects_blank_name():
    with pytest.raises(InputError):
        build_text_query("  ", PROVIDER)


def test_single_frame_audio_query_is_normalised_frame_feature(rng):
    seg = _spec(1, rng)
    q = build_audio_query([seg], PROVIDER, "x")
    assert np.allclose(q.embedding, normalize(PROVIDER.embed_audio(seg)[0]), atol=1e-6)


def test_identical_segments_do_not_change_the_query(rng):
    seg = _spec(5, rng)
    one = build_audio_query([seg], PROVIDER, "x").embedding
    many = build_audio_query([seg, seg, seg], PROVIDER, "x").embedding
    assert np.allclose(one, many, atol=1e-6)


def test_audio_query_weights_segments_by_length(rng):
    u_row, v_row = rng.standard_normal(8), rng.standard_normal(8)
    q = build_audio_query([_spec(1, value=u_row), _spec(3, value=v_row)], PROVIDER, "x").embedding
    u = PROVIDER.embed_audio(_spec(1, value=u_row))[0]
    v = PROVIDER.embed_audio(_spec(1, value=v_row))[0]
    assert np.allclose(q, normalize((u + 3 * v) / 4), atol=1e-6)


def test_audio_query_needs_segments():
    with pytest.raises(InputError):
        build_audio_query([], PROVIDER, "x")


def test_sample_modality_modes(rng):
    assert {sample_modality("c", rng, "text") for _ in range(50)} == {"text"}
    assert {sample_modality("c", rng, "audio") for _ in range(50)} == {"audio"}
    draws = [sample_modality("c", rng, "mixed") for _ in range(10000)]
    assert 0.47 <= draws.count("text") / len(draws) <= 0.53
    assert sample_modality("c", rng, "mixed", ["audio"]) == "audio"
    with pytest.raises(ConfigurationError):
        sample_modality("c", rng, "mixed", [])


def _store():
    store = QueryStore(16, PROVIDER.header())
    for name in ("a", "b"):
        store.add(build_text_query(name, PROVIDER, name, "base"), {"prompt": name})
    store.add(build_text_query("c", PROVIDER, "c", "novel"), {"prompt": "c"})
    return store


def test_assemble_keeps_base_order_and_appends_novel():
    store = _store()
    ids, matrix, n_base = assemble_inference_queries(store)
    assert ids == ["a", "b"] and n_base == 2 and matrix.shape == (2, 16)
    novel = store.query("c", "text")
    ids, matrix, n_base = assemble_inference_queries(store, [novel])
    assert ids == ["a", "b", "c"] and n_base == 2
    assert np.array_equal(matrix[2], novel.embedding)
    with pytest.raises(InputError):
        assemble_inference_queries(store, [store.query("a", "text")])


def test_store_orders_base_before_novel_and_rejects_duplicates():
    store = QueryStore(16)
    store.add(build_text_query("n", PROVIDER, "n", "novel"))
    store.add(build_text_query("b", PROVIDER, "b", "base"))
    assert store.class_ids() == ["b", "n"]
    with pytest.raises(InputError):
        store.add(build_text_query("b", PROVIDER, "b", "base"))
    with pytest.raises(InputError):
        store.add(QueryVector("z", np.ones(3, np.float32), "text"))


def test_store_round_trip_is_bit_exact(tmp_path, rng):
    store = _store()
    store.add(build_audio_query([_spec(4, rng)], PROVIDER, "a", "base"), {"segments": ["q_00000:0.10-0.50"]})
    store.save(tmp_path / "store.tsv")
    back = QueryStore.load(tmp_path / "store.tsv")
    assert back.dim == 16 and back.class_ids() == store.class_ids()
    for entry in store.entries:
        other = back.entry(entry.class_id)
        assert other.role == entry.role and other.provenance == entry.provenance
        for modality, vec in entry.vectors.items():
            assert other.vectors[modality].tobytes() == vec.tobytes()
    rebuilt = back.provider()
    assert (rebuilt.dim, rebuilt.seed, rebuilt.mel_bins) == (16, 3, 8)


def test_store_rejects_other_major_version(tmp_path):
    path = tmp_path / "store.tsv"
    path.write_text("# dasm-querystore 2.0\tdim=4\nclass_id\trole\tmodality\tdim\tpayload\tprovenance\n", encoding="utf-8")
    with pytest.raises(InputError):
        QueryStore.load(path)


def test_subsample_clamps_and_crops(rng):
    segs = [_spec(100, rng), _spec(50, rng)]
    picked, used = subsample_segments(segs, 10.0, rng)
    assert used == pytest.approx(1.5) and len(picked) == 2
    picked, used = subsample_segments(segs, 0.3, rng)
    assert used == pytest.approx(0.3)
    assert sum(s.frames for s in picked) == 30


def test_event_segments_crop_each_labelled_span(rng):
    spectra = {"c1": _spec(200, rng)}
    roster = {"c1": [Event(0.1, 0.5, "dog"), Event(1.0, 1.2, "cat")]}
    segs = event_segments(spectra, roster, ["dog"])
    assert list(segs) == ["dog"]
    assert segs["dog"][0].frames == 40
    assert np.array_equal(segs["dog"][0].values, spectra["c1"].values[10:50])
