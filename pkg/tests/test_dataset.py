import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laclip_kit import FORMAT_TAG
from laclip_kit.dataset import (FeatureStore, SyntheticSpec, assign_shards, batch_iter, gen_synthetic,
                                ingest_captions, read_augmented, read_records, shard, write_augmented,
                                write_captions)
from laclip_kit.encoder import tokenize
from laclip_kit.errors import ConfigError, DuplicateId, ParseError
from laclip_kit.textaug import AugmentedRecord


def write(path, lines):
    path.write_text("\n".join([FORMAT_TAG] + lines) + "\n", encoding="utf-8")
    return path


def recs(n, m=0, prefix="r"):
    return [AugmentedRecord(f"{prefix}{i}", f"{prefix}{i}", [f"caption {i} v{k}" for k in range(m + 1)],
                            [("paraphrase", "test")] * m) for i in range(n)]


def store_for(records, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureStore([r.image_ref for r in records], rng.standard_normal((len(records), dim)))


def test_ingest_valid(tmp_path):
    p = write(tmp_path / "c.jsonl", [
        '{"id": "a", "image_ref": "ia", "caption": "one"}',
        '{"id": "b", "image_ref": "ib", "caption": "two"}',
        '{"id": "c", "image_ref": "ic", "caption": "three"}',
    ])
    out = ingest_captions(p)
    assert [r.id for r in out] == ["a", "b", "c"]
    assert all(len(r.captions) == 1 for r in out)


def test_ingest_missing_field(tmp_path):
    p = write(tmp_path / "c.jsonl", ['{"id": "a", "image_ref": "ia", "caption": "x"}', '{"id": "b", "image_ref": "ib"}'])
    with pytest.raises(ParseError) as e:
        ingest_captions(p)
    assert e.value.line == 3


def test_ingest_duplicate(tmp_path):
    p = write(tmp_path / "c.jsonl", ['{"id": "a", "image_ref": "1", "caption": "x"}',
                                     '{"id": "a", "image_ref": "2", "caption": "y"}'])
    with pytest.raises(DuplicateId) as e:
        ingest_captions(p)
    assert e.value.record_id == "a"


def test_bad_tag_and_json(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("#laclip-kit v9\n")
    with pytest.raises(ParseError):
        ingest_captions(p)
    p = write(tmp_path / "y.jsonl", ["{not json"])
    with pytest.raises(ParseError) as e:
        ingest_captions(p)
    assert e.value.line == 2


def test_augmented_needs_exact_fields(tmp_path):
    p = write(tmp_path / "a.jsonl", ['{"captions": ["x"], "id": "a", "image_ref": "a", "rewrite_meta": [], "extra": 1}'])
    with pytest.raises(ParseError):
        read_augmented(p)


def test_read_records_detects_format(tmp_path):
    write_captions(tmp_path / "c.jsonl", recs(2))
    write_augmented(tmp_path / "a.jsonl", recs(2, m=2))
    assert read_records(tmp_path / "c.jsonl") == recs(2)
    assert read_records(tmp_path / "a.jsonl") == recs(2, m=2)


def test_canonical_line_format(tmp_path):
    write_augmented(tmp_path / "a.jsonl", recs(1, m=1))
    assert (tmp_path / "a.jsonl").read_text() == (
        FORMAT_TAG + "\n"
        '{"captions":["caption 0 v0","caption 0 v1"],"id":"r0","image_ref":"r0","rewrite_meta":[["paraphrase","test"]]}\n'
    )


caption_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=1).filter(str.strip)
record_lists = st.lists(st.tuples(st.lists(caption_text, min_size=1, max_size=3), st.text(max_size=5)),
                        max_size=5)


@settings(max_examples=50)
@given(record_lists)
def test_round_trip_byte_identical(tmp_path_factory, items):
    d = tmp_path_factory.mktemp("rt")
    records = [AugmentedRecord(f"id{i}", ref, caps, [("s", "b")] * (len(caps) - 1))
               for i, (caps, ref) in enumerate(items)]
    write_augmented(d / "a.jsonl", records)
    back = read_augmented(d / "a.jsonl")
    assert back == records
    write_augmented(d / "b.jsonl", back)
    assert (d / "a.jsonl").read_bytes() == (d / "b.jsonl").read_bytes()


def test_single_shard_equals_input(tmp_path):
    records = recs(20, m=1)
    write_augmented(tmp_path / "in.jsonl", records)
    (p,) = shard(records, 1, tmp_path)
    assert p.name == "shard-00000-of-00001.jsonl"
    assert p.read_bytes() == (tmp_path / "in.jsonl").read_bytes()


# 1000 records into 4 shards: each size ~ Binomial(1000, 1/4), sigma = sqrt(187.5) = 13.69;
# 4 sigma around 250 is [195.2, 304.8], so integer sizes must lie in [196, 304]
SHARD_LO, SHARD_HI = 196, 304


def test_shard_balance_and_determinism(tmp_path):
    records = recs(1000)
    sizes = [len(s) for s in assign_shards(records, 4)]
    assert abs(math.sqrt(1000 * 0.25 * 0.75) * 4 - 54.77) < 0.01
    assert all(SHARD_LO <= s <= SHARD_HI for s in sizes), sizes
    assert sum(sizes) == 1000
    paths = shard(records, 4, tmp_path / "a")
    again = shard(records, 4, tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]


@given(st.lists(st.text(min_size=1, max_size=8), unique=True, max_size=60), st.integers(1, 9))
def test_shard_is_partition(ids, n):
    records = [AugmentedRecord(i, i, ["c"]) for i in ids]
    parts = assign_shards(records, n)
    flat = [r.id for p in parts for r in p]
    assert sorted(flat) == sorted(ids)
    assert assign_shards(records, n) == parts


def test_shard_rejects_zero():
    with pytest.raises(ConfigError):
        assign_shards(recs(3), 0)


def test_feature_store_round_trip(tmp_path):
    records = recs(4)
    fs = store_for(records, dim=5)
    fs.save(tmp_path / "f.bin")
    back = FeatureStore.load(tmp_path / "f.bin")
    assert back.ids == fs.ids
    np.testing.assert_array_equal(back.matrix, fs.matrix.astype(np.float32).astype(np.float64))
    np.testing.assert_array_equal(back.rows(["r2", "r0"]), back.matrix[[2, 0]])
    with pytest.raises(KeyError):
        back.rows(["nope"])
    assert "r1" in back and "zz" not in back


def test_feature_store_detects_corruption(tmp_path):
    fs = store_for(recs(3))
    fs.save(tmp_path / "f.bin")
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(ParseError):
        FeatureStore.load(tmp_path / "g.bin")
    (tmp_path / "h.bin").write_bytes(raw.replace(b'"r1"', b'"rX"', 1))
    with pytest.raises(ParseError):
        FeatureStore.load(tmp_path / "h.bin")


def test_batch_sizes_keep_last():
    records = recs(5)
    sizes = [len(b.record_ids) for b in batch_iter(records, store_for(records), 2, 0)]
    assert sizes == [2, 2, 1]


def test_batch_same_seed_identical():
    records = recs(7, m=4)
    fs = store_for(records)
    a = list(batch_iter(records, fs, 3, 42))
    b = list(batch_iter(records, fs, 3, 42))
    for x, y in zip(a, b):
        assert x.record_ids == y.record_ids
        np.testing.assert_array_equal(x.token_batches, y.token_batches)
        np.testing.assert_array_equal(x.caption_indices, y.caption_indices)


def _choices_by_id(records, fs, seed):
    out = {}
    for b in batch_iter(records, fs, 2, seed):
        out.update(zip(b.record_ids, b.caption_indices.tolist()))
    return tuple(out[r.id] for r in records)


def test_caption_choices_differ_across_seeds():
    # with M=4 and 5 records, two independent epochs agree with probability (1/5)**5 = 3.2e-4;
    # over 2000 seed pairs the expected number of agreements is 0.64 and P(>= 7) < 1e-5
    records = recs(5, m=4)
    fs = store_for(records)
    same = sum(_choices_by_id(records, fs, 2 * k) == _choices_by_id(records, fs, 2 * k + 1) for k in range(2000))
    assert same <= 6


def test_batch_modes():
    records = recs(4, m=2)
    fs = store_for(records)
    (orig,) = list(batch_iter(records, fs, 4, 1, caption_mode="original"))
    assert orig.token_batches.shape == (4, 77)
    assert np.all(orig.caption_indices == 0)
    first = {r.id: r for r in records}[orig.record_ids[0]]
    np.testing.assert_array_equal(orig.token_batches[0], tokenize(first.captions[0]))
    (full,) = list(batch_iter(records, fs, 4, 1, caption_mode="all"))
    assert full.token_batches.shape == (3, 4, 77)
    np.testing.assert_array_equal(full.token_batches[2, 0], tokenize(first.captions[2]))
    with pytest.raises(ConfigError):
        list(batch_iter(records, fs, 0, 1))
    with pytest.raises(ConfigError):
        list(batch_iter(records, fs, 2, 1, caption_mode="random"))
    ragged = recs(2, m=1) + recs(2, m=2, prefix="q")
    with pytest.raises(ConfigError):
        list(batch_iter(ragged, store_for(ragged), 2, 1, caption_mode="all"))


@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**63 - 1))
def test_epoch_is_permutation(n, bs, seed):
    records = recs(n, m=1)
    batches = list(batch_iter(records, store_for(records, dim=2), bs, seed))
    ids = [i for b in batches for i in b.record_ids]
    assert sorted(ids) == sorted(r.id for r in records)
    assert all(len(b.record_ids) >= 1 for b in batches)
    assert all(len(b.record_ids) == bs for b in batches[:-1])


def test_synthetic_zero_noise_shares_features():
    data = gen_synthetic(SyntheticSpec(n_classes=3, samples_per_class=4, feature_dim=8, noise_sigma=0.0,
                                       test_per_class=2), 0)
    for c in range(3):
        refs = [k for k, v in data.labels.items() if v == c]
        rows = data.features.rows(refs)
        assert np.all(rows == rows[0])


def test_synthetic_two_class_separation():
    data = gen_synthetic(SyntheticSpec(n_classes=2, samples_per_class=30, feature_dim=16, noise_sigma=0.05,
                                       test_per_class=0), 3)
    x = data.features.matrix
    y = np.array([data.labels[i] for i in data.features.ids])
    sims = x @ x.T
    same = sims[np.equal.outer(y, y) & ~np.eye(len(y), dtype=bool)]
    cross = sims[~np.equal.outer(y, y)]
    assert same.min() > cross.max()
    assert abs(data.class_means[0] @ data.class_means[1]) < 1e-12


def test_synthetic_determinism_and_layout():
    spec = SyntheticSpec(n_classes=4, samples_per_class=5, feature_dim=6, test_per_class=3, n_rewrites=4)
    a, b = gen_synthetic(spec, 9), gen_synthetic(spec, 9)
    assert a.train == b.train and a.test == b.test and a.test_shifted == b.test_shifted
    np.testing.assert_array_equal(a.features.matrix, b.features.matrix)
    assert len(a.train) == 20 and len(a.test) == 12 and all(r.n_rewrites == 4 for r in a.train)
    np.testing.assert_allclose(np.linalg.norm(a.features.matrix, axis=1), 1, atol=1e-6)
    for r in a.test:
        name = a.class_names[a.labels[r.image_ref]]
        assert r.captions[0] in [t.replace("{class}", name) for t in spec.caption_templates]
    for r in a.test_shifted:
        name = a.class_names[a.labels[r.image_ref]]
        assert r.captions[0] in [t.replace("{class}", name) for t in spec.paraphrase_templates]
    assert gen_synthetic(spec, 10).features.matrix.tolist() != a.features.matrix.tolist()


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(n_classes=1)
    with pytest.raises(ConfigError):
        SyntheticSpec(caption_templates=("a {class}",), paraphrase_templates=("a {class}",))
    with pytest.raises(ConfigError):
        SyntheticSpec(paraphrase_templates=())
    with pytest.raises(ConfigError):
        SyntheticSpec(caption_templates=("no slot",))
    with pytest.raises(ConfigError):
        SyntheticSpec(noise_sigma=-1)
