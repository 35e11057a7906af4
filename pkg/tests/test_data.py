import json
from collections import Counter

import numpy as np
import pytest

from textinfomax.augment import AugmentPolicy
from textinfomax.data import (
    ManifestError,
    PairRecord,
    SynthSpec,
    batch_indices,
    generate_synthetic,
    label_matrix,
    load_manifest,
    make_batches,
    manifest_vocabulary,
    plugin_mutual_information,
    read_png,
    synthetic_text_encoder,
    synthetic_vocabulary,
    write_manifest,
    write_png,
)
from textinfomax.encoders import ConfigError, encode_text


def tiny_png(path, value):
    write_png(np.full((3, 4, 4), value), path)


def write_rows(tmp_path, rows):
    (tmp_path / "img").mkdir(exist_ok=True)
    for i, _ in enumerate(rows):
        tiny_png(tmp_path / "img" / f"{i}.png", i / 10)
    path = tmp_path / "m.jsonl"
    path.write_text("".join(json.dumps({"image": f"img/{i}.png", **r}) + "\n" for i, r in enumerate(rows)))
    return path


VOCAB = {"<unk>": 0, "red": 1, "circle": 2, "blue": 3}


def test_manifest_order(tmp_path):
    path = write_rows(tmp_path, [{"caption": "red circle"}, {"caption": "blue"}, {"caption": "zebra red"}])
    recs = load_manifest(path, VOCAB)
    assert [r.tokens for r in recs] == [[1, 2], [3], [0, 1]]
    assert recs[1].pixels()[0, 0, 0] == pytest.approx(0.1, abs=1 / 255)


def test_manifest_rejects_empty_caption(tmp_path, caplog):
    path = write_rows(tmp_path, [{"caption": "red"}, {"caption": "  ,. "}, {"caption": "blue"}])
    recs = load_manifest(path, VOCAB)
    assert [r.caption for r in recs] == ["red", "blue"]
    assert "empty caption" in caplog.text


def test_manifest_aborts_when_too_many_rejected(tmp_path):
    path = write_rows(tmp_path, [{"caption": ""}, {"caption": ""}, {"caption": "blue"}])
    with pytest.raises(ManifestError):
        load_manifest(path, VOCAB)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "missing.jsonl", VOCAB)
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"image": "nope.png", "caption": "red"}) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(path, VOCAB)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    path.write_text(json.dumps({"image": "bad.png", "caption": "red"}) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(path, VOCAB)


def test_labels_are_kept(tmp_path):
    path = write_rows(tmp_path, [{"caption": "red", "labels": [0, 2]}, {"caption": "blue"}])
    recs = load_manifest(path, VOCAB)
    assert recs[0].labels == [0, 2] and recs[1].labels is None


def test_record_invariants():
    with pytest.raises(ManifestError):
        PairRecord(np.zeros((3, 4, 4)), [])
    with pytest.raises(ManifestError):
        PairRecord(np.zeros((3, 4, 4)), [1], labels=[])


def test_round_trip(tmp_path):
    records = generate_synthetic(SynthSpec(n_classes=4, n_samples=12, image_size=16, seed=3))
    manifest = write_manifest(records, tmp_path)
    words = manifest_vocabulary(manifest)
    assert set(words) <= set(synthetic_vocabulary())
    vocab = {w: i + 1 for i, w in enumerate(synthetic_vocabulary())}
    loaded = load_manifest(manifest, vocab)
    assert [r.tokens for r in loaded] == [r.tokens for r in records]
    assert [r.labels for r in loaded] == [r.labels for r in records]
    for a, b in zip(loaded, records):
        np.testing.assert_array_equal(a.pixels(), b.pixels())


def test_png_round_trip_on_byte_grid(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 5, 5)) / 255.0
    write_png(img, tmp_path / "x.png")
    np.testing.assert_array_equal(read_png(tmp_path / "x.png"), img)


# batching ----------------------------------------------------------------------

def test_drop_last():
    assert [len(b) for b in batch_indices(10, 4, seed=0, epoch=0)] == [4, 4]
    assert [len(b) for b in batch_indices(9, 4, seed=0, epoch=0)] == [4, 4]
    assert [len(b) for b in batch_indices(8, 4, seed=0, epoch=0)] == [4, 4]
    assert [len(b) for b in batch_indices(2, 2, seed=0, epoch=0)] == [2]


def test_batch_determinism():
    a = batch_indices(50, 8, seed=5, epoch=3)
    b = batch_indices(50, 8, seed=5, epoch=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = batch_indices(50, 8, seed=5, epoch=4)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


@pytest.mark.parametrize("n,bs", [(10, 4), (33, 5), (64, 8), (7, 7)])
def test_every_surviving_record_once(n, bs):
    flat = np.concatenate(batch_indices(n, bs, seed=1, epoch=0))
    assert len(set(flat.tolist())) == len(flat) == (n // bs) * bs
    assert set(flat.tolist()) <= set(range(n))


def test_batching_errors():
    with pytest.raises(ConfigError):
        batch_indices(1, 2, 0, 0)
    with pytest.raises(ConfigError):
        batch_indices(10, 1, 0, 0)


def test_batches_keep_rows_aligned():
    records = generate_synthetic(SynthSpec(n_classes=3, n_samples=12, image_size=8, seed=1))
    te = synthetic_text_encoder(dim=5, seed=0)
    for batch in make_batches(records, 4, seed=2, epoch=1, policy=None, text_encoder=te):
        for row, i in enumerate(batch.indices):
            np.testing.assert_array_equal(batch.view1[row], records[i].pixels())
            np.testing.assert_allclose(batch.text[row], encode_text(te, records[i].tokens), atol=1e-15)
            assert batch.labels[row] == records[i].labels


def test_batches_with_augmentation_are_replayable():
    records = generate_synthetic(SynthSpec(n_classes=3, n_samples=8, image_size=8, seed=1))
    run = lambda: list(make_batches(records, 4, seed=0, epoch=2, policy=AugmentPolicy(rng_seed=1)))
    for a, b in zip(run(), run()):
        assert a.view1.tobytes() == b.view1.tobytes() and a.view2.tobytes() == b.view2.tobytes()
        assert not np.array_equal(a.view1, a.view2)


# synthetic corpus -----------------------------------------------------------------

def test_synthetic_is_deterministic():
    spec = SynthSpec(n_classes=5, n_samples=30, image_size=16, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert all(x.tokens == y.tokens and x.labels == y.labels and np.array_equal(x.image, y.image)
               for x, y in zip(a, b))


def test_full_overlap_captions_follow_class():
    records = generate_synthetic(SynthSpec(n_classes=6, n_samples=60, image_size=16, overlap=1.0, seed=0))
    by_class = {}
    for r in records:
        by_class.setdefault(r.labels[0], set()).add(tuple(r.tokens))
    assert all(len(caps) == 1 for caps in by_class.values())
    assert len({next(iter(c)) for c in by_class.values()}) == 6


def test_zero_overlap_has_no_information():
    records = generate_synthetic(SynthSpec(n_samples=5000, image_size=8, overlap=0.0, seed=0))
    tokens = [t for r in records for t in r.tokens]
    labels = [r.labels[0] for r in records for _ in r.tokens]
    assert plugin_mutual_information(tokens, labels) < 0.01


def test_high_overlap_has_information():
    records = generate_synthetic(SynthSpec(n_samples=1000, image_size=8, overlap=0.9, seed=0))
    tokens = [t for r in records for t in r.tokens]
    labels = [r.labels[0] for r in records for _ in r.tokens]
    assert plugin_mutual_information(tokens, labels) > 0.5


def test_label_balance():
    spec = SynthSpec(n_classes=7, n_samples=1000, image_size=8, seed=2)
    counts = Counter(r.labels[0] for r in generate_synthetic(spec))
    target = spec.n_samples / spec.n_classes
    assert len(counts) == 7
    assert all(abs(c - target) <= 0.1 * target for c in counts.values())


def test_capacity_error():
    with pytest.raises(ConfigError):
        generate_synthetic(SynthSpec(n_classes=55))


def test_images_in_range_and_shaped():
    for r in generate_synthetic(SynthSpec(n_classes=3, n_samples=6, image_size=32, seed=0)):
        assert r.image.shape == (3, 32, 32)
        assert 0.0 <= r.image.min() and r.image.max() <= 1.0


def test_mutual_information_oracle():
    assert plugin_mutual_information([0, 1, 0, 1], [0, 1, 0, 1]) == pytest.approx(np.log(2), abs=1e-12)
    assert plugin_mutual_information([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-12)


def test_label_matrix():
    recs = [PairRecord(np.zeros((3, 2, 2)), [1], labels=[0, 2]), PairRecord(np.zeros((3, 2, 2)), [1], labels=[1])]
    np.testing.assert_array_equal(label_matrix(recs, 3), [[1, 0, 1], [0, 1, 0]])
