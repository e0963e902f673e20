import json

import numpy as np
import pytest

from hct.errors import ConfigError, FormatError
from hct.synthdata import (CONFIDENCE_THRESHOLD, class_frequencies, generate_clip, generate_dataset, manifest_path,
                           read_dataset, sample_taxonomy, write_dataset)


@pytest.fixture(scope="module")
def taxonomy():
    return sample_taxonomy(0)


@pytest.fixture(scope="module")
def small_ds(taxonomy):
    return generate_dataset(taxonomy, 3, 40, 20, clips_per_video=8)


def test_default_taxonomy_shape(taxonomy):
    assert taxonomy.sizes == (4, 10, 49, 13)
    assert set(taxonomy.step_parent) == {0, 1, 2, 3}
    assert len(taxonomy.step_parent) == 10
    na = (taxonomy.step_actions > 0).sum(1)
    ni = (taxonomy.step_instruments > 0).sum(1)
    assert na.min() >= 2 and na.max() <= 6
    assert ni.min() >= 1 and ni.max() <= 3
    np.testing.assert_allclose(taxonomy.step_actions.sum(1), 1.0)
    assert (taxonomy.step_actions > 0).any(0).all()
    assert (taxonomy.step_instruments > 0).any(0).all()


def test_taxonomy_determinism_and_trivial_case():
    assert sample_taxonomy(5) == sample_taxonomy(5)
    assert sample_taxonomy(5) != sample_taxonomy(6)
    t = sample_taxonomy(0, (1, 1, 1, 1))
    assert t.step_parent == [0]
    assert t.step_actions.tolist() == [[1.0]] and t.step_instruments.tolist() == [[1.0]]
    with pytest.raises(ConfigError):
        sample_taxonomy(0, (4, 3, 5, 5))


def test_clip_invariants(taxonomy):
    for seed in range(40):
        s = generate_clip(taxonomy, seed)
        assert s.clip.shape == (16, 32, 32, 3) and s.clip.dtype == np.float32
        assert taxonomy.step_parent[s.step] == s.phase
        assert (taxonomy.step_actions[s.step][s.actions.astype(bool)] > 0).all()
        assert (taxonomy.step_instruments[s.step][s.gt_classes] > 0).all()
        assert (s.box_conf >= CONFIDENCE_THRESHOLD).all() and (s.box_conf <= 1).all()
        if len(s.boxes):
            assert (s.boxes[:, 0] >= 0).all() and (s.boxes[:, 2] <= 32).all()
            assert (s.boxes[:, 1] >= 0).all() and (s.boxes[:, 3] <= 32).all()
            assert (s.boxes[:, 0] < s.boxes[:, 2]).all() and (s.boxes[:, 1] < s.boxes[:, 3]).all()
        assert s.box_features.shape == (len(s.boxes), 256)
        assert set(s.box_actions.tolist()) <= set(np.flatnonzero(s.actions).tolist())


def test_noise_free_clips_are_bit_identical(taxonomy):
    a = generate_clip(taxonomy, 11, noise=0.0, step=4)
    b = generate_clip(taxonomy, 11, noise=0.0, step=4)
    assert a.equals(b)
    assert not a.equals(generate_clip(taxonomy, 12, noise=0.0, step=4))


def test_noise_free_linear_probe_separates_phases(taxonomy):
    ds = generate_dataset(taxonomy, 1, 200, 0, noise=0.0)
    X = np.stack([s.clip.reshape(-1) for s in ds.samples]).astype(np.float64)
    X = np.hstack([X, np.ones((len(X), 1))])
    y = np.array([s.phase for s in ds.samples])
    Y = np.eye(4)[y]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    assert ((X @ W).argmax(1) == y).mean() == 1.0


def test_split_hygiene_and_coverage(taxonomy):
    ds = generate_dataset(taxonomy, 0, 512, 128)
    train_v = {s.video_id for s in ds.split("train")}
    test_v = {s.video_id for s in ds.split("test")}
    assert not train_v & test_v
    assert len(ds.split("train")) == 512 and len(ds.split("test")) == 128
    freq = class_frequencies(ds.split("train"), taxonomy)
    assert min(freq["phase"]) >= 5 and min(freq["step"]) >= 5


def test_manifest_frequencies_match_recount(small_ds, taxonomy):
    for split in ("train", "test"):
        samples = small_ds.split(split)
        recount = {"phase": [0] * 4, "step": [0] * 10, "action": [0] * 49, "instrument": [0] * 13}
        for s in samples:
            recount["phase"][s.phase] += 1
            recount["step"][s.step] += 1
            for a in np.flatnonzero(s.actions):
                recount["action"][a] += 1
            for c in s.box_classes:
                recount["instrument"][c] += 1
        assert small_ds.manifest.frequencies[split] == recount


def test_dataset_is_pure_function_of_seeds(taxonomy, small_ds):
    again = generate_dataset(taxonomy, 3, 40, 20, clips_per_video=8)
    assert all(a.equals(b) for a, b in zip(small_ds.samples, again.samples))


def test_round_trip_bit_exact(tmp_path, small_ds):
    path = tmp_path / "d.hctd"
    write_dataset(path, small_ds)
    back = read_dataset(path)
    assert back.taxonomy == small_ds.taxonomy
    assert len(back.samples) == len(small_ds.samples)
    assert all(a.equals(b) for a, b in zip(small_ds.samples, back.samples))
    write_dataset(tmp_path / "e.hctd", back)
    assert path.read_bytes() == (tmp_path / "e.hctd").read_bytes()
    meta = json.loads(manifest_path(path).read_text())
    assert meta["format"] == "HCTD" and meta["counts"] == {"train": 40, "test": 20}


def test_corruption_is_reported_with_offset(tmp_path, small_ds):
    path = tmp_path / "d.hctd"
    write_dataset(path, small_ds)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as e:
        read_dataset(path)
    assert e.value.offset == 0
    path.write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError) as e:
        read_dataset(path)
    assert e.value.offset == 4
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError) as e:
        read_dataset(path)
    assert 0 < e.value.offset < len(raw)


def test_label_flip_stays_within_phase(taxonomy):
    flipped = 0
    for seed in range(60):
        clean = generate_clip(taxonomy, seed, step=seed % 10)
        noisy = generate_clip(taxonomy, seed, step=seed % 10, label_flip=1.0)
        assert taxonomy.step_parent[noisy.step] == noisy.phase == clean.phase
        flipped += noisy.step != clean.step
    assert flipped > 0


def test_bad_step_rejected(taxonomy):
    with pytest.raises(ConfigError):
        generate_clip(taxonomy, 0, step=10)
