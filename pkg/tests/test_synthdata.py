import json
import math

import numpy as np
import pytest

from sci_reid.errors import BlobLengthError, ContractError, ManifestError, VersionMismatchError
from sci_reid.synthdata import (
    BLOB_NAME,
    MANIFEST_NAME,
    SynthConfig,
    blob_image_count,
    generate,
    load,
    pk_sample,
    save,
)


@pytest.fixture(scope="module")
def default_ds():
    return generate(SynthConfig())


def test_default_counts_match_recount(default_ds, tmp_path):
    assert len(default_ds) == 8 * 3 * 3 * 4 == 288
    c = default_ds.counts()
    assert (c["pids"], c["clothes"], c["cameras"]) == (8, 24, 3)
    assert c["train"] + c["query"] + c["gallery"] == 288
    save(default_ds, tmp_path)
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert manifest["num_images"] == len(manifest["samples"]) == 288
    assert blob_image_count(tmp_path) == 288


def test_generation_is_deterministic(default_ds):
    again = generate(SynthConfig())
    assert again == default_ds
    assert again.images.tobytes() == default_ds.images.tobytes()
    assert generate(SynthConfig(seed=1)) != default_ds


def test_degenerate_factors_give_identical_images():
    ds = generate(SynthConfig(noise_sigma=0.0, clo_signal_strength=0.0, seed=3))
    for pid in range(8):
        for cam in range(3):
            sel = ds.images[(ds.pids == pid) & (ds.camera_ids == cam)]
            assert all(np.array_equal(sel[0], im) for im in sel[1:])


def test_split_hygiene_and_presets():
    for preset, outfits in (("ltcc", 3), ("prcc", 2)):
        ds = generate(SynthConfig(preset=preset, outfits_per_pid=outfits))
        train = set(ds.pids[ds.splits == "train"].tolist())
        test = set(ds.pids[ds.splits != "train"].tolist())
        assert train and test and not (train & test)
    prcc = generate(SynthConfig(preset="prcc", outfits_per_pid=2))
    for pid in set(prcc.pids.tolist()):
        outfit_by_cam = {int(c): set(prcc.clothes_ids[(prcc.pids == pid) & (prcc.camera_ids == c)].tolist())
                         for c in range(3)}
        assert outfit_by_cam[0] == outfit_by_cam[1] != outfit_by_cam[2]


@pytest.mark.parametrize("bad", [
    {"num_pids": 0}, {"noise_sigma": -1.0}, {"id_signal_strength": 1.5},
    {"num_train_pids": 8}, {"preset": "market"}, {"preset": "prcc"},
])
def test_invalid_config_rejected(bad):
    with pytest.raises(ContractError):
        generate(SynthConfig(**bad))


# -- separability ---------------------------------------------------------------------------------

def _cloth_changing_nn(cfg):
    """Pixel nearest neighbour under the cloth-changing mask, after removing the per-image
    channel means (which cancels the constant camera tint). Returns (hits, queries, chance)."""
    ds = generate(cfg)
    q, g = ds.subset("query"), ds.subset("gallery")

    def flat(x):
        x = x.astype(np.float64)
        return (x - x.mean(axis=(1, 2), keepdims=True)).reshape(len(x), -1)

    Q, G = flat(q.images), flat(g.images)
    hits, chance = 0, 0.0
    for i in range(len(Q)):
        same = g.pids == q.pids[i]
        valid = ~(same & ((g.camera_ids == q.camera_ids[i]) | (g.clothes_ids == q.clothes_ids[i])))
        d = ((G - Q[i]) ** 2).sum(axis=1)
        d[~valid] = np.inf
        hits += int(g.pids[np.argmin(d)] == q.pids[i])
        chance += (same & valid).sum() / valid.sum()
    return hits, len(Q), chance / len(Q)


def test_identity_signal_is_separable():
    hits, n, _ = _cloth_changing_nn(SynthConfig(id_signal_strength=1.0, clo_signal_strength=0.0, noise_sigma=0.05))
    assert hits == n


@pytest.mark.slow
def test_clothing_only_signal_is_at_chance():
    # queries within one seed share outfit patterns, so pool seeds for an honest binomial count
    hits = n = 0
    chance = 0.0
    for seed in range(10):
        h, k, p = _cloth_changing_nn(SynthConfig(id_signal_strength=0.0, clo_signal_strength=1.0, seed=seed))
        hits, n, chance = hits + h, n + k, chance + p * k
    p = chance / n
    assert abs(hits / n - p) <= 3 * math.sqrt(p * (1 - p) / n)


# -- PK sampling ------------------------------------------------------------------------------------

def test_pk_sample_shapes():
    labels = np.repeat(np.arange(6), 5)
    one = pk_sample(labels, 1, 1, np.random.default_rng(0))
    assert one.indices.shape == (1,)
    batch = pk_sample(labels, 4, 3, np.random.default_rng(0))
    _, counts = np.unique(labels[batch.indices], return_counts=True)
    assert sorted(counts.tolist()) == [3, 3, 3, 3]
    again = pk_sample(labels, 4, 3, np.random.default_rng(0))
    assert np.array_equal(batch.indices, again.indices)
    with pytest.raises(ContractError):
        pk_sample(labels, 7, 1, np.random.default_rng(0))


def test_pk_sample_on_dataset_uses_train_split(default_ds):
    idx = pk_sample(default_ds, 4, 4, np.random.default_rng(1)).indices
    assert np.all(default_ds.splits[idx] == "train")


def test_pk_identity_frequency_is_uniform():
    labels = np.repeat(np.arange(8), 6)
    rng = np.random.default_rng(123)
    draws, P = 10_000, 3
    freq = np.zeros(8)
    for _ in range(draws):
        freq[np.unique(labels[pk_sample(labels, P, 2, rng).indices])] += 1
    p = P / 8
    sigma = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(freq - draws * p) <= 3 * sigma)


# -- persistence ----------------------------------------------------------------------------------

def test_round_trip_bit_exact(default_ds, tmp_path):
    save(default_ds, tmp_path)
    assert load(tmp_path) == default_ds


def test_truncated_blob(default_ds, tmp_path):
    save(default_ds, tmp_path)
    blob = tmp_path / BLOB_NAME
    blob.write_bytes(blob.read_bytes()[:-7])
    with pytest.raises(BlobLengthError):
        load(tmp_path)


def test_manifest_errors_are_distinct(default_ds, tmp_path):
    save(default_ds, tmp_path)
    path = tmp_path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    path.write_text(json.dumps(dict(manifest, version=99)))
    with pytest.raises(VersionMismatchError):
        load(tmp_path)
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        load(tmp_path)
    del manifest["samples"][0]["pid"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError):
        load(tmp_path)
    path.unlink()
    with pytest.raises(ManifestError):
        load(tmp_path)
