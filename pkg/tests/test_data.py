import hashlib

import numpy as np
import pytest

from ssl_lab import data as D

SMALL = D.DatasetSpec(train_per_class=12, test_per_class=4, background_train=20, background_test=6, seed=3)


@pytest.fixture(scope="module")
def small():
    return D.generate(SMALL)


def test_class_layout(small):
    assert small.num_classes == 14
    assert small.class_names[:9] == [f"distinct_{i}" for i in range(9)]
    assert small.class_names[9:13] == [f"cardiac_{i}" for i in range(4)]
    assert small.class_names[-1] == "background"
    assert small.background_index == 13
    assert D.generate(D.DatasetSpec(include_background=False, train_per_class=2, test_per_class=1)).num_classes == 13


def test_counts_match_spec(small):
    train, test = small.train.class_counts(), small.test.class_counts()
    for name in small.class_names[:-1]:
        assert (train[name], test[name]) == (12, 4)
    assert (train["background"], test["background"]) == (20, 6)
    assert train["background"] > max(v for k, v in train.items() if k != "background")


def test_per_class_overrides():
    spec = D.DatasetSpec(train_per_class=5, test_per_class=2, background_train=30, background_test=3,
                         images_per_class={"cardiac_2": (25, 4)})
    ds = D.generate(spec)
    assert ds.train.class_counts()["cardiac_2"] == 25
    assert ds.test.class_counts()["cardiac_2"] == 4


def test_background_must_dominate():
    with pytest.raises(ValueError, match="background"):
        D.DatasetSpec(train_per_class=50, background_train=40)


def test_generation_is_deterministic(small):
    again = D.generate(SMALL)
    assert again.images.tobytes() == small.images.tobytes()
    assert D.generate(D.DatasetSpec(**{**SMALL.__dict__, "seed": 4})).images.tobytes() != small.images.tobytes()


def test_pixels_in_unit_range_and_quantised(small):
    assert small.images.min() >= 0 and small.images.max() <= 1
    np.testing.assert_allclose(small.images * 255, np.round(small.images * 255), atol=1e-3)


def test_train_and_test_are_disjoint(small):
    train = {hashlib.sha1(im.tobytes()).hexdigest() for im in small.train.images}
    test = {hashlib.sha1(im.tobytes()).hexdigest() for im in small.test.images}
    assert not train & test


def test_subset_labels_partition(small):
    lab, unl = D.subset_labels(small, 5, seed=1)
    assert len(lab) == 5 * 14
    assert set(lab.class_counts().values()) == {5}
    train_ids = set(small.train.ids.tolist())
    assert set(lab.ids.tolist()).isdisjoint(unl.ids.tolist())
    assert set(lab.ids.tolist()) | set(unl.ids.tolist()) == train_ids


def test_subset_labels_budget_errors(small):
    with pytest.raises(ValueError, match="exceeds"):
        D.subset_labels(small, 13, seed=0)
    with pytest.raises(ValueError):
        D.subset_labels(small, 0, seed=0)


def test_without_background(small):
    nb = small.without_background()
    assert nb.num_classes == 13
    assert "background" not in nb.class_names
    assert len(nb) == len(small) - 26


def test_save_load_round_trip(tmp_path, small):
    D.save(tmp_path, small)
    loaded = D.load(tmp_path)
    assert loaded == small
    assert (tmp_path / "train" / "cardiac_1" / "img_00000.pgm").exists()
    header = (tmp_path / "manifest.csv").read_text().splitlines()[:2]
    assert header[0] == "# classes=" + ";".join(small.class_names)
    assert header[1] == "path,label,split"


def test_load_names_missing_file(tmp_path, small):
    D.save(tmp_path, small)
    victim = tmp_path / "test" / "distinct_3" / "img_00002.pgm"
    victim.unlink()
    with pytest.raises(D.DatasetFormatError, match="img_00002.pgm"):
        D.load(tmp_path)


def test_load_rejects_label_folder_mismatch(tmp_path, small):
    D.save(tmp_path, small)
    manifest = tmp_path / "manifest.csv"
    lines = manifest.read_text().splitlines()
    path, label, split = lines[2].split(",")
    lines[2] = f"{path},{int(label) + 1},{split}"
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(D.DatasetFormatError, match="folder"):
        D.load(tmp_path)


def test_load_rejects_bad_columns(tmp_path, small):
    D.save(tmp_path, small)
    manifest = tmp_path / "manifest.csv"
    manifest.write_text(manifest.read_text().replace("path,label,split", "file,label,split"))
    with pytest.raises(D.DatasetFormatError, match="columns"):
        D.load(tmp_path)


def test_external_dataset_without_header(tmp_path):
    rng = np.random.default_rng(0)
    names = [f"distinct_{i}" for i in range(9)] + [f"cardiac_{i}" for i in range(4)] + ["background"]
    rows = ["path,label,split"]
    for label, name in enumerate(names):
        for split in ("train", "test"):
            rel = f"{split}/{name}/img_00000.pgm"
            (tmp_path / split / name).mkdir(parents=True, exist_ok=True)
            D.write_pgm(tmp_path / rel, rng.random((16, 16)))
            rows.append(f"{rel},{label},{split}")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    ds = D.load(tmp_path)
    assert ds.class_names == names
    assert len(ds) == 28


def test_pgm_quantisation_error(tmp_path):
    img = np.random.default_rng(1).random((7, 5))
    D.write_pgm(tmp_path / "x.pgm", img)
    back = D.read_pgm(tmp_path / "x.pgm")
    assert back.shape == (7, 5)
    assert np.abs(back - img).max() <= 1 / 255 / 2 + 1e-7


def test_content_hash_tracks_pixels(small):
    test = small.test
    h = test.content_hash()
    assert test.select(np.ones(len(test), bool)).content_hash() == h
    altered = test.select(np.ones(len(test), bool))
    altered.images = altered.images.copy()
    altered.images[0, 0, 0] = 1.0 - altered.images[0, 0, 0]
    assert altered.content_hash() != h


def test_linear_probe_separability_gap():
    """Raw-pixel logistic regression: distinct classes separable, the cluster is not."""
    sklearn = pytest.importorskip("sklearn.linear_model")
    ds = D.generate(D.DatasetSpec()).without_background()
    train, test = ds.train, ds.test
    flat = lambda d: d.images.reshape(len(d), -1)  # noqa: E731
    clf = sklearn.LogisticRegression(C=0.003, max_iter=3000).fit(flat(train), train.labels)
    pred = clf.predict(flat(test))
    distinct = np.mean([np.mean(pred[test.labels == c] == c) for c in ds.distinct_indices])
    cl = ds.cluster_indices
    m_tr, m_te = np.isin(train.labels, cl), np.isin(test.labels, cl)
    within = sklearn.LogisticRegression(C=0.003, max_iter=3000).fit(flat(train)[m_tr], train.labels[m_tr])
    cluster = within.score(flat(test)[m_te], test.labels[m_te])
    assert distinct >= 0.90
    assert cluster <= 0.60
