import struct

import numpy as np
import pytest

from hessalign.environments import (
    EnvironmentSet, EnvironmentSpec, IdxFormatError, build_cmnist, color_digits, correlation_shift_specs,
    generate_synthetic, label_shift_specs, load_environment_set, load_mnist_idx, save_environment_set,
)
from hessalign.model import Batch, one_hot


def bits(batch):
    x = batch.inputs
    return (x[:, 1] > x[:, 0]).astype(int), batch.class_index, (x[:, 3] > x[:, 2]).astype(int)


def test_perfect_color_gives_color_only_probe_full_accuracy():
    specs = [EnvironmentSpec("a", 500, label_noise=0.0, color_correlation=1.0, seed=1),
             EnvironmentSpec("b", 500, label_noise=0.0, color_correlation=1.0, seed=2)]
    es = generate_synthetic(specs, EnvironmentSpec("t", 100, seed=3))
    for _, b in es.train:
        u, y, v = bits(b)
        assert np.array_equal(v, y)


def test_probe_accuracies_on_large_samples():
    train, test = correlation_shift_specs(10_000, 10_000)
    es = generate_synthetic(train, test)
    u, y, v = bits(es.test[1])
    assert abs(np.mean(v == y) - 0.10) <= 0.02
    for _, b in es.train + [es.test]:
        u, y, _ = bits(b)
        assert abs(np.mean(u == y) - 0.75) <= 0.02


def test_empirical_color_correlation_matches_spec():
    train, test = correlation_shift_specs(10_000, 10_000)
    es = generate_synthetic(train, test, seed_offset=4)
    for spec, (_, b) in zip(train + [test], es.train + [es.test]):
        _, y, v = bits(b)
        assert abs(np.mean(v == y) - spec.color_correlation) <= 0.02


def test_label_shift_class_fractions():
    train, test = label_shift_specs(10_000, 10_000)
    es = generate_synthetic(train, test)
    for spec, (_, b) in zip(train, es.train):
        assert abs(np.mean(b.class_index == 0) - spec.class_balance) <= 0.01


def test_generation_is_deterministic_and_offset_sensitive():
    train, test = correlation_shift_specs(200, 300)
    a = generate_synthetic(train, test, seed_offset=5)
    b = generate_synthetic(train, test, seed_offset=5)
    c = generate_synthetic(train, test, seed_offset=6)
    assert all(np.array_equal(x.inputs, y.inputs) for (_, x), (_, y) in zip(a.train, b.train))
    assert not np.array_equal(a.train[0][1].inputs, c.train[0][1].inputs)


def test_runs_do_not_share_random_streams():
    # run k's second environment must not replay run k+1's first one
    train, test = correlation_shift_specs(500, 500)
    k0 = generate_synthetic(train, test, seed_offset=0)
    k1 = generate_synthetic(train, test, seed_offset=1)
    noise0 = k0.train[1][1].inputs.sum(axis=1)
    noise1 = k1.train[0][1].inputs.sum(axis=1)
    assert not np.allclose(noise0, noise1)


def test_inputs_are_noisy_two_hot():
    es = generate_synthetic(*correlation_shift_specs(100, 100))
    x = es.train[0][1].inputs
    assert x.shape == (100, 4)
    assert np.all(np.count_nonzero(x[:, :2], axis=1) == 1) and np.all(np.count_nonzero(x[:, 2:], axis=1) == 1)


@pytest.mark.parametrize("bad", [dict(n_samples=0), dict(label_noise=1.5), dict(color_correlation=-0.1), dict(class_balance=2.0)])
def test_spec_validation(bad):
    kw = dict(name="e", n_samples=10) | bad
    with pytest.raises(ValueError):
        EnvironmentSpec(**kw)


def test_set_requires_two_train_envs_and_consistent_shapes():
    train, test = correlation_shift_specs(10, 10)
    with pytest.raises(ValueError):
        generate_synthetic(train[:1], test)
    b4 = Batch(np.zeros((2, 4)), one_hot([0, 1], 2))
    b5 = Batch(np.zeros((2, 5)), one_hot([0, 1], 2))
    with pytest.raises(ValueError):
        EnvironmentSet([("a", b4), ("b", b5)], ("t", b4), {})


def test_dataset_json_round_trip(tmp_path):
    es = generate_synthetic(*correlation_shift_specs(50, 60), seed_offset=2)
    save_environment_set(tmp_path / "d.json", es, {"seed": 2})
    back = load_environment_set(tmp_path / "d.json")
    for (n1, b1), (n2, b2) in zip(es.train + [es.test], back.train + [back.test]):
        assert n1 == n2 and np.array_equal(b1.inputs, b2.inputs) and np.array_equal(b1.labels, b2.labels)


# ---------------------------------------------------------------------------
# IDX parsing and CMNIST construction


def write_idx(tmp_path, images, labels, image_magic=0x00000803, label_magic=0x00000801, extra=b""):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    n = len(images)
    ip.write_bytes(struct.pack(">IIII", image_magic, n, 28, 28) + images.astype(np.uint8).tobytes() + extra)
    lp.write_bytes(struct.pack(">II", label_magic, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes())
    return ip, lp


def fixture_digits(n, seed=0):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, (n, 28, 28)), r.integers(0, 10, n)


def test_idx_three_image_fixture(tmp_path):
    imgs, labs = fixture_digits(3)
    x, y = load_mnist_idx(*write_idx(tmp_path, imgs, labs))
    assert x.shape == (3, 28, 28)
    assert np.array_equal(x, imgs / 255.0) and np.array_equal(y, labs)
    assert x.min() >= 0 and x.max() <= 1


def test_idx_bad_magic_names_offset(tmp_path):
    imgs, labs = fixture_digits(3)
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_mnist_idx(*write_idx(tmp_path, imgs, labs, image_magic=0x00000802))


def test_idx_truncated_and_trailing(tmp_path):
    imgs, labs = fixture_digits(3)
    ip, lp = write_idx(tmp_path, imgs, labs)
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(IdxFormatError, match="truncated"):
        load_mnist_idx(ip, lp)
    ip, lp = write_idx(tmp_path, imgs, labs, extra=b"\x00")
    with pytest.raises(IdxFormatError, match="trailing"):
        load_mnist_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    imgs, labs = fixture_digits(3)
    with pytest.raises(IdxFormatError, match="count"):
        load_mnist_idx(*write_idx(tmp_path, imgs, labs[:2]))


def test_color_digits_zeroes_the_other_channel():
    imgs = np.random.default_rng(1).random((4, 28, 28))
    out = color_digits(imgs, np.array([0, 1, 1, 0])).reshape(4, 2, 14, 14)
    assert np.all(out[0, 1] == 0) and np.all(out[1, 0] == 0)
    assert np.allclose(out[0, 0], imgs[0].reshape(14, 2, 14, 2).mean(axis=(1, 3)))


def test_cmnist_binarisation_and_disjoint_partitions():
    digits, labels = fixture_digits(400, seed=3)
    digits = digits / 255.0
    train = [EnvironmentSpec("e1", 150, label_noise=0.0, color_correlation=1.0, seed=1),
             EnvironmentSpec("e2", 150, label_noise=0.0, color_correlation=1.0, seed=2)]
    test = EnvironmentSpec("t", 100, label_noise=0.0, seed=3)
    es = build_cmnist(digits, labels, train, test)
    assert es.input_dim == 392
    seen = []
    for _, b in es.train + [es.test]:
        pooled = b.inputs.reshape(-1, 2, 196).sum(axis=1)
        for row in pooled:
            seen.append(row.tobytes())
    assert len(set(seen)) == len(seen) == 400
    # noise-free: class 1 exactly when digit >= 5
    small = digits.reshape(400, 14, 2, 14, 2).mean(axis=(2, 4)).reshape(400, 196)
    lookup = {row.tobytes(): int(lab >= 5) for row, lab in zip(small, labels)}
    for _, b in es.train + [es.test]:
        pooled = b.inputs.reshape(-1, 2, 196).sum(axis=1)
        assert [lookup[r.tobytes()] for r in pooled] == list(b.class_index)


def test_cmnist_digit_examples_and_insufficient_samples():
    digits = np.zeros((2, 28, 28))
    labels = np.array([3, 7])
    train = [EnvironmentSpec("e1", 1, label_noise=0.0, seed=1), EnvironmentSpec("e2", 1, label_noise=0.0, seed=2)]
    with pytest.raises(ValueError, match="insufficient"):
        build_cmnist(digits, labels, train, EnvironmentSpec("t", 1, seed=3))
    es = build_cmnist(np.zeros((3, 28, 28)), np.array([3, 7, 3]), train, EnvironmentSpec("t", 1, label_noise=0.0, seed=3))
    got = sorted(int(b.class_index[0]) for _, b in es.train + [es.test])
    assert got == [0, 0, 1]
