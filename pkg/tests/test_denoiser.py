import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rotprune import linalg
from rotprune.autograd import Tape, backward
from rotprune.denoiser import (LINEAR_CASES, LayerBundle, LinearEntry, RotationPair, StepInfo,
                               TrainConfig, build_loss, bundle_entropy, group_entropy,
                               make_block_diagonal, max_loss, train_rotations)
from rotprune.errors import NonFiniteError, ShapeError
from rotprune.importance import Metric, RotationCase
from rotprune.toy import gaussian_bundle


def small_bundle(seed=0, metric=Metric.OBD, **kw):
    args = dict(hidden=16, n_heads=2, ffn_dim=24, samples=64, seed=seed, metric=metric)
    args.update(kw)
    return gaussian_bundle(**args)


@pytest.mark.parametrize("scores, expected", [
    ([[1.0, 1.0, 1.0, 1.0]], math.log(4)),
    ([[7.0, 0.0, 0.0]], 0.0),
    ([[2.0, 2.0, 0.0, 0.0]], math.log(2)),
])
def test_group_entropy_examples(scores, expected):
    groups, total = group_entropy(np.array(scores), "rows", 0.0)
    assert abs(total - expected) <= 1e-12
    assert groups["rows"].shape == (1,)


def test_group_entropy_two_sided_sums_both_passes():
    s = np.array([[1.0, 1.0], [1.0, 1.0]])
    groups, total = group_entropy(s, "rows-and-columns", 0.0)
    assert set(groups) == {"rows", "columns"}
    assert total == pytest.approx(4 * math.log(2), abs=1e-12)


def test_group_entropy_rejects_negative():
    with pytest.raises(ValueError):
        group_entropy(np.array([[1.0, -1.0]]), "rows")


def test_all_zero_group_is_uniform():
    groups, _ = group_entropy(np.zeros((1, 5)), "rows", 1e-12)
    assert groups["rows"][0] == pytest.approx(math.log(5), abs=1e-12)
    groups, _ = group_entropy(np.zeros((1, 5)), "rows", 0.0)
    assert groups["rows"][0] == pytest.approx(math.log(5), abs=1e-12)


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 40))
def test_entropy_permutation_invariant_bitwise(seed, n):
    r = np.random.default_rng(seed)
    s = r.exponential(size=(3, n)) * (r.random((3, n)) < 0.7)
    perm = r.permutation(n)
    assert np.array_equal(group_entropy(s, "rows", 0.0)[0]["rows"],
                          group_entropy(s[:, perm], "rows", 0.0)[0]["rows"])


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 10), n=st.integers(1, 10),
       layout=st.sampled_from(["rows", "columns", "rows-and-columns"]))
def test_entropy_bounds(seed, m, n, layout):
    r = np.random.default_rng(seed)
    s = r.exponential(size=(m, n)) ** 3
    groups, _ = group_entropy(s, layout)
    sizes = {"rows": n, "columns": m}
    for k, h in groups.items():
        assert np.all(h >= -1e-15) and np.all(h <= math.log(sizes[k]) + 1e-12)


def test_make_block_diagonal_examples(rng):
    assert np.array_equal(make_block_diagonal([np.eye(2), np.eye(2)]), np.eye(4))
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    q = make_block_diagonal([swap, np.eye(2)])
    assert linalg.orthogonality_error(q) == 0.0
    q = make_block_diagonal([linalg.random_orthogonal(3, rng), linalg.random_orthogonal(5, rng)])
    assert q.shape == (8, 8) and linalg.orthogonality_error(q) <= 1e-10
    with pytest.raises(ShapeError):
        make_block_diagonal([np.ones((2, 3))])


def test_bundle_requires_seven_linears(rng):
    e = LinearEntry("q", np.ones((2, 2)), np.eye(2), RotationCase.RIGHT)
    with pytest.raises(ShapeError):
        LayerBundle([e])


def test_bundle_rejects_wrong_case():
    b = small_bundle()
    entries = list(b.linears)
    entries[0] = LinearEntry("q", entries[0].weight, entries[0].hessian, RotationCase.LEFT)
    with pytest.raises(ShapeError):
        LayerBundle(entries)


def test_bundle_cases_are_fixed():
    assert LINEAR_CASES == {
        "q": RotationCase.RIGHT, "k": RotationCase.RIGHT, "v": RotationCase.TWO_SIDED_V,
        "o": RotationCase.TWO_SIDED_O, "gate": RotationCase.RIGHT, "up": RotationCase.RIGHT,
        "down": RotationCase.LEFT,
    }


@pytest.mark.parametrize("metric", list(Metric))
def test_identity_loss_equals_unrotated_entropy(metric):
    b = small_bundle(metric=metric)
    pair = RotationPair.identity(b.hidden, b.n_heads)
    tape = Tape()
    loss = build_loss(b, pair, tape)
    assert float(loss.value[0, 0]) == bundle_entropy(b)


@given(seed=st.integers(0, 2**32 - 1))
def test_loss_within_bounds_for_random_pairs(seed):
    r = np.random.default_rng(seed)
    b = small_bundle(seed=seed % 7)
    pair = RotationPair([r.standard_normal((16, 16))], [r.standard_normal((8, 8)) for _ in range(2)])
    value = float(build_loss(b, pair, Tape()).value[0, 0])
    assert 0.0 <= value <= max_loss(b)


@pytest.mark.parametrize("metric", [Metric.OBD, Metric.SPARSEGPT])
def test_loss_gradient_finite_differences(metric):
    b = small_bundle(metric=metric)
    r = np.random.default_rng(3)
    a2 = [np.eye(8) + 0.3 * r.standard_normal((8, 8)) for _ in range(2)]

    a1 = np.eye(16) + 0.3 * r.standard_normal((16, 16))
    tape = Tape()
    loss = build_loss(b, RotationPair([a1], a2), tape)
    g = backward(tape, loss)[tape.leaves[0]]
    h = 1e-5
    worst = 0.0
    for idx in [(0, 0), (3, 7), (15, 2), (8, 8), (11, 14)]:
        p, m = a1.copy(), a1.copy()
        p[idx] += h
        m[idx] -= h
        fp = float(build_loss(b, RotationPair([p], a2), Tape()).value[0, 0])
        fm = float(build_loss(b, RotationPair([m], a2), Tape()).value[0, 0])
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g[idx] - fd) / max(abs(fd), 1e-8))
    assert worst <= 1e-4


def test_steps_zero_gives_identity():
    b = small_bundle()
    pair, traj = train_rotations(b, TrainConfig(steps=0))
    assert np.array_equal(pair.q1, np.eye(16)) and np.array_equal(pair.q2, np.eye(16))
    assert traj.losses == [bundle_entropy(b)]


def test_training_reduces_loss_and_keeps_orthogonality():
    b = gaussian_bundle(hidden=32, n_heads=4, ffn_dim=86, samples=128, seed=1)
    seen = []
    pair, traj = train_rotations(b, TrainConfig(steps=200), on_step=seen.append)
    assert traj.losses[-1] < 0.95 * traj.losses[0]
    assert all(isinstance(s, StepInfo) and s.orthogonality <= 1e-8 for s in seen)
    assert len(traj) == 201
    assert bundle_entropy(b, pair) == pytest.approx(traj.losses[-1], rel=1e-12)


def test_training_leaves_bundle_untouched():
    b = small_bundle()
    before = [(e.weight.copy(), e.hessian.copy()) for e in b.linears]
    train_rotations(b, TrainConfig(steps=5))
    for (w, h), e in zip(before, b.linears):
        assert np.array_equal(w, e.weight) and np.array_equal(h, e.hessian)


def test_training_is_deterministic():
    b = small_bundle()
    p1, t1 = train_rotations(b, TrainConfig(steps=15))
    p2, t2 = train_rotations(b, TrainConfig(steps=15))
    assert t1.losses == t2.losses and np.array_equal(p1.q1, p2.q1)


def test_monotone_trend_over_seeds():
    wins = 0
    for seed in range(20):
        _, traj = train_rotations(small_bundle(seed=seed, ffn_dim=44), TrainConfig(steps=200))
        l = traj.losses
        wins += min(l[100:201]) < min(l[:101])
    assert wins >= 19


def test_unit_blocks_stay_identity():
    b = gaussian_bundle(hidden=8, n_heads=8, ffn_dim=16, samples=32, seed=0)
    pair, traj = train_rotations(b, TrainConfig(steps=10, block_count=8))
    assert len(set(traj.losses)) == 1
    assert np.array_equal(pair.q1, np.eye(8)) and np.array_equal(pair.q2, np.eye(8))


def test_block_rotations_are_block_diagonal():
    b = small_bundle()
    pair, _ = train_rotations(b, TrainConfig(steps=10, block_count=4))
    q1 = pair.q1
    mask = np.kron(np.eye(4), np.ones((4, 4))).astype(bool)
    assert np.all(q1[~mask] == 0.0)
    assert linalg.orthogonality_error(q1) <= 1e-8
    with pytest.raises(ShapeError):
        RotationPair.identity(16, 2, block_count=3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_step():
    b = small_bundle()
    b["q"].weight[0, 0] = 1e200
    with pytest.raises((NonFiniteError, ArithmeticError), match="step 0"):
        train_rotations(b, TrainConfig(steps=3))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_trajectory_csv(tmp_path):
    _, traj = train_rotations(small_bundle(), TrainConfig(steps=3))
    path = tmp_path / "traj.csv"
    traj.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,wall_ms"
    assert len(lines) == 5
    assert float(lines[1].split(",")[1]) == traj.losses[0]
