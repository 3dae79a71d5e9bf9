import numpy as np
import pytest

from dovmeta.numerics import DiagGaussian, kl_diag
from dovmeta.targets import MissingLabelError, TargetTable, disentangle_loss
from conftest import central_diff, rel_error


def test_first_sight_initializes():
    table = TargetTable(0.99)
    q = DiagGaussian([1.0, 2.0], [0.5, 0.25])
    table.ema_update(0, 3, q)
    t = table.get_target(0, 3)
    assert np.array_equal(t.mean, q.mean) and np.array_equal(t.var, q.var)


def test_ema_recursion_to_1e15(rng):
    tau = 0.99
    table = TargetTable(tau)
    posts = [DiagGaussian(rng.standard_normal(4), np.exp(rng.standard_normal(4))) for _ in range(50)]
    ref_m, ref_v = posts[0].mean.copy(), posts[0].var.copy()
    table.ema_update(1, "a", posts[0])
    for q in posts[1:]:
        table.ema_update(1, "a", q)
        ref_m = tau * ref_m + (1 - tau) * q.mean
        ref_v = tau * ref_v + (1 - tau) * q.var
        t = table.get_target(1, "a")
        assert np.max(np.abs(t.mean - ref_m)) <= 1e-15 and np.max(np.abs(t.var - ref_v)) <= 1e-15


def test_tau_zero_is_last_assignment(rng):
    table = TargetTable(0.0)
    for _ in range(5):
        q = DiagGaussian(rng.standard_normal(3), np.exp(rng.standard_normal(3)))
        table.ema_update(0, 1, q)
        t = table.get_target(0, 1)
        assert np.array_equal(t.mean, q.mean) and np.array_equal(t.var, q.var)


@pytest.mark.parametrize("tau", [0.5, 0.9, 0.99])
def test_geometric_convergence_closed_form(tau):
    table = TargetTable(tau)
    table.ema_update(0, 0, DiagGaussian([4.0], [3.0]))
    for n in range(1, 200):
        table.ema_update(0, 0, DiagGaussian([1.0], [0.5]))
        t = table.get_target(0, 0)
        assert abs(t.mean[0] - (1.0 + 3.0 * tau ** n)) <= 1e-12
        assert abs(t.var[0] - (0.5 + 2.5 * tau ** n)) <= 1e-12


def test_keys_are_independent():
    table = TargetTable(0.9)
    table.ema_update(0, 1, DiagGaussian([1.0], [1.0]))
    table.ema_update(1, 1, DiagGaussian([5.0], [1.0]))
    table.ema_update(0, 2, DiagGaussian([9.0], [1.0]))
    assert table.get_target(0, 1).mean[0] == 1.0 and len(table) == 3
    assert table.labels(0) == [1, 2]


def test_missing_label():
    with pytest.raises(MissingLabelError, match="DoV 2 label 7"):
        TargetTable().get_target(2, 7)
    assert issubclass(MissingLabelError, KeyError)


def test_bad_tau():
    with pytest.raises(ValueError):
        TargetTable(1.0)


def test_get_target_returns_copy():
    table = TargetTable()
    table.ema_update(0, 0, DiagGaussian([1.0], [1.0]))
    table.get_target(0, 0).mean[0] = 99.0
    assert table.get_target(0, 0).mean[0] == 1.0


def test_records_round_trip(rng):
    table = TargetTable(0.95)
    table.ema_update(0, 2, DiagGaussian(rng.standard_normal(2), [1.0, 2.0]))
    table.ema_update(0, (1, 3), DiagGaussian(rng.standard_normal(2), [0.5, 2.0]))
    other = TargetTable.from_records(0.95, table.to_records())
    assert other.entries.keys() == table.entries.keys()
    for k in table.entries:
        assert np.array_equal(other.entries[k][0], table.entries[k][0])


def test_disentangle_examples():
    table = TargetTable()
    table.ema_update(0, 0, DiagGaussian([0.0], [1.0]))
    table.ema_update(1, 4, DiagGaussian([1.0], [1.0]))
    posts = [DiagGaussian([1.0], [1.0]), DiagGaussian([1.0], [1.0])]
    # KL(N(1,1) || N(0,1)) = 0.5 and the matching block adds nothing
    assert disentangle_loss(table, (0, 4), posts, 0.1) == pytest.approx(0.05, abs=1e-15)
    assert disentangle_loss(table, (0, 4), posts, 0.0) == 0.0
    # unseen label: no target yet, no contribution
    assert disentangle_loss(table, (0, 9), posts, 0.1) == pytest.approx(0.05, abs=1e-15)


def test_disentangle_matches_kl_sum(rng):
    table = TargetTable()
    posts = []
    for j in range(3):
        table.ema_update(j, j, DiagGaussian(rng.standard_normal(4), np.exp(rng.standard_normal(4))))
        posts.append(DiagGaussian(rng.standard_normal(4), np.exp(rng.standard_normal(4))))
    expected = 2.5 * sum(kl_diag(q, table.get_target(j, j)) for j, q in enumerate(posts))
    assert disentangle_loss(table, (0, 1, 2), posts, 2.5) == pytest.approx(expected, rel=1e-13)


def test_disentangle_gradient(rng):
    table = TargetTable()
    means = [rng.standard_normal(3) for _ in range(2)]
    variances = [np.exp(rng.standard_normal(3)) for _ in range(2)]
    for j in range(2):
        table.ema_update(j, 0, DiagGaussian(rng.standard_normal(3), np.exp(rng.standard_normal(3))))

    def loss():
        return disentangle_loss(table, (0, 0), [DiagGaussian(m, v) for m, v in zip(means, variances)], 0.7)

    _, dm, dv = disentangle_loss(table, (0, 0), [DiagGaussian(m, v) for m, v in zip(means, variances)], 0.7,
                                 with_grad=True)
    numeric = central_diff(loss, means + variances)
    assert rel_error(dm + dv, numeric) < 1e-4
