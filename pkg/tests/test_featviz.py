import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapoison import featviz as F
from metapoison import models
from metapoison.data import synth_dataset
from metapoison.models import ArchSpec


def test_centroid_geometry():
    mu_t, mu_p = np.array([2.0, 0.0, 1.0]), np.array([0.0, 0.0, 1.0])
    axes = F.make_axes(mu_t, mu_p, np.array([0.0, 1.0, 0.0]))
    pts = axes.project(np.stack([mu_t, mu_p, 0.5 * (mu_t + mu_p)]))
    np.testing.assert_allclose(pts[:, 0], [1.0, -1.0, 0.0])


def test_degenerate_x_axis():
    with pytest.raises(F.DegenerateAxisError):
        F.make_axes(np.ones(3), np.ones(3), np.ones(3))


def test_weight_parallel_to_axis_flags_degenerate():
    axes = F.make_axes(np.array([1.0, 0.0]), np.zeros(2), np.array([3.0, 0.0]))
    assert axes.degenerate
    assert not axes.project(np.random.default_rng(0).normal(size=(5, 2)))[:, 1].any()


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), dim=st.integers(2, 8))
def test_centroids_symmetric_and_shift_invariant(seed, dim):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(6, dim)), rng.normal(size=(6, dim)) + 1.0
    w = rng.normal(size=dim)
    axes = F.make_axes(a.mean(0), b.mean(0), w)
    xt, xp = axes.project(np.stack([a.mean(0), b.mean(0)]))[:, 0]
    half = np.linalg.norm(a.mean(0) - b.mean(0)) / 2
    assert abs(xt - half) <= 1e-6 and abs(xp + half) <= 1e-6
    shift = rng.normal(size=dim) * 5
    moved = F.make_axes(a.mean(0) + shift, b.mean(0) + shift, w)
    np.testing.assert_allclose(moved.project(a + shift), axes.project(a), atol=1e-9)
    if not axes.degenerate:
        assert abs(np.linalg.norm(axes.w_perp) - 1) < 1e-12
        assert abs(axes.w_perp @ axes.u) < 1e-12


def _model_and_sets():
    arch = ArchSpec("mlp", (8, 6), (8, 8, 3), 2)
    data = synth_dataset(0, 20)
    state = models.init(arch, 0)
    for e in range(5):
        state = models.train_epoch(state, data, 0.1, 20, e)
    sets = {"target_class": data.images[data.labels == 0], "poison_class": data.images[data.labels == 1],
            "poisons": data.images[data.labels == 1][:3], "target": data.images[:1]}
    return state, sets


def test_project_features_rows_and_layers(tmp_path):
    state, sets = _model_and_sets()
    rows, axes = F.project_features(state, sets, y_adv=1)
    assert len(rows) == sum(len(v) for v in sets.values())
    assert {r[0] for r in rows} == set(sets) and all(r[2] == 1 and r[1] == 5 for r in rows)
    xs = np.array([r[3] for r in rows if r[0] == "target_class"])
    xp = np.array([r[3] for r in rows if r[0] == "poison_class"])
    assert abs(xs.mean() + xp.mean()) < 1e-6
    rows0, _ = F.project_features(state, sets, y_adv=1, layer=0)
    assert all(r[2] == 0 for r in rows0)
    F.write_csv(rows, tmp_path / "f.csv")
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "group,epoch,layer,x,y"


def test_project_features_needs_class_groups():
    state, sets = _model_and_sets()
    with pytest.raises(KeyError):
        F.project_features(state, {"poisons": sets["poisons"]}, 1)
