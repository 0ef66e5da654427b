import numpy as np
import pytest

import ebmlab


def test_average_precision_hand_case():
    # ranking ood, id, ood, id
    assert ebmlab.average_precision([3.0, 1.0], [4.0, 2.0]) == pytest.approx(0.5)


def test_generators_are_seeded():
    x, y = ebmlab.make_two_moons(200, 0.1, seed=5)
    x2, y2 = ebmlab.make_two_moons(200, 0.1, seed=5)
    assert x.shape == (200, 2)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    assert sorted(set(y.tolist())) == [0, 1]

    c = ebmlab.make_constant(50, 4, seed=1)
    assert np.all(c == c[:, :1])
    assert np.all(np.abs(c) <= 1.0)
    assert ebmlab.make_noise(10, 3).shape == (10, 3)
    assert np.allclose(ebmlab.make_oodomain(np.array([[0.1, -0.2]])), [[25.5, -51.0]])

    img = ebmlab.make_smoothness(4, 8, 8, seed=2)
    assert img.shape == (4, 64)
    assert np.allclose(img, img[:, :1])


def test_train_and_score():
    config = {
        "version": 1,
        "objective": "ssm",
        "seed": 1,
        "data": {"source": "two-moons", "n": 200},
        "model": {"input_dim": 2, "hidden": [8, 8], "head": "energy", "activation": "swish"},
        "train": {"steps": 30, "warmup": 5, "eval_every": 10, "batch_size": 16},
    }
    result = ebmlab.train(config)
    assert result["steps_run"] == 30
    assert not result["diverged"]
    assert len(result["losses"]) == 30
    assert result["report"]["results"]

    x, _ = ebmlab.make_two_moons(20, 0.1, seed=3)
    s = ebmlab.score(result["checkpoint"], x)
    assert s.shape == (20,)
    assert np.all(np.isfinite(s))


def test_config_errors_surface_as_value_errors():
    with pytest.raises(ValueError):
        ebmlab.train({"version": 1, "unknown_key": 1})
