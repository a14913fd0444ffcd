import numpy as np

from motionlift import autograd as ag
from motionlift.gradcheck import CASES, check_function, relative_error, run_gradcheck


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == np.sqrt(2.0)


def test_catches_wrong_gradient():
    def bad(x):
        # claims d(x^2)/dx = x instead of 2x
        return ag._result(x.data ** 2, (x,), lambda g: (g * x.data,))
    rng = np.random.default_rng(0)
    err = check_function(bad, {"x": rng.normal(size=(3,))}, rng)
    assert max(err.values()) > 0.1


def test_all_blocks_one_seed():
    report = run_gradcheck(seed=3, num_seeds=1)
    assert report.passed, report.lines()
    assert set(report.max_error) == set(CASES)
    assert report.lines()[-1].endswith("result=pass")
