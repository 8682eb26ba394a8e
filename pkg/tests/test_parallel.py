import numpy as np
import pytest

from onarch import parallel


def test_threads_context_restores_previous_count():
    before = parallel.get_threads()
    with parallel.threads(3):
        assert parallel.get_threads() == 3
    assert parallel.get_threads() == before


def test_thread_count_must_be_positive():
    with pytest.raises(ValueError):
        parallel.set_threads(0)


def test_ordered_map_keeps_item_order():
    with parallel.threads(4):
        assert parallel.ordered_map(lambda x: x * x, range(10)) == [x * x for x in range(10)]


def test_ordered_sum_is_bit_identical_across_thread_counts():
    rng = np.random.default_rng(0)
    blocks = [rng.standard_normal((50, 20)) * 10.0 ** rng.integers(-8, 8) for _ in range(16)]

    def part(b):
        return b.T @ b, b.sum(axis=0)

    results = []
    for n in (1, 2, 4):
        with parallel.threads(n):
            results.append(parallel.ordered_sum(parallel.ordered_map(part, blocks)))
    for hess, grad in results[1:]:
        assert hess.tobytes() == results[0][0].tobytes()
        assert grad.tobytes() == results[0][1].tobytes()


def test_ordered_sum_rejects_empty_input():
    with pytest.raises(ValueError):
        parallel.ordered_sum([])
