"""
Test for random stream utilities
"""

import numpy as np
import pytest

from app.rng_utils import stream


class TestStream:
    """乱数ストリームのテストクラス"""

    def test_same_key_same_sequence(self):
        a = stream(20240601, 3, "sample").integers(0, 1 << 30, size=16)
        b = stream(20240601, 3, "sample").integers(0, 1 << 30, size=16)
        np.testing.assert_array_equal(a, b)

    def test_keys_are_independent(self):
        """試行番号やタグが違えば別の列"""
        base = stream(0, 0, "sample").random(8)
        assert not np.array_equal(base, stream(0, 1, "sample").random(8))
        assert not np.array_equal(base, stream(0, 0, "probe").random(8))
        assert not np.array_equal(base, stream(1, 0, "sample").random(8))

    def test_order_does_not_matter(self):
        """別のストリームを先に消費しても結果は変わらない"""
        first = stream(7, 5, "sample").random(4)
        stream(7, 4, "sample").random(1000)
        np.testing.assert_array_equal(first, stream(7, 5, "sample").random(4))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
