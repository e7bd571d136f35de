from unittest import TestCase

from timing import measure_time, summarize


class TestTiming(TestCase):
    def test_summarize(self):
        stats = summarize([1.0, 3.0])
        assert stats["last"] == 3.0
        assert stats["avg"] == 2.0
        assert stats["calls"] == 2

    def test_measure_time_keeps_a_trail(self):
        @measure_time(report_frequency=1.0, trail_length=3)
        def double(x):
            return 2 * x

        for i in range(5):
            assert double(i) == 2 * i
        assert double.timings()["calls"] == 3
