from dampshift.tracking import Tracking

import numpy as np


def test_keeps_most_recent():
    tracker = Tracking(n=3)
    for v in range(5):
        tracker.add('sdr_pct', float(v))
    msg = "Only the newest n items should be kept"
    assert tracker.cache['sdr_pct'] == [2.0, 3.0, 4.0], msg


def test_instances_do_not_share_history():
    a, b = Tracking(), Tracking()
    a.add('objective', 1.0)
    assert 'objective' not in b.cache


def test_stats_slope():
    tracker = Tracking()
    for v in (0.5, 0.6, 0.7, 0.8):
        tracker.add('sdr_pct', v)
    mean, std, slope = tracker.stats('sdr_pct')
    assert np.isclose(mean, 0.65)
    assert np.isclose(std, np.std([0.5, 0.6, 0.7, 0.8]))
    msg = "A linear series should report its step as the slope"
    assert np.isclose(slope, 0.1), msg
    tracker.add('single', 2.0)
    assert tracker.stats('single')[2] == 0.0


def test_frame_pads_short_series():
    tracker = Tracking()
    tracker.add('sdr_pct', 0.5)
    tracker.add('sdr_pct', 0.6)
    tracker.add('objective', 0.1)
    frame = tracker.frame(['sdr_pct', 'objective'])
    assert list(frame.columns) == ['sdr_pct', 'objective']
    assert len(frame) == 2
    assert np.isnan(frame['objective'].iloc[1])
