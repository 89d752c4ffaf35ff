import numpy as np
import pandas as pd
from sklearn.linear_model import LinearRegression


class Tracking:
    def __init__(self, n=5000):
        """ Keeps the most recent history of named scalar series, such as
        the smallest damping ratio after each optimizer iteration.

        Parameters
        ----------
        n: int
        Number of items to keep per key.
        """
        self.n = n
        self.cache = {}

    def add(self, key, item):
        """ Append a value to the series of a key.

        >>> tracker = Tracking()
        >>> tracker.add('sdr_pct', 0.514)
        >>> tracker.add('sdr_pct', 0.602)
        >>> tracker.add('objective', 0.09)
        >>> tracker.cache['sdr_pct']
        [0.514, 0.602]
        >>> tracker.cache['objective']
        [0.09]
        """
        if key not in self.cache:
            self.cache[key] = []
        self.cache[key].append(item)
        if len(self.cache[key]) > self.n:
            self.cache[key] = self.cache[key][-self.n:]

    def stats(self, key):
        """ Mean, standard deviation and least-squares slope per step of the
        values stored under a key.

        >>> tracker = Tracking()
        >>> for v in (1.0, 2.0, 3.0):
        ...     tracker.add('sdr_pct', v)
        >>> mean, std, slope = tracker.stats('sdr_pct')
        >>> float(mean), round(float(slope), 6)
        (2.0, 1.0)
        """
        data = np.asarray(self.cache[key], dtype=float)
        mean = np.mean(data)
        std = np.std(data)
        slope = 0.0
        if len(data) > 1:
            lr = LinearRegression()
            x = np.arange(len(data)).astype('float64')
            lr.fit(x[:, None], data)
            slope = lr.coef_[0]
        return mean, std, slope

    def frame(self, keys=None):
        """ Tracked series side by side, one row per step. """
        keys = list(self.cache) if keys is None else list(keys)
        cols = {k: pd.Series(self.cache.get(k, []), dtype=float) for k in keys}
        return pd.DataFrame(cols, columns=keys)


if __name__ == "__main__":
    import doctest
    doctest.testmod()
