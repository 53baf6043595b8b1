import json
import logging
import os
import threading
import unittest
from tempfile import mkdtemp

import numpy as np
import pytest
from mock import patch

from mpg.lib import (
    LOG_FLOOR,
    THREADS_ENV,
    ConfigurationError,
    NumericalDomainError,
    config_hash,
    log_floor,
    ordered_map,
    worker_count,
    write_json,
)

log = logging.getLogger(__name__)


class WorkerTests(unittest.TestCase):
    def test_single_thread_by_default(self):
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(worker_count(), 1)

    def test_env_cap(self):
        with patch.dict(os.environ, {THREADS_ENV: "4"}):
            self.assertEqual(worker_count(), 4)

    def test_garbage_falls_back(self):
        with patch.dict(os.environ, {THREADS_ENV: "many"}):
            self.assertEqual(worker_count(), 1)

    def test_order_survives_threads(self):
        seen = set()

        def square(value):
            seen.add(threading.get_ident())
            return value * value

        with patch.dict(os.environ, {THREADS_ENV: "3"}):
            self.assertEqual(ordered_map(square, range(20)), [i * i for i in range(20)])
        assert len(seen) >= 1


class ErrorTests(unittest.TestCase):
    def test_configuration_error_carries_the_key(self):
        with pytest.raises(ValueError) as excinfo:
            raise ConfigurationError("bad budget", key="verify.budget")
        self.assertEqual(excinfo.value.key, "verify.budget")
        assert "bad budget" in str(excinfo.value)

    def test_numerical_error_context(self):
        error = NumericalDomainError("nan", step=3)
        self.assertEqual((error.step, error.coordinate, error.location), (3, None, None))


class IoTests(unittest.TestCase):
    def test_log_floor(self):
        np.testing.assert_array_equal(log_floor(np.array([0.0, -1.0, 2.0])), [LOG_FLOOR, LOG_FLOOR, 2.0])

    def test_hash_ignores_key_order(self):
        self.assertEqual(config_hash({"a": 1, "b": [1.0]}), config_hash({"b": np.array([1.0]), "a": 1}))

    def test_write_json_converts_arrays(self):
        path = os.path.join(mkdtemp(), "out.json")
        write_json(path, {"w": np.array([0.25, 0.5]), "n": np.int64(3), "bad": float("nan")})
        with open(path, encoding="utf-8") as fh:
            self.assertEqual(json.load(fh), {"bad": "nan", "n": 3, "w": [0.25, 0.5]})
