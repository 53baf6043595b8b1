import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src")))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a policy or solves a benchmark; deselect with -m 'not slow'")
