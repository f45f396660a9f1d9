"""
Shared pytest setup for the HFseg suites
"""


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size phantom runs, deselect with -m 'not slow'")
