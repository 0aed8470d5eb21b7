from __future__ import annotations

import numpy as np
import pytest

from hmmgrid.chunks import KeyRing, derive_key
from hmmgrid.hmm import QuantizationParams, SegConfig
from hmmgrid.phantom import generate_phantom, nema_spec

TEST_ITERATIONS = 10_000


@pytest.fixture(scope="session")
def nema2mm():
    """64x64x32 noisy NEMA phantom (2 mm voxels) and its ground truth."""
    return generate_phantom(nema_spec(2.0, noise_sigma=1500.0, seed=11))


@pytest.fixture(scope="session")
def nema2mm_quant(nema2mm):
    return QuantizationParams.from_data(nema2mm[0].data, 32)


@pytest.fixture(scope="session")
def seg_cfg():
    return SegConfig()


@pytest.fixture(scope="session")
def secret():
    return derive_key(b"correct horse", b"\x01" * 16, TEST_ITERATIONS)


@pytest.fixture(scope="session")
def keyring():
    return KeyRing(b"correct horse", TEST_ITERATIONS)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def nema2mm_local(nema2mm, nema2mm_quant, seg_cfg):
    from hmmgrid.hmm import segment_slab

    return segment_slab(nema2mm[0].data, nema2mm_quant, seg_cfg)


def loopback_cluster(n: int, keyring: KeyRing, segmenter=None):
    """A LoopbackNetwork with ``n`` worker endpoints named w0..w{n-1}."""
    from functools import partial

    from hmmgrid.gridnet import LoopbackNetwork, serve_connection

    net = LoopbackNetwork()
    kwargs = {"segmenter": segmenter} if segmenter else {}
    endpoints = [f"w{i}" for i in range(n)]
    for ep in endpoints:
        net.register(ep, partial(serve_connection, keyring=keyring, **kwargs))
    return net, endpoints


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
