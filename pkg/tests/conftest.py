import socket
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from edgelora.dataset import prepare_dataset
from edgelora.lora import LoraConfig, init_adapter
from edgelora.model import Backbone, BackboneConfig, attach_head
from edgelora.synth import write_synthetic


@pytest.fixture(scope="session")
def synthetic_csvs(tmp_path_factory):
    return write_synthetic(tmp_path_factory.mktemp("synthetic"), seed=0)


@pytest.fixture(scope="session")
def dataset(synthetic_csvs):
    return prepare_dataset(list(synthetic_csvs), seed=0)


@pytest.fixture
def tiny_backbone():
    return Backbone.init(BackboneConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=40,
                                        max_len=10, seed=3))


def random_tokens(rng, n, config, pad_tail=True):
    ids = rng.integers(3, config.vocab_size, size=(n, config.max_len))
    ids[:, 0] = 2
    if pad_tail:
        lengths = rng.integers(1, config.max_len + 1, size=n)
        ids[np.arange(config.max_len)[None, :] >= lengths[:, None]] = 0
    return ids


def trained_like_adapter(backbone, round_id, classes, seed, rank=4, std=0.2):
    """An adapter with nonzero B, as if trained, for tests that need a real delta."""
    rng = np.random.default_rng(seed)
    adapter = init_adapter(LoraConfig(rank=rank), backbone, round_id, classes, seed,
                           head=attach_head(classes, backbone.config.d_model, seed + 7))
    for a, b in adapter.entries.values():
        b.value[:] = rng.normal(0, std, size=b.shape).astype(b.value.dtype)
    adapter.head.weight.value[:] = rng.normal(0, 1.0, size=adapter.head.weight.shape)
    return adapter.freeze()


SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.cfg"


def write_smoke_config(root, csvs):
    """configs/smoke.cfg with its data and output paths pointed into ``root``."""
    edge, ton = csvs
    text = SMOKE.read_text().replace("../data/edge_iiot.csv", str(edge)).replace("../data/ton_iot.csv", str(ton))
    path = Path(root) / "smoke.cfg"
    path.write_text(text.replace("../out/smoke", str(Path(root) / "out")))
    return path


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_socket_federation(cfg_path, server_out, edge_out, timeout=900):
    """``serve`` plus one ``edge`` process per device, each a separate interpreter."""
    addr = f"127.0.0.1:{free_port()}"
    cmd = [sys.executable, "-m", "edgelora.cli"]
    server = subprocess.Popen(cmd + ["serve", "--config", str(cfg_path), "--addr", addr, "--exit-when-done",
                                     "--out", str(server_out)], stdout=subprocess.PIPE, text=True)
    try:
        assert "listening" in server.stdout.readline()
        edges = [subprocess.Popen(cmd + ["edge", "--config", str(cfg_path), "--node", str(k), "--addr", addr,
                                         "--retries", "20", "--out", str(edge_out)],
                                  stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True)
                 for k in range(2)]
        for e in edges:
            _, err = e.communicate(timeout=timeout)
            assert e.returncode == 0, err
        server.wait(timeout=60)
    finally:
        server.kill()
    assert server.returncode == 0


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
