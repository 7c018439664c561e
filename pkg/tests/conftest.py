import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from composability.chain_model import Address, LogPosition, TransferEvent, encode_transfer  # noqa: E402
from composability.derivation_graph import RootSpec  # noqa: E402
from composability.synthetic_chain import ScenarioSpec  # noqa: E402

REPO = Path(__file__).resolve().parent.parent
SCENARIO_DIR = REPO / "scenarios"


def addr(n: int) -> Address:
    return Address(n.to_bytes(20, "big"))


def tx_hash(n: int) -> bytes:
    return n.to_bytes(32, "big")


def transfer(token, sender, recipient, value=1, block=1, index=0, tx=None):
    return TransferEvent(token, sender, recipient, value,
                         LogPosition(block, tx_hash(tx if tx is not None else block * 1000 + index), index))


def random_event(rng: random.Random) -> TransferEvent:
    def a():
        r = rng.random()
        if r < 0.05:
            return Address(bytes(20))
        if r < 0.1:
            return Address(b"\xff" * 20)
        return Address(rng.randbytes(20))

    bits = rng.choice([0, 1, 8, 64, 128, 255, 256])
    value = rng.getrandbits(bits) if bits else 0
    return TransferEvent(
        a(), a(), a(), value,
        LogPosition(rng.getrandbits(64), rng.randbytes(32), rng.getrandbits(32)),
    )


def events_to_logs(events):
    return [encode_transfer(e) for e in events]


@pytest.fixture
def roots_basic():
    return [
        RootSpec("DAI", (addr(0xDA1),), 0),
        RootSpec("WETH", (addr(0xE7),), 0),
        RootSpec("BTC", (addr(0xB1), addr(0xB2), addr(0xB3)), 1),
    ]


def two_level_spec(level2_evidence=6, noise=None, seed=11, **overrides) -> ScenarioSpec:
    """root -> LP -> metaLP with enough first-level evidence."""
    d = {
        "seed": seed,
        "blocks": {"from": 1000, "to": 4999},
        "bucket_blocks": 1000,
        "roots": [{"id": "DAI", "members": ["DAI"]}],
        "planted_edges": [
            {"parent": "DAI", "child": "LP", "evidence_tx": 6, "holders": 3},
            {"parent": "LP", "child": "META", "evidence_tx": level2_evidence, "holders": 3},
        ],
        "traffic": {"DAI": 20},
        "bucket_plan": {"DAI": ["0.1", "0.5", "0.25"]},
        "noise": noise or {},
        "discovery": {"min_evidence": 5, "min_holders": 3},
    }
    d.update(overrides)
    return ScenarioSpec.from_dict(d)
