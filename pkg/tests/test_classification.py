import io
import random
from collections import Counter
from fractions import Fraction

import pytest

from composability.chain_model import ZERO_ADDRESS, decode_transfer
from composability.classification import (
    ClassifiedCount,
    CountingPolicy,
    CountMode,
    FixedBlockWindow,
    NoDataError,
    TimestampMonths,
    aggregate,
    aggregate_cache,
    bucketing_from_dict,
    classify_event,
    composed_share,
    emit_report,
    format_share,
    load_counts,
    save_counts,
)
from composability.derivation_graph import DerivationGraph, RootSpec, WrapEdge, compute_distances
from composability.ingestion import BlockRange, LogCache, OrderingError, group_by_transaction, write_cache
from composability.synthetic_chain import ALL_POLICIES, generate
from conftest import addr, transfer, two_level_spec

DAI, WETH, USDT = addr(0xDA1), addr(0xE7), addr(0x7E7)
LP, META, POOL = addr(0x1001), addr(0x1002), addr(0x1003)
ROOTS = (RootSpec("DAI", (DAI,)), RootSpec("WETH", (WETH,)), RootSpec("USDT", (USDT,)))
EVENT = CountingPolicy(CountMode.EVENT, True)
TX = CountingPolicy(CountMode.TRANSACTION, True)


@pytest.fixture
def distances():
    g = DerivationGraph(ROOTS)
    for p, c in ((DAI, LP), (LP, META), (DAI, POOL), (WETH, POOL)):
        g.add_edge(WrapEdge(p, c))
    return compute_distances(g)


def ev(token, block=10, index=0, tx=1, sender=None, recipient=None):
    return transfer(token, sender or addr(0xA), recipient or addr(0xB), 1, block, index, tx)


def test_classify_examples(distances):
    assert classify_event(ev(DAI), distances, EVENT) == {("DAI", 0)}
    assert classify_event(ev(META), distances, EVENT) == {("DAI", 2)}
    assert classify_event(ev(POOL), distances, EVENT) == {("DAI", 1), ("WETH", 1)}
    assert classify_event(ev(addr(0x4444)), distances, EVENT) == set()


def test_mint_burn_exclusion(distances):
    mint = ev(LP, sender=ZERO_ADDRESS)
    assert classify_event(mint, distances, EVENT) == {("DAI", 1)}
    assert classify_event(mint, distances, CountingPolicy(CountMode.EVENT, False)) == set()


def test_two_event_transaction_modes(distances):
    # one tx moves DAI and LP: two events, one transaction
    events = [ev(DAI, 10, 0, tx=7), ev(LP, 10, 1, tx=7)]
    bucketing = FixedBlockWindow(100)
    by_event = aggregate(events, distances, EVENT, bucketing)
    by_tx = aggregate(events, distances, TX, bucketing)
    assert by_event.entries == Counter({("DAI", 0, 0): 1, ("DAI", 1, 0): 1})
    assert by_tx.entries == Counter({("DAI", 1, 0): 1})


def test_out_of_order_stream_rejected(distances):
    with pytest.raises(OrderingError):
        aggregate([ev(DAI, 10, 1), ev(DAI, 10, 0)], distances, EVENT, FixedBlockWindow(100))


def test_zero_address_events_reported_under_both_settings(distances):
    events = [ev(DAI, 1, 0, 1, sender=ZERO_ADDRESS), ev(DAI, 1, 1, 2), ev(POOL, 2, 0, 3, recipient=ZERO_ADDRESS)]
    for include in (True, False):
        cc = aggregate(events, distances, CountingPolicy(CountMode.EVENT, include), FixedBlockWindow(100))
        assert cc.zero_address == Counter({"DAI": 2, "WETH": 1})
        assert cc.total("DAI") == (3 if include else 1)


def _synthetic_events(seed=5):
    spec = two_level_spec(seed=seed, noise={"airdrop_mints": 3, "untracked_transfers": 5, "root_mint_burn": 2})
    logs, truth = generate(spec)
    events = [decode_transfer(r) for r in logs]
    dist = compute_distances(truth.expected_graph)
    return events, dist, truth


@pytest.mark.parametrize("policy", ALL_POLICIES, ids=lambda p: p.describe())
def test_shard_merge_equals_single_pass(policy):
    events, dist, truth = _synthetic_events()
    bucketing = truth.bucketing
    whole = aggregate(events, dist, policy, bucketing)
    groups = [g for _, g in group_by_transaction(events)]
    rng = random.Random(1)
    for _ in range(5):
        cuts = sorted(rng.sample(range(1, len(groups)), 10))
        shards = [groups[a:b] for a, b in zip([0, *cuts], [*cuts, len(groups)])]
        total = ClassifiedCount()
        for shard in shards:
            total = total + aggregate([e for g in shard for e in g], dist, policy, bucketing)
        assert total == whole


def test_monoid_laws():
    a = ClassifiedCount(Counter({("X", 0, 0): 2}), Counter({"X": 1}))
    b = ClassifiedCount(Counter({("X", 1, 0): 3}))
    c = ClassifiedCount(Counter({("X", 0, 0): 5, ("Y", 2, 1): 1}))
    assert (a + b) + c == a + (b + c)
    assert a + b == b + a
    assert a + ClassifiedCount() == a


def test_transaction_counts_never_exceed_events():
    events, dist, truth = _synthetic_events(seed=8)
    for include in (True, False):
        e = aggregate(events, dist, CountingPolicy(CountMode.EVENT, include), truth.bucketing)
        t = aggregate(events, dist, CountingPolicy(CountMode.TRANSACTION, include), truth.bucketing)
        for root in ("DAI",):
            assert t.total(root) <= e.total(root)


def test_event_counts_conserve_labelled_events():
    events, dist, truth = _synthetic_events(seed=9)
    cc = aggregate(events, dist, EVENT, truth.bucketing)
    expected = sum(len(dist.labels(e.token)) for e in events)
    assert sum(cc.entries.values()) == expected


def test_shares_lie_in_unit_interval():
    events, dist, truth = _synthetic_events(seed=10)
    for policy in ALL_POLICIES:
        cc = aggregate(events, dist, policy, truth.bucketing)
        for (root, _, bucket) in cc.entries:
            assert 0 <= composed_share(cc, root, bucket, truth.roots) <= 1


def test_published_counts_shares():
    cc = ClassifiedCount(Counter({
        ("DAI", 0, 0): 4_149_654, ("DAI", 1, 0): 1_033_674,
        ("USDT", 0, 0): 64_956_383, ("USDT", 1, 0): 687_705,
    }))
    dai = composed_share(cc, "DAI", None, ROOTS)
    usdt = composed_share(cc, "USDT", 0, ROOTS)
    assert dai == Fraction(1_033_674, 5_183_328)
    assert format_share(dai) == "0.199423"
    assert usdt == Fraction(687_705, 65_644_088)
    assert format_share(usdt) == "0.010476"


def test_share_respects_initial_distance():
    btc = RootSpec("BTC", (addr(0xB1),), 1)
    cc = ClassifiedCount(Counter({("BTC", 1, 0): 3, ("BTC", 2, 0): 1}))
    assert composed_share(cc, "BTC", 0, (btc,)) == Fraction(1, 4)


def test_share_without_data_raises():
    with pytest.raises(NoDataError):
        composed_share(ClassifiedCount(), "DAI", 0, ROOTS)


@pytest.mark.parametrize(
    "share, text",
    [
        (Fraction(1, 2), "0.500000"),
        (Fraction(1), "1.000000"),
        (Fraction(0), "0.000000"),
        (Fraction(5, 10**7), "0.000000"),  # half to even: 0
        (Fraction(15, 10**7), "0.000002"),  # half to even: 2
        (Fraction(25, 10**7), "0.000002"),
        (Fraction(1, 3), "0.333333"),
        (Fraction(2, 3), "0.666667"),
    ],
)
def test_format_share_half_even(share, text):
    assert format_share(share) == text


def test_report_with_no_counts_is_header_only():
    buf = io.StringIO()
    emit_report(ClassifiedCount(), FixedBlockWindow(100), EVENT, buf, ROOTS, "abc")
    lines = buf.getvalue().splitlines()
    assert lines[-1] == "root,bucket_index,bucket_start_block,bucket_end_block,delta,count,composed_share_of_bucket"
    assert all(line.startswith("# ") for line in lines[:-1])


def test_report_rows_and_determinism():
    cc = ClassifiedCount(Counter({("DAI", 1, 1): 1, ("DAI", 0, 1): 3, ("DAI", 0, 0): 2}), Counter({"DAI": 1}))
    bucketing = FixedBlockWindow(100, 1000, 1150)
    out1, out2 = io.StringIO(), io.StringIO()
    emit_report(cc, bucketing, EVENT, out1, ROOTS, "abc", {"range": "1000..1150"})
    emit_report(ClassifiedCount(Counter(dict(reversed(list(cc.entries.items())))), cc.zero_address),
                bucketing, EVENT, out2, ROOTS, "abc", {"range": "1000..1150"})
    assert out1.getvalue() == out2.getvalue()
    assert out1.getvalue().splitlines()[-3:] == [
        "DAI,0,1000,1099,0,2,0.000000",
        "DAI,1,1100,1150,0,3,0.250000",
        "DAI,1,1100,1150,1,1,0.250000",
    ]
    assert "# zero_address_events: DAI=1" in out1.getvalue()


def test_counts_file_round_trip(tmp_path):
    cc = ClassifiedCount(Counter({("DAI", 0, 0): 2, ("WETH", 3, 4): 9}), Counter({"DAI": 1}))
    save_counts(cc, tmp_path / "c.json", {"k": 1})
    again, meta = load_counts(tmp_path / "c.json")
    assert again == cc and meta == {"k": 1}


def test_fixed_window_buckets():
    b = FixedBlockWindow(195_000, 9_193_266, 11_565_018)
    assert b.bucket_of(9_193_266) == 0
    assert b.bucket_of(9_388_265) == 0
    assert b.bucket_of(9_388_266) == 1
    assert b.bounds(12) == (11_533_266, 11_565_018)
    with pytest.raises(ValueError):
        b.bucket_of(9_193_265)
    assert bucketing_from_dict(b.to_dict()) == b


def test_timestamp_months(tmp_path):
    mapping = tmp_path / "ts.csv"
    # 2020-01-31 23:00, 2020-02-01 00:00, 2020-02-15, 2020-03-01
    mapping.write_text("block_number,unix_timestamp\n100,1580511600\n110,1580515200\n150,1581724800\n200,1583020800\n")
    b = TimestampMonths.load(mapping, 100, 260)
    assert [b.bucket_of(x) for x in (100, 109, 110, 199, 200, 260)] == [0, 0, 1, 1, 2, 2]
    assert b.bounds(0) == (100, 109)
    assert b.bounds(1) == (110, 199)
    assert b.bounds(2) == (200, 260)
    assert bucketing_from_dict(b.to_dict()).bucket_of(150) == 1


def test_parallel_cache_aggregation_matches(tmp_path):
    events, dist, truth = _synthetic_events(seed=12)
    from composability.chain_model import encode_transfer

    spec_range = BlockRange(1000, 4999)
    write_cache([encode_transfer(e) for e in events], tmp_path, 250, spec_range)
    cache = LogCache(tmp_path)
    single = aggregate_cache(cache, spec_range, dist, TX, truth.bucketing)
    parallel = aggregate_cache(cache, spec_range, dist, TX, truth.bucketing, workers=4)
    assert single == parallel == aggregate(events, dist, TX, truth.bucketing)
