import json
from pathlib import Path

import pytest

from composability import cli
from composability.chain_model import encode_transfer
from composability.ingestion import RPC_URL_ENV, JsonRpcClient, LogCache, UrllibTransport
from conftest import SCENARIO_DIR, addr, transfer
from mock_rpc import MockProvider, MockServer

SCENARIO = SCENARIO_DIR / "defi_summer_ramp.json"
SMALL = {
    "seed": 4,
    "blocks": {"from": 1000, "to": 3999},
    "bucket_blocks": 1000,
    "roots": [{"id": "DAI", "members": ["DAI"]}, {"id": "BTC", "members": ["WBTC", "renBTC"], "initial_distance": 1}],
    "planted_edges": [
        {"parent": "DAI", "child": "LP", "evidence_tx": 6, "holders": 3},
        {"parent": "LP", "child": "META", "evidence_tx": 5, "holders": 3},
        {"parent": "WBTC", "child": "BTCLP", "evidence_tx": 5, "holders": 3},
    ],
    "traffic": {"DAI": 20, "BTC": 10},
    "bucket_plan": {"DAI": ["0.25", "0.5"], "BTC": ["0.1", "0.3"]},
    "noise": {"airdrop_mints": 2, "untracked_transfers": 4, "decoy_deposits": 3},
}


@pytest.fixture
def small_synth(tmp_path):
    scenario = tmp_path / "small.json"
    scenario.write_text(json.dumps(SMALL))
    out = tmp_path / "synth"
    assert cli.main(["synth", str(scenario), "--out-dir", str(out)]) == 0
    return out


def rng_args(lo=1000, hi=3999):
    return ["--from-block", str(lo), "--to-block", str(hi)]


def replay(synth, cache, segment_blocks=500):
    return cli.main(["fetch", "--replay", str(synth / "logs.tsv"), "--cache-dir", str(cache),
                     "--segment-blocks", str(segment_blocks), *rng_args()])


def test_synth_writes_files_and_is_repeatable(tmp_path, small_synth):
    scenario = tmp_path / "small.json"
    again = tmp_path / "again"
    assert cli.main(["synth", str(scenario), "--out-dir", str(again)]) == 0
    for name in cli.SYNTH_FILES.values():
        assert (small_synth / name).read_bytes() == (again / name).read_bytes()


def test_full_pipeline_reproduces_goldens(tmp_path, small_synth, capsys):
    cache = tmp_path / "cache"
    assert replay(small_synth, cache) == 0
    disc = tmp_path / "discovered.csv"
    assert cli.main(["discover", "--cache-dir", str(cache), "--roots", str(small_synth / "roots.csv"),
                     "--out", str(disc), *rng_args()]) == 0
    assert disc.read_text() == (small_synth / "truth_registry.csv").read_text()
    for mode, golden in (("event", "golden_report.csv"), ("tx", "golden_report_tx.csv")):
        report = tmp_path / f"report_{mode}.csv"
        counts = tmp_path / f"counts_{mode}.json"
        assert cli.main(["classify", "--cache-dir", str(cache), "--roots", str(small_synth / "roots.csv"),
                         "--discovered", str(disc), "--count-mode", mode, "--out", str(report),
                         "--counts-out", str(counts), "--workers", "2", "--bucket-blocks", "1000",
                         *rng_args()]) == 0
        assert report.read_bytes() == (small_synth / golden).read_bytes()
        again = tmp_path / f"again_{mode}.csv"
        assert cli.main(["report", "--counts-in", str(counts), "--out", str(again)]) == 0
        assert again.read_bytes() == report.read_bytes()


def test_replay_fetch_is_idempotent(tmp_path, small_synth, capsys):
    cache = tmp_path / "cache"
    assert replay(small_synth, cache) == 0
    assert "6 new segments" in capsys.readouterr().out
    before = {p.name: p.read_bytes() for p in cache.iterdir()}
    assert replay(small_synth, cache) == 0
    assert "0 new segments" in capsys.readouterr().out
    assert {p.name: p.read_bytes() for p in cache.iterdir()} == before


def test_fetch_from_endpoint_with_range_limit(tmp_path, small_synth, capsys):
    from composability.ingestion import replay_file

    logs = list(replay_file(small_synth / "logs.tsv"))
    provider = MockProvider(logs, head=100_000, max_span=300)
    with MockServer(provider) as server:
        code = cli.main(["fetch", "--endpoint", server.url, "--cache-dir", str(tmp_path / "net"),
                         "--segment-blocks", "500", "--workers", "3", *rng_args()])
        assert code == 0
        assert "0 new segments" not in capsys.readouterr().out
        assert cli.main(["fetch", "--endpoint", server.url, "--cache-dir", str(tmp_path / "net"),
                         "--segment-blocks", "500", *rng_args()]) == 0
        assert "0 new segments" in capsys.readouterr().out
    replay(small_synth, tmp_path / "file")
    net, file = LogCache(tmp_path / "net"), LogCache(tmp_path / "file")
    assert net.segments() == file.segments()


def test_network_exhaustion_exits_2(tmp_path, monkeypatch):
    monkeypatch.setattr(
        JsonRpcClient, "from_url",
        classmethod(lambda cls, url, **kw: cls(UrllibTransport(url, timeout=1), sleep=lambda s: None)),
    )
    code = cli.main(["fetch", "--endpoint", "http://127.0.0.1:9/", "--cache-dir", str(tmp_path), *rng_args()])
    assert code == cli.EXIT_NETWORK


def test_endpoint_from_environment(tmp_path, monkeypatch):
    provider = MockProvider([], head=100_000)
    with MockServer(provider) as server:
        monkeypatch.setenv(RPC_URL_ENV, server.url)
        assert cli.main(["fetch", "--cache-dir", str(tmp_path), *rng_args()]) == 0
    assert provider.requests


def test_near_head_refused_without_flag(tmp_path):
    provider = MockProvider([], head=4010)
    with MockServer(provider) as server:
        args = ["fetch", "--endpoint", server.url, "--cache-dir", str(tmp_path), *rng_args()]
        assert cli.main(args) == cli.EXIT_FAILURE
        assert cli.main([*args, "--allow-near-head"]) == 0


def test_corrupt_cache_exits_3(tmp_path, small_synth):
    cache = tmp_path / "cache"
    replay(small_synth, cache)
    seg = LogCache(cache).segments()[1]
    path = cache / seg.filename
    path.write_bytes(path.read_bytes()[:-10])
    code = cli.main(["discover", "--cache-dir", str(cache), "--roots", str(small_synth / "roots.csv"),
                     "--out", str(tmp_path / "d.csv"), *rng_args()])
    assert code == cli.EXIT_CORRUPT
    assert replay(small_synth, cache) == cli.EXIT_CORRUPT


def test_missing_inputs_exit_4(tmp_path, small_synth):
    cache = tmp_path / "cache"
    replay(small_synth, cache)
    roots = str(small_synth / "roots.csv")
    assert cli.main(["discover", "--cache-dir", str(cache), "--roots", roots, *rng_args(1000, 4500)]) == 4
    assert cli.main(["discover", "--cache-dir", str(cache), "--roots", str(tmp_path / "no.csv"), *rng_args()]) == 4
    assert cli.main(["classify", "--cache-dir", str(cache), "--roots", roots, *rng_args()]) == 4
    assert cli.main(["report", "--counts-in", str(tmp_path / "none.json")]) == 4
    assert cli.main(["fetch", "--replay", str(tmp_path / "none.tsv"), "--cache-dir", str(cache)]) == 4


def test_no_classified_events_exit_5(tmp_path, small_synth):
    cache = tmp_path / "cache"
    replay(small_synth, cache)
    roots = tmp_path / "other_roots.csv"
    roots.write_text(f"root_id,token_address,initial_distance\nX,{addr(0xDEAD)},0\n")
    registry = tmp_path / "reg.csv"
    registry.write_text("parent,child,label,origin\n")
    code = cli.main(["classify", "--cache-dir", str(cache), "--roots", str(roots),
                     "--registry", str(registry), *rng_args()])
    assert code == cli.EXIT_NO_EVENTS


def test_infeasible_scenario_exit_6(tmp_path):
    bad = dict(SMALL, bucket_plan={"DAI": ["1.2", "0.5"]})
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(bad))
    assert cli.main(["synth", str(path), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_INFEASIBLE


def test_locked_cache_exit_7(tmp_path, small_synth):
    cache = LogCache(tmp_path / "cache")
    with cache.lock():
        assert replay(small_synth, tmp_path / "cache") == cli.EXIT_LOCKED


def test_usage_errors_exit_1(tmp_path):
    assert cli.main([]) == 1
    assert cli.main(["classify", "--count-mode", "weird"]) == 1
    assert cli.main(["fetch", "--cache-dir", str(tmp_path), "--from-block", "9", "--to-block", "3"]) == 1


def test_discover_with_zero_depth_finds_nothing(tmp_path, small_synth, capsys):
    cache = tmp_path / "cache"
    replay(small_synth, cache)
    out = tmp_path / "d.csv"
    assert cli.main(["discover", "--cache-dir", str(cache), "--roots", str(small_synth / "roots.csv"),
                     "--max-depth", "0", "--out", str(out), *rng_args()]) == 0
    assert out.read_text().splitlines() == ["parent,child,label,origin,evidence_tx,evidence_holders"]


def test_discover_reports_iterations(tmp_path, small_synth, capsys):
    cache = tmp_path / "cache"
    replay(small_synth, cache)
    capsys.readouterr()
    cli.main(["discover", "--cache-dir", str(cache), "--roots", str(small_synth / "roots.csv"),
              "--out", str(tmp_path / "d.csv"), *rng_args()])
    out = capsys.readouterr().out
    assert "iteration 1: admitted 2 edges" in out
    assert "iteration 2: admitted 1 edges" in out


def test_config_precedence(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"endpoint": "http://file", "workers": 3, "max_depth": 2, "cache_dir": "from-file"}))
    parser = cli.build_parser()
    args = parser.parse_args(["discover", "--config", str(config), "--max-depth", "5"])
    cfg = cli.resolve_config(args, env={RPC_URL_ENV: "http://env"})
    assert (cfg.endpoint, cfg.workers, cfg.max_depth, cfg.cache_dir) == ("http://env", 3, 5, "from-file")
    assert cfg.from_block == cli.DEFAULT_FROM_BLOCK and cfg.to_block == cli.DEFAULT_TO_BLOCK
    cfg = cli.resolve_config(parser.parse_args(["discover"]), env={})
    assert cfg.endpoint is None and cfg.max_depth == cli.DEFAULT_MAX_DEPTH


def test_unknown_config_key_rejected(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"endpiont": "x"}))
    assert cli.main(["discover", "--config", str(config)]) == 1


def test_timestamp_bucketing_from_cli(tmp_path):
    cache = tmp_path / "cache"
    logs = [encode_transfer(transfer(addr(0xDA1), addr(1), addr(2), 5, b, 0, b)) for b in (100, 150, 210)]
    from composability.ingestion import BlockRange, write_cache

    write_cache(logs, cache, 100, BlockRange(100, 299))
    roots = tmp_path / "roots.csv"
    roots.write_text(f"root_id,token_address,initial_distance\nDAI,{addr(0xDA1)},0\n")
    reg = tmp_path / "reg.csv"
    reg.write_text("parent,child,label,origin\n")
    ts = tmp_path / "ts.csv"
    ts.write_text("100,1580511600\n200,1580515200\n")
    out = tmp_path / "r.csv"
    assert cli.main(["classify", "--cache-dir", str(cache), "--roots", str(roots), "--registry", str(reg),
                     "--timestamps", str(ts), "--out", str(out), "--from-block", "100", "--to-block", "299"]) == 0
    rows = Path(out).read_text().splitlines()
    assert rows[-2:] == ["DAI,0,100,199,0,2,0.000000", "DAI,1,200,299,0,1,0.000000"]
