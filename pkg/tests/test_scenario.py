import dataclasses

import pytest

from leostream.engine import millis, seconds
from leostream.netpath import RateTrace
from leostream.scenario import (
    DEFAULT_MATRIX,
    ScenarioConfig,
    ScenarioError,
    echo_config,
    parse_scenario,
    with_cell,
)


def write(tmp_path, text, name="scn.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_file_yields_full_defaults(tmp_path):
    cfg = parse_scenario(write(tmp_path, ""))
    assert cfg.run_count == 30
    assert cfg.target_buffer_s == 30.0
    assert cfg.playback_buffer_mb == 512.0
    assert cfg.initial_cwnd_pkts == 10
    assert cfg.initial_ssthresh_bytes == 65535
    assert cfg.idle_timeout_s == 30.0
    assert cfg.reordering_threshold_pkts == 2
    assert cfg.max_tail_loss_probes == 5
    assert cfg.min_rto_ms == 200.0
    assert cfg.delayed_ack_ms == 25.0
    assert cfg.initial_rtt_ms == 333.0
    assert cfg.content_s == 60.0
    tc = cfg.transport_config()
    assert tc.min_rto_ns == millis(200)
    assert tc.initial_rtt_ns == millis(333)


def test_default_matrix_matches_evaluated_schemes():
    assert DEFAULT_MATRIX == (
        ("tcp", "bbr"), ("tcp", "newreno"), ("tcp", "cubic"),
        ("quic", "bbr"), ("quic", "newreno"),
    )


def test_comments_and_overrides(tmp_path):
    cfg = parse_scenario(write(tmp_path, """
# comment line
run_count = 1   # trailing comment
transport = quic
cc = bbr
ladder_bps = 500000,1000000,2000000
"""))
    assert cfg.run_count == 1
    assert cfg.transport == "quic"
    assert cfg.ladder_bps == (500_000, 1_000_000, 2_000_000)


def test_min_rto_zero_is_range_error(tmp_path):
    with pytest.raises(ScenarioError, match="line 1.*min_rto_ms"):
        parse_scenario(write(tmp_path, "min_rto_ms = 0\n"))


def test_unknown_key_reports_line_number(tmp_path):
    with pytest.raises(ScenarioError, match="line 2.*unknown key"):
        parse_scenario(write(tmp_path, "run_count = 2\nbogus = 1\n"))


def test_duplicate_key_rejected(tmp_path):
    with pytest.raises(ScenarioError, match="duplicate"):
        parse_scenario(write(tmp_path, "run_count = 2\nrun_count = 3\n"))


def test_bad_value_type_reported(tmp_path):
    with pytest.raises(ScenarioError, match="line 1.*cannot parse"):
        parse_scenario(write(tmp_path, "run_count = many\n"))


def test_loss_probability_range(tmp_path):
    with pytest.raises(ScenarioError, match="probability"):
        parse_scenario(write(tmp_path, "backhaul_loss = 1.5\n"))


def test_missing_equals_sign(tmp_path):
    with pytest.raises(ScenarioError, match="line 1"):
        parse_scenario(write(tmp_path, "run_count 2\n"))


def test_echo_round_trips(tmp_path):
    cfg = parse_scenario(write(tmp_path, "transport = quic\ncc = bbr\nn_users = 2\n"))
    echo = tmp_path / "resolved.txt"
    echo_config(cfg, echo)
    cfg2 = parse_scenario(echo)
    a = dataclasses.asdict(cfg)
    b = dataclasses.asdict(cfg2)
    a.pop("base_dir"), b.pop("base_dir")
    assert a == b


def test_trace_resolved_relative_to_scenario_dir(tmp_path):
    (tmp_path / "bh.txt").write_text("0 5000000\n10 1000000\n")
    cfg = parse_scenario(write(tmp_path, "backhaul_trace = bh.txt\n"))
    path = cfg.path_config()
    assert isinstance(path.backhaul_down.rate_bps, RateTrace)
    assert path.backhaul_down.rate_bps.rate_at(seconds(11)) == 1_000_000


def test_queue_sizing_bdp_rule():
    cfg = ScenarioConfig()  # 10 Mbit/s x 333 ms / 8 / 1240 B = ~336 pkts
    spec = cfg.path_config().backhaul_down
    assert spec.queue_capacity_pkts == round(10e6 * 0.333 / 8 / 1240)
    explicit = ScenarioConfig(queue_pkts=77)
    assert explicit.path_config().access_up.queue_capacity_pkts == 77


def test_with_cell_replaces_only_cell():
    cfg = ScenarioConfig()
    cell = with_cell(cfg, "quic", "newreno")
    assert (cell.transport, cell.cc) == ("quic", "newreno")
    assert cell.run_count == cfg.run_count


def test_horizon_is_content_plus_allowance():
    cfg = ScenarioConfig(content_s=60.0, startup_allowance_s=30.0)
    assert cfg.horizon_ns == seconds(90)
