import json
import math

import pytest

from irrlab import harness
from irrlab.harness import ExperimentConfig, ComparisonReport, ComparisonRow
from irrlab.stats import SummaryStats, summarize

TINY = dict(interaction_count=12, interaction_rate_hz=40.0, resolution=(48, 48))


def test_summarize_small_example():
    s = summarize([1, 2, 3])
    assert (s.mean_ms, s.variance, s.stddev_ms, s.min, s.max, s.n) == (2, 1, 1, 1, 3, 3)


def test_variance_is_stddev_squared():
    s = summarize([10.0, 12.2, 14.4, 16.6, 18.8])
    assert s.stddev_ms**2 == pytest.approx(s.variance)
    s = summarize([0, 4.4])
    assert s.stddev_ms == pytest.approx(math.sqrt(9.68))


def test_summarize_needs_two():
    with pytest.raises(ValueError):
        summarize([5.0])


def test_stats_dict_round_trip():
    s = summarize([3.5, 1.25, 9.0])
    assert SummaryStats.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_template_sequence_deterministic():
    a = harness.template_sequence(50, 7)
    assert a == harness.template_sequence(50, 7)
    assert a != harness.template_sequence(50, 8)
    assert set(a) <= {"a", "d"}
    with pytest.raises(ValueError):
        harness.template_sequence(0, 1)


def test_generate_and_load_template(tmp_path):
    path = harness.generate_template(tmp_path / "sub" / "t.txt", 30, seed=2)
    assert harness.load_template(path) == harness.template_sequence(30, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(interaction_count=0)
    with pytest.raises(ValueError):
        ExperimentConfig(interaction_rate_hz=-1)
    fast = ExperimentConfig.fast(seed=3)
    assert (fast.interaction_count, fast.interaction_rate_hz, fast.seed) == (100, 20.0, 3)


def test_template_path_overrides_count(tmp_path):
    path = harness.generate_template(tmp_path / "t.txt", 5)
    assert len(ExperimentConfig(template_path=str(path), interaction_count=99).interactions()) == 5


def test_baseline_writes_outputs(tmp_path):
    cfg = ExperimentConfig(name="base", output_dir=str(tmp_path), **TINY)
    r = harness.run_baseline(cfg)
    assert r.complete and r.stats.n == 12 and r.shift_ms is None
    out = tmp_path / "base"
    assert {p.name for p in out.iterdir()} == {"log.csv", "stats.json", "report.txt", "plot.csv"}
    plot = (out / "plot.csv").read_text().splitlines()
    assert plot[0] == "index,il_ms,frame_bytes" and len(plot) == 13
    assert r.mean_frame_bytes > 0
    assert json.loads((out / "stats.json").read_text())["mean_frame_bytes"] == r.mean_frame_bytes
    back = harness.load_run(out)
    assert back.stats == r.stats
    assert [m.guid for m in back.measurements] == [m.guid for m in r.measurements]


def test_simulated_shift_and_repetitions(tmp_path):
    cfg = ExperimentConfig(name="sim", injected_delay_ms=30, repetitions=2, output_dir=None, **TINY)
    r = harness.run_simulated(cfg)
    assert r.stats.n == 24 and len(r.repetition_means) == 2
    assert [m.index for m in r.measurements] == list(range(24))
    assert abs(r.shift_ms - 30) < 5
    assert "sim" in harness.format_table([r])


def test_simulated_with_given_base():
    cfg = ExperimentConfig(output_dir=None, **TINY)
    r = harness.run_simulated(cfg, il_base=1.0, delay_ms=10)
    assert r.injected_delay_ms == 10
    assert r.shift_ms == pytest.approx(r.stats.mean_ms - 1.0)


def test_empty_comparison():
    report = harness.run_comparison(ExperimentConfig(output_dir=None), [])
    assert report.rows == []
    assert json.loads(report.to_json()) == {"rows": []}


def test_comparison_report_json_round_trip():
    row = ComparisonRow(50.0, 60.0, 70.0, 10.0, 10, 10, 0, 0, 16.7, 97.0)
    report = ComparisonReport([row])
    data = json.loads(report.to_json())
    assert ComparisonRow(**data["rows"][0]) == row
    assert "70.00" in report.format()
