import json
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vnsemcom import report
from vnsemcom.errors import ConfigurationError
from vnsemcom.report import Collector, MetricRow, emit_csv, emit_json, fmt_value, parse_csv, parse_json


def row(value=0.8185, metric="ssim", round_no=-1, seed=3):
    return MetricRow("fedtrain", "robust/30pct", round_no, metric, value, seed)


def test_empty_csv_is_header_only(tmp_path):
    emit_csv([], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_bytes() == b"experiment,condition,round,metric,value,seed\n"


def test_empty_json(tmp_path):
    emit_json([], tmp_path / "e.json")
    assert json.loads((tmp_path / "e.json").read_text()) == []


def test_six_significant_digits():
    assert fmt_value(0.8185) == "0.818500"
    assert fmt_value(16.0) == "16.0000"
    assert fmt_value(2560000.0) == "2.56000e+06"
    assert fmt_value(0.0) == "0.00000"


def test_csv_row_round_trip(tmp_path):
    r = row()
    emit_csv([r], tmp_path / "r.csv")
    assert parse_csv(tmp_path / "r.csv") == [r]
    text = (tmp_path / "r.csv").read_bytes()
    assert b"\r" not in text and b",0.818500," in text


def test_json_round_trip_and_key_order(tmp_path):
    rows = [row(), row(0.25, "misleading_rate", 4, 9)]
    emit_json(rows, tmp_path / "r.json")
    assert parse_json(tmp_path / "r.json") == rows
    data = json.loads((tmp_path / "r.json").read_text())
    assert list(data[0]) == list(report.FIELDS)
    assert isinstance(data[1]["seed"], int) and data[1]["seed"] == 9


def test_rejects_unregistered_and_non_finite():
    with pytest.raises(ConfigurationError):
        row(metric="sssim")
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ConfigurationError):
            row(bad)
    assert row(metric="class_ssim_3").metric == "class_ssim_3"


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_csv([row()], tmp_path / "missing" / "r.csv")


def test_atomic_write_leaves_old_file_on_failure(tmp_path, monkeypatch):
    path = tmp_path / "r.csv"
    emit_csv([row()], path)
    before = path.read_bytes()

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(report.os, "replace", boom)
    with pytest.raises(OSError):
        emit_csv([row(0.1)], path)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["r.csv"]


def test_collector_value_lookup():
    c = Collector("overhead", 0)
    c.add("latent16", -1, "overhead_ratio", 16)
    assert c.value("latent16", "overhead_ratio") == 16.0
    assert isinstance(c.rows[0].round, int)
    with pytest.raises(KeyError):
        c.value("latent16", "ssim")


@given(st.lists(st.floats(-1e9, 1e9, allow_nan=False), max_size=8), st.integers(0, 2 ** 31))
def test_csv_and_json_agree(tmp_path_factory, values, seed):
    d = tmp_path_factory.mktemp("agree")
    rows = [row(v, "ssim", i, seed) for i, v in enumerate(values)]
    emit_csv(rows, d / "a.csv")
    emit_json(rows, d / "a.json")
    assert parse_csv(d / "a.csv") == parse_json(d / "a.json")
