"""Report table/document round trips and format stability."""

import numpy as np

from lprobe.protocol import ExperimentReport
from lprobe.reports import (REPORT_COLUMNS, read_report_table, report_row,
                            write_report_document, write_report_table)

SEGMENTS = ["m_0", "m_1", "m_2", "m_3", "m_4", "m_fc"]


def sample_report(robust=0.3141592653589793, seed=1):
    return ExperimentReport(
        plan="cutoff:upto:m_1:adversarial",
        pretrain_mode="conventional",
        retrain_mode="adversarial",
        trainable_segments={s: s in ("m_0", "m_1") for s in SEGMENTS},
        clean_acc=0.8712345678901234,
        robust_acc=robust,
        eval_epsilon=8 / 255,
        eval_iterations=20,
        seed=seed,
        wall_time=12.5,
    )


def test_table_round_trip_field_exact(tmp_path):
    path = tmp_path / "reports.tsv"
    reports = [sample_report(), sample_report(robust=1 / 3, seed=2)]
    write_report_table(reports, path)
    rows = read_report_table(path)
    assert len(rows) == 2
    for report, row in zip(reports, rows):
        expected = report_row(report)
        assert row == expected  # floats restored bit-exactly via repr round trip
    assert rows[0]["robust_acc"] == 0.3141592653589793
    assert rows[1]["robust_acc"] == 1 / 3


def test_table_format_is_stable(tmp_path):
    path_a, path_b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    write_report_table([sample_report()], path_a)
    write_report_table([sample_report()], path_b)
    assert path_a.read_text() == path_b.read_text()
    header = path_a.read_text().splitlines()[0]
    assert header.split("\t") == list(REPORT_COLUMNS)


def test_decimal_separator_is_dot(tmp_path):
    path = tmp_path / "r.tsv"
    write_report_table([sample_report()], path)
    body = path.read_text()
    assert "," not in body
    assert "0.8712345678901234" in body


def test_document_contains_every_field(tmp_path):
    path = tmp_path / "reports.txt"
    write_report_document([sample_report()], path)
    text = path.read_text()
    for column in REPORT_COLUMNS:
        assert f"  {column}: " in text
    assert "m_0+m_1" in text


def test_trainable_tag_empty_set(tmp_path):
    report = sample_report()
    report.trainable_segments = {s: False for s in SEGMENTS}
    row = report_row(report)
    assert row["trainable"] == "-"
