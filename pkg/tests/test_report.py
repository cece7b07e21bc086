import re

import numpy as np
import pandas as pd
import pytest

from sparsekit.bench import CSV_COLUMNS
from sparsekit.experiments import RUN_COLUMNS, summarize_runs
from sparsekit.report import (BENCH_COLUMNS, QUANT_COLUMNS, RECOVERY_COLUMNS, bench_table, recovery_table,
                              render_report, write_report)


def _runs():
    rows = [dict(sparsity=0.5, variant="ce", seed=0, accuracy=0.8, entropy=1.0, diverged=False,
                 train_entropy=0.9, diverged_step=None, pattern="", error=""),
            dict(sparsity=0.5, variant="ce", seed=1, accuracy=0.6, entropy=1.2, diverged=True,
                 train_entropy=1.1, diverged_step=40, pattern="", error=""),
            dict(sparsity=0.9, variant="squarehead", seed=0, accuracy=np.nan, entropy=np.nan, diverged=False,
                 train_entropy=np.nan, diverged_step=None, pattern="", error="degenerate teacher")]
    return pd.DataFrame(rows, columns=RUN_COLUMNS)


def _bench():
    base = dict(shape_rows=64, shape_cols=96, threads=1, mean_ns=1.0, p95_ns=1.0, bytes_moved=1, gbps=1.0)
    return pd.DataFrame([dict(base, sparsity=0.0, value_width="fp32", median_ns=1000.0, self_speedup=1.0),
                         dict(base, sparsity=0.5, value_width="fp16", median_ns=500.0, self_speedup=2.0)],
                        columns=CSV_COLUMNS)


class TestTables:
    def test_recovery(self):
        table = recovery_table(_runs())
        assert list(table.columns) == RECOVERY_COLUMNS
        first = table.iloc[0]
        assert first["accuracy"] == pytest.approx(0.7)
        assert first["compression_ratio"] == pytest.approx(2.0)
        assert first["diverged"] == 1 and first["seeds"] == 2
        assert table.iloc[1]["failed"] == 1

    def test_bench_storage_model(self):
        table = bench_table({"bench.csv": _bench()})
        assert list(table.columns) == BENCH_COLUMNS
        assert table["bits_per_weight"].tolist() == pytest.approx([32.0, 9.0])
        assert table["theoretical_speedup"].tolist() == pytest.approx([1.0, 32 / 9])

    def test_summarize_with_teacher(self):
        table = summarize_runs(_runs(), teacher_accuracy=0.8)
        assert table.iloc[0]["recovery"] == pytest.approx(0.875)


class TestRender:
    def test_empty_directory(self, tmp_path):
        text, tables, missing = render_report(str(tmp_path))
        assert "## No runs" in text
        assert tables == {}
        assert "runs.csv" in missing

    def test_full_directory(self, tmp_path):
        _runs().to_csv(tmp_path / "runs.csv", index=False)
        pd.DataFrame([dict(sparsity=0.5, variant="ce", seed=0, pattern="", fp32_accuracy=0.8,
                           int8_accuracy=0.79, delta=-0.01)]).to_csv(tmp_path / "quant.csv", index=False)
        _bench().to_csv(tmp_path / "bench_64x96.csv", index=False)
        path, tables, missing = write_report(str(tmp_path))
        assert missing == []
        assert set(tables) == {"recovery", "quant", "bench"}
        assert list(tables["quant"].columns) == QUANT_COLUMNS
        assert tables["quant"].iloc[0]["bits_per_weight_int8"] == pytest.approx(5.0)
        text = open(path).read()
        assert "## Failed runs" in text and "degenerate teacher" in text
        for name in ("recovery", "quant", "bench"):
            assert (tmp_path / f"report_{name}.csv").exists()

    def test_tables_are_pipe_markdown(self, tmp_path):
        _runs().to_csv(tmp_path / "runs.csv", index=False)
        text, _, _ = render_report(str(tmp_path))
        lines = text.splitlines()
        header = next(k for k, line in enumerate(lines) if re.match(r"\|\s*sparsity\s*\|", line))
        assert [cell.strip() for cell in lines[header].strip("|").split("|")] == RECOVERY_COLUMNS
        assert set(lines[header + 1]) <= set("|-: ")
        assert "0.7000" in text
