"""Tests for SVG figure rendering."""

from pathlib import Path

import pandas as pd

from src.plots import render_all
from src.processor import write_csv


def _write_loss(run_dir: Path) -> None:
    frame = pd.DataFrame(
        {
            "epoch": [0, 10, 20],
            "total": [50.0, 20.0, 10.0],
            "rec": [40.0, 15.0, 8.0],
            "logq": [-3.0, -2.0, -1.0],
            "logp": [-9.0, -6.0, -5.0],
            "corr_1": [0.2, 0.6, 0.9],
            "corr_2": [0.1, 0.5, 0.95],
        }
    )
    write_csv(frame, run_dir / "loss.csv")


class TestRenderAll:
    """Test figure rendering from run CSVs."""

    def test_only_available_tables(self, tmp_path: Path) -> None:
        """Figures are drawn only for the CSVs present."""
        _write_loss(tmp_path)
        assert render_all(tmp_path) == [tmp_path / "loss.svg"]
        assert (tmp_path / "loss.svg").read_text().lstrip().startswith("<?xml")

    def test_reproducible_output(self, tmp_path: Path) -> None:
        """Rendering the same table twice gives byte-identical SVG."""
        _write_loss(tmp_path)
        first = render_all(tmp_path)[0].read_bytes()
        second = render_all(tmp_path)[0].read_bytes()
        assert first == second

    def test_empty_directory(self, tmp_path: Path) -> None:
        """A directory without tables renders nothing."""
        assert render_all(tmp_path) == []
