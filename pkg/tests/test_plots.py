import numpy as np

from unsupseg.contrastive import TrainHistory
from unsupseg.metrics import EvalReport
from unsupseg.plots import plot_history, plot_scores, plot_tuning
from unsupseg.segmenter import ScoreTrack


def test_figures_are_written(tmp_path):
    raw = ScoreTrack(np.sin(np.linspace(0, 6, 50)))
    plot_scores(tmp_path / "s.png", raw, [0.1, 0.3], [0.12], 160, 16000, 0.4)
    table = [(d, EvalReport.from_counts(k, 10, 8)) for d, k in ((0.0, 4), (0.5, 7), (1.0, 2))]
    plot_tuning(tmp_path / "t.png", table, 0.5)
    plot_history(tmp_path / "h.png", TrainHistory([1.8, 1.2], [1.7, 1.3], [1.0, 1.0], 2))
    for name in ("s.png", "t.png", "h.png"):
        data = (tmp_path / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n" and len(data) > 1000
