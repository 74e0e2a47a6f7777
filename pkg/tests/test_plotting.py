import numpy as np

from dpnet.analysis import RateReport
from dpnet.plotting import plot_montage, plot_rate, plot_training
from dpnet.proxnet import TrainLog


def draw_all(directory):
    d = np.geomspace(1e-1, 1e-3, 5)
    rep = RateReport(d, d, d ** 0.5, d, d)
    rng = np.random.default_rng(0)
    imgs = {"a": rng.random((8, 8)), "b": rng.random((8, 8))}
    log = TrainLog([1.0, 0.5, 0.4], [1.1, 0.6, 0.7], 2, 1.2)
    return [
        plot_rate(rep, directory / "r.png", title="rates"),
        plot_montage(imgs, directory / "m.png", truth=imgs["a"]),
        plot_training({"nsn": log}, directory / "t.png"),
    ]


def test_figures_are_byte_identical(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    for pa, pb in zip(draw_all(tmp_path / "a"), draw_all(tmp_path / "b")):
        raw = pa.read_bytes()
        assert raw[:8] == b"\x89PNG\r\n\x1a\n"
        assert raw == pb.read_bytes()
