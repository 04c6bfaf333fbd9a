import pytest

from pcad.config import RunConfig
from pcad.errors import DataError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.N, cfg.K, cfg.gamma, cfg.scales, cfg.aggregation_m) == (1000, 3, 0.3, (40, 80, 120), 128)
    assert (cfg.centers_G, cfg.normal_k, cfg.strategy, cfg.stage, cfg.use_simulated, cfg.seed) == (
        1024, 20, "correspondence", "M9", True, 7)


@pytest.mark.parametrize("change", [
    {"N": 0}, {"K": 0}, {"gamma": -0.1}, {"scales": ()}, {"scales": (80, 40)}, {"scales": (40, 40)},
    {"aggregation_m": 0}, {"centers_G": 0}, {"strategy": "kmeans"}, {"stage": "M5"}, {"seen_kinds": ("dent",)},
])
def test_invalid_values(change):
    with pytest.raises(DataError, match="invalid configuration"):
        RunConfig(**change)


def test_text_roundtrip():
    cfg = RunConfig(N=50, gamma=0.25, scales=(10, 20), use_simulated=False, seen_kinds=("scar",))
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_file_comments_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# banks\nN = 200  # smaller\n\nstage=M7\nuse_simulated=no\n")
    cfg = RunConfig.from_file(p)
    assert (cfg.N, cfg.stage, cfg.use_simulated) == (200, "M7", False)
    assert cfg.with_overrides({"N": "300"}).N == 300
    with pytest.raises(DataError, match="unknown config key"):
        cfg.with_overrides({"bogus": "1"})
    with pytest.raises(DataError, match="cannot parse"):
        cfg.with_overrides({"K": "three"})
    with pytest.raises(DataError, match="line 1"):
        RunConfig.from_text("N 5")
