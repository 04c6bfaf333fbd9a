"""Run configuration and its flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from pcad.errors import DataError

STRATEGIES = ("identity", "random", "greedy", "greedy_projected", "correspondence")
STAGES = ("M6", "M7", "M8", "M9")
DEFECT_KINDS = ("convex", "concave", "scratch", "scar", "deformation")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    N: int = 1000
    K: int = 3
    gamma: float = 0.3
    scales: tuple[int, ...] = (40, 80, 120)
    aggregation_m: int = 128
    centers_G: int = 1024
    normal_k: int = 20
    strategy: str = "correspondence"
    stage: str = "M9"
    use_simulated: bool = True
    seed: int = 7
    proj_dim: int = 16
    # multiplier applied to feature rows before banking/scoring; 0 = 1 / median normal row norm
    feature_scale: float = 0.0
    # simulated anomalies (one per normal training cloud)
    sim_kinds: tuple[str, ...] = ("convex", "concave")
    sim_ratio: float = 0.012
    sim_magnitude: float = 3.0
    label_masked: bool = False
    propagation: str = "nearest"
    clamp_alpha: bool = True
    # open-set protocol
    seen_kinds: tuple[str, ...] = ("convex", "concave")
    shots: int = 5
    folds: int = 5
    manifest: str = ""
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.N < 1:
            problems.append("N must be >= 1")
        if self.K < 1:
            problems.append("K must be >= 1")
        if not self.gamma >= 0:
            problems.append("gamma must be >= 0")
        if not self.scales or any(s < 1 for s in self.scales) or list(self.scales) != sorted(set(self.scales)):
            problems.append("scales must be non-empty, positive and strictly ascending")
        if self.aggregation_m < 1:
            problems.append("aggregation_m must be >= 1")
        if self.centers_G < 1:
            problems.append("centers_G must be >= 1")
        if self.normal_k < 3:
            problems.append("normal_k must be >= 3")
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.stage not in STAGES:
            problems.append(f"stage must be one of {STAGES}")
        if self.proj_dim < 1:
            problems.append("proj_dim must be >= 1")
        if not self.feature_scale >= 0:
            problems.append("feature_scale must be >= 0")
        if self.propagation not in ("nearest", "idw3"):
            problems.append("propagation must be 'nearest' or 'idw3'")
        for kind in (*self.sim_kinds, *self.seen_kinds):
            if kind not in DEFECT_KINDS:
                problems.append(f"unknown defect kind {kind!r}")
        if not 0 < self.sim_ratio <= 0.05:
            problems.append("sim_ratio must lie in (0, 0.05]")
        if problems:
            raise DataError("invalid configuration: " + "; ".join(problems))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def snapshot(self) -> str:
        """``to_text`` minus the output location, for embedding in written artifacts."""
        return "".join(ln + "\n" for ln in self.to_text().splitlines() if not ln.startswith("out="))

    def as_dict(self) -> dict[str, str]:
        return dict(line.split("=", 1) for line in self.to_text().splitlines())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            pairs[key] = value
        return (base or cls()).with_overrides(pairs)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def with_overrides(self, pairs: dict) -> "RunConfig":
        """Apply string (or already typed) values by field name."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        defaults = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        changes = {}
        for key, value in pairs.items():
            if key not in types:
                raise DataError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, value, defaults[key])
        return dataclasses.replace(self, **changes)


def _coerce(key, value, default):
    if not isinstance(value, str):
        return tuple(value) if isinstance(default, tuple) else value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(v) for v in items)
            return tuple(items)
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse {value!r}") from None
    return value
