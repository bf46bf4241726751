"""Excitation data, delay coordinates, windowing, scaling and dataset I/O.

Random streams
--------------
All randomness comes from numpy's PCG64 generator.  One integer seed feeds a
``SeedSequence`` and each consumer draws from its own child stream, selected
by a fixed spawn key (see ``STREAMS``).  Adding draws to one stream therefore
never shifts another one, and results are identical across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dynamics import InputProfile, PlantModel, Trajectory, simulate, steady_state
from .errors import DegenerateChannel, EmptyDataset, InsufficientHistory, ShapeError

STREAMS = {"excitation": 0, "split": 1, "init": 2, "shuffle": 3, "test": 4}


def make_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],)))
    )


def random_step_sequence(
    bounds, n_steps: int, step_duration: float, seed: int, t0: float = 0.0, stream: str = "excitation"
) -> InputProfile:
    """``n_steps`` equal-length steps, each level i.i.d. uniform inside ``bounds``."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=float))
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("lower bound above upper bound")
    rng = make_rng(seed, stream)
    draws = rng.random((n_steps, bounds.shape[0]))
    levels = bounds[:, 0] + draws * (bounds[:, 1] - bounds[:, 0])
    breakpoints = t0 + step_duration * np.arange(n_steps)
    return InputProfile(breakpoints, levels)


def build_delay_windows(outputs, N: int, inputs=None) -> np.ndarray:
    """Stack ``[y_k; y_{k-1}; ...; y_{k-N}]`` for every ``k >= N``.

    Returns an array of shape ``(len(outputs) - N, (N+1)*n_y)``; each row is one
    delay-coordinate vector, newest sample first.  With ``inputs`` given, the
    held inputs ``u_{k-1} .. u_{k-N}`` are appended to every row.
    """
    Y = np.asarray(outputs, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    T = Y.shape[0]
    if N < 0:
        raise ValueError("N must be non-negative")
    if T < N + 1:
        raise InsufficientHistory(f"need at least {N + 1} samples, got {T}")
    blocks = [Y[N - j : T - j] for j in range(N + 1)]
    if inputs is not None and N > 0:
        U = np.asarray(inputs, dtype=float)
        blocks += [U[N - j : T - j] for j in range(1, N + 1)]
    return np.hstack(blocks)


@dataclass
class TrainingWindow:
    """``N`` history samples followed by ``s`` window samples, raw units."""

    segment: Trajectory
    N: int
    is_steady: bool = False

    @property
    def s(self) -> int:
        return len(self.segment) - self.N

    @property
    def inputs(self) -> np.ndarray:
        return self.segment.inputs[self.N : self.N + self.s - 1]

    @property
    def states(self) -> np.ndarray:
        return self.segment.states[self.N :]

    @property
    def outputs(self) -> np.ndarray:
        return self.segment.outputs[self.N :]

    def chi_sequence(self, embed_inputs: bool = False) -> np.ndarray:
        return build_delay_windows(
            self.segment.outputs, self.N, self.segment.inputs if embed_inputs else None
        )


def window_dataset(record: Trajectory, s: int, stride: int, N: int) -> list[TrainingWindow]:
    """Slide a length-``s`` window every ``stride`` samples, keeping ``N`` samples of history."""
    T = len(record)
    if s < 2 or stride < 1:
        raise ValueError("s must be >= 2 and stride >= 1")
    if T < N + s:
        raise InsufficientHistory(f"record of {T} samples is shorter than N + s = {N + s}")
    return [TrainingWindow(record.slice(start - N, start + s), N) for start in range(N, T - s + 1, stride)]


def augment_steady_windows(plant: PlantModel, input_levels, s: int, N: int, dt: float, x_guess=None) -> list[TrainingWindow]:
    """One constant window per input level, sitting at that level's steady state."""
    windows = []
    for u in np.atleast_2d(np.asarray(input_levels, dtype=float)):
        xs = steady_state(plant, u, x_guess)
        ys = plant.output_map(xs, u)
        n = N + s
        seg = Trajectory(dt, np.tile(u, (n, 1)), np.tile(xs, (n, 1)), np.tile(ys, (n, 1)), -N * dt)
        windows.append(TrainingWindow(seg, N, is_steady=True))
    return windows


@dataclass
class ScalingSpec:
    """Per-channel min-max scaling with optional natural log applied first.

    Channels are grouped as ``u``, ``x`` and ``y``; ``lo``/``hi`` are in the
    (possibly log) transformed domain.
    """

    log: dict[str, np.ndarray]
    lo: dict[str, np.ndarray]
    hi: dict[str, np.ndarray]

    def transform(self, group: str, values) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        log = self.log[group]
        if log.any():
            v = np.where(log, np.log(np.where(log, v, 1.0)), v)
        return (v - self.lo[group]) / (self.hi[group] - self.lo[group])

    def inverse(self, group: str, values) -> np.ndarray:
        v = np.asarray(values, dtype=float) * (self.hi[group] - self.lo[group]) + self.lo[group]
        log = self.log[group]
        if log.any():
            v = np.where(log, np.exp(v), v)
        return v

    def derivative(self, group: str, raw) -> np.ndarray:
        """d(scaled)/d(raw) evaluated at raw values (elementwise)."""
        raw = np.asarray(raw, dtype=float)
        d = 1.0 / (self.hi[group] - self.lo[group])
        log = self.log[group]
        return np.where(log, d / np.where(log, raw, 1.0), d)

    def stacked(self, key: str) -> np.ndarray:
        """Concatenate one attribute over the ``x`` then ``y`` groups."""
        return np.concatenate([getattr(self, key)["x"], getattr(self, key)["y"]])

    @classmethod
    def identity(cls, n_u: int, n_x: int, n_y: int) -> ScalingSpec:
        sizes = {"u": n_u, "x": n_x, "y": n_y}
        return cls(
            {g: np.zeros(n, dtype=bool) for g, n in sizes.items()},
            {g: np.zeros(n) for g, n in sizes.items()},
            {g: np.ones(n) for g, n in sizes.items()},
        )

    def to_dict(self) -> dict:
        return {
            g: {
                "log": [bool(b) for b in self.log[g]],
                "min": [float(v) for v in self.lo[g]],
                "max": [float(v) for v in self.hi[g]],
            }
            for g in ("u", "x", "y")
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScalingSpec:
        return cls(
            {g: np.array(d[g]["log"], dtype=bool) for g in ("u", "x", "y")},
            {g: np.array(d[g]["min"], dtype=float) for g in ("u", "x", "y")},
            {g: np.array(d[g]["max"], dtype=float) for g in ("u", "x", "y")},
        )


def fit_scaling(windows: Sequence[TrainingWindow], log_channels=(), pin_degenerate: bool = False) -> ScalingSpec:
    """Fit min/max over every sample (history included) of every window.

    ``log_channels`` names channels as in the trajectory CSV header (``u1``,
    ``x3``, ``y2``...).  Zero-range channels raise unless ``pin_degenerate``,
    in which case they get a unit range centred on the constant value.
    """
    if not windows:
        raise EmptyDataset("no windows to fit scaling on")
    data = {
        "u": np.vstack([w.segment.inputs for w in windows]),
        "x": np.vstack([w.segment.states for w in windows]),
        "y": np.vstack([w.segment.outputs for w in windows]),
    }
    log_channels = set(log_channels)
    spec = ScalingSpec({}, {}, {})
    for g, arr in data.items():
        flags = np.array([f"{g}{i + 1}" in log_channels for i in range(arr.shape[1])], dtype=bool)
        if np.any(arr[:, flags] <= 0):
            bad = [f"{g}{i + 1}" for i in np.flatnonzero(flags & np.any(arr <= 0, axis=0))]
            raise ValueError(f"log channels must be strictly positive: {bad}")
        vals = np.where(flags, np.log(np.where(flags, arr, 1.0)), arr)
        lo, hi = vals.min(axis=0), vals.max(axis=0)
        for i in np.flatnonzero(hi <= lo):
            if not pin_degenerate:
                raise DegenerateChannel(f"{g}{i + 1}")
            lo[i], hi[i] = lo[i] - 0.5, hi[i] + 0.5
        spec.log[g], spec.lo[g], spec.hi[g] = flags, lo, hi
    return spec


@dataclass
class WindowArrays:
    """Scaled, stacked tensors for a list of equal-length windows."""

    chi: np.ndarray  # (W, s, n_chi)
    u: np.ndarray  # (W, s-1, n_u)
    target: np.ndarray  # (W, s, n_x + n_y)

    def __len__(self) -> int:
        return self.chi.shape[0]

    def take(self, idx) -> WindowArrays:
        return WindowArrays(self.chi[idx], self.u[idx], self.target[idx])


def scale_windows(windows: Sequence[TrainingWindow], scaling: ScalingSpec, embed_inputs: bool = False) -> WindowArrays:
    if not windows:
        raise EmptyDataset("no windows")
    s = {w.s for w in windows}
    if len(s) != 1:
        raise ShapeError("all windows must share the same length")
    chi, u, tgt = [], [], []
    for w in windows:
        seg = w.segment
        ys = scaling.transform("y", seg.outputs)
        us = scaling.transform("u", seg.inputs)
        chi.append(build_delay_windows(ys, w.N, us if embed_inputs else None))
        u.append(us[w.N : w.N + w.s - 1])
        tgt.append(np.hstack([scaling.transform("x", w.states), ys[w.N :]]))
    return WindowArrays(np.stack(chi), np.stack(u), np.stack(tgt))


@dataclass
class Dataset:
    train: list[TrainingWindow]
    validation: list[TrainingWindow]
    scaling: ScalingSpec
    meta: dict = field(default_factory=dict)

    def arrays(self, which: str = "train") -> WindowArrays:
        windows = self.train if which == "train" else self.validation
        return scale_windows(windows, self.scaling, self.meta.get("embed_inputs", False))

    def save(self, directory: str | Path) -> Path:
        """Write ``meta.json`` plus one CSV per window under ``train/`` and ``val/``."""
        d = Path(directory)
        for sub, windows in (("train", self.train), ("val", self.validation)):
            (d / sub).mkdir(parents=True, exist_ok=True)
            for old in (d / sub).glob("*.csv"):
                old.unlink()
            for i, w in enumerate(windows):
                w.segment.to_csv(d / sub / f"{i:04d}.csv")
        meta = dict(self.meta)
        meta["scaling"] = self.scaling.to_dict()
        meta["steady"] = {
            "train": [i for i, w in enumerate(self.train) if w.is_steady],
            "val": [i for i, w in enumerate(self.validation) if w.is_steady],
        }
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> Dataset:
        d = Path(directory)
        meta = json.loads((d / "meta.json").read_text())
        scaling = ScalingSpec.from_dict(meta.pop("scaling"))
        steady = meta.pop("steady")
        N, dt = int(meta["N"]), float(meta["dt"])
        parts = {}
        for sub in ("train", "val"):
            files = sorted((d / sub).glob("*.csv"))
            flags = set(steady[sub])
            parts[sub] = [
                TrainingWindow(Trajectory.from_csv(f, dt=dt), N, is_steady=i in flags)
                for i, f in enumerate(files)
            ]
        return cls(parts["train"], parts["val"], scaling, meta)


def split_and_batch(
    windows: Sequence[TrainingWindow], train_fraction: float = 0.8, batch_size: int = 32, seed: int = 0
) -> tuple[list, list, Iterator[list]]:
    """Seeded shuffle, split, and a first-epoch batch iterator over the training part."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if not windows:
        raise EmptyDataset("cannot split an empty window list")
    n = len(windows)
    order = make_rng(seed, "split").permutation(n)
    n_train = int(round(train_fraction * n))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    train = [windows[i] for i in order[:n_train]]
    val = [windows[i] for i in order[n_train:]]
    return train, val, iter_batches(len(train), batch_size, make_rng(seed, "shuffle"))


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    """Index batches over ``range(n)``, shuffled when ``rng`` is given; last partial batch kept."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@dataclass
class SamplingConfig:
    n_steps: int = 60
    step_duration: float = 120.0
    dt: float = 2.0
    substeps: int = 20
    N: int = 20
    s: int = 60
    stride: int = 10
    train_fraction: float = 0.8
    batch_size: int = 32
    steady_windows: bool = True
    embed_inputs: bool = False
    log_channels: tuple[str, ...] | None = None


def default_log_channels(plant: PlantModel) -> tuple[str, ...]:
    """Composition-like channels: every column state plus the measured tray."""
    if plant.name == "column":
        return tuple(f"x{i + 1}" for i in range(plant.n_x)) + ("y3",)
    return ()


def generate_record(plant: PlantModel, cfg: SamplingConfig, seed: int, input_bounds=None) -> tuple[Trajectory, InputProfile]:
    """Simulate the plant from the steady state at the first level through a random step sequence."""
    bounds = plant.input_bounds if input_bounds is None else np.asarray(input_bounds, dtype=float)
    profile = random_step_sequence(bounds, cfg.n_steps, cfg.step_duration, seed)
    x0 = steady_state(plant, profile.levels[0])
    t_end = cfg.n_steps * cfg.step_duration
    record = simulate(plant, x0, profile, cfg.dt, t_end, cfg.substeps)
    return record, profile


def generate_dataset(plant: PlantModel, cfg: SamplingConfig, seed: int, plant_config: dict | None = None) -> Dataset:
    """The whole data pipeline: excitation, windows, steady windows, scaling, split."""
    record, profile = generate_record(plant, cfg, seed)
    windows = window_dataset(record, cfg.s, cfg.stride, cfg.N)
    if cfg.steady_windows:
        levels = np.unique(profile.levels, axis=0)
        windows += augment_steady_windows(plant, levels, cfg.s, cfg.N, cfg.dt, x_guess=record.states[0])
    log_channels = default_log_channels(plant) if cfg.log_channels is None else cfg.log_channels
    train, val, _ = split_and_batch(windows, cfg.train_fraction, cfg.batch_size, seed)
    scaling = fit_scaling(train, log_channels, pin_degenerate=True)
    meta = {
        "dt": cfg.dt,
        "N": cfg.N,
        "s": cfg.s,
        "stride": cfg.stride,
        "seed": int(seed),
        "n_steps": cfg.n_steps,
        "step_duration": cfg.step_duration,
        "substeps": cfg.substeps,
        "embed_inputs": cfg.embed_inputs,
        "log_channels": list(log_channels),
        "plant": {"name": plant.name, "params": {k: v for k, v in (plant_config or {}).items()}},
        "n_u": plant.n_u,
        "n_x": plant.n_x,
        "n_y": plant.n_y,
    }
    return Dataset(train, val, scaling, meta)
