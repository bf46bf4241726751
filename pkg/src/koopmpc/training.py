"""Two-term prediction loss, reverse-mode gradients, Adam, and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyDataset, TrainingDivergence
from .model import KoopmanModel
from .sampling import Dataset, TrainingWindow, WindowArrays, iter_batches, make_rng, scale_windows


@dataclass
class TrainConfig:
    epochs: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    validation_every: int = 1
    clip_norm: float | None = None
    multi_step_weight: float = 1.0
    cosine_decay: bool = False

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.validation_every < 1:
            raise ConfigError("validation_every must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")


@dataclass
class ModelSpec:
    n_z: int = 10
    encoder_hidden: tuple[int, ...] = (50, 20)
    decoder_hidden: tuple[int, ...] = (20, 50)
    decoder: str = "nonlinear"
    structure: str = "diagonal"
    a_init: tuple[float, float] = (0.05, 0.995)
    decoder_bias: bool = True

    def build(self, dataset: Dataset, rng: np.random.Generator) -> KoopmanModel:
        m = dataset.meta
        hidden = () if self.decoder == "linear" else tuple(self.decoder_hidden)
        return KoopmanModel.create(
            n_x=m["n_x"], n_y=m["n_y"], n_u=m["n_u"], N=m["N"], dt=m["dt"], rng=rng,
            n_z=self.n_z, encoder_hidden=tuple(self.encoder_hidden), decoder_hidden=hidden,
            structure=self.structure, scaling=dataset.scaling,
            embed_inputs=m.get("embed_inputs", False), a_init=tuple(self.a_init),
            decoder_bias=self.decoder_bias,
        )


@dataclass
class LossTerms:
    one_step: float
    multi_step: float
    weight: float = 1.0

    @property
    def total(self) -> float:
        return self.one_step + self.weight * self.multi_step


def _as_arrays(model: KoopmanModel, windows) -> WindowArrays:
    if isinstance(windows, WindowArrays):
        return windows
    if isinstance(windows, TrainingWindow):
        windows = [windows]
    return scale_windows(windows, model.scaling, model.embed_inputs)


def _forward(model: KoopmanModel, arr: WindowArrays):
    # non-finite values are checked by the callers
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(model, arr)


def _forward_impl(model: KoopmanModel, arr: WindowArrays):
    W, s, n_chi = arr.chi.shape
    K = s - 1
    if K < 1:
        raise ValueError("windows need s >= 2")
    dyn = model.dynamics
    enc_out, enc_acts = model.encoder.forward(arr.chi[:, :K].reshape(W * K, n_chi), cache=True)
    z_enc = enc_out.reshape(W, K, -1)
    z_one = dyn.step(z_enc, arr.u)
    z_roll = np.empty_like(z_one)
    z = z_enc[:, 0]
    for k in range(K):
        z = dyn.step(z, arr.u[:, k])
        z_roll[:, k] = z
    dec_in = np.concatenate([z_one, z_roll], axis=0).reshape(2 * W * K, -1)
    pred, dec_acts = model.decoder.forward(dec_in, cache=True)
    pred = pred.reshape(2, W, K, -1)
    diff = pred - arr.target[None, :, 1:]
    return dict(z_enc=z_enc, z_roll=z_roll, diff=diff, enc_acts=enc_acts, dec_acts=dec_acts)


def window_losses(model: KoopmanModel, windows) -> tuple[np.ndarray, np.ndarray]:
    """Per-window one-step and multi-step MSE terms."""
    arr = _as_arrays(model, windows)
    diff = _forward(model, arr)["diff"]
    per = np.mean(diff**2, axis=(2, 3))
    return per[0], per[1]


def loss(model: KoopmanModel, window, multi_step_weight: float = 1.0) -> LossTerms:
    """Loss of one window: one-step term re-encodes every delay window, multi-step rolls out from the first."""
    l1, l2 = window_losses(model, window)
    terms = LossTerms(float(np.mean(l1)), float(np.mean(l2)), multi_step_weight)
    if not math.isfinite(terms.total):
        raise TrainingDivergence("non-finite loss")
    return terms


def loss_and_gradient(model: KoopmanModel, windows, multi_step_weight: float = 1.0, scale: float = 1.0):
    """Mean batch loss and its exact gradient for every parameter in ``model.parameters()``."""
    arr = _as_arrays(model, windows)
    if len(arr) == 0:
        raise EmptyDataset("empty batch")
    W, s, _ = arr.chi.shape
    K = s - 1
    f = _forward(model, arr)
    diff, z_enc, z_roll = f["diff"], f["z_enc"], f["z_roll"]
    n_out = diff.shape[-1]
    per = np.mean(diff**2, axis=(2, 3))
    value = scale * float(np.mean(per[0] + multi_step_weight * per[1]))

    with np.errstate(over="ignore", invalid="ignore"):
        grads = _backward(model, arr, f, scale, multi_step_weight)
    if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDivergence("non-finite loss or gradient")
    return value, grads


def _backward(model: KoopmanModel, arr: WindowArrays, f: dict, scale: float, multi_step_weight: float) -> dict:
    diff, z_enc, z_roll = f["diff"], f["z_enc"], f["z_roll"]
    W, K, n_out = diff.shape[1:]
    dyn = model.dynamics
    c = 2.0 * scale / (W * K * n_out)
    dpred = diff * c
    dpred[1] *= multi_step_weight
    dz, dWd, dbd = model.decoder.backward(f["dec_acts"], dpred.reshape(-1, n_out))
    dz = dz.reshape(2, W, K, -1)
    dz_one, dz_roll = dz[0], dz[1]

    diagonal = dyn.structure == "diagonal"
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    # one-step term: z_one = A z_enc + B u
    dz_enc = dyn.transpose_apply(dz_one)
    if diagonal:
        dA = np.sum(dz_one * z_enc, axis=(0, 1))
    else:
        dA = flat(dz_one).T @ flat(z_enc)
    dB = flat(dz_one).T @ flat(arr.u)
    # multi-step term: adjoint sweep back through the latent recursion
    lam = dz_roll[:, K - 1].copy()
    for k in range(K - 1, -1, -1):
        z_prev = z_roll[:, k - 1] if k > 0 else z_enc[:, 0]
        if diagonal:
            dA = dA + np.sum(lam * z_prev, axis=0)
        else:
            dA = dA + lam.T @ z_prev
        dB = dB + lam.T @ arr.u[:, k]
        lam = dyn.transpose_apply(lam)
        if k > 0:
            lam = lam + dz_roll[:, k - 1]
    dz_enc[:, 0] += lam
    _, dWe, dbe = model.encoder.backward(f["enc_acts"], flat(dz_enc))

    grads = {}
    for i, (gW, gb) in enumerate(zip(dWe, dbe)):
        grads[f"enc.W{i}"] = gW
        if gb is not None:
            grads[f"enc.b{i}"] = gb
    grads["dyn.A"] = dyn.grad_A(dA)
    grads["dyn.B"] = dB
    for i, (gW, gb) in enumerate(zip(dWd, dbd)):
        grads[f"dec.W{i}"] = gW
        if gb is not None:
            grads[f"dec.b{i}"] = gb
    return grads


def loss_gradient(model: KoopmanModel, windows, multi_step_weight: float = 1.0):
    return loss_and_gradient(model, windows, multi_step_weight)[1]


def dataset_loss(model: KoopmanModel, arr: WindowArrays, multi_step_weight: float = 1.0, chunk: int = 64) -> float:
    total = 0.0
    for start in range(0, len(arr), chunk):
        l1, l2 = window_losses(model, arr.take(slice(start, start + chunk)))
        total += float(np.sum(l1 + multi_step_weight * l2))
    return total / len(arr)


class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)


def adam_step(state: Adam, params, grads, config: TrainConfig | None = None) -> Adam:
    state.step(params, grads, None if config is None else config.learning_rate)
    return state


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    wall_time: float = 0.0
    diverged: bool = False

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d

    def write(self, run_dir: str | Path) -> None:
        """``report.json``, ``losses.csv`` and the wall time alone in ``timing.json``."""
        d = Path(run_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.json").write_text(json.dumps(self.to_dict(include_time=False), indent=2) + "\n")
        (d / "timing.json").write_text(json.dumps({"wall_time": self.wall_time}) + "\n")
        lines = ["epoch,train_loss,val_loss"]
        for i, (tl, vl) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{tl:.17g},{'' if vl is None else format(vl, '.17g')}")
        (d / "losses.csv").write_text("\n".join(lines) + "\n")


def _clip(grads: dict, max_norm: float) -> None:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f


def train(
    dataset: Dataset,
    spec: ModelSpec | None = None,
    config: TrainConfig | None = None,
    model: KoopmanModel | None = None,
    progress=None,
) -> tuple[KoopmanModel, TrainReport]:
    """Adam over shuffled mini-batches; returns the snapshot with the lowest validation loss.

    ``model`` continues training from existing parameters instead of a fresh
    initialization.  ``progress(epoch, train_loss, val_loss)`` is called
    after every epoch if given.
    """
    spec = spec or ModelSpec()
    config = config or TrainConfig()
    config.validate()
    if not dataset.train:
        raise EmptyDataset("dataset has no training windows")
    if model is None:
        model = spec.build(dataset, make_rng(config.seed, "init"))
    train_arr = dataset.arrays("train")
    val_arr = dataset.arrays("validation") if dataset.validation else train_arr
    shuffle = make_rng(config.seed, "shuffle")
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    params = model.parameters()
    report = TrainReport()
    best = model.copy()
    w = config.multi_step_weight
    t_start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate
        if config.cosine_decay:
            lr *= 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / config.epochs))
        running = 0.0
        try:
            for idx in iter_batches(len(train_arr), config.batch_size, shuffle):
                value, grads = loss_and_gradient(model, train_arr.take(idx), w)
                if config.clip_norm is not None:
                    _clip(grads, config.clip_norm)
                opt.step(params, grads, lr)
                running += value * len(idx)
        except TrainingDivergence as exc:
            report.diverged = True
            report.wall_time = time.perf_counter() - t_start
            raise TrainingDivergence(f"diverged in epoch {epoch}: {exc}", model=best, report=report) from exc
        report.train_loss.append(running / len(train_arr))
        vl = None
        if epoch % config.validation_every == 0 or epoch == config.epochs:
            vl = dataset_loss(model, val_arr, w)
            if not math.isfinite(vl):
                report.diverged = True
                report.val_loss.append(vl)
                raise TrainingDivergence(f"non-finite validation loss in epoch {epoch}", model=best, report=report)
            if vl < report.best_val_loss:
                report.best_val_loss = vl
                report.best_epoch = epoch
                best = model.copy()
        report.val_loss.append(vl)
        if progress is not None:
            progress(epoch, report.train_loss[-1], vl)
    report.wall_time = time.perf_counter() - t_start
    best.meta["provenance"] = {
        "seed": config.seed,
        "epochs": config.epochs,
        "best_epoch": report.best_epoch,
        "best_validation_loss": report.best_val_loss,
    }
    return best, report


def train_linear_variant(
    dataset: Dataset, config: TrainConfig | None = None, n_z: int = 10, encoder_hidden=(50, 20), **kw
) -> tuple[KoopmanModel, TrainReport]:
    """Same pipeline with the decoder reduced to a single affine map."""
    spec = ModelSpec(n_z=n_z, encoder_hidden=tuple(encoder_hidden), decoder_hidden=(), decoder="linear", **kw)
    return train(dataset, spec, config)
