"""Reduced Koopman model: delay-coordinate encoder, linear latent dynamics, decoder.

All computation here happens in scaled units; ``KoopmanModel.scaling``
converts at the boundary when raw values are requested.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import (
    CheckpointFormatError,
    DivergenceError,
    NonRepresentableDynamics,
    ShapeError,
    StructureMismatch,
)
from .sampling import ScalingSpec, build_delay_windows

SCHEMA_VERSION = 1
STRUCTURES = ("diagonal", "dense", "block_diagonal")


class Mlp:
    """Fully connected net, tanh on hidden layers and identity on the output.

    Weights are stored ``(fan_in, fan_out)`` so a batch of row vectors maps as
    ``x @ W + b``.  ``biases[i]`` may be ``None`` for a bias-free layer.
    """

    def __init__(self, weights, biases):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [None if b is None else np.asarray(b, dtype=float) for b in biases]
        for W0, W1 in zip(self.weights, self.weights[1:]):
            if W0.shape[1] != W1.shape[0]:
                raise ShapeError("layer sizes do not chain")

    @classmethod
    def init(cls, layer_sizes, rng: np.random.Generator, output_bias: bool = True) -> Mlp:
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for i, (fi, fo) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            limit = np.sqrt(6.0 / (fi + fo))
            weights.append(rng.uniform(-limit, limit, size=(fi, fo)))
            last = i == len(layer_sizes) - 2
            biases.append(np.zeros(fo) if (output_bias or not last) else None)
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def is_linear(self) -> bool:
        return len(self.weights) == 1

    def forward(self, x, cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        lead = x.shape[:-1]
        a = x.reshape(-1, self.n_in)
        acts = [a]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = a @ W
            if b is not None:
                h = h + b
            a = h if i == last else np.tanh(h)
            acts.append(a)
        out = a.reshape(*lead, self.n_out)
        return (out, acts) if cache else out

    def backward(self, acts, dout, param_grads: bool = True):
        """Reverse pass; returns ``(d_input, dW list, db list)``."""
        d = np.asarray(dout, dtype=float).reshape(-1, self.n_out)
        dWs, dbs = [], []
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            W, b = self.weights[i], self.biases[i]
            if i != last:
                d = d * (1.0 - acts[i + 1] ** 2)
            if param_grads:
                dWs.append(acts[i].T @ d)
                dbs.append(None if b is None else d.sum(axis=0))
            d = d @ W.T
        dWs.reverse()
        dbs.reverse()
        return d, dWs, dbs

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = W
            if b is not None:
                out[f"{prefix}.b{i}"] = b
        return out

    def copy(self) -> Mlp:
        return Mlp([W.copy() for W in self.weights], [None if b is None else b.copy() for b in self.biases])


@dataclass
class LatentDynamics:
    """Discrete ``z+ = A z + B u``.

    ``diagonal`` stores the ``n_z`` diagonal entries; ``block_diagonal`` stores
    one ``(sigma, omega)`` pair per 2x2 block ``[[sigma, omega], [-omega, sigma]]``.
    """

    structure: str
    A: np.ndarray
    B: np.ndarray
    dt: float

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ShapeError(f"unknown structure {self.structure!r}")
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        n = self.B.shape[0]
        expected = {"diagonal": (n,), "dense": (n, n), "block_diagonal": (n // 2, 2)}[self.structure]
        if self.A.shape != expected or (self.structure == "block_diagonal" and n % 2):
            raise ShapeError(f"{self.structure} A must have shape {expected}")

    @property
    def n_z(self) -> int:
        return self.B.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    def matrix(self) -> np.ndarray:
        if self.structure == "diagonal":
            return np.diag(self.A)
        if self.structure == "dense":
            return self.A
        M = np.zeros((self.n_z, self.n_z))
        for j, (sig, om) in enumerate(self.A):
            M[2 * j : 2 * j + 2, 2 * j : 2 * j + 2] = [[sig, om], [-om, sig]]
        return M

    def step(self, z, u):
        """One step for a single latent or a batch of row latents."""
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.shape[-1] != self.n_z or u.shape[-1] != self.n_u:
            raise ShapeError("latent or input width mismatch")
        drive = u @ self.B.T
        if self.structure == "diagonal":
            return z * self.A + drive
        return z @ self.matrix().T + drive

    def transpose_apply(self, lam):
        """``lam @ A`` for row vectors, i.e. ``A^T`` applied to each adjoint."""
        if self.structure == "diagonal":
            return lam * self.A
        return lam @ self.matrix()

    def grad_A(self, dA_dense_or_diag):
        """Project a gradient w.r.t. the dense matrix onto the stored parameters."""
        G = dA_dense_or_diag
        if self.structure in ("diagonal", "dense"):
            return G
        out = np.empty_like(self.A)
        out[:, 0] = G[0::2, 0::2].diagonal() + G[1::2, 1::2].diagonal()
        out[:, 1] = G[0::2, 1::2].diagonal() - G[1::2, 0::2].diagonal()
        return out

    def copy(self) -> LatentDynamics:
        return LatentDynamics(self.structure, self.A.copy(), self.B.copy(), self.dt)


def latent_step(dyn: LatentDynamics, z, u):
    return dyn.step(z, u)


def _phi(x):
    """x / expm1(x) with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x == 0.0, 1.0, x)
    return np.where(x == 0.0, 1.0, safe / np.expm1(safe))


def discrete_to_continuous(dyn: LatentDynamics):
    """Invert the zero-order-hold discretization.

    Returns ``(A_c, B_c)``; ``A_c`` is a vector for diagonal structure and a
    matrix otherwise.
    """
    dt = dyn.dt
    if dyn.structure == "diagonal":
        a = dyn.A
        if np.any(a <= 0):
            raise NonRepresentableDynamics("diagonal entries must be positive to take a real logarithm")
        x = np.log(a)
        return x / dt, dyn.B * (_phi(x) / dt)[:, None]
    M = dyn.matrix()
    ev = np.linalg.eigvals(M)
    if np.any((np.abs(ev.imag) < 1e-12) & (ev.real <= 0)):
        raise NonRepresentableDynamics("eigenvalue on the closed negative real axis")
    Ac = scipy.linalg.logm(M)
    if np.iscomplexobj(Ac):
        if np.max(np.abs(Ac.imag)) > 1e-9:
            raise NonRepresentableDynamics("matrix logarithm is not real")
        Ac = Ac.real
    Ac = Ac / dt
    n = dyn.n_z
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = Ac
    aug[:n, n:] = np.eye(n)
    gamma = scipy.linalg.expm(aug * dt)[:n, n:]
    Bc = np.linalg.solve(gamma, dyn.B)
    return Ac, Bc


def continuous_to_discrete(Ac, Bc, dt: float, structure: str = "diagonal") -> LatentDynamics:
    Ac = np.asarray(Ac, dtype=float)
    Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
    if structure == "diagonal":
        x = Ac * dt
        return LatentDynamics("diagonal", np.exp(x), Bc * (dt / _phi(x))[:, None], dt)
    n, m = Bc.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = Ac
    aug[:n, n:] = Bc
    E = scipy.linalg.expm(aug * dt)
    return LatentDynamics("dense", E[:n, :n], E[:n, n:], dt)


@dataclass
class StabilityReport:
    radius: float
    status: str
    eigenvalues: np.ndarray

    @property
    def stable(self) -> bool:
        return self.status == "stable"


def spectral_check(dyn: LatentDynamics, tol: float = 1e-12) -> StabilityReport:
    ev = dyn.A.astype(complex) if dyn.structure == "diagonal" else np.linalg.eigvals(dyn.matrix())
    r = float(np.max(np.abs(ev)))
    status = "stable" if r < 1.0 - tol else ("marginal" if r <= 1.0 + tol else "unstable")
    return StabilityReport(r, status, ev)


@dataclass
class RolloutResult:
    z: np.ndarray  # (K, n_z), latents z_1..z_K
    x: np.ndarray  # (K, n_x)
    y: np.ndarray  # (K, n_y)
    z0: np.ndarray


@dataclass
class KoopmanModel:
    encoder: Mlp
    dynamics: LatentDynamics
    decoder: Mlp
    scaling: ScalingSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_chi = (self.N + 1) * self.n_y + (self.N * self.n_u if self.embed_inputs else 0)
        if self.encoder.n_in != n_chi:
            raise ShapeError(f"encoder expects {self.encoder.n_in} inputs, delay window has {n_chi}")
        if self.encoder.n_out != self.n_z or self.decoder.n_in != self.n_z:
            raise ShapeError("encoder/decoder latent width disagrees with dynamics")
        if self.decoder.n_out != self.n_x + self.n_y:
            raise ShapeError("decoder must emit n_x + n_y values")
        if self.dynamics.n_u != self.n_u:
            raise ShapeError("input width disagrees with dynamics")

    # meta accessors
    N = property(lambda self: int(self.meta["N"]))
    n_x = property(lambda self: int(self.meta["n_x"]))
    n_y = property(lambda self: int(self.meta["n_y"]))
    n_u = property(lambda self: int(self.meta["n_u"]))
    n_z = property(lambda self: self.dynamics.n_z)
    dt = property(lambda self: self.dynamics.dt)
    embed_inputs = property(lambda self: bool(self.meta.get("embed_inputs", False)))

    @property
    def decoder_kind(self) -> str:
        return "linear" if self.decoder.is_linear else "nonlinear"

    @classmethod
    def create(
        cls,
        n_x: int,
        n_y: int,
        n_u: int,
        N: int,
        dt: float,
        rng: np.random.Generator,
        n_z: int = 10,
        encoder_hidden=(50, 20),
        decoder_hidden=(20, 50),
        structure: str = "diagonal",
        scaling: ScalingSpec | None = None,
        embed_inputs: bool = False,
        a_init=(0.05, 0.995),
        decoder_bias: bool = True,
    ) -> KoopmanModel:
        """Randomly initialized model; empty ``decoder_hidden`` gives the linear variant."""
        n_chi = (N + 1) * n_y + (N * n_u if embed_inputs else 0)
        encoder = Mlp.init([n_chi, *encoder_hidden, n_z], rng)
        decoder = Mlp.init([n_z, *decoder_hidden, n_x + n_y], rng, output_bias=decoder_bias)
        lo, hi = a_init
        # log-uniform spread of the diagonal poles inside (lo, hi)
        poles = np.exp(np.linspace(np.log(lo), np.log(hi), n_z + 2)[1:-1])
        poles = poles[rng.permutation(n_z)]
        if structure == "diagonal":
            A = poles
        elif structure == "dense":
            A = np.diag(poles)
        else:
            A = np.column_stack([poles[: n_z // 2], np.zeros(n_z // 2)])
        limit = np.sqrt(6.0 / (n_z + n_u))
        B = rng.uniform(-limit, limit, size=(n_z, n_u))
        dyn = LatentDynamics(structure, A, B, dt)
        scaling = scaling or ScalingSpec.identity(n_u, n_x, n_y)
        meta = {"N": N, "n_x": n_x, "n_y": n_y, "n_u": n_u, "embed_inputs": embed_inputs}
        return cls(encoder, dyn, decoder, scaling, meta)

    # evaluation ------------------------------------------------------------

    def encode(self, chi):
        return self.encoder.forward(chi)

    def decode(self, z):
        out = self.decoder.forward(z)
        return out[..., : self.n_x], out[..., self.n_x :]

    def latent_step(self, z, u):
        return self.dynamics.step(z, u)

    def rollout(self, chi0, u_sequence, raw: bool = False, check: bool = True) -> RolloutResult:
        """Encode ``chi0`` once, step the latent with every input, decode every step."""
        U = np.atleast_2d(np.asarray(u_sequence, dtype=float))
        if U.shape[0] < 1:
            raise ValueError("need at least one input")
        z = self.encode(chi0)
        z0 = z
        Z = np.empty((U.shape[0], self.n_z))
        # overflow is detected explicitly below, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(U.shape[0]):
                z = self.dynamics.step(z, U[k])
                if check and not np.all(np.isfinite(z)):
                    raise DivergenceError(f"latent state non-finite at step {k + 1}", step=k + 1)
                Z[k] = z
            x, y = self.decode(Z)
        if check and not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            bad = int(np.flatnonzero(~np.all(np.isfinite(np.hstack([x, y])), axis=1))[0])
            raise DivergenceError(f"decoded prediction non-finite at step {bad + 1}", step=bad + 1)
        if raw:
            with np.errstate(over="ignore", invalid="ignore"):
                x, y = self.scaling.inverse("x", x), self.scaling.inverse("y", y)
        return RolloutResult(Z, x, y, z0)

    def scale_history(self, outputs, inputs=None):
        """Raw output history (oldest first, >= N+1 rows) to the newest scaled delay window."""
        ys = self.scaling.transform("y", np.atleast_2d(outputs))
        us = None
        if self.embed_inputs:
            us = self.scaling.transform("u", np.atleast_2d(inputs))
        return build_delay_windows(ys[-(self.N + 1) :], self.N, None if us is None else us[-(self.N + 1) :])[-1]

    # parameters -------------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Name -> array views; mutating them mutates the model."""
        p = self.encoder.params("enc")
        p["dyn.A"] = self.dynamics.A
        p["dyn.B"] = self.dynamics.B
        p.update(self.decoder.params("dec"))
        return p

    def copy(self) -> KoopmanModel:
        return KoopmanModel(
            self.encoder.copy(), self.dynamics.copy(), self.decoder.copy(), self.scaling, json.loads(json.dumps(self.meta))
        )

    def save(self, path: str | Path, provenance: dict | None = None) -> Path:
        save_checkpoint(self, path, provenance)
        return Path(path)


def encode(model: KoopmanModel, chi):
    return model.encode(chi)


def decode(model: KoopmanModel, z):
    return model.decode(z)


def rollout(model: KoopmanModel, chi0, u_sequence, raw: bool = False) -> RolloutResult:
    return model.rollout(chi0, u_sequence, raw=raw)


# checkpoint I/O -------------------------------------------------------------


def _pack(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "float64-le", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    shape = tuple(d["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=int)):
        raise CheckpointFormatError("parameter byte count does not match its shape")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def checkpoint_dict(model: KoopmanModel, provenance: dict | None = None) -> dict:
    """JSON-ready checkpoint.

    Layout::

        format          "koopmpc-checkpoint"
        schema_version  integer, bumped on incompatible change
        meta            N, n_x, n_y, n_u, n_z, dt, embed_inputs, structure,
                        decoder ("linear" | "nonlinear"), layer sizes
        scaling         ScalingSpec.to_dict()
        provenance      free-form training record (seed, epochs, best loss)
        parameters      name -> {shape, dtype, data}; data is base64 of the
                        little-endian float64 bytes in row-major order.
                        Missing ``.b<i>`` entries mean a bias-free layer.
    """
    meta = {k: v for k, v in model.meta.items() if k != "provenance"}
    meta.update(
        n_z=model.n_z,
        dt=model.dt,
        structure=model.dynamics.structure,
        decoder=model.decoder_kind,
        encoder_layers=model.encoder.layer_sizes,
        decoder_layers=model.decoder.layer_sizes,
    )
    return {
        "format": "koopmpc-checkpoint",
        "schema_version": SCHEMA_VERSION,
        "meta": meta,
        "scaling": model.scaling.to_dict(),
        "provenance": provenance or model.meta.get("provenance", {}),
        "parameters": {k: _pack(v) for k, v in model.parameters().items()},
    }


def save_checkpoint(model: KoopmanModel, path: str | Path, provenance: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, provenance), indent=1, sort_keys=True) + "\n")


def _mlp_from(params: dict, prefix: str, n_layers: int) -> Mlp:
    weights, biases = [], []
    for i in range(n_layers):
        weights.append(_unpack(params[f"{prefix}.W{i}"]))
        b = params.get(f"{prefix}.b{i}")
        biases.append(None if b is None else _unpack(b))
    return Mlp(weights, biases)


def load_checkpoint(path: str | Path, structure: str | None = None) -> KoopmanModel:
    """Load a checkpoint; ``structure`` asserts the latent structure if given."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != "koopmpc-checkpoint":
        raise CheckpointFormatError("not a koopmpc checkpoint")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointFormatError(f"unsupported schema version {doc.get('schema_version')}")
    try:
        meta = doc["meta"]
        params = doc["parameters"]
        if structure is not None and structure != meta["structure"]:
            raise StructureMismatch(f"checkpoint holds {meta['structure']} dynamics, {structure} requested")
        enc = _mlp_from(params, "enc", len(meta["encoder_layers"]) - 1)
        dec = _mlp_from(params, "dec", len(meta["decoder_layers"]) - 1)
        dyn = LatentDynamics(meta["structure"], _unpack(params["dyn.A"]), _unpack(params["dyn.B"]), float(meta["dt"]))
        scaling = ScalingSpec.from_dict(doc["scaling"])
        keep = {k: meta[k] for k in ("N", "n_x", "n_y", "n_u", "embed_inputs")}
        keep["provenance"] = doc.get("provenance", {})
        return KoopmanModel(enc, dyn, dec, scaling, keep)
    except CheckpointFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc
