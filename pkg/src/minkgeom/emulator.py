"""Trainable gamma-vector surrogate with geometric constraint heads.

The backbone applies a small residual network to the 3x3 neighbourhood of
every pixel, sums the pixel features over the grid, log-compresses them and
passes the result through a field-level residual network. Hidden layers are
spectrally normalized, so the pixel feature map is Lipschitz with a constant
set by the input layer.

Three architectures are available:

``constrained``
    Area from the tail sums of a softmax over N+1 bins times a total area
    (monotone by construction), perimeter as ``sqrt(4 pi A) * (1 + r)`` with a
    softplus roughness ``r`` (isoperimetric by construction) and softplus
    counts.
``unconstrained``
    Same spectrally normalized backbone with one independent linear head;
    each entry is ``exp(o)`` so it stays positive but is otherwise free.
``nosn``
    Independent head, ReLU activations and no spectral normalization.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grid_core import Field2D, NormalizationSpec, Units
from .target_pipeline import iso_violations

log = logging.getLogger(__name__)

ARCHS = ("constrained", "unconstrained", "nosn")
ARCH_ALIASES = {"unconstrained_no_sn": "nosn"}
CKPT_FORMAT = "MGEMU01"
_BLOB_MAGIC = b"MGEMU01\x00"
SIGMA_FLOOR = 1e-12
DEFAULT_LOSS_WEIGHTS = (3.0, 1.0, 1.5)
TRUST_FLOOR_WEIGHT = 0.1
PAPER_TAU_TRUST = 0.005725


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------- layers


class SpectralLinear:
    """Dense layer whose weight is divided by a power-iteration estimate of its top singular value."""

    def __init__(self, weight, bias, normalize: bool = True, u=None, rng=None):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.normalize = normalize
        m = self.weight.shape[0]
        if u is None:
            rng = rng or np.random.default_rng(0)
            u = rng.standard_normal(m)
        u = np.asarray(u, dtype=np.float64)
        # stored vectors are already unit; renormalizing would perturb the last bit
        self.u = u if abs(np.linalg.norm(u) - 1.0) < 1e-12 else _unit(u)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, normalize: bool = True):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        return cls(w, np.zeros(n_out), normalize, rng=rng)

    def power_iteration(self, n_iters: int = 1) -> float:
        """Refine ``u`` in place and return the estimate ``u^T W v``."""
        if n_iters < 1:
            raise ValueError("n_power_iters must be >= 1")
        for _ in range(n_iters):
            v = _unit(self.weight.T @ self.u)
            self.u = _unit(self.weight @ v, fallback=self.u)
        return self.sigma()

    def _v(self) -> np.ndarray:
        return _unit(self.weight.T @ self.u)

    def sigma(self) -> float:
        return max(float(self.u @ self.weight @ self._v()), SIGMA_FLOOR)

    def effective_weight(self) -> np.ndarray:
        if not self.normalize:
            return self.weight
        return self.weight / self.sigma()

    def apply(self, tape: ad.Tape, x: ad.Var, w: ad.Var, b: ad.Var) -> ad.Var:
        if self.normalize:
            v = self._v()
            sigma = ad.dot(self.u, ad.matvec(w, v))
            if sigma.value < SIGMA_FLOOR:
                sigma = tape.const(SIGMA_FLOOR)
            w = w / sigma
        return ad.matvec(w, x, b)


def _unit(v: np.ndarray, fallback=None) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        return v if fallback is None else fallback
    return v / n


def spectral_normalize(layer: SpectralLinear, n_power_iters: int = 1) -> np.ndarray:
    """Advance the layer's power iteration and return ``W / sigma_hat``."""
    layer.power_iteration(n_power_iters)
    return layer.weight / layer.sigma()


# ------------------------------------------------------------- emulator


@dataclass(frozen=True)
class EmulatorConfig:
    arch: str = "constrained"
    height: int = 32
    width: int = 32
    n_levels: int = 5
    pixel_hidden: int = 32
    pixel_blocks: int = 1
    hidden: int = 32
    n_blocks: int = 2
    pixel_size: float = 2.0
    max_pool: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arch", ARCH_ALIASES.get(self.arch, self.arch))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; choose from {ARCHS}")

    @property
    def domain_area(self) -> float:
        return self.height * self.width * self.pixel_size**2


# 3x3 neighbourhood offsets feeding each pixel's input vector
PATCH_OFFSETS = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))
GELU_LIPSCHITZ = 1.1290


def _patches(a: np.ndarray) -> np.ndarray:
    """``(B, H, W)`` -> ``(B*H*W, 9)`` zero-padded 3x3 neighbourhoods."""
    cols = [ad._shift(a, dy, dx) for dy, dx in PATCH_OFFSETS]
    return np.stack(cols, axis=-1).reshape(-1, len(PATCH_OFFSETS))


def _patches_adjoint(g: np.ndarray, shape) -> np.ndarray:
    g = g.reshape(*shape, len(PATCH_OFFSETS))
    return np.sum([ad._shift(g[..., k], -dy, -dx) for k, (dy, dx) in enumerate(PATCH_OFFSETS)], axis=0)


class Emulator:
    """Per-pixel residual network on 3x3 neighbourhoods, then log-compressed
    sum pooling (plus max pooling), a field-level residual network and the heads.

    The pixel network is shared across the grid, so the pooled descriptor is
    translation invariant up to boundary effects and extensive in the domain
    size. The log compression is 1-Lipschitz and matches the log-space loss.
    """

    def __init__(self, cfg: EmulatorConfig, norm: NormalizationSpec, layers: dict[str, SpectralLinear]):
        self.cfg = cfg
        self.norm = norm
        self.layers = layers

    @classmethod
    def init(cls, cfg: EmulatorConfig, norm: NormalizationSpec | None = None, seed: int = 0) -> "Emulator":
        rng = np.random.default_rng(seed)
        sn = cfg.arch != "nosn"
        n, h, ph = cfg.n_levels, cfg.hidden, cfg.pixel_hidden
        layers = {"input": SpectralLinear.init(len(PATCH_OFFSETS), ph, rng, normalize=False)}
        for k in range(cfg.pixel_blocks):
            layers[f"pixel{k}"] = SpectralLinear.init(ph, ph, rng, normalize=sn)
        pooled = 2 * ph if cfg.max_pool else ph
        layers["field"] = SpectralLinear.init(pooled, h, rng, normalize=sn)
        for k in range(cfg.n_blocks):
            layers[f"block{k}"] = SpectralLinear.init(h, h, rng, normalize=sn)
        if cfg.arch == "constrained":
            layers["area_logits"] = SpectralLinear.init(h, n + 1, rng, normalize=False)
            layers["area_total"] = SpectralLinear.init(h, 1, rng, normalize=False)
            layers["roughness"] = SpectralLinear.init(h, n, rng, normalize=False)
            layers["counts"] = SpectralLinear.init(h, n, rng, normalize=False)
        else:
            layers["head"] = SpectralLinear.init(h, 3 * n, rng, normalize=False)
        return cls(cfg, norm or NormalizationSpec(), layers)

    # -- plumbing

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in self.layers.items():
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def copy(self) -> "Emulator":
        return copy.deepcopy(self)

    @property
    def _act(self):
        return ad.relu if self.cfg.arch == "nosn" else ad.gelu

    def prepare(self, x) -> np.ndarray:
        """Stack inputs into a ``(B, H, W)`` array in normalized units.

        Accepts Field2D instances (physical ones are normalized with the
        emulator's spec) or arrays already in normalized units.
        """
        if isinstance(x, Field2D):
            x = [x]
        if isinstance(x, (list, tuple)) and x and isinstance(x[0], Field2D):
            x = [self.norm.forward(f.values) if f.units == Units.PHYSICAL else f.values for f in x]
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        expect = (self.cfg.height, self.cfg.width)
        if arr.ndim != 3 or arr.shape[1:] != expect:
            raise ValueError(f"expected fields of shape {expect}, got {arr.shape}")
        return arr

    # -- forward

    def forward(self, tape: ad.Tape, x: ad.Var, params: dict[str, ad.Var] | None = None) -> ad.Var:
        """Gamma prediction ``(B, 3N)`` for a ``(B, H, W)`` batch on ``tape``."""
        params = params or {k: tape.const(v) for k, v in self.parameters()}
        z = self._field_features(tape, self._pool(self._pixel_features(tape, x, params), x.shape[0]), params)
        if self.cfg.arch == "constrained":
            return self._constrained_head(tape, z, params)
        return ad.exp(self._dense(tape, "head", z, params))

    def _dense(self, tape, name, x, params):
        return self.layers[name].apply(tape, x, params[f"{name}.weight"], params[f"{name}.bias"])

    def _pixel_features(self, tape, x, params):
        patches = ad.stack([ad.shift(x, dy, dx) for dy, dx in PATCH_OFFSETS], axis=-1)
        h = ad.reshape(patches, (-1, len(PATCH_OFFSETS)))
        act = self._act
        h = act(self._dense(tape, "input", h, params))
        return self._residual(tape, h, "pixel", self.cfg.pixel_blocks, params)

    def _residual(self, tape, h, prefix, n_blocks, params):
        act = self._act
        for k in range(n_blocks):
            # averaged residual keeps each block's Lipschitz constant near 1
            h = (h + act(self._dense(tape, f"{prefix}{k}", h, params))) * 0.5
        return h

    def _pool(self, h, batch: int):
        grid = ad.reshape(h, (batch, -1, self.cfg.pixel_hidden))
        pooled = signed_log1p(ad.sum(grid, axis=1))
        if not self.cfg.max_pool:
            return pooled
        # the grid maximum tells whether a level is reached at all
        return ad.concat([pooled, ad.max(grid, axis=1)], axis=-1)

    def _field_features(self, tape, pooled, params):
        h = self._act(self._dense(tape, "field", pooled, params))
        return self._residual(tape, h, "block", self.cfg.n_blocks, params)

    def _constrained_head(self, tape, z, params):
        n = self.cfg.n_levels
        probs = ad.softmax(self._dense(tape, "area_logits", z, params))
        tails = ad.slice_(ad.cumsum(probs, reverse=True), (slice(None), slice(1, None)))
        total = ad.softplus(self._dense(tape, "area_total", z, params)) * self.cfg.domain_area
        area = ad.scale(tails, ad.slice_(total, (slice(None), 0)))
        rough = ad.softplus(self._dense(tape, "roughness", z, params))
        perim = ad.sqrt(area * (4.0 * math.pi) + 1e-12) * (rough + 1.0)
        # softplus underflows to 0 below about -745; the floor keeps counts positive
        counts = ad.softplus(self._dense(tape, "counts", z, params)) + 1e-12
        flat = ad.concat([area, perim, counts], axis=-1)
        # [A..., P..., CC...] -> [A1, P1, CC1, A2, ...]
        order = np.arange(3 * n).reshape(3, n).T.ravel()
        return ad.slice_(flat, (slice(None), order))

    def predict(self, x, batch: int = 256) -> np.ndarray:
        arr = self.prepare(x)
        out = []
        for s in range(0, arr.shape[0], batch):
            tape = ad.Tape()
            out.append(self.forward(tape, tape.const(arr[s:s + batch])).value)
        return np.concatenate(out) if out else np.zeros((0, 3 * self.cfg.n_levels))

    def features(self, x, pooled: bool = False) -> np.ndarray:
        """Flattened pixel feature map per field, or the pooled descriptor."""
        arr = self.prepare(x)
        tape = ad.Tape()
        params = {k: tape.const(v) for k, v in self.parameters()}
        h = self._pixel_features(tape, tape.const(arr), params)
        if pooled:
            return self._pool(h, arr.shape[0]).value
        return h.value.reshape(arr.shape[0], -1)

    def first_layer_norm(self, n_iters: int = 200, seed: int = 0) -> float:
        """Operator norm of the input layer acting on whole fields.

        The layer maps an ``H x W`` field to the stacked 3x3-neighbourhood
        projections of every pixel; the norm is found by power iteration on
        that linear map and its adjoint.
        """
        w = self.layers["input"].weight
        shape = (1, self.cfg.height, self.cfg.width)
        x = np.random.default_rng(seed).standard_normal(shape)
        sigma = 0.0
        for _ in range(n_iters):
            x /= np.linalg.norm(x)
            y = _patches(x) @ w.T
            sigma = float(np.linalg.norm(y))
            x = _patches_adjoint(y @ w, shape)
        return sigma

    def lipschitz_bound(self) -> float:
        """Certified bound for the pixel feature map.

        A residual block ``(h + act(W h + b)) / 2`` is at most
        ``(1 + c ||W||) / 2``-Lipschitz, where ``c`` is the activation's constant
        (about 1.13 for GELU, 1 for ReLU); spectral normalization sets
        ``||W|| = 1``.
        """
        c = 1.0 if self.cfg.arch == "nosn" else GELU_LIPSCHITZ
        bound = self.first_layer_norm() * c
        for k in range(self.cfg.pixel_blocks):
            layer = self.layers[f"pixel{k}"]
            w = np.linalg.norm(layer.effective_weight(), 2)
            bound *= (1.0 + c * w) / 2.0
        return float(bound)

    def settle(self, n_iters: int = 100) -> None:
        """Run extra power iterations so stored ``u`` vectors are converged."""
        for layer in self.layers.values():
            if layer.normalize:
                layer.power_iteration(n_iters)


# ------------------------------------------------------------ loss, metrics


def _signed_log1p(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


def channel_weights(n_levels: int, weights=(1.0, 1.0, 1.0)) -> np.ndarray:
    return np.tile(np.asarray(weights, dtype=np.float64), n_levels)


def minkowski_loss(gamma_hat, gamma_true, weights=(1.0, 1.0, 1.0), allow_negative: bool = False):
    """Weighted L1 distance between ``log(1 + gamma)`` vectors.

    Works on single vectors or on batches (last axis 3N); batches return one
    value per row. With ``allow_negative`` entries below zero (the signed Euler
    channel of the analytic surrogate) go through ``sign(y) log(1 + |y|)``,
    which equals ``log(1 + y)`` on the non-negative range.
    """
    a = np.asarray(gamma_hat, dtype=np.float64)
    b = np.asarray(gamma_true, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] % 3:
        raise ValueError(f"gamma shapes {a.shape} and {b.shape} are incompatible")
    if not allow_negative and (np.any(a < 0) or np.any(b < 0)):
        raise ValueError("gamma vectors must be non-negative")
    w = channel_weights(a.shape[-1] // 3, weights)
    return (w * np.abs(_signed_log1p(a) - _signed_log1p(b))).sum(axis=-1)


def signed_log1p(x: ad.Var) -> ad.Var:
    return ad.log1p(ad.abs(x)) * np.sign(x.value)


def minkowski_loss_var(gamma_hat: ad.Var, gamma_true, weights=(1.0, 1.0, 1.0), allow_negative: bool = False) -> ad.Var:
    """Differentiable loss, summed over rows when batched."""
    t = np.asarray(gamma_true, dtype=np.float64)
    if gamma_hat.shape != t.shape:
        raise ValueError(f"gamma shapes {gamma_hat.shape} and {t.shape} differ")
    if not allow_negative and (np.any(gamma_hat.value < 0) or np.any(t < 0)):
        raise ValueError("gamma vectors must be non-negative")
    w = np.broadcast_to(channel_weights(t.shape[-1] // 3, weights), t.shape)
    pred = signed_log1p(gamma_hat) if allow_negative else ad.log1p(gamma_hat)
    return ad.sum(ad.abs(pred - _signed_log1p(t)) * w)


def r2_log(pred: np.ndarray, true: np.ndarray) -> float:
    """Pooled coefficient of determination in ``log(1 + x)`` space (column means)."""
    p, t = np.log1p(np.maximum(pred, 0)), np.log1p(np.maximum(true, 0))
    ss_res = ((p - t) ** 2).sum()
    ss_tot = ((t - t.mean(axis=0)) ** 2).sum()
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return float(1.0 - ss_res / ss_tot)


def evaluate_predictions(pred: np.ndarray, true: np.ndarray) -> dict:
    pred, true = np.atleast_2d(pred), np.atleast_2d(true)
    viol = iso_violations(pred)
    return {
        "M": float(minkowski_loss(pred, true).mean()),
        "R2": r2_log(pred, true),
        "R2_A": r2_log(pred[:, 0::3], true[:, 0::3]),
        "R2_P": r2_log(pred[:, 1::3], true[:, 1::3]),
        "R2_CC": r2_log(pred[:, 2::3], true[:, 2::3]),
        "nu_iso": float(viol.mean()),
        "nu_iso_sample": float(viol.any(axis=1).mean()),
    }


def evaluate(emulator: Emulator, fields, gammas) -> dict:
    return evaluate_predictions(emulator.predict(fields), np.asarray(gammas))


# ------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 7.75e-5
    weight_decay: float = 2.49e-6
    batch: int = 128
    epochs: int = 50
    patience: int = 15
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    seed: int = 0
    val_fraction: float = 0.1
    lr_decay: float = 0.5
    lr_patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0 or any(w < 0 for w in self.loss_weights):
            raise ValueError("weights must be >= 0")
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "loss_weights" in known:
            known["loss_weights"] = tuple(known["loss_weights"])
        return cls(**known)


# Settings for small synthetic datasets; the defaults follow the full-scale setup.
DESK_TRAIN_CONFIG = TrainConfig(lr=3e-3, weight_decay=0.0, batch=32, epochs=80, patience=15)


class Adam:
    def __init__(self, shapes: dict[str, tuple], cfg: TrainConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1**self.t
        b2t = 1.0 - c.beta2**self.t
        for k, p in params.items():
            g = grads[k] + c.weight_decay * p
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            p -= self.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.adam_eps)


@dataclass
class TrainResult:
    emulator: Emulator
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def batch_loss(emulator: Emulator, x: np.ndarray, y: np.ndarray, weights, train: bool = False):
    """Mean weighted loss over the batch and its gradients by parameter name."""
    if train:
        for layer in emulator.layers.values():
            if layer.normalize:
                layer.power_iteration(1)
    tape = ad.Tape()
    params = {k: tape.var(v) for k, v in emulator.parameters()}
    pred = emulator.forward(tape, tape.const(x), params)
    loss = minkowski_loss_var(pred, y, weights) * (1.0 / x.shape[0])
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[v] for k, v in params.items()}


def train_emulator(
    fields,
    gammas,
    cfg: TrainConfig = DESK_TRAIN_CONFIG,
    arch: str | None = None,
    emulator_cfg: EmulatorConfig | None = None,
    norm: NormalizationSpec | None = None,
) -> TrainResult:
    """Fit an emulator to ``(field, gamma)`` pairs with the weighted Minkowski loss.

    ``fields`` are physical Field2D instances (or normalized arrays when
    ``norm`` is given). Early stopping tracks the unweighted validation loss.
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    if isinstance(fields, (list, tuple)) and fields and isinstance(fields[0], Field2D):
        h, w = fields[0].shape
        pixel = fields[0].pixel_size
        norm = norm or NormalizationSpec.fit(fields)
    else:
        arr = np.asarray(fields)
        h, w = arr.shape[-2:]
        pixel = 2.0 if emulator_cfg is None else emulator_cfg.pixel_size
        if norm is None:
            raise ValueError("norm is required when fields are given as arrays")
    if emulator_cfg is None:
        emulator_cfg = EmulatorConfig(
            arch=arch or "constrained", height=h, width=w, n_levels=gammas.shape[1] // 3, pixel_size=pixel,
        )
    elif arch is not None:
        emulator_cfg = EmulatorConfig(**{**asdict(emulator_cfg), "arch": arch})

    emu = Emulator.init(emulator_cfg, norm, seed=cfg.seed)
    x_all = emu.prepare(fields)
    if x_all.shape[0] != gammas.shape[0]:
        raise ValueError("fields and gammas differ in length")
    tr, va = split_indices(x_all.shape[0], cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])

    opt = Adam({k: v.shape for k, v in emu.parameters()}, cfg)
    best, best_val, best_epoch, stale, plateau = emu.copy(), math.inf, 0, 0, 0
    history = []
    for epoch in range(cfg.epochs):
        order = tr[rng.permutation(tr.size)]
        losses = []
        for s in range(0, order.size, cfg.batch):
            idx = order[s:s + cfg.batch]
            loss, grads = batch_loss(emu, x_all[idx], gammas[idx], cfg.loss_weights, train=True)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch}, batch {s // cfg.batch}")
            opt.step(dict(emu.parameters()), grads)
            losses.append(loss * idx.size)
        train_loss = float(np.sum(losses) / order.size)
        if va.size:
            val_loss = float(minkowski_loss(emu.predict(x_all[va]), gammas[va]).mean())
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr})
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_loss, val_loss, opt.lr)
        if val_loss < best_val:
            best, best_val, best_epoch, stale, plateau = emu.copy(), val_loss, epoch, 0, 0
        else:
            stale += 1
            plateau += 1
            if plateau >= cfg.lr_patience:
                opt.lr *= cfg.lr_decay
                plateau = 0
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    best.settle()
    return TrainResult(best, history, best_epoch)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(emulator: Emulator, path, extra: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blobs = []
    for name, layer in emulator.layers.items():
        for kind, arr in (("weight", layer.weight), ("bias", layer.bias), ("u", layer.u)):
            fname = f"{name}.{kind}.bin"
            data = _BLOB_MAGIC + np.ascontiguousarray(arr, dtype="<f8").tobytes()
            (root / fname).write_bytes(data)
            blobs.append({
                "layer": name, "kind": kind, "file": fname, "shape": list(arr.shape),
                "sha256": hashlib.sha256(data).hexdigest(),
            })
    manifest = {
        "format": CKPT_FORMAT,
        "config": asdict(emulator.cfg),
        "normalization": asdict(emulator.norm),
        "spectral": {name: layer.normalize for name, layer in emulator.layers.items()},
        "blobs": blobs,
        "extra": extra or {},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Emulator:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise CheckpointError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    arrays: dict[str, dict[str, np.ndarray]] = {}
    for b in manifest["blobs"]:
        fp = root / b["file"]
        if not fp.is_file():
            raise CheckpointError(f"missing blob {b['file']}")
        data = fp.read_bytes()
        if "sha256" in b and hashlib.sha256(data).hexdigest() != b["sha256"]:
            raise CheckpointError(f"checksum mismatch in {b['file']}")
        if data[:8] != _BLOB_MAGIC:
            raise CheckpointError(f"bad magic in {b['file']}")
        arr = np.frombuffer(data[8:], dtype="<f8")
        if arr.size != int(np.prod(b["shape"])):
            raise CheckpointError(f"size mismatch in {b['file']}")
        arrays.setdefault(b["layer"], {})[b["kind"]] = arr.reshape(b["shape"]).astype(np.float64)
    layers = {
        name: SpectralLinear(a["weight"], a["bias"], manifest["spectral"][name], u=a["u"])
        for name, a in arrays.items()
    }
    cfg = EmulatorConfig(**manifest["config"])
    return Emulator(cfg, NormalizationSpec(**manifest["normalization"]), layers)


# ------------------------------------------------------------------ trust


def log_mse(gamma_pred, gamma_true) -> np.ndarray:
    """Per-sample mean squared error of ``log(1 + gamma)``."""
    a = np.log1p(np.maximum(np.atleast_2d(gamma_pred), 0))
    b = np.log1p(np.maximum(np.atleast_2d(gamma_true), 0))
    return ((a - b) ** 2).mean(axis=-1)


def trust_weight(gamma_emul_on_truth, gamma_true, tau_trust: float = PAPER_TAU_TRUST):
    """``exp(-tau * MSE)`` in log space; scalar for single vectors."""
    if not tau_trust > 0:
        raise ValueError("tau_trust must be > 0")
    w = np.exp(-tau_trust * log_mse(gamma_emul_on_truth, gamma_true))
    return float(w[0]) if np.ndim(gamma_true) == 1 else w


def tau_from_errors(errors, percentile: float = 90.0, floor_weight: float = TRUST_FLOOR_WEIGHT) -> float:
    """Trust coefficient that maps the given error percentile to ``floor_weight``."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("empty error sample")
    q = float(np.percentile(e, percentile))
    if not q > 0:
        raise ValueError("error percentile must be > 0")
    return -math.log(floor_weight) / q


def calibrate_tau_trust(emulator: Emulator, fields, gammas, percentile: float = 90.0) -> float:
    if len(fields) == 0:
        raise ValueError("empty validation corpus")
    return tau_from_errors(log_mse(emulator.predict(fields), gammas), percentile)
