"""Compact recurrent complex-ratio-mask estimator with an exact backward pass.

Per frame the network sees the real and imaginary STFT parts of the mixture
concatenated with the speaker embedding. Each block is an Elman-style
recurrent layer ``h_t = tanh(W [x_t, e] + U h_{t-1} + b)``, and the embedding
is concatenated again at every block input. A linear head emits ``2F`` values
that are split into the real and imaginary mask. The masked spectrum is
inverted with the ISTFT, and the loss is computed on the waveform.

Everything runs in float64 so the gradients can be checked by finite
differences.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, metrics

LOSS_KINDS = ("negSNR", "negSISDR")
CHECKPOINT_VERSION = 1
_K = 10.0 / np.log(10.0)


@dataclass(frozen=True)
class MaskNetConfig:
    blocks: int = 2
    hidden_dim: int = 64
    embed_dim: int = 32
    stft: dsp.StftConfig = dsp.StftConfig()
    loss_kind: str = "negSNR"
    input_scale: float = 1.0

    def __post_init__(self):
        if min(self.blocks, self.hidden_dim, self.embed_dim) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    @property
    def n_bins(self) -> int:
        return self.stft.n_bins

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskNetConfig":
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = dsp.StftConfig(**d["stft"])
        return cls(**d)


def param_shapes(cfg: MaskNetConfig) -> dict[str, tuple]:
    h, f2 = cfg.hidden_dim, 2 * cfg.n_bins
    shapes = {}
    for k in range(cfg.blocks):
        fan_in = (f2 if k == 0 else h) + cfg.embed_dim
        shapes[f"block{k}.W"] = (h, fan_in)
        shapes[f"block{k}.U"] = (h, h)
        shapes[f"block{k}.b"] = (h,)
    shapes["out.W"] = (f2, h)
    shapes["out.b"] = (f2,)
    return shapes


def count_params(cfg: MaskNetConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


@dataclass
class Model:
    config: MaskNetConfig
    params: dict
    version: int = 0

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()}, self.version)

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def init(cfg: MaskNetConfig, seed: int) -> Model:
    """Uniform fan-in initialisation; the head starts at the identity mask."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            params[name] = rng.uniform(-bound, bound, size=shape)
    params["out.W"] *= 0.1
    params["out.b"][: cfg.n_bins] = 1.0
    return Model(cfg, params)


def identity_mask_model(cfg: MaskNetConfig, seed: int = 0, value: complex = 1.0) -> Model:
    """A model whose head always emits the constant mask ``value``."""
    model = init(cfg, seed)
    f = cfg.n_bins
    model.params["out.W"][:] = 0.0
    model.params["out.b"][:f] = np.real(value)
    model.params["out.b"][f:] = np.imag(value)
    return model


# --- masking ------------------------------------------------------------------

def apply_mask(mixture, mask: np.ndarray, cfg: dsp.StftConfig) -> np.ndarray:
    """Multiply the mixture spectrum by a complex ``(T, F)`` mask and invert."""
    mixture = np.asarray(mixture, dtype=np.float64)
    spec = dsp.analyze(mixture, cfg)
    return dsp.synthesize(mask * spec, cfg, mixture.shape[-1])


def oracle_mask(mixture, target, cfg: dsp.StftConfig, max_magnitude: float = 10.0) -> np.ndarray:
    """Ideal complex ratio ``S_target / S_mixture`` with magnitude clipping."""
    sm = dsp.analyze(np.asarray(mixture, dtype=np.float64), cfg)
    st = dsp.analyze(np.asarray(target, dtype=np.float64), cfg)
    mask = np.zeros_like(sm)
    nz = np.abs(sm) > 0
    mask[nz] = st[nz] / sm[nz]
    mag = np.abs(mask)
    over = mag > max_magnitude
    mask[over] *= max_magnitude / mag[over]
    return mask


# --- forward -------------------------------------------------------------------

@dataclass
class ActivationCache:
    spec: np.ndarray            # (B, T, F) mixture spectrum
    inputs: list                # per block (B, T, fan_in)
    hidden: list                # per block (B, T, H)
    length: int
    token: tuple = field(default=(), repr=False)


def _token(model: Model) -> tuple:
    return (id(model.params), model.version)


def forward_batch(model: Model, mixtures: np.ndarray, embeddings: np.ndarray):
    """Forward pass for ``(B, N)`` mixtures and ``(B, D)`` embeddings."""
    cfg = model.config
    p = model.params
    mixtures = np.asarray(mixtures, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if mixtures.ndim != 2 or mixtures.shape[1] == 0:
        raise ValueError("expected nonempty (B, N) mixtures")
    if embeddings.shape != (mixtures.shape[0], cfg.embed_dim):
        raise ValueError(f"embedding shape {embeddings.shape} does not match "
                         f"({mixtures.shape[0]}, {cfg.embed_dim})")
    spec = dsp.analyze(mixtures, cfg.stft)
    n_batch, n_frames, _ = spec.shape
    emb = np.broadcast_to(embeddings[:, None, :], (n_batch, n_frames, cfg.embed_dim))
    x = np.concatenate([spec.real, spec.imag], axis=-1) * cfg.input_scale
    inputs, hidden = [], []
    for k in range(cfg.blocks):
        z = np.concatenate([x, emb], axis=-1)
        pre = z @ p[f"block{k}.W"].T + p[f"block{k}.b"]
        u_t = p[f"block{k}.U"].T
        h = np.empty((n_batch, n_frames, cfg.hidden_dim))
        prev = np.zeros((n_batch, cfg.hidden_dim))
        for t in range(n_frames):
            prev = np.tanh(pre[:, t] + prev @ u_t)
            h[:, t] = prev
        inputs.append(z)
        hidden.append(h)
        x = h
    out = x @ p["out.W"].T + p["out.b"]
    f = cfg.n_bins
    mask = out[..., :f] + 1j * out[..., f:]
    est = dsp.synthesize(mask * spec, cfg.stft, mixtures.shape[1])
    return est, ActivationCache(spec, inputs, hidden, mixtures.shape[1], _token(model))


def forward(model: Model, mixture, embedding):
    est, cache = forward_batch(model, np.asarray(mixture)[None, :], np.asarray(embedding)[None, :])
    return est[0], cache


# --- loss ------------------------------------------------------------------------

def loss(estimate, target, kind: str = "negSNR") -> float:
    if kind == "negSNR":
        return -metrics.snr_db(target, estimate)
    if kind == "negSISDR":
        return -metrics.si_sdr_db(estimate, target)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(estimate, target, kind: str = "negSNR") -> np.ndarray:
    """Gradient of :func:`loss` w.r.t. the estimate; zero where the dB value clips."""
    est = np.asarray(estimate, dtype=np.float64)
    s = np.asarray(target, dtype=np.float64)
    e_s = float(np.dot(s, s))
    if kind == "negSNR":
        r = est - s
        e_r = float(np.dot(r, r))
        if e_r <= 0.0 or abs(10.0 * np.log10(e_s / e_r)) > metrics.DB_CLIP:
            return np.zeros_like(est)
        return (2.0 * _K / e_r) * r
    if kind == "negSISDR":
        c = float(np.dot(est, s))
        e_err = float(np.dot(est, est)) - c * c / e_s
        if c == 0.0 or e_err <= 0.0:
            return np.zeros_like(est)
        if abs(10.0 * np.log10((c * c / e_s) / e_err)) > metrics.DB_CLIP:
            return np.zeros_like(est)
        return _K * (-2.0 * s / c + (2.0 * est - 2.0 * c * s / e_s) / e_err)
    raise ValueError(f"unknown loss kind {kind!r}")


# --- backward --------------------------------------------------------------------

def backward_from_output(model: Model, cache: ActivationCache, grad_est: np.ndarray) -> dict:
    """Backpropagate ``(B, N)`` waveform gradients to all parameters."""
    if cache.token != _token(model):
        raise ValueError("stale activation cache: model changed since forward")
    cfg = model.config
    p = model.params
    f = cfg.n_bins
    spec = cache.spec
    n_batch, n_frames, _ = spec.shape
    g_spec = dsp.synthesize_adjoint(grad_est, cfg.stft, n_frames)
    g_mr = g_spec.real * spec.real + g_spec.imag * spec.imag
    g_mi = g_spec.imag * spec.real - g_spec.real * spec.imag
    g_out = np.concatenate([g_mr, g_mi], axis=-1)

    grads = {}
    top = cache.hidden[-1]
    grads["out.W"] = g_out.reshape(-1, 2 * f).T @ top.reshape(-1, cfg.hidden_dim)
    grads["out.b"] = g_out.sum(axis=(0, 1))
    g_h = g_out @ p["out.W"]
    for k in reversed(range(cfg.blocks)):
        h = cache.hidden[k]
        z = cache.inputs[k]
        u = p[f"block{k}.U"]
        g_pre = np.empty_like(h)
        carry = np.zeros((n_batch, cfg.hidden_dim))
        for t in reversed(range(n_frames)):
            g_pre[:, t] = (g_h[:, t] + carry) * (1.0 - h[:, t] ** 2)
            carry = g_pre[:, t] @ u
        prev = np.concatenate([np.zeros((n_batch, 1, cfg.hidden_dim)), h[:, :-1]], axis=1)
        flat = g_pre.reshape(-1, cfg.hidden_dim)
        grads[f"block{k}.U"] = flat.T @ prev.reshape(-1, cfg.hidden_dim)
        grads[f"block{k}.W"] = flat.T @ z.reshape(-1, z.shape[-1])
        grads[f"block{k}.b"] = flat.sum(axis=0)
        if k > 0:
            g_h = (g_pre @ p[f"block{k}.W"])[..., : cfg.hidden_dim]
    return {name: grads[name] for name in p}


def backward(model: Model, cache: ActivationCache, estimate, target, kind: str = "negSNR"):
    """Exact gradients of ``loss(estimate, target)`` for a single sample."""
    value = loss(estimate, target, kind)
    g = loss_grad(estimate, target, kind)[None, :]
    return backward_from_output(model, cache, g), value


@dataclass
class BatchGradient:
    grads: dict
    losses: np.ndarray
    kept: np.ndarray
    skipped: bool


def batch_gradient(model: Model, batch, kind: str = "negSNR", keep_mask=None) -> BatchGradient:
    """Mean gradient over the kept samples of ``batch = [(m, e, s), ...]``."""
    if not batch:
        raise ValueError("empty batch")
    if keep_mask is None:
        keep = np.ones(len(batch), dtype=bool)
    else:
        keep = np.asarray(keep_mask, dtype=bool)
        if keep.shape != (len(batch),):
            raise ValueError("keep_mask length does not match batch")
    mixtures = np.stack([np.asarray(m, dtype=np.float64) for m, _, _ in batch])
    embeddings = np.stack([np.asarray(e, dtype=np.float64) for _, e, _ in batch])
    targets = np.stack([np.asarray(s, dtype=np.float64) for _, _, s in batch])
    est, cache = forward_batch(model, mixtures, embeddings)
    losses = np.array([loss(est[i], targets[i], kind) for i in range(len(batch))])
    return gradient_from_forward(model, cache, est, targets, losses, keep, kind)


def gradient_from_forward(model, cache, est, targets, losses, keep, kind) -> BatchGradient:
    n_kept = int(keep.sum())
    if n_kept == 0:
        return BatchGradient(model.zeros_like(), losses, keep, True)
    g = np.zeros_like(est)
    for i in np.flatnonzero(keep):
        g[i] = loss_grad(est[i], targets[i], kind) / n_kept
    return BatchGradient(backward_from_output(model, cache, g), losses, keep, False)


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model: Model, step: int = 0, seed: int | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "tsecl.checkpoint", "version": CHECKPOINT_VERSION,
            "config": model.config.to_dict(), "seed": seed, "step": int(step),
            "param_names": list(model.params), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
                 **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "tsecl.checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint")
        cfg = MaskNetConfig.from_dict(meta["config"])
        params = {k: data[f"param/{k}"].astype(np.float64) for k in meta["param_names"]}
    expected = param_shapes(cfg)
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, expected {shape}")
    return Model(cfg, params), meta
