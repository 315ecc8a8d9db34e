"""A small trainable flow estimator, its optimizer, EMA coupling and checkpoints.

Architecture (feature resolution is a quarter of the input):

* encoder: two 3x3 stride-2 convolutions with tanh, 3 -> 12 -> 16 channels;
* matching: temporal correlation (radius 3) fused with the spatial-context
  attention volume, min-max normalized;
* decoder: a 3x3 convolution over the volume produces displacement logits
  whose softmax expectation is a coarse flow, refined by a residual 3x3
  convolution over ``[coarse flow, volume]``;
* the quarter-resolution flow is upsampled bilinearly and scaled by 4.

An optional disparity head reuses the encoder and reads a horizontal slice
of a left/right correlation volume.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .costvolume import CostVolume, displacements, fuse_cv, sca_cv, temporal_cv
from .tensor import ParamStore, Tensor, as_tensor, concat, conv2d, softmax, upsample

SCALE = 4
EMA_LAMBDA = 0.99


@dataclass(frozen=True)
class NetConfig:
    c1: int = 12
    feat: int = 16
    radius: int = 3
    sca_window: int = 7
    sca_k: int = 4
    alpha: float = 0.25
    gain: float = 10.0
    disp_radius: int = 3
    disp_gain: float = 50.0
    feat_eps: float = 1e-2
    refine_bound: float = 1.0

    @property
    def n_disp(self) -> int:
        return (2 * self.radius + 1) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass(frozen=True)
class EmaConfig:
    lam: float = EMA_LAMBDA

    def __post_init__(self):
        if not 0 <= self.lam < 1:
            raise ValueError("EMA lambda must lie in [0, 1)")


def _conv_init(rng, k: int, cin: int, cout: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(k * k * cin), size=(k * k * cin, cout))


def init_params(cfg: NetConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    D = cfg.n_disp
    ps = ParamStore()
    ps.add("enc.c1.w", _conv_init(rng, 3, 3, cfg.c1))
    ps.add("enc.c1.b", np.zeros(cfg.c1))
    ps.add("enc.c2.w", _conv_init(rng, 3, cfg.c1, cfg.feat))
    ps.add("enc.c2.b", np.zeros(cfg.feat))
    ps.add("sca.kernel", np.eye(cfg.feat) / np.sqrt(cfg.feat))
    # centre-tap identity: the softmax starts as a soft argmax of the volume
    w1 = np.zeros((9, D, D))
    w1[4] = np.eye(D) * cfg.gain
    ps.add("dec.c1.w", w1.reshape(9 * D, D))
    ps.add("dec.c1.b", np.zeros(D))
    ps.add("dec.c2.w", np.zeros((9 * (D + 2), 2)))
    ps.add("dec.c2.b", np.zeros(2))
    Dd = 2 * cfg.disp_radius + 1
    wd = np.zeros((9, Dd, Dd))
    wd[4] = np.eye(Dd) * cfg.disp_gain
    ps.add("disp.c1.w", wd.reshape(9 * Dd, Dd))
    ps.add("disp.c1.b", np.zeros(Dd))
    return ps


@dataclass
class FlowOutput:
    flow: Tensor
    coarse: Tensor
    cv: CostVolume


class FlowNet:
    """Shared architecture for the clean, synthetic-fog and real-fog branches."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = init_params(cfg, seed) if params is None else params

    # -- pieces -----------------------------------------------------------------
    def encode(self, image) -> Tensor:
        image = as_tensor(image)
        if image.ndim != 3:
            raise ValueError("image must be (H, W, C)")
        h, w = image.shape[:2]
        if h % SCALE or w % SCALE:
            raise ValueError(f"extent {h}x{w} is not divisible by {SCALE}")
        p = self.params
        x = conv2d(image, p["enc.c1.w"], p["enc.c1.b"], stride=2).tanh()
        f = conv2d(x, p["enc.c2.w"], p["enc.c2.b"], stride=2).tanh()
        if self.cfg.feat_eps <= 0:
            return f
        # near-unit pixel norms turn correlations into cosine similarities
        return f / ((f * f).sum(axis=-1, keepdims=True) + self.cfg.feat_eps).sqrt()

    def encode_pair(self, I1, I2) -> tuple[Tensor, Tensor]:
        return self.encode(I1), self.encode(I2)

    def cost_volume(self, f1: Tensor, f2: Tensor) -> CostVolume:
        c = self.cfg
        cv_t = temporal_cv(f1, f2, None, c.radius)
        cv_s = sca_cv(f1, self.params["sca.kernel"], c.sca_window, c.sca_k)
        cv_s = _crop_window(cv_s, c.sca_window // 2, c.radius)
        return fuse_cv(cv_t, cv_s, c.alpha)

    def decode(self, cv: CostVolume) -> Tensor:
        p = self.params
        x = cv.values - 0.5  # centred so the convolutions see zero-mean input
        logits = conv2d(x, p["dec.c1.w"], p["dec.c1.b"])
        coarse = softmax(logits, axis=-1) @ displacements(self.cfg.radius)
        refined = conv2d(concat([coarse, x], axis=-1), p["dec.c2.w"], p["dec.c2.b"])
        b = self.cfg.refine_bound
        return coarse + (refined * (1.0 / b)).tanh() * b

    # -- public -----------------------------------------------------------------
    def forward(self, I1, I2) -> FlowOutput:
        f1, f2 = self.encode_pair(I1, I2)
        cv = self.cost_volume(f1, f2)
        coarse = self.decode(cv)
        return FlowOutput(upsample(coarse, SCALE) * float(SCALE), coarse, cv)

    def flow(self, I1, I2) -> Tensor:
        return self.forward(I1, I2).flow

    def predict(self, I1, I2) -> np.ndarray:
        return self.forward(np.asarray(I1), np.asarray(I2)).flow.data.copy()

    def disparity(self, I_l, I_r) -> Tensor:
        """Left-image disparity ``d >= 0`` with ``I_l(x) ~ I_r(x - d)``."""
        fl, fr = self.encode_pair(I_l, I_r)
        r = self.cfg.disp_radius
        vol = temporal_cv(fl, fr, None, r)
        # horizontal row of the window: displacements dx = -r..r at dy = 0
        row = _select_slots(vol.values, np.arange(r * (2 * r + 1), (r + 1) * (2 * r + 1)))
        p = self.params
        logits = conv2d(row, p["disp.c1.w"], p["disp.c1.b"])
        dx = np.arange(-r, r + 1, dtype=np.float64).reshape(-1, 1)
        coarse = -(softmax(logits, axis=-1) @ dx)
        return (upsample(coarse, SCALE) * float(SCALE)).reshape(*as_tensor(I_l).shape[:2])

    def clone(self) -> "FlowNet":
        return FlowNet(self.cfg, self.seed, self.params.copy())

    def load_from(self, other: "FlowNet") -> None:
        self.params.load_state(other.params.state())


def _select_slots(values: Tensor, slots: np.ndarray) -> Tensor:
    h, w, d = values.shape
    idx = (np.arange(h * w)[:, None] * d + slots[None, :]).reshape(h, w, len(slots))
    return values.take(idx)


def _crop_window(cv: CostVolume, r_from: int, r_to: int) -> CostVolume:
    """Restrict a volume laid out on radius ``r_from`` to the inner ``r_to`` window."""
    if r_from == r_to:
        return cv
    if r_to > r_from:
        raise ValueError("cannot widen a cost volume window")
    n = 2 * r_from + 1
    d = displacements(r_to).astype(np.intp)
    slots = (d[:, 1] + r_from) * n + (d[:, 0] + r_from)
    return CostVolume(_select_slots(cv.values, slots), r_to, cv.vmin, cv.vmax)


# -----------------------------------------------------------------------------
# EMA and optimizer
# -----------------------------------------------------------------------------

def ema_update(theta_r: ParamStore, theta_s: ParamStore, cfg: EmaConfig = EmaConfig(),
               prefix: str = "enc.") -> ParamStore:
    """``theta_r <- theta_r * lam + theta_s * (1 - lam)`` on names with ``prefix``.

    ``theta_s`` is not modified.
    """
    lam = cfg.lam
    for name, t in theta_r.items():
        if not name.startswith(prefix):
            continue
        if name not in theta_s:
            raise KeyError(f"{name} missing from the source parameters")
        src = theta_s[name].data
        if src.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {src.shape}")
        t.data = t.data * lam + src * (1.0 - lam)
    return theta_r


class SGD:
    """Gradient descent with heavy-ball momentum and optional global-norm clipping.

    With ``total_steps`` set the rate follows a cosine decay from ``lr`` to 0.
    """

    def __init__(self, params: ParamStore, lr: float, momentum: float = 0.9,
                 clip: float | None = None, names=None, total_steps: int | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.clip = clip
        self.total_steps = total_steps
        self.t = 0
        self.names = list(names) if names is not None else params.names()
        self.velocity = {n: np.zeros_like(params[n].data) for n in self.names}

    @property
    def lr(self) -> float:
        if not self.total_steps:
            return self.base_lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def step(self) -> float:
        grads = {n: self.params.grad(n) for n in self.names}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        lr = self.lr
        for n, g in grads.items():
            v = self.velocity[n] * self.momentum + g * scale
            self.velocity[n] = v
            self.params[n].data = self.params[n].data - lr * v
        self.t += 1
        return norm


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

def save_checkpoint(net: FlowNet, path, step: int = 0, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    blob = bytearray()
    entries = []
    for name, t in net.params.items():
        data = t.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": len(blob)})
        blob += data
    blob = bytes(blob)
    manifest = {
        "format": "fogflow-checkpoint/1",
        "arch": net.cfg.to_dict(),
        "seed": net.seed,
        "step": step,
        "params": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    json_path, bin_path = path.with_suffix(".json"), path.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    bin_path.write_bytes(blob)
    return json_path, bin_path


def load_checkpoint(path) -> tuple[FlowNet, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError("checkpoint blob does not match its manifest digest")
    params = ParamStore()
    for e in manifest["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
        params.add(e["name"], arr.astype(np.float64).reshape(e["shape"]))
    net = FlowNet(NetConfig.from_dict(manifest["arch"]), manifest["seed"], params)
    return net, manifest
