"""Staged training: clean and synthetic-fog transfer (DAMA), synthetic-to-real
distillation with correlation alignment (CAMA), then joint fine-tuning.

Three branches share one architecture:

* ``clean``: trained on clean stereo video with photometric, stereo-depth
  and rigid-flow losses;
* ``syn``: initialized from ``clean`` and taught on rendered fog to match
  the clean branch's flow on the clean frames;
* ``real``: initialized from ``syn``; learns on the shifted "real" fog from
  the synthetic branch's pseudo-labels and a correlation-histogram KL term,
  while its encoder tracks the synthetic encoder by EMA.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .cda import CdaConfig, cda_loss, histogram, kl_value, sample_correlations
from .fog import BETA_DENSE, BETA_LIGHT, FogParams, add_fog
from .flownet import SGD, EmaConfig, FlowNet, NetConfig, ema_update
from .geometry import fb_occlusion, nonrigid_mask, project_rigid_flow
from .losses import (LossLog, LossWeights, SparseNorm, consistency_loss, depth_loss, geo_flow_loss,
                     photometric_flow_loss, self_supervised_loss, total_loss)
from .metrics import EvalReport, aggregate, evaluate
from .scene import SceneSample, make_scene, random_scene_config

log = logging.getLogger(__name__)

DISP_MIN = 0.05
GUARD_WINDOW = 50
GUARD_FACTOR = 10.0


class DivergenceError(RuntimeError):
    def __init__(self, stage: str, step: int, reason: str):
        super().__init__(f"{stage} diverged at step {step}: {reason}")
        self.stage = stage
        self.step = step


@dataclass(frozen=True)
class RealFog:
    """Distribution-shifted fog standing in for real captures."""

    beta: float = 0.09
    A: tuple = (0.85, 0.8, 0.7)
    gamma: float = 1.2
    noise: float = 0.01

    def to_dict(self) -> dict:
        return {"beta": self.beta, "A": list(self.A), "gamma": self.gamma, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "RealFog":
        return cls(float(d["beta"]), tuple(d["A"]), float(d["gamma"]), float(d["noise"]))


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    width: int = 64
    height: int = 64
    clean_steps: int = 300
    syn_steps: int = 200
    cama_steps: int = 300
    joint_steps: int = 200
    lr: float = 2e-3
    lr_joint: float = 8e-4
    momentum: float = 0.9
    clip: float | None = 10.0
    reduction: str = "mean"
    depth_source: str = "analytic"
    batch: int = 1
    mask_warmup: int = 100
    lr_decay: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    cda: CdaConfig = field(default_factory=CdaConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    net: NetConfig = field(default_factory=NetConfig)
    fog_light: float = BETA_LIGHT
    fog_dense: float = BETA_DENSE
    real: RealFog = field(default_factory=RealFog)
    n_train: int = 24
    n_real: int = 24
    n_eval: int = 8
    eval_seed: int = 900_000

    def __post_init__(self):
        for name in ("clean_steps", "syn_steps", "cama_steps", "joint_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr <= 0 or self.lr_joint <= 0:
            raise ValueError("learning rates must be positive")
        if self.width % 4 or self.height % 4:
            raise ValueError("scene extent must be divisible by 4")
        if min(self.n_train, self.n_real, self.n_eval) < 1:
            raise ValueError("scene manifests must be non-empty")
        if self.depth_source not in ("analytic", "stereo"):
            raise ValueError("depth_source must be 'analytic' or 'stereo'")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")

    @property
    def total_steps(self) -> int:
        return self.clean_steps + self.syn_steps + self.cama_steps + self.joint_steps

    # manifests are disjoint seed ranges; the eval manifest does not move with ``seed``
    @property
    def train_manifest(self) -> list[int]:
        return [10_000 * (self.seed + 1) + i for i in range(self.n_train)]

    @property
    def real_manifest(self) -> list[int]:
        return [10_000 * (self.seed + 1) + 5_000 + i for i in range(self.n_real)]

    @property
    def eval_manifest(self) -> list[int]:
        return [self.eval_seed + i for i in range(self.n_eval)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.as_dict()
        d["cda"] = self.cda.to_dict()
        d["real"] = self.real.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "cda" in d:
            d["cda"] = CdaConfig.from_dict(d["cda"])
        if "ema" in d:
            d["ema"] = EmaConfig(**d["ema"])
        if "net" in d:
            d["net"] = NetConfig.from_dict(d["net"])
        if "real" in d:
            d["real"] = RealFog.from_dict(d["real"])
        if d.get("clip") is not None:
            d["clip"] = float(d["clip"])
        return cls(**d)

    def with_weights(cfg, /, **kw) -> "TrainConfig":
        return replace(cfg, weights=cfg.weights.replace(**kw))


# -----------------------------------------------------------------------------
# Data
# -----------------------------------------------------------------------------

@lru_cache(maxsize=512)
def scene(seed: int, width: int = 64, height: int = 64) -> SceneSample:
    rng = np.random.default_rng(seed)
    return make_scene(random_scene_config(rng, width, height), seed=seed)


def foggy_pair(s: SceneSample, beta: float) -> tuple[np.ndarray, np.ndarray]:
    p = FogParams(beta)
    return add_fog(s.left_t, s.depth_t, p), add_fog(s.left_t1, s.depth_t1, p)


def real_pair(s: SceneSample, real: RealFog, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shifted fog: different density and airlight, gamma, additive sensor noise."""
    rng = np.random.default_rng([seed, 7])
    p = FogParams(real.beta, real.A)
    out = []
    for img, depth in ((s.left_t, s.depth_t), (s.left_t1, s.depth_t1)):
        j = np.clip(add_fog(img, depth, p), 0.0, 1.0) ** real.gamma
        out.append(np.clip(j + rng.normal(0.0, real.noise, j.shape), 0.0, 1.0))
    return out[0], out[1]


# -----------------------------------------------------------------------------
# Branches and loss terms
# -----------------------------------------------------------------------------

@dataclass
class Branches:
    clean: FlowNet
    syn: FlowNet
    real: FlowNet | None = None

    def state_hash(self, which: str) -> str:
        net = getattr(self, which)
        h = hashlib.sha256()
        for name, t in net.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


def clean_terms(net: FlowNet, s: SceneSample, weights: LossWeights, depth_source: str = "analytic",
                masks: bool = True, norm: SparseNorm = SparseNorm()) -> dict:
    """Photometric, stereo-depth and rigid-flow terms of the clean branch.

    With ``depth_source="analytic"`` the rigid flow uses the scene depth and
    the disparity head is not trained; ``"stereo"`` trains the head with the
    depth loss and projects its (detached) estimate instead.  ``masks=False``
    treats every pixel as visible and rigid (used while the flow is still
    too poor for forward-backward checks to mean anything).
    """
    terms = {}
    out_f = net.forward(s.left_t, s.left_t1)
    out_b = net.forward(s.left_t1, s.left_t)
    if masks:
        O_f, O_b = fb_occlusion(out_f.flow.data, out_b.flow.data)
    else:
        O_f = O_b = np.zeros(s.depth_t.shape)
    if (1 - O_f).sum() > 0 and (1 - O_b).sum() > 0:
        terms["pho"] = photometric_flow_loss(s.left_t, s.left_t1, out_f.flow, out_b.flow, O_f, O_b, norm)
    cam = s.camera
    if depth_source == "stereo" and (weights.depth or weights.geo):
        d_t = net.disparity(s.left_t, s.right_t)
        if weights.depth:
            d_t1 = net.disparity(s.left_t1, s.right_t1)
            terms["depth"] = depth_loss(s.left_t, s.right_t, s.left_t1, s.right_t1, d_t, d_t1, norm)
        depth = cam.fx * cam.baseline / np.maximum(d_t.data, DISP_MIN)
    else:
        depth = s.depth_t
    if weights.geo:
        rigid, valid = project_rigid_flow(depth, cam)
        V = nonrigid_mask(out_f.flow.data, rigid) if masks else np.zeros(valid.shape)
        V = np.maximum(V, ~valid)
        if V.min() < 1:
            terms["geo"] = geo_flow_loss(out_f.flow, rigid, V)
    return terms


def _guard(stage: str, step: int, value: float, history: list[float]) -> None:
    if not np.isfinite(value):
        raise DivergenceError(stage, step, f"non-finite loss {value}")
    if len(history) >= GUARD_WINDOW:
        ref = float(np.median(history[-GUARD_WINDOW:]))
        if ref > 0 and value > GUARD_FACTOR * ref:
            raise DivergenceError(stage, step, f"loss {value:.4g} exceeds {GUARD_FACTOR}x the recent median {ref:.4g}")
    history.append(value)


def _apply(terms: dict, weights: LossWeights, stage: str, step: int, history: list, loss_log: LossLog):
    try:
        total = total_loss(terms, weights)
    except FloatingPointError as exc:
        raise DivergenceError(stage, step, str(exc)) from exc
    value = float(total.data)
    _guard(stage, step, value, history)
    loss_log.record(step, stage, terms, total)
    if total.requires_grad:
        total.backward()
    return value


def _syn_target(clean: FlowNet, s: SceneSample) -> np.ndarray:
    return clean.predict(s.left_t, s.left_t1)


def _cama_terms(cfg: TrainConfig, nets: Branches, step: int) -> dict:
    """Self-supervision and correlation alignment for the real branch."""
    w = cfg.weights
    terms = {}
    if not (w.self or w.kl):
        return terms
    rs = cfg.real_manifest[step % cfg.n_real]
    J_t, J_t1 = real_pair(scene(rs, cfg.width, cfg.height), cfg.real, rs)
    out_r = nets.real.forward(J_t, J_t1)
    if w.self:
        pseudo = nets.syn.predict(J_t, J_t1)
        terms["self"] = self_supervised_loss(out_r.flow, pseudo, cfg.reduction)
    if w.kl:
        ss = cfg.train_manifest[step % cfg.n_train]
        beta = cfg.fog_dense if step % 2 == 0 else cfg.fog_light
        S_t, S_t1 = foggy_pair(scene(ss, cfg.width, cfg.height), beta)
        cv_s = nets.syn.forward(S_t, S_t1).cv
        rng = np.random.default_rng([cfg.cda.seed, cfg.seed, step])
        terms["kl"] = cda_loss(out_r.cv, _detached(cv_s), cfg.cda, rng)
    return terms


def _detached(cv):
    from .costvolume import CostVolume
    return CostVolume(cv.values.detach(), cv.radius, cv.vmin, cv.vmax)


def _syn_terms(cfg: TrainConfig, nets: Branches, step: int) -> dict:
    if not cfg.weights.consis:
        return {}
    ss = cfg.train_manifest[step % cfg.n_train]
    s = scene(ss, cfg.width, cfg.height)
    beta = cfg.fog_dense if step % 2 == 0 else cfg.fog_light
    J_t, J_t1 = foggy_pair(s, beta)
    F_syn = nets.syn.flow(J_t, J_t1)
    return {"consis": consistency_loss(F_syn, _syn_target(nets.clean, s), cfg.reduction)}


# -----------------------------------------------------------------------------
# Stages
# -----------------------------------------------------------------------------

def _trainable(net: FlowNet, include_disp: bool) -> list[str]:
    return [n for n in net.params.names() if include_disp or not n.startswith("disp.")]


def _horizon(cfg: TrainConfig, steps: int) -> int | None:
    return steps if cfg.lr_decay and steps > 0 else None


def _mean_terms(batch: list[dict]) -> dict:
    """Average each named term over the batch entries that produced it."""
    out = {}
    for name in {k for terms in batch for k in terms}:
        vals = [terms[name] for terms in batch if name in terms]
        total = vals[0]
        for v in vals[1:]:
            total = total + v
        out[name] = total * (1.0 / len(vals)) if len(vals) > 1 else total
    return out


def _indices(cfg: TrainConfig, step: int, offset: int = 0) -> range:
    start = (offset + step) * cfg.batch
    return range(start, start + cfg.batch)


def _clean_batch(cfg: TrainConfig, net: FlowNet, step: int, offset: int = 0) -> dict:
    masks = offset + step >= cfg.mask_warmup
    return _mean_terms([
        clean_terms(net, scene(cfg.train_manifest[i % cfg.n_train], cfg.width, cfg.height),
                    cfg.weights, cfg.depth_source, masks)
        for i in _indices(cfg, step, offset)
    ])


def stage_dama(cfg: TrainConfig, loss_log: LossLog | None = None) -> Branches:
    """Clean-branch training, then the synthetic branch by flow consistency on fog."""
    loss_log = LossLog() if loss_log is None else loss_log
    clean = FlowNet(cfg.net, cfg.seed)
    opt = SGD(clean.params, cfg.lr, cfg.momentum, cfg.clip,
              _trainable(clean, cfg.depth_source == "stereo"), _horizon(cfg, cfg.clean_steps))
    w = cfg.weights
    history: list[float] = []
    for step in range(cfg.clean_steps):
        clean.params.zero_grad()
        _apply(_clean_batch(cfg, clean, step), w, "dama-clean", step, history, loss_log)
        opt.step()
    syn = clean.clone()
    opt = SGD(syn.params, cfg.lr, cfg.momentum, cfg.clip, _trainable(syn, False),
              _horizon(cfg, cfg.syn_steps))
    nets = Branches(clean, syn)
    history = []
    for step in range(cfg.syn_steps if w.consis else 0):
        syn.params.zero_grad()
        terms = _mean_terms([_syn_terms(cfg, nets, i) for i in _indices(cfg, step)])
        _apply(terms, w, "dama-syn", step, history, loss_log)
        opt.step()
    return nets


def stage_cama(cfg: TrainConfig, nets: Branches, loss_log: LossLog | None = None) -> Branches:
    """Real branch from pseudo-labels and correlation alignment; EMA-coupled encoder."""
    loss_log = LossLog() if loss_log is None else loss_log
    nets.real = nets.syn.clone()
    opt = SGD(nets.real.params, cfg.lr, cfg.momentum, cfg.clip, _trainable(nets.real, False),
              _horizon(cfg, cfg.cama_steps))
    history: list[float] = []
    for step in range(cfg.cama_steps):
        nets.real.params.zero_grad()
        terms = _mean_terms([_cama_terms(cfg, nets, i) for i in _indices(cfg, step)])
        _apply(terms, cfg.weights, "cama", step, history, loss_log)
        if terms:
            opt.step()
        ema_update(nets.real.params, nets.syn.params, cfg.ema)
    return nets


def stage_joint(cfg: TrainConfig, nets: Branches, loss_log: LossLog | None = None) -> Branches:
    """All three branches under the weighted total objective."""
    loss_log = LossLog() if loss_log is None else loss_log
    w = cfg.weights
    horizon = _horizon(cfg, cfg.joint_steps)
    opts = [SGD(nets.clean.params, cfg.lr_joint, cfg.momentum, cfg.clip,
                _trainable(nets.clean, cfg.depth_source == "stereo"), horizon),
            SGD(nets.syn.params, cfg.lr_joint, cfg.momentum, cfg.clip, _trainable(nets.syn, False), horizon),
            SGD(nets.real.params, cfg.lr_joint, cfg.momentum, cfg.clip, _trainable(nets.real, False), horizon)]
    history: list[float] = []
    for step in range(cfg.joint_steps):
        for net in (nets.clean, nets.syn, nets.real):
            net.params.zero_grad()
        terms = _clean_batch(cfg, nets.clean, step, cfg.clean_steps)
        terms.update(_mean_terms([_syn_terms(cfg, nets, i) for i in _indices(cfg, step, cfg.syn_steps)]))
        terms.update(_mean_terms([_cama_terms(cfg, nets, i) for i in _indices(cfg, step, cfg.cama_steps)]))
        _apply(terms, w, "joint", step, history, loss_log)
        for opt in opts:
            opt.step()
        ema_update(nets.real.params, nets.syn.params, cfg.ema)
    return nets


# -----------------------------------------------------------------------------
# Evaluation and the full pipeline
# -----------------------------------------------------------------------------

def evaluate_net(net: FlowNet, cfg: TrainConfig, domain: str) -> EvalReport:
    """Aggregate report of ``net`` on the eval manifest rendered in ``domain``.

    ``domain`` is one of ``clean``, ``light``, ``dense`` or ``real``.
    """
    reports = []
    for sd in cfg.eval_manifest:
        s = scene(sd, cfg.width, cfg.height)
        if domain == "clean":
            a, b = s.left_t, s.left_t1
        elif domain in ("light", "dense"):
            a, b = foggy_pair(s, cfg.fog_light if domain == "light" else cfg.fog_dense)
        elif domain == "real":
            a, b = real_pair(s, cfg.real, sd)
        else:
            raise ValueError(f"unknown domain {domain!r}")
        reports.append(evaluate(net.predict(a, b), s.flow, s.flow_valid, s.nonrigid))
    return aggregate(reports)


def mean_kl(net_r: FlowNet, net_s: FlowNet, cfg: TrainConfig) -> float:
    """Hard-binned KL between real-branch volumes on real fog and synthetic-branch
    volumes on dense synthetic fog, averaged over the eval manifest."""
    vals = []
    for i, sd in enumerate(cfg.eval_manifest):
        s = scene(sd, cfg.width, cfg.height)
        cv_r = net_r.forward(*real_pair(s, cfg.real, sd)).cv
        cv_s = net_s.forward(*foggy_pair(s, cfg.fog_dense)).cv
        rng = np.random.default_rng([cfg.cda.seed, i])
        p_r = histogram(sample_correlations(cv_r, cfg.cda, rng), cfg.cda)
        p_s = histogram(sample_correlations(cv_s, cfg.cda, rng), cfg.cda)
        vals.append(kl_value(p_r.numpy, p_s.numpy))
    return float(np.mean(vals))


def _round(x):
    if isinstance(x, float):
        return float(f"{x:.12g}")
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_round(v) for v in x]
    return x


ABLATIONS = {
    "baseline": dict(geo=0.0, consis=0.0, self=0.0, kl=0.0),
    "geo": dict(consis=0.0, self=0.0, kl=0.0),
    "consis": dict(geo=0.0, self=0.0, kl=0.0),
    "no_adaptation": dict(consis=0.0, self=0.0, kl=0.0),
    "dama_only": dict(self=0.0, kl=0.0),
    "no_kl": dict(kl=0.0),
    "no_self": dict(self=0.0),
    "full": dict(),
}


def _dama_key(cfg: TrainConfig) -> str:
    w = cfg.weights
    d = cfg.to_dict()
    for k in ("cama_steps", "joint_steps", "lr_joint", "real", "n_real", "ema"):
        d.pop(k, None)
    d["weights"] = {k: v for k, v in w.as_dict().items() if k in ("depth", "pho", "geo", "consis")}
    return json.dumps(d, sort_keys=True, default=str)


def run_pipeline(cfg: TrainConfig, out_dir=None, dama_cache: dict | None = None) -> dict:
    """DAMA, CAMA and joint fine-tuning; returns the JSON-serializable report.

    With ``out_dir`` the final real-branch checkpoint, loss curves, report and
    flow visualizations are written there.  ``dama_cache`` lets runs that
    share the DAMA settings reuse its result.
    """
    from .flownet import save_checkpoint
    from .flowviz import write_flow_ppm

    loss_log = LossLog()
    key = _dama_key(cfg)
    if dama_cache is not None and key in dama_cache:
        clean_state, syn_state, rows = dama_cache[key]
        nets = Branches(FlowNet(cfg.net, cfg.seed), FlowNet(cfg.net, cfg.seed))
        nets.clean.params.load_state(clean_state)
        nets.syn.params.load_state(syn_state)
        loss_log.rows.extend(dict(r) for r in rows)
    else:
        nets = stage_dama(cfg, loss_log)
        if dama_cache is not None:
            dama_cache[key] = (nets.clean.params.state(), nets.syn.params.state(),
                               [dict(r) for r in loss_log.rows])
    report = {"config": cfg.to_dict(), "stages": {}}
    report["stages"]["dama"] = {
        "clean_on_clean": evaluate_net(nets.clean, cfg, "clean").to_dict(),
        "syn_on_dense": evaluate_net(nets.syn, cfg, "dense").to_dict(),
        "syn_on_real": evaluate_net(nets.syn, cfg, "real").to_dict(),
    }
    kl_start = mean_kl(nets.syn, nets.syn, cfg)
    nets = stage_cama(cfg, nets, loss_log)
    report["stages"]["cama"] = {
        "real_on_real": evaluate_net(nets.real, cfg, "real").to_dict(),
        "kl_start": kl_start,
        "kl_end": mean_kl(nets.real, nets.syn, cfg),
    }
    nets = stage_joint(cfg, nets, loss_log)
    final = evaluate_net(nets.real, cfg, "real")
    report["stages"]["joint"] = {
        "real_on_real": final.to_dict(),
        "syn_on_real": evaluate_net(nets.syn, cfg, "real").to_dict(),
        "real_on_dense": evaluate_net(nets.real, cfg, "dense").to_dict(),
    }
    report["final"] = {"real_epe": final.epe, "real_f1_all": final.f1_all}
    report["steps"] = cfg.total_steps
    report = _round(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(nets.real, out / "real", cfg.total_steps, {"config": cfg.to_dict()})
        loss_log.write_csv(out / "losses.csv")
        (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        s = scene(cfg.eval_manifest[0], cfg.width, cfg.height)
        a, b = real_pair(s, cfg.real, cfg.eval_manifest[0])
        write_flow_ppm(out / "flow_pred.ppm", nets.real.predict(a, b))
        write_flow_ppm(out / "flow_gt.ppm", s.flow)
    report["_nets"] = nets
    return report


def public(report: dict) -> dict:
    """Report without in-memory objects."""
    return {k: v for k, v in report.items() if not k.startswith("_")}


def report_json(report: dict) -> str:
    return json.dumps(public(report), indent=1, sort_keys=True) + "\n"


def run_ablation(cfg: TrainConfig, rows=("baseline", "consis", "no_adaptation", "dama_only", "no_kl", "full"),
                 seeds=(0,), dama_cache: dict | None = None) -> dict:
    """Final real-domain EPE per ablation row and seed."""
    dama_cache = {} if dama_cache is None else dama_cache
    table: dict[str, dict] = {}
    for row in rows:
        if row not in ABLATIONS:
            raise KeyError(f"unknown ablation row {row!r}")
        per_seed = {}
        for sd in seeds:
            c = replace(cfg.with_weights(**ABLATIONS[row]), seed=sd)
            per_seed[str(sd)] = run_pipeline(c, dama_cache=dama_cache)["final"]["real_epe"]
        table[row] = {"epe": per_seed, "mean": float(np.mean(list(per_seed.values())))}
    return table
