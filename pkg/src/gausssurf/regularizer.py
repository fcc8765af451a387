"""Surface-alignment training: photometric fitting, opacity entropy, pruning and the
SDF / normal regularizers with the SDF estimate read off rendered depth maps."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import density_field as dfield
from ._geometry import SCALE_FLOOR, inverse_covariance_vjp, quat_to_rotmat_vjp
from .eval_metrics import ssim_rgb_with_grad
from .scene_io import Camera, EmptySceneError, Scene
from .splat_render import DepthMap, RenderSettings, SceneGrads, backward_render, render

log = logging.getLogger(__name__)

ENTROPY_CLAMP = 1e-6
NORMAL_GRAD_EPS = 1e-9
OCCLUSION_BAND = 3.0


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, snapshot: Scene | None = None, step: int | None = None):
        super().__init__(message)
        self.snapshot = snapshot
        self.step = step


@dataclass
class LossWeights:
    photometric: float = 1.0
    entropy: float = 0.1
    sdf: float = 1.0
    normal: float = 0.1
    dssim: float = 0.2   # fraction of the photometric term given to (1 - SSIM)


@dataclass
class LearningRates:
    mean: float = 1.6e-4      # multiplied by the scene extent
    mean_final: float = 1.6e-6  # log-linear decay of the mean rate over the whole schedule
    log_scale: float = 5e-3
    rot: float = 1e-3
    opacity_logit: float = 5e-2
    sh: float = 2.5e-3


@dataclass
class TrainConfig:
    iters_free: int = 7000
    iters_entropy: int = 2000
    iters_reg: int = 6000
    prune_alpha: float = 0.5
    knn_refresh: int = 500
    n_reg_points: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    lr: LearningRates = field(default_factory=LearningRates)
    seed: int = 0
    opacity_weighted_sampling: bool = False
    entropy_in_reg_phase: bool = False
    render: RenderSettings = field(default_factory=RenderSettings)

    def validate(self) -> None:
        for name in ("iters_free", "iters_entropy", "iters_reg", "knn_refresh", "n_reg_points"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.prune_alpha < 1.0:
            raise ValueError("prune_alpha must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = LossWeights(**d.pop("weights", {}))
        lr = LearningRates(**d.pop("lr", {}))
        rs = RenderSettings(**d.pop("render", {}))
        return cls(weights=w, lr=lr, render=rs, **d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["render"]["background"] = list(d["render"]["background"])
        return d


# ---------------------------------------------------------------------------
# sampling and the depth-map SDF estimate

@dataclass
class RegPointBatch:
    points: np.ndarray       # (M, 3)
    source: np.ndarray       # (M,) Gaussian the point was drawn from
    f_hat: np.ndarray        # (M,) NaN where invalid
    valid: np.ndarray        # (M,) bool

    def __len__(self) -> int:
        return len(self.points)


def sample_reg_points(scene: Scene, n: int, rng: np.random.Generator, opacity_weighted: bool = False):
    """Draw points from the Gaussian mixture: pick a Gaussian, then sample it."""
    if n <= 0:
        raise ValueError("n must be positive")
    if opacity_weighted:
        w = scene.opacities
        src = rng.choice(len(scene), size=n, p=w / w.sum())
    else:
        src = rng.integers(0, len(scene), size=n)
    R = scene.rotations[src]
    z = rng.standard_normal((n, 3)) * scene.scales[src]
    return scene.means[src] + np.einsum("nij,nj->ni", R, z), src


def estimate_sdf_hat(points, cam: Camera, depth_map: DepthMap, coverage: float = 0.5, near: float = 0.01,
                     bilinear: bool = True):
    """Depth of each point minus the rendered depth along its line of sight.

    Positive behind the visible surface, negative in front.  The depth is read
    bilinearly when all four surrounding pixels are covered, otherwise at the
    nearest pixel.  Returns ``(f_hat, valid)``; invalid points (behind the
    camera, off-image or on uncovered pixels) carry NaN.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    uv, z = cam.project(pts)
    w, h = depth_map.width, depth_map.height
    valid = np.isfinite(uv).all(axis=1) & (z > near)
    uv = np.where(valid[:, None], uv, -10.0)
    px = np.rint(uv[:, 0]).astype(np.int64)
    py = np.rint(uv[:, 1]).astype(np.int64)
    valid &= (px >= 0) & (px < w) & (py >= 0) & (py < h)
    pxc, pyc = np.clip(px, 0, w - 1), np.clip(py, 0, h - 1)
    cov = depth_map.acc_alpha >= coverage
    valid &= cov[pyc, pxc]
    depth = depth_map.depth[pyc, pxc]
    if bilinear:
        x0 = np.floor(uv[:, 0]).astype(np.int64)
        y0 = np.floor(uv[:, 1]).astype(np.int64)
        inb = (x0 >= 0) & (x0 + 1 < w) & (y0 >= 0) & (y0 + 1 < h)
        x0c, y0c = np.clip(x0, 0, w - 2), np.clip(y0, 0, h - 2)
        fx, fy = uv[:, 0] - x0c, uv[:, 1] - y0c
        corners = [(y0c, x0c, (1 - fx) * (1 - fy)), (y0c, x0c + 1, fx * (1 - fy)),
                   (y0c + 1, x0c, (1 - fx) * fy), (y0c + 1, x0c + 1, fx * fy)]
        all_cov = inb & np.all([cov[yy, xx] for yy, xx, _ in corners], axis=0)
        bil = sum(wt * depth_map.depth[yy, xx] for yy, xx, wt in corners)
        depth = np.where(all_cov, bil, depth)
    f_hat = np.where(valid, z - depth, np.nan)
    if single:
        return (float(f_hat[0]) if valid[0] else None)
    return f_hat, valid


def make_batch(scene: Scene, points, source, cam: Camera, depth_map: DepthMap,
               band: float = OCCLUSION_BAND) -> RegPointBatch:
    """Pair sampled points with f_hat from ``cam``.

    A point whose source Gaussian is hidden behind the visible surface gets an
    f_hat near the object thickness rather than its distance to the surface, so
    points with ``|f_hat|`` beyond ``band`` times their source's largest scale
    are dropped as occluded.
    """
    f_hat, valid = estimate_sdf_hat(points, cam, depth_map)
    src = np.asarray(source)
    reach = band * scene.scales[src].max(axis=1)
    with np.errstate(invalid="ignore"):
        valid = valid & (np.abs(f_hat) <= reach)
    f_hat = np.where(valid, f_hat, np.nan)
    return RegPointBatch(np.asarray(points), np.asarray(source), f_hat, valid)


# ---------------------------------------------------------------------------
# gradient plumbing shared by the two regularizers

class _GradAccumulator:
    """Collects per-Gaussian partials in (mean, precision, alpha, min-scale, min-axis)
    form and converts them to parameter-space SceneGrads once."""

    def __init__(self, cache: dfield.GaussianCache):
        n = len(cache.means)
        self.cache = cache
        self.mean = np.zeros((n, 3))
        self.prec = np.zeros((n, 3, 3))
        self.alpha = np.zeros(n)
        self.s_min = np.zeros(n)
        self.n_min = np.zeros((n, 3))

    def density_terms(self, ev: dfield.FieldEval, g_d: np.ndarray, rows: np.ndarray) -> None:
        """Add the pullback of ``sum_m g_d[m] * d(p_m)`` over selected rows."""
        if not np.any(rows):
            return
        ids = ev.ids[rows]
        e, dl, v = ev.e[rows], ev.delta[rows], ev.v[rows]
        a = self.cache.alpha[ids]
        gd = g_d[rows][:, None]
        np.add.at(self.alpha, ids, gd * e)
        np.add.at(self.mean, ids, (gd * a * e)[..., None] * v)
        np.add.at(self.prec, ids, (-0.5 * gd * a * e)[..., None, None] * dl[..., :, None] * dl[..., None, :])

    def gradient_terms(self, ev: dfield.FieldEval, G: np.ndarray, rows: np.ndarray) -> None:
        """Add the pullback of ``sum_m <G[m], grad d(p_m)>`` over selected rows."""
        if not np.any(rows):
            return
        ids = ev.ids[rows]
        e, dl, v = ev.e[rows], ev.delta[rows], ev.v[rows]
        Gm = np.broadcast_to(G[rows][:, None, :], v.shape)
        a = self.cache.alpha[ids]
        c = np.einsum("mki,mki->mk", Gm, v)
        P = self.cache.prec[ids]
        PG = np.einsum("mkij,mkj->mki", P, Gm)
        np.add.at(self.alpha, ids, -e * c)
        np.add.at(self.mean, ids, (a * e)[..., None] * (PG - c[..., None] * v))
        outer_dd = dl[..., :, None] * dl[..., None, :]
        sym = 0.5 * (Gm[..., :, None] * dl[..., None, :] + dl[..., :, None] * Gm[..., None, :])
        np.add.at(self.prec, ids, -(a * e)[..., None, None] * (-0.5 * c[..., None, None] * outer_dd + sym))

    def to_scene_grads(self, scene: Scene) -> SceneGrads:
        c = self.cache
        n = len(scene)
        dR, ds = inverse_covariance_vjp(c.R, c.scales, self.prec)
        rows = np.arange(n)
        ds[rows, c.min_axis] += self.s_min
        dR[rows, :, c.min_axis] += self.n_min
        active = np.exp(scene.log_scales) > SCALE_FLOOR
        d_log_scale = ds * c.scales * active
        d_rot = quat_to_rotmat_vjp(scene.quats, dR)
        d_logit = self.alpha * c.alpha * (1.0 - c.alpha)
        return SceneGrads(self.mean.copy(), d_log_scale, d_rot, d_logit, np.zeros_like(scene.sh))


# ---------------------------------------------------------------------------
# losses

_warn_counter = {"empty_sdf_batch": 0}


def empty_batch_warnings() -> int:
    return _warn_counter["empty_sdf_batch"]


def reg_loss_sdf(scene: Scene, batch: RegPointBatch, index: dfield.NeighborIndex | None = None,
                 exact: bool = False, cache: dfield.GaussianCache | None = None):
    """Mean of |f_hat - f| over valid points, with sign(f) taken from f_hat.

    f_hat is a constant; gradients flow through the density and the closest
    Gaussian's smallest scale.
    """
    cache = cache or dfield.GaussianCache(scene)
    valid = np.asarray(batch.valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        _warn_counter["empty_sdf_batch"] += 1
        return 0.0, SceneGrads.zeros_like(scene)
    pts = batch.points[valid]
    fh = batch.f_hat[valid]
    ev = dfield.evaluate(pts, cache, index, exact)
    s_star = cache.s_min[ev.g_star]
    d = ev.d
    inside = (d > dfield.D_CLAMP) & (d < 1.0 - dfield.D_CLAMP)
    dc = np.clip(d, dfield.D_CLAMP, 1.0 - dfield.D_CLAMP)
    u = np.sqrt(-2.0 * np.log(dc))
    sigma = np.where(fh >= 0.0, 1.0, -1.0)
    resid = fh - sigma * s_star * u
    loss = float(np.mean(np.abs(resid)))

    g_r = np.sign(resid) / n_valid
    g_abs_f = -sigma * g_r
    acc = _GradAccumulator(cache)
    np.add.at(acc.s_min, ev.g_star, g_abs_f * u)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_d = np.where(inside, g_abs_f * s_star * (-1.0 / (dc * u)), 0.0)
    acc.density_terms(ev, g_d, inside)
    return loss, acc.to_scene_grads(scene)


def reg_loss_normal(scene: Scene, batch: RegPointBatch, index: dfield.NeighborIndex | None = None,
                    exact: bool = False, cache: dfield.GaussianCache | None = None):
    """Mean squared distance between the unit SDF gradient and the closest Gaussian's
    thin axis, the axis sign chosen to face the gradient."""
    cache = cache or dfield.GaussianCache(scene)
    ev = dfield.evaluate(batch.points, cache, index, exact)
    d = ev.d
    inside = (d > dfield.D_CLAMP) & (d < 1.0 - dfield.D_CLAMP)
    dc = np.clip(d, dfield.D_CLAMP, 1.0 - dfield.D_CLAMP)
    u = np.sqrt(-2.0 * np.log(dc))
    s_star = cache.s_min[ev.g_star]
    gnorm = np.linalg.norm(ev.grad_d, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        grad_f_norm = s_star * gnorm / (dc * u)
    use = inside & (grad_f_norm >= NORMAL_GRAD_EPS) & (gnorm > 0)
    n_use = int(use.sum())
    if n_use == 0:
        return 0.0, SceneGrads.zeros_like(scene)
    m = np.zeros_like(ev.grad_d)
    m[use] = ev.grad_d[use] / gnorm[use, None]
    n_star = cache.n_min[ev.g_star]
    c = np.einsum("mi,mi->m", m, n_star)
    sg = np.where(c >= 0.0, 1.0, -1.0)
    per = np.where(use, 2.0 - 2.0 * np.abs(c), 0.0)
    loss = float(per.sum() / n_use)

    w = np.where(use, 1.0 / n_use, 0.0)
    d_m = (-2.0 * sg * w)[:, None] * n_star
    d_n = (-2.0 * sg * w)[:, None] * m
    safe = np.where(use, gnorm, 1.0)[:, None]
    G = (d_m - np.einsum("mi,mi->m", d_m, m)[:, None] * m) / safe
    acc = _GradAccumulator(cache)
    acc.gradient_terms(ev, G, use)
    np.add.at(acc.n_min, ev.g_star[use], d_n[use])
    return loss, acc.to_scene_grads(scene)


def opacity_entropy_loss(scene: Scene):
    """Mean binary entropy of the opacities and its gradient w.r.t. the opacity logits."""
    a = np.clip(scene.opacities, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    ent = -a * np.log(a) - (1 - a) * np.log(1 - a)
    n = len(a)
    raw = scene.opacities
    clamped = (raw <= ENTROPY_CLAMP) | (raw >= 1.0 - ENTROPY_CLAMP)
    d_a = np.where(clamped, 0.0, np.log((1 - a) / a)) / n
    return float(ent.mean()), d_a * raw * (1 - raw)


def prune_transparent(scene: Scene, threshold: float) -> Scene:
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    keep = np.flatnonzero(scene.opacities >= threshold)
    if len(keep) == 0:
        raise EmptySceneError(f"pruning at opacity {threshold} removed every Gaussian")
    return scene.subset(keep)


def photometric_loss(image: np.ndarray, target: np.ndarray, dssim: float = 0.2):
    """(1 - w) * L1 + w * (1 - SSIM) and its gradient w.r.t. the rendered image."""
    diff = image - target
    l1 = float(np.abs(diff).mean())
    g = (1.0 - dssim) * np.sign(diff) / diff.size
    loss = (1.0 - dssim) * l1
    if dssim > 0.0:
        s, gs = ssim_rgb_with_grad(image, target)
        loss += dssim * (1.0 - s)
        g = g - dssim * gs
    return loss, g


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1 - self.b1**self.t
        bc2 = 1 - self.b2**self.t
        for name, p in params.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0:
                continue
            g = grads[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def select(self, keep: np.ndarray) -> None:
        """Keep optimizer moments only for surviving rows."""
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][keep]

    def state_dict(self) -> dict:
        return {"t": self.t, "lrs": self.lrs, "m": self.m, "v": self.v}


def scene_params(scene: Scene) -> dict[str, np.ndarray]:
    return {"mean": scene.means, "log_scale": scene.log_scales, "rot": scene.quats,
            "opacity_logit": scene.opacity_logits, "sh": scene.sh}


def scene_extent(scene: Scene, cams) -> float:
    if cams:
        centers = np.stack([c.center for c in cams])
        return float(1.1 * np.max(np.linalg.norm(centers - centers.mean(0), axis=1)))
    return float(np.max(np.ptp(scene.means, axis=0)))


# ---------------------------------------------------------------------------
# training loop

class Trainer:
    """Three-phase schedule: free fitting, + opacity entropy, prune, + regularizers."""

    def __init__(self, scene: Scene, images, cams, cfg: TrainConfig):
        cfg.validate()
        if len(images) != len(cams):
            raise ValueError("images and cameras must be aligned")
        self.scene = scene.copy()
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        self.cams = list(cams)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        extent = scene_extent(scene, cams)
        lr = asdict(cfg.lr)
        self.mean_lr = (lr["mean"] * extent, lr.pop("mean_final") * extent)
        lr["mean"] = self.mean_lr[0]
        self.opt = Adam(lr)
        self.total_steps = cfg.iters_free + cfg.iters_entropy + cfg.iters_reg
        self.history: list[dict] = []
        self.index: dfield.NeighborIndex | None = None
        self.step_count = 0
        self.phase_marks: dict[str, dict] = {}

    def mean_rate(self, step: int) -> float:
        lr0, lr1 = self.mean_lr
        if lr0 <= 0 or lr1 <= 0 or self.total_steps <= 1:
            return lr0
        frac = min(step / (self.total_steps - 1), 1.0)
        return float(math.exp((1 - frac) * math.log(lr0) + frac * math.log(lr1)))

    def _snapshot_stats(self, tag: str) -> None:
        a = self.scene.opacities
        self.phase_marks[tag] = {"step": self.step_count, "n_gaussians": len(self.scene),
                                 "mid_opacity_fraction": float(np.mean((a > 0.2) & (a < 0.8)))}

    def _step(self, phase: int) -> dict:
        cfg, w = self.cfg, self.cfg.weights
        cam_id = int(self.rng.integers(len(self.cams)))
        cam = self.cams[cam_id]
        rec = {"step": self.step_count, "phase": phase, "view": cam_id, "photometric": 0.0,
               "entropy": 0.0, "sdf": 0.0, "normal": 0.0, "w_photometric": w.photometric,
               "w_entropy": 0.0, "w_sdf": 0.0, "w_normal": 0.0, "n_reg_valid": 0}
        grads = SceneGrads.zeros_like(self.scene)
        out = render(self.scene, cam, cfg.render)
        if w.photometric > 0:
            loss, g_img = photometric_loss(out.image, self.images[cam_id], w.dssim)
            rec["photometric"] = loss
            grads = grads + backward_render(self.scene, cam, g_img * w.photometric, cfg.render, out).scaled(1.0)
        if phase == 2 or (phase == 3 and cfg.entropy_in_reg_phase):
            ent, d_logit = opacity_entropy_loss(self.scene)
            rec["entropy"], rec["w_entropy"] = ent, w.entropy
            grads.opacity_logit = grads.opacity_logit + w.entropy * d_logit
        if phase == 3:
            if self.index is None or self.index.stale_counter >= cfg.knn_refresh:
                self.index = dfield.rebuild_index(self.scene)
            cache = dfield.GaussianCache(self.scene)
            pts, src = sample_reg_points(self.scene, cfg.n_reg_points, self.rng, cfg.opacity_weighted_sampling)
            batch = make_batch(self.scene, pts, src, cam, out.depth)
            rec["n_reg_valid"] = int(batch.valid.sum())
            l_sdf, g_sdf = reg_loss_sdf(self.scene, batch, self.index, cache=cache)
            l_nrm, g_nrm = reg_loss_normal(self.scene, batch, self.index, cache=cache)
            rec.update(sdf=l_sdf, normal=l_nrm, w_sdf=w.sdf, w_normal=w.normal)
            grads = grads + g_sdf.scaled(w.sdf) + g_nrm.scaled(w.normal)
            self.index.tick()
        rec["total"] = (rec["photometric"] * rec["w_photometric"] + rec["entropy"] * rec["w_entropy"]
                        + rec["sdf"] * rec["w_sdf"] + rec["normal"] * rec["w_normal"])
        if not math.isfinite(rec["total"]) or not grads.is_finite():
            raise TrainingDivergedError(f"non-finite loss or gradient at step {self.step_count} (phase {phase})",
                                        self.scene.copy(), self.step_count)
        self.opt.lrs["mean"] = self.mean_rate(self.step_count)
        self.opt.step(scene_params(self.scene), grads.as_dict())
        self.scene.quats[:] = self.scene.quats / np.linalg.norm(self.scene.quats, axis=1, keepdims=True)
        rec["n_gaussians"] = len(self.scene)
        self.step_count += 1
        return rec

    def run(self, callback=None) -> Scene:
        cfg = self.cfg
        self._snapshot_stats("start")
        for _ in range(cfg.iters_free):
            self.history.append(self._step(1))
            if callback:
                callback(self)
        self._snapshot_stats("after_free")
        for _ in range(cfg.iters_entropy):
            self.history.append(self._step(2))
            if callback:
                callback(self)
        self._snapshot_stats("after_entropy")
        if cfg.iters_free + cfg.iters_entropy + cfg.iters_reg == 0:
            return self.scene
        if cfg.iters_entropy > 0 or cfg.iters_reg > 0:
            keep = np.flatnonzero(self.scene.opacities >= cfg.prune_alpha)
            if len(keep) == 0:
                raise EmptySceneError(f"pruning at opacity {cfg.prune_alpha} removed every Gaussian")
            if len(keep) < len(self.scene):
                log.info("pruned %d of %d Gaussians", len(self.scene) - len(keep), len(self.scene))
                self.scene = self.scene.subset(keep)
                self.opt.select(keep)
        self._snapshot_stats("after_prune")
        self.index = None
        for _ in range(cfg.iters_reg):
            self.history.append(self._step(3))
            if callback:
                callback(self)
        self._snapshot_stats("end")
        return self.scene


def train(scene: Scene, images, cams, cfg: TrainConfig, history: list | None = None) -> Scene:
    trainer = Trainer(scene, images, cams, cfg)
    out = trainer.run()
    if history is not None:
        history.extend(trainer.history)
    return out
