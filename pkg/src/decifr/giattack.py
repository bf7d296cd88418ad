"""Guided gradient inversion.

An intercepted FedAvg update is turned into a gradient estimate by dividing
the weight delta by the client learning rate.  A dummy image is then optimised
so that the gradient it induces, paired with a fixed guiding layout, matches
that estimate.  The objective is

    L_total = L_grad + lambda_tv * L_tv - lambda_dummy * min(L_dummy, dummy_clamp)

with L_grad a blend of gradient MSE and cosine distance, L_tv the anisotropic
total variation of the dummy image and L_dummy the segmentation loss of the
dummy image against the guiding layout.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import segnet
from .errors import InvalidConfigError, NonFiniteError, ProtocolError
from .segnet import ModelParams
from .synthcell import LayoutMask, save_png

TRACE_COLUMNS = ("iteration", "L_total", "L_grad", "L_tv", "L_dummy", "L_dummy_clamped")


@dataclass
class GIAConfig:
    alpha: float = 0.5
    lambda_tv: float = 0.001
    lambda_dummy: float = 0.0
    iterations: int = 2000
    step_size: float = 0.1
    init_mode: str = "noise"
    eta_grid: list[float] | None = None
    grid_iterations: int = 200
    dummy_clamp: float = 2 * math.log(2)
    cosine_raw: bool = False
    log_interval: int = 10
    divergence_factor: float = 10.0
    divergence_patience: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidConfigError("alpha must lie in [0, 1]")
        if self.lambda_tv < 0 or self.lambda_dummy < 0:
            raise InvalidConfigError("lambda_tv and lambda_dummy must be >= 0")
        if self.iterations < 1 or self.grid_iterations < 1 or self.log_interval < 1:
            raise InvalidConfigError("iterations, grid_iterations and log_interval must be >= 1")
        if self.init_mode not in ("noise", "gray"):
            raise InvalidConfigError(f"init_mode must be 'noise' or 'gray', got {self.init_mode!r}")
        if self.dummy_clamp < 0:
            raise InvalidConfigError("dummy_clamp must be >= 0")
        if self.eta_grid is not None and (not self.eta_grid or min(self.eta_grid) <= 0):
            raise InvalidConfigError("eta_grid must be a nonempty list of positive rates")


@dataclass
class GradientTarget:
    grad: torch.Tensor
    eta_used: float
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if not bool(torch.isfinite(self.grad).all()):
            raise NonFiniteError("extracted gradient has non-finite entries")


def _flat(w) -> torch.Tensor:
    if isinstance(w, ModelParams):
        return w.flatten().detach()
    return torch.as_tensor(np.asarray(w) if not torch.is_tensor(w) else w)


def extract_gradients(w_prev, w_curr, eta: float, source: dict | None = None) -> GradientTarget:
    """Gradient estimate (W_prev - W_curr) / eta, computed in float64."""
    if not eta > 0:
        raise InvalidConfigError(f"learning rate must be positive, got {eta}")
    a, b = _flat(w_prev), _flat(w_curr)
    if a.shape != b.shape:
        raise ProtocolError(f"weight vectors differ in length: {a.numel()} vs {b.numel()}")
    grad = (a.to(torch.float64) - b.to(torch.float64)) / eta
    return GradientTarget(grad, float(eta), dict(source or {}))


def grad_match_loss(dummy_grad: torch.Tensor, target_grad: torch.Tensor, alpha: float,
                    cosine_raw: bool = False) -> torch.Tensor:
    """alpha * MSE + (1 - alpha) * (1 - cos); the cosine part is 0 for near-zero vectors.

    ``cosine_raw=True`` uses +cos instead of the cosine distance.
    """
    if dummy_grad.shape != target_grad.shape:
        raise ProtocolError("gradient vectors differ in length")
    target_grad = target_grad.to(dummy_grad.dtype)
    mse = torch.mean((dummy_grad - target_grad) ** 2)
    nd, nt = torch.linalg.vector_norm(dummy_grad), torch.linalg.vector_norm(target_grad)
    if float(nd.detach()) < 1e-12 or float(nt.detach()) < 1e-12:
        cos_term = torch.zeros((), dtype=dummy_grad.dtype)
    else:
        cos = torch.dot(dummy_grad, target_grad) / (nd * nt)
        cos_term = cos if cosine_raw else 1 - cos
    return alpha * mse + (1 - alpha) * cos_term


def tv_loss(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean vertical plus mean horizontal absolute difference."""
    x = torch.as_tensor(x)
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs().mean()
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs().mean()
    return dv + dh


def _label_tensor(guide_label, dtype) -> torch.Tensor:
    px = guide_label.pixels if isinstance(guide_label, LayoutMask) else guide_label
    return torch.as_tensor(np.asarray(px), dtype=dtype)


def total_loss(x_prime: torch.Tensor, guide_label, target: GradientTarget, cfg: GIAConfig,
               params: ModelParams) -> tuple[torch.Tensor, dict[str, float]]:
    """Composite objective and its components (as floats, for logging)."""
    y = _label_tensor(guide_label, params.config.torch_dtype)
    l_dummy, g_dummy = segnet.loss_and_param_grad(params, x_prime, y, create_graph=True)
    l_grad = grad_match_loss(g_dummy, target.grad, cfg.alpha, cfg.cosine_raw)
    l_tv = tv_loss(x_prime)
    l_dummy_c = l_dummy.clamp(0.0, cfg.dummy_clamp)
    total = l_grad + cfg.lambda_tv * l_tv - cfg.lambda_dummy * l_dummy_c
    parts = {k: float(v.detach()) for k, v in (("L_total", total), ("L_grad", l_grad), ("L_tv", l_tv),
                                                ("L_dummy", l_dummy), ("L_dummy_clamped", l_dummy_c))}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise NonFiniteError(f"non-finite loss components {bad}: {parts}")
    return total, parts


@dataclass
class ReconstructionRecord:
    x_prime: np.ndarray
    guide_label: LayoutMask
    guide_class: str
    trace: list[dict]
    config: dict
    eta_used: float
    final: dict[str, float]
    diverged: bool = False
    iterations_run: int = 0

    @property
    def final_grad_loss(self) -> float:
        return self.final["L_grad"]


def initial_image(cfg: GIAConfig, size: int, dtype: torch.dtype) -> torch.Tensor:
    if cfg.init_mode == "gray":
        return torch.full((size, size), 0.5, dtype=dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    return (0.4 + 0.2 * torch.rand((size, size), generator=gen, dtype=torch.float64)).to(dtype)


def run_gia(target: GradientTarget, guide_label: LayoutMask, cfg: GIAConfig, params: ModelParams,
            iterations: int | None = None) -> ReconstructionRecord:
    """Optimise a dummy image with Adam, clamping it to [0, 1] after every step."""
    iterations = cfg.iterations if iterations is None else iterations
    params = params.detached()
    dtype = params.config.torch_dtype
    x = initial_image(cfg, params.config.image_size, dtype).requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.step_size)
    trace: list[dict] = []
    initial_grad_loss = None
    over, diverged, it = 0, False, 0
    for it in range(iterations):
        opt.zero_grad(set_to_none=True)
        total, parts = total_loss(x, guide_label, target, cfg, params)
        if initial_grad_loss is None:
            initial_grad_loss = parts["L_grad"]
        if it % cfg.log_interval == 0:
            trace.append({"iteration": it, **parts})
            if initial_grad_loss > 0 and parts["L_grad"] > cfg.divergence_factor * initial_grad_loss:
                over += 1
                if over >= cfg.divergence_patience:
                    diverged = True
                    break
            else:
                over = 0
        (g,) = torch.autograd.grad(total, x)
        x.grad = g
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    _, final = total_loss(x.detach(), guide_label, target, cfg, params)
    trace.append({"iteration": it + 1, **final})
    key = guide_label.class_key if isinstance(guide_label, LayoutMask) else "custom"
    return ReconstructionRecord(
        x_prime=x.detach().to(torch.float64).numpy().copy(), guide_label=guide_label, guide_class=key,
        trace=trace, config=asdict(cfg), eta_used=target.eta_used, final=final, diverged=diverged,
        iterations_run=it + 1)


def relative_mismatch(x_prime, guide_label, target: GradientTarget, params: ModelParams) -> float:
    """||g(x', y') - g_target|| / ||g_target||; unlike L_grad it is comparable across eta."""
    y = _label_tensor(guide_label, params.config.torch_dtype)
    g = segnet.param_grad(params, torch.as_tensor(x_prime, dtype=params.config.torch_dtype), y).to(torch.float64)
    norm = float(torch.linalg.vector_norm(target.grad))
    return float(torch.linalg.vector_norm(g - target.grad)) / norm if norm > 0 else math.inf


def grid_search_eta(w_prev, w_curr, eta_grid, guide_label: LayoutMask, cfg: GIAConfig,
                    params: ModelParams) -> tuple[float, list[dict]]:
    """Pick the learning rate whose short reconstruction best explains the update.

    Each candidate eta gets a ``grid_iterations`` reconstruction; the winner
    minimises the final relative gradient mismatch.  Raw L_grad is reported
    too but not used: its MSE part shrinks with the target's norm, which
    favours the largest eta regardless of the truth.
    """
    if not eta_grid:
        raise InvalidConfigError("eta grid is empty")
    summary = []
    for eta in eta_grid:
        target = extract_gradients(w_prev, w_curr, eta)
        rec = run_gia(target, guide_label, cfg, params, iterations=cfg.grid_iterations)
        summary.append({"eta": float(eta), "L_grad": rec.final_grad_loss, "diverged": rec.diverged,
                        "relative_mismatch": relative_mismatch(rec.x_prime, guide_label, target, params)})
    best = min(summary, key=lambda s: (s["relative_mismatch"], s["eta"]))
    return best["eta"], summary


# --------------------------------------------------------------------------
# artifacts


def write_record(rec: ReconstructionRecord, out_dir: Path, extra_meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_png(out_dir / "x_prime.png", np.round(np.clip(rec.x_prime, 0, 1) * 255))
    (out_dir / "x_prime.f32").write_bytes(np.asarray(rec.x_prime, dtype="<f4").tobytes())
    with open(out_dir / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in rec.trace:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in TRACE_COLUMNS})
    meta = {"config": rec.config, "eta_used": rec.eta_used, "seed": rec.config.get("seed"),
            "diverged": rec.diverged, "iterations_run": rec.iterations_run, "final": rec.final,
            "guide_class": rec.guide_class, "guide_cell_id": getattr(rec.guide_label, "cell_id", None),
            "shape": list(rec.x_prime.shape), **(extra_meta or {})}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return out_dir


def read_x_prime(out_dir: Path) -> np.ndarray:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "meta.json").read_text(encoding="utf-8"))
    raw = np.frombuffer((out_dir / "x_prime.f32").read_bytes(), dtype="<f4")
    return raw.reshape(meta["shape"]).astype(np.float64)


def read_trace(out_dir: Path) -> list[dict]:
    with open(Path(out_dir) / "trace.csv", newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]
