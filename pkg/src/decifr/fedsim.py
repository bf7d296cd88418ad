"""FedAvg simulation: local SGD on clients, weighted aggregation, and a
read-only interception hook over the persisted (W_prev, W_curr) checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import segnet
from .errors import InvalidConfigError, InvalidInputError, NonFiniteError, NotFoundError, ProtocolError
from .segnet import ModelParams

log = logging.getLogger(__name__)


@dataclass
class FLConfig:
    num_clients: int = 2
    rounds: int = 200
    local_epochs: int = 2
    batch_size: int = 10
    learning_rate: float = 0.01
    eval_interval: int = 10
    checkpoint_interval: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("num_clients", "rounds", "local_epochs", "batch_size", "eval_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfigError("learning_rate must be >= 0")


@dataclass
class ClientState:
    client_id: int
    images: torch.Tensor  # (N, 1, H, W) in [0, 1]
    masks: torch.Tensor  # (N, 1, H, W) in {0, 1}
    cell_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.images.shape[0])

    @classmethod
    def from_samples(cls, client_id: int, samples, dtype=torch.float32) -> "ClientState":
        imgs = np.stack([s.image.as_unit() for s in samples])[:, None]
        masks = np.stack([s.mask.pixels for s in samples])[:, None]
        return cls(client_id, torch.as_tensor(imgs, dtype=dtype), torch.as_tensor(masks, dtype=dtype),
                   [s.cell_id for s in samples])

    def subset(self, idx) -> "ClientState":
        idx = list(idx)
        return ClientState(self.client_id, self.images[idx], self.masks[idx], [self.cell_ids[i] for i in idx])


def _shuffle_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(round_index, client_id)))


def sgd_step(params: ModelParams, images, masks, lr: float) -> tuple[ModelParams, float]:
    """One plain SGD step (no momentum, no decay); returns new params and the batch loss."""
    leaves = params.detached(requires_grad=True)
    loss = segnet.seg_loss(segnet.forward(leaves, images), masks)
    grads = torch.autograd.grad(loss, list(leaves.tensors.values()))
    new = {k: (v.detach() - lr * g) for (k, v), g in zip(params.tensors.items(), grads)}
    return ModelParams(params.config, type(params.tensors)(new)), float(loss.detach())


def local_train(global_params: ModelParams, client: ClientState, cfg: FLConfig,
                round_index: int = 0, epochs: int | None = None,
                learning_rate: float | None = None) -> tuple[ModelParams, list[float]]:
    """Run ``local_epochs`` of shuffled minibatch SGD starting from the global weights."""
    if client.size == 0:
        raise InvalidInputError(f"client {client.client_id} has no data")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    epochs = cfg.local_epochs if epochs is None else epochs
    rng = _shuffle_rng(cfg.seed, round_index, client.client_id)
    params = global_params.detached()
    losses: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(client.size)
        for start in range(0, client.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            params, loss = sgd_step(params, client.images[idx], client.masks[idx], lr)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss in round {round_index}, client {client.client_id}, "
                                     f"epoch {epoch}, step {len(losses)}")
            losses.append(loss)
    return params, losses


def weighted_mean(vectors, weights) -> torch.Tensor:
    vecs = [torch.as_tensor(v) for v in vectors]
    if not vecs:
        raise ProtocolError("nothing to aggregate")
    if len(weights) != len(vecs):
        raise ProtocolError("one weight per update required")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ProtocolError("updates have mismatched lengths")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ProtocolError(f"aggregation weights must be non-negative and sum to 1, got {list(w)}")
    out = torch.zeros_like(vecs[0])
    for v, wi in zip(vecs, w):
        out = out + float(wi) * v
    return out


def aggregate(client_params: list[ModelParams], weights) -> ModelParams:
    """Element-wise weighted mean of client models (FedAvg)."""
    if not client_params:
        raise ProtocolError("nothing to aggregate")
    ref = client_params[0]
    if any(p.names != ref.names for p in client_params):
        raise ProtocolError("client models do not share a parameter layout")
    return ref.with_flat(weighted_mean([p.flatten() for p in client_params], weights))


def mean_dice(params: ModelParams, images: torch.Tensor, masks: torch.Tensor) -> float:
    """Mean Dice of thresholded (p > 0.5) predictions on a validation slice."""
    with torch.no_grad():
        pred = (segnet.forward(params, images).probs > 0.5).to(masks.dtype)
    inter = (pred * masks).sum(dim=(1, 2, 3))
    total = pred.sum(dim=(1, 2, 3)) + masks.sum(dim=(1, 2, 3))
    dice = torch.where(total > 0, 2 * inter / total.clamp_min(1), torch.ones_like(total))
    return float(dice.mean())


# --------------------------------------------------------------------------
# run directory


def round_dir(fl_dir: Path, r: int) -> Path:
    return Path(fl_dir) / f"round{r}"


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RoundLog:
    round_index: int
    clients: dict[int, dict]  # client -> {"prev": path, "curr": path, "losses": [...]}
    global_ckpt: str | None
    val_dice: float | None = None
    mean_loss: float = float("nan")
    fl_dir: Path | None = None  # checkpoint paths are relative to this; not serialised
    probes: dict[str, dict] = field(default_factory=dict)  # cell_id -> {"client", "curr"}

    @property
    def persisted(self) -> bool:
        return self.global_ckpt is not None

    def path(self, rel: str) -> Path:
        return Path(rel) if self.fl_dir is None else Path(self.fl_dir) / rel

    def to_json(self) -> dict:
        return {"round": self.round_index, "clients": {str(k): v for k, v in self.clients.items()},
                "global": self.global_ckpt, "val_dice": self.val_dice, "mean_loss": self.mean_loss,
                "probes": self.probes}

    @classmethod
    def from_json(cls, d: dict, fl_dir: Path | None = None) -> "RoundLog":
        return cls(d["round"], {int(k): v for k, v in d["clients"].items()}, d["global"], d.get("val_dice"),
                   d.get("mean_loss", float("nan")), fl_dir, dict(d.get("probes", {})))


@dataclass
class TrainingResult:
    logs: list[RoundLog]
    final: ModelParams

    def log_for(self, r: int) -> RoundLog:
        for lg in self.logs:
            if lg.round_index == r:
                return lg
        raise NotFoundError(f"round {r} not in training log")


def run_training(cfg: FLConfig, clients: list[ClientState], init: ModelParams, fl_dir: Path,
                 keep_rounds=(), validation: ClientState | None = None) -> TrainingResult:
    """FedAvg over ``cfg.rounds`` rounds; rounds are 1-based.

    Checkpoints are written for every ``checkpoint_interval``-th round, the
    final round, and every round listed in ``keep_rounds``.
    """
    if len(clients) != cfg.num_clients:
        raise InvalidConfigError(f"config expects {cfg.num_clients} clients, dataset has {len(clients)}")
    fl_dir = Path(fl_dir)
    sizes = np.array([c.size for c in clients], dtype=np.float64)
    weights = sizes / sizes.sum()
    keep = set(keep_rounds) | {cfg.rounds}
    params = init.detached()
    logs: list[RoundLog] = []
    for r in range(1, cfg.rounds + 1):
        persist = r % cfg.checkpoint_interval == 0 or r in keep
        d = round_dir(fl_dir, r)
        updates, entries = [], {}
        for client in clients:
            try:
                updated, losses = local_train(params, client, cfg, round_index=r)
            except NonFiniteError as exc:
                raise NonFiniteError(f"round {r}: {exc}") from exc
            updates.append(updated)
            entry = {"losses": losses, "prev": None, "curr": None}
            if persist:
                for kind, p in (("prev", params), ("curr", updated)):
                    name = f"client{client.client_id}_{kind}.ckpt"
                    segnet.save_checkpoint(p, d / name, round=r, client=client.client_id, seed=cfg.seed)
                    entry[kind] = f"{d.name}/{name}"
            entries[client.client_id] = entry
        params = aggregate(updates, weights)
        if not params.is_finite():
            raise NonFiniteError(f"round {r}: aggregated weights are not finite")
        val = None
        if validation is not None and (r % cfg.eval_interval == 0 or r == cfg.rounds):
            val = mean_dice(params, validation.images, validation.masks)
        log_ = RoundLog(r, entries, None, val, float(np.mean([np.mean(e["losses"]) for e in entries.values()])),
                        fl_dir)
        if persist:
            segnet.save_checkpoint(params, d / "global.ckpt", round=r, seed=cfg.seed)
            log_.global_ckpt = f"{d.name}/global.ckpt"
            _write_round_log(log_)
        logs.append(log_)
        log.info("round %d mean loss %.4f%s", r, log_.mean_loss, "" if val is None else f" val dice {val:.4f}")
    return TrainingResult(logs, params)


def load_round_log(fl_dir: Path, r: int) -> RoundLog:
    path = round_dir(fl_dir, r) / "roundlog.json"
    if not path.exists():
        raise NotFoundError(f"round {r} was not persisted under {fl_dir}")
    return RoundLog.from_json(json.loads(path.read_text(encoding="utf-8")), fl_dir)


def intercept(round_log: RoundLog, client_id: int) -> tuple[ModelParams, ModelParams]:
    """Read the pre/post local-training weights a passive server observes."""
    entry = round_log.clients.get(client_id)
    if entry is None or entry.get("prev") is None or entry.get("curr") is None:
        raise NotFoundError(f"no persisted update for client {client_id} in round {round_log.round_index}")
    w_prev, _ = segnet.load_checkpoint(round_log.path(entry["prev"]))
    w_curr, _ = segnet.load_checkpoint(round_log.path(entry["curr"]))
    return w_prev, w_curr


def _write_round_log(log_: RoundLog) -> None:
    path = round_dir(log_.fl_dir, log_.round_index) / "roundlog.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(log_.to_json(), sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def submit_probes(round_log: RoundLog, client: ClientState, cfg: FLConfig, indices) -> RoundLog:
    """Persist single-sample, single-step updates from the round's starting weights.

    Each probe is the update client ``client`` would submit if it trained one
    SGD step on that one sample; they give the attacker one observed update
    per training record.  Probe checkpoints sit beside the round's regular
    checkpoints and are listed in ``roundlog.json``.
    """
    if round_log.fl_dir is None or not round_log.persisted:
        raise NotFoundError(f"round {round_log.round_index} has no persisted checkpoints")
    w_prev, _ = intercept(round_log, client.client_id)
    d = round_dir(round_log.fl_dir, round_log.round_index)
    for i in indices:
        one = client.subset([i])
        w_probe, _ = sgd_step(w_prev, one.images, one.masks, cfg.learning_rate)
        name = f"probe_{one.cell_ids[0]}.ckpt"
        segnet.save_checkpoint(w_probe, d / name, round=round_log.round_index, client=client.client_id,
                               cell_id=one.cell_ids[0], seed=cfg.seed)
        round_log.probes[one.cell_ids[0]] = {"client": client.client_id, "curr": f"{d.name}/{name}"}
    _write_round_log(round_log)
    return round_log


def intercept_probe(round_log: RoundLog, cell_id: str) -> tuple[ModelParams, ModelParams]:
    """(W_prev, W_curr) of a persisted probe update."""
    entry = round_log.probes.get(cell_id)
    if entry is None:
        raise NotFoundError(f"no probe update for {cell_id} in round {round_log.round_index}")
    w_prev, _ = intercept(round_log, entry["client"])
    w_curr, _ = segnet.load_checkpoint(round_log.path(entry["curr"]))
    return w_prev, w_curr
