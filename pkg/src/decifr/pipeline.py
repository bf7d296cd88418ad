"""Run-directory orchestration: data -> fl -> gia -> mia -> report.

Layout of ``<runs>/<run_id>/``::

    manifest.json            config hash, versions, stage status, attack cells, checkpoint hashes
    config.cfg               the config bytes the hash was taken over
    data/<scenario>/         one dataset per member-class scenario
    fl/<scenario>/round<r>/  FedAvg checkpoints, probe updates, roundlog.json
    gia/<target>/<guide>_lam<l>/   reconstructions
    scores.csv, report.json  evaluation
    report/                  markdown tables and figures

A *scenario* is one federation whose clients all hold the member class; the
attack then reconstructs each target under every guide class and every
``lambda_dummy``.  A reconstruction is a ground-truth member when its guide
class equals the scenario's member class.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import shutil
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from functools import lru_cache
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import fedsim, giattack, mia, segnet, synthcell
from .config import ExperimentConfig, complement_class, config_hash, derive_seed, load_config, parse_config
from .errors import DecifrError

log = logging.getLogger(__name__)

STAGES = ("data", "fl", "gia", "mia", "report")
RUNS_ENV = "DECIFR_RUNS_DIR"
MANIFEST = "manifest.json"
CONFIG_COPY = "config.cfg"


class CollisionError(DecifrError):
    """The run directory exists and belongs to a different config."""


class OrderingError(DecifrError):
    """A stage was requested before the stage it depends on completed."""


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def slug(key: str) -> str:
    return key.replace("/", "-")


def lam_tag(lam: float) -> str:
    return f"lam{float(lam):g}"


def cell_key(target_id: str, guide: str, lam: float) -> str:
    return f"{target_id}/{slug(guide)}_{lam_tag(lam)}"


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")
    tmp.replace(path)


def _read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def component_versions() -> dict:
    out = {"python": platform.python_version()}
    for dist, key in (("artifact", "decifr"), ("numpy", "numpy"), ("scipy", "scipy"), ("torch", "torch")):
        try:
            out[key] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[key] = "unknown"
    return out


# --------------------------------------------------------------------------
# run handle


@dataclass
class Run:
    root: Path
    config: ExperimentConfig

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST

    def manifest(self) -> dict:
        return _read_json(self.manifest_path)

    def save_manifest(self, m: dict) -> None:
        _write_json(self.manifest_path, m)

    def status(self, stage: str) -> str:
        return self.manifest()["stages"][stage]["status"]

    def is_complete(self, stage: str) -> bool:
        return self.status(stage) == "complete"

    def require(self, stage: str) -> None:
        idx = STAGES.index(stage)
        for prior in STAGES[:idx]:
            if not self.is_complete(prior):
                raise OrderingError(f"stage '{stage}' needs stage '{prior}' to be complete first")

    def mark(self, stage: str, status: str, artifacts: list[str] | None = None) -> None:
        m = self.manifest()
        entry = m["stages"][stage]
        entry["status"] = status
        if artifacts is not None:
            entry["artifacts"] = sorted(artifacts)
        self.save_manifest(m)

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def scenarios(self) -> list[str]:
        return list(self.config.attack.member_classes)

    def data_dir(self, scenario: str) -> Path:
        return self.root / "data" / slug(scenario)

    def fl_dir(self, scenario: str) -> Path:
        return self.root / "fl" / slug(scenario)


def _stage_paths(run: Run, stage: str) -> list[Path]:
    return {"data": [run.root / "data"], "fl": [run.root / "fl"], "gia": [run.root / "gia"],
            "mia": [run.root / "scores.csv", run.root / "report.json"], "report": [run.root / "report"]}[stage]


def _reset_from(run: Run, stage: str) -> None:
    """Discard ``stage`` and everything downstream of it."""
    m = run.manifest()
    for s in STAGES[STAGES.index(stage):]:
        for p in _stage_paths(run, s):
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
        m["stages"][s] = {"status": "pending", "artifacts": []}
        if s == "gia":
            m["gia_cells"] = {}
        if s == "fl":
            m["checkpoint_hashes"] = {}
    run.save_manifest(m)


def _new_manifest(cfg: ExperimentConfig) -> dict:
    return {"run_id": cfg.run_id, "config_hash": cfg.hash, "config_file": CONFIG_COPY,
            "versions": component_versions(), "stages": {s: {"status": "pending", "artifacts": []} for s in STAGES},
            "gia_cells": {}, "checkpoint_hashes": {}}


def open_run(config: ExperimentConfig | None = None, run_id: str | None = None, force: bool = False,
             create: bool = False, root: Path | None = None) -> Run:
    """Resolve the run directory, guarding against config collisions.

    An existing run with the same config hash is reused (stages become no-ops);
    a different config is refused unless ``force``, which wipes the run.
    """
    root = Path(root) if root is not None else runs_root()
    if config is not None and run_id:
        config.run_id = run_id
    rid = run_id or (config.run_id if config else None)
    if not rid:
        raise DecifrError("no run id: pass --run-id or --config")
    run_dir = root / rid
    manifest = run_dir / MANIFEST
    if manifest.exists():
        stored = _read_json(manifest)
        stored_text = (run_dir / CONFIG_COPY).read_text(encoding="utf-8")
        if config is None:
            config = parse_config(stored_text, str(run_dir / CONFIG_COPY))
            config.run_id = rid
        elif stored["config_hash"] != config.hash:
            if not force:
                raise CollisionError(f"run '{rid}' already exists with config hash {stored['config_hash'][:12]}; "
                                     f"this config hashes to {config.hash[:12]} (use --force to replace it)")
            log.warning("replacing run %s (config changed)", rid)
            shutil.rmtree(run_dir)
        else:
            return Run(run_dir, config)
    elif run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise CollisionError(f"{run_dir} exists but is not a run directory (use --force to replace it)")
        shutil.rmtree(run_dir)
    if config is None:
        raise OrderingError(f"run '{rid}' does not exist; start it with generate-data --config F")
    if not create:
        raise OrderingError(f"run '{rid}' does not exist: stage 'data' has not been run")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_COPY).write_text(config.text, encoding="utf-8")
    _write_json(run_dir / MANIFEST, _new_manifest(config))
    return Run(run_dir, config)


def _begin(run: Run, stage: str, force: bool) -> bool:
    """Check ordering; return False when the stage is already complete (no-op)."""
    run.require(stage)
    if run.is_complete(stage):
        if not force:
            log.info("stage '%s' already complete for run %s; nothing to do", stage, run.config.run_id)
            return False
        _reset_from(run, stage)
    run.mark(stage, "running")
    return True


# --------------------------------------------------------------------------
# stage: data


def scenario_dataset_config(cfg: ExperimentConfig, scenario: str) -> synthcell.DatasetConfig:
    holdout = [scenario] + [g for g in cfg.attack.guide_classes if g != scenario]
    if len(holdout) == 1:
        holdout.append(complement_class(scenario))
    n = cfg.fl_config().num_clients
    return synthcell.DatasetConfig(clients=[synthcell.ClientSpec(cfg.dataset.per_client, [scenario]) for _ in range(n)],
                                   synthesis=cfg.synthesis(), holdout_per_class=cfg.dataset.holdout_per_class,
                                   holdout_classes=holdout, library_size=cfg.dataset.library_size, seed=cfg.seed)


def stage_data(run: Run, force: bool = False) -> None:
    if not _begin(run, "data", force):
        return
    artifacts = []
    for scenario in run.scenarios():
        ds = synthcell.build_dataset(scenario_dataset_config(run.config, scenario))
        synthcell.write_dataset(ds, run.data_dir(scenario))
        artifacts.append(run.rel(run.data_dir(scenario)))
        log.info("data %s: %d clients x %d pairs, %d held out", scenario, len(ds.clients), len(ds.clients[0]),
                 len(ds.holdout))
    run.mark("data", "complete", artifacts)


# --------------------------------------------------------------------------
# stage: fl


def select_targets(cfg: ExperimentConfig) -> list[tuple[int, int]]:
    """(client, index) of each attack target: round-robin over clients unless one is pinned."""
    n, k = cfg.attack.targets_per_class, cfg.fl_config().num_clients
    if cfg.attack.target_client is not None:
        return [(cfg.attack.target_client, i) for i in range(n)]
    return [(t % k, t // k) for t in range(n)]


def stage_fl(run: Run, force: bool = False) -> None:
    if not _begin(run, "fl", force):
        return
    cfg = run.config
    flc, mc = cfg.fl_config(), cfg.model_config()
    init = segnet.init_model(mc, derive_seed(cfg.seed, "init"))
    artifacts, hashes = [], {}
    for scenario in run.scenarios():
        ds = synthcell.load_dataset(run.data_dir(scenario))
        clients = [fedsim.ClientState.from_samples(k, s, mc.torch_dtype) for k, s in enumerate(ds.clients)]
        val = [s for s in ds.holdout if s.mask.class_key == scenario]
        validation = fedsim.ClientState.from_samples(-1, val, mc.torch_dtype) if val else None
        fl_dir = run.fl_dir(scenario)
        result = fedsim.run_training(flc, clients, init, fl_dir, keep_rounds=(cfg.target_round,),
                                     validation=validation)
        round_log = fedsim.load_round_log(fl_dir, cfg.target_round)
        targets = select_targets(cfg)
        for k, client in enumerate(clients):
            idx = [i for c, i in targets if c == k]
            if idx:
                fedsim.submit_probes(round_log, client, flc, idx)
        target_rows = [{"target_id": clients[c].cell_ids[i], "client": c, "index": i} for c, i in targets]
        history = [{"round": lg.round_index, "mean_loss": lg.mean_loss, "val_dice": lg.val_dice} for lg in result.logs]
        _write_json(fl_dir / "targets.json", {"member_class": scenario, "round": cfg.target_round,
                                              "targets": target_rows})
        _write_json(fl_dir / "history.json", history)
        artifacts += [run.rel(fl_dir / "targets.json"), run.rel(fl_dir / "history.json")]
        for p in sorted(fl_dir.rglob("*")):
            if p.is_file():
                artifacts.append(run.rel(p))
                if p.suffix == ".ckpt":
                    hashes[run.rel(p)] = fedsim.file_sha256(p)
        final_dice = next((h["val_dice"] for h in reversed(history) if h["val_dice"] is not None), None)
        log.info("fl %s: final mean loss %.4f, validation dice %s", scenario, history[-1]["mean_loss"],
                 "n/a" if final_dice is None else f"{final_dice:.4f}")
    m = run.manifest()
    m["checkpoint_hashes"] = hashes
    run.save_manifest(m)
    run.mark("fl", "complete", sorted(set(artifacts)))


def checkpoint_hashes(run: Run) -> dict[str, str]:
    """Current SHA-256 of every checkpoint recorded when training finished."""
    return {rel: fedsim.file_sha256(run.root / rel) for rel in run.manifest()["checkpoint_hashes"]}


# --------------------------------------------------------------------------
# stage: gia


@lru_cache(maxsize=8)
def _target_weights(fl_dir: str, round_index: int, target_id: str):
    round_log = fedsim.load_round_log(Path(fl_dir), round_index)
    return fedsim.intercept_probe(round_log, target_id)


@lru_cache(maxsize=8)
def _guide(key: str, size: int, seed: int) -> synthcell.LayoutMask:
    return synthcell.canonical_guide(key, size, seed)


def _run_cell(job: dict) -> dict:
    """One reconstruction; runs in the parent or in a worker process."""
    if job.get("single_thread"):
        torch.set_num_threads(1)
    w_prev, w_curr = _target_weights(job["fl_dir"], job["round"], job["target_id"])
    target = giattack.extract_gradients(w_prev, w_curr, job["eta"],
                                        source={"round": job["round"], "target_id": job["target_id"]})
    guide = _guide(job["guide"], job["image_size"], job["guide_seed"])
    gcfg = giattack.GIAConfig(**job["gia"])
    rec = giattack.run_gia(target, guide, gcfg, w_prev)
    giattack.write_record(rec, Path(job["out_dir"]), extra_meta={
        "target_id": job["target_id"], "member_class": job["member_class"], "lambda_dummy": gcfg.lambda_dummy,
        "cell": job["cell"], "round": job["round"]})
    return {"cell": job["cell"], "final_L_grad": rec.final_grad_loss, "diverged": rec.diverged}


def attack_jobs(run: Run) -> list[dict]:
    cfg = run.config
    jobs = []
    for scenario in run.scenarios():
        fl_dir = run.fl_dir(scenario)
        targets = _read_json(fl_dir / "targets.json")["targets"]
        for t in targets:
            tid = t["target_id"]
            eta = _eta_for(run, scenario, tid)
            seed = derive_seed(cfg.seed, "gia", tid)
            for lam in cfg.attack.lambda_dummy:
                gia_dict = {k: v for k, v in vars(cfg.gia_config(lam, seed)).items()}
                for guide in cfg.attack.guide_classes:
                    key = cell_key(tid, guide, lam)
                    jobs.append({"cell": key, "target_id": tid, "member_class": scenario, "guide": guide,
                                 "lambda": float(lam), "eta": eta, "gia": gia_dict, "round": cfg.target_round,
                                 "fl_dir": str(fl_dir), "out_dir": str(run.root / "gia" / key),
                                 "image_size": cfg.image_size(), "guide_seed": cfg.attack.guide_seed})
    return jobs


def _eta_for(run: Run, scenario: str, target_id: str) -> float:
    """Configured eta, or a per-target grid search guided by the first guide class."""
    cfg = run.config
    if not cfg.attack.eta_grid:
        return cfg.eta
    path = run.root / "gia" / target_id / "eta.json"
    if path.exists():
        return _read_json(path)["eta"]
    w_prev, w_curr = _target_weights(str(run.fl_dir(scenario)), cfg.target_round, target_id)
    guide = _guide(cfg.attack.guide_classes[0], cfg.image_size(), cfg.attack.guide_seed)
    eta, summary = giattack.grid_search_eta(w_prev, w_curr, cfg.attack.eta_grid, guide,
                                            cfg.gia_config(0.0, derive_seed(cfg.seed, "gia", target_id)), w_prev)
    _write_json(path, {"eta": eta, "grid": summary})
    return eta


def stage_gia(run: Run, force: bool = False, workers: int = 1, max_cells: int | None = None) -> int:
    """Run every missing (target, guide, lambda) cell; returns the number of cells run.

    ``max_cells`` stops early (the stage stays incomplete), which is how an
    interrupted sweep is simulated.
    """
    run.require("gia")
    if run.is_complete("gia"):
        if not force:
            log.info("stage 'gia' already complete for run %s; nothing to do", run.config.run_id)
            return 0
        _reset_from(run, "gia")
    run.mark("gia", "running")
    jobs = attack_jobs(run)
    done = run.manifest()["gia_cells"]
    todo = [j for j in jobs if j["cell"] not in done or not (Path(j["out_dir"]) / "meta.json").exists()]
    if max_cells is not None:
        todo = todo[:max_cells]
    log.info("gia: %d of %d cells to run (%d worker%s)", len(todo), len(jobs), workers, "s" * (workers != 1))

    def record(result: dict) -> None:
        m = run.manifest()
        m["gia_cells"][result["cell"]] = {"final_L_grad": result["final_L_grad"], "diverged": result["diverged"]}
        run.save_manifest(m)

    if workers <= 1:
        threads = torch.get_num_threads()
        torch.set_num_threads(1)  # same arithmetic as in a worker, so results do not depend on --workers
        try:
            for i, job in enumerate(todo, 1):
                record(_run_cell(job))
                if i % 10 == 0 or i == len(todo):
                    log.info("gia: %d/%d cells", i, len(todo))
        finally:
            torch.set_num_threads(threads)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, {**j, "single_thread": True}) for j in todo]
            for i, fut in enumerate(as_completed(futures), 1):
                record(fut.result())
                if i % 10 == 0 or i == len(todo):
                    log.info("gia: %d/%d cells", i, len(todo))
    done = run.manifest()["gia_cells"]
    if all(j["cell"] in done for j in jobs):
        run.mark("gia", "complete", [f"gia/{j['cell']}" for j in jobs])
    return len(todo)


# --------------------------------------------------------------------------
# stage: mia


SCORE_COLUMNS = ("target_id", "guide_class", "lambda_dummy", "dice", "ground_truth")


def score_rows(run: Run) -> list[dict]:
    cfg = run.config
    pp = cfg.postprocess()
    rows = []
    for job in attack_jobs(run):
        out = Path(job["out_dir"])
        x = giattack.read_x_prime(out)
        binary = mia.binarize(x, pp)
        synthcell.save_png(out / "binary.png", binary.mask * 255)
        guide = _guide(job["guide"], job["image_size"], job["guide_seed"])
        rows.append({"target_id": job["target_id"], "member_class": job["member_class"],
                     "guide_class": job["guide"], "lambda_dummy": job["lambda"],
                     "dice": mia.dice(binary.mask, guide.pixels),
                     "ground_truth": mia.MEMBER if job["guide"] == job["member_class"] else mia.NON_MEMBER,
                     "otsu": binary.otsu_threshold, "degenerate": binary.degenerate})
    rows.sort(key=lambda r: (r["lambda_dummy"], r["member_class"], r["target_id"], r["guide_class"]))
    return rows


def evaluate_rows(rows: list[dict], pooling: str) -> list[dict]:
    """One metrics block per (lambda, member class) cell."""
    cells = []
    keys = sorted({(r["lambda_dummy"], r["member_class"]) for r in rows})
    for lam, member in keys:
        sub = [r for r in rows if r["lambda_dummy"] == lam and r["member_class"] == member]
        pool = sub if pooling == "per_cell" else [r for r in rows if r["lambda_dummy"] == lam]
        threshold = float(np.mean([r["dice"] for r in pool]))
        verdicts = [mia.MembershipVerdict(r["target_id"], r["guide_class"], r["dice"], threshold, r["ground_truth"])
                    for r in sub]
        rep = mia.attack_metrics(verdicts)
        by_guide = {g: float(np.mean([r["dice"] for r in sub if r["guide_class"] == g]))
                    for g in sorted({r["guide_class"] for r in sub})}
        matched = [r["dice"] for r in sub if r["ground_truth"] == mia.MEMBER]
        mismatched = [r["dice"] for r in sub if r["ground_truth"] == mia.NON_MEMBER]
        cells.append({"lambda_dummy": lam, "member_class": member, "pooling": pooling, **rep.to_json(),
                      "mean_dice_by_guide": by_guide, "matched_mean_dice": float(np.mean(matched)),
                      "mismatched_mean_dice": float(np.mean(mismatched)),
                      "asymmetry_ok": bool(np.mean(matched) > np.mean(mismatched)),
                      "n_targets": len({r["target_id"] for r in sub})})
    return cells


def is_complex(key: str) -> bool:
    layer, node = synthcell.parse_class_key(key)
    return layer == synthcell.METAL or node == synthcell.FINE


def ablation_summary(cells: list[dict]) -> dict:
    """AUC per lambda for each member class; flags classes where the largest lambda loses to lambda = 0."""
    out = {}
    for member in sorted({c["member_class"] for c in cells}):
        aucs = {f"{c['lambda_dummy']:g}": c["auc"] for c in cells if c["member_class"] == member}
        lams = sorted(float(k) for k in aucs)
        entry = {"auc_by_lambda": aucs, "complex": is_complex(member)}
        if 0.0 in lams and len(lams) > 1:
            hi = lams[-1]
            entry["direction_reproduced"] = bool(aucs[f"{hi:g}"] >= aucs["0"])
            entry["flag"] = None if entry["direction_reproduced"] else (
                f"AUC at lambda_dummy={hi:g} ({aucs[f'{hi:g}']:.4f}) is below lambda_dummy=0 ({aucs['0']:.4f})")
        out[member] = entry
    return out


def stage_mia(run: Run, force: bool = False) -> None:
    if not _begin(run, "mia", force):
        return
    cfg = run.config
    rows = score_rows(run)
    with open(run.root / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for r in rows:
            w.writerow([r["target_id"], r["guide_class"], f"{r['lambda_dummy']:g}", repr(r["dice"]), r["ground_truth"]])
    cells = evaluate_rows(rows, cfg.eval.pooling)
    manifest = run.manifest()
    report = {"run_id": cfg.run_id, "config_hash": cfg.hash, "config": cfg.to_dict(), "config_text": cfg.text,
              "pooling": cfg.eval.pooling, "cells": cells, "ablation": ablation_summary(cells),
              "diverged_cells": sorted(k for k, v in manifest["gia_cells"].items() if v["diverged"]),
              "degenerate_masks": sum(bool(r["degenerate"]) for r in rows)}
    _write_json(run.root / "report.json", report)
    run.mark("mia", "complete", ["scores.csv", "report.json"] + [f"gia/{j['cell']}/binary.png" for j in attack_jobs(run)])


# --------------------------------------------------------------------------
# stage: report


def stage_report(run: Run, force: bool = False) -> Path | None:
    from . import report as report_mod

    if not _begin(run, "report", force):
        return None
    files = report_mod.write_report(run)
    run.mark("report", "complete", [run.rel(f) for f in files])
    return run.root / "report" / "report.md"


def run_all(config_path, run_id: str | None = None, workers: int = 1, force: bool = False,
            root: Path | None = None) -> Run:
    """Every stage in order (used by scripts and tests)."""
    run = open_run(load_config(config_path), run_id, force=force, create=True, root=root)
    stage_data(run)
    stage_fl(run)
    stage_gia(run, workers=workers)
    stage_mia(run)
    stage_report(run)
    return run


def seed_ablation(config_path, member: str, seeds, root: Path | None = None, workers: int = 1) -> list[dict]:
    """Re-run the pipeline for ``member`` alone under several master seeds.

    Returns one row per seed with the per-lambda AUCs and whether the largest
    lambda matched or beat lambda = 0.
    """
    from .config import variant_text

    base = load_config(config_path)
    root = Path(root) if root is not None else runs_root()
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in seeds:
        run_id = f"{base.run_id}-ablation-{slug(member)}-s{seed}"
        cfg_path = root / f"{run_id}.cfg"
        cfg_path.write_text(variant_text(base.text, seed=seed, run_id=run_id,
                                         **{"attack.member_classes": [member]}), encoding="utf-8")
        run = run_all(cfg_path, workers=workers, root=root)
        report = _read_json(run.root / "report.json")
        rows.append({"seed": seed, "run": str(run.root), **report["ablation"][member]})
    return rows


def sha256_file(path: Path) -> str:
    return fedsim.file_sha256(path)


__all__ = ["Run", "open_run", "stage_data", "stage_fl", "stage_gia", "stage_mia", "stage_report", "run_all",
           "CollisionError", "OrderingError", "STAGES", "config_hash"]
